//! Python bindings for the geoweak pipeline.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use geoweak_core::datamodel::{self, GeoPoint, ImageId, OrientedBox};
use geoweak_core::error::Error;
use geoweak_core::evaluator::{self, EvalConfig};
use geoweak_core::geocluster::{self, ClusterLabel, DbscanParams};
use geoweak_core::geometry;
use geoweak_core::harness::{self, report};
use geoweak_core::parsers::{self, ParseMode};
use geoweak_core::splitter::{
    self, LabelMode, LabelModeAssignment, Split, SplitAssignment, SplitRatios, WeakSource,
};
use geoweak_core::teachersim::{self, NoiseModel};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "BBox", module = "geoweak", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox {
    inner: datamodel::BBox,
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> PyResult<Self> {
        datamodel::BBox::new(xmin, ymin, xmax, ymax)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        datamodel::BBox::from_xywh(x, y, w, h)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn xmin(&self) -> f64 {
        self.inner.xmin
    }
    #[getter]
    fn ymin(&self) -> f64 {
        self.inner.ymin
    }
    #[getter]
    fn xmax(&self) -> f64 {
        self.inner.xmax
    }
    #[getter]
    fn ymax(&self) -> f64 {
        self.inner.ymax
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn center(&self) -> (f64, f64) {
        let c = geometry::box_center(&self.inner);
        (c.x, c.y)
    }

    #[allow(clippy::wrong_self_convention)]
    fn to_xywh(&self) -> [f64; 4] {
        self.inner.to_xywh()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        geometry::iou(&self.inner, &other.inner)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        geometry::contains(&self.inner, &datamodel::PixelPoint { x, y })
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!("BBox({}, {}, {}, {})", b.xmin, b.ymin, b.xmax, b.ymax)
    }

    fn __eq__(&self, other: &PyBBox) -> bool {
        self.inner == other.inner
    }
}

/// An annotated image collection.
#[pyclass(name = "Dataset", module = "geoweak", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datamodel::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Parse the JSON dataset format; `lenient` drops malformed records instead of failing.
    #[staticmethod]
    #[pyo3(signature = (text, lenient = false))]
    fn from_json(text: &str, lenient: bool) -> PyResult<Self> {
        let mode = if lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        };
        parsers::parse_detection_dataset_str(text, mode)
            .map(|p| Self { inner: p.dataset })
            .map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        parsers::write_dataset(&self.inner).map_err(py_err)
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.images.len()
    }

    #[getter]
    fn num_annotations(&self) -> usize {
        self.inner.annotation_count()
    }

    fn image_ids(&self) -> Vec<ImageId> {
        self.inner.images.iter().map(|im| im.image_id).collect()
    }

    /// Boxes of one image as `(annotation_id, class_id, BBox)`.
    fn boxes(&self, image_id: ImageId) -> PyResult<Vec<(u64, u32, PyBBox)>> {
        let im = self
            .inner
            .image(image_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown image {image_id}")))?;
        Ok(im
            .annotations
            .iter()
            .filter_map(|a| a.bbox().map(|b| (a.id, a.class_id, PyBBox { inner: *b })))
            .collect())
    }

    /// Violations as `(kind, message)` pairs; empty when the dataset is valid.
    fn validate(&self) -> Vec<(String, String)> {
        datamodel::validate_dataset(&self.inner)
            .violations
            .into_iter()
            .map(|v| {
                let kind = serde_json::to_value(v.kind)
                    .ok()
                    .and_then(|k| k.as_str().map(str::to_owned))
                    .unwrap_or_default();
                (kind, v.message)
            })
            .collect()
    }

    /// Copy with cluster ids assigned from annotation geo points.
    #[pyo3(signature = (eps_m = 2000.0, min_pts = 3))]
    fn cluster(&self, eps_m: f64, min_pts: usize) -> PyResult<Self> {
        let params = DbscanParams::new(eps_m, min_pts).map_err(py_err)?;
        geocluster::cluster_dataset(&self.inner, &params)
            .map(|(inner, _)| Self { inner })
            .map_err(py_err)
    }

    fn cluster_ids(&self) -> BTreeMap<ImageId, Option<u64>> {
        self.inner
            .images
            .iter()
            .map(|im| (im.image_id, im.cluster_id))
            .collect()
    }

    /// Copy without images larger than `max_dim` or with more than `max_annotations` objects.
    #[pyo3(signature = (max_dim = parsers::FAIR1M_MAX_DIM, max_annotations = parsers::FAIR1M_MAX_ANNOTATIONS))]
    fn filter_fair1m(&self, max_dim: u32, max_annotations: usize) -> Self {
        Self {
            inner: parsers::filter_fair1m(&self.inner, max_dim, max_annotations).0,
        }
    }
}

fn split_to_py(s: &SplitAssignment) -> BTreeMap<ImageId, String> {
    s.assignments
        .iter()
        .map(|(id, s)| (*id, s.as_str().to_string()))
        .collect()
}

fn split_from_py(m: BTreeMap<ImageId, String>) -> PyResult<SplitAssignment> {
    let assignments = m
        .into_iter()
        .map(|(id, s)| s.parse::<Split>().map(|s| (id, s)).map_err(py_err))
        .collect::<PyResult<_>>()?;
    Ok(SplitAssignment { assignments })
}

fn modes_from_py(m: BTreeMap<ImageId, String>) -> PyResult<LabelModeAssignment> {
    let modes = m
        .into_iter()
        .map(|(id, s)| s.parse::<LabelMode>().map(|s| (id, s)).map_err(py_err))
        .collect::<PyResult<_>>()?;
    Ok(LabelModeAssignment { modes })
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    geometry::iou(&a.inner, &b.inner)
}

/// Axis-aligned rectangle around an oriented box given as 8 corner coordinates.
#[pyfunction]
fn mbr(corners: [f64; 8]) -> PyResult<PyBBox> {
    OrientedBox::from_flat(corners)
        .and_then(|o| geometry::mbr(&o))
        .map(|inner| PyBBox { inner })
        .map_err(py_err)
}

/// Great-circle distance in meters.
#[pyfunction]
fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    geocluster::haversine(
        &GeoPoint {
            lat: lat1,
            lon: lon1,
        },
        &GeoPoint {
            lat: lat2,
            lon: lon2,
        },
    )
}

/// Cluster `(lat, lon)` points; returns one cluster id per point, `None` for noise.
#[pyfunction]
#[pyo3(signature = (points, eps_m = 2000.0, min_pts = 3))]
fn dbscan(points: Vec<(f64, f64)>, eps_m: f64, min_pts: usize) -> PyResult<Vec<Option<u64>>> {
    let params = DbscanParams::new(eps_m, min_pts).map_err(py_err)?;
    let pts: Vec<GeoPoint> = points
        .into_iter()
        .map(|(lat, lon)| GeoPoint { lat, lon })
        .collect();
    Ok(geocluster::dbscan(&pts, &params)
        .labels
        .into_iter()
        .map(|l| match l {
            ClusterLabel::Cluster(c) => Some(c),
            ClusterLabel::Noise => None,
        })
        .collect())
}

/// Split a clustered dataset into train/val/test without breaking clusters.
#[pyfunction]
#[pyo3(signature = (dataset, seed, ratios = (0.7, 0.15, 0.15)))]
fn split_random(
    dataset: &PyDataset,
    seed: u64,
    ratios: (f64, f64, f64),
) -> PyResult<BTreeMap<ImageId, String>> {
    let r = SplitRatios::new(ratios.0, ratios.1, ratios.2).map_err(py_err)?;
    splitter::split_random_by_cluster(&dataset.inner, &r, seed)
        .map(|s| split_to_py(&s))
        .map_err(py_err)
}

/// Geographic split by country and longitude, with cluster leakage repaired.
#[pyfunction]
#[pyo3(signature = (dataset, meridian = splitter::US_CENTER_MERIDIAN))]
fn split_region(dataset: &PyDataset, meridian: f64) -> PyResult<BTreeMap<ImageId, String>> {
    splitter::split_by_region(&dataset.inner, &splitter::out_country_rules(meridian))
        .map(|(s, _)| split_to_py(&s))
        .map_err(py_err)
}

/// Strong/weak label modes for the training images.
#[pyfunction]
fn sample_fractions(
    dataset: &PyDataset,
    split: BTreeMap<ImageId, String>,
    fraction: f64,
    seed: u64,
) -> PyResult<BTreeMap<ImageId, String>> {
    let split = split_from_py(split)?;
    splitter::sample_label_fractions(&dataset.inner, &split, fraction, seed)
        .map(|m| {
            m.modes
                .iter()
                .map(|(id, m)| (*id, m.as_str().to_string()))
                .collect()
        })
        .map_err(py_err)
}

#[pyfunction]
fn strong_count(fraction: f64, train_size: usize) -> usize {
    splitter::strong_count(fraction, train_size)
}

/// Pseudo boxes for the weak images in `modes`, perturbed from their true boxes.
#[pyfunction]
#[pyo3(signature = (truth, modes, seed, center_sigma = 0.0, scale_sigma = 0.0, drop_rate = 0.0, score_alpha = 2.0, score_beta = 2.0))]
#[allow(clippy::too_many_arguments)]
fn pseudolabel(
    truth: &PyDataset,
    modes: BTreeMap<ImageId, String>,
    seed: u64,
    center_sigma: f64,
    scale_sigma: f64,
    drop_rate: f64,
    score_alpha: f64,
    score_beta: f64,
) -> PyResult<PyDataset> {
    let modes = modes_from_py(modes)?;
    let weak_truth = datamodel::Dataset::new(
        truth.inner.class_table.clone(),
        truth
            .inner
            .images
            .iter()
            .filter(|im| modes.is_weak(im.image_id))
            .cloned()
            .collect(),
    );
    let noise = NoiseModel {
        center_jitter_sigma: center_sigma,
        scale_jitter_sigma: scale_sigma,
        drop_rate,
        score_alpha,
        score_beta,
    };
    splitter::derive_weak_labels(&truth.inner, &modes, WeakSource::BoxCenter)
        .map(|w| {
            datamodel::Dataset::new(
                w.class_table.clone(),
                w.images
                    .into_iter()
                    .filter(|im| modes.is_weak(im.image_id))
                    .collect(),
            )
        })
        .and_then(|weak| teachersim::simulate_pseudo_labels(&weak, &weak_truth, &noise, seed))
        .map(|inner| PyDataset { inner })
        .map_err(py_err)
}

/// Evaluate predictions (JSON prediction list) against `gt`; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (gt, predictions_json, thresholds = vec![0.25, 0.5, 0.75]))]
fn evaluate(gt: &PyDataset, predictions_json: &str, thresholds: Vec<f64>) -> PyResult<String> {
    let preds = parsers::parse_predictions(predictions_json.as_bytes()).map_err(py_err)?;
    let cfg = EvalConfig::new(thresholds).map_err(py_err)?;
    let result = evaluator::evaluate(&preds, &gt.inner, &cfg).map_err(py_err)?;
    serde_json::to_string(&result).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Pseudo boxes of a pseudo-labelled dataset as a JSON prediction list.
#[pyfunction]
fn pseudo_predictions(dataset: &PyDataset) -> PyResult<String> {
    parsers::write_predictions(&teachersim::pseudo_detections(&dataset.inner)).map_err(py_err)
}

/// Synthetic corpus; returns the dataset.
#[pyfunction]
#[pyo3(signature = (n_images, seed, n_classes = 1, n_farms = None, min_objects = 1, max_objects = 6))]
fn synth(
    n_images: usize,
    seed: u64,
    n_classes: usize,
    n_farms: Option<usize>,
    min_objects: usize,
    max_objects: usize,
) -> PyResult<PyDataset> {
    let params = harness::SynthParams {
        n_images,
        n_classes,
        n_farms: n_farms.unwrap_or(n_images.div_ceil(5)),
        min_objects,
        max_objects,
        seed,
        ..Default::default()
    };
    harness::generate_synthetic(&params)
        .map(|c| PyDataset { inner: c.dataset })
        .map_err(py_err)
}

/// Signed one-decimal difference `to - from`.
#[pyfunction]
fn format_delta(from: f64, to: f64) -> String {
    report::format_delta(from, to)
}

/// Render an AP table given as CSV (`group,fraction,iou_<t>...`) to markdown.
#[pyfunction]
#[pyo3(signature = (csv_text, title = "AP", percent = true))]
fn render_report(csv_text: &str, title: &str, percent: bool) -> PyResult<String> {
    let scale = if percent {
        report::ApScale::Percent
    } else {
        report::ApScale::Fraction
    };
    report::ApTable::from_csv(csv_text, scale)
        .map(|t| t.render_markdown(title))
        .map_err(py_err)
}

#[pymodule]
fn geoweak(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(mbr, m)?)?;
    m.add_function(wrap_pyfunction!(haversine, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(split_random, m)?)?;
    m.add_function(wrap_pyfunction!(split_region, m)?)?;
    m.add_function(wrap_pyfunction!(sample_fractions, m)?)?;
    m.add_function(wrap_pyfunction!(strong_count, m)?)?;
    m.add_function(wrap_pyfunction!(pseudolabel, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(format_delta, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    Ok(())
}
