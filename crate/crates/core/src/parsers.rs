//! File formats: detection datasets (axis-aligned and oriented), point
//! collections, prediction lists, and the split / label-mode manifests.
//!
//! All documents are JSON except the manifests, which are two-column CSV with a
//! header row. Writers are deterministic: the same value always produces the
//! same bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datamodel::{
    Annotation, AnnotationId, BBox, ClassEntry, ClassId, ClassTable, Dataset, Detection, GeoPoint,
    Geometry, ImageId, ImageRecord, OrientedBox, PixelPoint, Provenance,
};
use crate::error::{Error, Result};
use crate::geometry::mbr;
use crate::splitter::{
    derive_weak_labels, LabelMode, LabelModeAssignment, Split, SplitAssignment, WeakSource,
};

/// Clamping by less than this is float noise from the `x + w` round trip and is not reported.
const CLAMP_REPORT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Abort on the first malformed record.
    #[default]
    Strict,
    /// Drop malformed records and count them.
    Lenient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDataset {
    pub dataset: Dataset,
    /// Records skipped in lenient mode.
    pub dropped: usize,
    /// Annotations whose boxes were clipped to the image.
    pub clamped: Vec<AnnotationId>,
    /// True when the input carried oriented boxes.
    pub oriented: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRow {
    id: ClassId,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRow {
    id: ImageId,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    id: AnnotationId,
    image_id: ImageId,
    category_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    obb: Option<[f64; 8]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "is_manual")]
    provenance: Provenance,
}

fn is_manual(p: &Provenance) -> bool {
    *p == Provenance::Manual
}

#[derive(Debug, Serialize)]
struct DatasetDoc {
    categories: Vec<CategoryRow>,
    images: Vec<ImageRow>,
    annotations: Vec<AnnotationRow>,
}

fn read_all(mut reader: impl Read) -> Result<String> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    Ok(text)
}

fn take_array<'a>(doc: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a Vec<Value>> {
    doc.get(key)
        .ok_or_else(|| Error::Format(format!("missing top-level key `{key}`")))?
        .as_array()
        .ok_or_else(|| Error::Format(format!("top-level `{key}` must be a list")))
}

fn geo_pair(
    lat: Option<f64>,
    lon: Option<f64>,
    what: &str,
) -> std::result::Result<Option<GeoPoint>, String> {
    match (lat, lon) {
        (None, None) => Ok(None),
        (Some(lat), Some(lon)) => GeoPoint::new(lat, lon)
            .map(Some)
            .map_err(|_| format!("{what} ({lat}, {lon}) out of range")),
        _ => Err(format!("{what} needs both latitude and longitude")),
    }
}

/// Handles strict/lenient bookkeeping for per-record failures.
struct RecordSink {
    mode: ParseMode,
    dropped: usize,
}

impl RecordSink {
    fn reject(&mut self, section: &str, index: usize, message: String) -> Result<()> {
        match self.mode {
            ParseMode::Strict => Err(Error::record(index, format!("{section}: {message}"))),
            ParseMode::Lenient => {
                self.dropped += 1;
                Ok(())
            }
        }
    }
}

/// Parse a dataset document. The oriented variant is recognised by `obb`
/// fields on annotations; those are converted to enclosing axis-aligned boxes.
pub fn parse_detection_dataset(reader: impl Read, mode: ParseMode) -> Result<ParsedDataset> {
    parse_detection_dataset_str(&read_all(reader)?, mode)
}

pub fn parse_detection_dataset_str(text: &str, mode: ParseMode) -> Result<ParsedDataset> {
    let root: Value = serde_json::from_str(text)?;
    let doc = root
        .as_object()
        .ok_or_else(|| Error::Format("dataset document must be an object".into()))?;

    let categories: Vec<CategoryRow> =
        serde_json::from_value(Value::Array(take_array(doc, "categories")?.clone()))
            .map_err(|e| Error::Format(format!("categories: {e}")))?;
    let class_table = ClassTable::new(
        categories
            .into_iter()
            .map(|c| ClassEntry {
                id: c.id,
                name: c.name,
            })
            .collect(),
    )
    .map_err(|e| Error::Format(format!("categories: {e}")))?;

    let mut sink = RecordSink { mode, dropped: 0 };

    let mut images: Vec<ImageRecord> = Vec::new();
    let mut index_of: HashMap<ImageId, usize> = HashMap::new();
    for (i, raw) in take_array(doc, "images")?.iter().enumerate() {
        let row: ImageRow = match serde_json::from_value(raw.clone()) {
            Ok(r) => r,
            Err(e) => {
                sink.reject("images", i, e.to_string())?;
                continue;
            }
        };
        let problem = if row.width == 0 || row.height == 0 {
            Some(format!("image {} has zero size", row.id))
        } else if index_of.contains_key(&row.id) {
            Some(format!("duplicate image id {}", row.id))
        } else {
            None
        };
        let geo = geo_pair(row.lat, row.lon, "image centroid");
        if let Some(msg) = problem.or(geo.as_ref().err().cloned()) {
            sink.reject("images", i, msg)?;
            continue;
        }
        let mut im = ImageRecord::new(row.id, row.width, row.height);
        im.country = row.country;
        im.centroid_geo = geo.unwrap();
        im.cluster_id = row.cluster_id;
        index_of.insert(row.id, images.len());
        images.push(im);
    }

    let annotations = take_array(doc, "annotations")?;
    let oriented = annotations
        .iter()
        .any(|a| a.as_object().is_some_and(|o| o.contains_key("obb")));
    let mut seen: HashSet<AnnotationId> = HashSet::new();
    let mut clamped = Vec::new();
    for (i, raw) in annotations.iter().enumerate() {
        let row: AnnotationRow = match serde_json::from_value(raw.clone()) {
            Ok(r) => r,
            Err(e) => {
                sink.reject("annotations", i, e.to_string())?;
                continue;
            }
        };
        match build_annotation(&row, &class_table, &index_of, &images, &seen) {
            Ok((ann, was_clamped)) => {
                seen.insert(ann.id);
                if was_clamped {
                    clamped.push(ann.id);
                }
                images[index_of[&row.image_id]].annotations.push(ann);
            }
            Err(msg) => sink.reject("annotations", i, msg)?,
        }
    }

    Ok(ParsedDataset {
        dataset: Dataset::new(class_table, images),
        dropped: sink.dropped,
        clamped,
        oriented,
    })
}

fn build_annotation(
    row: &AnnotationRow,
    classes: &ClassTable,
    index_of: &HashMap<ImageId, usize>,
    images: &[ImageRecord],
    seen: &HashSet<AnnotationId>,
) -> std::result::Result<(Annotation, bool), String> {
    if seen.contains(&row.id) {
        return Err(format!("duplicate annotation id {}", row.id));
    }
    let im = index_of
        .get(&row.image_id)
        .map(|&i| &images[i])
        .ok_or_else(|| {
            format!(
                "annotation {} references unknown image {}",
                row.id, row.image_id
            )
        })?;
    if !classes.contains(row.category_id) {
        return Err(format!(
            "annotation {} has unknown category {}",
            row.id, row.category_id
        ));
    }
    let given = [row.bbox.is_some(), row.point.is_some(), row.obb.is_some()];
    if given.iter().filter(|g| **g).count() != 1 {
        return Err(format!(
            "annotation {} needs exactly one of bbox, point, obb",
            row.id
        ));
    }
    let (w, h) = (im.width as f64, im.height as f64);
    let mut was_clamped = false;
    let geometry = if let Some(p) = row.point {
        Geometry::Point(PixelPoint::new(p[0], p[1]).map_err(|e| e.to_string())?)
    } else {
        let raw = if let Some([x, y, bw, bh]) = row.bbox {
            if !(bw > 0.0 && bh > 0.0) {
                return Err(format!(
                    "annotation {} has non-positive box size {bw}x{bh}",
                    row.id
                ));
            }
            BBox::from_xywh(x, y, bw, bh)
        } else {
            OrientedBox::from_flat(row.obb.unwrap()).and_then(|o| mbr(&o))
        }
        .map_err(|e| format!("annotation {}: {e}", row.id))?;
        let clipped = raw.clamped(w, h);
        if !clipped.has_positive_area() {
            return Err(format!(
                "annotation {} box {raw} lies outside the image",
                row.id
            ));
        }
        let shift = (clipped.xmin - raw.xmin).abs()
            + (clipped.ymin - raw.ymin).abs()
            + (clipped.xmax - raw.xmax).abs()
            + (clipped.ymax - raw.ymax).abs();
        was_clamped = shift > CLAMP_REPORT_TOLERANCE;
        Geometry::Box(clipped)
    };
    let source_geo = geo_pair(row.source_lat, row.source_lon, "source location")?;
    let source_point = match row.source_point {
        Some([x, y]) => Some(PixelPoint::new(x, y).map_err(|e| e.to_string())?),
        None => None,
    };
    if row.score.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
        return Err(format!("annotation {} score outside [0,1]", row.id));
    }
    Ok((
        Annotation {
            id: row.id,
            class_id: row.category_id,
            geometry,
            source_geo,
            source_point,
            score: row.score,
            provenance: row.provenance,
        },
        was_clamped,
    ))
}

/// Serialize a dataset as an axis-aligned dataset document.
pub fn write_dataset(d: &Dataset) -> Result<String> {
    let doc = DatasetDoc {
        categories: d
            .class_table
            .entries()
            .iter()
            .map(|c| CategoryRow {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        images: d
            .images
            .iter()
            .map(|im| ImageRow {
                id: im.image_id,
                width: im.width,
                height: im.height,
                country: im.country.clone(),
                lat: im.centroid_geo.map(|g| g.lat),
                lon: im.centroid_geo.map(|g| g.lon),
                cluster_id: im.cluster_id,
            })
            .collect(),
        annotations: d
            .annotations()
            .map(|(im, a)| {
                let (bbox, point) = match a.geometry {
                    Geometry::Box(b) => (Some(b.to_xywh()), None),
                    Geometry::Point(p) => (None, Some([p.x, p.y])),
                };
                AnnotationRow {
                    id: a.id,
                    image_id: im.image_id,
                    category_id: a.class_id,
                    bbox,
                    point,
                    obb: None,
                    source_lat: a.source_geo.map(|g| g.lat),
                    source_lon: a.source_geo.map(|g| g.lon),
                    source_point: a.source_point.map(|p| [p.x, p.y]),
                    score: a.score,
                    provenance: a.provenance,
                }
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn read_dataset_file(path: &Path, mode: ParseMode) -> Result<ParsedDataset> {
    parse_detection_dataset(fs::File::open(path)?, mode)
}

// ---------------------------------------------------------------------------
// point collections
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointLocation {
    Geo(GeoPoint),
    Pixel(PixelPoint),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointRecord {
    pub location: PointLocation,
    pub class_id: ClassId,
    pub image_id: Option<ImageId>,
}

#[derive(Debug, Deserialize)]
struct GeoFeature {
    geometry: GeoGeometry,
    #[serde(default)]
    properties: GeoProperties,
}

#[derive(Debug, Deserialize)]
struct GeoGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct GeoProperties {
    #[serde(default)]
    category_id: ClassId,
    #[serde(default)]
    image_id: Option<ImageId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PixelRow {
    image_id: ImageId,
    x: f64,
    y: f64,
    category_id: ClassId,
}

/// Parse either a GeoJSON-style `FeatureCollection` of `Point` features
/// (`[lon, lat]` order) or a list of pixel records. Kinds may not be mixed.
pub fn parse_point_collection(reader: impl Read) -> Result<Vec<PointRecord>> {
    let root: Value = serde_json::from_str(&read_all(reader)?)?;
    let items = match &root {
        Value::Array(items) => items,
        Value::Object(o) if o.get("type").and_then(Value::as_str) == Some("FeatureCollection") => o
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("FeatureCollection without `features` list".into()))?,
        _ => {
            return Err(Error::Format(
                "expected a FeatureCollection or a list of points".into(),
            ))
        }
    };

    let mut out = Vec::with_capacity(items.len());
    let mut geo_kind: Option<bool> = None;
    for (i, item) in items.iter().enumerate() {
        let is_geo = item.get("geometry").is_some();
        match geo_kind {
            None => geo_kind = Some(is_geo),
            Some(k) if k != is_geo => {
                return Err(Error::record(
                    i,
                    "geographic and pixel points may not be mixed",
                ))
            }
            _ => {}
        }
        let rec = if is_geo {
            let f: GeoFeature = serde_json::from_value(item.clone())
                .map_err(|e| Error::record(i, e.to_string()))?;
            if f.geometry.kind != "Point" || f.geometry.coordinates.len() < 2 {
                return Err(Error::record(i, "geometry must be a Point with [lon, lat]"));
            }
            let (lon, lat) = (f.geometry.coordinates[0], f.geometry.coordinates[1]);
            let g = GeoPoint::new(lat, lon).map_err(|e| Error::record(i, e.to_string()))?;
            PointRecord {
                location: PointLocation::Geo(g),
                class_id: f.properties.category_id,
                image_id: f.properties.image_id,
            }
        } else {
            let r: PixelRow = serde_json::from_value(item.clone())
                .map_err(|e| Error::record(i, e.to_string()))?;
            let p = PixelPoint::new(r.x, r.y).map_err(|e| Error::record(i, e.to_string()))?;
            PointRecord {
                location: PointLocation::Pixel(p),
                class_id: r.category_id,
                image_id: Some(r.image_id),
            }
        };
        out.push(rec);
    }
    Ok(out)
}

pub fn write_point_collection(points: &[PointRecord]) -> Result<String> {
    let all_geo = points
        .iter()
        .all(|p| matches!(p.location, PointLocation::Geo(_)));
    let all_pixel = points
        .iter()
        .all(|p| matches!(p.location, PointLocation::Pixel(_)));
    let value = if all_geo {
        let features: Vec<Value> = points
            .iter()
            .map(|p| {
                let PointLocation::Geo(g) = p.location else {
                    unreachable!()
                };
                let mut props = serde_json::Map::new();
                props.insert("category_id".into(), p.class_id.into());
                if let Some(id) = p.image_id {
                    props.insert("image_id".into(), id.into());
                }
                serde_json::json!({
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [g.lon, g.lat]},
                    "properties": props,
                })
            })
            .collect();
        serde_json::json!({"type": "FeatureCollection", "features": features})
    } else if all_pixel {
        let rows: Result<Vec<PixelRow>> = points
            .iter()
            .map(|p| {
                let PointLocation::Pixel(px) = p.location else {
                    unreachable!()
                };
                Ok(PixelRow {
                    image_id: p
                        .image_id
                        .ok_or_else(|| Error::Consistency("pixel point without image id".into()))?,
                    x: px.x,
                    y: px.y,
                    category_id: p.class_id,
                })
            })
            .collect();
        serde_json::to_value(rows?)?
    } else {
        return Err(Error::Consistency(
            "cannot write geographic and pixel points to one file".into(),
        ));
    };
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------------------
// predictions
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    image_id: ImageId,
    category_id: ClassId,
    bbox: [f64; 4],
    score: f64,
}

/// Parse a prediction list, sorted stably by image id then descending score.
/// An empty document means no detections.
pub fn parse_predictions(reader: impl Read) -> Result<Vec<Detection>> {
    let text = read_all(reader)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let items: Vec<Value> = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let r: PredictionRow =
            serde_json::from_value(item).map_err(|e| Error::record(i, e.to_string()))?;
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(Error::record(i, format!("score {} outside [0,1]", r.score)));
        }
        let [x, y, w, h] = r.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::record(i, format!("non-positive box size {w}x{h}")));
        }
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| Error::record(i, e.to_string()))?;
        out.push(Detection {
            image_id: r.image_id,
            class_id: r.category_id,
            bbox,
            score: r.score,
        });
    }
    out.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.score.total_cmp(&a.score))
    });
    Ok(out)
}

pub fn write_predictions(dets: &[Detection]) -> Result<String> {
    let rows: Vec<PredictionRow> = dets
        .iter()
        .map(|d| PredictionRow {
            image_id: d.image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&rows)?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------------------
// FAIR1M filter
// ---------------------------------------------------------------------------

pub const FAIR1M_MAX_DIM: u32 = 2000;
pub const FAIR1M_MAX_ANNOTATIONS: usize = 100;

/// Keep images no larger than `max_dim` on either side and with at most
/// `max_annotations` objects. Returns the filtered dataset and the number dropped.
pub fn filter_fair1m(d: &Dataset, max_dim: u32, max_annotations: usize) -> (Dataset, usize) {
    let (kept, dropped): (Vec<_>, Vec<_>) = d.images.iter().cloned().partition(|im| {
        im.width <= max_dim && im.height <= max_dim && im.annotations.len() <= max_annotations
    });
    (Dataset::new(d.class_table.clone(), kept), dropped.len())
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

fn write_two_column<K: ToString, V: AsRef<str>>(
    header: [&str; 2],
    rows: impl Iterator<Item = (K, V)>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.to_string().as_str(), v.as_ref()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn read_two_column(reader: impl Read, header: [&str; 2]) -> Result<Vec<(ImageId, String)>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let got = r.headers()?.clone();
    if got.len() != 2 || got[0] != *header[0] || got[1] != *header[1] {
        return Err(Error::Format(format!(
            "expected header `{},{}`",
            header[0], header[1]
        )));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::record(i, "expected two columns"));
        }
        let id: ImageId = rec[0]
            .parse()
            .map_err(|_| Error::record(i, format!("bad image id `{}`", &rec[0])))?;
        if !seen.insert(id) {
            return Err(Error::record(i, format!("image {id} listed twice")));
        }
        out.push((id, rec[1].to_string()));
    }
    Ok(out)
}

pub fn write_split_manifest(s: &SplitAssignment) -> Result<String> {
    write_two_column(
        ["image_id", "split"],
        s.assignments.iter().map(|(id, sp)| (id, sp.as_str())),
    )
}

pub fn parse_split_manifest(reader: impl Read) -> Result<SplitAssignment> {
    let mut out = SplitAssignment::default();
    for (i, (id, v)) in read_two_column(reader, ["image_id", "split"])?
        .into_iter()
        .enumerate()
    {
        let split: Split = v
            .parse()
            .map_err(|e: Error| Error::record(i, e.to_string()))?;
        out.assignments.insert(id, split);
    }
    Ok(out)
}

pub fn write_label_mode_manifest(m: &LabelModeAssignment) -> Result<String> {
    write_two_column(
        ["image_id", "mode"],
        m.modes.iter().map(|(id, mode)| (id, mode.as_str())),
    )
}

pub fn parse_label_mode_manifest(reader: impl Read) -> Result<LabelModeAssignment> {
    let mut out = LabelModeAssignment::default();
    for (i, (id, v)) in read_two_column(reader, ["image_id", "mode"])?
        .into_iter()
        .enumerate()
    {
        let mode: LabelMode = v
            .parse()
            .map_err(|e: Error| Error::record(i, e.to_string()))?;
        out.modes.insert(id, mode);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedFile {
    /// Path relative to the export directory.
    pub path: PathBuf,
    pub images: usize,
    pub annotations: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub files: Vec<ExportedFile>,
}

fn write_file(
    dir: &Path,
    name: &str,
    text: &str,
    images: usize,
    annotations: usize,
) -> Result<ExportedFile> {
    fs::write(dir.join(name), text)?;
    Ok(ExportedFile {
        path: PathBuf::from(name),
        images,
        annotations,
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

/// Check that the manifests only mention images in `d` and that label modes
/// are only given for training images.
pub fn check_manifests(
    d: &Dataset,
    split: &SplitAssignment,
    modes: &LabelModeAssignment,
) -> Result<()> {
    let ids = d.image_ids();
    if let Some(id) = split.assignments.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Consistency(format!(
            "split manifest references unknown image {id}"
        )));
    }
    if let Some(id) = modes.modes.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Consistency(format!(
            "label-mode manifest references unknown image {id}"
        )));
    }
    if let Some(id) = modes
        .modes
        .keys()
        .find(|id| split.get(**id) != Some(Split::Train))
    {
        return Err(Error::Consistency(format!(
            "label mode given for image {id}, which is not in the train split"
        )));
    }
    Ok(())
}

/// Write `<split>.json` for every non-empty split (weak images reduced to box
/// centers), `splits.csv`, `label_modes.csv`, and `manifest.json` listing them.
///
/// Images absent from the split manifest are not exported.
pub fn export_artifacts(
    d: &Dataset,
    split: &SplitAssignment,
    modes: &LabelModeAssignment,
    out_dir: &Path,
) -> Result<ExportManifest> {
    check_manifests(d, split, modes)?;
    fs::create_dir_all(out_dir)?;
    let weakened = derive_weak_labels(d, modes, WeakSource::BoxCenter)?;

    let mut by_split: BTreeMap<Split, Vec<ImageRecord>> = BTreeMap::new();
    for im in &weakened.images {
        if let Some(s) = split.get(im.image_id) {
            by_split.entry(s).or_default().push(im.clone());
        }
    }

    let mut manifest = ExportManifest::default();
    for (s, images) in by_split {
        let part = Dataset::new(d.class_table.clone(), images);
        let text = write_dataset(&part)?;
        manifest.files.push(write_file(
            out_dir,
            &format!("{}.json", s.as_str()),
            &text,
            part.images.len(),
            part.annotation_count(),
        )?);
    }
    manifest.files.push(write_file(
        out_dir,
        "splits.csv",
        &write_split_manifest(split)?,
        split.len(),
        0,
    )?);
    manifest.files.push(write_file(
        out_dir,
        "label_modes.csv",
        &write_label_mode_manifest(modes)?,
        modes.modes.len(),
        0,
    )?);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::validate_dataset;

    const MINIMAL: &str = r#"{
        "categories": [{"id": 0, "name": "turbine"}],
        "images": [{"id": 1, "width": 416, "height": 416, "country": "US", "lat": 40.0, "lon": -100.0}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 0, "bbox": [10, 20, 30, 40]}]
    }"#;

    #[test]
    fn minimal_file() {
        let p = parse_detection_dataset_str(MINIMAL, ParseMode::Strict).unwrap();
        assert_eq!(p.dataset.images.len(), 1);
        assert_eq!(p.dataset.annotation_count(), 1);
        assert_eq!(
            p.dataset.images[0].annotations[0].bbox(),
            Some(&BBox::new(10.0, 20.0, 40.0, 60.0).unwrap())
        );
        assert!(!p.oriented);
        assert!(validate_dataset(&p.dataset).is_valid());
    }

    #[test]
    fn oriented_axis_aligned_square() {
        let text = r#"{
            "categories": [{"id": 0, "name": "ship"}],
            "images": [{"id": 3, "width": 800, "height": 600}],
            "annotations": [{"id": 9, "image_id": 3, "category_id": 0,
                             "obb": [100, 100, 150, 100, 150, 150, 100, 150]}]
        }"#;
        let p = parse_detection_dataset_str(text, ParseMode::Strict).unwrap();
        assert!(p.oriented);
        assert_eq!(
            p.dataset.images[0].annotations[0].bbox(),
            Some(&BBox::new(100.0, 100.0, 150.0, 150.0).unwrap())
        );
    }

    const ONE_BAD: &str = r#"{
        "categories": [{"id": 0, "name": "turbine"}],
        "images": [{"id": 1, "width": 100, "height": 100}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 0, "bbox": [10, 10, 5, 5]},
            {"id": 2, "image_id": 1, "category_id": 0, "bbox": [10, 10, -5, 5]}
        ]
    }"#;

    #[test]
    fn lenient_drops_negative_width() {
        let p = parse_detection_dataset_str(ONE_BAD, ParseMode::Lenient).unwrap();
        assert_eq!(p.dropped, 1);
        assert_eq!(p.dataset.annotation_count(), 1);
        let err = parse_detection_dataset_str(ONE_BAD, ParseMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_header_is_format_error() {
        for text in [
            "[]",
            "{}",
            r#"{"categories": [], "images": [], "annotations": []}"#,
            "not json",
        ] {
            let err = parse_detection_dataset_str(text, ParseMode::Lenient).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "{text}: {err}");
        }
    }

    #[test]
    fn boxes_are_clamped_and_flagged() {
        let text = r#"{
            "categories": [{"id": 0, "name": "t"}],
            "images": [{"id": 1, "width": 100, "height": 100}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 0, "bbox": [90, -5, 20, 20]},
                {"id": 2, "image_id": 1, "category_id": 0, "bbox": [200, 200, 5, 5]}
            ]
        }"#;
        let err = parse_detection_dataset_str(text, ParseMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }));
        let p = parse_detection_dataset_str(text, ParseMode::Lenient).unwrap();
        assert_eq!(p.clamped, vec![1]);
        assert_eq!(
            p.dataset.images[0].annotations[0].bbox(),
            Some(&BBox::new(90.0, 0.0, 100.0, 15.0).unwrap())
        );
    }

    #[test]
    fn geo_points() {
        let text = r#"{"type": "FeatureCollection", "features": [
            {"type": "Feature", "geometry": {"type": "Point", "coordinates": [-100.0, 40.0]}, "properties": {"category_id": 0}},
            {"type": "Feature", "geometry": {"type": "Point", "coordinates": [-100.1, 40.1]}, "properties": {"category_id": 0}},
            {"type": "Feature", "geometry": {"type": "Point", "coordinates": [2.0, 41.0]}, "properties": {"category_id": 0, "image_id": 7}}
        ]}"#;
        let pts = parse_point_collection(text.as_bytes()).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(
            pts[0].location,
            PointLocation::Geo(GeoPoint {
                lat: 40.0,
                lon: -100.0
            })
        );
        assert_eq!(pts[2].image_id, Some(7));
        let again =
            parse_point_collection(write_point_collection(&pts).unwrap().as_bytes()).unwrap();
        assert_eq!(again, pts);
    }

    #[test]
    fn geo_point_out_of_range() {
        let text = r#"[{"type": "Feature", "geometry": {"type": "Point", "coordinates": [0.0, 0.0]}, "properties": {}},
                       {"type": "Feature", "geometry": {"type": "Point", "coordinates": [0.0, 91.0]}, "properties": {}}]"#;
        let err = parse_point_collection(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }));
    }

    #[test]
    fn mixed_points_rejected() {
        let text = r#"[{"image_id": 1, "x": 3.0, "y": 4.0, "category_id": 0},
                       {"type": "Feature", "geometry": {"type": "Point", "coordinates": [0.0, 0.0]}, "properties": {}}]"#;
        assert!(matches!(
            parse_point_collection(text.as_bytes()),
            Err(Error::Record { index: 1, .. })
        ));
        let pixel = r#"[{"image_id": 1, "x": 3.0, "y": 4.0, "category_id": 0}]"#;
        let pts = parse_point_collection(pixel.as_bytes()).unwrap();
        assert_eq!(
            pts[0].location,
            PointLocation::Pixel(PixelPoint { x: 3.0, y: 4.0 })
        );
    }

    #[test]
    fn predictions() {
        let text = r#"[
            {"image_id": 1, "category_id": 0, "bbox": [0, 0, 10, 10], "score": 0.3},
            {"image_id": 1, "category_id": 0, "bbox": [5, 5, 10, 10], "score": 0.9}
        ]"#;
        let dets = parse_predictions(text.as_bytes()).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].score, 0.9);
        assert!(parse_predictions("".as_bytes()).unwrap().is_empty());
        assert!(parse_predictions("[]".as_bytes()).unwrap().is_empty());
        let bad = r#"[{"image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1], "score": 1.5}]"#;
        assert!(matches!(
            parse_predictions(bad.as_bytes()),
            Err(Error::Record { index: 0, .. })
        ));
    }

    #[test]
    fn prediction_sort_is_stable() {
        let text = r#"[
            {"image_id": 2, "category_id": 0, "bbox": [0, 0, 1, 1], "score": 0.5},
            {"image_id": 1, "category_id": 0, "bbox": [1, 0, 1, 1], "score": 0.5},
            {"image_id": 1, "category_id": 0, "bbox": [2, 0, 1, 1], "score": 0.5}
        ]"#;
        let dets = parse_predictions(text.as_bytes()).unwrap();
        let xs: Vec<_> = dets.iter().map(|d| (d.image_id, d.bbox.xmin)).collect();
        assert_eq!(xs, vec![(1, 1.0), (1, 2.0), (2, 0.0)]);
    }

    fn sized(id: ImageId, w: u32, h: u32, n: usize) -> ImageRecord {
        let mut im = ImageRecord::new(id, w, h);
        for k in 0..n {
            im.annotations.push(Annotation::with_box(
                id * 1000 + k as u64,
                0,
                BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            ));
        }
        im
    }

    #[test]
    fn fair1m_filter_boundaries() {
        let d = Dataset::new(
            ClassTable::fair1m(),
            vec![
                sized(1, 2048, 2048, 1),
                sized(2, 1000, 1000, 50),
                sized(3, 1000, 1000, 101),
                sized(4, 2000, 2000, 100),
                sized(5, 2001, 10, 1),
            ],
        );
        let (kept, dropped) = filter_fair1m(&d, FAIR1M_MAX_DIM, FAIR1M_MAX_ANNOTATIONS);
        let ids: Vec<_> = kept.images.iter().map(|im| im.image_id).collect();
        assert_eq!(ids, vec![2, 4]);
        assert_eq!(dropped, 3);
        let (twice, dropped_again) = filter_fair1m(&kept, FAIR1M_MAX_DIM, FAIR1M_MAX_ANNOTATIONS);
        assert_eq!(twice, kept);
        assert_eq!(dropped_again, 0);
    }

    #[test]
    fn manifests_round_trip() {
        let split = SplitAssignment {
            assignments: [(1, Split::Train), (2, Split::TeacherEval), (3, Split::Val)].into(),
        };
        let text = write_split_manifest(&split).unwrap();
        assert!(text.starts_with("image_id,split\n1,train\n"));
        assert_eq!(parse_split_manifest(text.as_bytes()).unwrap(), split);
        let modes = LabelModeAssignment {
            modes: [(1, LabelMode::Weak)].into(),
        };
        let text = write_label_mode_manifest(&modes).unwrap();
        assert_eq!(text, "image_id,mode\n1,weak\n");
        assert_eq!(parse_label_mode_manifest(text.as_bytes()).unwrap(), modes);
        assert!(parse_split_manifest("image_id,split\n1,holdout\n".as_bytes()).is_err());
        assert!(parse_split_manifest("id,split\n1,train\n".as_bytes()).is_err());
    }

    fn two_image_dataset() -> Dataset {
        let images = (1..=2)
            .map(|id| {
                let mut im = ImageRecord::new(id, 100, 100);
                im.annotations.push(Annotation::with_box(
                    id,
                    0,
                    BBox::new(10.0, 10.0, 30.0, 20.0).unwrap(),
                ));
                im
            })
            .collect();
        Dataset::new(ClassTable::single("turbine"), images)
    }

    #[test]
    fn export_all_strong() {
        let d = two_image_dataset();
        let split = SplitAssignment {
            assignments: [(1, Split::Train), (2, Split::Test)].into(),
        };
        let modes = LabelModeAssignment {
            modes: [(1, LabelMode::Strong)].into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let m = export_artifacts(&d, &split, &modes, dir.path()).unwrap();
        let names: Vec<_> = m
            .files
            .iter()
            .map(|f| f.path.to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["train.json", "test.json", "splits.csv", "label_modes.csv"]
        );
        let train = read_dataset_file(&dir.path().join("train.json"), ParseMode::Strict).unwrap();
        assert_eq!(train.dataset.images[0].boxes().count(), 1);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn export_weak_image_has_only_points() {
        let d = two_image_dataset();
        let split = SplitAssignment {
            assignments: [(1, Split::Train), (2, Split::Train)].into(),
        };
        let modes = LabelModeAssignment {
            modes: [(1, LabelMode::Strong), (2, LabelMode::Weak)].into(),
        };
        let dir = tempfile::tempdir().unwrap();
        export_artifacts(&d, &split, &modes, dir.path()).unwrap();
        let train = read_dataset_file(&dir.path().join("train.json"), ParseMode::Strict)
            .unwrap()
            .dataset;
        let weak = train.image(2).unwrap();
        assert_eq!(weak.boxes().count(), 0);
        assert_eq!(
            weak.annotations[0].point(),
            Some(&PixelPoint { x: 20.0, y: 15.0 })
        );
    }

    #[test]
    fn export_rejects_unknown_image() {
        let d = two_image_dataset();
        let split = SplitAssignment {
            assignments: [(999, Split::Train)].into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let err =
            export_artifacts(&d, &split, &LabelModeAssignment::default(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("999"));
    }
}
