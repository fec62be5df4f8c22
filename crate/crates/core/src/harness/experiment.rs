//! End-to-end run: cluster, split, then per label fraction sample, weaken,
//! pseudo-label, merge, export and evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{
    validate_dataset, Annotation, Dataset, Detection, Geometry, ImageId, Provenance,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, EvalResult, DEFAULT_IOU_THRESHOLDS};
use crate::geocluster::{cluster_dataset, DbscanParams};
use crate::harness::report::{render_arm_comparison, ApRow, ApTable};
use crate::harness::synthetic::{generate_synthetic, SynthParams};
use crate::parsers::{
    export_artifacts, parse_predictions, read_dataset_file, write_dataset, write_point_collection,
    write_predictions, write_split_manifest, ParseMode,
};
use crate::splitter::{
    derive_weak_labels, out_country_rules, sample_label_fractions, split_by_region,
    split_random_by_cluster, LabelMode, LabelModeAssignment, Split, SplitAssignment, SplitRatios,
    WeakSource, US_CENTER_MERIDIAN,
};
use crate::teachersim::{
    merge_strong_and_pseudo, mix_seed, pseudo_detections, simulate_pseudo_labels, NoiseModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    ClusterRandom,
    Region,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster-random" => Ok(Self::ClusterRandom),
            "region" => Ok(Self::Region),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split strategy `{s}`"
            ))),
        }
    }
}

/// Flat experiment configuration; every key is optional and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Input dataset; a synthetic corpus is generated when absent.
    pub dataset: Option<PathBuf>,
    /// External detections on weak images, used instead of the simulated teacher.
    pub predictions: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub lenient: bool,
    pub record_timestamps: bool,

    pub synthetic_images: usize,
    pub synthetic_classes: usize,
    pub synthetic_countries: usize,
    pub synthetic_farms: usize,
    pub synthetic_min_objects: usize,
    pub synthetic_max_objects: usize,
    pub synthetic_image_size: u32,
    pub farm_spread_m: f64,

    pub eps_m: f64,
    pub min_pts: usize,
    pub split_strategy: SplitStrategy,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub us_meridian: f64,

    pub fractions: Vec<f64>,
    pub weak_source: WeakSource,

    pub center_sigma: f64,
    pub scale_sigma: f64,
    pub drop_rate: f64,
    pub score_alpha: f64,
    pub score_beta: f64,

    pub iou_thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthParams::default();
        let dbscan = DbscanParams::default();
        let ratios = SplitRatios::default();
        let noise = NoiseModel::default();
        Self {
            seed: 0,
            dataset: None,
            predictions: None,
            out_dir: None,
            lenient: false,
            record_timestamps: false,
            synthetic_images: synth.n_images,
            synthetic_classes: synth.n_classes,
            synthetic_countries: synth.n_countries,
            synthetic_farms: synth.n_farms,
            synthetic_min_objects: synth.min_objects,
            synthetic_max_objects: synth.max_objects,
            synthetic_image_size: synth.image_size,
            farm_spread_m: synth.farm_spread_m,
            eps_m: dbscan.eps_m,
            min_pts: dbscan.min_pts,
            split_strategy: SplitStrategy::ClusterRandom,
            train_ratio: ratios.train,
            val_ratio: ratios.val,
            test_ratio: ratios.test,
            us_meridian: US_CENTER_MERIDIAN,
            fractions: vec![0.01, 0.05, 0.10],
            weak_source: WeakSource::BoxCenter,
            center_sigma: noise.center_jitter_sigma,
            scale_sigma: noise.scale_jitter_sigma,
            drop_rate: noise.drop_rate,
            score_alpha: noise.score_alpha,
            score_beta: noise.score_beta,
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n_images: self.synthetic_images,
            min_objects: self.synthetic_min_objects,
            max_objects: self.synthetic_max_objects,
            n_classes: self.synthetic_classes,
            n_countries: self.synthetic_countries,
            n_farms: self.synthetic_farms,
            farm_spread_m: self.farm_spread_m,
            image_size: self.synthetic_image_size,
            seed: self.seed,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            center_jitter_sigma: self.center_sigma,
            scale_jitter_sigma: self.scale_sigma,
            drop_rate: self.drop_rate,
            score_alpha: self.score_alpha,
            score_beta: self.score_beta,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.fractions.is_empty() {
            return cfg("fractions must not be empty".into());
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return cfg(format!(
                "fractions must lie in (0, 1]: {:?}",
                self.fractions
            ));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!(
                "fractions must be strictly increasing: {:?}",
                self.fractions
            ));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        SplitRatios::new(self.train_ratio, self.val_ratio, self.test_ratio).map_err(wrap)?;
        DbscanParams::new(self.eps_m, self.min_pts).map_err(wrap)?;
        self.noise().check().map_err(wrap)?;
        self.eval_config().check().map_err(wrap)?;
        if self.dataset.is_none() {
            self.synth_params().check().map_err(wrap)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Pseudo boxes on weak images against their true boxes.
    Teacher,
    /// Training labels from strong images only against full training truth.
    BaselineStrongOnly,
    /// Strong plus pseudo-labelled training corpus against full training truth.
    Wssod,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Teacher, Arm::BaselineStrongOnly, Arm::Wssod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Teacher => "teacher",
            Arm::BaselineStrongOnly => "baseline_strong_only",
            Arm::Wssod => "wssod",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRecord {
    pub fraction: f64,
    pub strong_images: usize,
    pub weak_images: usize,
    pub pseudo_boxes: usize,
    pub teacher: EvalResult,
    pub baseline_strong_only: EvalResult,
    pub wssod: EvalResult,
}

impl FractionRecord {
    pub fn arm(&self, arm: Arm) -> &EvalResult {
        match arm {
            Arm::Teacher => &self.teacher,
            Arm::BaselineStrongOnly => &self.baseline_strong_only,
            Arm::Wssod => &self.wssod,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_sha256: String,
    pub seed: u64,
    pub images: usize,
    pub annotations: usize,
    pub clusters: usize,
    pub split_counts: BTreeMap<String, usize>,
    pub fractions: Vec<FractionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
}

impl RunRecord {
    /// AP table for one arm, one row per fraction, in percent.
    pub fn ap_table(&self, arm: Arm, group: &str) -> ApTable {
        let thresholds = self
            .fractions
            .first()
            .map(|f| {
                f.teacher
                    .thresholds
                    .iter()
                    .map(|t| t.iou_threshold)
                    .collect()
            })
            .unwrap_or_default();
        let rows = self
            .fractions
            .iter()
            .map(|f| ApRow {
                group: group.to_string(),
                fraction: f.fraction,
                values: f
                    .arm(arm)
                    .maps()
                    .into_iter()
                    .map(|m| m.map(|v| v * 100.0))
                    .collect(),
            })
            .collect();
        ApTable { thresholds, rows }
    }

    pub fn render_markdown(&self) -> Result<String> {
        let mut out = format!(
            "# Run report\n\nconfig sha256: `{}`\n\nimages: {}, annotations: {}, clusters: {}\n\n",
            self.config_sha256, self.images, self.annotations, self.clusters
        );
        for arm in Arm::ALL {
            out.push_str(
                &self
                    .ap_table(arm, arm.as_str())
                    .render_markdown(arm.as_str()),
            );
            out.push('\n');
        }
        out.push_str(&render_arm_comparison(
            Arm::BaselineStrongOnly.as_str(),
            &self.ap_table(Arm::BaselineStrongOnly, "run"),
            Arm::Wssod.as_str(),
            &self.ap_table(Arm::Wssod, "run"),
        )?);
        Ok(out)
    }

    pub fn render_csv(&self) -> String {
        let mut rows = Vec::new();
        let mut thresholds = Vec::new();
        for arm in Arm::ALL {
            let t = self.ap_table(arm, arm.as_str());
            thresholds = t.thresholds;
            rows.extend(t.rows);
        }
        ApTable { thresholds, rows }.to_csv()
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn subset(d: &Dataset, keep: impl Fn(ImageId) -> bool) -> Dataset {
    Dataset::new(
        d.class_table.clone(),
        d.images
            .iter()
            .filter(|im| keep(im.image_id))
            .cloned()
            .collect(),
    )
}

fn box_detections(d: &Dataset) -> Vec<Detection> {
    d.annotations()
        .filter_map(|(im, a)| {
            a.bbox().map(|b| Detection {
                image_id: im.image_id,
                class_id: a.class_id,
                bbox: *b,
                score: a.score.unwrap_or(1.0),
            })
        })
        .collect()
}

/// Pseudo-labelled copy of `weak` built from external detections.
pub fn pseudo_from_predictions(weak: &Dataset, preds: &[Detection]) -> Dataset {
    let mut out = weak.clone();
    let mut next = 1;
    for im in &mut out.images {
        im.annotations = preds
            .iter()
            .filter(|p| p.image_id == im.image_id)
            .map(|p| {
                let mut a = Annotation::new(next, p.class_id, Geometry::Box(p.bbox));
                next += 1;
                a.score = Some(p.score);
                a.provenance = Provenance::Pseudo;
                a
            })
            .collect();
    }
    out
}

fn ensure_valid(d: &Dataset) -> Result<()> {
    let report = validate_dataset(d);
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::Validation(report.violations.len()))
    }
}

struct Prepared {
    dataset: Dataset,
    split: SplitAssignment,
    clusters: usize,
    predictions: Option<Vec<Detection>>,
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let mode = if cfg.lenient {
        ParseMode::Lenient
    } else {
        ParseMode::Strict
    };
    let dataset = match &cfg.dataset {
        Some(path) => read_dataset_file(path, mode).map(|p| p.dataset),
        None => generate_synthetic(&cfg.synth_params()).and_then(|c| {
            write_text(
                &out.join("points.geojson"),
                &write_point_collection(&c.points)?,
            )?;
            Ok(c.dataset)
        }),
    }
    .map_err(|e| e.in_stage("ingest"))?;
    ensure_valid(&dataset).map_err(|e| e.in_stage("ingest"))?;

    let params = DbscanParams::new(cfg.eps_m, cfg.min_pts)?;
    let (dataset, report) =
        cluster_dataset(&dataset, &params).map_err(|e| e.in_stage("cluster"))?;
    write_text(&out.join("dataset.json"), &write_dataset(&dataset)?)?;
    write_json(&out.join("cluster_report.json"), &report)?;

    let split = match cfg.split_strategy {
        SplitStrategy::ClusterRandom => {
            let ratios = SplitRatios::new(cfg.train_ratio, cfg.val_ratio, cfg.test_ratio)?;
            split_random_by_cluster(&dataset, &ratios, cfg.seed)
        }
        SplitStrategy::Region => split_by_region(&dataset, &out_country_rules(cfg.us_meridian))
            .and_then(|(s, leak)| {
                write_json(&out.join("leakage_report.json"), &leak)?;
                Ok(s)
            }),
    }
    .map_err(|e| e.in_stage("split"))?;
    write_text(&out.join("splits.csv"), &write_split_manifest(&split)?)?;

    let predictions = cfg
        .predictions
        .as_ref()
        .map(|p| {
            fs::File::open(p)
                .map_err(Error::from)
                .and_then(parse_predictions)
        })
        .transpose()
        .map_err(|e| e.in_stage("predictions"))?;

    Ok(Prepared {
        clusters: report.clusters + report.singletons,
        dataset,
        split,
        predictions,
    })
}

fn run_fraction(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    fraction: f64,
    out: &Path,
) -> Result<FractionRecord> {
    let d = &prep.dataset;
    let modes: LabelModeAssignment =
        sample_label_fractions(d, &prep.split, fraction, mix_seed(cfg.seed, 1))
            .map_err(|e| e.in_stage("fractions"))?;

    let train = subset(d, |id| prep.split.get(id) == Some(Split::Train));
    let strong = subset(&train, |id| modes.get(id) == Some(LabelMode::Strong));
    let weak_truth = subset(&train, |id| modes.is_weak(id));
    let weakened = derive_weak_labels(&train, &modes, cfg.weak_source)
        .map_err(|e| e.in_stage("weak-labels"))?;
    let weak = subset(&weakened, |id| modes.is_weak(id));

    let pseudo = match &prep.predictions {
        Some(preds) => Ok(pseudo_from_predictions(&weak, preds)),
        None => simulate_pseudo_labels(&weak, &weak_truth, &cfg.noise(), mix_seed(cfg.seed, 2)),
    }
    .map_err(|e| e.in_stage("pseudolabel"))?;
    let merged = merge_strong_and_pseudo(&strong, &pseudo).map_err(|e| e.in_stage("merge"))?;
    ensure_valid(&merged).map_err(|e| e.in_stage("merge"))?;

    export_artifacts(d, &prep.split, &modes, &out.join("export"))
        .map_err(|e| e.in_stage("export"))?;
    write_text(&out.join("pseudo_labels.json"), &write_dataset(&pseudo)?)?;
    write_text(&out.join("train_merged.json"), &write_dataset(&merged)?)?;

    let eval_cfg = cfg.eval_config();
    let eval = |preds: &[Detection], gt: &Dataset| {
        evaluate(preds, gt, &eval_cfg).map_err(|e| e.in_stage("evaluate"))
    };
    let teacher_preds = match &prep.predictions {
        Some(_) => box_detections(&pseudo),
        None => pseudo_detections(&pseudo),
    };
    let teacher = eval(&teacher_preds, &weak_truth)?;
    let baseline_strong_only = eval(&box_detections(&strong), &train)?;
    let wssod = eval(&box_detections(&merged), &train)?;
    write_text(
        &out.join("pseudo_detections.json"),
        &write_predictions(&teacher_preds)?,
    )?;
    for (arm, result) in [
        (Arm::Teacher, &teacher),
        (Arm::BaselineStrongOnly, &baseline_strong_only),
        (Arm::Wssod, &wssod),
    ] {
        write_json(&out.join(format!("eval_{}.json", arm.as_str())), result)?;
        write_text(
            &out.join(format!("eval_{}.csv", arm.as_str())),
            &result.summary_csv(),
        )?;
    }

    Ok(FractionRecord {
        fraction,
        strong_images: modes.strong_count(),
        weak_images: modes.weak_count(),
        pseudo_boxes: pseudo.annotation_count(),
        teacher,
        baseline_strong_only,
        wssod,
    })
}

/// Run the whole pipeline, writing every artifact under `out_dir`.
///
/// Fractions run in parallel; each writes only to its own subdirectory, so the
/// output tree is identical for identical configs.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    cfg.check()?;
    let started_at = cfg.record_timestamps.then(unix_now);
    fs::create_dir_all(out_dir)?;
    let mut resolved = cfg.clone();
    resolved.out_dir = None;
    write_json(&out_dir.join("config.json"), &resolved)?;

    let prep = prepare(cfg, out_dir)?;
    let fractions = cfg
        .fractions
        .par_iter()
        .map(|&f| run_fraction(cfg, &prep, f, &out_dir.join(format!("fraction_{f}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut record = RunRecord {
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        images: prep.dataset.images.len(),
        annotations: prep.dataset.annotation_count(),
        clusters: prep.clusters,
        split_counts: prep
            .split
            .counts()
            .into_iter()
            .map(|(s, n)| (s.as_str().to_string(), n))
            .collect(),
        fractions,
        started_at,
        finished_at: None,
    };
    record.finished_at = cfg.record_timestamps.then(unix_now);
    write_json(&out_dir.join("run_record.json"), &record)?;
    write_text(&out_dir.join("report.md"), &record.render_markdown()?)?;
    write_text(&out_dir.join("report.csv"), &record.render_csv())?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            synthetic_images: 120,
            synthetic_farms: 30,
            fractions: vec![0.1],
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("seed = 1\nfractions = [0.1]\n").is_ok());
        assert!(matches!(
            ExperimentConfig::from_toml("sede = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fractions_must_increase() {
        let cfg = ExperimentConfig {
            fractions: vec![0.1, 0.05],
            ..Default::default()
        };
        assert!(cfg.check().is_err());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = small();
        let mut b = small();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn zero_noise_teacher_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&small(), dir.path()).unwrap();
        for m in rec.fractions[0].teacher.maps() {
            assert_eq!(m, Some(1.0));
        }
        assert!(dir
            .path()
            .join("fraction_0.1/export/manifest.json")
            .exists());
    }

    #[test]
    fn jitter_hurts_strict_thresholds_more() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            center_sigma: 0.15,
            ..small()
        };
        let rec = run_experiment(&cfg, dir.path()).unwrap();
        let t = &rec.fractions[0].teacher;
        assert!(t.map_at(0.75).unwrap() < t.map_at(0.25).unwrap());
    }

    #[test]
    fn three_fractions_three_arms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            fractions: vec![0.01, 0.05, 0.10],
            ..small()
        };
        let rec = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(rec.fractions.len(), 3);
        assert!(rec
            .render_markdown()
            .unwrap()
            .contains("wssod vs baseline_strong_only"));
    }

    #[test]
    fn region_strategy_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            split_strategy: SplitStrategy::Region,
            ..small()
        };
        let rec = run_experiment(&cfg, dir.path()).unwrap();
        assert!(rec.split_counts.contains_key("train"));
    }
}
