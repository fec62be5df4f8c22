//! Average precision at fixed IoU thresholds.
//!
//! Detections are matched greedily in descending score order, each to the
//! still-unmatched ground-truth box of the same image and class with the highest
//! IoU, provided that IoU reaches the threshold. AP is the exact area under the
//! monotone (right-to-left maximum) precision envelope.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, ClassId, Dataset, Detection, ImageId};
use crate::error::{Error, Result};
use crate::geometry::iou;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn new(iou_thresholds: Vec<f64>) -> Result<Self> {
        let cfg = Self { iou_thresholds };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(Error::InvalidArgument("no IoU thresholds".into()));
        }
        if t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds must lie in (0, 1], got {t:?}"
            )));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds must be strictly increasing, got {t:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: ClassId,
    pub gt_count: usize,
    /// `None` for classes without ground truth; those are left out of the mean.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEval {
    pub iou_threshold: f64,
    /// Mean over classes with ground truth; `None` when there are none.
    pub map: Option<f64>,
    pub classes: Vec<ClassEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Single-class results are labelled AP rather than mAP in summaries.
    pub single_class: bool,
    pub thresholds: Vec<ThresholdEval>,
}

impl EvalResult {
    pub fn threshold(&self, tau: f64) -> Option<&ThresholdEval> {
        self.thresholds.iter().find(|t| t.iou_threshold == tau)
    }

    pub fn map_at(&self, tau: f64) -> Option<f64> {
        self.threshold(tau).and_then(|t| t.map)
    }

    pub fn ap(&self, class_id: ClassId, tau: f64) -> Option<f64> {
        self.threshold(tau)?
            .classes
            .iter()
            .find(|c| c.class_id == class_id)?
            .ap
    }

    pub fn maps(&self) -> Vec<Option<f64>> {
        self.thresholds.iter().map(|t| t.map).collect()
    }

    /// `iou_threshold,class_id,gt,tp,fp,fn,ap` rows plus one `all` row per
    /// threshold holding the mean.
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        let mut out = String::from("iou_threshold,class_id,gt,tp,fp,fn,ap\n");
        for t in &self.thresholds {
            for c in &t.classes {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    t.iou_threshold,
                    c.class_id,
                    c.gt_count,
                    c.tp,
                    c.fp,
                    c.fn_,
                    fmt(c.ap)
                ));
            }
            let (gt, tp, fp, fn_) = t.classes.iter().fold((0, 0, 0, 0), |acc, c| {
                (
                    acc.0 + c.gt_count,
                    acc.1 + c.tp,
                    acc.2 + c.fp,
                    acc.3 + c.fn_,
                )
            });
            out.push_str(&format!(
                "{},all,{gt},{tp},{fp},{fn_},{}\n",
                t.iou_threshold,
                fmt(t.map)
            ));
        }
        out
    }
}

/// Ranking used everywhere detections are ordered: score descending, then
/// image, class, and box coordinates so that the order does not depend on input order.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
        .then(a.bbox.ymin.total_cmp(&b.bbox.ymin))
        .then(a.bbox.xmax.total_cmp(&b.bbox.xmax))
        .then(a.bbox.ymax.total_cmp(&b.bbox.ymax))
}

/// Greedy matching for one image and class. `dets` must already be in ranking
/// order; returns one true-positive flag per detection.
pub fn match_detections(dets: &[Detection], gts: &[BBox], tau: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| match_one(&d.bbox, gts, &mut used, tau))
        .collect()
}

fn match_one(det: &BBox, gts: &[BBox], used: &mut [bool], tau: f64) -> bool {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if used[g] {
            continue;
        }
        let v = iou(det, gt);
        if v >= tau && best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    match best {
        Some((g, _)) => {
            used[g] = true;
            true
        }
        None => false,
    }
}

/// Area under the precision envelope for true-positive flags in ranking order.
///
/// Returns `None` when `gt_count` is zero. With ground truth but no detections the AP is 0.
pub fn average_precision(flags: &[bool], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let area: f64 = flags
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .fold(0.0, |acc, (_, p)| acc + p);
    Some(area / gt_count as f64)
}

/// Evaluate predictions against the box annotations of `gt`.
pub fn evaluate(preds: &[Detection], gt: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.check()?;
    let image_ids: BTreeSet<ImageId> = gt.images.iter().map(|im| im.image_id).collect();
    for (i, d) in preds.iter().enumerate() {
        if !image_ids.contains(&d.image_id) {
            return Err(Error::Consistency(format!(
                "prediction {i} references unknown image {}",
                d.image_id
            )));
        }
        if !gt.class_table.contains(d.class_id) {
            return Err(Error::Consistency(format!(
                "prediction {i} references unknown class {}",
                d.class_id
            )));
        }
    }

    let mut gt_boxes: HashMap<(ImageId, ClassId), Vec<BBox>> = HashMap::new();
    let mut gt_counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (im, a) in gt.annotations() {
        if let Some(b) = a.bbox() {
            gt_boxes
                .entry((im.image_id, a.class_id))
                .or_default()
                .push(*b);
            *gt_counts.entry(a.class_id).or_default() += 1;
        }
    }

    let mut ranked: Vec<Detection> = preds.to_vec();
    ranked.sort_by(detection_order);
    let mut per_class: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
    for d in ranked {
        per_class.entry(d.class_id).or_default().push(d);
    }
    let classes: BTreeSet<ClassId> = gt_counts.keys().chain(per_class.keys()).copied().collect();

    let thresholds = cfg
        .iou_thresholds
        .par_iter()
        .map(|&tau| {
            let evals: Vec<ClassEval> = classes
                .iter()
                .map(|&c| {
                    let dets = per_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
                    let gt_count = gt_counts.get(&c).copied().unwrap_or(0);
                    eval_class(c, dets, &gt_boxes, gt_count, tau)
                })
                .collect();
            let aps: Vec<f64> = evals.iter().filter_map(|e| e.ap).collect();
            let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
            ThresholdEval {
                iou_threshold: tau,
                map,
                classes: evals,
            }
        })
        .collect();

    Ok(EvalResult {
        single_class: gt.class_table.len() == 1,
        thresholds,
    })
}

fn eval_class(
    class_id: ClassId,
    dets: &[Detection],
    gt_boxes: &HashMap<(ImageId, ClassId), Vec<BBox>>,
    gt_count: usize,
    tau: f64,
) -> ClassEval {
    let mut used: HashMap<ImageId, Vec<bool>> = HashMap::new();
    let empty: Vec<BBox> = Vec::new();
    let flags: Vec<bool> = dets
        .iter()
        .map(|d| {
            let gts = gt_boxes.get(&(d.image_id, class_id)).unwrap_or(&empty);
            let u = used
                .entry(d.image_id)
                .or_insert_with(|| vec![false; gts.len()]);
            match_one(&d.bbox, gts, u, tau)
        })
        .collect();
    let tp = flags.iter().filter(|f| **f).count();
    ClassEval {
        class_id,
        gt_count,
        ap: average_precision(&flags, gt_count),
        tp,
        fp: flags.len() - tp,
        fn_: gt_count - tp,
    }
}
