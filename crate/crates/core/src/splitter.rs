//! Leakage-free dataset splits, box-label fraction sampling, weak label
//! derivation, and the point/box retention filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, ClassId, Dataset, Geometry, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{box_center, contains};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TeacherEval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::TeacherEval];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TeacherEval => "teacher_eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Which split each image belongs to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<ImageId, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: ImageId) -> Option<Split> {
        self.assignments.get(&id).copied()
    }

    pub fn images_in(&self, split: Split) -> Vec<ImageId> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for s in self.assignments.values() {
            *out.entry(*s).or_default() += 1;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Strong,
    Weak,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::Strong => "strong",
            LabelMode::Weak => "weak",
        }
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(LabelMode::Strong),
            "weak" => Ok(LabelMode::Weak),
            _ => Err(Error::InvalidArgument(format!("unknown label mode `{s}`"))),
        }
    }
}

/// Box (strong) versus point (weak) supervision for each training image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelModeAssignment {
    pub modes: BTreeMap<ImageId, LabelMode>,
}

impl LabelModeAssignment {
    pub fn get(&self, id: ImageId) -> Option<LabelMode> {
        self.modes.get(&id).copied()
    }

    pub fn is_weak(&self, id: ImageId) -> bool {
        self.get(id) == Some(LabelMode::Weak)
    }

    pub fn strong_count(&self) -> usize {
        self.modes
            .values()
            .filter(|m| **m == LabelMode::Strong)
            .count()
    }

    pub fn weak_count(&self) -> usize {
        self.modes
            .values()
            .filter(|m| **m == LabelMode::Weak)
            .count()
    }

    pub fn ids(&self, mode: LabelMode) -> Vec<ImageId> {
        self.modes
            .iter()
            .filter(|(_, m)| **m == mode)
            .map(|(id, _)| *id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// random split by cluster
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

fn images_by_cluster(d: &Dataset) -> Result<BTreeMap<u64, Vec<ImageId>>> {
    let mut clusters: BTreeMap<u64, Vec<ImageId>> = BTreeMap::new();
    for im in &d.images {
        let c = im.cluster_id.ok_or_else(|| {
            Error::Consistency(format!("image {} has no cluster id", im.image_id))
        })?;
        clusters.entry(c).or_default().push(im.image_id);
    }
    Ok(clusters)
}

/// Shuffle clusters with `seed`, then hand each one to the split currently
/// furthest below its target image count.
pub fn split_random_by_cluster(
    d: &Dataset,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.check()?;
    let clusters = images_by_cluster(d)?;
    if clusters.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} cluster(s) cannot fill 3 splits",
            clusters.len()
        )));
    }
    let mut order: Vec<(&u64, &Vec<ImageId>)> = clusters.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = d.images.len() as f64;
    let splits = [Split::Train, Split::Val, Split::Test];
    let targets = [
        ratios.train * total,
        ratios.val * total,
        ratios.test * total,
    ];
    let mut filled = [0usize; 3];
    let mut out = SplitAssignment::default();
    for (_, members) in order {
        let mut best = 0;
        for i in 1..3 {
            if targets[i] - filled[i] as f64 > targets[best] - filled[best] as f64 {
                best = i;
            }
        }
        filled[best] += members.len();
        for id in members {
            out.assignments.insert(*id, splits[best]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// region split
// ---------------------------------------------------------------------------

/// Geographic center of the contiguous United States.
pub const US_CENTER_MERIDIAN: f64 = -98.58;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LonTest {
    /// `lon < meridian`
    West(f64),
    /// `lon >= meridian`
    East(f64),
}

impl LonTest {
    fn matches(&self, lon: f64) -> bool {
        match *self {
            LonTest::West(m) => lon < m,
            LonTest::East(m) => lon >= m,
        }
    }

    fn range(test: Option<&LonTest>) -> (f64, f64) {
        match test {
            None => (f64::NEG_INFINITY, f64::INFINITY),
            Some(LonTest::West(m)) => (f64::NEG_INFINITY, *m),
            Some(LonTest::East(m)) => (*m, f64::INFINITY),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMatch {
    Countries(Vec<String>),
    /// Everything not claimed by an earlier rule.
    Rest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRule {
    pub split: Split,
    pub region: RegionMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<LonTest>,
}

impl RegionRule {
    pub fn countries(split: Split, codes: &[&str]) -> Self {
        Self {
            split,
            region: RegionMatch::Countries(codes.iter().map(|c| c.to_ascii_uppercase()).collect()),
            lon: None,
        }
    }

    pub fn rest(split: Split) -> Self {
        Self {
            split,
            region: RegionMatch::Rest,
            lon: None,
        }
    }

    pub fn with_lon(mut self, test: LonTest) -> Self {
        self.lon = Some(test);
        self
    }

    fn needs_lon(&self) -> bool {
        self.lon.is_some()
    }

    fn region_matches(&self, country: &str) -> bool {
        match &self.region {
            RegionMatch::Rest => true,
            RegionMatch::Countries(cs) => cs.iter().any(|c| c.eq_ignore_ascii_case(country)),
        }
    }

    fn matches(&self, country: &str, lon: Option<f64>) -> bool {
        self.region_matches(country)
            && match (&self.lon, lon) {
                (None, _) => true,
                (Some(t), Some(lon)) => t.matches(lon),
                (Some(_), None) => false,
            }
    }
}

/// West US train, east US val, China and Spain for teacher evaluation, every
/// other country test.
pub fn out_country_rules(meridian: f64) -> Vec<RegionRule> {
    vec![
        RegionRule::countries(Split::Train, &["US"]).with_lon(LonTest::West(meridian)),
        RegionRule::countries(Split::Val, &["US"]).with_lon(LonTest::East(meridian)),
        RegionRule::countries(Split::TeacherEval, &["CN", "ES"]),
        RegionRule::rest(Split::Test),
    ]
}

/// Rules must be pairwise disjoint and a `rest` rule, if any, must come last.
pub fn validate_rules(rules: &[RegionRule]) -> Result<()> {
    if rules.is_empty() {
        return Err(Error::InvalidArgument("no region rules".into()));
    }
    if let Some(pos) = rules.iter().position(|r| r.region == RegionMatch::Rest) {
        if pos != rules.len() - 1 {
            return Err(Error::InvalidArgument(
                "the `rest` rule must be the last region rule".into(),
            ));
        }
    }
    for (i, a) in rules.iter().enumerate() {
        for b in &rules[i + 1..] {
            let (RegionMatch::Countries(ca), RegionMatch::Countries(cb)) = (&a.region, &b.region)
            else {
                continue;
            };
            let shared = ca
                .iter()
                .any(|x| cb.iter().any(|y| x.eq_ignore_ascii_case(y)));
            let (alo, ahi) = LonTest::range(a.lon.as_ref());
            let (blo, bhi) = LonTest::range(b.lon.as_ref());
            if shared && alo < bhi && blo < ahi {
                return Err(Error::InvalidArgument(format!(
                    "region rules for `{}` and `{}` overlap",
                    a.split, b.split
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Clusters whose images matched rules for different splits, with the split they were moved to.
    pub moved_clusters: Vec<(u64, Split)>,
    pub moved_images: usize,
}

/// Assign each image by the first matching rule, then pull every cluster that
/// straddles splits back into the split holding most of its images.
pub fn split_by_region(
    d: &Dataset,
    rules: &[RegionRule],
) -> Result<(SplitAssignment, LeakageReport)> {
    validate_rules(rules)?;
    let mut out = SplitAssignment::default();
    for im in &d.images {
        let country = im
            .country
            .as_deref()
            .ok_or_else(|| Error::Consistency(format!("image {} has no country", im.image_id)))?;
        let lon = im.centroid_geo.map(|g| g.lon);
        let mut matched = None;
        for rule in rules {
            if rule.needs_lon() && lon.is_none() && rule.region_matches(country) {
                return Err(Error::Consistency(format!(
                    "image {} needs a longitude for region rules",
                    im.image_id
                )));
            }
            if rule.matches(country, lon) {
                matched = Some(rule.split);
                break;
            }
        }
        let split = matched.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "image {} (country {country}) matches no region rule",
                im.image_id
            ))
        })?;
        out.assignments.insert(im.image_id, split);
    }

    let mut report = LeakageReport::default();
    let mut members: BTreeMap<u64, Vec<ImageId>> = BTreeMap::new();
    for im in &d.images {
        if let Some(c) = im.cluster_id {
            members.entry(c).or_default().push(im.image_id);
        }
    }
    for (cluster, ids) in members {
        let mut votes: BTreeMap<Split, usize> = BTreeMap::new();
        for id in &ids {
            *votes.entry(out.assignments[id]).or_default() += 1;
        }
        if votes.len() < 2 {
            continue;
        }
        let majority = votes
            .iter()
            .rev()
            .max_by_key(|(_, n)| **n)
            .map(|(s, _)| *s)
            .unwrap();
        for id in &ids {
            if out.assignments[id] != majority {
                out.assignments.insert(*id, majority);
                report.moved_images += 1;
            }
        }
        report.moved_clusters.push((cluster, majority));
    }
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// label fractions
// ---------------------------------------------------------------------------

/// Number of strong images for a fraction, rounding half away from zero.
pub fn strong_count(fraction: f64, train_size: usize) -> usize {
    (fraction * train_size as f64).round() as usize
}

/// Mark `round(fraction * |train|)` training images as strong and the rest weak.
///
/// With more than one class, one strong image is first drawn per class that
/// appears in training (while the budget allows), so rare classes keep at
/// least one box-labeled example.
pub fn sample_label_fractions(
    d: &Dataset,
    split: &SplitAssignment,
    fraction: f64,
    seed: u64,
) -> Result<LabelModeAssignment> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let train = split.images_in(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let k = strong_count(fraction, train.len());
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {} training images selects no strong image",
            train.len()
        )));
    }

    let mut order = train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut strong: BTreeSet<ImageId> = BTreeSet::new();
    if d.class_table.len() > 1 {
        let classes: HashMap<ImageId, BTreeSet<ClassId>> = d
            .images
            .iter()
            .map(|im| {
                (
                    im.image_id,
                    im.annotations.iter().map(|a| a.class_id).collect(),
                )
            })
            .collect();
        let present: BTreeSet<ClassId> = train
            .iter()
            .filter_map(|id| classes.get(id))
            .flatten()
            .copied()
            .collect();
        let mut covered: BTreeSet<ClassId> = BTreeSet::new();
        for c in present {
            if strong.len() == k {
                break;
            }
            if covered.contains(&c) {
                continue;
            }
            if let Some(id) = order
                .iter()
                .find(|id| !strong.contains(id) && classes.get(id).is_some_and(|s| s.contains(&c)))
            {
                strong.insert(*id);
                covered.extend(classes[id].iter().copied());
            }
        }
    }
    for id in &order {
        if strong.len() == k {
            break;
        }
        strong.insert(*id);
    }

    Ok(LabelModeAssignment {
        modes: train
            .into_iter()
            .map(|id| {
                let mode = if strong.contains(&id) {
                    LabelMode::Strong
                } else {
                    LabelMode::Weak
                };
                (id, mode)
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// weak labels
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakSource {
    BoxCenter,
    SourcePoint,
}

/// Replace each box on a weak image with one point of the same class and id.
///
/// Pre-existing point annotations on weak images are dropped so that every
/// weak point stands for exactly one original box. Strong and unlisted images
/// are returned unchanged.
pub fn derive_weak_labels(
    d: &Dataset,
    modes: &LabelModeAssignment,
    source: WeakSource,
) -> Result<Dataset> {
    let ids = d.image_ids();
    if let Some(missing) = modes.modes.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Consistency(format!(
            "label modes reference unknown image {missing}"
        )));
    }
    let mut out = d.clone();
    for im in &mut out.images {
        if !modes.is_weak(im.image_id) {
            continue;
        }
        let mut points = Vec::with_capacity(im.annotations.len());
        for a in &im.annotations {
            let Geometry::Box(b) = a.geometry else {
                continue;
            };
            let p = match source {
                WeakSource::BoxCenter => box_center(&b),
                WeakSource::SourcePoint => a.source_point.ok_or_else(|| {
                    Error::Consistency(format!("annotation {} has no pixel source point", a.id))
                })?,
            };
            points.push(Annotation {
                geometry: Geometry::Point(p),
                ..a.clone()
            });
        }
        im.annotations = points;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// retention
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub kept_images: usize,
    pub dropped_images: usize,
    pub dropped_points: usize,
}

/// Keep annotated images where some box contains some point label, and drop
/// point labels that fall in no box.
///
/// Point labels are point annotations plus the pixel source points attached to
/// box annotations. Images with no annotations at all pass through untouched.
pub fn retention_filter(d: &Dataset) -> (Dataset, RetentionReport) {
    let mut report = RetentionReport::default();
    let mut images = Vec::with_capacity(d.images.len());
    for im in &d.images {
        if !im.is_positive() {
            report.kept_images += 1;
            images.push(im.clone());
            continue;
        }
        let boxes: Vec<_> = im.boxes().copied().collect();
        let in_any_box = |p: &crate::datamodel::PixelPoint| boxes.iter().any(|b| contains(b, p));
        let candidates = im
            .annotations
            .iter()
            .filter_map(|a| a.point().or(a.source_point.as_ref()));
        let keep = candidates.clone().any(in_any_box);
        if !keep {
            report.dropped_images += 1;
            continue;
        }
        let mut kept = im.clone();
        kept.annotations.clear();
        for a in &im.annotations {
            match &a.geometry {
                Geometry::Point(p) if !in_any_box(p) => report.dropped_points += 1,
                Geometry::Box(_) if a.source_point.is_some_and(|p| !in_any_box(&p)) => {
                    report.dropped_points += 1;
                    kept.annotations.push(Annotation {
                        source_point: None,
                        ..a.clone()
                    });
                }
                _ => kept.annotations.push(a.clone()),
            }
        }
        report.kept_images += 1;
        images.push(kept);
    }
    (Dataset::new(d.class_table.clone(), images), report)
}
