//! Shared domain types for annotated remote-sensing corpora.
//!
//! Geometry is in pixel space with corner-form boxes (`xmin, ymin, xmax, ymax`).
//! Geographic coordinates are only carried as provenance of point labels and as
//! image centroids used for clustering and region splits.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ImageId = u64;
pub type AnnotationId = u64;
pub type ClassId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Geometry(format!("non-finite point ({x}, {y})")));
        }
        Ok(Self { x, y })
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box in corner form.
///
/// Fields are public so that malformed boxes can be represented and reported by
/// [`validate_dataset`]; use [`BBox::new`] to construct a checked box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if !b.is_finite() {
            return Err(Error::Geometry(format!("non-finite box {b}")));
        }
        if !b.has_positive_area() {
            return Err(Error::Geometry(format!("box {b} has no area")));
        }
        Ok(b)
    }

    /// Build from the `[x, y, width, height]` convention used in files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn is_finite(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn has_positive_area(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.has_positive_area()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= width && self.ymax <= height
    }

    /// Clip to `[0,width]x[0,height]`. The result may be degenerate when the box
    /// lies entirely outside the image.
    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.xmin, self.ymin, self.xmax, self.ymax
        )
    }
}

/// Quadrilateral given by four corners in polygon order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub corners: [PixelPoint; 4],
}

impl OrientedBox {
    pub fn new(corners: [PixelPoint; 4]) -> Result<Self> {
        let o = Self { corners };
        if corners.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("non-finite oriented box corner".into()));
        }
        if o.is_degenerate() {
            return Err(Error::Geometry("oriented box corners are collinear".into()));
        }
        Ok(o)
    }

    pub fn from_flat(coords: [f64; 8]) -> Result<Self> {
        let c = |i: usize| PixelPoint {
            x: coords[2 * i],
            y: coords[2 * i + 1],
        };
        Self::new([c(0), c(1), c(2), c(3)])
    }

    /// True when every corner lies on one line, i.e. the enclosed area is zero.
    pub fn is_degenerate(&self) -> bool {
        let [a, b, c, d] = self.corners;
        let cross =
            |p: PixelPoint, q: PixelPoint| (q.x - a.x) * (p.y - a.y) - (q.y - a.y) * (p.x - a.x);
        // all four corners coinciding also counts as degenerate
        let base = [b, c, d].into_iter().find(|p| p.x != a.x || p.y != a.y);
        match base {
            None => true,
            Some(base) => [b, c, d].into_iter().all(|p| cross(base, p) == 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        if !p.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "geographic point ({lat}, {lon}) out of range"
            )));
        }
        Ok(p)
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

/// Ordered class list with ids contiguous from zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    classes: Vec<ClassEntry>,
}

/// Main FAIR1M categories; subcategories are not modelled.
pub const FAIR1M_CATEGORIES: [&str; 5] = ["ship", "vehicle", "airplane", "sports court", "road"];

impl ClassTable {
    pub fn new(mut classes: Vec<ClassEntry>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        for (expected, c) in classes.iter().enumerate() {
            if c.id as usize != expected {
                return Err(Error::Consistency(format!(
                    "class ids must be unique and contiguous from 0; found {} at position {expected}",
                    c.id
                )));
            }
        }
        if classes.is_empty() {
            return Err(Error::Consistency("class table is empty".into()));
        }
        Ok(Self { classes })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassEntry {
                    id: i as ClassId,
                    name: n.as_ref().to_string(),
                })
                .collect(),
        )
    }

    pub fn single(name: &str) -> Self {
        Self::from_names(&[name]).expect("one class is always contiguous")
    }

    pub fn fair1m() -> Self {
        Self::from_names(&FAIR1M_CATEGORIES).expect("static table")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Box(BBox),
    Point(PixelPoint),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Manual,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: AnnotationId,
    pub class_id: ClassId,
    pub geometry: Geometry,
    /// Original geographic point label, if any.
    pub source_geo: Option<GeoPoint>,
    /// The point label projected into pixel space.
    pub source_point: Option<PixelPoint>,
    /// Confidence, only set on pseudo labels.
    pub score: Option<f64>,
    pub provenance: Provenance,
}

impl Annotation {
    pub fn new(id: AnnotationId, class_id: ClassId, geometry: Geometry) -> Self {
        Self {
            id,
            class_id,
            geometry,
            source_geo: None,
            source_point: None,
            score: None,
            provenance: Provenance::Manual,
        }
    }

    pub fn with_box(id: AnnotationId, class_id: ClassId, bbox: BBox) -> Self {
        Self::new(id, class_id, Geometry::Box(bbox))
    }

    pub fn with_point(id: AnnotationId, class_id: ClassId, point: PixelPoint) -> Self {
        Self::new(id, class_id, Geometry::Point(point))
    }

    pub fn bbox(&self) -> Option<&BBox> {
        match &self.geometry {
            Geometry::Box(b) => Some(b),
            Geometry::Point(_) => None,
        }
    }

    pub fn point(&self) -> Option<&PixelPoint> {
        match &self.geometry {
            Geometry::Point(p) => Some(p),
            Geometry::Box(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    /// ISO 3166 alpha-2 code.
    pub country: Option<String>,
    pub centroid_geo: Option<GeoPoint>,
    pub cluster_id: Option<u64>,
}

impl ImageRecord {
    pub fn new(image_id: ImageId, width: u32, height: u32) -> Self {
        Self {
            image_id,
            width,
            height,
            annotations: Vec::new(),
            country: None,
            centroid_geo: None,
            cluster_id: None,
        }
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.annotations.iter().filter_map(|a| a.bbox())
    }

    pub fn is_positive(&self) -> bool {
        !self.annotations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_table: ClassTable,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(class_table: ClassTable, images: Vec<ImageRecord>) -> Self {
        Self {
            class_table,
            images,
        }
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.image_id == id)
    }

    pub fn annotations(&self) -> impl Iterator<Item = (&ImageRecord, &Annotation)> {
        self.images
            .iter()
            .flat_map(|im| im.annotations.iter().map(move |a| (im, a)))
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|im| im.annotations.len()).sum()
    }

    pub fn image_ids(&self) -> HashSet<ImageId> {
        self.images.iter().map(|im| im.image_id).collect()
    }

    /// Smallest annotation id not used in the dataset.
    pub fn next_annotation_id(&self) -> AnnotationId {
        self.annotations().map(|(_, a)| a.id + 1).max().unwrap_or(1)
    }
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    InvalidClassTable,
    DuplicateImageId,
    DuplicateAnnotationId,
    InvalidImageSize,
    DegenerateBox,
    NonFiniteCoordinate,
    BoxOutOfBounds,
    UnknownClass,
    InvalidGeoPoint,
    InvalidScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub image_id: Option<ImageId>,
    pub annotation_id: Option<AnnotationId>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub images: usize,
    pub boxes: usize,
    pub points: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Collect every invariant violation in `d`. Never fails and never mutates.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut violations = Vec::new();
    let mut add =
        |kind, image_id: Option<ImageId>, annotation_id: Option<AnnotationId>, message: String| {
            violations.push(Violation {
                kind,
                image_id,
                annotation_id,
                message,
            })
        };

    for (pos, c) in d.class_table.entries().iter().enumerate() {
        if c.id as usize != pos {
            add(
                ViolationKind::InvalidClassTable,
                None,
                None,
                format!("class id {} at position {pos}", c.id),
            );
        }
    }

    let mut image_ids = HashSet::new();
    let mut annotation_ids = HashSet::new();
    for im in &d.images {
        report.images += 1;
        if !image_ids.insert(im.image_id) {
            add(
                ViolationKind::DuplicateImageId,
                Some(im.image_id),
                None,
                format!("image id {} appears more than once", im.image_id),
            );
        }
        if im.width == 0 || im.height == 0 {
            add(
                ViolationKind::InvalidImageSize,
                Some(im.image_id),
                None,
                format!("image {} has size {}x{}", im.image_id, im.width, im.height),
            );
        }
        if let Some(g) = im.centroid_geo {
            if !g.is_valid() {
                add(
                    ViolationKind::InvalidGeoPoint,
                    Some(im.image_id),
                    None,
                    format!(
                        "image {} centroid ({}, {}) out of range",
                        im.image_id, g.lat, g.lon
                    ),
                );
            }
        }
        for a in &im.annotations {
            let (iid, aid) = (Some(im.image_id), Some(a.id));
            if !annotation_ids.insert(a.id) {
                add(
                    ViolationKind::DuplicateAnnotationId,
                    iid,
                    aid,
                    format!("annotation id {} appears more than once", a.id),
                );
            }
            if !d.class_table.contains(a.class_id) {
                add(
                    ViolationKind::UnknownClass,
                    iid,
                    aid,
                    format!("annotation {} has unknown class {}", a.id, a.class_id),
                );
            }
            match &a.geometry {
                Geometry::Box(b) => {
                    report.boxes += 1;
                    if !b.is_finite() {
                        add(
                            ViolationKind::NonFiniteCoordinate,
                            iid,
                            aid,
                            format!("annotation {} box {b} is not finite", a.id),
                        );
                    } else if !b.has_positive_area() {
                        add(
                            ViolationKind::DegenerateBox,
                            iid,
                            aid,
                            format!("annotation {} box {b} has no area", a.id),
                        );
                    } else if !b.within(im.width as f64, im.height as f64) {
                        add(
                            ViolationKind::BoxOutOfBounds,
                            iid,
                            aid,
                            format!(
                                "annotation {} box {b} exceeds image {}x{}",
                                a.id, im.width, im.height
                            ),
                        );
                    }
                }
                Geometry::Point(p) => {
                    report.points += 1;
                    if !p.is_finite() {
                        add(
                            ViolationKind::NonFiniteCoordinate,
                            iid,
                            aid,
                            format!("annotation {} point is not finite", a.id),
                        );
                    }
                }
            }
            if a.source_point.is_some_and(|p| !p.is_finite()) {
                add(
                    ViolationKind::NonFiniteCoordinate,
                    iid,
                    aid,
                    format!("annotation {} source point is not finite", a.id),
                );
            }
            if a.source_geo.is_some_and(|g| !g.is_valid()) {
                add(
                    ViolationKind::InvalidGeoPoint,
                    iid,
                    aid,
                    format!("annotation {} source location out of range", a.id),
                );
            }
            if a.score.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
                add(
                    ViolationKind::InvalidScore,
                    iid,
                    aid,
                    format!("annotation {} score outside [0,1]", a.id),
                );
            }
        }
    }
    report.violations = violations;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_box(b: BBox) -> Dataset {
        let mut im = ImageRecord::new(1, 100, 100);
        im.annotations.push(Annotation::with_box(7, 0, b));
        Dataset::new(ClassTable::single("turbine"), vec![im])
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        let r = validate_dataset(&one_box(BBox::new(1.0, 2.0, 30.0, 40.0).unwrap()));
        assert!(r.is_valid());
        assert_eq!((r.images, r.boxes, r.points), (1, 1, 0));
    }

    #[test]
    fn zero_width_box_is_reported_with_its_id() {
        let d = one_box(BBox {
            xmin: 5.0,
            ymin: 1.0,
            xmax: 5.0,
            ymax: 9.0,
        });
        let r = validate_dataset(&d);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::DegenerateBox);
        assert_eq!(r.violations[0].annotation_id, Some(7));
    }

    #[test]
    fn duplicate_image_id() {
        let mut d = one_box(BBox::new(1.0, 1.0, 3.0, 3.0).unwrap());
        d.images.push(ImageRecord::new(1, 10, 10));
        assert_eq!(
            validate_dataset(&d).count(ViolationKind::DuplicateImageId),
            1
        );
    }

    #[test]
    fn out_of_bounds_and_bad_score() {
        let mut d = one_box(BBox::new(90.0, 90.0, 120.0, 95.0).unwrap());
        d.images[0].annotations[0].score = Some(1.5);
        let r = validate_dataset(&d);
        assert_eq!(r.count(ViolationKind::BoxOutOfBounds), 1);
        assert_eq!(r.count(ViolationKind::InvalidScore), 1);
    }

    #[test]
    fn checked_constructors() {
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(ClassTable::from_names::<&str>(&[]).is_err());
        assert_eq!(
            BBox::from_xywh(1.0, 2.0, 3.0, 4.0).unwrap().to_xywh(),
            [1.0, 2.0, 3.0, 4.0]
        );
    }
}
