//! Data pipeline for point-supervised object detection on remote sensing
//! imagery: annotation parsing, box geometry, geographic clustering,
//! leakage-free splits, label-fraction sampling, simulated pseudo-labels and
//! multi-threshold AP evaluation.

pub mod datamodel;
pub mod error;
pub mod evaluator;
pub mod geocluster;
pub mod geometry;
pub mod harness;
pub mod parsers;
pub mod splitter;
pub mod teachersim;

pub use datamodel::{
    validate_dataset, Annotation, BBox, ClassTable, Dataset, Detection, GeoPoint, ImageRecord,
    OrientedBox, PixelPoint,
};
pub use error::{Error, Result};
