//! Wind-farm grouping: DBSCAN over great-circle distance.
//!
//! Images are later split by farm so that turbines from one farm never end up
//! on both sides of a train/test boundary.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AnnotationId, Dataset, GeoPoint, ImageId};
use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters.
pub fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterLabel {
    Cluster(u64),
    Noise,
}

impl ClusterLabel {
    pub fn cluster(&self) -> Option<u64> {
        match self {
            ClusterLabel::Cluster(c) => Some(*c),
            ClusterLabel::Noise => None,
        }
    }
}

/// Per-point labels. Cluster ids are contiguous from 0 and ordered by the
/// input index of each cluster's first member.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<ClusterLabel>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.labels
            .iter()
            .filter_map(|l| l.cluster())
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == ClusterLabel::Noise)
            .count()
    }

    /// Manifest text: `point_index,cluster_id` with `noise` for unclustered points.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("point_index,cluster_id\n");
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                ClusterLabel::Cluster(c) => out.push_str(&format!("{i},{c}\n")),
                ClusterLabel::Noise => out.push_str(&format!("{i},noise\n")),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Neighborhood radius in meters.
    pub eps_m: f64,
    /// Minimum neighborhood size, the point itself included.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps_m: 2_000.0,
            min_pts: 3,
        }
    }
}

impl DbscanParams {
    pub fn new(eps_m: f64, min_pts: usize) -> Result<Self> {
        if !(eps_m.is_finite() && eps_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be > 0, got {eps_m}"
            )));
        }
        if min_pts == 0 {
            return Err(Error::InvalidArgument("min_pts must be >= 1".into()));
        }
        Ok(Self { eps_m, min_pts })
    }
}

fn neighborhoods(points: &[GeoPoint], eps_m: f64) -> Vec<Vec<usize>> {
    points
        .par_iter()
        .map(|p| {
            points
                .iter()
                .enumerate()
                .filter(|(_, q)| haversine(p, q) <= eps_m)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Density-based clustering with deterministic expansion order.
///
/// Points are visited in input order; each unvisited core point seeds a cluster
/// that is expanded breadth-first. A border point reachable from several
/// clusters joins whichever expands first.
pub fn dbscan(points: &[GeoPoint], params: &DbscanParams) -> ClusterAssignment {
    let neigh = neighborhoods(points, params.eps_m);
    let is_core: Vec<bool> = neigh.iter().map(|n| n.len() >= params.min_pts).collect();

    let mut raw: Vec<Option<usize>> = vec![None; points.len()];
    let mut next = 0usize;
    for seed in 0..points.len() {
        if raw[seed].is_some() || !is_core[seed] {
            continue;
        }
        let cluster = next;
        next += 1;
        raw[seed] = Some(cluster);
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neigh[p] {
                if raw[q].is_none() {
                    raw[q] = Some(cluster);
                    queue.push_back(q);
                }
            }
        }
    }

    // renumber by first member index
    let mut remap: Vec<Option<u64>> = vec![None; next];
    let mut fresh = 0u64;
    let labels = raw
        .into_iter()
        .map(|r| match r {
            None => ClusterLabel::Noise,
            Some(c) => {
                let id = *remap[c].get_or_insert_with(|| {
                    fresh += 1;
                    fresh - 1
                });
                ClusterLabel::Cluster(id)
            }
        })
        .collect();
    ClusterAssignment { labels }
}

/// Annotation ids and locations of every annotation carrying a geographic source, in dataset order.
pub fn annotation_geo_points(d: &Dataset) -> (Vec<AnnotationId>, Vec<GeoPoint>) {
    d.annotations()
        .filter_map(|(_, a)| a.source_geo.map(|g| (a.id, g)))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConflict {
    pub image_id: ImageId,
    /// Distinct clusters seen in the image, ascending.
    pub clusters: Vec<u64>,
    pub chosen: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Density clusters found among the points.
    pub clusters: usize,
    /// Singleton ids handed to noise-only and negative images.
    pub singletons: usize,
    pub conflicts: Vec<ClusterConflict>,
}

/// Set `cluster_id` on every image from per-annotation cluster labels.
///
/// `annotation_ids[i]` carries `assignment.labels[i]`. Images whose annotations are
/// all noise, and images with no annotations, get fresh singleton ids numbered
/// after the real clusters. An image touching several clusters takes the one
/// with most members in it (ties to the lower id) and is reported.
pub fn assign_clusters_to_images(
    d: &Dataset,
    annotation_ids: &[AnnotationId],
    assignment: &ClusterAssignment,
) -> Result<(Dataset, ClusterReport)> {
    if annotation_ids.len() != assignment.labels.len() {
        return Err(Error::Consistency(format!(
            "{} annotation ids but {} cluster labels",
            annotation_ids.len(),
            assignment.labels.len()
        )));
    }
    let by_annotation: BTreeMap<AnnotationId, ClusterLabel> = annotation_ids
        .iter()
        .copied()
        .zip(assignment.labels.iter().copied())
        .collect();

    let n_clusters = assignment.n_clusters() as u64;
    let mut next_singleton = n_clusters;
    let mut report = ClusterReport {
        clusters: n_clusters as usize,
        ..Default::default()
    };
    let mut out = d.clone();
    for im in &mut out.images {
        let labels: Vec<ClusterLabel> = im
            .annotations
            .iter()
            .filter_map(|a| by_annotation.get(&a.id).copied())
            .collect();
        if im.is_positive() && labels.is_empty() {
            return Err(Error::Consistency(format!(
                "image {} has annotations but none carries a geographic source point",
                im.image_id
            )));
        }
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for c in labels.iter().filter_map(|l| l.cluster()) {
            *counts.entry(c).or_default() += 1;
        }
        let cluster = match counts.len() {
            0 => {
                next_singleton += 1;
                report.singletons += 1;
                next_singleton - 1
            }
            1 => *counts.keys().next().unwrap(),
            _ => {
                // max_by_key keeps the last maximum, so iterate descending to land on the lowest id
                let chosen = counts
                    .iter()
                    .rev()
                    .max_by_key(|(_, n)| **n)
                    .map(|(c, _)| *c)
                    .unwrap();
                report.conflicts.push(ClusterConflict {
                    image_id: im.image_id,
                    clusters: counts.keys().copied().collect(),
                    chosen,
                });
                chosen
            }
        };
        im.cluster_id = Some(cluster);
    }
    Ok((out, report))
}

/// Cluster annotation source points and write the resulting ids onto images.
pub fn cluster_dataset(d: &Dataset, params: &DbscanParams) -> Result<(Dataset, ClusterReport)> {
    let (ids, points) = annotation_geo_points(d);
    let assignment = dbscan(&points, params);
    assign_clusters_to_images(d, &ids, &assignment)
}
