//! Stand-in for the point-to-box teacher: turns point labels into pseudo boxes
//! by perturbing the hidden true box behind each point.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Annotation, AnnotationId, BBox, Dataset, Detection, Geometry, PixelPoint, Provenance,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Std of the center offset per axis, as a fraction of the true box diagonal.
    pub center_jitter_sigma: f64,
    /// Std of the log scale factor applied to width and height.
    pub scale_jitter_sigma: f64,
    /// Probability that a point yields no box.
    pub drop_rate: f64,
    pub score_alpha: f64,
    pub score_beta: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            center_jitter_sigma: 0.0,
            scale_jitter_sigma: 0.0,
            drop_rate: 0.0,
            score_alpha: 2.0,
            score_beta: 2.0,
        }
    }
}

impl NoiseModel {
    pub fn check(&self) -> Result<()> {
        let ok = self.center_jitter_sigma.is_finite()
            && self.center_jitter_sigma >= 0.0
            && self.scale_jitter_sigma.is_finite()
            && self.scale_jitter_sigma >= 0.0
            && (0.0..=1.0).contains(&self.drop_rate)
            && self.score_alpha.is_finite()
            && self.score_alpha > 0.0
            && self.score_beta.is_finite()
            && self.score_beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid noise model {self:?}"
            )))
        }
    }
}

/// A pseudo box together with the point that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAnnotation {
    pub annotation: Annotation,
    pub source_point: PixelPoint,
    pub score: f64,
}

impl PseudoAnnotation {
    pub fn bbox(&self) -> &BBox {
        self.annotation
            .bbox()
            .expect("pseudo annotations carry boxes")
    }

    pub fn into_annotation(self) -> Annotation {
        Annotation {
            source_point: Some(self.source_point),
            score: Some(self.score),
            provenance: Provenance::Pseudo,
            ..self.annotation
        }
    }
}

/// splitmix64 finalizer, used to derive independent per-image seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D4_049B_B133_111E);
    z ^ (z >> 31)
}

struct Draws {
    keep: f64,
    dx: f64,
    dy: f64,
    sw: f64,
    sh: f64,
    score: f64,
}

/// Position an interval of length `len` around `[lo, hi]` with minimal movement
/// so that it contains `p` and stays inside `[0, limit]`.
fn place(lo: f64, hi: f64, p: f64, limit: f64) -> (f64, f64) {
    if lo <= p && p <= hi && lo >= 0.0 && hi <= limit {
        return (lo, hi);
    }
    let len = (hi - lo).min(limit);
    let mut start = lo;
    if p < start {
        start = p;
    } else if p > start + len {
        start = p - len;
    }
    start = start.clamp(0.0, limit - len);
    (start.min(p), (start + len).min(limit).max(p))
}

fn perturb(
    truth: &BBox,
    point: PixelPoint,
    noise: &NoiseModel,
    d: &Draws,
    width: f64,
    height: f64,
) -> BBox {
    let diag = truth.diagonal();
    let shift_x = noise.center_jitter_sigma * diag * d.dx;
    let shift_y = noise.center_jitter_sigma * diag * d.dy;
    let grow_x = (noise.scale_jitter_sigma * d.sw).exp() - 1.0;
    let grow_y = (noise.scale_jitter_sigma * d.sh).exp() - 1.0;
    let half_w = truth.width() / 2.0 * grow_x;
    let half_h = truth.height() / 2.0 * grow_y;
    let (xmin, xmax) = place(
        truth.xmin + shift_x - half_w,
        truth.xmax + shift_x + half_w,
        point.x,
        width,
    );
    let (ymin, ymax) = place(
        truth.ymin + shift_y - half_h,
        truth.ymax + shift_y + half_h,
        point.y,
        height,
    );
    BBox {
        xmin,
        ymin,
        xmax,
        ymax,
    }
}

/// Generate pseudo boxes for the point annotations in `weak`.
///
/// Each point's hidden true box is the box annotation with the same id in
/// `truth`. Per point: with probability `drop_rate` nothing is emitted;
/// otherwise the true box's center is jittered, its sides rescaled, and the
/// result moved the least distance needed to contain the point (and stay inside
/// the image). Scores are Beta distributed. Every image of `weak` is returned,
/// carrying only its pseudo boxes. Random draws are derived per image from
/// `seed`, so results do not depend on image order.
pub fn simulate_pseudo_labels(
    weak: &Dataset,
    truth: &Dataset,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    noise.check()?;
    let hidden: HashMap<AnnotationId, BBox> = truth
        .annotations()
        .filter_map(|(_, a)| a.bbox().map(|b| (a.id, *b)))
        .collect();
    let score_dist = Beta::new(noise.score_alpha, noise.score_beta)
        .map_err(|e| Error::InvalidArgument(format!("score distribution: {e}")))?;

    let mut out = weak.clone();
    for im in &mut out.images {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, im.image_id));
        let mut pseudo = Vec::new();
        for a in &im.annotations {
            let Geometry::Point(point) = a.geometry else {
                continue;
            };
            let true_box = hidden.get(&a.id).ok_or_else(|| {
                Error::Consistency(format!("point annotation {} has no hidden true box", a.id))
            })?;
            // always draw everything so streams stay aligned across noise settings
            let draws = Draws {
                keep: rng.random::<f64>(),
                dx: rng.sample(StandardNormal),
                dy: rng.sample(StandardNormal),
                sw: rng.sample(StandardNormal),
                sh: rng.sample(StandardNormal),
                score: score_dist.sample(&mut rng),
            };
            if draws.keep < noise.drop_rate {
                continue;
            }
            let bbox = perturb(
                true_box,
                point,
                noise,
                &draws,
                im.width as f64,
                im.height as f64,
            );
            let p = PseudoAnnotation {
                annotation: Annotation {
                    geometry: Geometry::Box(bbox),
                    ..a.clone()
                },
                source_point: point,
                score: draws.score,
            };
            pseudo.push(p.into_annotation());
        }
        im.annotations = pseudo;
    }
    Ok(out)
}

/// Pseudo boxes of a dataset as scored detections.
pub fn pseudo_detections(d: &Dataset) -> Vec<Detection> {
    d.annotations()
        .filter(|(_, a)| a.provenance == Provenance::Pseudo)
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

/// Union of strong and pseudo-labelled images with annotation ids re-issued from 1.
pub fn merge_strong_and_pseudo(strong: &Dataset, pseudo: &Dataset) -> Result<Dataset> {
    if strong.class_table != pseudo.class_table {
        return Err(Error::Consistency("class tables differ".into()));
    }
    let strong_ids: HashSet<_> = strong.image_ids();
    if let Some(im) = pseudo
        .images
        .iter()
        .find(|im| strong_ids.contains(&im.image_id))
    {
        return Err(Error::Consistency(format!(
            "image {} is both strong and pseudo-labelled",
            im.image_id
        )));
    }
    let mut images: Vec<_> = strong
        .images
        .iter()
        .chain(&pseudo.images)
        .cloned()
        .collect();
    let mut next: AnnotationId = 1;
    for im in &mut images {
        for a in &mut im.annotations {
            a.id = next;
            next += 1;
        }
    }
    Ok(Dataset::new(strong.class_table.clone(), images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{validate_dataset, ClassTable, ImageRecord};
    use crate::geometry::contains;
    use crate::splitter::{derive_weak_labels, LabelMode, LabelModeAssignment, WeakSource};

    fn fixture() -> (Dataset, Dataset) {
        let boxes = [
            (10.0, 10.0, 40.0, 60.0),
            (100.0, 120.0, 130.0, 150.0),
            (200.0, 10.0, 260.0, 40.0),
            (0.0, 380.0, 30.0, 416.0),
            (390.0, 0.0, 416.0, 25.0),
        ];
        let mut im = ImageRecord::new(1, 416, 416);
        for (i, (a, b, c, d)) in boxes.into_iter().enumerate() {
            im.annotations.push(Annotation::with_box(
                i as u64 + 1,
                0,
                BBox::new(a, b, c, d).unwrap(),
            ));
        }
        let truth = Dataset::new(ClassTable::single("turbine"), vec![im]);
        let modes = LabelModeAssignment {
            modes: [(1, LabelMode::Weak)].into(),
        };
        let weak = derive_weak_labels(&truth, &modes, WeakSource::BoxCenter).unwrap();
        (truth, weak)
    }

    #[test]
    fn zero_noise_is_identity() {
        let (truth, weak) = fixture();
        let out = simulate_pseudo_labels(&weak, &truth, &NoiseModel::default(), 3).unwrap();
        let got: Vec<_> = out.images[0]
            .annotations
            .iter()
            .map(|a| *a.bbox().unwrap())
            .collect();
        let want: Vec<_> = truth.images[0].boxes().copied().collect();
        assert_eq!(got, want);
        assert!(out.images[0]
            .annotations
            .iter()
            .all(|a| a.provenance == Provenance::Pseudo && a.score.is_some()));
    }

    #[test]
    fn full_drop_is_empty() {
        let (truth, weak) = fixture();
        let noise = NoiseModel {
            drop_rate: 1.0,
            ..Default::default()
        };
        let out = simulate_pseudo_labels(&weak, &truth, &noise, 3).unwrap();
        assert_eq!(out.annotation_count(), 0);
    }

    #[test]
    fn noisy_boxes_contain_points_and_validate() {
        let (truth, weak) = fixture();
        let noise = NoiseModel {
            center_jitter_sigma: 0.1,
            scale_jitter_sigma: 0.1,
            ..Default::default()
        };
        let out = simulate_pseudo_labels(&weak, &truth, &noise, 7).unwrap();
        assert_eq!(out.annotation_count(), 5);
        for a in &out.images[0].annotations {
            assert!(contains(a.bbox().unwrap(), &a.source_point.unwrap()));
        }
        assert!(validate_dataset(&out).is_valid());
        let again = simulate_pseudo_labels(&weak, &truth, &noise, 7).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn extreme_noise_keeps_containment() {
        let (truth, weak) = fixture();
        let noise = NoiseModel {
            center_jitter_sigma: 3.0,
            scale_jitter_sigma: 1.5,
            ..Default::default()
        };
        for seed in 0..50 {
            let out = simulate_pseudo_labels(&weak, &truth, &noise, seed).unwrap();
            for a in &out.images[0].annotations {
                let b = a.bbox().unwrap();
                assert!(contains(b, &a.source_point.unwrap()), "seed {seed}: {b}");
                assert!(
                    b.within(416.0, 416.0) && b.has_positive_area(),
                    "seed {seed}: {b}"
                );
            }
        }
    }

    #[test]
    fn missing_hidden_box_is_error() {
        let (truth, mut weak) = fixture();
        weak.images[0].annotations[0].id = 99;
        assert!(simulate_pseudo_labels(&weak, &truth, &NoiseModel::default(), 0).is_err());
    }

    #[test]
    fn merge() {
        let mk = |ids: &[u64]| {
            let images = ids
                .iter()
                .map(|&id| {
                    let mut im = ImageRecord::new(id, 50, 50);
                    im.annotations.push(Annotation::with_box(
                        1,
                        0,
                        BBox::new(1.0, 1.0, 5.0, 5.0).unwrap(),
                    ));
                    im
                })
                .collect();
            Dataset::new(ClassTable::single("t"), images)
        };
        let merged = merge_strong_and_pseudo(&mk(&[1, 2, 3]), &mk(&[4, 5])).unwrap();
        assert_eq!(merged.images.len(), 5);
        assert!(validate_dataset(&merged).is_valid());
        assert!(merge_strong_and_pseudo(&mk(&[1, 4]), &mk(&[4])).is_err());
    }

    #[test]
    fn invalid_noise_rejected() {
        for noise in [
            NoiseModel {
                drop_rate: 1.5,
                ..Default::default()
            },
            NoiseModel {
                center_jitter_sigma: -0.1,
                ..Default::default()
            },
            NoiseModel {
                score_alpha: 0.0,
                ..Default::default()
            },
        ] {
            assert!(noise.check().is_err());
        }
    }
}
