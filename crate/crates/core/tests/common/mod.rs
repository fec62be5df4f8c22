//! Brute-force reference implementations and random corpus builders shared by
//! the integration and acceptance tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use geoweak_core::datamodel::{
    Annotation, BBox, ClassTable, Dataset, Detection, GeoPoint, ImageRecord,
};
use geoweak_core::geocluster::haversine;
use rand::Rng;

// ---------------------------------------------------------------------------
// evaluator reference
// ---------------------------------------------------------------------------

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = if a.xmin > b.xmin { a.xmin } else { b.xmin };
    let y0 = if a.ymin > b.ymin { a.ymin } else { b.ymin };
    let x1 = if a.xmax < b.xmax { a.xmax } else { b.xmax };
    let y1 = if a.ymax < b.ymax { a.ymax } else { b.ymax };
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    let area_a = (a.xmax - a.xmin) * (a.ymax - a.ymin);
    let area_b = (b.xmax - b.xmin) * (b.ymax - b.ymin);
    inter / (area_a + area_b - inter)
}

/// True when `a` ranks strictly before `b`.
fn ranks_before(a: &Detection, b: &Detection) -> bool {
    let ka = [a.bbox.xmin, a.bbox.ymin, a.bbox.xmax, a.bbox.ymax];
    let kb = [b.bbox.xmin, b.bbox.ymin, b.bbox.xmax, b.bbox.ymax];
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.image_id != b.image_id {
        return a.image_id < b.image_id;
    }
    if a.class_id != b.class_id {
        return a.class_id < b.class_id;
    }
    for i in 0..4 {
        if ka[i] != kb[i] {
            return ka[i] < kb[i];
        }
    }
    false
}

/// Per-threshold (mAP, [(class, AP)]) by exhaustive scanning.
pub fn ref_evaluate(
    preds: &[Detection],
    gt: &Dataset,
    thresholds: &[f64],
) -> Vec<(Option<f64>, Vec<(u32, Option<f64>)>)> {
    // selection sort into ranking order
    let mut ranked: Vec<Detection> = Vec::new();
    let mut left: Vec<Detection> = preds.to_vec();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if ranks_before(&left[i], &left[best]) {
                best = i;
            }
        }
        ranked.push(left.remove(best));
    }

    let mut gts: Vec<(u64, u32, BBox)> = Vec::new();
    for im in &gt.images {
        for a in &im.annotations {
            if let Some(b) = a.bbox() {
                gts.push((im.image_id, a.class_id, *b));
            }
        }
    }
    let mut classes: Vec<u32> = gts
        .iter()
        .map(|g| g.1)
        .chain(ranked.iter().map(|d| d.class_id))
        .collect();
    classes.sort();
    classes.dedup();

    thresholds
        .iter()
        .map(|&tau| {
            let mut per_class = Vec::new();
            for &c in &classes {
                let n_gt = gts.iter().filter(|g| g.1 == c).count();
                let mut taken = vec![false; gts.len()];
                let mut flags = Vec::new();
                for d in ranked.iter().filter(|d| d.class_id == c) {
                    let mut pick: Option<usize> = None;
                    let mut pick_iou = 0.0;
                    for (g, (img, cls, b)) in gts.iter().enumerate() {
                        if taken[g] || *img != d.image_id || *cls != c {
                            continue;
                        }
                        let v = ref_iou(&d.bbox, b);
                        if v >= tau && (pick.is_none() || v > pick_iou) {
                            pick = Some(g);
                            pick_iou = v;
                        }
                    }
                    if let Some(g) = pick {
                        taken[g] = true;
                    }
                    flags.push(pick.is_some());
                }
                let ap = if n_gt == 0 {
                    None
                } else {
                    let mut sum = 0.0;
                    for k in 0..flags.len() {
                        if !flags[k] {
                            continue;
                        }
                        // interpolated precision: best precision at any rank >= k
                        let mut best = 0.0f64;
                        for j in k..flags.len() {
                            let tp = flags[..=j].iter().filter(|f| **f).count();
                            let p = tp as f64 / (j + 1) as f64;
                            if p > best {
                                best = p;
                            }
                        }
                        sum += best;
                    }
                    Some(sum / n_gt as f64)
                };
                per_class.push((c, ap));
            }
            let defined: Vec<f64> = per_class.iter().filter_map(|(_, ap)| *ap).collect();
            let map = if defined.is_empty() {
                None
            } else {
                let mut s = 0.0;
                for v in &defined {
                    s += v;
                }
                Some(s / defined.len() as f64)
            };
            (map, per_class)
        })
        .collect()
}

fn random_box(rng: &mut impl Rng, size: f64, integer: bool) -> BBox {
    let mut pick = |lo: f64, hi: f64| {
        let v = rng.random_range(lo..hi);
        if integer {
            v.floor()
        } else {
            v
        }
    };
    let x = pick(0.0, size - 12.0);
    let y = pick(0.0, size - 12.0);
    let w = pick(2.0, 12.0).max(1.0);
    let h = pick(2.0, 12.0).max(1.0);
    BBox {
        xmin: x,
        ymin: y,
        xmax: x + w,
        ymax: y + h,
    }
}

/// Ground truth plus detections, some jittered from the truth and some random.
/// With `integer` set, coordinates are whole numbers so IoU ties and exact
/// threshold hits occur.
pub fn random_eval_corpus(rng: &mut impl Rng, integer: bool) -> (Dataset, Vec<Detection>) {
    let n_classes = rng.random_range(1..=5usize);
    let n_images = rng.random_range(1..=50u64);
    let size = 48.0;
    let names: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
    let mut images = Vec::new();
    let mut ann = 1;
    for id in 1..=n_images {
        let mut im = ImageRecord::new(id, size as u32, size as u32);
        for _ in 0..rng.random_range(0..6) {
            let class = rng.random_range(0..n_classes) as u32;
            im.annotations.push(Annotation::with_box(
                ann,
                class,
                random_box(rng, size, integer),
            ));
            ann += 1;
        }
        images.push(im);
    }
    let gt = Dataset::new(ClassTable::from_names(&names).unwrap(), images);

    let n_dets = rng.random_range(0..=200usize);
    let mut dets = Vec::with_capacity(n_dets);
    let all: Vec<(u64, u32, BBox)> = gt
        .annotations()
        .map(|(im, a)| (im.image_id, a.class_id, *a.bbox().unwrap()))
        .collect();
    for _ in 0..n_dets {
        let score = if integer {
            (rng.random_range(0..10) as f64) / 10.0
        } else {
            rng.random::<f64>()
        };
        if !all.is_empty() && rng.random_bool(0.6) {
            let (image_id, class_id, b) = all[rng.random_range(0..all.len())];
            let j = |rng: &mut dyn rand::RngCore| {
                let v: f64 = rng.random_range(-3.0..3.0);
                if integer {
                    v.round()
                } else {
                    v
                }
            };
            let (dx, dy, dw, dh) = (j(rng), j(rng), j(rng), j(rng));
            let xmin = (b.xmin + dx).max(0.0);
            let ymin = (b.ymin + dy).max(0.0);
            let bbox = BBox {
                xmin,
                ymin,
                xmax: (b.xmax + dx + dw).max(xmin + 1.0),
                ymax: (b.ymax + dy + dh).max(ymin + 1.0),
            };
            dets.push(Detection {
                image_id,
                class_id,
                bbox,
                score,
            });
        } else {
            dets.push(Detection {
                image_id: rng.random_range(1..=n_images),
                class_id: rng.random_range(0..n_classes) as u32,
                bbox: random_box(rng, size, integer),
                score,
            });
        }
    }
    (gt, dets)
}

// ---------------------------------------------------------------------------
// DBSCAN reference
// ---------------------------------------------------------------------------

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Components of the core-core "within eps" graph; a border point joins the
/// adjacent component whose smallest core index is lowest. Returns labels
/// canonicalized by first appearance.
pub fn ref_dbscan(points: &[GeoPoint], eps_m: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let close = |i: usize, j: usize| haversine(&points[i], &points[j]) <= eps_m;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // with the union rule above every root is the smallest index in its component
    let mut label: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            label[i] = Some(find(&mut parent, i));
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        label[i] = (0..n)
            .filter(|&j| core[j] && close(i, j))
            .map(|j| find(&mut parent, j))
            .min();
    }
    canonical(&label)
}

pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Points scattered around a few centers at distances comparable to `eps_m`.
pub fn random_points(rng: &mut impl Rng, eps_m: f64) -> Vec<GeoPoint> {
    let n = rng.random_range(0..=200usize);
    let n_centers = rng.random_range(1..=8usize);
    let centers: Vec<GeoPoint> = (0..n_centers)
        .map(|_| GeoPoint {
            lat: rng.random_range(-60.0..60.0),
            lon: rng.random_range(-179.0..179.0),
        })
        .collect();
    let spread_deg = eps_m * rng.random_range(0.5..6.0) / 111_000.0;
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..n_centers)];
            GeoPoint {
                lat: (c.lat + rng.random_range(-spread_deg..spread_deg)).clamp(-90.0, 90.0),
                lon: c.lon + rng.random_range(-spread_deg..spread_deg),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// split corpora
// ---------------------------------------------------------------------------

/// Images with random cluster ids, countries and longitudes. Countries are
/// deliberately mixed within clusters so the region split has leakage to repair.
pub fn random_split_corpus(rng: &mut impl Rng) -> Dataset {
    let n_images = rng.random_range(3..=120u64);
    let n_clusters = rng.random_range(3..=n_images.min(40));
    let countries = ["US", "CN", "ES", "DE", "BR"];
    let mut images = Vec::new();
    for id in 1..=n_images {
        let mut im = ImageRecord::new(id, 64, 64);
        // first clusters get one image each so at least three exist
        im.cluster_id = Some(if id <= n_clusters {
            id - 1
        } else {
            rng.random_range(0..n_clusters)
        });
        im.country = Some(countries[rng.random_range(0..countries.len())].to_string());
        im.centroid_geo = Some(GeoPoint {
            lat: rng.random_range(25.0..50.0),
            lon: rng.random_range(-125.0..-70.0),
        });
        images.push(im);
    }
    Dataset::new(ClassTable::single("turbine"), images)
}

/// Cluster ids that appear in more than one split.
pub fn straddling_clusters(
    d: &Dataset,
    split: &geoweak_core::splitter::SplitAssignment,
) -> Vec<u64> {
    let mut seen: BTreeMap<u64, geoweak_core::splitter::Split> = BTreeMap::new();
    let mut bad = Vec::new();
    for im in &d.images {
        let c = im.cluster_id.unwrap();
        let s = split.get(im.image_id).unwrap();
        match seen.get(&c) {
            Some(prev) if *prev != s => bad.push(c),
            Some(_) => {}
            None => {
                seen.insert(c, s);
            }
        }
    }
    bad.sort();
    bad.dedup();
    bad
}
