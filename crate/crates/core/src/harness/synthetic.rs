//! Desk-scale synthetic corpora: packed boxes on images grouped into farms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, BBox, ClassTable, Dataset, GeoPoint, ImageRecord};
use crate::error::{Error, Result};
use crate::geocluster::{haversine, EARTH_RADIUS_M};
use crate::geometry::iou;
use crate::parsers::{PointLocation, PointRecord};

/// Minimum distance between two farm centers.
pub const FARM_SEPARATION_M: f64 = 50_000.0;

const MIN_SIDE: f64 = 12.0;
const MAX_SIDE: f64 = 48.0;
const PLACEMENT_TRIES: usize = 2_000;

struct Region {
    country: &'static str,
    lat: (f64, f64),
    lon: (f64, f64),
}

// The two US entries straddle the central meridian used by the region split.
const REGIONS: [Region; 8] = [
    Region {
        country: "US",
        lat: (33.0, 47.0),
        lon: (-121.0, -101.0),
    },
    Region {
        country: "US",
        lat: (33.0, 44.0),
        lon: (-96.0, -77.0),
    },
    Region {
        country: "CN",
        lat: (26.0, 44.0),
        lon: (102.0, 120.0),
    },
    Region {
        country: "ES",
        lat: (37.5, 43.0),
        lon: (-7.5, -0.5),
    },
    Region {
        country: "DE",
        lat: (48.0, 54.0),
        lon: (7.0, 14.0),
    },
    Region {
        country: "BR",
        lat: (-24.0, -6.0),
        lon: (-52.0, -39.0),
    },
    Region {
        country: "IN",
        lat: (10.0, 27.0),
        lon: (73.0, 84.0),
    },
    Region {
        country: "AU",
        lat: (-35.0, -21.0),
        lon: (116.0, 149.0),
    },
];

pub const MAX_COUNTRIES: usize = REGIONS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_classes: usize,
    /// Number of regions to draw farms from (1..=8); the first two are both "US".
    pub n_countries: usize,
    pub n_farms: usize,
    /// Radius around each image centroid within which its objects are placed.
    pub farm_spread_m: f64,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_images: 500,
            min_objects: 1,
            max_objects: 6,
            n_classes: 1,
            n_countries: 6,
            n_farms: 100,
            farm_spread_m: 500.0,
            image_size: 256,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_images == 0 || self.n_classes == 0 || self.n_farms == 0 {
            return bad("image, class and farm counts must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(1..=MAX_COUNTRIES).contains(&self.n_countries) {
            return bad("n_countries must be between 1 and 8");
        }
        if !(self.farm_spread_m.is_finite() && self.farm_spread_m >= 0.0) {
            return bad("farm_spread_m must be finite and non-negative");
        }
        if (self.image_size as f64) < MAX_SIDE {
            return bad("image_size is smaller than the largest object");
        }
        // even smallest boxes need this much room
        let capacity = (self.image_size as f64 / MIN_SIDE).floor().powi(2) as usize;
        if self.max_objects > capacity {
            return Err(Error::InvalidArgument(format!(
                "cannot pack {} objects into a {}px image",
                self.max_objects, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// One geo point per box, in annotation order.
    pub points: Vec<PointRecord>,
    pub farm_centers: Vec<GeoPoint>,
}

/// Point at `distance_m` along `bearing` from `origin` (local flat approximation).
fn offset(origin: GeoPoint, distance_m: f64, bearing: f64) -> GeoPoint {
    let dlat = distance_m * bearing.cos() / EARTH_RADIUS_M;
    let dlon = distance_m * bearing.sin() / (EARTH_RADIUS_M * origin.lat.to_radians().cos());
    GeoPoint {
        lat: origin.lat + dlat.to_degrees(),
        lon: origin.lon + dlon.to_degrees(),
    }
}

fn random_in_disc(rng: &mut ChaCha8Rng, origin: GeoPoint, radius_m: f64) -> GeoPoint {
    let r = radius_m * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    offset(origin, r, theta)
}

fn place_farms(rng: &mut ChaCha8Rng, p: &SynthParams) -> Result<Vec<(GeoPoint, &'static str)>> {
    let mut farms: Vec<(GeoPoint, &'static str)> = Vec::with_capacity(p.n_farms);
    for i in 0..p.n_farms {
        let region = &REGIONS[i % p.n_countries];
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let c = GeoPoint {
                lat: rng.random_range(region.lat.0..region.lat.1),
                lon: rng.random_range(region.lon.0..region.lon.1),
            };
            if farms
                .iter()
                .all(|(f, _)| haversine(f, &c) >= FARM_SEPARATION_M)
            {
                farms.push((c, region.country));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "could not place {} farms {} km apart",
                p.n_farms,
                FARM_SEPARATION_M / 1000.0
            )));
        }
    }
    Ok(farms)
}

fn pack_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Result<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let x = rng.random_range(0.0..=size - w);
            let y = rng.random_range(0.0..=size - h);
            let b = BBox {
                xmin: x,
                ymin: y,
                xmax: x + w,
                ymax: y + h,
            };
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "infeasible packing: {n} objects in a {size}px image"
            )));
        }
    }
    Ok(boxes)
}

/// Generate a corpus whose images are spread round-robin over `n_farms` farms.
///
/// Farm centers are at least 50 km apart; every object's geo point lies within
/// `farm_spread_m` of its image centroid, which itself lies within
/// `farm_spread_m` of the farm center.
pub fn generate_synthetic(p: &SynthParams) -> Result<SyntheticCorpus> {
    p.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let farms = place_farms(&mut rng, p)?;
    let names: Vec<String> = if p.n_classes == 1 {
        vec!["turbine".into()]
    } else {
        (0..p.n_classes).map(|c| format!("class_{c}")).collect()
    };
    let class_table = ClassTable::from_names(&names)?;

    let size = p.image_size as f64;
    let mut images = Vec::with_capacity(p.n_images);
    let mut points = Vec::new();
    let mut next_ann = 1;
    for i in 0..p.n_images {
        let (center, country) = farms[i % farms.len()];
        let image_id = i as u64 + 1;
        let mut im = ImageRecord::new(image_id, p.image_size, p.image_size);
        im.country = Some(country.to_string());
        let centroid = random_in_disc(&mut rng, center, p.farm_spread_m);
        im.centroid_geo = Some(centroid);
        let n = rng.random_range(p.min_objects..=p.max_objects);
        for b in pack_boxes(&mut rng, n, size)? {
            let class_id = rng.random_range(0..p.n_classes) as u32;
            let geo = random_in_disc(&mut rng, centroid, p.farm_spread_m);
            let mut a = Annotation::with_box(next_ann, class_id, b);
            a.source_geo = Some(geo);
            next_ann += 1;
            points.push(PointRecord {
                location: PointLocation::Geo(geo),
                class_id,
                image_id: Some(image_id),
            });
            im.annotations.push(a);
        }
        images.push(im);
    }
    Ok(SyntheticCorpus {
        dataset: Dataset::new(class_table, images),
        points,
        farm_centers: farms.into_iter().map(|(c, _)| c).collect(),
    })
}
