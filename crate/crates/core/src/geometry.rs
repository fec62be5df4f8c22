//! Pixel-space box operations.

use crate::datamodel::{BBox, OrientedBox, PixelPoint};
use crate::error::{Error, Result};

/// Intersection over union of two valid boxes. Disjoint or edge-touching boxes give exactly 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Minimum axis-aligned rectangle enclosing the four corners.
pub fn mbr(o: &OrientedBox) -> Result<BBox> {
    if o.is_degenerate() {
        return Err(Error::Geometry("oriented box corners are collinear".into()));
    }
    let xs = o.corners.map(|c| c.x);
    let ys = o.corners.map(|c| c.y);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let b = BBox {
        xmin: min(xs),
        ymin: min(ys),
        xmax: max(xs),
        ymax: max(ys),
    };
    if !b.is_valid() {
        return Err(Error::Geometry(format!(
            "enclosing rectangle {b} has no area"
        )));
    }
    Ok(b)
}

pub fn box_center(b: &BBox) -> PixelPoint {
    PixelPoint {
        x: (b.xmin + b.xmax) / 2.0,
        y: (b.ymin + b.ymax) / 2.0,
    }
}

/// Boundary-inclusive containment.
pub fn contains(b: &BBox, p: &PixelPoint) -> bool {
    b.xmin <= p.x && p.x <= b.xmax && b.ymin <= p.y && p.y <= b.ymax
}

pub fn corners(b: &BBox) -> [PixelPoint; 4] {
    [
        PixelPoint {
            x: b.xmin,
            y: b.ymin,
        },
        PixelPoint {
            x: b.xmax,
            y: b.ymin,
        },
        PixelPoint {
            x: b.xmax,
            y: b.ymax,
        },
        PixelPoint {
            x: b.xmin,
            y: b.ymax,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn pt(x: f64, y: f64) -> PixelPoint {
        PixelPoint { x, y }
    }

    /// Counts unit cells covered by integer-coordinate boxes.
    fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0u32, 0u32);
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            for y in a[1].min(b[1])..a[3].max(b[3]) {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 2.0)), 0.0);
        let expected = raster_iou([0, 0, 2, 2], [1, 1, 3, 3]);
        assert_eq!(expected, 1.0 / 7.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - expected).abs() < 1e-15);
    }

    #[test]
    fn mbr_axis_aligned_is_identity() {
        let o = OrientedBox::from_flat([1.0, 2.0, 5.0, 2.0, 5.0, 7.0, 1.0, 7.0]).unwrap();
        assert_eq!(mbr(&o).unwrap(), bx(1.0, 2.0, 5.0, 7.0));
    }

    #[test]
    fn mbr_rotated_unit_square() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (cx, cy) = (0.5, 0.5);
        // corners of the unit square rotated 45 degrees about its center
        let rot = |x: f64, y: f64| {
            let (dx, dy) = (x - cx, y - cy);
            let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
            pt(cx + dx * c - dy * s, cy + dx * s + dy * c)
        };
        let o =
            OrientedBox::new([rot(0.0, 0.0), rot(1.0, 0.0), rot(1.0, 1.0), rot(0.0, 1.0)]).unwrap();
        let b = mbr(&o).unwrap();
        for (got, want) in [
            (b.xmin, 0.5 - h),
            (b.ymin, 0.5 - h),
            (b.xmax, 0.5 + h),
            (b.ymax, 0.5 + h),
        ] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mbr_collinear_fails() {
        let o = OrientedBox {
            corners: [pt(0.0, 0.0), pt(1.0, 1.0), pt(2.0, 2.0), pt(3.0, 3.0)],
        };
        assert!(matches!(mbr(&o), Err(Error::Geometry(_))));
        assert!(OrientedBox::from_flat([0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn center_examples() {
        assert_eq!(box_center(&bx(0.0, 0.0, 10.0, 20.0)), pt(5.0, 10.0));
        assert_eq!(box_center(&bx(-2.0, -2.0, 2.0, 2.0)), pt(0.0, 0.0));
        assert_eq!(box_center(&bx(1.0, 1.0, 2.0, 4.0)), pt(1.5, 2.5));
    }

    #[test]
    fn containment_is_inclusive() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(contains(&b, &pt(5.0, 5.0)));
        assert!(contains(&b, &pt(10.0, 10.0)));
        assert!(contains(&b, &pt(0.0, 10.0)));
        assert!(!contains(&b, &pt(11.0, 5.0)));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (
            -500.0..500.0f64,
            -500.0..500.0f64,
            0.1..300.0f64,
            0.1..300.0f64,
        )
            .prop_map(|(x, y, w, h)| BBox {
                xmin: x,
                ymin: y,
                xmax: x + w,
                ymax: y + h,
            })
    }

    fn arb_int_box() -> impl Strategy<Value = [i32; 4]> {
        (0..100i32, 0..100i32, 1..=100i32, 1..=100i32).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_matches_raster(a in arb_int_box(), b in arb_int_box()) {
            let fa = BBox { xmin: a[0] as f64, ymin: a[1] as f64, xmax: a[2] as f64, ymax: a[3] as f64 };
            let fb = BBox { xmin: b[0] as f64, ymin: b[1] as f64, xmax: b[2] as f64, ymax: b[3] as f64 };
            prop_assert!((iou(&fa, &fb) - raster_iou(a, b)).abs() <= 0.02);
        }

        #[test]
        fn mbr_contains_corners_and_is_idempotent(
            cx in -100.0..100.0f64, cy in -100.0..100.0f64,
            w in 1.0..50.0f64, h in 1.0..50.0f64, theta in 0.0..std::f64::consts::PI,
        ) {
            let (s, c) = theta.sin_cos();
            let corner = |dx: f64, dy: f64| pt(cx + dx * c - dy * s, cy + dx * s + dy * c);
            let o = OrientedBox::new([
                corner(-w / 2.0, -h / 2.0), corner(w / 2.0, -h / 2.0),
                corner(w / 2.0, h / 2.0), corner(-w / 2.0, h / 2.0),
            ]).unwrap();
            let b = mbr(&o).unwrap();
            for k in o.corners {
                prop_assert!(contains(&b, &k));
            }
            let again = mbr(&OrientedBox::new(corners(&b)).unwrap()).unwrap();
            prop_assert_eq!(again, b);
        }
    }
}
