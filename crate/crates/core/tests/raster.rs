use curvseg::synthgen::{rasterize_polyline, PolylineAnnotation};
use curvseg::Mask;
use proptest::prelude::*;

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Pixel (row, col) is set iff its center is within width/2 of the polyline.
fn brute_force(points: &[(f64, f64)], width: f64, h: usize, w: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let p = (c as f64, r as f64);
            let d = if points.len() == 1 {
                dist_to_segment(p, points[0], points[0])
            } else {
                points.windows(2).map(|s| dist_to_segment(p, s[0], s[1])).fold(f64::INFINITY, f64::min)
            };
            if d <= width / 2.0 {
                m.set(r, c, true);
            }
        }
    }
    m
}

fn annotation(points: &[(f64, f64)], width: f64) -> PolylineAnnotation {
    PolylineAnnotation {
        points: points.to_vec(),
        width,
    }
}

#[test]
fn horizontal_segment_pixel_count() {
    let pts = [(5.0, 10.0), (25.0, 10.0)];
    let m = rasterize_polyline(&annotation(&pts, 3.0), 32, 32).unwrap();
    let expected = 20.0 * 3.0 + std::f64::consts::PI * 1.5 * 1.5;
    let n = m.count() as f64;
    assert!((n - expected).abs() <= 0.1 * expected, "{n} vs {expected}");
    assert_eq!(m, brute_force(&pts, 3.0, 32, 32));
}

#[test]
fn l_shape_is_union_of_its_segments() {
    let pts = [(4.0, 4.0), (20.0, 4.0), (20.0, 18.0)];
    let m = rasterize_polyline(&annotation(&pts, 2.5), 24, 24).unwrap();
    let mut union = rasterize_polyline(&annotation(&pts[..2], 2.5), 24, 24).unwrap();
    union.union_with(&rasterize_polyline(&annotation(&pts[1..], 2.5), 24, 24).unwrap());
    assert_eq!(m, union);
    assert_eq!(m, brute_force(&pts, 2.5, 24, 24));
}

#[test]
fn out_of_range_points_are_clipped() {
    let pts = [(-10.0, -10.0), (40.0, 40.0)];
    let m = rasterize_polyline(&annotation(&pts, 2.0), 16, 16).unwrap();
    assert_eq!(m, brute_force(&pts, 2.0, 16, 16));
    assert!(m.get(0, 0) && m.get(15, 15));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force_oracle(
        points in prop::collection::vec((-4.0f64..36.0, -4.0f64..28.0), 1..=6),
        width in 0.3f64..7.0,
    ) {
        let m = rasterize_polyline(&annotation(&points, width), 24, 32).unwrap();
        prop_assert_eq!(m, brute_force(&points, width, 24, 32));
    }
}
