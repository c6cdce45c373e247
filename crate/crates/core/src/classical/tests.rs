use super::*;
use crate::dataio::{generate_synthetic, render_tip, SynthSpec, TipGeometry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn render(g: &TipGeometry, w: usize, h: usize) -> GrayImage {
    render_tip(g, w, h, 200, 30, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
}

fn disk(size: usize, cx: f64, cy: f64, r: f64) -> Mask {
    let data = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        })
        .collect();
    Mask::new(size, size, data).unwrap()
}

#[test]
fn otsu_splits_bimodal_exactly() {
    let pixels: Vec<u8> = (0..64).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
    let img = GrayImage::new(8, 8, pixels.clone()).unwrap();
    let t = otsu_threshold(&img).unwrap();
    assert!(t > 0);
    for &p in &pixels {
        assert_eq!(p >= t, p == 255);
    }
}

#[test]
fn uniform_image_rejected() {
    let img = GrayImage::filled(16, 16, 90);
    assert!(matches!(segment(&img, Threshold::Auto), Err(SimicError::Measurement(_))));
}

#[test]
fn noiseless_tip_mask_matches_rasterization() {
    for g in [
        TipGeometry { width: 40.0, height: 50.0, radius: 8.0 },
        TipGeometry { width: 22.3, height: 41.7, radius: 3.1 },
        TipGeometry { width: 37.9, height: 26.2, radius: 7.6 },
    ] {
        let mask = segment(&render(&g, 64, 64), Threshold::Auto).unwrap();
        let expected = g.rasterize(64, 64);
        assert_eq!(mask.data, expected, "{g:?}");
    }
}

#[test]
fn opening_drops_speckle() {
    let g = TipGeometry { width: 30.0, height: 40.0, radius: 5.0 };
    let mut img = render(&g, 64, 64);
    img.set(2, 2, 200);
    img.set(60, 3, 200);
    img.set(61, 3, 200);
    let mask = segment(&img, Threshold::Auto).unwrap();
    assert_eq!(mask.data, g.rasterize(64, 64));
}

#[test]
fn square_contour_has_eight_points() {
    let mut data = vec![false; 25];
    for y in 1..4 {
        for x in 1..4 {
            data[y * 5 + x] = true;
        }
    }
    let mask = Mask::new(5, 5, data).unwrap();
    let c = trace_contour(&mask).unwrap();
    assert_eq!(c.len(), 8);
    let pts: Vec<(f64, f64)> = c.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    assert_eq!(signed_area(&pts), 4.0);
}

#[test]
fn degenerate_contours() {
    let mut data = vec![false; 9];
    data[4] = true;
    assert_eq!(trace_contour(&Mask::new(3, 3, data).unwrap()).unwrap(), vec![(1, 1)]);
    assert!(trace_contour(&Mask::new(3, 3, vec![false; 9]).unwrap()).is_err());
    let line = Mask::new(4, 1, vec![true; 4]).unwrap();
    assert_eq!(trace_contour(&line).unwrap(), vec![(0, 0), (1, 0), (2, 0), (3, 0), (2, 0), (1, 0)]);
}

#[test]
fn tip_contour_encloses_mask_area() {
    let spec = SynthSpec::default().noiseless();
    for s in generate_synthetic(&spec, 10).unwrap() {
        let mask = segment(&s.image, Threshold::Auto).unwrap();
        let c = trace_contour(&mask).unwrap();
        let pts: Vec<(f64, f64)> = c.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let area = signed_area(&pts);
        assert!(area > 0.0);
        let count = mask.count() as f64;
        assert!(count - area >= 0.0 && count - area <= c.len() as f64, "{count} vs {area}");
        for &(x, y) in &c {
            let (x, y) = (x as isize, y as isize);
            assert!(mask.get(x, y));
            assert!(NEIGHBOURS.iter().any(|(dx, dy)| !mask.get(x + dx, y + dy)));
        }
    }
}

#[test]
fn reference_tip_within_tolerance() {
    let g = TipGeometry { width: 40.0, height: 50.0, radius: 8.0 };
    let m = measure_image(&render(&g, 64, 64), Threshold::Auto).unwrap();
    assert!((m.width_px - 40.0).abs() <= 2.0, "{}", m.width_px);
    assert!((m.height_px - 50.0).abs() <= 2.0, "{}", m.height_px);
    assert!((m.radius_px - 8.0).abs() <= 0.15 * 8.0, "{}", m.radius_px);
    assert!(m.radius_px < m.width_px);
}

#[test]
fn rendered_disks_fit_within_half_pixel() {
    for (i, r) in [3.0, 4.5, 6.2, 8.0, 11.7, 15.0, 20.3].into_iter().enumerate() {
        let c = 32.0 + 0.13 * i as f64;
        let mask = disk(64, c, c - 0.31, r);
        let contour = trace_contour(&mask).unwrap();
        let fit = fit_circle(&boundary_points(&mask, &contour)).unwrap();
        assert!((fit.r - r).abs() <= 0.5, "r={r} fit={}", fit.r);
        assert!((fit.cx - c).abs() <= 0.5 && (fit.cy - (c - 0.31)).abs() <= 0.5);
    }
}

#[test]
fn circle_fit_is_translation_invariant() {
    let mask = disk(40, 17.3, 19.8, 9.4);
    let contour = trace_contour(&mask).unwrap();
    let pts = boundary_points(&mask, &contour);
    let a = fit_circle(&pts).unwrap();
    for (dx, dy) in [(5.0, 0.0), (-3.0, 11.0), (100.0, -250.0)] {
        let moved: Vec<(f64, f64)> = pts.iter().map(|p| (p.0 + dx, p.1 + dy)).collect();
        let b = fit_circle(&moved).unwrap();
        assert!((b.r - a.r).abs() < 1e-9);
        assert!((b.cx - a.cx - dx).abs() < 1e-9 && (b.cy - a.cy - dy).abs() < 1e-9);
    }
}

#[test]
fn flat_top_is_rejected() {
    // Trapezoid: 40 px base narrowing to a 20 px flat top.
    let (w, h) = (64usize, 64usize);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5 - 32.0, (h - i / w) as f64 - 0.5);
            y <= 50.0 && x.abs() <= 20.0 - 10.0 * y / 50.0
        })
        .collect();
    let mask = Mask::new(w, h, data).unwrap();
    let contour = trace_contour(&mask).unwrap();
    assert!(matches!(measure_tip(&mask, &contour), Err(SimicError::Measurement(_))));
}

#[test]
fn measurements_scale_with_resolution() {
    let g = TipGeometry { width: 30.0, height: 36.0, radius: 6.0 };
    let g2 = TipGeometry { width: 60.0, height: 72.0, radius: 12.0 };
    let a = measure_image(&render(&g, 64, 64), Threshold::Auto).unwrap();
    let b = measure_image(&render(&g2, 128, 128), Threshold::Auto).unwrap();
    assert!((b.width_px - 2.0 * a.width_px).abs() <= 2.0);
    assert!((b.height_px - 2.0 * a.height_px).abs() <= 2.0);
    assert!((b.radius_px - 2.0 * a.radius_px).abs() <= 2.0);
}

#[test]
fn baseline_csv_layout() {
    let rows = vec![
        BaselineRow { id: "a".into(), measurement: Ok([40.0, 50.0, 8.0]), scale_nm_per_px: 10.0 },
        BaselineRow { id: "b".into(), measurement: Err("no arc".into()), scale_nm_per_px: 10.0 },
    ];
    let csv = baseline_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "a,40.0,50.0,8.0,0.4,0.5,0.08");
    assert_eq!(lines[2], "b,,,,,,");
}
