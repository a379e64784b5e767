use tomovam_demo::{ost_roundtrip, projection_demo, remap_curves};

#[test]
fn remap_curves_agree_with_trace() {
    let rows = remap_curves(false, 1.55, 1.53, 1.8, 150.0, 101).unwrap();
    assert_eq!(rows.len(), 5 * 101);
    for r in rows.chunks(5) {
        assert!((r[1] - r[3]).abs() < 1e-6);
        assert!((r[2] - r[4]).abs() < 1e-6);
    }
    // centre column is fixed
    assert!(rows[5 * 50 + 1].abs() < 1e-12);
}

#[test]
fn projection_demo_reports_separation() {
    let img = projection_demo("boat", 2, 0.5, 64).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert!(img.pixels().iter().all(|v| v.is_finite()));
    assert!(img.note().contains("separation"));
}

#[test]
fn ost_roundtrip_recovers_disk() {
    let img = ost_roundtrip(2.5, 3.0, 1.53, 4.0).unwrap();
    let n = img.width();
    let px = img.pixels();
    let max = px.iter().cloned().fold(f64::MIN, f64::max);
    assert!(max > 0.5);
    // a point near the disk centre (x = 3 mm) is bright, the vial centre is dark
    let centre = n / 2;
    let at = |dx_mm: f64| px[centre * n + (centre as f64 + dx_mm / 0.155).round() as usize];
    assert!(at(3.0) > 0.7, "{}", at(3.0));
    assert!(at(0.0).abs() < 0.2);
}
