use tomovam::io;
use tomovam::metrology;
use tomovam::optics::OpticalConfig;
use tomovam::ostrecon;
use tomovam::phantoms;
use tomovam::printsim::{self, GelThreshold, RenderRotations, Schedule, SessionOptions};
use tomovam::projgen::PatternOptions;

fn coarse_options() -> SessionOptions {
    SessionOptions {
        schedule: Schedule {
            rotations: 4,
            stop_rotation: Some(3),
            ..Schedule::default()
        },
        patterns: PatternOptions {
            dims: [64, 64, 24],
            spacing_mm: 0.31,
            angle_step_deg: 2.0,
            ..PatternOptions::default()
        },
        gel_threshold: GelThreshold::AtRotation(3.0),
        render: RenderRotations::All,
        ..SessionOptions::default()
    }
}

#[test]
fn coarse_cylinder_print_and_readback() {
    let cfg = OpticalConfig::bpagda();
    let mesh = phantoms::cylinder_mesh(3.0, 3.0, 96);
    let opts = coarse_options();
    let session = printsim::run_session(&mesh, &cfg, &opts).unwrap();

    // every part voxel gels exactly when the projector stops
    let gel3 = session.truth_gel(3);
    let missing = session
        .part
        .values
        .iter()
        .zip(gel3.values.iter())
        .filter(|(p, g)| **p > 0.5 && **g < 0.5)
        .count();
    assert_eq!(missing, 0);
    assert_eq!(session.truth_gel(4), gel3);
    assert_eq!(session.truth_gel(1).count_above(0.5), 0);

    // total frame brightness never falls
    let brightness: Vec<f64> = (1..=4)
        .map(|r| {
            session
                .frames_for_rotation(r)
                .frames
                .iter()
                .map(|f| f.iter().map(|&v| v as f64).sum::<f64>())
                .sum()
        })
        .collect();
    assert!(brightness.windows(2).all(|w| w[1] >= w[0]), "{brightness:?}");

    let mut recon = ostrecon::reconstruct_volume(&session.frames_for_rotation(4), &cfg).unwrap();
    recon.rotation = Some(4);
    let cal = metrology::calibrate_ip(&session, &recon).unwrap();
    assert!(cal.ip_value > 0.0);
    let truth_d = cal.fit_circle_diameter_mm;
    assert!((truth_d - 6.0).abs() < 1.5, "{truth_d}");

    // saved session reproduces the same truth gel
    let dir = tempfile::tempdir().unwrap();
    let rec = io::save_session(dir.path(), &session, &opts).unwrap();
    let back = io::read_session_record(dir.path()).unwrap();
    assert_eq!(back, rec);
    for r in [2, 3, 4] {
        assert_eq!(io::session_truth_gel(dir.path(), &back, r).unwrap(), session.truth_gel(r));
    }
    let (frames, manifest) = io::read_frames(&dir.path().join(io::SESSION_FRAMES_DIR)).unwrap();
    assert_eq!(manifest.count, session.frames.len());
    manifest.check_config(&cfg, false).unwrap();
    let vol2 = ostrecon::reconstruct_volume(&frames.window(1080.0, 1440.0), &cfg).unwrap();
    let diff = (&vol2.grid.values - &recon.grid.values).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
    let peak = recon.grid.max_value();
    assert!(diff <= 1e-3 * peak, "16-bit frames shift the reconstruction by {diff} of {peak}");
}

#[test]
fn reconstruction_rejects_partial_turns() {
    let cfg = OpticalConfig::bpagda();
    let mut opts = coarse_options();
    opts.render = RenderRotations::Last;
    let session = printsim::run_session(&phantoms::cylinder_mesh(2.0, 2.0, 48), &cfg, &opts).unwrap();
    let half = session.frames.window(1080.0, 1260.0);
    assert!(ostrecon::reconstruct_volume(&half, &cfg).is_err());
}
