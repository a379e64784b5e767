//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p tomovam --test acceptance`; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tomovam::grid::{SliceGrid, VoxelGrid};
use tomovam::io;
use tomovam::mesh::TriMesh;
use tomovam::metrology;
use tomovam::optics::{self, OpticalConfig, Side};
use tomovam::ostrecon::{self, OstVolume};
use tomovam::phantoms;
use tomovam::printsim::{self, CameraSetup, PrintSession, RaySource, RenderRotations, SessionOptions};
use tomovam::projgen::{self, ClipMode, SliceProjection, Stage};
use tomovam::tomo;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    o.detail = format!("{}; {:.2} s", o.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail = format!("{} (limit {} s)", o.detail, limit.as_secs());
        }
    }
    o
}

fn remap_identity() -> Outcome {
    let cfg = OpticalConfig::identity_limit();
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let x = -12.0 + 24.0 * k as f64 / 999.0;
        let theta = (k % 360) as f64;
        for m in [optics::map_projector(x, theta, &cfg), optics::map_camera(x, theta, &cfg)] {
            let m = match m {
                Ok(m) => m,
                Err(e) => return outcome(false, format!("x = {x}: {e}")),
            };
            worst = worst.max(m.delta_deg.abs()).max((m.x_virtual_mm - x).abs());
        }
    }
    outcome(worst <= 1e-9, format!("max |delta|, |x_v - x| = {worst:.2e}"))
}

fn closed_form_vs_trace() -> Outcome {
    let mut worst_off: f64 = 0.0;
    let mut worst_ang: f64 = 0.0;
    for cfg in [OpticalConfig::bpagda(), OpticalConfig::dudma()] {
        let r = cfg.vial_radius_mm;
        for (side, source) in [(Side::Projector, RaySource::Projector), (Side::Camera, RaySource::Camera)] {
            for k in 0..=1000 {
                let x = 0.9 * r * (-1.0 + 2.0 * k as f64 / 1000.0);
                let m = optics::map_detector(x, side, &cfg);
                let c = printsim::trace_ray(x, source, &cfg);
                let (m, c) = match (m, c) {
                    (Ok(m), Ok(c)) => (m, c),
                    _ => return outcome(false, format!("x = {x} failed to map")),
                };
                worst_off = worst_off.max((m.x_virtual_mm - c.offset_mm).abs() / r);
                worst_ang = worst_ang.max((m.delta_deg - c.angle_deg).abs());
            }
        }
    }
    outcome(
        worst_off <= 1e-3 && worst_ang <= 0.05,
        format!("max offset error {:.2e} R_v, max angle error {worst_ang:.2e} deg", worst_off),
    )
}

fn vertical_magnification() -> Outcome {
    let (b, _) = optics::vertical_magnifications(&OpticalConfig::bpagda()).unwrap();
    let (d, _) = optics::vertical_magnifications(&OpticalConfig::dudma()).unwrap();
    outcome(
        (b - 0.963).abs() <= 1e-3 && (d - 0.966).abs() <= 1e-3,
        format!("M_vp BPAGDA {b:.4}, DUDMA {d:.4}"),
    )
}

fn imaging_sampling() -> Outcome {
    let step = optics::edge_sampling_step_mm(&OpticalConfig::bpagda(), 2.0);
    outcome((step - 0.283).abs() <= 1e-3, format!("edge step {step:.4} mm"))
}

fn fbp_round_trip() -> Outcome {
    let grid = SliceGrid::square(128, 0.1);
    let slice = phantoms::disk_slice(&grid, 0.45 * 12.8);
    let pitch = 2.0 * grid.half_diagonal() / 256.0;
    let sino = tomo::radon(slice.view(), grid.spacing_mm, &tomo::uniform_angles(180, 180.0), 256, pitch).unwrap();
    let rec = tomo::fbp(&sino, &grid).unwrap();
    let rel = ((&rec - &slice).mapv(|v| v * v).sum() / slice.mapv(|v| v * v).sum()).sqrt();
    outcome(rel < 0.03, format!("relative L2 {:.2}%", 100.0 * rel))
}

fn separation_stages() -> Outcome {
    let cfg = OpticalConfig::bpagda();
    let grid = SliceGrid::square(128, 0.155);
    let proj = SliceProjection::new(grid, cfg.addressable_radius(Side::Projector), 1.0, ClipMode::Literal);
    let region = Array2::from_shape_fn((128, 128), |(iy, ix)| {
        grid.x(ix).hypot(grid.y(iy)) <= proj.reach_mm
    });
    let slices = [
        ("disk", phantoms::binary_slice(&grid, |x, y| x.hypot(y) <= 4.0)),
        ("boat", phantoms::binary_slice(&grid, |x, y| phantoms::in_boat(x, y, 12.0))),
        ("annulus", phantoms::binary_slice(&grid, |x, y| phantoms::in_annulus(x, y, 2.0, 5.0))),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, binary) in slices {
        let part = binary.mapv(|v| v > 0.5);
        let sep: Vec<f64> = [Stage::Raw, Stage::Background, Stage::Normalized]
            .iter()
            .map(|&s| projgen::separation(&projgen::stage_dose(&binary, 0.5, s, &proj).unwrap(), &part, &region))
            .collect();
        let ok = sep.windows(2).all(|w| w[1] >= w[0]);
        pass &= ok;
        parts.push(format!(
            "{name} {:.3}/{:.3}/{:.3}{}",
            sep[0],
            sep[1],
            sep[2],
            if ok { "" } else { " (decreases)" }
        ));
    }
    outcome(pass, parts.join(", "))
}

struct Printed {
    session: PrintSession,
    recon: OstVolume,
}

fn print_and_reconstruct(mesh: &TriMesh, render: RenderRotations) -> Printed {
    let cfg = OpticalConfig::bpagda();
    let opts = SessionOptions {
        render,
        camera: CameraSetup::default(),
        ..SessionOptions::default()
    };
    let session = printsim::run_session(mesh, &cfg, &opts).expect("session");
    let r = session.final_rotation();
    let mut recon = ostrecon::reconstruct_volume(&session.frames_for_rotation(r), &cfg).expect("recon");
    recon.rotation = Some(r);
    Printed { session, recon }
}

fn round_trip_rmse(p: &Printed, ip: f64) -> (f64, f64) {
    let truth = tomovam::isosurface::extract(&p.session.truth_gel(p.session.final_rotation()), 0.5);
    let test = ostrecon::extract_isosurface(&p.recon, ip);
    let rep = metrology::sdf_compare(&test, &truth, 40).expect("sdf");
    (rep.rmse_mm, rep.rmse_mm / p.recon.voxel_size_mm)
}

/// Fitted diameter of the `> 0.5` mask in the layer of `grid` nearest `z`.
fn mask_diameter(grid: &VoxelGrid, z: f64) -> Option<f64> {
    let k = (0..grid.dims()[2]).min_by(|&a, &b| (grid.z(a) - z).abs().total_cmp(&(grid.z(b) - z).abs()))?;
    metrology::fit_circle(&metrology::mask_boundary(grid, k)).ok().map(|c| 2.0 * c.radius)
}

fn struts() -> Outcome {
    let cfg = OpticalConfig::bpagda();
    let h = 0.155;
    let mut g = VoxelGrid::centered([128, 128, 24], [h; 3]);
    let geom = g.clone();
    for ((k, iy, ix), v) in g.values.indexed_iter_mut() {
        let p = geom.position(ix, iy, k);
        let mut hits = 0;
        for a in 0..4 {
            for b in 0..4 {
                let q = [p[0] + (a as f64 - 1.5) * h / 4.0, p[1], p[2] + (b as f64 - 1.5) * h / 4.0];
                hits += usize::from(phantoms::strut_pair_field(q, 3.0 * h, 1.5 * h, 6.0) > 0.0);
            }
        }
        *v = hits as f32 / 16.0;
    }
    let angles: Vec<f64> = (0..180).map(|j| 2.0 * j as f64).collect();
    let frames = printsim::render_frames(&g, &cfg, &angles, &CameraSetup::default()).unwrap();
    let vol = ostrecon::reconstruct_volume(&frames, &cfg).unwrap();
    let prof = metrology::line_profile(&vol, [-4.0 * h, 0.0, 0.0], [4.0 * h, 0.0, 0.0], 81).unwrap();
    match metrology::two_peak_contrast(&prof) {
        Some(c) => outcome(c >= 0.2, format!("struts 3 voxels apart, contrast {:.0}%", 100.0 * c)),
        None => outcome(false, "no peaks"),
    }
}

fn file_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut volumes = 0;
    let mut meshes = 0;
    for trial in 0..40 {
        let dims = [rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20)];
        let spacing = [0, 1, 2].map(|_| rng.random_range(0.01..2.0));
        let origin = [0, 1, 2].map(|_| rng.random_range(-50.0..50.0));
        let mut g = VoxelGrid::zeros(dims, spacing, origin);
        g.values.mapv_inplace(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
        let path = dir.path().join(format!("v{trial}.vgrd"));
        io::write_volume(&path, &g).unwrap();
        let back = io::read_volume(&path).unwrap();
        let exact = io::encode_volume(&back).unwrap() == std::fs::read(&path).unwrap()
            && g.values.iter().zip(back.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && back.spacing_mm == g.spacing_mm
            && back.origin_mm == g.origin_mm;
        if !exact {
            return outcome(false, format!("volume trial {trial} not bit-exact"));
        }
        volumes += 1;

        let mesh = phantoms::sphere_mesh(rng.random_range(0.5..5.0), rng.random_range(0.2..0.6));
        let mesh = mesh.map_vertices(|p| p.map(|c| c as f32 as f64));
        let mesh = TriMesh::from_soup(&mesh.soup(), io::STL_MERGE_TOL_MM).unwrap();
        for ascii in [false, true] {
            let path = dir.path().join(format!("m{trial}{ascii}.stl"));
            if ascii {
                io::write_stl_ascii(&path, &mesh).unwrap();
            } else {
                io::write_stl(&path, &mesh).unwrap();
            }
            let back = io::read_stl(&path).unwrap();
            if back.soup() != mesh.soup() {
                return outcome(false, format!("mesh trial {trial} (ascii {ascii}) differs"));
            }
        }
        meshes += 1;
    }
    // corrupted inputs must error, never panic
    let clean_vol = io::encode_volume(&VoxelGrid::zeros([3, 4, 5], [1.0; 3], [0.0; 3])).unwrap();
    let clean_stl = io::encode_stl_binary(&phantoms::cylinder_mesh(1.0, 1.0, 8));
    let mut corrupted = 0;
    for _ in 0..2000 {
        for clean in [&clean_vol, &clean_stl] {
            let mut b = clean.clone();
            match rng.random_range(0..3) {
                0 => {
                    let n = rng.random_range(0..b.len());
                    b.truncate(n);
                }
                1 => {
                    let i = rng.random_range(0..b.len());
                    b[i] = rng.random();
                }
                _ => b.extend((0..rng.random_range(1..60)).map(|_| rng.random::<u8>())),
            }
            let r = std::panic::catch_unwind(|| {
                let _ = io::decode_volume(&b);
                let _ = io::parse_stl(&b);
            });
            if r.is_err() {
                return outcome(false, "parser panicked on corrupted input");
            }
            corrupted += 1;
        }
    }
    outcome(
        true,
        format!("{volumes} volumes bit-exact, {meshes} meshes identical (binary and ASCII), {corrupted} corrupted inputs rejected cleanly"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {:<4} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "remap identity limits", timed(Some(Duration::from_secs(1)), remap_identity));
    report(2, "closed form vs ray trace", timed(Some(Duration::from_secs(10)), closed_form_vs_trace));
    report(3, "vertical magnification", timed(None, vertical_magnification));
    report(4, "imaging sampling step", timed(None, imaging_sampling));
    report(5, "FBP round trip", timed(Some(Duration::from_secs(5)), fbp_round_trip));
    report(6, "projection-stage dose separation", timed(None, separation_stages));

    let limit = Some(Duration::from_secs(600));
    let voxel = 0.155;
    let t = Instant::now();
    let cyl = print_and_reconstruct(&phantoms::cylinder_mesh(3.0, 6.0, 128), RenderRotations::All);
    let cyl_time = t.elapsed();
    let cal = metrology::calibrate_ip(&cyl.session, &cyl.recon).expect("calibration");
    let ip = cal.ip_value;

    let mut rows = Vec::new();
    let mut pass7 = true;
    {
        let t = Instant::now();
        let (mm, vox) = round_trip_rmse(&cyl, ip);
        let took = cyl_time + t.elapsed();
        pass7 &= vox <= 1.5 && took <= limit.unwrap();
        rows.push(format!("cylinder {mm:.3} mm = {vox:.2} vox ({:.0} s)", took.as_secs_f64()));
    }
    let lattice = phantoms::Lattice::default().mesh(0.1);
    let bunny = phantoms::bunny_mesh(1.0, 0.1);
    for (name, mesh) in [("lattice", &lattice), ("bunny", &bunny)] {
        let t = Instant::now();
        let p = print_and_reconstruct(mesh, RenderRotations::Last);
        let (mm, vox) = round_trip_rmse(&p, ip);
        let took = t.elapsed();
        pass7 &= vox <= 1.5 && took <= limit.unwrap();
        rows.push(format!("{name} {mm:.3} mm = {vox:.2} vox ({:.0} s)", took.as_secs_f64()));
    }
    report(
        7,
        "end-to-end SDF round trip",
        outcome(pass7, format!("I_p {ip:.4} from the cylinder; {}", rows.join(", "))),
    );

    report(8, "cylinder diameter fidelity", timed(None, || {
        let gel = cyl.session.truth_gel(cyl.session.final_rotation());
        let layers: Vec<usize> = (0..gel.dims()[2]).filter(|&k| gel.slice(k).iter().any(|&v| v > 0.5)).collect();
        let z_mid = 0.5 * (gel.z(layers[0]) + gel.z(*layers.last().unwrap()));
        let mut vol = cyl.recon.clone();
        let mask = ostrecon::threshold_volume(&mut vol, ip).unwrap();
        match (mask_diameter(&mask, z_mid), mask_diameter(&gel, z_mid)) {
            (Some(d), Some(t)) => {
                let err = (d - t).abs();
                outcome(
                    err <= 0.2 && err <= 1.3 * voxel,
                    format!("thresholded {d:.3} mm vs truth {t:.3} mm, error {err:.3} mm = {:.2} vox", err / voxel),
                )
            }
            _ => outcome(false, "no circle fits"),
        }
    }));

    report(9, "three-voxel strut resolution", timed(None, struts));

    report(10, "monotone growth across rotations", timed(None, || {
        let cfg = &cyl.session.cfg;
        let stop = cyl.session.schedule.stop_rotation.unwrap_or(usize::MAX);
        let mut counts = Vec::new();
        let mut gel_counts = Vec::new();
        for r in 1..=cyl.session.final_rotation() {
            let vol = ostrecon::reconstruct_volume(&cyl.session.frames_for_rotation(r), cfg).unwrap();
            counts.push(ostrecon::count_above(&vol, ip));
            gel_counts.push(cyl.session.truth_gel(r).count_above(0.5));
        }
        let n_stop = stop.min(counts.len());
        let growing = counts[..n_stop].windows(2).all(|w| w[1] >= w[0]);
        let frozen = counts[n_stop - 1..].windows(2).all(|w| w[1] == w[0]);
        let gel_ok = gel_counts.windows(2).all(|w| w[1] >= w[0]);
        outcome(
            growing && frozen && gel_ok && counts[n_stop - 1] > 0,
            format!("voxels above I_p per rotation {counts:?}, stop after {stop}"),
        )
    }));

    report(11, "file-format round trips", timed(None, file_round_trips));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
