use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tomovam::io;
use tomovam::metrology;
use tomovam::optics::OpticalConfig;
use tomovam::ostrecon::{self, OstVolume, ProjectionAxis, ProjectionMode, ReconOptions};
use tomovam::printsim::{self, CameraSetup, FrameNoise, GelThreshold, RenderRotations, Schedule, SessionOptions};
use tomovam::projgen::{self, ClipMode, PatternOptions, PatternStack};

#[derive(Parser, Debug)]
#[command(name = "tomovam", version, about = "Tomographic volumetric printing and scattering tomography pipeline")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    /// Accept inputs written under a different optical config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Optical config JSON; flags below override single fields.
    #[arg(long, global = true, value_parser = existing_file)]
    config: Option<PathBuf>,
    /// Start from a built-in resin preset instead of the default.
    #[arg(long, global = true, value_enum)]
    resin: Option<Resin>,
    #[arg(long, global = true)]
    vial_radius: Option<f64>,
    #[arg(long, global = true)]
    n_outside: Option<f64>,
    #[arg(long, global = true)]
    n_blue: Option<f64>,
    #[arg(long, global = true)]
    n_red: Option<f64>,
    #[arg(long, global = true)]
    throw_ratio: Option<f64>,
    #[arg(long, global = true)]
    projector_width_px: Option<f64>,
    #[arg(long, global = true)]
    projector_pixel: Option<f64>,
    #[arg(long, global = true)]
    camera_distance: Option<f64>,
    #[arg(long, global = true)]
    camera_pixel: Option<f64>,
    /// Resin attenuation at the curing wavelength, 1/mm.
    #[arg(long, global = true)]
    mu_a: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Resin {
    Bpagda,
    Dudma,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<OpticalConfig> {
        let mut cfg = match (&self.config, self.resin) {
            (Some(p), _) => io::read_json(p)?,
            (None, Some(Resin::Dudma)) => OpticalConfig::dudma(),
            _ => OpticalConfig::bpagda(),
        };
        let set = |field: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *field = v;
            }
        };
        set(&mut cfg.vial_radius_mm, self.vial_radius);
        set(&mut cfg.n_outside, self.n_outside);
        set(&mut cfg.n_resin_blue, self.n_blue);
        set(&mut cfg.n_resin_red, self.n_red);
        set(&mut cfg.throw_ratio, self.throw_ratio);
        set(&mut cfg.projector_width_px, self.projector_width_px);
        set(&mut cfg.projector_pixel_mm, self.projector_pixel);
        set(&mut cfg.camera_distance_mm, self.camera_distance);
        set(&mut cfg.camera_pixel_mm, self.camera_pixel);
        set(&mut cfg.attenuation_mu_a, self.mu_a);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn existing_file(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn existing_dir(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("no such directory: {s}"))
    }
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Target grid voxels, x y z.
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    spacing: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct PatternArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Background dose level B in (0, 1).
    #[arg(long)]
    background: Option<f64>,
    /// Dose normalization iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    angle_step: Option<f64>,
    #[arg(long, value_enum)]
    clip: Option<Clip>,
    #[arg(long)]
    projector_binning: Option<usize>,
    #[arg(long)]
    no_absorption_correction: bool,
    #[arg(long)]
    no_prestretch: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Clip {
    Literal,
    Zero,
}

impl PatternArgs {
    fn options(&self) -> Result<PatternOptions> {
        let mut o = PatternOptions::default();
        if let Some(d) = &self.grid.dims {
            o.dims = [d[0], d[1], d[2]];
        }
        if let Some(s) = self.grid.spacing {
            o.spacing_mm = s;
        }
        if let Some(b) = self.background {
            o.background = b;
        }
        if let Some(n) = self.iterations {
            o.iterations = n;
        }
        if let Some(a) = self.angle_step {
            o.angle_step_deg = a;
        }
        if let Some(c) = self.clip {
            o.clip = match c {
                Clip::Literal => ClipMode::Literal,
                Clip::Zero => ClipMode::Zero,
            };
        }
        if let Some(b) = self.projector_binning {
            o.projector_binning = b;
        }
        o.absorption_correction &= !self.no_absorption_correction;
        o.vertical_prestretch &= !self.no_prestretch;
        Ok(o)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Sum,
    #[value(alias = "thresholded_sum")]
    ThresholdedSum,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Voxelize a mesh onto the target grid.
    Slice {
        #[arg(long, value_parser = existing_file)]
        stl: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Vertical stretch applied before slicing.
        #[arg(long, default_value_t = 1.0)]
        stretch: f64,
    },
    /// Compute refraction-corrected projection patterns.
    Projections {
        #[arg(long, value_parser = existing_file)]
        stl: PathBuf,
        /// Output directory (16-bit PGM frames plus manifest).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        patterns: PatternArgs,
    },
    /// Simulate printing and camera capture.
    Simulate {
        #[arg(long, value_parser = existing_file)]
        stl: PathBuf,
        /// Reuse patterns written by `projections`.
        #[arg(long, value_parser = existing_dir)]
        patterns_dir: Option<PathBuf>,
        /// Session output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        patterns: PatternArgs,
        #[arg(long)]
        rotations: Option<usize>,
        /// Turn the projector off after this rotation.
        #[arg(long)]
        stop_rotation: Option<usize>,
        /// Keep the projector on for every rotation.
        #[arg(long, conflicts_with = "stop_rotation")]
        no_stop: bool,
        #[arg(long)]
        rotation_speed: Option<f64>,
        #[arg(long)]
        projector_fps: Option<f64>,
        #[arg(long)]
        camera_fps: Option<f64>,
        /// Rotation at which the least exposed part voxel gels.
        #[arg(long, conflicts_with = "d_gel")]
        gel_at_rotation: Option<f64>,
        /// Absolute gelation dose.
        #[arg(long)]
        d_gel: Option<f64>,
        #[arg(long)]
        binning: Option<usize>,
        /// Poisson noise: expected photon count per unit frame value.
        #[arg(long)]
        noise_counts: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rotations to render: `all`, `last`, or a comma-separated list.
        #[arg(long, default_value = "last")]
        render: String,
    },
    /// Reconstruct a scatter volume from camera frames.
    Reconstruct {
        /// Frame directory or a session directory holding `frames/`.
        #[arg(long, value_parser = existing_dir)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rotation to reconstruct; defaults to the latest full turn.
        #[arg(long)]
        rotation: Option<usize>,
        #[arg(long)]
        slice_pixels: Option<usize>,
    },
    /// Derive the gelation intensity I_p from a printed standard cylinder.
    Calibrate {
        #[arg(long, value_parser = existing_dir)]
        session: PathBuf,
        #[arg(long, value_parser = existing_file)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the I_p isosurface of a volume.
    Isosurface {
        #[arg(long, value_parser = existing_file)]
        volume: PathBuf,
        #[arg(long, required_unless_present = "calibration")]
        ip: Option<f64>,
        #[arg(long, value_parser = existing_file, conflicts_with = "ip")]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Signed surface distance report of a mesh against a reference.
    Compare {
        #[arg(long, value_parser = existing_file)]
        test: PathBuf,
        /// Reference mesh, or a session directory to use its truth surface.
        #[arg(long)]
        against: PathBuf,
        /// JSON report path; `<stem>_distances.csv` and `<stem>_histogram.csv` go alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Axis-aligned projection of a volume as a 16-bit PGM.
    ProjectOverhead {
        #[arg(long, value_parser = existing_file)]
        volume: PathBuf,
        #[arg(long, value_enum, default_value = "sum")]
        mode: Mode,
        #[arg(long)]
        ip: Option<f64>,
        #[arg(long, value_enum, default_value = "z")]
        axis: Axis,
        /// Layer range `lo hi` (half-open) along the projection axis.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        range: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw values as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Sidecar for a reconstructed volume: `<volume>.json`.
#[derive(Debug, Serialize, Deserialize)]
struct VolumeMeta {
    rotation: Option<usize>,
    voxel_size_mm: f64,
    ip_threshold: Option<f64>,
    config_hash: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn load_ost(path: &Path, cfg: &OpticalConfig, force: bool) -> Result<OstVolume> {
    let grid = io::read_volume(path)?;
    let meta: Option<VolumeMeta> = sidecar(path).is_file().then(|| io::read_json(&sidecar(path))).transpose()?;
    if let Some(m) = &meta {
        check_hash(&m.config_hash, cfg, force)?;
    }
    Ok(OstVolume {
        voxel_size_mm: meta.as_ref().map_or(grid.spacing_mm[0], |m| m.voxel_size_mm),
        rotation: meta.as_ref().and_then(|m| m.rotation),
        ip_threshold: meta.as_ref().and_then(|m| m.ip_threshold),
        grid,
    })
}

fn check_hash(hash: &str, cfg: &OpticalConfig, force: bool) -> Result<()> {
    if hash != cfg.hash() {
        if !force {
            return Err(tomovam::Error::HashMismatch {
                manifest: hash.to_string(),
                config: cfg.hash(),
            }
            .into());
        }
        log::warn!("config hash mismatch ignored");
    }
    Ok(())
}

fn parse_render(s: &str) -> Result<RenderRotations> {
    Ok(match s {
        "all" => RenderRotations::All,
        "last" => RenderRotations::Last,
        list => RenderRotations::List(
            list.split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("bad --render value {list:?}"))?,
        ),
    })
}

fn load_patterns(dir: &Path, cfg: &OpticalConfig, force: bool) -> Result<PatternStack> {
    let (frames, manifest) = io::read_frames(dir)?;
    manifest.check_config(cfg, force)?;
    let num = |key: &str| {
        manifest
            .extra
            .get(key)
            .and_then(|v| v.as_f64())
            .with_context(|| format!("pattern manifest lacks {key}"))
    };
    Ok(PatternStack {
        frames,
        angle_step_deg: num("angle_step_deg")?,
        vertical_prestretch: num("vertical_prestretch")?,
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.resolve()?;
    let force = cli.force;
    match cli.command {
        Command::Slice { stl, out, grid, stretch } => {
            let mesh = io::read_stl(&stl)?;
            let mut o = PatternOptions::default();
            if let Some(d) = grid.dims {
                o.dims = [d[0], d[1], d[2]];
            }
            if let Some(s) = grid.spacing {
                o.spacing_mm = s;
            }
            let vol = projgen::slice_mesh(&mesh, &o.template(), stretch)?;
            io::write_volume(&out, &vol)?;
            print_json(&serde_json::json!({ "voxels_inside": vol.count_above(0.5) }));
        }
        Command::Projections { stl, out, patterns } => {
            let mesh = io::read_stl(&stl)?;
            let stack = projgen::compute_patterns(&mesh, &cfg, &patterns.options()?)?;
            let mut extra = serde_json::Map::new();
            extra.insert("kind".into(), "patterns".into());
            extra.insert("angle_step_deg".into(), stack.angle_step_deg.into());
            extra.insert("vertical_prestretch".into(), stack.vertical_prestretch.into());
            let m = io::write_frames(&out, &stack.frames, &cfg, extra)?;
            print_json(&serde_json::json!({ "frames": m.count, "rows": m.rows, "cols": m.cols }));
        }
        Command::Simulate {
            stl,
            patterns_dir,
            out,
            patterns,
            rotations,
            stop_rotation,
            no_stop,
            rotation_speed,
            projector_fps,
            camera_fps,
            gel_at_rotation,
            d_gel,
            binning,
            noise_counts,
            seed,
            render,
        } => {
            let mut schedule = Schedule::default();
            if let Some(r) = rotations {
                schedule.rotations = r;
            }
            if stop_rotation.is_some() || no_stop {
                schedule.stop_rotation = stop_rotation;
            }
            if let Some(v) = rotation_speed {
                schedule.rotation_speed_deg_s = v;
            }
            if let Some(v) = projector_fps {
                schedule.projector_fps = v;
            }
            if let Some(v) = camera_fps {
                schedule.camera_fps = v;
            }
            let mut opts = SessionOptions {
                schedule,
                patterns: patterns.options()?,
                render: parse_render(&render)?,
                ..SessionOptions::default()
            };
            if let Some(k) = gel_at_rotation {
                opts.gel_threshold = GelThreshold::AtRotation(k);
            }
            if let Some(d) = d_gel {
                opts.gel_threshold = GelThreshold::Absolute(d);
            }
            opts.camera = CameraSetup {
                binning: binning.unwrap_or(opts.camera.binning),
                noise: noise_counts.map(|c| FrameNoise { counts_per_unit: c, seed }),
            };
            let mesh = io::read_stl(&stl)?;
            let session = match patterns_dir {
                Some(dir) => {
                    let stack = load_patterns(&dir, &cfg, force)?;
                    let part = projgen::slice_mesh(&mesh, &opts.patterns.template(), 1.0)?;
                    printsim::run_session_with_patterns(stack, part, &cfg, &opts)?
                }
                None => printsim::run_session(&mesh, &cfg, &opts)?,
            };
            let rec = io::save_session(&out, &session, &opts)?;
            print_json(&serde_json::json!({
                "d_gel": rec.d_gel,
                "rendered_rotations": rec.rendered_rotations,
                "frames": session.frames.len(),
                "truth_gel_voxels": session.truth_gel(session.final_rotation()).count_above(0.5),
            }));
        }
        Command::Reconstruct { frames, out, rotation, slice_pixels } => {
            let dir = if frames.join(io::MANIFEST_NAME).is_file() {
                frames
            } else {
                frames.join(io::SESSION_FRAMES_DIR)
            };
            let (stack, manifest) = io::read_frames(&dir)?;
            manifest.check_config(&cfg, force)?;
            let turn = match rotation {
                Some(r) => {
                    let lo = 360.0 * (r as f64 - 1.0);
                    stack.window(lo, lo + 360.0)
                }
                None => stack.latest_turn()?,
            };
            if turn.is_empty() {
                bail!("no frames for the requested rotation");
            }
            let rot = rotation.unwrap_or_else(|| (turn.angles_deg[0] / 360.0).floor() as usize + 1);
            let mut vol = ostrecon::reconstruct_with(&turn, &cfg, &ReconOptions { slice_pixels })?;
            vol.rotation = Some(rot);
            io::write_volume(&out, &vol.grid)?;
            io::write_json(
                &sidecar(&out),
                &VolumeMeta {
                    rotation: vol.rotation,
                    voxel_size_mm: vol.voxel_size_mm,
                    ip_threshold: None,
                    config_hash: cfg.hash(),
                },
            )?;
            print_json(&serde_json::json!({ "rotation": rot, "dims": vol.grid.dims(), "voxel_size_mm": vol.voxel_size_mm }));
        }
        Command::Calibrate { session, volume, out } => {
            let rec = io::read_session_record(&session)?;
            check_hash(&rec.config_hash, &cfg, force)?;
            let vol = load_ost(&volume, &cfg, force)?;
            let r = vol.rotation.unwrap_or(rec.schedule.rotations);
            let gel = io::session_truth_gel(&session, &rec, r)?;
            let cal = metrology::calibrate_ip_against(&gel, &vol)?;
            io::write_json(&out, &cal)?;
            print_json(&serde_json::json!({
                "ip_value": cal.ip_value,
                "fit_circle_diameter_mm": cal.fit_circle_diameter_mm,
                "fit_circle_center_mm": cal.fit_circle_center_mm,
            }));
        }
        Command::Isosurface { volume, ip, calibration, out, ascii } => {
            let vol = load_ost(&volume, &cfg, force)?;
            let ip = match (ip, calibration) {
                (Some(v), _) => v,
                (None, Some(p)) => io::read_json::<metrology::IpCalibration>(&p)?.ip_value,
                (None, None) => unreachable!("clap requires one of --ip or --calibration"),
            };
            let mesh = ostrecon::extract_isosurface(&vol, ip);
            if ascii {
                io::write_stl_ascii(&out, &mesh)?;
            } else {
                io::write_stl(&out, &mesh)?;
            }
            print_json(&serde_json::json!({ "triangles": mesh.triangles.len(), "voxels_above": ostrecon::count_above(&vol, ip) }));
        }
        Command::Compare { test, against, out, bins } => {
            let reference = if against.is_dir() {
                against.join(io::SESSION_TRUTH_MESH)
            } else {
                against
            };
            if !reference.is_file() {
                bail!("reference mesh {} not found", reference.display());
            }
            let report = metrology::sdf_compare(&io::read_stl(&test)?, &io::read_stl(&reference)?, bins)?;
            let summary = report.summary();
            io::write_json(&out, &summary)?;
            let stem = out.with_extension("");
            let base = stem.to_string_lossy();
            io::write_atomic(Path::new(&format!("{base}_distances.csv")), report.distances_csv().as_bytes())?;
            io::write_atomic(Path::new(&format!("{base}_histogram.csv")), report.histogram_csv().as_bytes())?;
            print_json(&summary);
        }
        Command::ProjectOverhead { volume, mode, ip, axis, range, out, json } => {
            let vol = load_ost(&volume, &cfg, force)?;
            let mode = match mode {
                Mode::Sum => ProjectionMode::Sum,
                Mode::ThresholdedSum => ProjectionMode::ThresholdedSum,
                Mode::Mean => ProjectionMode::Mean,
            };
            let axis = match axis {
                Axis::X => ProjectionAxis::X,
                Axis::Y => ProjectionAxis::Y,
                Axis::Z => ProjectionAxis::Z,
            };
            let ip = ip.or(vol.ip_threshold);
            let img = ostrecon::overhead_projection(&vol, mode, ip, axis, range.map(|r| (r[0], r[1])))?;
            io::write_pgm16(&out, &io::to_u16_image(&img))?;
            if let Some(p) = json {
                let rows: Vec<Vec<f64>> = img.outer_iter().map(|r| r.to_vec()).collect();
                io::write_json(&p, &rows)?;
            }
            let max = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            print_json(&serde_json::json!({ "rows": img.nrows(), "cols": img.ncols(), "max": max }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
