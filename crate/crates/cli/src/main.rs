//! `jpdsr`: simulate photon-pair frame stacks, reconstruct super-resolved
//! images and phase maps, compute spectra.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 pipeline error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jpdsr::analysis::{detect_peaks, spectrum, write_spectrum_csv, Axis, Window};
use jpdsr::config::SceneConfig;
use jpdsr::holography::{reconstruct_phase_four_step, PhaseSeries, Protocol};
use jpdsr::optics::Simulation;
use jpdsr::superres::{resolve_unmeasured, super_resolve_series, SuperResConfig, SuperResReport};
use jpdsr::{
    accumulate_jpd, DiagonalKind, Dtype, Error, EstimatorConfig, FrameStack, Geometry, Image, Jpd,
    Mode, Unmeasurable,
};

#[derive(Parser)]
#[command(
    name = "jpdsr",
    version,
    about = "Pixel super-resolution from photon-pair correlations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a frame stack from a scene description.
    Simulate {
        /// TOML scene file.
        #[arg(
            long,
            required_unless_present = "manifest",
            conflicts_with = "manifest"
        )]
        config: Option<PathBuf>,
        /// Re-run from a manifest written by an earlier simulation.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed; frame `i` uses `seed XOR i`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the SLM phase (radians), e.g. to step a holography series.
        #[arg(long, allow_hyphen_values = true)]
        slm_phase_rad: Option<f64>,
    },
    /// Estimate the JPD and write intensity, correlation and super-resolved images.
    Reconstruct {
        /// Frame stacks; four for holography, in the protocol's shift order.
        #[arg(long, required = true, num_args = 1..)]
        frames: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Near)]
        mode: ModeArg,
        #[arg(long, default_value_t = 3)]
        band: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = ProtocolArg::None)]
        protocol: ProtocolArg,
        /// Entries the detector cannot measure; `auto` picks from the stack type.
        #[arg(long, value_enum, default_value_t = UnmeasurableArg::Auto)]
        unmeasurable: UnmeasurableArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Spectrum along y averaged over x, with detected peaks.
    Spectrum {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = WindowArg::None)]
        window: WindowArg,
        #[arg(long, default_value_t = 0.01)]
        min_prominence: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Near,
    Far,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ProtocolArg {
    None,
    Entangled,
    Noon,
    Classical,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnmeasurableArg {
    Auto,
    None,
    Diagonal,
    SameColumn,
    Neighbours,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    None,
    Hann,
}

/// Failure with the stage it came from.
struct Failure {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for jpdsr::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Protocol(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            manifest,
            out,
            seed,
            slm_phase_rad,
        } => simulate(
            config.as_deref(),
            manifest.as_deref(),
            &out,
            seed,
            slm_phase_rad,
        ),
        Command::Reconstruct {
            frames,
            mode,
            band,
            threshold,
            protocol,
            unmeasurable,
            out_dir,
        } => reconstruct(
            &frames,
            mode,
            band,
            threshold,
            protocol,
            unmeasurable,
            &out_dir,
        ),
        Command::Spectrum {
            image,
            out,
            window,
            min_prominence,
        } => spectrum_cmd(&image, &out, window, min_prominence),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.error);
            ExitCode::from(exit_code(&f.error))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    slm_phase_rad: Option<f64>,
    config_sha256: String,
    frames_sha256: String,
    width: usize,
    height: usize,
    count: usize,
    /// The scene file verbatim, so the run can be repeated without it.
    config_toml: String,
    /// Directory relative object files were resolved against.
    config_dir: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure {
        stage: "io",
        error: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn simulate(
    config: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    slm_phase_rad: Option<f64>,
) -> Result<(), Failure> {
    let (text, dir, manifest_seed, manifest_slm) = match (config, manifest) {
        (Some(c), _) => (
            fs::read_to_string(c).map_err(io(c))?,
            c.parent().map(Path::to_path_buf).unwrap_or_default(),
            None,
            None,
        ),
        (None, Some(m)) => {
            let raw = fs::read_to_string(m).map_err(io(m))?;
            let man: Manifest = serde_json::from_str(&raw).map_err(|e| Failure {
                stage: "manifest",
                error: Error::Format(format!("{}: {e}", m.display())),
            })?;
            (
                man.config_toml,
                man.config_dir,
                Some(man.seed),
                man.slm_phase_rad,
            )
        }
        (None, None) => unreachable!("clap requires one of --config / --manifest"),
    };
    let mut cfg = SceneConfig::from_toml(&text).stage("config")?;
    if let jpdsr::config::ObjectConfig::Pgm { path, .. } = &mut cfg.object {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
    let seed = seed.or(manifest_seed).or(cfg.seed).unwrap_or(0);
    let slm_phase_rad = slm_phase_rad.or(manifest_slm);
    if let Some(phase) = slm_phase_rad {
        cfg.slm.phase_rad = Some(phase);
    }
    let sim = cfg.build().stage("config")?;
    let stack = Simulation::new(
        &sim.scene,
        sim.camera,
        sim.pairs_per_frame,
        sim.frames,
        seed,
    )
    .and_then(|s| s.to_stack())
    .stage("simulate")?;
    let mut bytes = Vec::new();
    stack.write_to(&mut bytes).map_err(io(out))?;
    fs::write(out, &bytes).map_err(io(out))?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        slm_phase_rad,
        config_sha256: sha256_hex(text.as_bytes()),
        frames_sha256: sha256_hex(&bytes),
        width: stack.width(),
        height: stack.height(),
        count: stack.count(),
        config_toml: text,
        config_dir: dir,
    };
    let mpath = manifest_path(out);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io(&mpath))?;
    println!(
        "wrote {} ({} frames of {}x{}), seed {seed}",
        out.display(),
        stack.count(),
        stack.width(),
        stack.height()
    );
    Ok(())
}

#[derive(Serialize)]
struct Report {
    inputs: Vec<String>,
    protocol: &'static str,
    unmeasurable: Unmeasurable,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    superres: Option<SuperResReport>,
    outputs: Vec<String>,
}

fn save_image(
    dir: &Path,
    stem: &str,
    image: &Image,
    outputs: &mut Vec<String>,
) -> Result<(), Failure> {
    image
        .save_raw(dir.join(format!("{stem}.f64")))
        .stage("io")?;
    image
        .save_pgm(dir.join(format!("{stem}.pgm")))
        .stage("io")?;
    outputs.push(format!("{stem}.f64"));
    outputs.push(format!("{stem}.pgm"));
    Ok(())
}

fn reconstruct(
    frames: &[PathBuf],
    mode: ModeArg,
    band: usize,
    threshold: f64,
    protocol: ProtocolArg,
    unmeasurable: UnmeasurableArg,
    out_dir: &Path,
) -> Result<(), Failure> {
    let mode = match mode {
        ModeArg::Near => Mode::NearField,
        ModeArg::Far => Mode::FarField,
    };
    let protocol = match protocol {
        ProtocolArg::None => None,
        ProtocolArg::Entangled => Some(Protocol::EntangledFarField),
        ProtocolArg::Noon => Some(Protocol::Noon),
        ProtocolArg::Classical => Some(Protocol::Classical),
    };
    let config_err = |msg: String| Failure {
        stage: "arguments",
        error: Error::Config(msg),
    };
    match protocol {
        None if frames.len() != 1 => {
            return Err(config_err(format!(
                "expected 1 frame stack, got {}",
                frames.len()
            )))
        }
        Some(p) if frames.len() != 4 => {
            return Err(config_err(format!(
                "{p:?} holography needs 4 frame stacks, got {}",
                frames.len()
            )))
        }
        Some(Protocol::EntangledFarField) if mode != Mode::FarField => {
            return Err(config_err("entangled holography uses --mode far".into()))
        }
        Some(Protocol::Noon) if mode != Mode::NearField => {
            return Err(config_err("N00N holography uses --mode near".into()))
        }
        _ => {}
    }
    let mut timings: Vec<(String, f64)> = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };
    let stacks: Vec<FrameStack> = frames
        .iter()
        .map(FrameStack::load)
        .collect::<jpdsr::Result<_>>()
        .stage("load")?;
    lap("load", &mut timings);
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let first = &stacks[0];
    let unmeasurable = match unmeasurable {
        UnmeasurableArg::Auto => auto_unmeasurable(&frames[0], first),
        UnmeasurableArg::None => Unmeasurable::None,
        UnmeasurableArg::Diagonal => Unmeasurable::Diagonal,
        UnmeasurableArg::SameColumn => Unmeasurable::SameColumn,
        UnmeasurableArg::Neighbours => Unmeasurable::Neighbours,
    };
    let estimator = match mode {
        Mode::NearField => EstimatorConfig::near(band),
        Mode::FarField => {
            EstimatorConfig::far(band, Geometry::mirror_center(first.width(), first.height()))
        }
    }
    .with_unmeasurable(unmeasurable);
    let mut outputs = Vec::new();
    save_image(out_dir, "intensity", &first.mean_image(), &mut outputs)?;

    let superres = if protocol == Some(Protocol::Classical) {
        // classical holography works on intensities alone
        let means = stacks.iter().map(FrameStack::mean_image).collect();
        let series = PhaseSeries::for_protocol(Protocol::Classical, means).stage("holography")?;
        let phase =
            reconstruct_phase_four_step(&series, Protocol::Classical).stage("holography")?;
        save_image(out_dir, "phase", &phase, &mut outputs)?;
        lap("holography", &mut timings);
        None
    } else {
        let jpds: Vec<Jpd> = stacks
            .iter()
            .map(|s| accumulate_jpd(s, &estimator))
            .collect::<jpdsr::Result<_>>()
            .stage("accumulate")?;
        lap("accumulate", &mut timings);
        let kind = match mode {
            Mode::NearField => DiagonalKind::Diagonal,
            Mode::FarField => DiagonalKind::AntiDiagonal,
        };
        let diagonal = resolve_unmeasured(&jpds[0], unmeasurable)
            .and_then(|j| j.extract_diagonal_image(kind))
            .stage("diagonal")?;
        let stem = if mode == Mode::NearField {
            "diagonal"
        } else {
            "anti_diagonal"
        };
        save_image(out_dir, stem, &diagonal, &mut outputs)?;
        let cfg = SuperResConfig::new(estimator, threshold);
        let (images, report) = super_resolve_series(&jpds, &cfg).stage("superres")?;
        lap("superres", &mut timings);
        for (k, img) in images.iter().enumerate() {
            let stem = if images.len() == 1 {
                "superres".to_string()
            } else {
                format!("superres_{k}")
            };
            save_image(out_dir, &stem, img, &mut outputs)?;
        }
        if let Some(p) = protocol {
            let series = PhaseSeries::for_protocol(p, images).stage("holography")?;
            let phase = reconstruct_phase_four_step(&series, p).stage("holography")?;
            save_image(out_dir, "phase", &phase, &mut outputs)?;
            lap("holography", &mut timings);
        }
        Some(report)
    };
    let report = Report {
        inputs: frames.iter().map(|p| p.display().to_string()).collect(),
        protocol: match protocol {
            None => "none",
            Some(Protocol::EntangledFarField) => "entangled",
            Some(Protocol::Noon) => "noon",
            Some(Protocol::Classical) => "classical",
        },
        unmeasurable,
        superres,
        outputs,
    };
    let rpath = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&rpath, json + "\n").map_err(io(&rpath))?;
    // wall-clock times vary run to run, so they stay out of the report
    let tpath = out_dir.join("timing.json");
    let t: serde_json::Map<String, serde_json::Value> = timings
        .into_iter()
        .map(|(k, v)| (format!("{k}_ms"), v.into()))
        .collect();
    fs::write(
        &tpath,
        serde_json::to_string_pretty(&t).expect("timing serializes") + "\n",
    )
    .map_err(io(&tpath))?;
    match &report.superres {
        Some(r) => println!(
            "surviving planes: {} of {}; outputs in {}",
            r.surviving_planes.len(),
            r.plane_masses.len(),
            out_dir.display()
        ),
        None => println!("outputs in {}", out_dir.display()),
    }
    Ok(())
}

/// Camera model from the manifest beside the stack, else a guess from the
/// sample type.
fn auto_unmeasurable(path: &Path, stack: &FrameStack) -> Unmeasurable {
    let from_manifest = fs::read_to_string(manifest_path(path))
        .ok()
        .and_then(|raw| serde_json::from_str::<Manifest>(&raw).ok())
        .and_then(|m| SceneConfig::from_toml(&m.config_toml).ok())
        .map(|cfg| cfg.camera.model().unmeasurable());
    from_manifest.unwrap_or(match stack.dtype() {
        Dtype::Binary => Unmeasurable::Neighbours,
        _ => Unmeasurable::Diagonal,
    })
}

fn spectrum_cmd(
    image: &Path,
    out: &Path,
    window: WindowArg,
    min_prominence: f64,
) -> Result<(), Failure> {
    let img = Image::load(image).stage("load")?;
    let window = match window {
        WindowArg::None => Window::None,
        WindowArg::Hann => Window::Hann,
    };
    let s = spectrum(&img, Axis::Y, window).stage("spectrum")?;
    let mut buf = Vec::new();
    write_spectrum_csv(&s, &mut buf).map_err(io(out))?;
    fs::write(out, buf).map_err(io(out))?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let peaks = detect_peaks(&s, min_prominence);
    let _ = writeln!(w, "{} peaks (cycles/pixel, amplitude):", peaks.len());
    for p in peaks {
        let _ = writeln!(w, "{:.4} {:.6}", p.frequency, p.amplitude);
    }
    Ok(())
}
