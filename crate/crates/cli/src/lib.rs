//! The `vgs` command line: render, fit, sample, gradcheck, metrics and
//! epipolar subcommands over the formats of `vgs_core::io`.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation or a check fails,
//! 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vgs_core::geometry::{epipolar_segment, EpipolarSegment, DEFAULT_EPIPOLAR_SAMPLES};
use vgs_core::grad::{gradcheck, gradcheck_scene, GradcheckConfig};
use vgs_core::io::{
    load_cameras, load_scene, read_image, read_json, save_scene, write_atomic, write_image, write_json, ImageKind,
    SceneFile,
};
use vgs_core::optim::{fit_scene, psnr, ssim, FitConfig, View};
use vgs_core::raster::RenderOptions;
use vgs_core::variational::{background_fill, render_uncertainty, Noise};
use vgs_core::{rasterize, Camera};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "vgs", version, about = "Variational Gaussian splatting toolkit")]
pub struct Cli {
    /// Run every stage on the calling thread's schedule (bit-reproducible).
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Rgb,
    Features,
    Uncertainty,
    Alpha,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Png8,
    FloatRaw,
}

impl From<Format> for ImageKind {
    fn from(f: Format) -> Self {
        match f {
            Format::Png8 => ImageKind::Png8,
            Format::FloatRaw => ImageKind::FloatRaw,
        }
    }
}

fn parse_pixel(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("bad X: {e}"))?;
    let y: f64 = y.trim().parse().map_err(|e| format!("bad Y: {e}"))?;
    Ok([x, y])
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render one view of a scene.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Camera id.
        #[arg(long)]
        view: u32,
        #[arg(long, value_enum, default_value = "rgb")]
        mode: RenderMode,
        /// Seeds the feature sample and the background fill.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output extension (.png or .vgim).
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Fit a scene to calibrated images.
    Fit {
        #[arg(long)]
        cameras: PathBuf,
        /// Holds `<id>.png` or `<id>.vgim` for every camera id.
        #[arg(long)]
        images: PathBuf,
        /// JSON fit settings; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Camera id excluded from training and used for PSNR logging.
        #[arg(long)]
        holdout: Option<u32>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw a semantic instance from a variational scene.
    Sample {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a random scene.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        gaussians: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
    },
    /// PSNR and SSIM for every reference image with a same-named prediction.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epipolar segments of a pixel of one camera in the others.
    Epipolar {
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, value_parser = parse_pixel, allow_hyphen_values = true)]
        pixel: [f64; 2],
        #[arg(long)]
        out: PathBuf,
        /// Source camera id; defaults to the first camera.
        #[arg(long)]
        from: Option<u32>,
        /// Target camera id; defaults to every other camera.
        #[arg(long)]
        to: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_EPIPOLAR_SAMPLES)]
        samples: usize,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn find_camera<'a>(cams: &'a [(u32, Camera)], id: u32) -> Result<&'a Camera> {
    cams.iter()
        .find(|(i, _)| *i == id)
        .map(|(_, c)| c)
        .ok_or_else(|| anyhow!("no camera with id {id}"))
}

fn output_kind(path: &Path, format: Option<Format>) -> Result<ImageKind> {
    match format {
        Some(f) => Ok(f.into()),
        None => ImageKind::from_path(path)
            .ok_or_else(|| anyhow!("cannot infer image format of {}; pass --format", path.display())),
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let parallel = !cli.serial;
    match &cli.command {
        Command::Render {
            scene,
            cameras,
            view,
            mode,
            seed,
            out,
            format,
        } => {
            let kind = output_kind(out, *format)?;
            let scene = load_scene(scene).with_context(|| format!("loading {}", scene.display()))?;
            let cams = load_cameras(cameras).with_context(|| format!("loading {}", cameras.display()))?;
            let cam = find_camera(&cams, *view)?;
            let img = match mode {
                RenderMode::Uncertainty => render_uncertainty(&scene.activate()?, cam, parallel)?,
                _ => {
                    let sg = scene.instance(Noise::Seeded(*seed))?;
                    let r = rasterize(&sg, cam, RenderOptions { parallel, save_state: false })?;
                    match mode {
                        RenderMode::Rgb => r.rgb,
                        RenderMode::Alpha => r.alpha,
                        _ => background_fill(&r.features, &r.alpha, *seed)?,
                    }
                }
            };
            write_image(&img, out, kind)?;
            Ok(EXIT_OK)
        }
        Command::Fit {
            cameras,
            images,
            config,
            out,
            log,
            holdout,
            seed,
        } => {
            let mut cfg: FitConfig = match config {
                Some(p) => read_json(p)?,
                None => FitConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.parallel &= parallel;
            let cams = load_cameras(cameras)?;
            let mut train = Vec::new();
            let mut hold = None;
            for (id, cam) in &cams {
                let image = ["png", "vgim"]
                    .iter()
                    .map(|ext| images.join(format!("{id}.{ext}")))
                    .find(|p| p.exists())
                    .ok_or_else(|| anyhow!("no image for camera {id} in {}", images.display()))
                    .and_then(|p| read_image(&p).with_context(|| format!("reading {}", p.display())))?;
                let image = match image.channels {
                    3 => image,
                    c => bail!("image for camera {id} has {c} channels, expected 3"),
                };
                let v = View {
                    camera: cam.clone(),
                    image,
                };
                if Some(*id) == *holdout {
                    hold = Some(v);
                } else {
                    train.push(v);
                }
            }
            if holdout.is_some() && hold.is_none() {
                bail!("holdout camera {} not found", holdout.unwrap());
            }
            let mut lines = Vec::new();
            let res = fit_scene(&cfg, &train, None, hold.as_ref(), |r| {
                let line = serde_json::to_string(r).expect("log record serializes");
                log::info!("{line}");
                lines.push(line);
            })?;
            save_scene(&SceneFile::variational(res.raw, res.scale_range), out)?;
            if let Some(p) = log {
                let mut text = lines.join("\n");
                text.push('\n');
                write_atomic(p, text.as_bytes())?;
            }
            if let Some(msg) = res.diverged {
                eprintln!("error: fit stopped early, last good parameters saved: {msg}");
                return Ok(EXIT_FAILURE);
            }
            Ok(EXIT_OK)
        }
        Command::Sample { scene, seed, out } => {
            let file = load_scene(scene)?;
            if file.kind != vgs_core::io::SceneKind::Variational {
                bail!("{} is already a semantic instance", scene.display());
            }
            let sg = file.instance(Noise::Seeded(*seed))?;
            save_scene(&SceneFile::semantic(&file.raw, &sg.features, file.scale_range)?, out)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            report,
            gaussians,
            size,
            step,
        } => {
            if *gaussians > 50 || *size > 64 {
                bail!("gradcheck is limited to 50 Gaussians and 64x64 images");
            }
            let (raw, sr, cam) = gradcheck_scene(*seed, *gaussians, *size)?;
            let cfg = GradcheckConfig {
                step: *step,
                parallel,
                ..GradcheckConfig::default()
            };
            let rep = gradcheck(&raw, sr, &cam, *seed, &cfg)?;
            println!(
                "gradcheck: {} coordinates, {} without signal, max rel {:.3e}, mean rel {:.3e}, {:.2}% within tolerance: {}",
                rep.checked,
                rep.no_signal,
                rep.max_rel_error,
                rep.mean_rel_error,
                100.0 * rep.fraction_within_tol,
                if rep.passed { "PASS" } else { "FAIL" }
            );
            if let Some(p) = report {
                write_json(&rep, p)?;
            }
            Ok(if rep.passed { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Metrics { pred, reference, out } => {
            let rows = metrics_table(pred, reference)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{:<24} {:>10} {:>10}", "image", "psnr", "ssim")?;
            for r in &rows {
                let p = if r.psnr.is_finite() { format!("{:.4}", r.psnr) } else { "inf".into() };
                writeln!(stdout, "{:<24} {:>10} {:>10.6}", r.image, p, r.ssim)?;
            }
            if let Some(o) = out {
                write_json(&rows, o)?;
            }
            Ok(EXIT_OK)
        }
        Command::Epipolar {
            cameras,
            pixel,
            out,
            from,
            to,
            samples,
        } => {
            let cams = load_cameras(cameras)?;
            let (a_id, cam_a) = match from {
                Some(id) => (*id, find_camera(&cams, *id)?),
                None => cams.first().map(|(i, c)| (*i, c)).ok_or_else(|| anyhow!("no cameras"))?,
            };
            let mut segments = Vec::new();
            for (id, cam_b) in &cams {
                if *id == a_id || to.is_some_and(|t| t != *id) {
                    continue;
                }
                segments.push(EpipolarOutput {
                    camera: *id,
                    segment: epipolar_segment(*pixel, cam_a, cam_b, *samples)?,
                });
            }
            if let Some(t) = to {
                if segments.is_empty() {
                    bail!("no camera with id {t} other than the source");
                }
            }
            write_json(
                &EpipolarFile {
                    source: a_id,
                    segments,
                },
                out,
            )?;
            Ok(EXIT_OK)
        }
    }
}

#[derive(Serialize)]
struct EpipolarOutput {
    camera: u32,
    segment: EpipolarSegment,
}

#[derive(Serialize)]
struct EpipolarFile {
    source: u32,
    segments: Vec<EpipolarOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub image: String,
    /// `+inf` for identical images; serialized as null.
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics over every image in `reference` with a same-named file in `pred`.
pub fn metrics_table(pred: &Path, reference: &Path) -> Result<Vec<MetricsRow>> {
    let mut names: Vec<String> = fs::read_dir(reference)
        .with_context(|| format!("reading {}", reference.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && ImageKind::from_path(p).is_some())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no images in {}", reference.display());
    }
    names
        .into_iter()
        .map(|name| {
            let r = read_image(&reference.join(&name))?;
            let p_path = pred.join(&name);
            let p = read_image(&p_path).with_context(|| format!("reading {}", p_path.display()))?;
            Ok(MetricsRow {
                psnr: psnr(&p, &r, 1.0)?,
                ssim: ssim(&p, &r, 1.0)?,
                image: name,
            })
        })
        .collect()
}
