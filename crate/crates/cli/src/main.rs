//! Command-line interface to the long exposure pipeline.
//!
//! `run` executes the whole pipeline; `track`, `align`, `select`, `render`
//! and `composite` execute single stages against a shared artifacts
//! directory; `synth` generates test bursts with known ground-truth motion.
//!
//! Exit codes: 0 on success, 2 when the run fell back to the sharp
//! conventional output, 1 on error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use longexp_core::burst_io::{
    save_png_gray, save_png_srgb, BlurMode, BurstManifest, FaceRegionSpec,
};
use longexp_core::dump;
use longexp_core::error::Error as CoreError;
use longexp_core::flow::{read_flow_file, write_flow_file};
use longexp_core::geom::Vec2;
use longexp_core::image_buf::ImageBuf;
use longexp_core::motionblur::KernelPair;
use longexp_core::pipeline::{
    self, load_and_plan, stage_align, stage_composite, stage_render, stage_select, stage_track,
    LoadedBurst, PipelineConfig, Report,
};
use longexp_core::synth::{MovingObject, ObjectPath, ParallaxPlane, SynthScene};

#[derive(Parser)]
#[command(name = "longexp", about = "Computational long exposure from image bursts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Burst manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline configuration file (TOML); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Deterministic seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker pool size override (0 = default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write conventional + long exposure outputs.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Also dump per-stage artifacts into OUT_DIR/artifacts.
        #[arg(long)]
        dump_artifacts: bool,
        /// Write debug images (subject weights, masks).
        #[arg(long)]
        debug: bool,
    },
    /// Detect and track features; writes tracks.txt.
    Track {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out/artifacts")]
        artifacts: PathBuf,
    },
    /// Estimate alignment from dumped tracks; writes transforms.txt (+ meshes.txt).
    Align {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out/artifacts")]
        artifacts: PathBuf,
    },
    /// Apply the frame selection criterion; writes selection.txt.
    Select {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out/artifacts")]
        artifacts: PathBuf,
    },
    /// Predict kernels and synthesize the blurred half-res image.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out/artifacts")]
        artifacts: PathBuf,
        /// Read per-pair flow from this directory (pair_NN_fwd.flo /
        /// pair_NN_bwd.flo) instead of estimating it.
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
    /// Composite the final outputs from dumped artifacts.
    Composite {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out/artifacts")]
        artifacts: PathBuf,
        /// Output directory for the final images and report.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Generate a synthetic burst with known ground-truth motion.
    Synth {
        /// Scene preset.
        #[arg(long, value_parser = ["static", "translate", "disc-fg", "disc-bg", "parallax", "arc"])]
        preset: String,
        #[arg(long, default_value = "burst")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 768)]
        width: usize,
        #[arg(long, default_value_t = 576)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            PipelineConfig::from_toml_str(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    Ok(config)
}

fn load_inputs(common: &CommonArgs) -> Result<(BurstManifest, PipelineConfig, LoadedBurst)> {
    let config = load_config(common)?;
    let manifest = BurstManifest::load(&common.manifest)?;
    let burst = load_and_plan(&manifest, &config)?;
    Ok((manifest, config, burst))
}

struct ArtifactPaths {
    dir: PathBuf,
}

impl ArtifactPaths {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating artifacts dir {}", dir.display()))?;
        Ok(ArtifactPaths {
            dir: dir.to_path_buf(),
        })
    }

    fn tracks(&self) -> PathBuf {
        self.dir.join("tracks.txt")
    }

    fn transforms(&self) -> PathBuf {
        self.dir.join("transforms.txt")
    }

    fn meshes(&self) -> PathBuf {
        self.dir.join("meshes.txt")
    }

    fn selection(&self) -> PathBuf {
        self.dir.join("selection.txt")
    }

    fn blurred(&self) -> PathBuf {
        self.dir.join("blurred_half.f32")
    }

    fn pair(&self, i: usize, kind: &str) -> PathBuf {
        self.dir.join(format!("pair_{i:02}_{kind}.flo"))
    }
}

fn load_solution(
    paths: &ArtifactPaths,
    burst: &LoadedBurst,
) -> Result<longexp_core::alignment::AlignmentSolution> {
    let transforms = dump::load_transforms(&paths.transforms())?;
    let meshes = if paths.meshes().exists() {
        Some(dump::load_meshes(&paths.meshes())?)
    } else {
        None
    };
    let (w, h) = burst.low_dims();
    Ok(longexp_core::alignment::AlignmentSolution {
        transforms,
        meshes,
        width: w,
        height: h,
    })
}

fn save_solution(
    paths: &ArtifactPaths,
    solution: &longexp_core::alignment::AlignmentSolution,
) -> Result<()> {
    dump::save_transforms(&paths.transforms(), &solution.transforms)?;
    if let Some(meshes) = &solution.meshes {
        dump::save_meshes(&paths.meshes(), meshes)?;
    }
    Ok(())
}

fn save_render_products(
    paths: &ArtifactPaths,
    products: &longexp_core::pipeline::RenderProducts,
) -> Result<()> {
    for (i, pair) in products.pairs.iter().enumerate() {
        write_flow_file(&paths.pair(i, "fwd"), &pair.a.delta)?;
        write_flow_file(&paths.pair(i, "bwd"), &pair.b.delta)?;
        write_flow_file(&paths.pair(i, "wa"), &pair.a.weight)?;
        write_flow_file(&paths.pair(i, "wb"), &pair.b.weight)?;
    }
    write_flow_file(&paths.blurred(), &products.blurred_half)?;
    Ok(())
}

fn load_render_products(
    paths: &ArtifactPaths,
    n_selected: usize,
) -> Result<longexp_core::pipeline::RenderProducts> {
    let mut pairs = Vec::new();
    for i in 0..n_selected.saturating_sub(1) {
        let fwd = read_flow_file(&paths.pair(i, "fwd"))?;
        let bwd = read_flow_file(&paths.pair(i, "bwd"))?;
        let wa = read_flow_file(&paths.pair(i, "wa"))?;
        let wb = read_flow_file(&paths.pair(i, "wb"))?;
        pairs.push(KernelPair {
            a: longexp_core::motionblur::KernelMap {
                delta: fwd,
                weight: wa,
            },
            b: longexp_core::motionblur::KernelMap {
                delta: bwd,
                weight: wb,
            },
            clamped_fraction: 0.0,
        });
    }
    let blurred_half = read_flow_file(&paths.blurred())?;
    Ok(longexp_core::pipeline::RenderProducts {
        pairs,
        blurred_half,
        max_clamped_fraction: 0.0,
    })
}

fn write_outputs(
    out_dir: &Path,
    conventional: &ImageBuf,
    long_exposure: Option<&ImageBuf>,
    report: &Report,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    save_png_srgb(&out_dir.join("conventional.png"), conventional)?;
    if let Some(img) = long_exposure {
        save_png_srgb(&out_dir.join("long_exposure.png"), img)?;
    }
    std::fs::write(out_dir.join("report.txt"), report.to_text())
        .context("writing report")?;
    Ok(())
}

fn cmd_run(
    common: &CommonArgs,
    out_dir: &Path,
    dump_artifacts: bool,
    debug: bool,
) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let output = pipeline::run(&burst.manifest, &config)?;
    write_outputs(out_dir, &output.conventional, output.long_exposure.as_ref(), &output.report)?;

    if dump_artifacts || debug {
        let paths = ArtifactPaths::new(&out_dir.join("artifacts"))?;
        let (subject, set) = stage_track(&burst, &config)?;
        dump::save_tracks(&paths.tracks(), &set)?;
        if debug {
            save_png_gray(&paths.dir.join("subject_weight.png"), &subject.weight)?;
            save_png_gray(&paths.dir.join("subject_saliency.png"), &subject.saliency)?;
            save_png_gray(&paths.dir.join("subject_face.png"), &subject.face)?;
        }
        if output.report.fallback.is_none() {
            let solution = stage_align(&burst, &set, &config)?;
            save_solution(&paths, &solution)?;
            let (n_selected, estimate) = stage_select(&burst, &set, &solution, &config);
            dump::save_selection(&paths.selection(), n_selected, estimate)?;
            let products = stage_render(&burst, &solution, n_selected, &config, None)?;
            save_render_products(&paths, &products)?;
            if debug {
                let composite =
                    stage_composite(&burst, &set, &solution, n_selected, &products, &config);
                save_png_gray(&paths.dir.join("mask.png"), &composite.mask)?;
                save_png_gray(&paths.dir.join("mask_flow.png"), &composite.flow_mask)?;
                save_png_gray(&paths.dir.join("mask_face.png"), &composite.face_mask)?;
                save_png_srgb(&paths.dir.join("blurred_half.png"), &products.blurred_half)?;
            }
        }
    }

    if output.long_exposure.is_none() {
        eprintln!(
            "fallback to sharp output: {}",
            output.report.fallback.as_deref().unwrap_or("unknown")
        );
        return Ok(ExitCode::from(2));
    }
    println!(
        "wrote {} and {}",
        out_dir.join("conventional.png").display(),
        out_dir.join("long_exposure.png").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_track(common: &CommonArgs, artifacts: &Path) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let paths = ArtifactPaths::new(artifacts)?;
    let (_, set) = stage_track(&burst, &config)?;
    dump::save_tracks(&paths.tracks(), &set)?;
    println!("wrote {}", paths.tracks().display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_align(common: &CommonArgs, artifacts: &Path) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let paths = ArtifactPaths::new(artifacts)?;
    let set = dump::load_tracks(&paths.tracks())
        .map_err(|_| CoreError::MissingArtifact("tracks.txt (run `track` first)".into()))?;
    let solution = stage_align(&burst, &set, &config)?;
    save_solution(&paths, &solution)?;
    println!("wrote {}", paths.transforms().display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(common: &CommonArgs, artifacts: &Path) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let paths = ArtifactPaths::new(artifacts)?;
    let set = dump::load_tracks(&paths.tracks())
        .map_err(|_| CoreError::MissingArtifact("tracks.txt (run `track` first)".into()))?;
    let solution = load_solution(&paths, &burst)
        .map_err(|_| CoreError::MissingArtifact("transforms.txt (run `align` first)".into()))?;
    let (n_selected, estimate) = stage_select(&burst, &set, &solution, &config);
    dump::save_selection(&paths.selection(), n_selected, estimate)?;
    println!(
        "selected {n_selected} frames, trail estimate {estimate:.2}% of diagonal"
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(common: &CommonArgs, artifacts: &Path, flow_dir: Option<&Path>) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let paths = ArtifactPaths::new(artifacts)?;
    let solution = load_solution(&paths, &burst)
        .map_err(|_| CoreError::MissingArtifact("transforms.txt (run `align` first)".into()))?;
    let (n_selected, _) = dump::load_selection(&paths.selection())
        .map_err(|_| CoreError::MissingArtifact("selection.txt (run `select` first)".into()))?;

    let injected: Option<Vec<(ImageBuf, ImageBuf)>> = match flow_dir {
        Some(dir) => {
            let mut fields = Vec::new();
            for i in 0..n_selected - 1 {
                let fwd = read_flow_file(&dir.join(format!("pair_{i:02}_fwd.flo")))?;
                let bwd = read_flow_file(&dir.join(format!("pair_{i:02}_bwd.flo")))?;
                fields.push((fwd, bwd));
            }
            Some(fields)
        }
        None => None,
    };
    let products = stage_render(&burst, &solution, n_selected, &config, injected.as_deref())?;
    save_render_products(&paths, &products)?;
    println!("wrote {}", paths.blurred().display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_composite(common: &CommonArgs, artifacts: &Path, out_dir: &Path) -> Result<ExitCode> {
    let (_, config, burst) = load_inputs(common)?;
    let paths = ArtifactPaths::new(artifacts)?;
    let set = dump::load_tracks(&paths.tracks())
        .map_err(|_| CoreError::MissingArtifact("tracks.txt (run `track` first)".into()))?;
    let solution = load_solution(&paths, &burst)
        .map_err(|_| CoreError::MissingArtifact("transforms.txt (run `align` first)".into()))?;
    let (n_selected, estimate) = dump::load_selection(&paths.selection())
        .map_err(|_| CoreError::MissingArtifact("selection.txt (run `select` first)".into()))?;
    let products = load_render_products(&paths, n_selected)
        .map_err(|_| CoreError::MissingArtifact("blurred_half.f32 (run `render` first)".into()))?;

    let composite = stage_composite(&burst, &set, &solution, n_selected, &products, &config);
    let report = Report {
        mode: burst.mode,
        base_manifest_index: burst.base_manifest_index,
        processing_manifest_indices: burst.processing.clone(),
        velocity_estimate_pct: burst.velocity_estimate_pct,
        plan_duration_s: burst.plan.as_ref().map(|p| p.duration_s),
        plan_stride: burst.plan.as_ref().map(|p| p.stride),
        selected_count: n_selected,
        trail_estimate_pct: estimate,
        transforms: solution.transforms[..n_selected.min(solution.transforms.len())]
            .iter()
            .map(|t| (t.scale, t.theta, t.t.x, t.t.y))
            .collect(),
        max_clamped_fraction: products.max_clamped_fraction,
        fallback: None,
    };
    write_outputs(out_dir, &burst.full[0], Some(&composite.image), &report)?;
    println!("wrote {}", out_dir.join("long_exposure.png").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(
    preset: &str,
    out_dir: &Path,
    width: usize,
    height: usize,
    frames: usize,
    seed: u64,
) -> Result<ExitCode> {
    let diag = ((width * width + height * height) as f32).sqrt();
    let (scene, mode, faces): (SynthScene, BlurMode, Vec<FaceRegionSpec>) = match preset {
        "static" => (
            SynthScene::new(width, height, frames, seed),
            BlurMode::ForegroundBlur,
            vec![],
        ),
        "translate" => (
            SynthScene::new(width, height, frames, seed)
                .with_camera_velocity(Vec2::new(diag * 0.005, 0.0)),
            BlurMode::ForegroundBlur,
            vec![],
        ),
        "disc-fg" => (
            SynthScene::new(width, height, frames, seed)
                .with_camera_jitter(1.0, seed ^ 0x55)
                .with_object(MovingObject {
                    path: ObjectPath::Linear {
                        start: Vec2::new(width as f32 * 0.25, height as f32 * 0.5),
                        velocity: Vec2::new(diag * 0.04, 0.0),
                    },
                    radius: height as f32 * 0.15,
                    brightness: 0.75,
                    texture_amplitude: 0.0,
                    seed: seed ^ 0xABC,
                }),
            BlurMode::ForegroundBlur,
            vec![],
        ),
        "disc-bg" => {
            let start = Vec2::new(width as f32 * 0.3, height as f32 * 0.5);
            let velocity = Vec2::new(diag * 0.03, 0.0);
            let radius = height as f32 * 0.2;
            let base_pos = start + velocity * (frames as f32 - 1.0);
            let scene = SynthScene::new(width, height, frames, seed).with_object(MovingObject {
                path: ObjectPath::Linear { start, velocity },
                radius,
                brightness: 0.6,
                texture_amplitude: 0.5,
                seed: seed ^ 0xDEF,
            });
            let faces = vec![FaceRegionSpec {
                center_x: base_pos.x,
                center_y: base_pos.y,
                inner_radius: radius * 0.4,
                outer_radius: radius * 0.9,
            }];
            (scene, BlurMode::BackgroundBlur, faces)
        }
        "parallax" => (
            SynthScene::new(width, height, frames, seed)
                .with_camera_velocity(Vec2::new(1.0, 0.0))
                .with_plane(ParallaxPlane {
                    y_min: height as f32 * 0.6,
                    y_max: height as f32,
                    shift_per_frame: Vec2::new(diag * 0.01, 0.0),
                    seed: seed ^ 0x77,
                }),
            BlurMode::ForegroundBlur,
            vec![],
        ),
        "arc" => (
            SynthScene::new(width, height, frames, seed).with_object(MovingObject {
                path: ObjectPath::Arc {
                    center: Vec2::new(width as f32 * 0.5, height as f32 * 0.65),
                    radius: height as f32 * 0.35,
                    start_angle: std::f32::consts::PI,
                    angular_velocity: -0.35,
                },
                radius: height as f32 * 0.1,
                brightness: 0.8,
                texture_amplitude: 0.0,
                seed: seed ^ 0x31,
            }),
            BlurMode::ForegroundBlur,
            vec![],
        ),
        other => bail!("unknown preset {other}"),
    };
    let manifest_path = scene.write_burst(out_dir, mode, faces)?;

    // disc-bg ships a saliency map marking the subject at the base frame.
    if preset == "disc-bg" {
        let mut manifest = BurstManifest::load(&manifest_path)?;
        let start = Vec2::new(width as f32 * 0.3, height as f32 * 0.5);
        let velocity = Vec2::new(diag * 0.03, 0.0);
        let radius = height as f32 * 0.2;
        let base_pos = start + velocity * (frames as f32 - 1.0);
        let (low_w, low_h) = (width.div_ceil(8), height.div_ceil(8));
        let saliency = ImageBuf::from_fn(low_w, low_h, 1, |x, y, _| {
            let p = Vec2::new(x as f32 * 8.0, y as f32 * 8.0);
            if (p - base_pos).norm() < radius {
                1.0
            } else {
                0.0
            }
        });
        save_png_gray(&out_dir.join("saliency.png"), &saliency)?;
        manifest.saliency_path = Some(PathBuf::from("saliency.png"));
        // Rewrite with paths relative to the manifest.
        let mut rel = manifest.clone();
        rel.frame_paths = (0..frames)
            .map(|k| PathBuf::from(format!("frame_{k:04}.png")))
            .collect();
        std::fs::write(&manifest_path, rel.to_toml_string())
            .context("rewriting manifest")?;
    }
    println!("wrote {}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Run {
            common,
            out_dir,
            dump_artifacts,
            debug,
        } => cmd_run(common, out_dir, *dump_artifacts, *debug),
        Command::Track { common, artifacts } => cmd_track(common, artifacts),
        Command::Align { common, artifacts } => cmd_align(common, artifacts),
        Command::Select { common, artifacts } => cmd_select(common, artifacts),
        Command::Render {
            common,
            artifacts,
            flow_dir,
        } => cmd_render(common, artifacts, flow_dir.as_deref()),
        Command::Composite {
            common,
            artifacts,
            out_dir,
        } => cmd_composite(common, artifacts, out_dir),
        Command::Synth {
            preset,
            out_dir,
            width,
            height,
            frames,
            seed,
        } => cmd_synth(preset, out_dir, *width, *height, *frames, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            // Fallback-class errors from stage commands still honor the
            // sharp-output exit code.
            if let Some(core) = e.downcast_ref::<CoreError>() {
                if core.is_sharp_fallback() {
                    eprintln!("fallback to sharp output: {core}");
                    return ExitCode::from(2);
                }
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
