//! Command-line driver: scene generation, training, finetuning, rendering,
//! evaluation, analysis artifacts, and gradient auditing.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (non-finite loss or a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use mover_core::checkpoint::{Checkpoint, CheckpointError};
use mover_core::dataset::{
    generate_dataset, load_dataset, save_dataset, DatasetError, SceneDataset, Split,
};
use mover_core::image::{Image, ImageError};
use mover_core::metrics::{
    emit_expert_artifacts, evaluate, pattern_palette, write_eval_csv, MetricsError,
};
use mover_core::renderer::RenderSettings;
use mover_core::tensor::TensorError;
use mover_core::training::{gradient_audit, TrainConfig, TrainError, Trainer, AUDIT_TOLERANCE};

#[derive(Parser)]
#[command(
    name = "mover",
    about = "Mixture-of-view-experts neural renderer at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run that needs a configuration.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Preset to start from
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    preset: Preset,
    /// `key = value` config file applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; determinism is guaranteed at 1 (the only supported
    /// value today — larger values run serially)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Tiny,
    Small,
    Paper,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Source,
    Target,
    Fewshot,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Source => Split::Source,
            SplitArg::Target => Split::Target,
            SplitArg::Fewshot => Split::FewShot,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scene datasets with analytic ground truth
    GenScenes {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; one `scene_<id>/` per scene
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (seeds config.seed, config.seed+1, ...)
        #[arg(long, default_value_t = 3)]
        count: u64,
    },
    /// Train across every scene in a data directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding `scene_<id>/` datasets
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `checkpoint.move`
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides config.train_steps
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Few-shot finetune a checkpoint on one scene
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene id within the data directory
        #[arg(long)]
        scene: u64,
        /// Source views available during finetuning
        #[arg(long, default_value_t = 3)]
        shots: usize,
        /// Overrides config.finetune_steps
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory for the finetuned `checkpoint.move`
        #[arg(long)]
        out: PathBuf,
    },
    /// Render views of a scene from a checkpoint
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: u64,
        /// Dataset view index; all target views when omitted
        #[arg(long)]
        view: Option<usize>,
        /// Output directory for `render_<view>.ppm` and `depth_<view>.ppm`
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rendered views against ground truth (PSNR/SSIM CSV)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Target)]
        split: SplitArg,
        /// Output CSV path (`view,psnr,ssim`)
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit expert-selection maps, usage histograms, and overlap matrices
    ExpertMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for images and CSVs
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-view depth maps of a scene
    DepthMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients of every trained path against central
    /// finite differences
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print a checkpoint's header and tensor inventory
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        match &e {
            TrainError::NonFiniteLoss { .. } => AppError::Numeric(e.to_string()),
            TrainError::Tensor(TensorError::NonFinite(_)) => AppError::Numeric(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for AppError {
    fn from(e: DatasetError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<MetricsError> for AppError {
    fn from(e: MetricsError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<CheckpointError> for AppError {
    fn from(e: CheckpointError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<ImageError> for AppError {
    fn from(e: ImageError) -> AppError {
        AppError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AppError + '_ {
    move |e| AppError::Data(format!("io error on {}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOVE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let benign =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig, AppError> {
    let mut cfg = match args.preset {
        Preset::Tiny => TrainConfig::tiny(),
        Preset::Small => TrainConfig::small(),
        Preset::Paper => TrainConfig::paper(),
    };
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.threads > 1 {
        log::warn!("--threads {} requested; running serially", args.threads);
    }
    Ok(cfg)
}

fn settings_for(cfg: &TrainConfig) -> RenderSettings {
    RenderSettings {
        samples_per_ray: cfg.samples_per_ray,
        t_near: cfg.t_near,
        t_far: cfg.t_far,
        chunk: 256,
    }
}

/// Loads every `scene_<id>/` dataset under `data`, ordered by id.
fn load_scenes(data: &Path) -> Result<Vec<SceneDataset>, AppError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(data).map_err(io_err(data))? {
        let entry = entry.map_err(io_err(data))?;
        let name = entry.file_name();
        if let Some(id) = name.to_string_lossy().strip_prefix("scene_") {
            if let Ok(id) = id.parse::<u64>() {
                ids.push(id);
            }
        }
    }
    if ids.is_empty() {
        return Err(AppError::Data(format!(
            "no scene_<id> directories under {}",
            data.display()
        )));
    }
    ids.sort_unstable();
    ids.iter().map(|&id| Ok(load_dataset(data, id)?)).collect()
}

fn load_scene(data: &Path, scene: u64) -> Result<SceneDataset, AppError> {
    Ok(load_dataset(data, scene)?)
}

fn depth_image(depth: &[f64], width: usize, height: usize, settings: &RenderSettings) -> Image {
    let mut img = Image::new(width, height);
    let span = settings.t_far - settings.t_near;
    for (i, &d) in depth.iter().enumerate() {
        // near surfaces bright, far surfaces dark
        let g = 1.0 - ((d - settings.t_near) / span).clamp(0.0, 1.0);
        img.pixels[i] = [g, g, g];
    }
    img
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::GenScenes { config, out, count } => {
            let cfg = build_config(&config)?;
            if count == 0 {
                return Err(AppError::Usage("--count must be positive".into()));
            }
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            for i in 0..count {
                let seed = cfg.seed.wrapping_add(i);
                let ds = generate_dataset(
                    seed,
                    cfg.num_views,
                    cfg.num_targets,
                    cfg.image_size,
                    cfg.image_size,
                );
                save_dataset(&out, &ds)?;
                println!(
                    "scene {} ({} primitives, {} views) -> {}",
                    ds.scene_id,
                    ds.scene().primitives.len(),
                    ds.views.len(),
                    out.join(format!("scene_{seed}")).display()
                );
            }
            Ok(())
        }
        Command::Train { config, data, out, resume, steps } => {
            let datasets = load_scenes(&data)?;
            let mut trainer = match &resume {
                Some(path) => Trainer::load_checkpoint(path)?,
                None => Trainer::new(build_config(&config)?)?,
            };
            let total = steps.unwrap_or(trainer.config.train_steps);
            log::info!(
                "training on {} scenes: step {} -> {}",
                datasets.len(),
                trainer.step,
                total
            );
            while trainer.step < total {
                let r = trainer.train_step(&datasets)?;
                if r.step % 50 == 0 || r.step + 1 == total {
                    log::info!(
                        "step {}: total {:.6} photo {:.6} div {:.4} sc {:.6} |g| {:.4}",
                        r.step,
                        r.total,
                        r.photometric,
                        r.diversity,
                        r.spatial,
                        r.grad_norm
                    );
                }
            }
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let path = out.join("checkpoint.move");
            trainer.save_checkpoint(&path)?;
            println!("trained to step {} -> {}", trainer.step, path.display());
            Ok(())
        }
        Command::Finetune { checkpoint, data, scene, shots, steps, out } => {
            let mut trainer = Trainer::load_checkpoint(&checkpoint)?;
            let ds = load_scene(&data, scene)?;
            let n = steps.unwrap_or(trainer.config.finetune_steps);
            let reports = trainer.finetune_few_shot(&ds, shots, n)?;
            if let Some(last) = reports.last() {
                log::info!("finetune final loss {:.6}", last.total);
            }
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let path = out.join("checkpoint.move");
            trainer.save_checkpoint(&path)?;
            println!(
                "finetuned scene {scene} with {shots} shots for {n} steps -> {}",
                path.display()
            );
            Ok(())
        }
        Command::Render { checkpoint, data, scene, view, out } => {
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let ds = load_scene(&data, scene)?;
            let settings = settings_for(&trainer.config);
            let sources: Vec<_> =
                ds.views_in(Split::Source).map(|(_, v)| (&v.camera, &v.image)).collect();
            let targets: Vec<usize> = match view {
                Some(vi) if vi < ds.views.len() => vec![vi],
                Some(vi) => {
                    return Err(AppError::Usage(format!(
                        "view {vi} out of range (scene has {} views)",
                        ds.views.len()
                    )))
                }
                None => ds.views_in(Split::Target).map(|(i, _)| i).collect(),
            };
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            for vi in targets {
                let cam = &ds.views[vi].camera;
                let rendered = trainer.model.render_image(&trainer.store, cam, &sources, &settings);
                let rgb = out.join(format!("render_{vi}.ppm"));
                rendered.image.save_ppm(&rgb)?;
                let dimg = depth_image(&rendered.depth, cam.width, cam.height, &settings);
                dimg.save_ppm(&out.join(format!("depth_{vi}.ppm")))?;
                println!("view {vi} -> {}", rgb.display());
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, scene, split, out } => {
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let ds = load_scene(&data, scene)?;
            let settings = settings_for(&trainer.config);
            let id = checkpoint.display().to_string();
            let report =
                evaluate(&trainer.model, &trainer.store, &ds, &settings, split.into(), &id)?;
            write_eval_csv(&out, &report)?;
            println!(
                "scene {scene}: mean psnr {:.3} dB, mean ssim {:.4} over {} views -> {}",
                report.mean_psnr,
                report.mean_ssim,
                report.rows.len(),
                out.display()
            );
            Ok(())
        }
        Command::ExpertMaps { checkpoint, data, out } => {
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let datasets = load_scenes(&data)?;
            let settings = settings_for(&trainer.config);
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let artifacts =
                emit_expert_artifacts(&trainer.model, &trainer.store, &datasets, &settings, &out)?;
            let patterns = pattern_palette(
                mover_core::moe::expert_combinations(
                    trainer.config.experts,
                    trainer.config.top_k,
                )
                .len(),
            )
            .len();
            println!(
                "{} scenes, {patterns}-color palette -> {}",
                artifacts.scenes.len(),
                out.display()
            );
            Ok(())
        }
        Command::DepthMaps { checkpoint, data, scene, out } => {
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let ds = load_scene(&data, scene)?;
            let settings = settings_for(&trainer.config);
            let sources: Vec<_> =
                ds.views_in(Split::Source).map(|(_, v)| (&v.camera, &v.image)).collect();
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            for (vi, view) in ds.views_in(Split::Target) {
                let rendered =
                    trainer.model.render_image(&trainer.store, &view.camera, &sources, &settings);
                let dimg =
                    depth_image(&rendered.depth, view.camera.width, view.camera.height, &settings);
                let path = out.join(format!("depth_{vi}.ppm"));
                dimg.save_ppm(&path)?;
                println!("view {vi} -> {}", path.display());
            }
            Ok(())
        }
        Command::Gradcheck { config } => {
            let cfg = build_config(&config)?;
            let checks = gradient_audit(&cfg)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{:<24} rel err {:.3e}  {}",
                    c.name,
                    c.rel_err,
                    if c.passed() { "pass" } else { "FAIL" }
                );
                if !c.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(AppError::Numeric(format!(
                    "{failed}/{} gradient checks exceeded rel err {AUDIT_TOLERANCE:e}",
                    checks.len()
                )));
            }
            Ok(())
        }
        Command::InspectCheckpoint { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            println!("header:");
            for (k, v) in &ck.header {
                println!("  {k} = {v}");
            }
            let mut params = 0usize;
            println!("tensors:");
            for (name, t) in &ck.tensors {
                println!("  {name:<32} {:?} ({})", t.shape, t.numel());
                if !name.starts_with("opt.") {
                    params += t.numel();
                }
            }
            println!("{} tensors, {params} model parameters", ck.tensors.len());
            Ok(())
        }
    }
}
