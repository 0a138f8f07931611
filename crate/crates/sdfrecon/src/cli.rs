//! Command-line front end: scene synthesis, training, mesh extraction and
//! evaluation, diagnostic map rendering, and the ablation table.

use crate::io::{self, load_scene, SceneData};
use crate::losses::{DepthMode, FeatureMode};
use crate::pipeline::{
    evaluate_mesh, field_mesh, preset, run_ablation, synthesize_scene, TrainConfig, Trainer,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "sdfrecon",
    version,
    about = "Sparse-view neural SDF surface reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FeatModeArg {
    Accumulate,
    SampleMean,
    L1,
    L2,
    OnSurface,
}

impl From<FeatModeArg> for FeatureMode {
    fn from(v: FeatModeArg) -> Self {
        match v {
            FeatModeArg::Accumulate => FeatureMode::Accumulate,
            FeatModeArg::SampleMean => FeatureMode::SampleMean,
            FeatModeArg::L1 => FeatureMode::L1,
            FeatModeArg::L2 => FeatureMode::L2,
            FeatModeArg::OnSurface => FeatureMode::OnSurface,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DepthModeArg {
    Uncertainty,
    Mono,
}

impl From<DepthModeArg> for DepthMode {
    fn from(v: DepthModeArg) -> Self {
        match v {
            DepthModeArg::Uncertainty => DepthMode::Uncertainty,
            DepthModeArg::Mono => DepthMode::Mono,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic scene directory (images, cameras, depth, priors,
    /// keypoints).
    Synth {
        /// Preset name: sphere3, spherebox3, or lowtex3.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the preset's view count.
        #[arg(long)]
        views: Option<usize>,
        /// Override the preset's maximum angular separation in degrees.
        #[arg(long)]
        angle: Option<f64>,
        /// Override the preset's square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Optimize the implicit field on a scene directory.
    Train {
        /// Scene directory from `synth` (or the documented layout).
        #[arg(long)]
        scene: PathBuf,
        /// Output directory for checkpoint, logs, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML training-config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        rays: Option<usize>,
        /// Depth-loss weight.
        #[arg(long)]
        alpha: Option<f64>,
        /// Eikonal weight.
        #[arg(long)]
        beta: Option<f64>,
        /// Occlusion-mask confidence threshold.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum)]
        feat_mode: Option<FeatModeArg>,
        #[arg(long, value_enum)]
        depth_mode: Option<DepthModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ckpt_every: Option<u64>,
    },
    /// Extract a mesh from a checkpoint and report Chamfer distance
    /// against the analytic scene.
    MeshEval {
        /// Training output directory holding checkpoint.ckpt + config.toml.
        #[arg(long)]
        run: PathBuf,
        /// Scene directory (for cameras and the reference geometry).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 128)]
        grid: usize,
        /// Reference/sample point count for Chamfer.
        #[arg(long, default_value_t = 20000)]
        points: usize,
        /// OBJ output path (default: <run>/mesh.obj).
        #[arg(long)]
        obj: Option<PathBuf>,
    },
    /// Render depth / confidence / feature-similarity maps for one view.
    RenderMaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant and print the Chamfer table.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        grid: usize,
    },
}

/// Run manifest written before training starts.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    seed: u64,
    scene_dir: String,
    out_dir: String,
    started_unix_secs: u64,
    config: &'a TrainConfig,
}

fn runtime_err(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_RUNTIME
}

fn usage_err(msg: impl std::fmt::Display) -> i32 {
    eprintln!("usage error: {msg}");
    EXIT_USAGE
}

fn load_scene_or_exit(dir: &Path) -> Result<SceneData, i32> {
    load_scene(dir).map_err(|e| usage_err(format!("cannot load scene {}: {e}", dir.display())))
}

fn load_run(
    run: &Path,
    scene: &SceneData,
) -> Result<Trainer, i32> {
    let config_path = run.join("config.toml");
    let ckpt_path = run.join("checkpoint.ckpt");
    if !config_path.exists() || !ckpt_path.exists() {
        return Err(usage_err(format!(
            "run directory {} must contain config.toml and checkpoint.ckpt",
            run.display()
        )));
    }
    let text = std::fs::read_to_string(&config_path)
        .map_err(|e| runtime_err(format!("read {}: {e}", config_path.display())))?;
    let config: TrainConfig =
        toml::from_str(&text).map_err(|e| runtime_err(format!("parse config: {e}")))?;
    let ckpt = io::load_checkpoint(&ckpt_path).map_err(|e| runtime_err(e))?;
    Trainer::from_checkpoint(scene, config, &ckpt).map_err(|e| runtime_err(e))
}

pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { preset: name, out, views, angle, size } => {
            let Some(mut desc) = preset(&name) else {
                return usage_err(format!(
                    "unknown preset '{name}' (have: sphere3, spherebox3, lowtex3)"
                ));
            };
            if let Some(v) = views {
                desc.n_views = v;
            }
            if let Some(a) = angle {
                desc.max_angle_deg = a;
            }
            if let Some(s) = size {
                desc.image_size = s;
            }
            match synthesize_scene(&desc, &out) {
                Ok(()) => {
                    println!("scene written to {}", out.display());
                    EXIT_OK
                }
                Err(e) => runtime_err(e),
            }
        }
        Command::Train {
            scene,
            out,
            config,
            steps,
            rays,
            alpha,
            beta,
            tau,
            feat_mode,
            depth_mode,
            seed,
            ckpt_every,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = match std::fs::read_to_string(&path) {
                        Ok(t) => t,
                        Err(e) => return usage_err(format!("read {}: {e}", path.display())),
                    };
                    match toml::from_str(&text) {
                        Ok(c) => c,
                        Err(e) => return usage_err(format!("parse {}: {e}", path.display())),
                    }
                }
                None => TrainConfig::default(),
            };
            if let Some(v) = steps {
                cfg.total_steps = v;
            }
            if let Some(v) = rays {
                cfg.rays_per_batch = v;
            }
            if let Some(v) = alpha {
                cfg.alpha = v;
            }
            if let Some(v) = beta {
                cfg.beta = v;
            }
            if let Some(v) = tau {
                cfg.tau = v;
            }
            if let Some(v) = feat_mode {
                cfg.feature_mode = v.into();
            }
            if let Some(v) = depth_mode {
                cfg.depth_mode = v.into();
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = ckpt_every {
                cfg.checkpoint_every = v;
            }
            if let Err(e) = cfg.validate() {
                return usage_err(e);
            }
            let scene_data = match load_scene_or_exit(&scene) {
                Ok(s) => s,
                Err(code) => return code,
            };
            match train_run(&scene_data, cfg, &scene, &out) {
                Ok(()) => EXIT_OK,
                Err(code) => code,
            }
        }
        Command::MeshEval { run, scene, grid, points, obj } => {
            let scene_data = match load_scene_or_exit(&scene) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let Some(desc) = scene_data.description.clone() else {
                return usage_err("scene directory lacks scene.toml; no reference geometry");
            };
            let trainer = match load_run(&run, &scene_data) {
                Ok(t) => t,
                Err(code) => return code,
            };
            if grid < 8 {
                return usage_err("--grid must be at least 8");
            }
            let mesh = field_mesh(&trainer.field, grid, -1.0, 1.0);
            let obj_path = obj.unwrap_or_else(|| run.join("mesh.obj"));
            if let Err(e) = io::write_obj(&obj_path, &mesh) {
                return runtime_err(e);
            }
            let result = evaluate_mesh(&mesh, &desc.scene, points, trainer.config.seed);
            let summary = format!(
                "grid={grid} vertices={} faces={} cd={:.6} empty_mesh={}\n",
                mesh.vertices.len(),
                mesh.faces.len(),
                result.distance,
                result.empty_mesh
            );
            print!("{summary}");
            if let Err(e) = std::fs::write(run.join("eval.txt"), summary) {
                return runtime_err(e);
            }
            EXIT_OK
        }
        Command::RenderMaps { run, scene, view, stride, out } => {
            let scene_data = match load_scene_or_exit(&scene) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let trainer = match load_run(&run, &scene_data) {
                Ok(t) => t,
                Err(code) => return code,
            };
            if view >= trainer.views.len() {
                return usage_err(format!(
                    "view {view} out of range (scene has {})",
                    trainer.views.len()
                ));
            }
            if stride == 0 {
                return usage_err("--stride must be positive");
            }
            let out_dir = out.unwrap_or_else(|| run.clone());
            if let Err(e) = std::fs::create_dir_all(&out_dir) {
                return runtime_err(e);
            }
            let (depth, conf, sim, w, h) = trainer.render_maps(view, stride);
            for (name, map) in
                [("depth", &depth), ("confidence", &conf), ("similarity", &sim)]
            {
                let path = out_dir.join(format!("{name}_{view:03}.pf2"));
                if let Err(e) = io::write_pf2(&path, map, w, h) {
                    return runtime_err(e);
                }
            }
            println!("maps written to {} ({w}x{h})", out_dir.display());
            EXIT_OK
        }
        Command::Ablate { scene, out, steps, seed, grid } => {
            let scene_data = match load_scene_or_exit(&scene) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let mut cfg = TrainConfig::default();
            if let Some(v) = steps {
                cfg.total_steps = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Err(e) = std::fs::create_dir_all(&out) {
                return runtime_err(e);
            }
            let rows = match run_ablation(&scene_data, &cfg, grid, 5000) {
                Ok(r) => r,
                Err(e) => return runtime_err(e),
            };
            let mut table = String::from("variant\tcd\n");
            for row in &rows {
                table.push_str(&format!("{}\t{:.6}\n", row.name, row.chamfer));
            }
            print!("{table}");
            if let Err(e) = std::fs::write(out.join("ablation.tsv"), table) {
                return runtime_err(e);
            }
            EXIT_OK
        }
    }
}

fn train_run(
    scene_data: &SceneData,
    cfg: TrainConfig,
    scene_dir: &Path,
    out: &Path,
) -> Result<(), i32> {
    std::fs::create_dir_all(out).map_err(|e| runtime_err(e))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        scene_dir: scene_dir.display().to_string(),
        out_dir: out.display().to_string(),
        started_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: &cfg,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| runtime_err(e))?;
    std::fs::write(out.join("manifest.json"), manifest_json).map_err(|e| runtime_err(e))?;
    let config_toml = toml::to_string_pretty(&cfg).map_err(|e| runtime_err(e))?;
    std::fs::write(out.join("config.toml"), config_toml).map_err(|e| runtime_err(e))?;

    let mut trainer = Trainer::new(scene_data, cfg).map_err(|e| runtime_err(e))?;
    let mut log = std::fs::File::create(out.join("metrics.log")).map_err(|e| runtime_err(e))?;
    let start = std::time::Instant::now();
    let ckpt_path = out.join("checkpoint.ckpt");
    while trainer.step < trainer.config.total_steps {
        let report = trainer.train_step().map_err(|e| runtime_err(e))?;
        let step = trainer.step;
        if step % trainer.config.log_every == 0 || step == trainer.config.total_steps {
            let line = format!(
                "step={step} l_feat={:.12e} l_depth={:.12e} l_pixel={:.12e} l_patch={:.12e} l_eik={:.12e} l_free={:.12e} total={:.12e} s={:.6e}\n",
                report.l_feat,
                report.l_depth,
                report.l_color_pixel,
                report.l_color_patch,
                report.l_eik,
                report.l_free,
                report.total,
                trainer.field.s()
            );
            print!("{line}");
            log.write_all(line.as_bytes()).map_err(|e| runtime_err(e))?;
        }
        if step % trainer.config.checkpoint_every == 0 || step == trainer.config.total_steps {
            let ckpt = trainer.checkpoint();
            io::save_checkpoint(&ckpt_path, &ckpt).map_err(|e| runtime_err(e))?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let line = format!("done steps={} elapsed_secs={elapsed:.1}\n", trainer.step);
    print!("{line}");
    log.write_all(line.as_bytes()).map_err(|e| runtime_err(e))?;
    Ok(())
}
