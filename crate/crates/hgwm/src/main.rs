use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hgwm::camera::ring_rig;
use hgwm::error::{Error, Result};
use hgwm::io::{read_dataset, read_demo, read_scene};
use hgwm::raster::{render, RasterConfig};
use hgwm::synth::{generate_demos, GenConfig, TaskId};
use hgwm::trainer::{evaluate, load_model, train, ModelPredictor, TrainConfig, CONFIG_KEYS, METRICS_COLUMNS};
use hgwm::world_model::{predict_step, PredictOptions};

const TRAIN_HELP: &str = "\
Metrics log (<out>/metrics.csv), one line per step plus the initial evaluation as line 0, columns:
  step,l_bc,l_recon,l_task,l_pred,total,wall
wall is '-' unless log_wall = true. Runs are single-worker and bit-reproducible for a fixed config and seed.";

#[derive(Parser, Debug)]
#[command(name = "hgwm", version, about = "Gaussian world model for two-arm manipulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scripted demonstrations in the synthetic world.
    Gen(GenArgs),
    /// Train a model on a dataset.
    #[command(after_help = TRAIN_HELP)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render a scene file from one camera of the default rig.
    Render(RenderArgs),
    /// Write current and predicted next frames for one demo step.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// push-box, lift-tray-two-handed or handover-item
    #[arg(long)]
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    cameras: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set lr=0.003` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Reject the checkpoint unless its model matches this config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    camera: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the argmax label map.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    cameras: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    demo: PathBuf,
    #[arg(long)]
    step: usize,
    #[arg(long)]
    out: PathBuf,
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            TrainConfig::from_text(&text, p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Invalid {
                what: "override",
                detail: format!("`{o}` is not KEY=VALUE (keys: {})", CONFIG_KEYS.join(", ")),
            })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let task: TaskId = a.task.parse()?;
            let cfg = GenConfig {
                views: a.cameras,
                width: a.size,
                height: a.size,
                ..GenConfig::default()
            };
            let lengths = generate_demos(task, a.n, a.seed, &cfg, &a.out)?;
            println!("wrote {} {task} demos to {} (steps: {lengths:?})", a.n, a.out.display());
        }
        Command::Train(a) => {
            let cfg = train_config(&a)?;
            fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
                path: cfg.out.clone(),
                source: e,
            })?;
            let cfg_path = cfg.out.join("config.kv");
            fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
            let s = train(&cfg, a.resume.as_deref())?;
            println!("{METRICS_COLUMNS}");
            println!("initial {}", s.initial);
            println!("last    {}", s.last);
            if let Some(p) = s.checkpoints.last() {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval(a) => {
            let expected = match &a.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    Some(TrainConfig::from_text(&text, p)?.model)
                }
                None => None,
            };
            let model = load_model(&a.checkpoint, expected.as_ref())?;
            let demos = read_dataset(&a.dataset)?;
            let predictor = ModelPredictor {
                model: &model,
                raster: RasterConfig::default(),
            };
            let report = evaluate(&predictor, &demos, &Default::default())?;
            print!("{}", report.to_text());
            if let Some(p) = &a.out {
                fs::write(p, report.to_text()).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
        }
        Command::Render(a) => {
            let set = read_scene(&a.scene)?;
            let cams = ring_rig(a.cameras, a.size, a.size)?;
            let cam = cams.get(a.camera).ok_or_else(|| Error::Invalid {
                what: "camera",
                detail: format!("index {} but the rig has {} cameras", a.camera, cams.len()),
            })?;
            let out = render(&set, cam, &RasterConfig::default())?;
            out.rgb_image().write_ppm(&a.out)?;
            if let Some(l) = &a.labels {
                out.label_image(0.0).write_pgm(l)?;
            }
        }
        Command::Predict(a) => predict_cmd(&a)?,
    }
    Ok(())
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let demo = read_demo(&a.demo)?;
    let step = demo.steps.get(a.step).ok_or_else(|| Error::Invalid {
        what: "step",
        detail: format!("{} but the demo has {} steps", a.step, demo.steps.len()),
    })?;
    let cams = step.observation.cameras();
    let bundle = predict_step(&model, &step.observation, &step.action, &cams, &PredictOptions::default())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let write = |name: String, r: &hgwm::raster::RenderOutput| -> Result<()> {
        r.rgb_image().write_ppm(&a.out.join(format!("{name}.ppm")))?;
        r.label_image(0.5).write_pgm(&a.out.join(format!("{name}.labels.pgm")))
    };
    for (v, (cur, fut)) in bundle.current_render.iter().zip(&bundle.future_render).enumerate() {
        write(format!("current_view_{v}"), cur)?;
        write(format!("future_view_{v}"), fut)?;
    }
    println!("wrote {} views to {}", cams.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
