//! Training loop, checkpoints and evaluation.
//!
//! A run draws, at step `k`, a batch from RNG stream `k` of the configured
//! seed, so a run is a pure function of its config and resuming from any
//! checkpoint continues the exact same sequence. The metrics log holds one
//! line for the initial evaluation and one per step, with the columns
//! [`METRICS_COLUMNS`].

mod config;
mod eval;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{OptimizerKind, TrainConfig, CONFIG_KEYS};
pub use eval::{evaluate, label_logits, EvalReport, FrameMaps, GroundTruthPredictor, ModelPredictor, Prediction, Predictor};
pub use optim::Optimizer;

use crate::autodiff::{Archive, Tape};
use crate::error::{Error, Result};
use crate::io::read_dataset;
use crate::losses::{bc_on_tape, pred_on_tape, recon_on_tape, task_on_tape, total_on_tape, LossComponents, LossCounters, LossWeights};
use crate::models::{decode_actions, Model};
use crate::raster::RasterConfig;
use crate::types::DemoTrajectory;
use crate::world_model::{render_on_tape, transition, TransitionHooks};

pub const METRICS_COLUMNS: &str = "step,l_bc,l_recon,l_task,l_pred,total,wall";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Written when training halts on a non-finite loss.
pub const LAST_GOOD: &str = "last_good.ckpt";

/// One training transition: demo index and step index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub demo: usize,
    pub step: usize,
}

pub fn transition_samples(demos: &[DemoTrajectory]) -> Vec<Sample> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(d, demo)| demo.transition_steps().map(move |step| Sample { demo: d, step }))
        .collect()
}

/// Parameter names that a run with frozen deformation never updates.
pub fn is_deformation_param(name: &str) -> bool {
    name.starts_with("leader.") || name.starts_with("follower.")
}

/// Loss of one sample with `view` as the supervision view for the
/// reconstruction and task terms; gradients are returned when requested.
pub fn sample_loss(
    model: &Model,
    demo: &DemoTrajectory,
    step: usize,
    view: usize,
    weights: &LossWeights,
    raster: &RasterConfig,
    counters: &mut LossCounters,
    with_grad: bool,
) -> Result<(LossComponents, Option<BTreeMap<String, Vec<f64>>>)> {
    let s = &demo.steps[step];
    let future = s
        .next_rgb
        .as_ref()
        .ok_or_else(|| Error::invalid("training sample", format!("step {step} has no next frame")))?;
    let mut tape = Tape::new();
    let tr = transition(&mut tape, model, &s.observation, &s.action, &TransitionHooks::default())?;
    let cams = s.observation.cameras();
    let cur = render_on_tape(&mut tape, &tr.theta_t, &cams[view], raster)?;
    let recon = recon_on_tape(&mut tape, cur, &s.observation.views[view].rgb)?;
    let task = task_on_tape(&mut tape, cur, &s.labels[view], counters)?;
    let fut = cams
        .iter()
        .map(|c| render_on_tape(&mut tape, &tr.theta_t1.gaussians, c, raster))
        .collect::<Result<Vec<_>>>()?;
    let pred = pred_on_tape(&mut tape, &fut, future)?;
    let logits = decode_actions(&mut tape, model, &tr.features, &demo.language)?;
    let bc = bc_on_tape(&mut tape, &logits, &s.action)?;
    let total = total_on_tape(&mut tape, Some(bc), Some(recon), task, Some(pred), weights)?;
    let item = |v| tape.value(v).item().unwrap_or(f64::NAN);
    let comps = LossComponents {
        bc: item(bc),
        recon: item(recon),
        task: task.map(item).unwrap_or(0.0),
        pred: item(pred),
    };
    let grads = if with_grad {
        Some(tape.backward(total)?.param_grads())
    } else {
        None
    };
    Ok((comps, grads))
}

fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::EmptyScene | Error::DegenerateObservation)
}

/// Model, optimizer and step counter plus the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: usize,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        self.optimizer.write_into(&mut a);
        a.meta.insert("train.step".into(), self.step.to_string());
        for (k, v) in self.config.to_kv() {
            a.meta.insert(format!("config.{k}"), v);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let model = Model::from_archive(a, None)?;
        let optimizer = Optimizer::read_from(a)?;
        let step = a
            .meta
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Manifest("checkpoint lacks train.step".into()))?;
        let cfg: BTreeMap<String, String> = a
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = TrainConfig::from_kv(&cfg)?;
        Ok(Self {
            model,
            optimizer,
            step,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Loads only the model of a checkpoint, rejecting it when its manifest
/// differs from `expected`.
pub fn load_model(path: &Path, expected: Option<&crate::models::ModelConfig>) -> Result<Model> {
    Model::from_archive(&Archive::read(path)?, expected)
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_done: usize,
    /// Metrics-log values of the initial evaluation.
    pub initial: LossComponents,
    /// Batch losses of the last step, or the initial values for 0 steps.
    pub last: LossComponents,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_samples: u64,
    pub counters: LossCounters,
}

fn metrics_line(step: usize, c: &LossComponents, total: f64, wall: Option<f64>) -> String {
    let wall = wall.map(|w| format!("{w:.3}")).unwrap_or_else(|| "-".into());
    format!(
        "{step},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{wall}\n",
        c.bc, c.recon, c.task, c.pred, total
    )
}

fn check_dataset(cfg: &TrainConfig, demos: &[DemoTrajectory]) -> Result<()> {
    if demos.is_empty() {
        return Err(Error::invalid("dataset", "no demos"));
    }
    for (d, demo) in demos.iter().enumerate() {
        for view in &demo.steps[0].observation.views {
            let cam = &view.camera;
            if cam.width() != cfg.image_size || cam.height() != cfg.image_size {
                return Err(Error::invalid(
                    "dataset",
                    format!("demo {d} has {}x{} images, config expects {}", cam.width(), cam.height(), cfg.image_size),
                ));
            }
        }
        let views = demo.steps[0].observation.views.len();
        if views != cfg.cameras {
            return Err(Error::invalid("dataset", format!("demo {d} has {views} cameras, config expects {}", cfg.cameras)));
        }
    }
    if transition_samples(demos).is_empty() {
        return Err(Error::invalid("dataset", "no transitions"));
    }
    Ok(())
}

/// Mean loss components over every transition, used as the step-0 line.
pub fn dataset_losses(model: &Model, demos: &[DemoTrajectory], weights: &LossWeights, raster: &RasterConfig) -> Result<(LossComponents, f64)> {
    let mut sum = LossComponents::default();
    let mut n = 0usize;
    let mut counters = LossCounters::default();
    for s in transition_samples(demos) {
        let views = demos[s.demo].steps[s.step].observation.views.len();
        for v in 0..views {
            match sample_loss(model, &demos[s.demo], s.step, v, weights, raster, &mut counters, false) {
                Ok((c, _)) => {
                    sum.bc += c.bc;
                    sum.recon += c.recon;
                    sum.task += c.task;
                    sum.pred += c.pred;
                    n += 1;
                }
                Err(e) if is_skippable(&e) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let n = n.max(1) as f64;
    let mean = LossComponents {
        bc: sum.bc / n,
        recon: sum.recon / n,
        task: sum.task / n,
        pred: sum.pred / n,
    };
    let total = crate::losses::loss_total(&mean, weights)?;
    Ok((mean, total))
}

/// The batch of step `step`: sample indices and one supervision view each.
pub fn batch_for_step(cfg: &TrainConfig, step: usize, samples: usize, views: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let picks: Vec<usize> = if cfg.batch <= samples {
        sample_indices(&mut rng, samples, cfg.batch).into_vec()
    } else {
        (0..cfg.batch).map(|_| rng.gen_range(0..samples)).collect()
    };
    picks.into_iter().map(|i| (i, rng.gen_range(0..views))).collect()
}

/// Trains from scratch, or from `resume` when given. The dataset is read
/// from `cfg.dataset`.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let demos = read_dataset(&cfg.dataset)?;
    train_on(cfg, &demos, resume)
}

pub fn train_on(cfg: &TrainConfig, demos: &[DemoTrajectory], resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    check_dataset(cfg, demos)?;
    let raster = RasterConfig::default();
    let samples = transition_samples(demos);
    let views = cfg.cameras;
    let ckpt_dir = cfg.out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = cfg.out.join(METRICS_FILE);

    let (mut model, mut opt, start) = match resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            if ck.model.config.manifest() != cfg.model.manifest() {
                return Err(Error::Manifest(format!(
                    "checkpoint model {:?} differs from config {:?}",
                    ck.model.config, cfg.model
                )));
            }
            (ck.model, ck.optimizer, ck.step)
        }
        None => {
            let mut m = Model::new(cfg.model, cfg.seed)?;
            if cfg.freeze_deformation {
                m.zero_deformation_heads();
            }
            (m, Optimizer::new(cfg.optimizer, cfg.lr), 0)
        }
    };

    let mut checkpoints = Vec::new();
    let save = |model: &Model, opt: &Optimizer, step: usize, path: &Path| -> Result<()> {
        Checkpoint {
            model: model.clone(),
            optimizer: opt.clone(),
            step,
            config: cfg.clone(),
        }
        .write(path)
    };

    let (initial, initial_total) = dataset_losses(&model, demos, &cfg.weights, &raster)?;
    let mut log = if resume.is_some() {
        // keep lines 0..=start so the resumed log matches an uninterrupted one
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let kept: String = text.lines().take(start + 1).map(|l| format!("{l}\n")).collect();
        fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    } else {
        let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        if !(initial_total.is_finite()) {
            return Err(Error::NonFinite {
                what: "initial loss".into(),
            });
        }
        f.write_all(metrics_line(0, &initial, initial_total, cfg.log_wall.then_some(0.0)).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        let p = checkpoint_path(&cfg.out, 0);
        save(&model, &opt, 0, &p)?;
        checkpoints.push(p);
        f
    };

    let clock = Instant::now();
    let mut last = initial;
    let mut skipped = 0u64;
    let mut counters = LossCounters::default();
    for step in start + 1..=cfg.steps {
        let batch = batch_for_step(cfg, step, samples.len(), views);
        let mut sum = LossComponents::default();
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut used = 0usize;
        for (i, view) in batch {
            let s = samples[i];
            match sample_loss(&model, &demos[s.demo], s.step, view, &cfg.weights, &raster, &mut counters, true) {
                Ok((c, Some(g))) => {
                    sum.bc += c.bc;
                    sum.recon += c.recon;
                    sum.task += c.task;
                    sum.pred += c.pred;
                    for (name, gi) in g {
                        match grads.get_mut(&name) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(name, gi);
                            }
                        }
                    }
                    used += 1;
                }
                Ok((_, None)) => unreachable!("gradients were requested"),
                Err(e) if is_skippable(&e) => {
                    skipped += 1;
                    log::warn!("step {step}: skipping sample {s:?}: {e}");
                }
                Err(Error::NonFinite { what }) => {
                    let p = cfg.out.join(LAST_GOOD);
                    save(&model, &opt, step - 1, &p)?;
                    return Err(Error::NonFinite {
                        what: format!("{what} at step {step} (last good checkpoint: {})", p.display()),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let n = used.max(1) as f64;
        let comps = LossComponents {
            bc: sum.bc / n,
            recon: sum.recon / n,
            task: sum.task / n,
            pred: sum.pred / n,
        };
        let total = crate::losses::loss_total(&comps, &cfg.weights).unwrap_or(f64::NAN);
        let grads_finite = grads.values().all(|g| g.iter().all(|v| v.is_finite()));
        if !total.is_finite() || !grads_finite {
            let p = cfg.out.join(LAST_GOOD);
            save(&model, &opt, step - 1, &p)?;
            return Err(Error::NonFinite {
                what: format!("loss at step {step} (last good checkpoint: {})", p.display()),
            });
        }
        if cfg.freeze_deformation {
            grads.retain(|name, _| !is_deformation_param(name));
        }
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v /= n);
        }
        let before = model.params.clone();
        if used > 0 {
            opt.step(&mut model.params, &grads)?;
        }
        if !model.params.all_finite() {
            model.params = before;
            let p = cfg.out.join(LAST_GOOD);
            save(&model, &opt, step - 1, &p)?;
            return Err(Error::NonFinite {
                what: format!("parameters after step {step} (last good checkpoint: {})", p.display()),
            });
        }
        let wall = cfg.log_wall.then(|| clock.elapsed().as_secs_f64());
        log.write_all(metrics_line(step, &comps, total, wall).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        last = comps;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let report = evaluate(&ModelPredictor { model: &model, raster }, demos, &cfg.weights)?;
            let p = cfg.out.join(format!("eval_step_{step:06}.kv"));
            fs::write(&p, report.to_text()).map_err(|e| Error::io(&p, e))?;
            log::info!(
                "step {step}: total {:.4} pred {:.3} psnr {:.2} mask {:.3}",
                report.total,
                report.losses.pred,
                report.psnr,
                report.mask_accuracy
            );
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let p = checkpoint_path(&cfg.out, step);
            save(&model, &opt, step, &p)?;
            checkpoints.push(p);
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainSummary {
        steps_done: cfg.steps.max(start),
        initial,
        last,
        checkpoints,
        skipped_samples: skipped,
        counters,
    })
}
