use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::{LabelImage, RgbImage, IGNORE_LABEL};
use crate::io::{format_kv, parse_kv, KvReader};
use crate::losses::{loss_bc, loss_pred, loss_recon, loss_task, loss_total, LossComponents, LossCounters, LossWeights};
use crate::models::{argmax_action, decode_actions, Model, ARM_LOGITS};
use crate::raster::{argmax, render_params, RasterConfig, RenderOutput};
use crate::types::{Arm, DemoTrajectory};
use crate::world_model::{transition, TransitionHooks};

/// Colour and instance-logit maps of one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMaps {
    pub rgb: RgbImage,
    /// Interleaved logits, `H*W*3`.
    pub logits: Vec<f64>,
}

impl From<&RenderOutput> for FrameMaps {
    fn from(r: &RenderOutput) -> Self {
        Self {
            rgb: r.rgb_image(),
            logits: r.logits.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub current: Vec<FrameMaps>,
    pub future: Vec<FrameMaps>,
    /// `2 * ARM_LOGITS` action logits, left arm first.
    pub action_logits: Vec<f64>,
}

/// Anything that can predict the current and next frame of a demo step.
pub trait Predictor {
    fn predict(&self, demo: &DemoTrajectory, step: usize) -> Result<Prediction>;
}

/// Reads the answers out of the dataset; an upper bound for every metric.
pub struct GroundTruthPredictor;

/// One-hot logits of a label map, zero where ignored.
pub fn label_logits(labels: &LabelImage, magnitude: f64) -> Vec<f64> {
    let mut out = vec![0.0; labels.data.len() * 3];
    for (p, &l) in labels.data.iter().enumerate() {
        if l != IGNORE_LABEL {
            out[3 * p + l as usize] = magnitude;
        }
    }
    out
}

impl Predictor for GroundTruthPredictor {
    fn predict(&self, demo: &DemoTrajectory, step: usize) -> Result<Prediction> {
        let cur = &demo.steps[step];
        let next = demo
            .steps
            .get(step + 1)
            .ok_or_else(|| Error::invalid("prediction step", format!("step {step} has no successor")))?;
        let maps = |rgbs: Vec<&RgbImage>, labels: &[LabelImage]| -> Vec<FrameMaps> {
            rgbs.into_iter()
                .zip(labels)
                .map(|(rgb, l)| FrameMaps {
                    rgb: rgb.clone(),
                    logits: label_logits(l, 50.0),
                })
                .collect()
        };
        let mut action_logits = vec![0.0; 2 * ARM_LOGITS];
        for arm in Arm::BOTH {
            let row = &mut action_logits[arm.index() * ARM_LOGITS..(arm.index() + 1) * ARM_LOGITS];
            let mut start = 0;
            for (h, &t) in cur.action.arm(arm).head_targets().iter().enumerate() {
                row[start + t] = 50.0;
                start += crate::models::HEAD_SIZES[h];
            }
        }
        Ok(Prediction {
            current: maps(cur.observation.views.iter().map(|v| &v.rgb).collect(), &cur.labels),
            future: maps(next.observation.views.iter().map(|v| &v.rgb).collect(), &next.labels),
            action_logits,
        })
    }
}

/// Runs the learned world model and policy head.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub raster: RasterConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, demo: &DemoTrajectory, step: usize) -> Result<Prediction> {
        let s = &demo.steps[step];
        let mut tape = Tape::new();
        let tr = transition(&mut tape, self.model, &s.observation, &s.action, &TransitionHooks::default())?;
        let logits = decode_actions(&mut tape, self.model, &tr.features, &demo.language)?;
        let cur = tr.theta_t.to_params(&tape);
        let fut = tr.theta_t1.gaussians.to_params(&tape);
        let mut current = Vec::new();
        let mut future = Vec::new();
        for view in &s.observation.views {
            current.push(FrameMaps::from(&render_params(&cur, &view.camera, &self.raster)?));
            future.push(FrameMaps::from(&render_params(&fut, &view.camera, &self.raster)?));
        }
        Ok(Prediction {
            current,
            future,
            action_logits: tape.data(logits.logits).to_vec(),
        })
    }
}

/// Aggregate metrics over a set of demo transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean loss components; recon and task are averaged over views.
    pub losses: LossComponents,
    pub total: f64,
    /// PSNR of predicted future frames over every pixel of every view.
    pub psnr: f64,
    /// Set when the future frames match exactly (`psnr` is then infinite).
    pub psnr_infinite: bool,
    /// Pixel accuracy of the current label maps on non-ignored pixels.
    pub mask_accuracy: f64,
    /// Same for the predicted next-step label maps.
    pub future_mask_accuracy: f64,
    /// Argmax accuracy of each of the 16 heads, left arm first.
    pub head_accuracy: Vec<f64>,
    /// Mean absolute translation bin error per axis decision.
    pub trans_bin_distance: f64,
    /// Samples whose task loss had no counted pixel.
    pub all_ignored: u64,
}

impl EvalReport {
    /// Accuracy pooled over heads `[h0, h1)` of both arms.
    pub fn family_accuracy(&self, h0: usize, h1: usize) -> f64 {
        let idx: Vec<usize> = (h0..h1).chain(8 + h0..8 + h1).collect();
        idx.iter().map(|&i| self.head_accuracy[i]).sum::<f64>() / idx.len() as f64
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("samples", self.samples.to_string());
        put("loss.bc", format!("{:?}", self.losses.bc));
        put("loss.recon", format!("{:?}", self.losses.recon));
        put("loss.task", format!("{:?}", self.losses.task));
        put("loss.pred", format!("{:?}", self.losses.pred));
        put("loss.total", format!("{:?}", self.total));
        put("psnr", format!("{:?}", self.psnr));
        put("psnr_infinite", self.psnr_infinite.to_string());
        put("mask_accuracy", format!("{:?}", self.mask_accuracy));
        put("future_mask_accuracy", format!("{:?}", self.future_mask_accuracy));
        put(
            "head_accuracy",
            self.head_accuracy.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","),
        );
        put("trans_bin_distance", format!("{:?}", self.trans_bin_distance));
        put("all_ignored", self.all_ignored.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.to_kv())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let path = Path::new("<report>");
        let map = parse_kv(text, path)?;
        let kv = KvReader { map: &map, path };
        let flag = kv.str("psnr_infinite")?;
        Ok(Self {
            samples: kv.parse("samples")?,
            losses: LossComponents {
                bc: kv.parse("loss.bc")?,
                recon: kv.parse("loss.recon")?,
                task: kv.parse("loss.task")?,
                pred: kv.parse("loss.pred")?,
            },
            total: kv.parse("loss.total")?,
            psnr: kv.parse("psnr")?,
            psnr_infinite: match flag {
                "true" => true,
                "false" => false,
                _ => return Err(Error::parse(path, format!("bad psnr_infinite `{flag}`"))),
            },
            mask_accuracy: kv.parse("mask_accuracy")?,
            future_mask_accuracy: kv.parse("future_mask_accuracy")?,
            head_accuracy: kv.list("head_accuracy")?,
            trans_bin_distance: kv.parse("trans_bin_distance")?,
            all_ignored: kv.parse("all_ignored")?,
        })
    }
}

/// Correct and counted pixels of logit maps against labels.
fn mask_hits(logits: &[f64], labels: &LabelImage) -> (u64, u64) {
    let mut hit = 0;
    let mut n = 0;
    for (p, &l) in labels.data.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        n += 1;
        if argmax(&logits[3 * p..3 * p + 3]) == l as usize {
            hit += 1;
        }
    }
    (hit, n)
}

/// Evaluates every transition (step with a successor) of `demos`.
pub fn evaluate(predictor: &dyn Predictor, demos: &[DemoTrajectory], weights: &LossWeights) -> Result<EvalReport> {
    let mut sums = LossComponents::default();
    let mut counters = LossCounters::default();
    let (mut sq, mut values) = (0.0f64, 0u64);
    let (mut mh, mut mn, mut fh, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut head_hits = [0u64; 16];
    let mut trans_dist = 0.0;
    let mut samples = 0usize;
    for demo in demos {
        for k in demo.transition_steps().collect::<Vec<_>>() {
            let pred = predictor.predict(demo, k)?;
            let s = &demo.steps[k];
            let next = &demo.steps[k + 1];
            let views = s.observation.views.len();
            if pred.current.len() != views || pred.future.len() != views {
                return Err(Error::invalid("prediction", "view count differs from the observation"));
            }
            let mut recon = 0.0;
            let mut task = 0.0;
            for v in 0..views {
                recon += loss_recon(&pred.current[v].rgb, &s.observation.views[v].rgb)?;
                task += loss_task(&pred.current[v].logits, &s.labels[v], &mut counters)?;
                let (h, n) = mask_hits(&pred.current[v].logits, &s.labels[v]);
                mh += h;
                mn += n;
                let (h, n) = mask_hits(&pred.future[v].logits, &next.labels[v]);
                fh += h;
                fn_ += n;
            }
            let fut: Vec<RgbImage> = pred.future.iter().map(|f| f.rgb.clone()).collect();
            let target = s.next_rgb.as_ref().expect("transition step has a next frame");
            for (a, b) in fut.iter().zip(target) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    sq += (x - y) * (x - y);
                }
                values += a.data.len() as u64;
            }
            sums.recon += recon / views as f64;
            sums.task += task / views as f64;
            sums.pred += loss_pred(&fut, target)?;
            sums.bc += loss_bc(&pred.action_logits, &s.action)?;
            for arm in Arm::BOTH {
                let row = &pred.action_logits[arm.index() * ARM_LOGITS..(arm.index() + 1) * ARM_LOGITS];
                let got = argmax_action(row)?.head_targets();
                let want = s.action.arm(arm).head_targets();
                for h in 0..8 {
                    if got[h] == want[h] {
                        head_hits[arm.index() * 8 + h] += 1;
                    }
                }
                for a in 0..3 {
                    trans_dist += (got[a] as f64 - want[a] as f64).abs();
                }
            }
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::invalid("evaluation", "no transitions to evaluate"));
    }
    let n = samples as f64;
    let losses = LossComponents {
        bc: sums.bc / n,
        recon: sums.recon / n,
        task: sums.task / n,
        pred: sums.pred / n,
    };
    let mse = sq / values.max(1) as f64;
    let ratio = |h: u64, c: u64| if c == 0 { 0.0 } else { h as f64 / c as f64 };
    Ok(EvalReport {
        samples,
        total: loss_total(&losses, weights)?,
        losses,
        psnr: if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() },
        psnr_infinite: mse == 0.0,
        mask_accuracy: ratio(mh, mn),
        future_mask_accuracy: ratio(fh, fn_),
        head_accuracy: head_hits.iter().map(|&h| h as f64 / n).collect(),
        trans_bin_distance: trans_dist / (6.0 * n),
        all_ignored: counters.all_ignored,
    })
}
