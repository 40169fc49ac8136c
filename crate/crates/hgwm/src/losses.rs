//! Training objectives: photometric reconstruction, task-mask
//! cross-entropy, future-frame prediction, behaviour cloning, and their
//! weighted total.
//!
//! Each loss has a plain version over images/slices and a tape version
//! producing a differentiable scalar; tests hold the two to each other.

use std::fmt;
use std::rc::Rc;

use crate::autodiff::{log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{LabelImage, RgbImage, IGNORE_LABEL};
use crate::models::{PolicyLogits, ARM_LOGITS, HEAD_SIZES};
use crate::raster::RASTER_OP_CHANNELS;
use crate::types::{Arm, BimanualAction, NUM_CLASSES};

/// Weights of the auxiliary losses; behaviour cloning has weight one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub task: f64,
    pub pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 0.1,
            task: 0.1,
            pred: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_recon", self.recon), ("lambda_task", self.task), ("lambda_pred", self.pred)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("loss weights", format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Values of the four losses at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub bc: f64,
    pub recon: f64,
    pub task: f64,
    pub pred: f64,
}

impl fmt::Display for LossComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bc={} recon={} task={} pred={}", self.bc, self.recon, self.task, self.pred)
    }
}

/// Counts task-loss evaluations in which every pixel was ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounters {
    pub all_ignored: u64,
}

fn check_dims(op: &'static str, a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::Shape {
            op,
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Sum over pixels of the squared RGB difference.
pub fn loss_recon(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_dims("loss_recon", pred, target)?;
    Ok(pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean over views of [`loss_recon`].
pub fn loss_pred(pred: &[RgbImage], target: &[RgbImage]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "loss_pred",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        total += loss_recon(p, t)?;
    }
    Ok(total / pred.len() as f64)
}

fn label_targets(labels: &LabelImage, pixels: usize) -> Result<Vec<Option<usize>>> {
    if labels.data.len() != pixels {
        return Err(Error::Shape {
            op: "loss_task",
            left: vec![pixels],
            right: vec![labels.data.len()],
        });
    }
    labels
        .data
        .iter()
        .map(|&l| match l {
            IGNORE_LABEL => Ok(None),
            l if (l as usize) < NUM_CLASSES => Ok(Some(l as usize)),
            l => Err(Error::invalid("task label", format!("{l} is neither a class nor the ignore label"))),
        })
        .collect()
}

/// Mean per-pixel softmax cross-entropy of an interleaved `H·W·3` logit
/// map against `labels`, ignoring [`IGNORE_LABEL`] pixels. Zero (and a
/// counter increment) when every pixel is ignored.
pub fn loss_task(logits: &[f64], labels: &LabelImage, counters: &mut LossCounters) -> Result<f64> {
    let pixels = logits.len() / NUM_CLASSES;
    if logits.len() != pixels * NUM_CLASSES {
        return Err(Error::Shape {
            op: "loss_task",
            left: vec![logits.len()],
            right: vec![NUM_CLASSES],
        });
    }
    let targets = label_targets(labels, pixels)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (p, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = &logits[NUM_CLASSES * p..NUM_CLASSES * (p + 1)];
            total += log_sum_exp(row) - row[*t];
            counted += 1;
        }
    }
    if counted == 0 {
        counters.all_ignored += 1;
        log::warn!("task loss: every pixel carries the ignore label");
        return Ok(0.0);
    }
    Ok(total / counted as f64)
}

/// Sum over both arms and all eight heads of the cross-entropy of
/// `logits` (`[2 · ARM_LOGITS]`, left arm first) against `gt`.
pub fn loss_bc(logits: &[f64], gt: &BimanualAction) -> Result<f64> {
    if logits.len() != 2 * ARM_LOGITS {
        return Err(Error::Shape {
            op: "loss_bc",
            left: vec![logits.len()],
            right: vec![2, ARM_LOGITS],
        });
    }
    let mut total = 0.0;
    for arm in Arm::BOTH {
        let row = &logits[arm.index() * ARM_LOGITS..(arm.index() + 1) * ARM_LOGITS];
        let targets = gt.arm(arm).head_targets();
        for (h, &t) in targets.iter().enumerate() {
            let (s, e) = PolicyLogits::head_range(h);
            if t >= HEAD_SIZES[h] {
                return Err(Error::invalid("bc target", format!("bin {t} outside head {h}")));
            }
            total += log_sum_exp(&row[s..e]) - row[s + t];
        }
    }
    Ok(total)
}

/// `bc + λ_recon·recon + λ_task·task + λ_pred·pred`.
pub fn loss_total(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("bc", c.bc), ("recon", c.recon), ("task", c.task), ("pred", c.pred)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss ({c})"),
            });
        }
    }
    Ok(c.bc + w.recon * c.recon + w.task * c.task + w.pred * c.pred)
}

fn check_render(tape: &Tape, rendered: Var, pixels: usize) -> Result<()> {
    if tape.shape(rendered) != [pixels, RASTER_OP_CHANNELS] {
        return Err(Error::Shape {
            op: "render loss",
            left: tape.shape(rendered).to_vec(),
            right: vec![pixels, RASTER_OP_CHANNELS],
        });
    }
    Ok(())
}

/// Tape version of [`loss_recon`] on a raster-op output.
pub fn recon_on_tape(tape: &mut Tape, rendered: Var, target: &RgbImage) -> Result<Var> {
    let pixels = target.width * target.height;
    check_render(tape, rendered, pixels)?;
    let rgb = tape.slice_cols(rendered, 0, 3)?;
    let t = tape.constant(Tensor::matrix(pixels, 3, target.data.clone())?);
    let diff = tape.sub(rgb, t)?;
    Ok(tape.sum_sq(diff))
}

/// Tape version of [`loss_pred`].
pub fn pred_on_tape(tape: &mut Tape, rendered: &[Var], targets: &[RgbImage]) -> Result<Var> {
    if rendered.len() != targets.len() || rendered.is_empty() {
        return Err(Error::Shape {
            op: "loss_pred",
            left: vec![rendered.len()],
            right: vec![targets.len()],
        });
    }
    let mut acc: Option<Var> = None;
    for (r, t) in rendered.iter().zip(targets) {
        let l = recon_on_tape(tape, *r, t)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / rendered.len() as f64))
}

/// Tape version of [`loss_task`]; returns `None` when every pixel is
/// ignored (the counter is incremented).
pub fn task_on_tape(tape: &mut Tape, rendered: Var, labels: &LabelImage, counters: &mut LossCounters) -> Result<Option<Var>> {
    let pixels = labels.width * labels.height;
    check_render(tape, rendered, pixels)?;
    let targets = label_targets(labels, pixels)?;
    let counted = targets.iter().filter(|t| t.is_some()).count();
    if counted == 0 {
        counters.all_ignored += 1;
        log::warn!("task loss: every pixel carries the ignore label");
        return Ok(None);
    }
    let logits = tape.slice_cols(rendered, 3, 3 + NUM_CLASSES)?;
    let ce = tape.cross_entropy_rows(logits, Rc::new(targets))?;
    Ok(Some(tape.scale(ce, 1.0 / counted as f64)))
}

/// Tape version of [`loss_bc`].
pub fn bc_on_tape(tape: &mut Tape, logits: &PolicyLogits, gt: &BimanualAction) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for arm in Arm::BOTH {
        let row = tape.slice_rows(logits.logits, arm.index(), arm.index() + 1)?;
        for (h, &t) in gt.arm(arm).head_targets().iter().enumerate() {
            let (s, e) = PolicyLogits::head_range(h);
            let head = tape.slice_cols(row, s, e)?;
            let ce = tape.cross_entropy_rows(head, Rc::new(vec![Some(t)]))?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
        }
    }
    Ok(acc.unwrap())
}

/// Weighted total on the tape. Components that are absent or carry a zero
/// weight are left out of the graph.
pub fn total_on_tape(
    tape: &mut Tape,
    bc: Option<Var>,
    recon: Option<Var>,
    task: Option<Var>,
    pred: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut acc = match bc {
        Some(b) => b,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for (v, lambda) in [(recon, w.recon), (task, w.task), (pred, w.pred)] {
        if let (Some(v), true) = (v, lambda != 0.0) {
            let s = tape.scale(v, lambda);
            acc = tape.add(acc, s)?;
        }
    }
    Ok(acc)
}
