//! Leader and follower deformation models.
//!
//! Both are shared per-Gaussian perceptrons emitting a position delta and a
//! rotation delta. The leader is conditioned on the stabilizing arm's action;
//! the follower sees the leader's output and both actions. Deltas accumulate
//! against the state they were first applied to, so after both stages
//! `μ' = μ + (Δμ_s + Δμ_a)` and `r' = normalize(r + (Δr_s + Δr_a))`.
//! Colour, scale, opacity and logits are passed through untouched.

use super::ops::{add_normalize_op, quat_mul_op, trilinear_op};
use super::regressor::GaussianVars;
use super::representation::VolumetricFeature;
use super::{init_mlp, mlp, Model, RotationUpdate};
use crate::action::action_features;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::ArmAction;

const ACTION_FEATURES: usize = 8;
const DEFORM_OUTPUTS: usize = 7;
/// Initial gain on the output layer so an untrained model starts close to
/// the identity transition.
const OUTPUT_GAIN: f64 = 0.1;

/// Overrides for the deltas a deformation model emits (test support).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformHook {
    pub delta_mu: Option<[f64; 3]>,
    pub delta_rot: Option<[f64; 4]>,
}

/// Propagated scene: current Gaussians plus the reference pose and the
/// deltas accumulated against it.
#[derive(Clone, Copy, Debug)]
pub struct DeformState {
    pub gaussians: GaussianVars,
    pub base_mu: Var,
    pub base_rot: Var,
    pub acc_mu: Option<Var>,
    pub acc_rot: Option<Var>,
}

impl DeformState {
    pub fn initial(g: GaussianVars) -> Self {
        Self {
            gaussians: g,
            base_mu: g.mu,
            base_rot: g.rot,
            acc_mu: None,
            acc_rot: None,
        }
    }
}

fn constant_rows(tape: &mut Tape, n: usize, row: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::matrix(n, row.len(), row.repeat(n))?))
}

fn deform(
    tape: &mut Tape,
    model: &Model,
    prefix: &str,
    state: &DeformState,
    action: &[f64],
    v: &VolumetricFeature,
    hook: &DeformHook,
) -> Result<DeformState> {
    let g = state.gaussians;
    let n = g.count;
    let act = constant_rows(tape, n, action)?;
    let feat = tape.custom(&trilinear_op(v.index.clone()), &[v.features, g.mu])?;
    let x = tape.concat_cols(&[g.mu, g.rot, g.logits, act, feat])?;
    let out = mlp(tape, &model.params, prefix, 2, x)?;
    let dmu = match hook.delta_mu {
        Some(d) => constant_rows(tape, n, &d)?,
        None => tape.slice_cols(out, 0, 3)?,
    };
    let drot = match hook.delta_rot {
        Some(d) => constant_rows(tape, n, &d)?,
        None => tape.slice_cols(out, 3, 7)?,
    };

    let acc_mu = match state.acc_mu {
        Some(a) => tape.add(a, dmu)?,
        None => dmu,
    };
    let mu = tape.add(state.base_mu, acc_mu)?;

    let (rot, base_rot, acc_rot) = match model.config.rotation_update {
        RotationUpdate::Additive => {
            let acc = match state.acc_rot {
                Some(a) => tape.add(a, drot)?,
                None => drot,
            };
            let rot = tape.custom(&add_normalize_op(), &[state.base_rot, acc])?;
            (rot, state.base_rot, Some(acc))
        }
        RotationUpdate::Compose => {
            let ident = constant_rows(tape, n, &[1.0, 0.0, 0.0, 0.0])?;
            let dq = tape.custom(&add_normalize_op(), &[ident, drot])?;
            let composed = tape.custom(&quat_mul_op(), &[dq, g.rot])?;
            let zero = constant_rows(tape, n, &[0.0; 4])?;
            let rot = tape.custom(&add_normalize_op(), &[composed, zero])?;
            (rot, rot, None)
        }
    };
    if tape.shape(mu)[0] != n || tape.shape(rot)[0] != n {
        return Err(Error::Invariant(format!("{prefix} changed the particle count")));
    }
    Ok(DeformState {
        gaussians: GaussianVars { mu, rot, ..g },
        base_mu: state.base_mu,
        base_rot,
        acc_mu: Some(acc_mu),
        acc_rot,
    })
}

/// Applies the stabilizing arm's deformation.
pub fn leader_deform(
    tape: &mut Tape,
    model: &Model,
    state: &DeformState,
    a_s: &ArmAction,
    v: &VolumetricFeature,
    hook: &DeformHook,
) -> Result<DeformState> {
    let act = action_features(a_s, &model.config.bounds);
    deform(tape, model, "leader", state, &act, v, hook)
}

/// Applies the acting arm's consequences on top of the leader output.
pub fn follower_deform(
    tape: &mut Tape,
    model: &Model,
    state_s: &DeformState,
    a_s: &ArmAction,
    a_a: &ArmAction,
    v: &VolumetricFeature,
    hook: &DeformHook,
) -> Result<DeformState> {
    let mut act = action_features(a_s, &model.config.bounds).to_vec();
    act.extend_from_slice(&action_features(a_a, &model.config.bounds));
    deform(tape, model, "follower", state_s, &act, v, hook)
}

pub(super) fn init_params(model: &mut Model, rng: &mut impl rand::Rng) {
    let cfg = model.config;
    let base = 3 + 4 + 3 + cfg.feat;
    let h = cfg.mlp_hidden;
    init_mlp(&mut model.params, "leader", &[base + ACTION_FEATURES, h, h, DEFORM_OUTPUTS], OUTPUT_GAIN, rng);
    init_mlp(&mut model.params, "follower", &[base + 2 * ACTION_FEATURES, h, h, DEFORM_OUTPUTS], OUTPUT_GAIN, rng);
}
