//! End-to-end transition: observation → volumetric features → Gaussians →
//! leader (stabilizing arm) → follower (acting arm) → renders.

use crate::autodiff::{Tape, Var};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::models::{
    follower_deform, leader_deform, regress_gaussians, represent, DeformHook, DeformState, GaussianVars, Model,
    VolumetricFeature,
};
use crate::raster::{raster_op, render_params, RasterConfig, RenderOutput};
use crate::types::{ArmAction, BimanualAction, GaussianSet, Observation};

/// Which arm actions reached which deformation model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionRouting {
    pub leader: ArmAction,
    pub follower_stabilizing: ArmAction,
    pub follower_acting: ArmAction,
}

/// Test overrides for both deformation stages.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransitionHooks {
    pub leader: DeformHook,
    pub follower: DeformHook,
}

/// One transition recorded on a tape.
#[derive(Clone, Debug)]
pub struct Transition {
    pub features: VolumetricFeature,
    pub theta_t: GaussianVars,
    pub theta_s: DeformState,
    pub theta_t1: DeformState,
    pub routing: ActionRouting,
}

/// Applies leader then follower to `state`.
pub fn propagate(
    tape: &mut Tape,
    model: &Model,
    state: &DeformState,
    action: &BimanualAction,
    v: &VolumetricFeature,
    hooks: &TransitionHooks,
) -> Result<(DeformState, DeformState, ActionRouting)> {
    let (a_s, a_a) = (action.stabilizing, action.acting);
    let theta_s = leader_deform(tape, model, state, &a_s, v, &hooks.leader)?;
    let theta_t1 = follower_deform(tape, model, &theta_s, &a_s, &a_a, v, &hooks.follower)?;
    if theta_t1.gaussians.count != state.gaussians.count {
        return Err(Error::Invariant("transition changed the particle count".into()));
    }
    let routing = ActionRouting {
        leader: a_s,
        follower_stabilizing: a_s,
        follower_acting: a_a,
    };
    Ok((theta_s, theta_t1, routing))
}

/// Records `v`, `θ_t`, the leader output and `θ_{t+1}` on `tape`.
pub fn transition(
    tape: &mut Tape,
    model: &Model,
    obs: &Observation,
    action: &BimanualAction,
    hooks: &TransitionHooks,
) -> Result<Transition> {
    let features = represent(tape, model, obs, false)?;
    let theta_t = regress_gaussians(tape, model, &features)?;
    let (theta_s, theta_t1, routing) = propagate(tape, model, &DeformState::initial(theta_t), action, &features, hooks)?;
    Ok(Transition {
        features,
        theta_t,
        theta_s,
        theta_t1,
        routing,
    })
}

/// Differentiable render of tape-resident Gaussians: `[H·W, 6]`, RGB then
/// instance logits.
pub fn render_on_tape(tape: &mut Tape, g: &GaussianVars, cam: &Camera, cfg: &RasterConfig) -> Result<Var> {
    tape.custom(&raster_op(cam, cfg), &g.raster_inputs())
}

/// Renders and Gaussian sets before and after one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub current_render: Vec<RenderOutput>,
    pub future_render: Vec<RenderOutput>,
    pub theta_t: GaussianSet,
    pub theta_t1: GaussianSet,
    pub routing: ActionRouting,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredictOptions {
    pub raster: RasterConfig,
    pub hooks: TransitionHooks,
}

fn render_all(set: &GaussianSet, cams: &[Camera], cfg: &RasterConfig) -> Result<Vec<RenderOutput>> {
    let p = set.to_params();
    cams.iter().map(|c| render_params(&p, c, cfg)).collect()
}

/// Single-step future prediction rendered on `cams`.
pub fn predict_step(
    model: &Model,
    obs: &Observation,
    action: &BimanualAction,
    cams: &[Camera],
    opts: &PredictOptions,
) -> Result<PredictionBundle> {
    let mut bundles = rollout(model, obs, std::slice::from_ref(action), cams, opts)?;
    Ok(bundles.remove(0))
}

/// Re-applies the transition to its own output for each action, keeping the
/// features of the original observation.
pub fn rollout(
    model: &Model,
    obs: &Observation,
    actions: &[BimanualAction],
    cams: &[Camera],
    opts: &PredictOptions,
) -> Result<Vec<PredictionBundle>> {
    if actions.is_empty() {
        return Err(Error::invalid("rollout", "no actions given"));
    }
    let t0 = obs.proprio.time_index as u64;
    let mut tape = Tape::new();
    let v = represent(&mut tape, model, obs, false)?;
    let theta0 = regress_gaussians(&mut tape, model, &v)?;
    let mut state = DeformState::initial(theta0);
    let mut current = theta0.to_set(&tape, t0)?;
    let mut current_render = render_all(&current, cams, &opts.raster)?;
    let mut out = Vec::with_capacity(actions.len());
    for (k, action) in actions.iter().enumerate() {
        let (_, next, routing) = propagate(&mut tape, model, &state, action, &v, &opts.hooks)?;
        let theta_t1 = next.gaussians.to_set(&tape, t0 + k as u64 + 1)?;
        let future_render = render_all(&theta_t1, cams, &opts.raster)?;
        out.push(PredictionBundle {
            current_render,
            future_render: future_render.clone(),
            theta_t: current,
            theta_t1: theta_t1.clone(),
            routing,
        });
        state = next;
        current = theta_t1;
        current_render = future_render;
    }
    Ok(out)
}
