//! Finite-difference check of the world-model objective
//! `L_Recon + L_Task + L_Pred` against the tape gradients.

use hgwm::autodiff::{Tape, Var};
use hgwm::camera::{ring_rig, Camera};
use hgwm::image::{LabelImage, RgbImage};
use hgwm::losses::{pred_on_tape, recon_on_tape, task_on_tape, LossCounters};
use hgwm::models::{regress_gaussians, represent, DeformState, GaussianVars, Model, ModelConfig};
use hgwm::raster::{render_params, RasterConfig};
use hgwm::types::{BimanualAction, GaussianParams, Observation, ParamGroup, Proprio, RoleAssignment};
use hgwm::world_model::{propagate, render_on_tape, TransitionHooks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{blob_scene, random_action, randomize, rel_err, render_observation};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn gradient_config() -> ModelConfig {
    ModelConfig {
        grid: 10,
        feat: 8,
        conv_hidden: 4,
        mlp_hidden: 12,
        latents: 2,
        attn_dim: 4,
        attn_layers: 1,
        pool: 2,
        ..Default::default()
    }
}

pub struct GradScene {
    pub model: Model,
    pub obs: Observation,
    pub action: BimanualAction,
    pub cams: Vec<Camera>,
    pub view: usize,
    pub labels: LabelImage,
    pub future: Vec<RgbImage>,
}

pub fn grad_scene(seed: u64, image: usize) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(gradient_config(), seed).unwrap();
    randomize(&mut model, seed + 1, "leader.", 0.3);
    randomize(&mut model, seed + 2, "follower.", 0.3);
    let n = rng.gen_range(3..7);
    let gt = blob_scene(&mut rng, n);
    let cams = ring_rig(3, image, image).unwrap();
    let obs = render_observation(&gt, &cams, Proprio::default());
    let cfg = RasterConfig::default();
    let view = rng.gen_range(0..cams.len());
    let labels = render_params(&gt, &cams[view], &cfg).unwrap().label_image(0.5);
    let mut moved = gt.clone();
    for m in moved.mu.chunks_mut(3) {
        m[0] += 0.05;
    }
    let future = cams.iter().map(|c| render_params(&moved, c, &cfg).unwrap().rgb_image()).collect();
    let action = BimanualAction::from_arms(random_action(&mut rng), random_action(&mut rng), RoleAssignment::default());
    GradScene {
        model,
        obs,
        action,
        cams,
        view,
        labels,
        future,
    }
}

/// Builds the objective; with `theta` the regressor is bypassed and the
/// given Gaussians enter as leaves.
pub fn objective(tape: &mut Tape, s: &GradScene, model: &Model, theta: Option<&GaussianParams>) -> (Var, GaussianVars) {
    let cfg = RasterConfig::default();
    let v = represent(tape, model, &s.obs, false).unwrap();
    let g = match theta {
        Some(p) => GaussianVars::from_params(tape, p).unwrap(),
        None => regress_gaussians(tape, model, &v).unwrap(),
    };
    let (_, next, _) = propagate(tape, model, &DeformState::initial(g), &s.action, &v, &TransitionHooks::default()).unwrap();
    let cur = render_on_tape(tape, &g, &s.cams[s.view], &cfg).unwrap();
    let recon = recon_on_tape(tape, cur, &s.obs.views[s.view].rgb).unwrap();
    let task = task_on_tape(tape, cur, &s.labels, &mut LossCounters::default()).unwrap().unwrap();
    let fut: Vec<Var> = s.cams.iter().map(|c| render_on_tape(tape, &next.gaussians, c, &cfg).unwrap()).collect();
    let pred = pred_on_tape(tape, &fut, &s.future).unwrap();
    let a = tape.add(recon, task).unwrap();
    (tape.add(a, pred).unwrap(), g)
}

fn value(s: &GradScene, model: &Model, theta: Option<&GaussianParams>) -> f64 {
    let mut tape = Tape::new();
    let (l, _) = objective(&mut tape, s, model, theta);
    tape.data(l)[0]
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Worst relative error per Gaussian group, in `ParamGroup::ALL` order.
    pub group_worst: [f64; 6],
    pub network_worst: f64,
    pub network_checked: usize,
    pub gaussians_checked: usize,
    /// Description of the worst network entry.
    pub network_detail: String,
}

/// Checks every Gaussian parameter and a `fraction` of the world-model
/// network parameters.
pub fn check_scene(s: &GradScene, fraction: f64, seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let h = FD_STEP;

    // Gaussian groups, gradients taken at the regressor output
    let mut tape = Tape::new();
    let theta = {
        let v = represent(&mut tape, &s.model, &s.obs, false).unwrap();
        regress_gaussians(&mut tape, &s.model, &v).unwrap().to_params(&tape)
    };
    let mut tape = Tape::new();
    let (loss, g) = objective(&mut tape, s, &s.model, Some(&theta));
    let grads = tape.backward(loss).unwrap();
    report.gaussians_checked = theta.len();
    for (gi, grp) in ParamGroup::ALL.iter().enumerate() {
        let analytic = grads.wrt(g.group(*grp)).unwrap().to_vec();
        for idx in 0..theta.group(*grp).len() {
            let mut plus = theta.clone();
            plus.group_mut(*grp)[idx] += h;
            let mut minus = theta.clone();
            minus.group_mut(*grp)[idx] -= h;
            let num = (value(s, &s.model, Some(&plus)) - value(s, &s.model, Some(&minus))) / (2.0 * h);
            let e = rel_err(analytic[idx], num, REL_FLOOR);
            report.group_worst[gi] = report.group_worst[gi].max(e);
        }
    }

    // network parameters of the world-model path
    let mut tape = Tape::new();
    let (loss, _) = objective(&mut tape, s, &s.model, None);
    let pg = tape.backward(loss).unwrap().param_grads();
    let entries: Vec<(String, usize)> = s
        .model
        .params
        .iter()
        .filter(|(n, _)| !n.starts_with("policy."))
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.to_string(), i)))
        .collect();
    let count = ((entries.len() as f64 * fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, entries.len(), count);
    for k in picks {
        let (name, i) = &entries[k];
        let analytic = pg.get(name).map(|g| g[*i]).unwrap_or(0.0);
        let mut mp = s.model.clone();
        mp.params.get_mut(name).unwrap().data_mut()[*i] += h;
        let mut mm = s.model.clone();
        mm.params.get_mut(name).unwrap().data_mut()[*i] -= h;
        let num = (value(s, &mp, None) - value(s, &mm, None)) / (2.0 * h);
        let e = rel_err(analytic, num, REL_FLOOR);
        if e > report.network_worst {
            report.network_worst = e;
            report.network_detail = format!("{name}[{i}] analytic {analytic} numeric {num}");
        }
        report.network_checked += 1;
    }
    report
}
