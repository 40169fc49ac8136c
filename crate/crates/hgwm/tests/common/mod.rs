#![allow(dead_code)]

use hgwm::camera::Camera;
use hgwm::geometry::Vec3;
use hgwm::image::DepthImage;
use hgwm::raster::{render_params, RasterConfig};
use hgwm::types::{GaussianParams, Observation, ParamGroup, Proprio, View};
use rand::Rng;

/// Random unconstrained Gaussian parameters clustered around the origin.
pub fn random_params(rng: &mut impl Rng, n: usize) -> GaussianParams {
    let mut p = GaussianParams::with_capacity(n);
    for _ in 0..n {
        for _ in 0..3 {
            p.mu.push(rng.gen_range(-0.6..0.6));
            p.color.push(rng.gen_range(0.0..1.0));
            p.scale.push(rng.gen_range(0.04..0.25));
            p.logits.push(rng.gen_range(-2.0..2.0));
        }
        let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(0.1);
        p.rot.extend(q.iter().map(|v| v / n));
        p.opacity.push(rng.gen_range(0.1..0.9));
    }
    p
}

/// Camera on a sphere of radius 2.5..3.5 looking at the origin.
pub fn random_camera(rng: &mut impl Rng, size: usize) -> Camera {
    loop {
        let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if dir.norm() < 0.2 || dir.z.abs() > 0.9 * dir.norm() {
            continue;
        }
        let eye = dir.normalize() * rng.gen_range(2.5..3.5);
        let fov = rng.gen_range(35.0..60.0);
        return Camera::look_at(eye, Vec3::zeros(), Vec3::z(), fov, size, size).unwrap();
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn perturb(p: &GaussianParams, group: ParamGroup, idx: usize, delta: f64) -> GaussianParams {
    let mut q = p.clone();
    q.group_mut(group)[idx] += delta;
    q
}

/// Renders `p` from each camera into an RGB-D observation.
pub fn render_observation(p: &GaussianParams, cams: &[Camera], proprio: Proprio) -> Observation {
    let cfg = RasterConfig::default();
    let views = cams
        .iter()
        .map(|cam| {
            let out = render_params(p, cam, &cfg).unwrap();
            View {
                camera: cam.clone(),
                rgb: out.rgb_image(),
                depth: DepthImage {
                    width: cam.width(),
                    height: cam.height(),
                    data: out.surface_depth(),
                },
            }
        })
        .collect();
    Observation { views, proprio }
}

/// A handful of opaque blobs inside the default workspace.
pub fn blob_scene(rng: &mut impl Rng, n: usize) -> GaussianParams {
    let mut p = random_params(rng, n);
    for v in p.opacity.iter_mut() {
        *v = 0.95;
    }
    for v in p.scale.iter_mut() {
        *v = v.min(0.12);
    }
    p
}

/// A reduced model configuration that keeps tests fast.
pub fn small_config() -> hgwm::models::ModelConfig {
    hgwm::models::ModelConfig {
        grid: 10,
        feat: 8,
        conv_hidden: 4,
        mlp_hidden: 16,
        latents: 4,
        attn_dim: 8,
        attn_layers: 1,
        pool: 2,
        ..Default::default()
    }
}

/// Three ring views (32×32) of a random blob scene.
pub fn scene_observation(seed: u64, n: usize, proprio: Proprio) -> Observation {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = blob_scene(&mut rng, n);
    let cams = hgwm::camera::ring_rig(3, 32, 32).unwrap();
    render_observation(&p, &cams, proprio)
}

/// Overwrites every parameter under `prefix` with uniform noise.
pub fn randomize(model: &mut hgwm::models::Model, seed: u64, prefix: &str, scale: f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.iter_mut() {
        if name.starts_with(prefix) {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

pub fn random_action(rng: &mut impl Rng) -> hgwm::types::ArmAction {
    hgwm::types::ArmAction::new(
        [rng.gen_range(0..100), rng.gen_range(0..100), rng.gen_range(0..100)],
        [rng.gen_range(0..72), rng.gen_range(0..72), rng.gen_range(0..72)],
        rng.gen_bool(0.5),
        rng.gen_bool(0.5),
    )
    .unwrap()
}
pub mod grad;

/// Hits and decisions per head family (translation, rotation, binary)
/// of freshly initialized policies. Every seed gets its own model and
/// one transition, so the decisions are independent draws.
pub fn untrained_head_hits(
    config: hgwm::models::ModelConfig,
    demos: &[hgwm::types::DemoTrajectory],
    seeds: std::ops::Range<u64>,
) -> [(u64, u64); 3] {
    use hgwm::autodiff::Tape;
    use hgwm::models::{argmax_action, decode_actions, represent, Model, ARM_LOGITS};
    use hgwm::types::Arm;

    let samples: Vec<(usize, usize)> = demos
        .iter()
        .enumerate()
        .flat_map(|(d, demo)| demo.transition_steps().map(move |k| (d, k)))
        .collect();
    let mut out = [(0u64, 0u64); 3];
    for seed in seeds {
        let (d, k) = samples[seed as usize % samples.len()];
        let step = &demos[d].steps[k];
        let model = Model::new(config, seed).unwrap();
        let mut tape = Tape::new();
        let v = represent(&mut tape, &model, &step.observation, false).unwrap();
        let logits = decode_actions(&mut tape, &model, &v, &demos[d].language).unwrap();
        let data = tape.data(logits.logits);
        for arm in Arm::BOTH {
            let row = &data[arm.index() * ARM_LOGITS..(arm.index() + 1) * ARM_LOGITS];
            let got = argmax_action(row).unwrap().head_targets();
            let want = step.action.arm(arm).head_targets();
            for h in 0..8 {
                let fam = match h {
                    0..=2 => 0,
                    3..=5 => 1,
                    _ => 2,
                };
                out[fam].1 += 1;
                out[fam].0 += u64::from(got[h] == want[h]);
            }
        }
    }
    out
}

/// Whether `hits / n` lies within three binomial standard deviations of `p`.
pub fn within_three_sigma(hits: u64, n: u64, p: f64) -> bool {
    let rate = hits as f64 / n as f64;
    (rate - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
