mod common;

use std::collections::BTreeSet;

use common::{random_action, random_params, randomize, rel_err, render_observation, scene_observation, small_config};
use hgwm::action::{action_features, WorkspaceBounds};
use hgwm::autodiff::{Tape, Tensor};
use hgwm::camera::ring_rig;
use hgwm::models::{
    add_normalize_op, decode_actions, follower_deform, language_embedding, leader_deform, pool_points, quat_mul_op,
    regress_gaussians, represent, trilinear_op, DeformHook, DeformState, GaussianVars, Model, ModelConfig,
    RotationUpdate, ARM_LOGITS,
};
use hgwm::types::{Arm, ArmAction, GaussianParams, Observation, ParamGroup, Proprio};
use hgwm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;





fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Dense reference encoder: straightforward pooling, then two 3×3×3
/// convolutions over every cell, with out-of-grid taps reading the
/// empty-space response.
fn dense_reference(model: &Model, obs: &Observation) -> Vec<f64> {
    let cfg = model.config;
    let g = cfg.grid;
    let b = cfg.bounds;
    let n = g * g * g;
    let mut sum = vec![[0.0f64; 3]; n];
    let mut cnt = vec![0usize; n];
    for view in &obs.views {
        let cam = &view.camera;
        for y in 0..cam.height() {
            for x in 0..cam.width() {
                let pix = y * cam.width() + x;
                let d = view.depth.data[pix];
                if d <= 0.0 {
                    continue;
                }
                let p = cam.unproject(x as f64, y as f64, d);
                let p = [p.x, p.y, p.z];
                if (0..3).any(|a| p[a] < b.lo[a] || p[a] > b.hi[a]) {
                    continue;
                }
                let c: Vec<usize> = (0..3)
                    .map(|a| (((p[a] - b.lo[a]) / (b.hi[a] - b.lo[a]) * g as f64) as usize).min(g - 1))
                    .collect();
                let cell = (c[0] * g + c[1]) * g + c[2];
                for ch in 0..3 {
                    sum[cell][ch] += view.rgb.data[3 * pix + ch];
                }
                cnt[cell] += 1;
            }
        }
    }
    let mut x0 = vec![0.0; n * 4];
    for c in 0..n {
        if cnt[c] > 0 {
            for ch in 0..3 {
                x0[4 * c + ch] = sum[c][ch] / cnt[c] as f64;
            }
            x0[4 * c + 3] = 1.0;
        }
    }
    let conv = |x: &[f64], pad: &[f64], c_in: usize, w: &[f64], bias: &[f64]| -> Vec<f64> {
        let c_out = bias.len();
        let mut out = vec![0.0; n * c_out];
        for cell in 0..n {
            let (i, j, k) = ((cell / (g * g)) as i64, ((cell / g) % g) as i64, (cell % g) as i64);
            let mut acc = bias.to_vec();
            let mut tap = 0;
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        let (a, bb, cc) = (i + dx, j + dy, k + dz);
                        let gi = g as i64;
                        let src: &[f64] = if a < 0 || bb < 0 || cc < 0 || a >= gi || bb >= gi || cc >= gi {
                            pad
                        } else {
                            let id = ((a * gi + bb) * gi + cc) as usize;
                            &x[id * c_in..(id + 1) * c_in]
                        };
                        for ch in 0..c_in {
                            for o in 0..c_out {
                                acc[o] += src[ch] * w[(tap * c_in + ch) * c_out + o];
                            }
                        }
                        tap += 1;
                    }
                }
            }
            for o in 0..c_out {
                out[cell * c_out + o] = silu(acc[o]);
            }
        }
        out
    };
    let p = |name: &str| model.params.get(name).unwrap().data().to_vec();
    let h1 = conv(&x0, &[0.0; 4], 4, &p("repr.conv1.w"), &p("repr.conv1.b"));
    let c1 = cfg.conv_hidden;
    let pro = obs.proprio.to_vec();
    let mut h1p = Vec::with_capacity(n * (c1 + 3));
    for cell in 0..n {
        h1p.extend_from_slice(&h1[cell * c1..(cell + 1) * c1]);
        h1p.extend_from_slice(&pro);
    }
    let mut pad: Vec<f64> = p("repr.conv1.b").iter().map(|b| silu(*b)).collect();
    pad.extend_from_slice(&pro);
    conv(&h1p, &pad, c1 + 3, &p("repr.conv2.w"), &p("repr.conv2.b"))
}

#[test]
fn sparse_encoder_matches_dense_reference() {
    let mut model = Model::new(small_config(), 3).unwrap();
    randomize(&mut model, 11, "repr.", 0.5);
    let proprio = Proprio {
        time_index: 3,
        left_open: true,
        right_open: false,
    };
    for seed in 0..3 {
        let obs = scene_observation(seed, 6, proprio);
        let mut tape = Tape::new();
        let v = represent(&mut tape, &model, &obs, false).unwrap();
        let sparse = v.to_dense(&tape);
        let dense = dense_reference(&model, &obs);
        assert_eq!(sparse.len(), dense.len());
        let worst = sparse.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "seed {seed}: max deviation {worst}");
    }
}

#[test]
fn empty_observation_errors_unless_allowed() {
    let model = Model::new(small_config(), 0).unwrap();
    let obs = scene_observation(0, 0, Proprio::default());
    let mut tape = Tape::new();
    assert!(matches!(represent(&mut tape, &model, &obs, false), Err(Error::DegenerateObservation)));
    let v = represent(&mut tape, &model, &obs, true).unwrap();
    assert!(v.dense_occupancy().iter().all(|o| *o == 0.0));
    assert!(matches!(regress_gaussians(&mut tape, &model, &v), Err(Error::EmptyScene)));
}

#[test]
fn features_are_local_to_occupied_cells() {
    let model = Model::new(ModelConfig::default(), 5).unwrap();
    let mut p = GaussianParams::with_capacity(1);
    p.mu.extend([0.05, 0.05, 0.35]);
    p.color.extend([0.9, 0.2, 0.1]);
    p.rot.extend([1.0, 0.0, 0.0, 0.0]);
    p.scale.extend([0.02; 3]);
    p.opacity.push(0.99);
    p.logits.extend([1.0, 0.0, 0.0]);
    let cams = ring_rig(1, 64, 64).unwrap();
    let obs = render_observation(&p, &cams[..1], Proprio::default());
    let occupied: Vec<usize> = pool_points(&model, &obs).unwrap().iter().map(|(c, _, _)| *c).collect();
    assert!(!occupied.is_empty());
    let mut tape = Tape::new();
    let v = represent(&mut tape, &model, &obs, false).unwrap();
    let dense = v.to_dense(&tape);
    let g = model.config.grid;
    let f = model.config.feat;
    let coords = |c: usize| [c / (g * g), (c / g) % g, c % g];
    let mut support = 0;
    for cell in 0..g * g * g {
        let near = occupied.iter().any(|&o| {
            let (a, b) = (coords(cell), coords(o));
            (0..3).all(|k| a[k].abs_diff(b[k]) <= 2)
        });
        let nonzero = dense[cell * f..(cell + 1) * f].iter().any(|x| *x != 0.0);
        if nonzero {
            assert!(near, "cell {cell} outside the receptive field has features");
            support += 1;
        }
    }
    assert!(support > 0);
}

#[test]
fn view_order_does_not_change_features() {
    let mut model = Model::new(small_config(), 2).unwrap();
    randomize(&mut model, 4, "repr.", 0.5);
    let obs = scene_observation(9, 5, Proprio::default());
    let mut rev = obs.clone();
    rev.views.reverse();
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = represent(&mut t1, &model, &obs, false).unwrap();
    let b = represent(&mut t2, &model, &rev, false).unwrap();
    assert_eq!(a.to_dense(&t1), b.to_dense(&t2));
}

#[test]
fn zero_regressor_head_gives_neutral_gaussians() {
    let mut model = Model::new(small_config(), 1).unwrap();
    model.params.zero_values("regr.out.");
    let obs = scene_observation(1, 4, Proprio::default());
    let mut tape = Tape::new();
    let v = represent(&mut tape, &model, &obs, false).unwrap();
    let g = regress_gaussians(&mut tape, &model, &v).unwrap();
    let occ = v.occupied_rows(0.5);
    assert_eq!(g.count, occ.len());
    let p = g.to_params(&tape);
    for (i, &r) in occ.iter().enumerate() {
        let c = v.cell_center(v.cells[r]);
        assert_eq!(&p.mu[3 * i..3 * i + 3], &c);
        assert_eq!(&p.color[3 * i..3 * i + 3], &[0.5; 3]);
        assert_eq!(&p.rot[4 * i..4 * i + 4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.opacity[i], 0.5);
    }
}

#[test]
fn one_occupied_cell_gives_one_gaussian() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut p = GaussianParams::with_capacity(1);
    p.mu.extend([0.05, 0.05, 0.05]);
    p.color.extend([0.5; 3]);
    p.rot.extend([1.0, 0.0, 0.0, 0.0]);
    p.scale.extend([0.004; 3]);
    p.opacity.push(0.99);
    p.logits.extend([0.0; 3]);
    let cams = ring_rig(2, 64, 64).unwrap();
    let obs = render_observation(&p, &cams, Proprio::default());
    let mut tape = Tape::new();
    let v = represent(&mut tape, &model, &obs, false).unwrap();
    assert_eq!(v.occupied_rows(0.5).len(), 1);
    let g = regress_gaussians(&mut tape, &model, &v).unwrap();
    assert_eq!(g.count, 1);
}

#[test]
fn regressed_gaussians_satisfy_invariants() {
    let mut model = Model::new(small_config(), 7).unwrap();
    let obs = scene_observation(2, 5, Proprio::default());
    for trial in 0..1000u64 {
        let scale = [0.1, 1.0, 5.0, 30.0][(trial % 4) as usize];
        randomize(&mut model, trial, "regr.", scale);
        let mut tape = Tape::new();
        let v = represent(&mut tape, &model, &obs, false).unwrap();
        let g = regress_gaussians(&mut tape, &model, &v).unwrap();
        let set = g.to_set(&tape, 0).unwrap();
        for gs in &set.gaussians {
            let q = gs.rot();
            assert!((q.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            assert!(gs.scale().iter().all(|s| *s >= 1e-3));
            assert!(gs.opacity() > 0.0 && gs.opacity() <= 1.0);
            assert!(gs.color().iter().all(|c| (0.0..=1.0).contains(c)));
        }
        let cell = model.config.cell_size();
        for (i, &r) in v.occupied_rows(0.5).iter().enumerate() {
            let c = v.cell_center(v.cells[r]);
            for a in 0..3 {
                assert!((set.gaussians[i].mu()[a] - c[a]).abs() <= 0.5 * cell[a] + 1e-12);
            }
        }
    }
}

struct Fixture {
    model: Model,
    obs: Observation,
}

fn fixture(seed: u64) -> Fixture {
    let mut model = Model::new(small_config(), seed).unwrap();
    randomize(&mut model, seed + 100, "leader.", 0.3);
    randomize(&mut model, seed + 200, "follower.", 0.3);
    Fixture {
        model,
        obs: scene_observation(seed, 5, Proprio::default()),
    }
}

fn leaf_scene(tape: &mut Tape, rng: &mut impl Rng, n: usize) -> GaussianVars {
    let mut p = random_params(rng, n);
    for q in p.rot.chunks_mut(4) {
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.iter_mut().for_each(|x| *x /= norm);
    }
    GaussianVars::from_params(tape, &p).unwrap()
}

#[test]
fn zero_deformation_heads_are_identity() {
    let mut fx = fixture(1);
    fx.model.zero_deformation_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    let g = regress_gaussians(&mut tape, &fx.model, &v).unwrap();
    let (a_s, a_a) = (random_action(&mut rng), random_action(&mut rng));
    let s0 = DeformState::initial(g);
    let s1 = leader_deform(&mut tape, &fx.model, &s0, &a_s, &v, &DeformHook::default()).unwrap();
    assert_eq!(g.to_params(&tape), s1.gaussians.to_params(&tape));
    let s2 = follower_deform(&mut tape, &fx.model, &s1, &a_s, &a_a, &v, &DeformHook::default()).unwrap();
    assert_eq!(s1.gaussians.to_params(&tape), s2.gaussians.to_params(&tape));
}

#[test]
fn leader_hook_shifts_every_position_exactly() {
    let fx = fixture(2);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    let g = regress_gaussians(&mut tape, &fx.model, &v).unwrap();
    let a = ArmAction::new([10, 20, 30], [1, 2, 3], true, false).unwrap();
    let hook = DeformHook {
        delta_mu: Some([0.1, 0.0, 0.0]),
        delta_rot: None,
    };
    let s1 = leader_deform(&mut tape, &fx.model, &DeformState::initial(g), &a, &v, &hook).unwrap();
    let before = tape.data(g.mu).to_vec();
    let after = tape.data(s1.gaussians.mu).to_vec();
    for i in 0..g.count {
        assert_eq!(after[3 * i], before[3 * i] + 0.1);
        assert_eq!(after[3 * i + 1], before[3 * i + 1]);
        assert_eq!(after[3 * i + 2], before[3 * i + 2]);
    }
}

#[test]
fn leader_then_follower_sums_position_deltas() {
    let fx = fixture(3);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    let mut p = GaussianParams::with_capacity(1);
    p.mu.extend([1.0, 2.0, 3.0]);
    p.color.extend([0.3; 3]);
    p.rot.extend([1.0, 0.0, 0.0, 0.0]);
    p.scale.extend([0.1; 3]);
    p.opacity.push(0.5);
    p.logits.extend([0.0; 3]);
    let g = GaussianVars::from_params(&mut tape, &p).unwrap();
    let a = ArmAction::new([0; 3], [0; 3], false, false).unwrap();
    let lead = DeformHook {
        delta_mu: Some([0.1, 0.0, 0.0]),
        delta_rot: None,
    };
    let follow = DeformHook {
        delta_mu: Some([0.0, 0.2, 0.0]),
        delta_rot: None,
    };
    let s1 = leader_deform(&mut tape, &fx.model, &DeformState::initial(g), &a, &v, &lead).unwrap();
    let s2 = follower_deform(&mut tape, &fx.model, &s1, &a, &a, &v, &follow).unwrap();
    assert_eq!(tape.data(s2.gaussians.mu), &[1.1, 2.2, 3.0]);
}

#[test]
fn composed_deltas_match_direct_application() {
    let fx = fixture(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
        let g = leaf_scene(&mut tape, &mut rng, 20);
        let d = |rng: &mut ChaCha8Rng, s: f64| -> [f64; 4] { [0; 4].map(|_| rng.gen_range(-s..s)) };
        let (dm_s, dm_a) = ([0.0; 3].map(|_| rng.gen_range(-0.3..0.3)), [0.0; 3].map(|_| rng.gen_range(-0.3..0.3)));
        let (dr_s, dr_a) = (d(&mut rng, 0.3), d(&mut rng, 0.3));
        let a = random_action(&mut rng);
        let s1 = leader_deform(
            &mut tape,
            &fx.model,
            &DeformState::initial(g),
            &a,
            &v,
            &DeformHook {
                delta_mu: Some(dm_s),
                delta_rot: Some(dr_s),
            },
        )
        .unwrap();
        let s2 = follower_deform(
            &mut tape,
            &fx.model,
            &s1,
            &a,
            &a,
            &v,
            &DeformHook {
                delta_mu: Some(dm_a),
                delta_rot: Some(dr_a),
            },
        )
        .unwrap();
        let mu0 = tape.data(g.mu).to_vec();
        let r0 = tape.data(g.rot).to_vec();
        let mu = tape.data(s2.gaussians.mu);
        let r = tape.data(s2.gaussians.rot);
        for i in 0..g.count {
            for k in 0..3 {
                assert_eq!(mu[3 * i + k], mu0[3 * i + k] + (dm_s[k] + dm_a[k]));
            }
            let sum: Vec<f64> = (0..4).map(|k| r0[4 * i + k] + (dr_s[k] + dr_a[k])).collect();
            let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..4 {
                assert!((r[4 * i + k] - sum[k] / n).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn deformation_keeps_inherent_fields_bit_identical() {
    let fx = fixture(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    for _ in 0..1000 {
        let mark = tape.len();
        let n = rng.gen_range(1..6);
        let g = leaf_scene(&mut tape, &mut rng, n);
        let (a_s, a_a) = (random_action(&mut rng), random_action(&mut rng));
        let s1 = leader_deform(&mut tape, &fx.model, &DeformState::initial(g), &a_s, &v, &DeformHook::default()).unwrap();
        let s2 = follower_deform(&mut tape, &fx.model, &s1, &a_s, &a_a, &v, &DeformHook::default()).unwrap();
        for out in [s1.gaussians, s2.gaussians] {
            assert_eq!(out.count, n);
            for grp in [ParamGroup::Color, ParamGroup::Scale, ParamGroup::Opacity, ParamGroup::Logits] {
                assert_eq!(tape.data(out.group(grp)), tape.data(g.group(grp)));
            }
        }
        assert!(tape.len() > mark);
    }
}

#[test]
fn follower_depends_on_stabilizing_action() {
    let fx = fixture(6);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    let g = leaf_scene(&mut tape, &mut rng, 10);
    let s1 = DeformState::initial(g);
    let a_a = random_action(&mut rng);
    let a1 = ArmAction::new([10, 10, 10], [0, 0, 0], false, false).unwrap();
    let a2 = ArmAction::new([80, 70, 60], [30, 40, 50], true, true).unwrap();
    let o1 = follower_deform(&mut tape, &fx.model, &s1, &a1, &a_a, &v, &DeformHook::default()).unwrap();
    let o2 = follower_deform(&mut tape, &fx.model, &s1, &a2, &a_a, &v, &DeformHook::default()).unwrap();
    let diff: f64 = tape
        .data(o1.gaussians.mu)
        .iter()
        .zip(tape.data(o2.gaussians.mu))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(diff > 0.0);
}

#[test]
fn compose_rotation_mode_applies_quaternion_product() {
    let mut fx = fixture(7);
    fx.model.config.rotation_update = RotationUpdate::Compose;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
    let g = leaf_scene(&mut tape, &mut rng, 5);
    let dr = [0.0, 0.2, -0.1, 0.05];
    let hook = DeformHook {
        delta_mu: None,
        delta_rot: Some(dr),
    };
    let a = random_action(&mut rng);
    let s1 = leader_deform(&mut tape, &fx.model, &DeformState::initial(g), &a, &v, &hook).unwrap();
    let n = (1.0f64 + 0.04 + 0.01 + 0.0025).sqrt();
    let dq = [1.0 / n, 0.2 / n, -0.1 / n, 0.05 / n];
    for i in 0..5 {
        let r0: [f64; 4] = tape.data(g.rot)[4 * i..4 * i + 4].try_into().unwrap();
        let expect = hgwm::geometry::quat_mul(dq, r0);
        for k in 0..4 {
            assert!((tape.data(s1.gaussians.rot)[4 * i + k] - expect[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn policy_logits_have_declared_shape_and_valid_argmax() {
    let obs = scene_observation(3, 5, Proprio::default());
    for trial in 0..1000u64 {
        let mut model = Model::new(small_config(), 0).unwrap();
        randomize(&mut model, trial, "policy.", 1.0 + (trial % 5) as f64);
        let mut tape = Tape::new();
        let v = represent(&mut tape, &model, &obs, false).unwrap();
        let out = decode_actions(&mut tape, &model, &v, "push the box").unwrap();
        assert_eq!(tape.shape(out.logits), &[2, ARM_LOGITS]);
        assert_eq!(ARM_LOGITS, 3 * 100 + 3 * 72 + 2 + 2);
        for arm in Arm::BOTH {
            let a = out.argmax_arm(&tape, arm).unwrap();
            assert!(a.trans_bin().iter().all(|b| *b < 100));
            assert!(a.rot_bins().iter().all(|b| *b < 72));
        }
    }
}

#[test]
fn policy_is_deterministic_and_separates_instructions() {
    let mut model = Model::new(small_config(), 4).unwrap();
    randomize(&mut model, 77, "policy.", 0.5);
    let obs = scene_observation(4, 5, Proprio::default());
    let run = |s: &str| {
        let mut tape = Tape::new();
        let v = represent(&mut tape, &model, &obs, false).unwrap();
        let out = decode_actions(&mut tape, &model, &v, s).unwrap();
        tape.data(out.logits).to_vec()
    };
    assert_eq!(run("lift the tray"), run("lift the tray"));
    assert_eq!(run("  Lift The Tray "), run("lift the tray"));
    assert_eq!(run(""), run("   "));
    let mut seen = BTreeSet::new();
    for i in 0..100 {
        let a = run(&format!("instruction number {i}"));
        let b = run(&format!("instruction number {i} please"));
        assert_ne!(a, b, "pair {i} collided");
        seen.insert(format!("{:?}", &a[..4]));
    }
    assert_eq!(seen.len(), 100);
}

#[test]
fn empty_instruction_uses_null_embedding() {
    assert!(language_embedding("", 7).iter().all(|x| *x == 0.0));
    let e = language_embedding("handover the item", 7);
    assert!(e.iter().all(|x| (-1.0..1.0).contains(x)));
    assert!(e.iter().any(|x| *x != 0.0));
}

#[test]
fn archive_round_trip_and_manifest_mismatch() {
    let model = Model::new(small_config(), 9).unwrap();
    let bytes = model.to_archive().to_bytes().unwrap();
    let back = Model::from_archive(&hgwm::autodiff::Archive::from_bytes(&bytes).unwrap(), Some(&small_config())).unwrap();
    assert_eq!(back, model);
    let other = ModelConfig {
        grid: 8,
        ..small_config()
    };
    assert!(matches!(Model::from_archive(&model.to_archive(), Some(&other)), Err(Error::Manifest(_))));
    let mut a = model.to_archive();
    a.meta.insert("model.head_shapes".into(), "100,100".into());
    assert!(Model::from_archive(&a, None).is_err());
}

#[test]
fn action_features_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let f = action_features(&random_action(&mut rng), &WorkspaceBounds::default());
        assert!(f.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}

/// Central-difference check of a custom op against its adjoint with a
/// random linear read-out.
fn check_op(op: &std::rc::Rc<hgwm::autodiff::CustomOp>, inputs: Vec<Tensor>, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.custom(op, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let wts: Vec<f64> = (0..tape.data(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, wts.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let refs: Vec<&Tensor> = ins.iter().collect();
        let mut t = Tape::new();
        let vs: Vec<_> = refs.iter().map(|x| t.constant((*x).clone())).collect();
        let o = t.custom(op, &vs).unwrap();
        t.data(o).iter().zip(&wts).map(|(a, b)| a * b).sum()
    };
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(*var).unwrap().to_vec();
        for i in 0..inputs[k].len() {
            let h = 1e-6;
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(rel_err(g[i], fd, 1e-4) < tol, "{} input {k}[{i}]: adjoint {} vs fd {fd}", op.name(), g[i]);
        }
    }
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn model_ops_adjoints_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    check_op(&quat_mul_op(), vec![random_tensor(&mut rng, 5, 4, -1.0, 1.0), random_tensor(&mut rng, 5, 4, -1.0, 1.0)], 1e-6);
    check_op(&add_normalize_op(), vec![random_tensor(&mut rng, 5, 4, -1.0, 1.0), random_tensor(&mut rng, 5, 4, -0.5, 0.5)], 1e-6);

    let model = Model::new(small_config(), 0).unwrap();
    let obs = scene_observation(5, 5, Proprio::default());
    let mut tape = Tape::new();
    let v = represent(&mut tape, &model, &obs, false).unwrap();
    let feats = tape.value(v.features).clone();
    let mut feats = feats;
    for x in feats.data_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    // sample near occupied cells, away from lattice planes
    let pos = random_tensor(&mut rng, 12, 3, -0.6, 0.6);
    check_op(&trilinear_op(v.index.clone()), vec![feats, pos], 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn leader_never_changes_particle_count(seed in 0u64..1000, n in 1usize..8) {
        let fx = fixture(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let v = represent(&mut tape, &fx.model, &fx.obs, false).unwrap();
        let g = leaf_scene(&mut tape, &mut rng, n);
        let a = random_action(&mut rng);
        let s = leader_deform(&mut tape, &fx.model, &DeformState::initial(g), &a, &v, &DeformHook::default()).unwrap();
        prop_assert_eq!(s.gaussians.count, n);
        prop_assert_eq!(tape.shape(s.gaussians.mu), &[n, 3]);
        prop_assert_eq!(tape.shape(s.gaussians.rot), &[n, 4]);
    }
}
