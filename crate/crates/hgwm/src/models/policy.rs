//! Action-decoding head: learned latent queries cross-attend over pooled
//! grid tokens plus a hashed instruction token, then a linear map emits the
//! factorized logits of both arms.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ARM_LOGITS, HEAD_SIZES};
use super::ops::CellIndex;
use super::representation::VolumetricFeature;
use super::Model;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::{Arm, ArmAction, BimanualAction, RoleAssignment};

const LN_EPS: f64 = 1e-5;

/// Logits of both arms on a tape: shape `[2, ARM_LOGITS]`, row 0 left,
/// row 1 right. Each row holds the eight heads back to back in
/// [`HEAD_SIZES`] order.
#[derive(Clone, Copy, Debug)]
pub struct PolicyLogits {
    pub logits: Var,
}

impl PolicyLogits {
    /// `(start, end)` column range of head `h`.
    pub fn head_range(h: usize) -> (usize, usize) {
        let start: usize = HEAD_SIZES[..h].iter().sum();
        (start, start + HEAD_SIZES[h])
    }

    pub fn arm_row<'a>(&self, tape: &'a Tape, arm: Arm) -> &'a [f64] {
        let i = arm.index();
        &tape.data(self.logits)[i * ARM_LOGITS..(i + 1) * ARM_LOGITS]
    }

    /// Arg-max action of one arm.
    pub fn argmax_arm(&self, tape: &Tape, arm: Arm) -> Result<ArmAction> {
        argmax_action(self.arm_row(tape, arm))
    }

    /// Arg-max actions of both arms under the given role assignment.
    pub fn argmax(&self, tape: &Tape, role: RoleAssignment) -> Result<BimanualAction> {
        Ok(BimanualAction::from_arms(
            self.argmax_arm(tape, Arm::Left)?,
            self.argmax_arm(tape, Arm::Right)?,
            role,
        ))
    }
}

/// Per-head arg-max of one arm's logit row.
pub fn argmax_action(row: &[f64]) -> Result<ArmAction> {
    if row.len() != ARM_LOGITS {
        return Err(Error::Shape {
            op: "argmax_action",
            left: vec![row.len()],
            right: vec![ARM_LOGITS],
        });
    }
    let mut best = [0usize; 8];
    for (h, b) in best.iter_mut().enumerate() {
        let (s, e) = PolicyLogits::head_range(h);
        let head = &row[s..e];
        let mut arg = 0;
        for (i, v) in head.iter().enumerate() {
            if *v > head[arg] {
                arg = i;
            }
        }
        *b = arg;
    }
    ArmAction::new([best[0], best[1], best[2]], [best[3], best[4], best[5]], best[6] == 1, best[7] == 1)
}

/// Deterministic embedding of an instruction. Instructions are trimmed and
/// lower-cased, hashed (FNV-1a), and the hash seeds a uniform draw in
/// `[-1, 1]^dim`. The empty instruction maps to the zero vector.
pub fn language_embedding(instruction: &str, dim: usize) -> Vec<f64> {
    let text = instruction.trim().to_lowercase();
    if text.is_empty() {
        return vec![0.0; dim];
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Gather indices averaging `pool³` fine cells into each coarse token, plus
/// the normalized coarse-cell centres.
fn pooling_plan(index: &CellIndex, pool: usize) -> (Vec<usize>, Vec<f64>) {
    let g = index.grid;
    let p = g / pool;
    let mut idx = Vec::with_capacity(g * g * g);
    let mut coords = Vec::with_capacity(3 * p * p * p);
    for x in 0..p {
        for y in 0..p {
            for z in 0..p {
                for dx in 0..pool {
                    for dy in 0..pool {
                        for dz in 0..pool {
                            idx.push(index.row_of([(x * pool + dx) as i64, (y * pool + dy) as i64, (z * pool + dz) as i64]));
                        }
                    }
                }
                for c in [x, y, z] {
                    coords.push((c as f64 + 0.5) / p as f64 * 2.0 - 1.0);
                }
            }
        }
    }
    (idx, coords)
}

fn layer_norm(tape: &mut Tape, model: &Model, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(&model.params, &format!("{name}.g"))?;
    let b = tape.param(&model.params, &format!("{name}.b"))?;
    let y = tape.layer_norm_rows(x, LN_EPS)?;
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

fn dense(tape: &mut Tape, model: &Model, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&model.params, &format!("{name}.w"))?;
    let b = tape.param(&model.params, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

/// Runs the action head on a volumetric feature and an instruction.
pub fn decode_actions(tape: &mut Tape, model: &Model, v: &VolumetricFeature, instruction: &str) -> Result<PolicyLogits> {
    let cfg = &model.config;
    let f = tape.shape(v.features)[1];
    let k = cfg.pool.pow(3);
    let tokens_n = cfg.pooled().pow(3);
    let (idx, coords) = pooling_plan(&v.index, cfg.pool);

    let fine = tape.gather_rows(v.features, Rc::new(idx))?;
    let stacked = tape.reshape(fine, vec![tokens_n, k * f])?;
    let mut avg = vec![0.0; k * f * f];
    for j in 0..k {
        for c in 0..f {
            avg[(j * f + c) * f + c] = 1.0 / k as f64;
        }
    }
    let avg = tape.constant(Tensor::matrix(k * f, f, avg)?);
    let pooled = tape.matmul(stacked, avg)?;
    let coords = tape.constant(Tensor::matrix(tokens_n, 3, coords)?);
    let grid_tokens = tape.concat_cols(&[pooled, coords])?;
    let lang = tape.constant(Tensor::matrix(1, cfg.token_dim(), language_embedding(instruction, cfg.token_dim()))?);
    let tokens = tape.concat_rows(&[grid_tokens, lang])?;

    let d = cfg.attn_dim;
    let mut lat = tape.param(&model.params, "policy.latents")?;
    for l in 0..cfg.attn_layers {
        let p = format!("policy.layer{l}");
        let q_in = layer_norm(tape, model, &format!("{p}.ln1"), lat)?;
        let q = dense(tape, model, &format!("{p}.q"), q_in)?;
        let keys = dense(tape, model, &format!("{p}.k"), tokens)?;
        let vals = dense(tape, model, &format!("{p}.v"), tokens)?;
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, vals)?;
        let ctx = dense(tape, model, &format!("{p}.o"), ctx)?;
        lat = tape.add(lat, ctx)?;

        let h = layer_norm(tape, model, &format!("{p}.ln2"), lat)?;
        let h = dense(tape, model, &format!("{p}.ff1"), h)?;
        let h = tape.silu(h);
        let h = dense(tape, model, &format!("{p}.ff2"), h)?;
        lat = tape.add(lat, h)?;
    }
    let flat = tape.reshape(lat, vec![1, cfg.latents * d])?;
    let out = dense(tape, model, "policy.out", flat)?;
    let logits = tape.reshape(out, vec![2, ARM_LOGITS])?;
    Ok(PolicyLogits { logits })
}

pub(super) fn init_params(model: &mut Model, rng: &mut impl Rng) {
    let cfg = model.config;
    let d = cfg.attn_dim;
    let t = cfg.token_dim();
    let p = &mut model.params;
    p.init_uniform("policy.latents", vec![cfg.latents, d], 1.0, rng);
    for l in 0..cfg.attn_layers {
        let pre = format!("policy.layer{l}");
        for ln in ["ln1", "ln2"] {
            p.init_const(&format!("{pre}.{ln}.g"), vec![d], 1.0);
            p.init_const(&format!("{pre}.{ln}.b"), vec![d], 0.0);
        }
        for (name, fan_in, fan_out) in [("q", d, d), ("k", t, d), ("v", t, d), ("o", d, d), ("ff1", d, 2 * d), ("ff2", 2 * d, d)] {
            p.init_matrix(&format!("{pre}.{name}.w"), fan_in, fan_out, rng);
            p.init_const(&format!("{pre}.{name}.b"), vec![fan_out], 0.0);
        }
    }
    p.init_matrix("policy.out.w", cfg.latents * d, 2 * ARM_LOGITS, rng);
    p.init_const("policy.out.b", vec![2 * ARM_LOGITS], 0.0);
}
