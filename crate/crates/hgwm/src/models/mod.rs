//! Learned components: volumetric representation, Gaussian regressor,
//! leader/follower deformation models and the action-decoding head.

mod config;
mod deform;
mod ops;
mod policy;
mod regressor;
mod representation;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, RotationUpdate, ARM_LOGITS, HEAD_SIZES};
pub use deform::{follower_deform, leader_deform, DeformHook, DeformState};
pub use ops::{add_normalize_op, quat_mul_op, trilinear_op, CellIndex, NO_ROW};
pub use policy::{argmax_action, decode_actions, language_embedding, PolicyLogits};
pub use regressor::{regress_gaussians, GaussianVars, REGRESSOR_OUTPUTS};
pub use representation::{pool_points, represent, VolumetricFeature};

use crate::autodiff::{Archive, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Parameter-name prefixes of the five learned components.
pub const COMPONENTS: [&str; 5] = ["repr.", "regr.", "leader.", "follower.", "policy."];

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self {
            config,
            params: ParamStore::new(),
        };
        representation::init_params(&mut model, &mut rng);
        regressor::init_params(&mut model, &mut rng);
        deform::init_params(&mut model, &mut rng);
        policy::init_params(&mut model, &mut rng);
        Ok(model)
    }

    /// Zeroes the output layers of both deformation models so they
    /// propagate scenes unchanged.
    pub fn zero_deformation_heads(&mut self) {
        for prefix in ["leader.out.", "follower.out."] {
            self.params.zero_values(prefix);
        }
    }

    /// Names of parameters belonging to the deformation output layers.
    pub fn deformation_head_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("leader.out.") || n.starts_with("follower.out."))
            .map(str::to_string)
            .collect()
    }

    pub fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = self.config.manifest();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            m.insert(format!("shape.{name}"), dims.join("x"));
        }
        m
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.meta = self.manifest();
        for (name, t) in self.params.iter() {
            a.push(format!("param/{name}"), t.clone());
        }
        a
    }

    /// Restores a model, rejecting archives whose manifest differs from
    /// what `expected` (when given) would produce.
    pub fn from_archive(a: &Archive, expected: Option<&ModelConfig>) -> Result<Self> {
        let config = ModelConfig::from_manifest(&a.meta)?;
        if let Some(exp) = expected {
            if exp.manifest() != config.manifest() {
                return Err(Error::Manifest(format!("checkpoint model config {config:?} differs from {exp:?}")));
            }
        }
        let mut params = ParamStore::new();
        for (name, t) in &a.tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, t.clone());
            }
        }
        let model = Self { config, params };
        // shapes must agree with a freshly initialized model of this config
        let fresh = Model::new(config, 0)?;
        if fresh.manifest() != model.manifest() {
            return Err(Error::Manifest("parameter names or shapes do not match the model config".into()));
        }
        Ok(model)
    }
}

/// Perceptron with SiLU hidden layers. Parameters are
/// `{prefix}.l{i}.w/b` for hidden layers and `{prefix}.out.w/b` for the
/// linear output layer.
pub(crate) fn mlp(tape: &mut Tape, params: &ParamStore, prefix: &str, hidden_layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..hidden_layers {
        let w = tape.param(params, &format!("{prefix}.l{i}.w"))?;
        let b = tape.param(params, &format!("{prefix}.l{i}.b"))?;
        let y = tape.linear(h, w, b)?;
        h = tape.silu(y);
    }
    let w = tape.param(params, &format!("{prefix}.out.w"))?;
    let b = tape.param(params, &format!("{prefix}.out.b"))?;
    tape.linear(h, w, b)
}

pub(crate) fn init_mlp(
    params: &mut ParamStore,
    prefix: &str,
    sizes: &[usize],
    out_gain: f64,
    rng: &mut impl rand::Rng,
) {
    let n = sizes.len() - 1;
    for i in 0..n {
        let name = if i + 1 == n { format!("{prefix}.out") } else { format!("{prefix}.l{i}") };
        params.init_matrix(&format!("{name}.w"), sizes[i], sizes[i + 1], rng);
        params.init_const(&format!("{name}.b"), vec![sizes[i + 1]], 0.0);
        if i + 1 == n && out_gain != 1.0 {
            for v in params.get_mut(&format!("{name}.w")).unwrap().data_mut() {
                *v *= out_gain;
            }
        }
    }
}
