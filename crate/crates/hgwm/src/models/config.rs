use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::action::WorkspaceBounds;
use crate::error::{Error, Result};
use crate::types::{ROT_BINS, TRANS_BINS};

/// How rotation deltas are applied to a Gaussian's quaternion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RotationUpdate {
    /// `normalize(r + Δr)`: the delta is added to the quaternion components.
    #[default]
    Additive,
    /// `normalize(1 + Δr) ⊗ r`: the delta is turned into a unit quaternion
    /// and composed on the left.
    Compose,
}

impl fmt::Display for RotationUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationUpdate::Additive => "additive",
            RotationUpdate::Compose => "compose",
        })
    }
}

impl FromStr for RotationUpdate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(RotationUpdate::Additive),
            "compose" => Ok(RotationUpdate::Compose),
            other => Err(Error::invalid("rotation update", other.to_string())),
        }
    }
}

/// Sizes of every learned component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Cells per axis of the volumetric grid.
    pub grid: usize,
    /// Feature channels of the volumetric representation.
    pub feat: usize,
    /// Channels after the first convolution.
    pub conv_hidden: usize,
    /// Hidden width of the regressor and deformation perceptrons.
    pub mlp_hidden: usize,
    pub latents: usize,
    pub attn_dim: usize,
    pub attn_layers: usize,
    /// Average-pooling stride applied before the attention head.
    pub pool: usize,
    pub rotation_update: RotationUpdate,
    pub occupancy_threshold: f64,
    pub bounds: WorkspaceBounds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 20,
            feat: 32,
            conv_hidden: 8,
            mlp_hidden: 64,
            latents: 8,
            attn_dim: 32,
            attn_layers: 2,
            pool: 2,
            rotation_update: RotationUpdate::Additive,
            occupancy_threshold: 0.5,
            bounds: WorkspaceBounds::default(),
        }
    }
}

/// Logit count of one arm: three translation axes, three rotation axes,
/// openness, collision.
pub const ARM_LOGITS: usize = 3 * TRANS_BINS + 3 * ROT_BINS + 2 + 2;

/// Sizes of the eight classification heads of one arm, in order.
pub const HEAD_SIZES: [usize; 8] = [TRANS_BINS, TRANS_BINS, TRANS_BINS, ROT_BINS, ROT_BINS, ROT_BINS, 2, 2];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid),
            ("feat", self.feat),
            ("conv_hidden", self.conv_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("latents", self.latents),
            ("attn_dim", self.attn_dim),
            ("attn_layers", self.attn_layers),
            ("pool", self.pool),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("model config", format!("{name} must be positive")));
            }
        }
        if self.grid % self.pool != 0 {
            return Err(Error::invalid("model config", format!("grid {} not divisible by pool {}", self.grid, self.pool)));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        e.map(|v| v / self.grid as f64)
    }

    pub fn pooled(&self) -> usize {
        self.grid / self.pool
    }

    /// Width of the per-token input of the attention head: pooled feature
    /// plus normalized cell-centre coordinates.
    pub fn token_dim(&self) -> usize {
        self.feat + 3
    }

    /// Key/value pairs stored in checkpoints; loading rejects mismatches.
    pub fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("grid", self.grid.to_string());
        put("feat", self.feat.to_string());
        put("conv_hidden", self.conv_hidden.to_string());
        put("mlp_hidden", self.mlp_hidden.to_string());
        put("latents", self.latents.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("attn_layers", self.attn_layers.to_string());
        put("pool", self.pool.to_string());
        put("rotation_update", self.rotation_update.to_string());
        put("occupancy_threshold", format!("{:?}", self.occupancy_threshold));
        put("bounds_lo", format!("{:?},{:?},{:?}", self.bounds.lo[0], self.bounds.lo[1], self.bounds.lo[2]));
        put("bounds_hi", format!("{:?},{:?},{:?}", self.bounds.hi[0], self.bounds.hi[1], self.bounds.hi[2]));
        put("head_shapes", HEAD_SIZES.map(|h| h.to_string()).join(","));
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            m.get(&format!("model.{k}"))
                .map(String::as_str)
                .ok_or_else(|| Error::Manifest(format!("missing model.{k}")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Manifest(format!("bad model.{k}"))) };
        let vec3 = |k: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = get(k)?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Manifest(format!("bad model.{k}"))))
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| Error::Manifest(format!("bad model.{k}")))
        };
        let expected_heads = HEAD_SIZES.map(|h| h.to_string()).join(",");
        if get("head_shapes")? != expected_heads {
            return Err(Error::Manifest(format!("head shapes {} differ from {expected_heads}", get("head_shapes")?)));
        }
        let cfg = Self {
            grid: num("grid")?,
            feat: num("feat")?,
            conv_hidden: num("conv_hidden")?,
            mlp_hidden: num("mlp_hidden")?,
            latents: num("latents")?,
            attn_dim: num("attn_dim")?,
            attn_layers: num("attn_layers")?,
            pool: num("pool")?,
            rotation_update: get("rotation_update")?.parse()?,
            occupancy_threshold: get("occupancy_threshold")?
                .parse()
                .map_err(|_| Error::Manifest("bad model.occupancy_threshold".into()))?,
            bounds: WorkspaceBounds::new(vec3("bounds_lo")?, vec3("bounds_hi")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
