//! Volumetric features → one Gaussian per occupied cell.

use std::rc::Rc;

use super::representation::VolumetricFeature;
use super::{init_mlp, mlp, Model};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::{GaussianParams, GaussianSet, ParamGroup};

/// Raw outputs per cell: offset 3, colour 3, rotation 4, scale 3,
/// opacity 1, logits 3.
pub const REGRESSOR_OUTPUTS: usize = 17;
/// Smallest standard deviation a regressed Gaussian may have (meters).
pub const MIN_SCALE: f64 = 1e-3;
const MIN_OPACITY: f64 = 1e-9;

/// Gaussian parameters held on a tape, one row per Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub color: Var,
    pub rot: Var,
    pub scale: Var,
    pub opacity: Var,
    pub logits: Var,
    pub count: usize,
}

impl GaussianVars {
    pub fn group(&self, g: ParamGroup) -> Var {
        match g {
            ParamGroup::Mu => self.mu,
            ParamGroup::Color => self.color,
            ParamGroup::Rot => self.rot,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Logits => self.logits,
        }
    }

    /// The six groups in rasterizer input order.
    pub fn raster_inputs(&self) -> [Var; 6] {
        ParamGroup::ALL.map(|g| self.group(g))
    }

    pub fn to_params(&self, tape: &Tape) -> GaussianParams {
        let mut p = GaussianParams::default();
        for g in ParamGroup::ALL {
            *p.group_mut(g) = tape.data(self.group(g)).to_vec();
        }
        p
    }

    pub fn to_set(&self, tape: &Tape, timestamp: u64) -> Result<GaussianSet> {
        self.to_params(tape).to_set(timestamp)
    }

    /// Places a fixed Gaussian set on the tape as free leaves.
    pub fn from_params(tape: &mut Tape, p: &GaussianParams) -> Result<Self> {
        p.check_shapes()?;
        let n = p.len();
        let mut leaf = |g: ParamGroup| -> Result<Var> { Ok(tape.leaf(Tensor::matrix(n, g.width(), p.group(g).to_vec())?)) };
        Ok(Self {
            mu: leaf(ParamGroup::Mu)?,
            color: leaf(ParamGroup::Color)?,
            rot: leaf(ParamGroup::Rot)?,
            scale: leaf(ParamGroup::Scale)?,
            opacity: leaf(ParamGroup::Opacity)?,
            logits: leaf(ParamGroup::Logits)?,
            count: n,
        })
    }
}

/// Regresses one Gaussian per cell whose occupancy exceeds the configured
/// threshold.
pub fn regress_gaussians(tape: &mut Tape, model: &Model, v: &VolumetricFeature) -> Result<GaussianVars> {
    let cfg = &model.config;
    let rows = v.occupied_rows(cfg.occupancy_threshold);
    if rows.is_empty() {
        return Err(Error::EmptyScene);
    }
    let n = rows.len();
    let centers: Vec<f64> = rows.iter().flat_map(|&r| v.cell_center(v.cells[r])).collect();
    let feats = tape.gather_rows(v.features, Rc::new(rows))?;
    let raw = mlp(tape, &model.params, "regr", 1, feats)?;

    let cell = cfg.cell_size();
    let off = tape.slice_cols(raw, 0, 3)?;
    let off = tape.tanh(off);
    let half = tape.constant(Tensor::vector(cell.map(|c| 0.5 * c).to_vec()));
    let off = tape.mul_row(off, half)?;
    let centers = tape.constant(Tensor::matrix(n, 3, centers)?);
    let mu = tape.add(centers, off)?;

    let color = tape.slice_cols(raw, 3, 6)?;
    let color = tape.sigmoid(color);

    let rot = tape.slice_cols(raw, 6, 10)?;
    let ident = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
    let rot = tape.add_row(rot, ident)?;
    let rot = tape.normalize_rows(rot)?;

    let mean_cell = (cell[0] + cell[1] + cell[2]) / 3.0;
    let scale = tape.slice_cols(raw, 10, 13)?;
    let scale = tape.softplus(scale);
    let scale = tape.scale(scale, mean_cell);
    let scale = tape.clamp_min(scale, MIN_SCALE);

    let opacity = tape.slice_cols(raw, 13, 14)?;
    let opacity = tape.sigmoid(opacity);
    let opacity = tape.clamp_min(opacity, MIN_OPACITY);

    let logits = tape.slice_cols(raw, 14, 17)?;
    Ok(GaussianVars {
        mu,
        color,
        rot,
        scale,
        opacity,
        logits,
        count: n,
    })
}

pub(super) fn init_params(model: &mut Model, rng: &mut impl rand::Rng) {
    let cfg = model.config;
    init_mlp(&mut model.params, "regr", &[cfg.feat, cfg.mlp_hidden, REGRESSOR_OUTPUTS], 1.0, rng);
}
