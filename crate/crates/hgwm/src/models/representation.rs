//! Observation → volumetric features.
//!
//! RGB-D pixels are unprojected into the workspace grid and mean-pooled per
//! cell, giving four input channels (mean RGB, occupancy). Two 3×3×3
//! convolutions follow, with the proprioception broadcast as extra channels
//! before the second. Only cells within two cells of an occupied cell can
//! differ from the empty-space response, so the convolutions are evaluated
//! exactly on that dilated set plus one shared background row that stands
//! for every other cell (and for space beyond the grid boundary).

use std::rc::Rc;

use super::ops::{CellIndex, NO_ROW};
use super::Model;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::Observation;

const INPUT_CHANNELS: usize = 4;
const PROPRIO_CHANNELS: usize = 3;
/// Fixed-point scale for colour sums: integer accumulation makes the
/// per-cell mean independent of the order in which views are visited.
const FIXED_ONE: f64 = (1u64 << 32) as f64;

/// Volumetric representation of one observation, living on a tape.
#[derive(Clone, Debug)]
pub struct VolumetricFeature {
    /// Linear cell index of each feature row, ascending.
    pub cells: Vec<usize>,
    /// `[cells.len() + 1, F]`; the final row is the background response.
    pub features: Var,
    /// Occupancy channel of each feature row's cell.
    pub occupancy: Vec<f64>,
    pub index: CellIndex,
}

impl VolumetricFeature {
    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    /// Rows whose occupancy exceeds `threshold`.
    pub fn occupied_rows(&self, threshold: f64) -> Vec<usize> {
        (0..self.cells.len()).filter(|&r| self.occupancy[r] > threshold).collect()
    }

    /// Integer coordinates of a linear cell index.
    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let g = self.index.grid;
        [cell / (g * g), (cell / g) % g, cell % g]
    }

    /// World-space centre of a cell.
    pub fn cell_center(&self, cell: usize) -> [f64; 3] {
        let c = self.cell_coords(cell);
        let b = &self.index.bounds;
        let ext = b.extent();
        [0, 1, 2].map(|a| b.lo[a] + (c[a] as f64 + 0.5) * ext[a] / self.index.grid as f64)
    }

    /// Dense `G³ × F` copy of the features (cells without a row take the
    /// background row).
    pub fn to_dense(&self, tape: &Tape) -> Vec<f64> {
        let data = tape.data(self.features);
        let f = tape.shape(self.features)[1];
        let g3 = self.index.grid.pow(3);
        let mut out = Vec::with_capacity(g3 * f);
        for cell in 0..g3 {
            let r = match self.index.lookup[cell] {
                NO_ROW => self.index.background_row,
                r => r as usize,
            };
            out.extend_from_slice(&data[r * f..(r + 1) * f]);
        }
        out
    }

    /// Dense occupancy channel, `G³` entries.
    pub fn dense_occupancy(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.index.grid.pow(3)];
        for (r, &c) in self.cells.iter().enumerate() {
            out[c] = self.occupancy[r];
        }
        out
    }
}

/// Mean colour and point count per occupied cell, ascending cell index.
pub fn pool_points(model: &Model, obs: &Observation) -> Result<Vec<(usize, [f64; 3], u64)>> {
    obs.validate()?;
    let cfg = &model.config;
    let g = cfg.grid;
    let b = cfg.bounds;
    let ext = b.extent();
    let mut sums: Vec<[u64; 3]> = vec![[0; 3]; g * g * g];
    let mut counts = vec![0u64; g * g * g];
    for view in &obs.views {
        let cam = &view.camera;
        for y in 0..cam.height() {
            for x in 0..cam.width() {
                let pix = y * cam.width() + x;
                let d = view.depth.data[pix];
                if !(d > 0.0) {
                    continue;
                }
                let p = cam.unproject(x as f64, y as f64, d);
                let p = [p.x, p.y, p.z];
                if !b.contains(p) {
                    continue;
                }
                let c = [0, 1, 2].map(|a| (((p[a] - b.lo[a]) / ext[a] * g as f64).floor().max(0.0) as usize).min(g - 1));
                let cell = (c[0] * g + c[1]) * g + c[2];
                for ch in 0..3 {
                    sums[cell][ch] += (view.rgb.data[3 * pix + ch].clamp(0.0, 1.0) * FIXED_ONE).round() as u64;
                }
                counts[cell] += 1;
            }
        }
    }
    Ok((0..g * g * g)
        .filter(|&c| counts[c] > 0)
        .map(|c| {
            let n = counts[c] as f64;
            (c, sums[c].map(|s| s as f64 / FIXED_ONE / n), counts[c])
        })
        .collect())
}

/// Cells within Chebyshev distance `r` of any cell in `seed`, ascending.
fn dilate(seed: &[usize], g: usize, r: i64) -> Vec<usize> {
    let mut mark = vec![false; g * g * g];
    let gi = g as i64;
    for &c in seed {
        let (x, y, z) = ((c / (g * g)) as i64, ((c / g) % g) as i64, (c % g) as i64);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let (a, b, cc) = (x + dx, y + dy, z + dz);
                    if a >= 0 && b >= 0 && cc >= 0 && a < gi && b < gi && cc < gi {
                        mark[((a * gi + b) * gi + cc) as usize] = true;
                    }
                }
            }
        }
    }
    (0..g * g * g).filter(|&c| mark[c]).collect()
}

fn index_for(cells: &[usize], model: &Model) -> CellIndex {
    let g = model.config.grid;
    let mut lookup = vec![NO_ROW; g * g * g];
    for (r, &c) in cells.iter().enumerate() {
        lookup[c] = r as u32;
    }
    CellIndex {
        grid: g,
        bounds: model.config.bounds,
        lookup: Rc::new(lookup),
        background_row: cells.len(),
    }
}

/// Gather indices for a 3×3×3 convolution producing rows for `out_cells`
/// (plus a trailing background row) from rows indexed by `input`.
fn conv_gather(out_cells: &[usize], input: &CellIndex) -> Vec<usize> {
    let g = input.grid as i64;
    let mut idx = Vec::with_capacity((out_cells.len() + 1) * 27);
    for &c in out_cells {
        let (x, y, z) = ((c as i64) / (g * g), ((c as i64) / g) % g, (c as i64) % g);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    idx.push(input.row_of([x + dx, y + dy, z + dz]));
                }
            }
        }
    }
    idx.extend(std::iter::repeat_n(input.background_row, 27));
    idx
}

fn conv3(tape: &mut Tape, model: &Model, name: &str, input: Var, out_cells: &[usize], in_index: &CellIndex) -> Result<Var> {
    let c_in = tape.shape(input)[1];
    let gathered = tape.gather_rows(input, Rc::new(conv_gather(out_cells, in_index)))?;
    let stacked = tape.reshape(gathered, vec![out_cells.len() + 1, 27 * c_in])?;
    let w = tape.param(&model.params, &format!("repr.{name}.w"))?;
    let b = tape.param(&model.params, &format!("repr.{name}.b"))?;
    let y = tape.linear(stacked, w, b)?;
    Ok(tape.silu(y))
}

/// Encodes an observation. With `allow_empty`, an observation with no
/// points in the workspace yields the pure background response instead of
/// an error.
pub fn represent(tape: &mut Tape, model: &Model, obs: &Observation, allow_empty: bool) -> Result<VolumetricFeature> {
    let cfg = &model.config;
    let pooled = pool_points(model, obs)?;
    if pooled.is_empty() && !allow_empty {
        return Err(Error::DegenerateObservation);
    }
    let occupied: Vec<usize> = pooled.iter().map(|(c, _, _)| *c).collect();
    let s1 = dilate(&occupied, cfg.grid, 1);
    let s2 = dilate(&occupied, cfg.grid, 2);

    // layer 0: occupied cells + background
    let idx0 = index_for(&occupied, model);
    let mut x0 = Vec::with_capacity((occupied.len() + 1) * INPUT_CHANNELS);
    for (_, rgb, _) in &pooled {
        x0.extend_from_slice(rgb);
        x0.push(1.0);
    }
    x0.extend_from_slice(&[0.0; INPUT_CHANNELS]);
    let x0 = tape.constant(Tensor::matrix(occupied.len() + 1, INPUT_CHANNELS, x0)?);

    let idx1 = index_for(&s1, model);
    let h1 = conv3(tape, model, "conv1", x0, &s1, &idx0)?;
    let pro = obs.proprio.to_vec();
    let pro = tape.constant(Tensor::matrix(s1.len() + 1, PROPRIO_CHANNELS, pro.repeat(s1.len() + 1))?);
    let h1 = tape.concat_cols(&[h1, pro])?;
    let idx2 = index_for(&s2, model);
    let features = conv3(tape, model, "conv2", h1, &s2, &idx1)?;

    let occupancy = s2.iter().map(|&c| if idx0.lookup[c] != NO_ROW { 1.0 } else { 0.0 }).collect();
    Ok(VolumetricFeature {
        cells: s2,
        features,
        occupancy,
        index: idx2,
    })
}

pub(super) fn init_params(model: &mut Model, rng: &mut impl rand::Rng) {
    let cfg = model.config;
    let p = &mut model.params;
    p.init_matrix("repr.conv1.w", 27 * INPUT_CHANNELS, cfg.conv_hidden, rng);
    p.init_const("repr.conv1.b", vec![cfg.conv_hidden], 0.0);
    p.init_matrix("repr.conv2.w", 27 * (cfg.conv_hidden + PROPRIO_CHANNELS), cfg.feat, rng);
    p.init_const("repr.conv2.b", vec![cfg.feat], 0.0);
}
