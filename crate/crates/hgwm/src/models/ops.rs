//! Tape operations specific to the scene models.

use std::rc::Rc;

use crate::action::WorkspaceBounds;
use crate::autodiff::{CustomOp, Tensor};
use crate::error::{Error, Result};
use crate::geometry::quat_mul;

/// Marks a grid cell without its own feature row.
pub const NO_ROW: u32 = u32::MAX;

/// Sparse view of a dense grid: `lookup[cell]` is the feature row of a
/// cell, or [`NO_ROW`] when the cell carries the shared background row.
#[derive(Clone, Debug)]
pub struct CellIndex {
    pub grid: usize,
    pub bounds: WorkspaceBounds,
    pub lookup: Rc<Vec<u32>>,
    pub background_row: usize,
}

impl CellIndex {
    pub fn linear(&self, i: [i64; 3]) -> Option<usize> {
        let g = self.grid as i64;
        if i.iter().any(|&v| v < 0 || v >= g) {
            return None;
        }
        Some(((i[0] * g + i[1]) * g + i[2]) as usize)
    }

    pub fn row_of(&self, i: [i64; 3]) -> usize {
        match self.linear(i).map(|c| self.lookup[c]) {
            Some(r) if r != NO_ROW => r as usize,
            _ => self.background_row,
        }
    }

    /// The eight taps around `p` on the lattice of cell centres:
    /// `(row, weight, ∂weight/∂p)`. Per-axis weights follow the smoothstep
    /// `3t² − 2t³` instead of `t`, so the sampled field is C¹ across
    /// lattice planes and still reproduces the cell values at the centres.
    pub fn taps(&self, p: [f64; 3]) -> [(usize, f64, [f64; 3]); 8] {
        let ext = self.bounds.extent();
        let cell = ext.map(|e| e / self.grid as f64);
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        let mut slope = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.lo[a]) / cell[a] - 0.5;
            let f = u.floor();
            base[a] = f as i64;
            let t = u - f;
            frac[a] = t * t * (3.0 - 2.0 * t);
            slope[a] = 6.0 * t * (1.0 - t) / cell[a];
        }
        let mut out = [(0usize, 0.0, [0.0; 3]); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let bits = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
            let f1 = [0, 1, 2].map(|a| if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] });
            let d1 = [0, 1, 2].map(|a| if bits[a] == 1 { slope[a] } else { -slope[a] });
            let w = f1[0] * f1[1] * f1[2];
            let dw = [d1[0] * f1[1] * f1[2], d1[1] * f1[0] * f1[2], d1[2] * f1[0] * f1[1]];
            let idx = [0, 1, 2].map(|a| base[a] + bits[a] as i64);
            *slot = (self.row_of(idx), w, dw);
        }
        out
    }
}

/// Smoothed trilinear sampling of per-cell feature rows at world positions.
/// Inputs: `features [R, F]`, `positions [N, 3]`; output `[N, F]`.
pub fn trilinear_op(index: CellIndex) -> Rc<CustomOp> {
    let fwd_index = index.clone();
    CustomOp::new(
        "trilinear_sample",
        move |inputs| {
            let (feats, pos) = two_inputs(inputs)?;
            let f = feature_width(feats, &fwd_index)?;
            let n = pos.len() / 3;
            let mut out = vec![0.0; n * f];
            for i in 0..n {
                let taps = fwd_index.taps([pos.data()[3 * i], pos.data()[3 * i + 1], pos.data()[3 * i + 2]]);
                for (row, w, _) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    let src = &feats.data()[row * f..(row + 1) * f];
                    for (o, s) in out[i * f..(i + 1) * f].iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
            Tensor::matrix(n, f, out)
        },
        move |inputs, _out, g| {
            let (feats, pos) = two_inputs(inputs)?;
            let f = feature_width(feats, &index)?;
            let n = pos.len() / 3;
            let mut g_feat = vec![0.0; feats.len()];
            let mut g_pos = vec![0.0; pos.len()];
            for i in 0..n {
                let taps = index.taps([pos.data()[3 * i], pos.data()[3 * i + 1], pos.data()[3 * i + 2]]);
                let gi = &g[i * f..(i + 1) * f];
                for (row, w, dw) in taps {
                    let src = &feats.data()[row * f..(row + 1) * f];
                    let dot: f64 = src.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for a in 0..3 {
                        g_pos[3 * i + a] += dw[a] * dot;
                    }
                    for (d, s) in g_feat[row * f..(row + 1) * f].iter_mut().zip(gi) {
                        *d += w * s;
                    }
                }
            }
            Ok(vec![g_feat, g_pos])
        },
    )
}

fn two_inputs<'a>(inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor)> {
    match inputs {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Autodiff(format!("expected 2 inputs, got {}", inputs.len()))),
    }
}

fn feature_width(feats: &Tensor, index: &CellIndex) -> Result<usize> {
    let (r, f) = feats
        .rows_cols()
        .ok_or_else(|| Error::Autodiff("trilinear features must be a matrix".into()))?;
    if index.background_row >= r {
        return Err(Error::Shape {
            op: "trilinear_sample",
            left: vec![r, f],
            right: vec![index.background_row],
        });
    }
    Ok(f)
}

/// Row-wise Hamilton product of two `[N, 4]` quaternion matrices.
pub fn quat_mul_op() -> Rc<CustomOp> {
    CustomOp::new(
        "quat_mul_rows",
        |inputs| {
            let (a, b) = two_inputs(inputs)?;
            if a.shape() != b.shape() || a.len() % 4 != 0 {
                return Err(Error::Shape {
                    op: "quat_mul_rows",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let n = a.len() / 4;
            let mut out = Vec::with_capacity(4 * n);
            for i in 0..n {
                out.extend_from_slice(&quat_mul(q4(a.data(), i), q4(b.data(), i)));
            }
            Tensor::matrix(n, 4, out)
        },
        |inputs, _out, g| {
            let (a, b) = two_inputs(inputs)?;
            let n = a.len() / 4;
            let mut ga = Vec::with_capacity(4 * n);
            let mut gb = Vec::with_capacity(4 * n);
            for i in 0..n {
                let gi = q4(g, i);
                ga.extend_from_slice(&quat_mul(gi, conj(q4(b.data(), i))));
                gb.extend_from_slice(&quat_mul(conj(q4(a.data(), i)), gi));
            }
            Ok(vec![ga, gb])
        },
    )
}

fn q4(d: &[f64], i: usize) -> [f64; 4] {
    [d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]]
}

fn conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Row-wise `normalize(base + delta)` for `[N, 4]` inputs. Rows with an
/// all-zero delta pass `base` through unchanged, so a zero update leaves an
/// already-unit quaternion bit-identical; the gradient is always the
/// Jacobian of the normalization.
pub fn add_normalize_op() -> Rc<CustomOp> {
    CustomOp::new(
        "add_normalize_rows",
        |inputs| {
            let (base, delta) = two_inputs(inputs)?;
            let (n, w) = base.rows_cols().unwrap_or((0, 0));
            if base.shape() != delta.shape() {
                return Err(Error::Shape {
                    op: "add_normalize_rows",
                    left: base.shape().to_vec(),
                    right: delta.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(n * w);
            for i in 0..n {
                let b = &base.data()[i * w..(i + 1) * w];
                let d = &delta.data()[i * w..(i + 1) * w];
                if d.iter().all(|v| *v == 0.0) && unit_norm(b) {
                    out.extend_from_slice(b);
                    continue;
                }
                let s: Vec<f64> = b.iter().zip(d).map(|(x, y)| x + y).collect();
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 1e-12) {
                    return Err(Error::NonFinite {
                        what: format!("quaternion norm in row {i}"),
                    });
                }
                out.extend(s.iter().map(|v| v / norm));
            }
            Tensor::matrix(n, w, out)
        },
        |inputs, _out, g| {
            let (base, delta) = two_inputs(inputs)?;
            let (n, w) = base.rows_cols().unwrap_or((0, 0));
            let mut grad = vec![0.0; n * w];
            for i in 0..n {
                let s: Vec<f64> = (0..w).map(|j| base.data()[i * w + j] + delta.data()[i * w + j]).collect();
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gi = &g[i * w..(i + 1) * w];
                let dot: f64 = s.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>() / norm;
                for j in 0..w {
                    grad[i * w + j] = (gi[j] - s[j] / norm * dot) / norm;
                }
            }
            Ok(vec![grad.clone(), grad])
        },
    )
}

fn unit_norm(v: &[f64]) -> bool {
    (v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12
}
