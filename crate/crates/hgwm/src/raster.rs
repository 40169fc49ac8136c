//! Differentiable tile-based Gaussian splatting.
//!
//! Each Gaussian is projected to a 2D splat with covariance
//! `J W Σ Wᵀ Jᵀ + δ I`, binned into square tiles by its 3σ footprint, and
//! composited front to back. The per-splat opacity falloff is a C¹ kernel
//! with compact support on the 3σ ellipse (see [`kernel`]), so the tiled
//! path and the brute-force oracle agree exactly and gradients are
//! continuous across the footprint boundary.
//!
//! The backward pass is derived by hand: it replays each pixel's blend
//! list, walks it in reverse with the running suffix colour, and chains
//! through the conic, the projected covariance, the projection Jacobian and
//! the quaternion-to-rotation map.

use std::rc::Rc;

use nalgebra::{Matrix2, Matrix2x3};

use crate::autodiff::{CustomOp, Tensor};
use crate::camera::{Camera, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::image::{LabelImage, RgbImage, IGNORE_LABEL};
use crate::types::{GaussianParams, GaussianSet, ParamGroup, NUM_CLASSES};

/// Squared Mahalanobis radius of the splat support (3σ).
pub const SUPPORT_M2: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Upper clamp on per-splat alpha.
    pub alpha_max: f64,
    /// Added to the projected covariance diagonal (px²); keeps every splat
    /// at least about one pixel wide and the conic well conditioned.
    pub cov_dilation: f64,
    /// A pixel stops compositing once its transmittance drops below this.
    pub early_stop: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_max: 0.99,
            cov_dilation: 0.3,
            early_stop: 1e-7,
            background: [0.0; 3],
        }
    }
}

impl RasterConfig {
    /// The oracle configuration: no early termination.
    pub fn exact(&self) -> Self {
        Self {
            early_stop: 1e-7,
            ..*self
        }
    }
}

/// A Gaussian projected onto one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Projected covariance including the dilation, `[[a, b], [b, c]]`.
    pub cov2d: [[f64; 2]; 2],
    /// Inverse of `cov2d` as `(a, b, c)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub source_index: usize,
    /// 3σ radius along the major axis, pixels.
    pub radius: f64,
}

impl Splat2D {
    pub fn mahalanobis2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }
}

/// Normalized opacity falloff and its derivative with respect to the
/// squared Mahalanobis distance `m`: `e^{-m/2}` minus its first-order
/// Taylor expansion at `m = 9`, rescaled so the peak is 1. Zero (with zero
/// slope) for `m >= 9`.
pub fn kernel(m: f64) -> (f64, f64) {
    if !(m < SUPPORT_M2) {
        return (0.0, 0.0);
    }
    let e9 = (-0.5 * SUPPORT_M2).exp();
    let g0 = 1.0 - e9 - 0.5 * e9 * SUPPORT_M2;
    let em = (-0.5 * m).exp();
    let g = em - e9 + 0.5 * e9 * (m - SUPPORT_M2);
    let dg = -0.5 * em + 0.5 * e9;
    (g / g0, dg / g0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, `H*W*3`.
    pub rgb: Vec<f64>,
    /// Interleaved accumulated instance logits, `H*W*3`.
    pub logits: Vec<f64>,
    /// Blended camera-frame depth, `H*W`.
    pub depth: Vec<f64>,
    /// Residual transmittance, `H*W`.
    pub transmittance: Vec<f64>,
}

impl RenderOutput {
    fn blank(width: usize, height: usize, bg: [f64; 3]) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: bg.iter().cycle().take(3 * n).copied().collect(),
            logits: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            transmittance: vec![1.0; n],
        }
    }

    pub fn rgb_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }

    /// Argmax of the logit map; pixels whose accumulated opacity is at most
    /// `min_coverage` get [`IGNORE_LABEL`].
    pub fn label_image(&self, min_coverage: f64) -> LabelImage {
        let data = (0..self.width * self.height)
            .map(|p| {
                if 1.0 - self.transmittance[p] <= min_coverage {
                    IGNORE_LABEL
                } else {
                    argmax(&self.logits[3 * p..3 * p + 3]) as u8
                }
            })
            .collect();
        LabelImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Depth normalized by coverage where coverage exceeds one half, else 0.
    pub fn surface_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.transmittance)
            .map(|(d, t)| if 1.0 - t > 0.5 { d / (1.0 - t) } else { 0.0 })
            .collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Upstream gradients for [`render_backward`]; `depth` is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderUpstream {
    pub rgb: Vec<f64>,
    pub logits: Vec<f64>,
    pub depth: Option<Vec<f64>>,
}

fn validate(p: &GaussianParams) -> Result<()> {
    p.check_shapes()?;
    if !p.all_finite() {
        return Err(Error::NonFinite {
            what: "gaussian parameters given to the rasterizer".into(),
        });
    }
    for i in 0..p.len() {
        let q = &p.rot[4 * i..4 * i + 4];
        if q.iter().map(|v| v * v).sum::<f64>() < 1e-24 {
            return Err(Error::invalid("gaussian rot", format!("zero quaternion at index {i}")));
        }
    }
    Ok(())
}

fn quat_of(p: &GaussianParams, i: usize) -> ([f64; 4], f64) {
    let q = &p.rot[4 * i..4 * i + 4];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

fn rotation(q: [f64; 4]) -> Mat3 {
    crate::geometry::quat_to_matrix(q)
}

fn covariance3d(p: &GaussianParams, i: usize) -> (Mat3, Mat3, [f64; 3]) {
    let (q, _) = quat_of(p, i);
    let r = rotation(q);
    let s = [p.scale[3 * i], p.scale[3 * i + 1], p.scale[3 * i + 2]];
    let m = r * Mat3::from_diagonal(&Vec3::new(s[0], s[1], s[2]));
    (m * m.transpose(), r, s)
}

fn projection_jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let (fx, fy) = (cam.fx(), cam.fy());
    let iz = 1.0 / t.z;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz)
}

/// Projects Gaussian `i`; `None` when it lies at or behind the near plane or
/// its 3σ footprint misses every pixel centre.
pub fn project_gaussian(p: &GaussianParams, i: usize, cam: &Camera, cfg: &RasterConfig) -> Option<Splat2D> {
    let mu = Vec3::new(p.mu[3 * i], p.mu[3 * i + 1], p.mu[3 * i + 2]);
    let t = cam.world_to_camera(&mu);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (sigma, _, _) = covariance3d(p, i);
    let jw = projection_jacobian(cam, &t) * cam.rotation();
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * cfg.cov_dilation;
    let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mean2d = [cam.fx() * t.x / t.z + cam.cx(), cam.fy() * t.y / t.z + cam.cy()];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mean2d[0] + radius < 0.0 || mean2d[0] - radius > w - 1.0 || mean2d[1] + radius < 0.0 || mean2d[1] - radius > h - 1.0 {
        return None;
    }
    Some(Splat2D {
        mean2d,
        cov2d: [[a, b], [b, c]],
        conic: [c / det, -b / det, a / det],
        depth: t.z,
        source_index: i,
        radius,
    })
}

/// All visible splats, sorted front to back with ties broken by index.
pub fn project_all(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = (0..p.len()).filter_map(|i| project_gaussian(p, i, cam, cfg)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    splats
}

/// One blend contribution at a pixel.
#[derive(Clone, Copy)]
struct Hit {
    splat: usize,
    alpha: f64,
    /// Transmittance in front of this splat.
    trans: f64,
    m: f64,
    clamped: bool,
}

/// Composites the ordered candidate list at pixel `(px, py)`.
fn blend_pixel(
    splats: &[Splat2D],
    candidates: &[usize],
    p: &GaussianParams,
    px: f64,
    py: f64,
    cfg: &RasterConfig,
    mut record: Option<&mut Vec<Hit>>,
) -> ([f64; 3], [f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut lg = [0.0; 3];
    let mut depth = 0.0;
    for &k in candidates {
        let s = &splats[k];
        let m = s.mahalanobis2(px, py);
        let (g, _) = kernel(m);
        if g <= 0.0 {
            continue;
        }
        let i = s.source_index;
        let raw = p.opacity[i] * g;
        let clamped = raw > cfg.alpha_max;
        let alpha = raw.clamp(0.0, cfg.alpha_max);
        if alpha <= 0.0 {
            continue;
        }
        let w = alpha * t;
        for c in 0..3 {
            rgb[c] += w * p.color[3 * i + c];
            lg[c] += w * p.logits[3 * i + c];
        }
        depth += w * s.depth;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Hit {
                splat: k,
                alpha,
                trans: t,
                m,
                clamped,
            });
        }
        t *= 1.0 - alpha;
        if t < cfg.early_stop {
            break;
        }
    }
    for c in 0..3 {
        rgb[c] += t * cfg.background[c];
    }
    (rgb, lg, depth, t)
}

struct TileBins {
    tiles_x: usize,
    lists: Vec<Vec<usize>>,
}

fn bin_tiles(splats: &[Splat2D], cam: &Camera, tile: usize) -> TileBins {
    let (w, h) = (cam.width(), cam.height());
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d[0] - s.radius).ceil().max(0.0) as usize) / tile;
        let x1 = ((s.mean2d[0] + s.radius).floor().min(w as f64 - 1.0).max(0.0) as usize) / tile;
        let y0 = ((s.mean2d[1] - s.radius).ceil().max(0.0) as usize) / tile;
        let y1 = ((s.mean2d[1] + s.radius).floor().min(h as f64 - 1.0).max(0.0) as usize) / tile;
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(k);
            }
        }
    }
    TileBins { tiles_x, lists }
}

impl TileBins {
    fn for_pixel(&self, x: usize, y: usize, tile: usize) -> &[usize] {
        &self.lists[(y / tile) * self.tiles_x + x / tile]
    }
}

fn render_with(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig, tiled: bool) -> Result<RenderOutput> {
    validate(p)?;
    if cfg.tile_size == 0 {
        return Err(Error::invalid("tile size", "must be positive"));
    }
    let (w, h) = (cam.width(), cam.height());
    let mut out = RenderOutput::blank(w, h, cfg.background);
    let splats = project_all(p, cam, cfg);
    let all: Vec<usize> = (0..splats.len()).collect();
    let bins = tiled.then(|| bin_tiles(&splats, cam, cfg.tile_size));
    for y in 0..h {
        for x in 0..w {
            let cands = match &bins {
                Some(b) => b.for_pixel(x, y, cfg.tile_size),
                None => &all,
            };
            let (rgb, lg, d, t) = blend_pixel(&splats, cands, p, x as f64, y as f64, cfg, None);
            let pix = y * w + x;
            out.rgb[3 * pix..3 * pix + 3].copy_from_slice(&rgb);
            out.logits[3 * pix..3 * pix + 3].copy_from_slice(&lg);
            out.depth[pix] = d;
            out.transmittance[pix] = t;
        }
    }
    Ok(out)
}

/// Tiled renderer with early termination.
pub fn render_params(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    render_with(p, cam, cfg, true)
}

pub fn render(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    render_params(&set.to_params(), cam, cfg)
}

/// Reference renderer: every splat at every pixel, no early termination.
pub fn render_brute_force_params(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    render_with(p, cam, &cfg.exact(), false)
}

pub fn render_brute_force(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    render_brute_force_params(&set.to_params(), cam, cfg)
}

/// Per-pixel blend weights `α_i T_i` in compositing order (test support for
/// the partition-of-unity property).
pub fn blend_weights(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig, x: usize, y: usize) -> Result<(Vec<f64>, f64)> {
    validate(p)?;
    let splats = project_all(p, cam, cfg);
    let bins = bin_tiles(&splats, cam, cfg.tile_size);
    let mut hits = Vec::new();
    let (_, _, _, t) = blend_pixel(&splats, bins.for_pixel(x, y, cfg.tile_size), p, x as f64, y as f64, cfg, Some(&mut hits));
    Ok((hits.iter().map(|h| h.alpha * h.trans).collect(), t))
}

/// Gradient of `⟨upstream, render(p)⟩` with respect to every parameter
/// group. Culled Gaussians get zero gradient.
pub fn render_backward(p: &GaussianParams, cam: &Camera, cfg: &RasterConfig, up: &RenderUpstream) -> Result<GaussianParams> {
    validate(p)?;
    let (w, h) = (cam.width(), cam.height());
    let npix = w * h;
    if up.rgb.len() != 3 * npix || up.logits.len() != 3 * npix || up.depth.as_ref().is_some_and(|d| d.len() != npix) {
        return Err(Error::Shape {
            op: "render_backward upstream",
            left: vec![h, w],
            right: vec![up.rgb.len(), up.logits.len(), up.depth.as_ref().map_or(0, Vec::len)],
        });
    }
    let splats = project_all(p, cam, cfg);
    let bins = bin_tiles(&splats, cam, cfg.tile_size);
    let ns = splats.len();
    // per-splat accumulators in screen space
    let mut g_mean = vec![[0.0f64; 2]; ns];
    let mut g_conic = vec![[0.0f64; 3]; ns];
    let mut g_depth = vec![0.0f64; ns];
    let mut grads = GaussianParams {
        mu: vec![0.0; p.mu.len()],
        color: vec![0.0; p.color.len()],
        rot: vec![0.0; p.rot.len()],
        scale: vec![0.0; p.scale.len()],
        opacity: vec![0.0; p.opacity.len()],
        logits: vec![0.0; p.logits.len()],
    };
    let mut hits = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            let gc = &up.rgb[3 * pix..3 * pix + 3];
            let gl = &up.logits[3 * pix..3 * pix + 3];
            let gd = up.depth.as_ref().map_or(0.0, |d| d[pix]);
            if gc.iter().chain(gl).all(|v| *v == 0.0) && gd == 0.0 {
                continue;
            }
            hits.clear();
            let (px, py) = (x as f64, y as f64);
            let (_, _, _, t_final) = blend_pixel(&splats, bins.for_pixel(x, y, cfg.tile_size), p, px, py, cfg, Some(&mut hits));
            // Suffix sums: what lies behind the current splat, already
            // attenuated by everything between.
            let mut rest_c = [0.0; 3];
            let mut rest_l = [0.0; 3];
            let mut rest_d = 0.0;
            for c in 0..3 {
                rest_c[c] = cfg.background[c] * t_final;
            }
            // walk back to front; `rest_*` holds the absolute contribution of
            // everything behind `hit`
            for hit in hits.iter().rev() {
                let s = &splats[hit.splat];
                let i = s.source_index;
                let wgt = hit.alpha * hit.trans;
                let t_next = hit.trans * (1.0 - hit.alpha);
                let scale_behind = if t_next > 0.0 { 1.0 / t_next } else { 0.0 };
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    grads.color[3 * i + c] += wgt * gc[c];
                    grads.logits[3 * i + c] += wgt * gl[c];
                    let behind_c = rest_c[c] * scale_behind;
                    let behind_l = rest_l[c] * scale_behind;
                    d_alpha += hit.trans * (p.color[3 * i + c] - behind_c) * gc[c];
                    d_alpha += hit.trans * (p.logits[3 * i + c] - behind_l) * gl[c];
                }
                d_alpha += hit.trans * (s.depth - rest_d * scale_behind) * gd;
                g_depth[hit.splat] += wgt * gd;
                for c in 0..3 {
                    rest_c[c] += wgt * p.color[3 * i + c];
                    rest_l[c] += wgt * p.logits[3 * i + c];
                }
                rest_d += wgt * s.depth;
                if hit.clamped {
                    continue;
                }
                let (g, dg) = kernel(hit.m);
                grads.opacity[i] += d_alpha * g;
                let d_m = d_alpha * p.opacity[i] * dg;
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let [a, b, c] = s.conic;
                g_mean[hit.splat][0] += d_m * -2.0 * (a * dx + b * dy);
                g_mean[hit.splat][1] += d_m * -2.0 * (b * dx + c * dy);
                g_conic[hit.splat][0] += d_m * dx * dx;
                g_conic[hit.splat][1] += d_m * 2.0 * dx * dy;
                g_conic[hit.splat][2] += d_m * dy * dy;
            }
        }
    }
    for (k, s) in splats.iter().enumerate() {
        chain_splat(p, cam, s, g_mean[k], g_conic[k], g_depth[k], &mut grads);
    }
    Ok(grads)
}

/// Pulls screen-space gradients of one splat back to its 3D parameters.
fn chain_splat(p: &GaussianParams, cam: &Camera, s: &Splat2D, g_mean: [f64; 2], g_conic: [f64; 3], g_depth: f64, out: &mut GaussianParams) {
    let i = s.source_index;
    let mu = Vec3::new(p.mu[3 * i], p.mu[3 * i + 1], p.mu[3 * i + 2]);
    let wr = *cam.rotation();
    let t = cam.world_to_camera(&mu);
    let (fx, fy) = (cam.fx(), cam.fy());
    let iz = 1.0 / t.z;

    // conic A = cov⁻¹, with the off-diagonal counted once in g_conic[1]
    let a_mat = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_a = Matrix2::new(g_conic[0], 0.5 * g_conic[1], 0.5 * g_conic[1], g_conic[2]);
    let g_cov = -(a_mat * g_a * a_mat);

    let (sigma, r, sc) = covariance3d(p, i);
    let jac = projection_jacobian(cam, &t);
    let tm = jac * wr;
    let g_sigma = tm.transpose() * g_cov * tm;
    let g_tm = 2.0 * g_cov * tm * sigma;
    let g_j = g_tm * wr.transpose();

    let mut g_t = Vec3::zeros();
    g_t.x += g_j[(0, 2)] * (-fx * iz * iz);
    g_t.y += g_j[(1, 2)] * (-fy * iz * iz);
    g_t.z += g_j[(0, 0)] * (-fx * iz * iz)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz * iz * iz)
        + g_j[(1, 1)] * (-fy * iz * iz)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz * iz * iz);
    g_t.x += g_mean[0] * fx * iz;
    g_t.y += g_mean[1] * fy * iz;
    g_t.z += -g_mean[0] * fx * t.x * iz * iz - g_mean[1] * fy * t.y * iz * iz + g_depth;
    let g_mu = wr.transpose() * g_t;
    for c in 0..3 {
        out.mu[3 * i + c] += g_mu[c];
    }

    // Σ = M Mᵀ with M = R diag(s)
    let m = r * Mat3::from_diagonal(&Vec3::new(sc[0], sc[1], sc[2]));
    let g_m = 2.0 * g_sigma * m;
    for c in 0..3 {
        let mut acc = 0.0;
        for row in 0..3 {
            acc += g_m[(row, c)] * r[(row, c)];
        }
        out.scale[3 * i + c] += acc;
    }
    let g_r = g_m * Mat3::from_diagonal(&Vec3::new(sc[0], sc[1], sc[2]));
    let (q, qn) = quat_of(p, i);
    let g_qhat = quat_matrix_vjp(q, &g_r);
    let dot: f64 = (0..4).map(|k| g_qhat[k] * q[k]).sum();
    for k in 0..4 {
        out.rot[4 * i + k] += (g_qhat[k] - q[k] * dot) / qn;
    }
}

/// Vector-Jacobian product of the unit-quaternion-to-matrix map.
fn quat_matrix_vjp(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)] + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Splits the six stacked parameter tensors fed to [`raster_op`].
fn params_from_tensors(inputs: &[&Tensor]) -> Result<GaussianParams> {
    if inputs.len() != 6 {
        return Err(Error::Autodiff(format!("rasterizer op takes 6 inputs, got {}", inputs.len())));
    }
    let p = GaussianParams {
        mu: inputs[0].data().to_vec(),
        color: inputs[1].data().to_vec(),
        rot: inputs[2].data().to_vec(),
        scale: inputs[3].data().to_vec(),
        opacity: inputs[4].data().to_vec(),
        logits: inputs[5].data().to_vec(),
    };
    p.check_shapes()?;
    Ok(p)
}

/// Channels per pixel in the [`raster_op`] output: RGB then logits.
pub const RASTER_OP_CHANNELS: usize = 3 + NUM_CLASSES;

/// The rasterizer as a differentiable tape operation. Inputs are the
/// parameter groups `[mu (N×3), color (N×3), rot (N×4), scale (N×3),
/// opacity (N×1), logits (N×3)]`; the output is `[H·W, 6]` holding RGB then
/// instance logits per pixel.
pub fn raster_op(cam: &Camera, cfg: &RasterConfig) -> Rc<CustomOp> {
    let (cam_f, cfg_f) = (cam.clone(), *cfg);
    let (cam_b, cfg_b) = (cam.clone(), *cfg);
    CustomOp::new(
        "gaussian_rasterizer",
        move |inputs| {
            let p = params_from_tensors(inputs)?;
            let out = render_params(&p, &cam_f, &cfg_f)?;
            let n = out.width * out.height;
            let mut data = Vec::with_capacity(6 * n);
            for pix in 0..n {
                data.extend_from_slice(&out.rgb[3 * pix..3 * pix + 3]);
                data.extend_from_slice(&out.logits[3 * pix..3 * pix + 3]);
            }
            Tensor::matrix(n, RASTER_OP_CHANNELS, data)
        },
        move |inputs, _out, g| {
            let p = params_from_tensors(inputs)?;
            let n = cam_b.pixel_count();
            let mut up = RenderUpstream {
                rgb: Vec::with_capacity(3 * n),
                logits: Vec::with_capacity(3 * n),
                depth: None,
            };
            for pix in 0..n {
                up.rgb.extend_from_slice(&g[6 * pix..6 * pix + 3]);
                up.logits.extend_from_slice(&g[6 * pix + 3..6 * pix + 6]);
            }
            let grads = render_backward(&p, &cam_b, &cfg_b, &up)?;
            Ok(ParamGroup::ALL.iter().map(|&grp| grads.group(grp).to_vec()).collect())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Gaussian;

    fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(f, f, (w / 2) as f64, (h / 2) as f64, Mat3::identity(), Vec3::zeros(), w, h).unwrap()
    }

    fn g(mu: [f64; 3], color: [f64; 3], scale: f64, opacity: f64, logits: [f64; 3]) -> Gaussian {
        Gaussian::new(mu, color, [1.0, 0.0, 0.0, 0.0], [scale; 3], opacity, logits).unwrap()
    }

    #[test]
    fn kernel_is_c1_at_support_boundary() {
        assert_eq!(kernel(0.0).0, 1.0);
        let (v, d) = kernel(SUPPORT_M2 - 1e-9);
        assert!(v.abs() < 1e-12 && d.abs() < 1e-9);
        assert_eq!(kernel(9.5), (0.0, 0.0));
    }

    #[test]
    fn isotropic_projection_on_axis() {
        let cam = axis_camera(128, 128, 100.0);
        let p = GaussianSet::new(vec![g([0.0, 0.0, 1.0], [0.5; 3], 0.1, 1.0, [0.0; 3])], 0).to_params();
        let cfg = RasterConfig {
            cov_dilation: 0.0,
            ..Default::default()
        };
        let s = project_gaussian(&p, 0, &cam, &cfg).unwrap();
        assert!((s.cov2d[0][0] - 100.0).abs() < 1e-9);
        assert!((s.cov2d[1][1] - 100.0).abs() < 1e-9);
        assert!(s.cov2d[0][1].abs() < 1e-12);
    }

    #[test]
    fn single_opaque_splat_at_peak_is_clamped() {
        let cam = axis_camera(16, 16, 100.0);
        let set = GaussianSet::new(vec![g([0.0, 0.0, 1.0], [0.2, 0.4, 0.6], 0.05, 1.0, [0.2, 0.3, 0.5])], 0);
        let out = render(&set, &cam, &RasterConfig::default()).unwrap();
        let pix = 8 * 16 + 8;
        let rgb = &out.rgb[3 * pix..3 * pix + 3];
        for (v, e) in rgb.iter().zip([0.198, 0.396, 0.594]) {
            assert!((v - e).abs() < 1e-12, "{rgb:?}");
        }
        let lg = &out.logits[3 * pix..3 * pix + 3];
        for (v, e) in lg.iter().zip([0.2, 0.3, 0.5]) {
            assert!((v - 0.99 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn two_half_transparent_splats_composite() {
        let cam = axis_camera(16, 16, 100.0);
        let set = GaussianSet::new(
            vec![
                g([0.0, 0.0, 2.0], [0.0, 0.0, 1.0], 0.05, 0.5, [0.0; 3]),
                g([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 0.05, 0.5, [0.0; 3]),
            ],
            0,
        );
        let out = render(&set, &cam, &RasterConfig::default()).unwrap();
        let pix = 8 * 16 + 8;
        let rgb = &out.rgb[3 * pix..3 * pix + 3];
        for (v, e) in rgb.iter().zip([0.5, 0.0, 0.25]) {
            assert!((v - e).abs() < 1e-12, "{rgb:?}");
        }
    }

    #[test]
    fn empty_set_renders_background() {
        let cam = axis_camera(8, 8, 10.0);
        let out = render_brute_force(&GaussianSet::default(), &cam, &RasterConfig::default()).unwrap();
        assert!(out.rgb.iter().all(|v| *v == 0.0));
        assert!(out.transmittance.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn behind_camera_is_culled_and_gets_no_gradient() {
        let cam = axis_camera(8, 8, 10.0);
        let p = GaussianSet::new(vec![g([0.0, 0.0, -1.0], [0.5; 3], 0.1, 0.5, [0.0; 3])], 0).to_params();
        assert!(project_gaussian(&p, 0, &cam, &RasterConfig::default()).is_none());
        let up = RenderUpstream {
            rgb: vec![1.0; 192],
            logits: vec![1.0; 192],
            depth: None,
        };
        let grads = render_backward(&p, &cam, &RasterConfig::default(), &up).unwrap();
        assert!(ParamGroup::ALL.iter().all(|&grp| grads.group(grp).iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn rejects_non_finite_and_bad_upstream() {
        let cam = axis_camera(8, 8, 10.0);
        let mut p = GaussianSet::new(vec![g([0.0, 0.0, 1.0], [0.5; 3], 0.1, 0.5, [0.0; 3])], 0).to_params();
        let up = RenderUpstream {
            rgb: vec![0.0; 3],
            logits: vec![0.0; 3],
            depth: None,
        };
        assert!(matches!(render_backward(&p, &cam, &RasterConfig::default(), &up), Err(Error::Shape { .. })));
        p.mu[0] = f64::NAN;
        assert!(matches!(render_params(&p, &cam, &RasterConfig::default()), Err(Error::NonFinite { .. })));
    }
}
