mod common;

use common::{perturb, random_camera, random_params, rel_err};
use hgwm::camera::Camera;
use hgwm::geometry::{Mat3, Vec3};
use hgwm::raster::{
    blend_weights, project_gaussian, render_backward, render_brute_force_params, render_params, RasterConfig, RenderOutput,
    RenderUpstream,
};
use hgwm::types::{GaussianParams, ParamGroup};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let pairs = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .chain(a.logits.iter().zip(&b.logits))
        .chain(a.depth.iter().zip(&b.depth))
        .chain(a.transmittance.iter().zip(&b.transmittance));
    pairs.map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Loss `Σ (rgb - target)² + Σ w ⊙ logits + Σ v ⊙ depth` and its upstream.
fn loss_and_upstream(out: &RenderOutput, target: &[f64], wl: &[f64], wd: &[f64]) -> (f64, RenderUpstream) {
    let mut l = 0.0;
    let mut up = RenderUpstream {
        rgb: vec![0.0; out.rgb.len()],
        logits: wl.to_vec(),
        depth: Some(wd.to_vec()),
    };
    for i in 0..out.rgb.len() {
        let d = out.rgb[i] - target[i];
        l += d * d;
        up.rgb[i] = 2.0 * d;
    }
    l += out.logits.iter().zip(wl).map(|(a, b)| a * b).sum::<f64>();
    l += out.depth.iter().zip(wd).map(|(a, b)| a * b).sum::<f64>();
    (l, up)
}

#[test]
fn tiled_render_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = RasterConfig::default();
    for trial in 0..40 {
        let n = rng.gen_range(1..=100);
        let p = random_params(&mut rng, n);
        let size = if trial % 2 == 0 { 16 } else { 32 };
        let cam = random_camera(&mut rng, size);
        let fast = render_params(&p, &cam, &cfg).unwrap();
        let slow = render_brute_force_params(&p, &cam, &cfg).unwrap();
        let d = max_abs_diff(&fast, &slow);
        assert!(d < 1e-5, "trial {trial}: {d}");
    }
}

#[test]
fn projected_covariance_matches_numerical_jacobian() {
    // σ f / z = 10 px on the optical axis
    let cam = Camera::new(100.0, 100.0, 64.0, 64.0, Mat3::identity(), Vec3::zeros(), 128, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RasterConfig {
        cov_dilation: 0.0,
        ..Default::default()
    };
    for _ in 0..20 {
        let mut p = random_params(&mut rng, 1);
        p.mu = vec![rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.8..2.0)];
        let s = project_gaussian(&p, 0, &cam, &cfg).unwrap();
        // numerical Jacobian of the pinhole map at mu
        let proj = |x: Vec3| Vec3::new(100.0 * x.x / x.z + 64.0, 100.0 * x.y / x.z + 64.0, 0.0);
        let mu = Vec3::new(p.mu[0], p.mu[1], p.mu[2]);
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 2];
        for c in 0..3 {
            let mut e = Vec3::zeros();
            e[c] = h;
            let d = (proj(mu + e) - proj(mu - e)) / (2.0 * h);
            jac[0][c] = d.x;
            jac[1][c] = d.y;
        }
        let q = &p.rot;
        let r = hgwm::geometry::quat_to_matrix([q[0], q[1], q[2], q[3]]);
        let sd = Mat3::from_diagonal(&Vec3::new(p.scale[0], p.scale[1], p.scale[2]));
        let sigma = r * sd * sd * r.transpose();
        for a in 0..2 {
            for b in 0..2 {
                let mut v = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        v += jac[a][i] * sigma[(i, j)] * jac[b][j];
                    }
                }
                assert!((v - s.cov2d[a][b]).abs() < 1e-5 * v.abs().max(1.0), "{v} vs {}", s.cov2d[a][b]);
            }
        }
    }
    let mut p = random_params(&mut rng, 1);
    p.mu = vec![0.0, 0.0, 1.0];
    p.rot = vec![1.0, 0.0, 0.0, 0.0];
    p.scale = vec![0.1; 3];
    let s = project_gaussian(&p, 0, &cam, &cfg).unwrap();
    assert!((s.cov2d[0][0] - 100.0).abs() < 1e-9 && (s.cov2d[1][1] - 100.0).abs() < 1e-9);
    assert_eq!(s.cov2d[0][1], 0.0);
}

#[test]
fn input_order_does_not_change_the_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RasterConfig::default();
    for _ in 0..10 {
        let p = random_params(&mut rng, 30);
        let cam = random_camera(&mut rng, 32);
        let mut order: Vec<usize> = (0..30).collect();
        order.reverse();
        let mut q = GaussianParams::with_capacity(30);
        for &i in &order {
            for g in ParamGroup::ALL {
                let w = g.width();
                let src = p.group(g)[w * i..w * (i + 1)].to_vec();
                q.group_mut(g).extend(src);
            }
        }
        let a = render_params(&p, &cam, &cfg).unwrap();
        let b = render_params(&q, &cam, &cfg).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.transmittance, b.transmittance);
    }
}

#[test]
fn blend_weights_and_transmittance_partition_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = RasterConfig::default();
    for _ in 0..10 {
        let p = random_params(&mut rng, 50);
        let cam = random_camera(&mut rng, 16);
        for y in 0..16 {
            for x in 0..16 {
                let (w, t) = blend_weights(&p, &cam, &cfg, x, y).unwrap();
                let s: f64 = w.iter().sum::<f64>() + t;
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn nearly_transparent_insertion_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = RasterConfig::default();
    let p = random_params(&mut rng, 20);
    let cam = random_camera(&mut rng, 32);
    let base = render_params(&p, &cam, &cfg).unwrap();
    let mut extra = random_params(&mut rng, 1);
    extra.opacity[0] = 1e-9;
    let mut q = p.clone();
    for g in ParamGroup::ALL {
        let v = extra.group(g).to_vec();
        q.group_mut(g).extend(v);
    }
    let with = render_params(&q, &cam, &cfg).unwrap();
    assert!(max_abs_diff(&base, &with) < 1e-6);
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = random_params(&mut rng, 10);
    let cam = random_camera(&mut rng, 16);
    let up = RenderUpstream {
        rgb: vec![0.0; 768],
        logits: vec![0.0; 768],
        depth: None,
    };
    let g = render_backward(&p, &cam, &RasterConfig::default(), &up).unwrap();
    assert!(ParamGroup::ALL.iter().all(|&grp| g.group(grp).iter().all(|v| *v == 0.0)));
}

fn fd_check(p: &GaussianParams, cams: &[Camera], seed: u64, tol: impl Fn(ParamGroup) -> f64) {
    let cfg = RasterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setups: Vec<_> = cams
        .iter()
        .map(|c| {
            let n = c.pixel_count();
            let target: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let wl: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wd: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (target, wl, wd)
        })
        .collect();
    let total = |q: &GaussianParams| -> f64 {
        cams.iter()
            .zip(&setups)
            .map(|(c, (t, wl, wd))| loss_and_upstream(&render_brute_force_params(q, c, &cfg).unwrap(), t, wl, wd).0)
            .sum()
    };
    let mut analytic = GaussianParams::default();
    for g in ParamGroup::ALL {
        *analytic.group_mut(g) = vec![0.0; p.group(g).len()];
    }
    for (c, (t, wl, wd)) in cams.iter().zip(&setups) {
        let (_, up) = loss_and_upstream(&render_params(p, c, &cfg).unwrap(), t, wl, wd);
        let g = render_backward(p, c, &cfg, &up).unwrap();
        for grp in ParamGroup::ALL {
            for (a, b) in analytic.group_mut(grp).iter_mut().zip(g.group(grp)) {
                *a += b;
            }
        }
    }
    let h = 1e-5;
    for grp in ParamGroup::ALL {
        for idx in 0..p.group(grp).len() {
            let num = (total(&perturb(p, grp, idx, h)) - total(&perturb(p, grp, idx, -h))) / (2.0 * h);
            let a = analytic.group(grp)[idx];
            let e = rel_err(a, num, 1e-6);
            assert!(e < tol(grp), "{grp:?}[{idx}]: analytic {a} numeric {num} rel {e}");
        }
    }
}

#[test]
fn single_gaussian_color_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = random_params(&mut rng, 1);
    p.mu = vec![0.0; 3];
    let cam = random_camera(&mut rng, 16);
    fd_check(&p, &[cam], 1, |g| if g == ParamGroup::Color { 1e-4 } else { 1e-3 });
}

#[test]
fn full_scene_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = random_params(&mut rng, 20);
    let cams: Vec<Camera> = (0..3).map(|_| random_camera(&mut rng, 16)).collect();
    fd_check(&p, &cams, 2, |_| 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn oracle_equivalence_property(seed in 0u64..10_000, n in 1usize..=100, big in proptest::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, n);
        let cam = random_camera(&mut rng, if big { 32 } else { 16 });
        let cfg = RasterConfig::default();
        let d = max_abs_diff(&render_params(&p, &cam, &cfg).unwrap(), &render_brute_force_params(&p, &cam, &cfg).unwrap());
        prop_assert!(d < 1e-5);
    }
}
