//! Occupancy-aware ray marching and emission-absorption compositing, with
//! analytic gradients for the densities and colors.
//!
//! Rays are embarrassingly parallel for forward rendering; gradient
//! accumulation happens per ray and is merged by the caller in a fixed
//! order.

use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::nn::mlp::EXP_CLAMP;
use crate::occupancy::OccupancyGrid;

/// Transmittance threshold below which compositing stops. Disabling early
/// termination perturbs a pixel by less than 2e-4 per channel.
pub const EARLY_STOP_TRANSMITTANCE: f32 = 1e-4;

/// Multiplicative factor on the density activation. With the default 100,
/// a freshly initialized network renders occupied cells near-opaque, so rays
/// terminate at the first surface the geometry prior identifies instead of
/// broadcasting color gradients along the whole ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityScaleConfig {
    pub scale: f32,
}

impl Default for DensityScaleConfig {
    fn default() -> Self {
        DensityScaleConfig { scale: 100.0 }
    }
}

impl DensityScaleConfig {
    pub fn disabled() -> Self {
        DensityScaleConfig { scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 1.0 {
            return Err(Error::config("density scale must be finite and >= 1"));
        }
        Ok(())
    }
}

/// sigma = scale * exp(clamp(raw, -15, 15)). The scale folds into the
/// activation, so d(sigma)/d(raw) = sigma inside the clamp band.
pub fn scaled_density(raw: f32, cfg: &DensityScaleConfig) -> f32 {
    cfg.scale * raw.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// Derivative of [`scaled_density`] with respect to the raw input.
pub fn scaled_density_grad(raw: f32, sigma: f32) -> f32 {
    if (-EXP_CLAMP..=EXP_CLAMP).contains(&raw) {
        sigma
    } else {
        0.0
    }
}

/// Marching parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarchConfig {
    /// Uniform step length in scene units.
    pub step: f32,
    /// Per-ray sample cap; rays needing more are truncated and reported.
    pub max_samples: usize,
    /// Early-termination transmittance threshold (0 disables).
    pub early_stop: f32,
}

impl MarchConfig {
    pub fn new(step: f32) -> Self {
        MarchConfig {
            step,
            max_samples: 1024,
            early_stop: EARLY_STOP_TRANSMITTANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::config("march step must be positive"));
        }
        if self.max_samples == 0 {
            return Err(Error::config("max samples must be positive"));
        }
        Ok(())
    }
}

/// Result of marching one ray: parametric sample positions along the ray.
#[derive(Debug, Clone, Default)]
pub struct MarchedRay {
    pub ts: Vec<f32>,
    /// True when the sample cap cut the ray short.
    pub truncated: bool,
}

/// Uniform stepping from near to far with the given phase (fraction of a
/// step, in [0,1)); a position is emitted only when its occupancy cell is
/// set. Use phase 0.5 for evaluation and a per-ray uniform phase during
/// training.
pub fn march_ray(ray: &Ray, grid: &OccupancyGrid, cfg: &MarchConfig, phase: f32) -> MarchedRay {
    let mut out = MarchedRay::default();
    if ray.degenerate {
        return out;
    }
    let bbox = grid.bbox();
    let mut i = 0u32;
    loop {
        let t = ray.near + (i as f32 + phase) * cfg.step;
        if t >= ray.far {
            break;
        }
        let p = bbox.clamp(&(ray.origin + t * ray.dir));
        if grid.occupied(&p) {
            if out.ts.len() >= cfg.max_samples {
                out.truncated = true;
                break;
            }
            out.ts.push(t);
        }
        i += 1;
    }
    out
}

/// Per-ray compositing record: everything the backward pass and the
/// conservation checks need.
#[derive(Debug, Clone)]
pub struct RaySegmentSamples {
    pub t: Vec<f32>,
    pub delta: Vec<f32>,
    pub sigma: Vec<f32>,
    pub color: Vec<[f32; 3]>,
    /// Compositing weights; `w[i] = T_i * (1 - exp(-sigma_i * delta_i))`,
    /// computed as the exact telescoping difference `T_i - T_{i+1}`.
    pub weights: Vec<f32>,
    /// Residual transmittance at termination (or at the last sample).
    pub t_end: f32,
    /// Number of samples actually composited before early termination.
    pub used: usize,
    pub background: [f32; 3],
    /// Composited pixel color.
    pub pixel: [f32; 3],
}

/// Emission-absorption compositing of one ray's samples over a background.
///
/// `C = sum_i w_i c_i + T_end * background`. Compositing stops once the
/// transmittance drops below `early_stop`; the remaining contribution is
/// folded into `t_end`.
pub fn render_ray(
    t: &[f32],
    delta: &[f32],
    sigma: &[f32],
    color: &[[f32; 3]],
    background: [f32; 3],
    early_stop: f32,
) -> Result<RaySegmentSamples> {
    let n = t.len();
    if delta.len() != n || sigma.len() != n || color.len() != n {
        return Err(Error::usage("render_ray input lengths differ"));
    }
    let mut weights = vec![0.0f32; n];
    let mut trans = 1.0f32;
    let mut used = n;
    let mut pixel = [0.0f32; 3];
    for i in 0..n {
        let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
        let t_next = trans * (1.0 - alpha);
        let w = trans - t_next;
        weights[i] = w;
        for ch in 0..3 {
            pixel[ch] += w * color[i][ch];
        }
        trans = t_next;
        if trans < early_stop {
            used = i + 1;
            break;
        }
    }
    for ch in 0..3 {
        pixel[ch] += trans * background[ch];
    }
    Ok(RaySegmentSamples {
        t: t.to_vec(),
        delta: delta.to_vec(),
        sigma: sigma.to_vec(),
        color: color.to_vec(),
        weights,
        t_end: trans,
        used,
        background,
        pixel,
    })
}

/// Gradients of a scalar loss through the compositing: given
/// `upstream = dL/dC`, returns `dL/dsigma_i` and `dL/dc_i`.
///
/// `dL/dc_i = w_i * upstream`; `dL/dsigma_i` is the closed-form derivative
/// of the weights, including the residual background term:
/// `dL/dsigma_i = delta_i * (T_{i+1} * <c_i, g> - S_i - T_end * <bg, g>)`
/// with `S_i` the suffix sum of `w_j * <c_j, g>` over `j > i`.
pub fn render_ray_backward(
    samples: &RaySegmentSamples,
    upstream: [f32; 3],
) -> (Vec<f32>, Vec<[f32; 3]>) {
    let n = samples.t.len();
    let mut d_sigma = vec![0.0f32; n];
    let mut d_color = vec![[0.0f32; 3]; n];
    if n == 0 {
        return (d_sigma, d_color);
    }
    let dot = |c: &[f32; 3]| -> f32 { c[0] * upstream[0] + c[1] * upstream[1] + c[2] * upstream[2] };

    // Reconstruct the transmittance sequence exactly as forward computed it:
    // T_{i+1} = T_i - w_i.
    let used = samples.used;
    let bg_term = samples.t_end * dot(&samples.background);
    let mut suffix = 0.0f32;
    // Walk backward accumulating the suffix of weighted colors.
    let mut trans_next = samples.t_end;
    for i in (0..used).rev() {
        let w = samples.weights[i];
        for ch in 0..3 {
            d_color[i][ch] = w * upstream[ch];
        }
        d_sigma[i] = samples.delta[i] * (trans_next * dot(&samples.color[i]) - suffix - bg_term);
        suffix += w * dot(&samples.color[i]);
        trans_next += w;
    }
    (d_sigma, d_color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight_ray() -> Ray {
        Ray {
            origin: Vector3::new(0.0, 0.0, 0.0),
            dir: Vector3::new(1.0, 0.0, 0.0),
            near: 0.0,
            far: 1.0,
            degenerate: false,
        }
    }

    /// Independent product-form compositor in f64.
    fn render_oracle_f64(
        delta: &[f32],
        sigma: &[f32],
        color: &[[f32; 3]],
        background: [f32; 3],
    ) -> [f64; 3] {
        let n = delta.len();
        let mut out = [0.0f64; 3];
        for i in 0..n {
            // T_i = prod_{j<i} exp(-sigma_j delta_j)
            let mut trans = 1.0f64;
            for j in 0..i {
                trans *= (-(sigma[j] as f64) * delta[j] as f64).exp();
            }
            let alpha = 1.0 - (-(sigma[i] as f64) * delta[i] as f64).exp();
            for ch in 0..3 {
                out[ch] += trans * alpha * color[i][ch] as f64;
            }
        }
        let mut t_end = 1.0f64;
        for j in 0..n {
            t_end *= (-(sigma[j] as f64) * delta[j] as f64).exp();
        }
        for ch in 0..3 {
            out[ch] += t_end * background[ch] as f64;
        }
        out
    }

    #[test]
    fn empty_grid_yields_no_samples() {
        let grid = OccupancyGrid::empty(16, Aabb::unit()).unwrap();
        let ray = Ray {
            origin: Vector3::new(-2.0, 0.0, 0.0),
            dir: Vector3::new(1.0, 0.0, 0.0),
            near: 1.5,
            far: 2.5,
            degenerate: false,
        };
        let m = march_ray(&ray, &grid, &MarchConfig::new(0.01), 0.5);
        assert!(m.ts.is_empty());
        assert!(!m.truncated);
    }

    #[test]
    fn fixed_phase_positions_by_hand() {
        let grid = OccupancyGrid::all_occupied(4, Aabb::unit(), 0.0).unwrap();
        let ray = Ray {
            origin: Vector3::new(-0.5, 0.0, 0.0),
            dir: Vector3::new(1.0, 0.0, 0.0),
            near: 0.0,
            far: 1.0,
            degenerate: false,
        };
        let m = march_ray(&ray, &grid, &MarchConfig::new(0.25), 0.5);
        let expect = [0.125f32, 0.375, 0.625, 0.875];
        assert_eq!(m.ts.len(), 4);
        for (a, b) in m.ts.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn emitted_samples_respect_occupancy() {
        // Occupy only x < 0 half of the box.
        let mut grid = OccupancyGrid::empty(16, Aabb::unit()).unwrap();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..8 {
                    grid.set_cell([x, y, z], true);
                }
            }
        }
        let ray = Ray {
            origin: Vector3::new(-1.0, 0.01, 0.02),
            dir: Vector3::new(1.0, 0.0, 0.0),
            near: 0.5,
            far: 1.5,
            degenerate: false,
        };
        let cfg = MarchConfig::new(0.013);
        let m = march_ray(&ray, &grid, &cfg, 0.5);
        assert!(!m.ts.is_empty());
        for &t in &m.ts {
            assert!(grid.occupied(&(ray.origin + t * ray.dir)));
        }
        // Recheck skipped uniform steps against the occupied oracle.
        let mut i = 0;
        loop {
            let t = ray.near + (i as f32 + 0.5) * cfg.step;
            if t >= ray.far {
                break;
            }
            let p = ray.origin + t * ray.dir;
            let emitted = m.ts.iter().any(|&e| (e - t).abs() < 1e-7);
            assert_eq!(grid.occupied(&p), emitted, "t = {t}");
            i += 1;
        }
    }

    #[test]
    fn sample_cap_truncates_and_reports() {
        let grid = OccupancyGrid::all_occupied(4, Aabb::unit(), 0.0).unwrap();
        let ray = straight_ray();
        let mut cfg = MarchConfig::new(0.001);
        cfg.max_samples = 100;
        let m = march_ray(&ray, &grid, &cfg, 0.5);
        assert_eq!(m.ts.len(), 100);
        assert!(m.truncated);
    }

    #[test]
    fn zero_samples_render_background() {
        let s = render_ray(&[], &[], &[], &[], [0.2, 0.4, 0.6], EARLY_STOP_TRANSMITTANCE).unwrap();
        assert_eq!(s.pixel, [0.2, 0.4, 0.6]);
        assert_eq!(s.t_end, 1.0);
    }

    #[test]
    fn opaque_sample_saturates() {
        let s = render_ray(
            &[0.5],
            &[1.0],
            &[1e6],
            &[[1.0, 0.0, 0.0]],
            [1.0, 1.0, 1.0],
            EARLY_STOP_TRANSMITTANCE,
        )
        .unwrap();
        assert!((s.pixel[0] - 1.0).abs() < 1e-5);
        assert!(s.pixel[1].abs() < 1e-5);
        assert!(s.pixel[2].abs() < 1e-5);
    }

    #[test]
    fn three_half_opacity_samples_telescoping() {
        // sigma * delta = ln 2 each: C = (1 - 1/8) on every channel over a
        // black background.
        let ln2 = std::f32::consts::LN_2;
        let s = render_ray(
            &[0.1, 0.2, 0.3],
            &[1.0, 1.0, 1.0],
            &[ln2, ln2, ln2],
            &[[1.0; 3], [1.0; 3], [1.0; 3]],
            [0.0; 3],
            EARLY_STOP_TRANSMITTANCE,
        )
        .unwrap();
        for ch in 0..3 {
            assert!((s.pixel[ch] - 0.875).abs() < 1e-6);
        }
        let total: f64 = s.weights.iter().map(|&w| w as f64).sum::<f64>() + s.t_end as f64;
        assert!((total - 1.0).abs() < 1e-7);

        let oracle = render_oracle_f64(&[1.0; 3], &[ln2; 3], &[[1.0; 3]; 3], [0.0; 3]);
        for ch in 0..3 {
            assert!((s.pixel[ch] as f64 - oracle[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn conservation_and_monotone_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let delta: Vec<f32> = (0..n).map(|_| rng.gen_range(1e-4f32..0.05)).collect();
            let sigma: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..200.0)).collect();
            let color: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let t: Vec<f32> = (0..n).map(|i| i as f32 * 0.01).collect();
            let s = render_ray(&t, &delta, &sigma, &color, [1.0; 3], EARLY_STOP_TRANSMITTANCE)
                .unwrap();
            let total: f64 =
                s.weights.iter().map(|&w| w as f64).sum::<f64>() + s.t_end as f64;
            assert!((total - 1.0).abs() < 1e-5, "conservation violated: {total}");
            assert!(s.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            // T_i non-increasing: weights are the decrements.
            let mut trans = 1.0f32;
            for &w in &s.weights[..s.used] {
                let next = trans - w;
                assert!(next <= trans + 1e-7);
                trans = next;
            }
        }
    }

    #[test]
    fn early_termination_error_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        for _ in 0..100 {
            let n = rng.gen_range(8..128);
            let delta: Vec<f32> = (0..n).map(|_| rng.gen_range(1e-3f32..0.05)).collect();
            let sigma: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..500.0)).collect();
            let color: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let t: Vec<f32> = (0..n).map(|i| i as f32 * 0.01).collect();
            let with = render_ray(&t, &delta, &sigma, &color, [1.0; 3], EARLY_STOP_TRANSMITTANCE)
                .unwrap();
            let without = render_ray(&t, &delta, &sigma, &color, [1.0; 3], 0.0).unwrap();
            for ch in 0..3 {
                assert!(
                    (with.pixel[ch] - without.pixel[ch]).abs() < 2e-4,
                    "early termination perturbed channel {ch} by {}",
                    (with.pixel[ch] - without.pixel[ch]).abs()
                );
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let s = render_ray(
            &[0.1, 0.2],
            &[0.01, 0.01],
            &[5.0, 5.0],
            &[[0.5; 3], [0.25; 3]],
            [1.0; 3],
            EARLY_STOP_TRANSMITTANCE,
        )
        .unwrap();
        let (ds, dc) = render_ray_backward(&s, [0.0; 3]);
        assert!(ds.iter().all(|&v| v == 0.0));
        assert!(dc.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_saturated_sample() {
        let s = render_ray(
            &[0.5],
            &[1.0],
            &[1e6],
            &[[0.3, 0.6, 0.9]],
            [1.0; 3],
            EARLY_STOP_TRANSMITTANCE,
        )
        .unwrap();
        let upstream = [1.0f32, -2.0, 0.5];
        let (ds, dc) = render_ray_backward(&s, upstream);
        for ch in 0..3 {
            assert!((dc[0][ch] - upstream[ch]).abs() < 1e-5, "dc = upstream");
        }
        assert!(ds[0].abs() < 1e-5, "saturated density gradient ~ 0");
    }

    /// Analytic density/color gradients vs central finite differences of the
    /// f64 product-form oracle, over random rays.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for case in 0..100 {
            let n = 8;
            let delta: Vec<f32> = (0..n).map(|_| rng.gen_range(0.005f32..0.05)).collect();
            let sigma: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5f32..60.0)).collect();
            let color: Vec<[f32; 3]> =
                (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let t: Vec<f32> = (0..n).map(|i| i as f32 * 0.05).collect();
            let bg = [rng.gen::<f32>(), rng.gen(), rng.gen()];
            let upstream = [
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
            ];
            // Disable early termination: finite differences need a smooth map.
            let s = render_ray(&t, &delta, &sigma, &color, bg, 0.0).unwrap();
            let (ds, dc) = render_ray_backward(&s, upstream);

            let loss = |sg: &[f32], cl: &[[f32; 3]]| -> f64 {
                let px = render_oracle_f64(&delta, sg, cl, bg);
                (0..3).map(|ch| px[ch] * upstream[ch] as f64).sum()
            };
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);

            for i in 0..n {
                let h = 1e-4f32 * (1.0 + sigma[i]);
                let mut sp = sigma.clone();
                sp[i] += h;
                let mut sm = sigma.clone();
                sm[i] -= h;
                let fd = (loss(&sp, &color) - loss(&sm, &color)) / (sp[i] as f64 - sm[i] as f64);
                assert!(
                    rel(ds[i] as f64, fd) < 1e-4,
                    "case {case} sigma[{i}]: analytic {} vs fd {fd}",
                    ds[i]
                );
                for ch in 0..3 {
                    let h = 1e-3f32;
                    let mut cp = color.clone();
                    cp[i][ch] += h;
                    let mut cm = color.clone();
                    cm[i][ch] -= h;
                    let fd = (loss(&sigma, &cp) - loss(&sigma, &cm))
                        / (cp[i][ch] as f64 - cm[i][ch] as f64);
                    assert!(
                        rel(dc[i][ch] as f64, fd) < 1e-4,
                        "case {case} color[{i}][{ch}]: analytic {} vs fd {fd}",
                        dc[i][ch]
                    );
                }
            }
        }
    }

    #[test]
    fn scaled_density_definitions() {
        assert_eq!(scaled_density(0.0, &DensityScaleConfig::disabled()), 1.0);
        assert_eq!(scaled_density(0.0, &DensityScaleConfig::default()), 100.0);
        // Clamp keeps the output finite.
        assert!(scaled_density(1e9, &DensityScaleConfig::default()).is_finite());
        assert_eq!(scaled_density_grad(20.0, 1.0), 0.0);
    }

    /// The argmax over samples is scale-invariant, and the default scale
    /// makes a freshly initialized cell near-opaque.
    #[test]
    fn scaling_preserves_argmax_and_opacifies_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let raws: Vec<f32> = (0..32).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let s1 = DensityScaleConfig::disabled();
        let s100 = DensityScaleConfig::default();
        let argmax = |v: &[f32]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let a: Vec<f32> = raws.iter().map(|&r| scaled_density(r, &s1)).collect();
        let b: Vec<f32> = raws.iter().map(|&r| scaled_density(r, &s100)).collect();
        assert_eq!(argmax(&a), argmax(&b));

        // Per-cell opacity at init (raw = 0) with a 128-cell grid over the
        // unit box: 1 - exp(-100 * sqrt(3)/128) ~ 0.74.
        let delta = 3.0f32.sqrt() / 128.0;
        let opacity = 1.0 - (-scaled_density(0.0, &s100) * delta).exp();
        assert!((opacity - 0.74).abs() < 0.01, "opacity {opacity}");
    }
}
