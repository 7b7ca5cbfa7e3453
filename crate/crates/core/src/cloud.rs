//! Unordered 3D point clouds: the noisy geometry prior.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Aabb;

/// Where a cloud came from; carried through for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudSource {
    PlyFile,
    Synthetic,
}

/// Points in scene coordinates with optional per-point RGB in [0,1].
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f32>>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub source: CloudSource,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f32>>, colors: Option<Vec<[f32; 3]>>, source: CloudSource) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::config(format!(
                    "colors length {} does not match point count {}",
                    c.len(),
                    points.len()
                )));
            }
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::config("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points, colors, source })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Synthesize controlled degradation of a clean prior: per-point dropout,
/// Gaussian jitter, and uniform-random outliers inside `bbox`. Deterministic
/// per seed. Used to mimic sparse, noisy reconstruction output in tests and
/// ablations.
pub fn degrade_prior(
    cloud: &PointCloud,
    jitter_sigma: f32,
    dropout_fraction: f32,
    extra_outlier_fraction: f32,
    bbox: &Aabb,
    seed: u64,
) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&dropout_fraction) || !(0.0..=1.0).contains(&extra_outlier_fraction) {
        return Err(Error::config("fractions must lie in [0, 1]"));
    }
    if jitter_sigma < 0.0 {
        return Err(Error::config("jitter sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, jitter_sigma.max(f32::MIN_POSITIVE)).unwrap();

    let has_colors = cloud.colors.is_some();
    let mut points = Vec::with_capacity(cloud.len());
    let mut colors = if has_colors { Some(Vec::new()) } else { None };

    for (i, p) in cloud.points.iter().enumerate() {
        if rng.gen::<f32>() < dropout_fraction {
            continue;
        }
        let q = if jitter_sigma > 0.0 {
            Vector3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            )
        } else {
            *p
        };
        points.push(q);
        if let (Some(out), Some(src)) = (colors.as_mut(), cloud.colors.as_ref()) {
            out.push(src[i]);
        }
    }

    let n_outliers = (extra_outlier_fraction * cloud.len() as f32).round() as usize;
    for _ in 0..n_outliers {
        let p = Vector3::new(
            rng.gen_range(bbox.min[0]..=bbox.max[0]),
            rng.gen_range(bbox.min[1]..=bbox.max[1]),
            rng.gen_range(bbox.min[2]..=bbox.max[2]),
        );
        points.push(p);
        if let Some(out) = colors.as_mut() {
            out.push([rng.gen(), rng.gen(), rng.gen()]);
        }
    }

    PointCloud::new(points, colors, cloud.source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_cloud(n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|i| {
                let t = i as f32 / n as f32 - 0.5;
                Vector3::new(t, t * 0.5, -t)
            })
            .collect();
        PointCloud::new(pts, None, CloudSource::Synthetic).unwrap()
    }

    #[test]
    fn identity_when_no_degradation() {
        let c = grid_cloud(100);
        let d = degrade_prior(&c, 0.0, 0.0, 0.0, &Aabb::unit(), 1).unwrap();
        assert_eq!(d.points, c.points);
    }

    #[test]
    fn full_dropout_leaves_only_outliers() {
        let c = grid_cloud(100);
        let d = degrade_prior(&c, 0.0, 1.0, 0.0, &Aabb::unit(), 1).unwrap();
        assert!(d.is_empty());
        let d = degrade_prior(&c, 0.0, 1.0, 0.1, &Aabb::unit(), 1).unwrap();
        assert_eq!(d.len(), 10);
    }

    /// Retained count is within 3 sigma of the binomial expectation.
    #[test]
    fn dropout_matches_binomial_bound() {
        let n = 10_000;
        let c = grid_cloud(n);
        for seed in 0..3 {
            let d = degrade_prior(&c, 0.0, 0.5, 0.0, &Aabb::unit(), seed).unwrap();
            let mean = 0.5 * n as f64;
            let sigma = (n as f64 * 0.25).sqrt();
            let got = d.len() as f64;
            assert!(
                (got - mean).abs() <= 3.0 * sigma,
                "seed {seed}: retained {got}"
            );
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = grid_cloud(500);
        let a = degrade_prior(&c, 0.01, 0.3, 0.05, &Aabb::unit(), 9).unwrap();
        let b = degrade_prior(&c, 0.01, 0.3, 0.05, &Aabb::unit(), 9).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn mismatched_colors_rejected() {
        let r = PointCloud::new(
            vec![Vector3::zeros(); 3],
            Some(vec![[0.0; 3]; 2]),
            CloudSource::Synthetic,
        );
        assert!(r.is_err());
    }
}
