//! Axis-aligned boxes and small geometry helpers shared across the crate.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self> {
        let b = Aabb { min, max };
        if !b.is_valid() {
            return Err(Error::config(format!(
                "degenerate bounding box: min {:?} max {:?}",
                min, max
            )));
        }
        Ok(b)
    }

    /// The unit cube centered at the origin, side 1. The default scene scale:
    /// its diagonal is sqrt(3).
    pub fn unit() -> Self {
        Aabb {
            min: [-0.5; 3],
            max: [0.5; 3],
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }

    pub fn size(&self) -> [f32; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f32 {
        let s = self.size();
        (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
    }

    /// Inclusive containment test (boundary points count as inside).
    pub fn contains(&self, p: &Vector3<f32>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Map a point to [0,1]^3 box coordinates. No clamping.
    pub fn normalize(&self, p: &Vector3<f32>) -> Vector3<f32> {
        let s = self.size();
        Vector3::new(
            (p.x - self.min[0]) / s[0],
            (p.y - self.min[1]) / s[1],
            (p.z - self.min[2]) / s[2],
        )
    }

    pub fn center(&self) -> Vector3<f32> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Slab intersection of the ray `origin + t*dir` with this box.
    /// Returns the entry/exit parameters `(t_near, t_far)` clipped to
    /// `t >= 0`, or `None` when the ray misses the box entirely.
    pub fn ray_intersection(&self, origin: &Vector3<f32>, dir: &Vector3<f32>) -> Option<(f32, f32)> {
        let mut t0 = 0.0f32;
        let mut t1 = f32::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / dir[a];
            if inv.is_finite() {
                let mut ta = (self.min[a] - origin[a]) * inv;
                let mut tb = (self.max[a] - origin[a]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            } else if origin[a] < self.min[a] || origin[a] > self.max[a] {
                return None;
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }

    /// Clamp a point to the closed box.
    pub fn clamp(&self, p: &Vector3<f32>) -> Vector3<f32> {
        Vector3::new(
            p.x.clamp(self.min[0], self.max[0]),
            p.y.clamp(self.min[1], self.max[1]),
            p.z.clamp(self.min[2], self.max[2]),
        )
    }
}

/// Deterministic 64-bit mixer used to derive per-(seed, stream, index) RNG
/// seeds. splitmix64 finalizer; stable across platforms.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_box_rejected() {
        assert!(Aabb::new([0.0, 0.0, 0.0], [1.0, 0.0, 1.0]).is_err());
        assert!(Aabb::new([0.0; 3], [1.0; 3]).is_ok());
    }

    #[test]
    fn ray_hits_unit_box() {
        let b = Aabb::unit();
        let o = Vector3::new(0.0, 0.0, 2.0);
        let d = Vector3::new(0.0, 0.0, -1.0);
        let (tn, tf) = b.ray_intersection(&o, &d).unwrap();
        assert!((tn - 1.5).abs() < 1e-6);
        assert!((tf - 2.5).abs() < 1e-6);
        assert!(b
            .ray_intersection(&o, &Vector3::new(0.0, 1.0, 0.0))
            .is_none());
    }

    #[test]
    fn boundary_contained() {
        let b = Aabb::unit();
        assert!(b.contains(&Vector3::new(0.5, 0.5, 0.5)));
        assert!(!b.contains(&Vector3::new(0.5001, 0.0, 0.0)));
    }

    #[test]
    fn mix_seed_spreads() {
        let a = mix_seed(1, 0, 0);
        let b = mix_seed(1, 0, 1);
        let c = mix_seed(2, 0, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
