//! Pinhole cameras and ray generation.
//!
//! Camera space follows the synthetic-dataset convention: x right, y up,
//! looking along -z. Poses are camera-to-world.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Aabb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Rotation part of the camera-to-world pose (orthonormal).
    pub rotation: [[f32; 3]; 3],
    /// Camera center in world coordinates.
    pub position: [f32; 3],
    /// Focal length in pixels.
    pub focal: f32,
    /// Principal point (cx, cy) in pixels.
    pub principal: [f32; 2],
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        rotation: Matrix3<f32>,
        position: Vector3<f32>,
        focal: f32,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = CameraModel {
            rotation: [
                [rotation[(0, 0)], rotation[(0, 1)], rotation[(0, 2)]],
                [rotation[(1, 0)], rotation[(1, 1)], rotation[(1, 2)]],
                [rotation[(2, 0)], rotation[(2, 1)], rotation[(2, 2)]],
            ],
            position: [position.x, position.y, position.z],
            focal,
            principal: [width as f32 / 2.0, height as f32 / 2.0],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, rolled so `up` points up.
    pub fn look_at(
        eye: Vector3<f32>,
        target: Vector3<f32>,
        up: Vector3<f32>,
        focal: f32,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let backward = (eye - target)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::config("look_at eye and target coincide"))?;
        let right = up
            .cross(&backward)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::config("look_at up is parallel to view direction"))?;
        let true_up = backward.cross(&right);
        let rot = Matrix3::from_columns(&[right, true_up, backward]);
        Self::new(rot, eye, focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::config("camera focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera image dimensions must be positive"));
        }
        let r = self.rotation_matrix();
        let gram = r.transpose() * r;
        let mut worst = 0.0f32;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - expect).abs());
            }
        }
        if worst > 1e-4 {
            return Err(Error::config(format!(
                "camera rotation is not orthonormal (residual {worst})"
            )));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f32> {
        Matrix3::new(
            self.rotation[0][0],
            self.rotation[0][1],
            self.rotation[0][2],
            self.rotation[1][0],
            self.rotation[1][1],
            self.rotation[1][2],
            self.rotation[2][0],
            self.rotation[2][1],
            self.rotation[2][2],
        )
    }

    pub fn position_vec(&self) -> Vector3<f32> {
        Vector3::new(self.position[0], self.position[1], self.position[2])
    }

    /// Unit world-space direction through the center of pixel (px, py).
    pub fn pixel_direction(&self, px: u32, py: u32) -> Vector3<f32> {
        let x = (px as f32 + 0.5 - self.principal[0]) / self.focal;
        let y = -((py as f32 + 0.5 - self.principal[1]) / self.focal);
        let d_cam = Vector3::new(x, y, -1.0);
        (self.rotation_matrix() * d_cam).normalize()
    }

    /// Derive the focal length from a horizontal field-of-view angle.
    pub fn focal_from_fov_x(fov_x: f32, width: u32) -> f32 {
        0.5 * width as f32 / (0.5 * fov_x).tan()
    }
}

/// One camera ray clipped to the scene box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f32>,
    /// Unit direction.
    pub dir: Vector3<f32>,
    pub near: f32,
    pub far: f32,
    /// True when the ray misses the scene box; rendered as background.
    pub degenerate: bool,
}

/// Rays plus their pixel provenance and (during training) target colors.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub pixels: Vec<[u32; 2]>,
    pub targets: Option<Vec<[f32; 3]>>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// The ray through one pixel center, clipped to the scene box.
pub fn pixel_ray(camera: &CameraModel, px: u32, py: u32, bbox: &Aabb) -> Ray {
    let origin = camera.position_vec();
    let dir = camera.pixel_direction(px, py);
    match bbox.ray_intersection(&origin, &dir) {
        Some((near, far)) if far > near => Ray {
            origin,
            dir,
            near,
            far,
            degenerate: false,
        },
        _ => Ray {
            origin,
            dir,
            near: 0.0,
            far: 0.0,
            degenerate: true,
        },
    }
}

/// Build rays through the given pixel centers, with near/far set to the
/// ray-box intersection interval.
pub fn generate_rays(camera: &CameraModel, pixels: &[[u32; 2]], bbox: &Aabb) -> Result<RayBatch> {
    camera.validate()?;
    let mut rays = Vec::with_capacity(pixels.len());
    for &[px, py] in pixels {
        if px >= camera.width || py >= camera.height {
            return Err(Error::usage(format!(
                "pixel ({px}, {py}) outside image {}x{}",
                camera.width, camera.height
            )));
        }
        rays.push(pixel_ray(camera, px, py, bbox));
    }
    Ok(RayBatch {
        rays,
        pixels: pixels.to_vec(),
        targets: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_aligned_camera() -> CameraModel {
        // Odd image size so the center pixel's center coincides with the
        // principal point.
        CameraModel::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 2.0),
            60.0,
            101,
            101,
        )
        .unwrap()
    }

    #[test]
    fn center_pixel_points_down_negative_z() {
        let cam = axis_aligned_camera();
        let d = cam.pixel_direction(50, 50);
        assert!((d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
    }

    #[test]
    fn ray_direction_is_unit() {
        let cam = axis_aligned_camera();
        let batch = generate_rays(&cam, &[[0, 0], [100, 100], [7, 93]], &Aabb::unit()).unwrap();
        for r in &batch.rays {
            assert!((r.dir.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_pixel_misses_box() {
        // Strong off-axis pixel with a short focal: the ray passes outside
        // the unit box.
        let cam = CameraModel::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 2.0),
            10.0,
            101,
            101,
        )
        .unwrap();
        let batch = generate_rays(&cam, &[[0, 0], [50, 50]], &Aabb::unit()).unwrap();
        assert!(batch.rays[0].degenerate, "corner ray misses");
        assert!(!batch.rays[1].degenerate, "center ray hits");
        assert!(batch.rays[1].near < batch.rays[1].far);
    }

    #[test]
    fn near_point_lies_on_box_surface() {
        let bbox = Aabb::unit();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let cam = CameraModel::look_at(
            Vector3::new(1.3, 0.9, 1.1),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            90.0,
            101,
            101,
        )
        .unwrap();
        let pixels: Vec<[u32; 2]> = (0..100)
            .map(|_| [rng.gen_range(0..101), rng.gen_range(0..101)])
            .collect();
        let batch = generate_rays(&cam, &pixels, &bbox).unwrap();
        for r in batch.rays.iter().filter(|r| !r.degenerate) {
            let p = r.origin + r.near * r.dir;
            // On the surface: at least one coordinate sits on a face plane
            // and all are within the box.
            let on_face = (0..3).any(|a| {
                (p[a] - bbox.min[a]).abs() < 1e-5 || (p[a] - bbox.max[a]).abs() < 1e-5
            });
            let inside = (0..3).all(|a| p[a] >= bbox.min[a] - 1e-5 && p[a] <= bbox.max[a] + 1e-5);
            assert!(on_face && inside, "near point {p:?} not on box surface");
        }
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = axis_aligned_camera();
        assert!(matches!(
            generate_rays(&cam, &[[101, 0]], &Aabb::unit()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn bad_rotation_rejected() {
        let mut cam = axis_aligned_camera();
        cam.rotation[0][0] = 2.0;
        assert!(matches!(cam.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn focal_from_fov() {
        // 90 degree horizontal fov at width 100: focal = 50 / tan(45) = 50.
        let f = CameraModel::focal_from_fov_x(std::f32::consts::FRAC_PI_2, 100);
        assert!((f - 50.0).abs() < 1e-4);
    }
}
