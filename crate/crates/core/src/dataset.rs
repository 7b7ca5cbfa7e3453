//! Posed-image datasets: the transforms-JSON format used by the synthetic
//! benchmark scenes, plus the in-memory image type shared with the
//! procedural generator.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Deserialize;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::Aabb;

/// RGB image with float channels in [0,1], row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        ImageRgb {
            width,
            height,
            pixels: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, color: [f32; 3]) -> Self {
        ImageRgb {
            width,
            height,
            pixels: vec![color; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: [f32; 3]) {
        self.pixels[(y * self.width + x) as usize] = c;
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width, self.height);
        for (i, px) in self.pixels.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            img.put_pixel(
                x,
                y,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Load {
                what: path.display().to_string(),
                message: e.to_string(),
            })
    }

    /// Raw little-endian f32 RGB dump: `width u32, height u32, then
    /// width*height*3 f32`. For exact comparisons.
    pub fn to_float_dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len() * 12);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for px in &self.pixels {
            for ch in px {
                out.extend_from_slice(&ch.to_le_bytes());
            }
        }
        out
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, factor: u32) -> ImageRgb {
        if factor <= 1 {
            return self.clone();
        }
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let mut out = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                let mut n = 0u32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let sx = x * factor + dx;
                        let sy = y * factor + dy;
                        if sx < self.width && sy < self.height {
                            let p = self.get(sx, sy);
                            for ch in 0..3 {
                                acc[ch] += p[ch] as f64;
                            }
                            n += 1;
                        }
                    }
                }
                out.set(
                    x,
                    y,
                    [
                        (acc[0] / n as f64) as f32,
                        (acc[1] / n as f64) as f32,
                        (acc[2] / n as f64) as f32,
                    ],
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// A set of posed images with a shared scene box and background convention.
#[derive(Debug, Clone)]
pub struct PosedImageSet {
    pub images: Vec<ImageRgb>,
    pub cameras: Vec<CameraModel>,
    pub split: SplitTag,
    pub bbox: Aabb,
    pub background: [f32; 3],
}

impl PosedImageSet {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::config("image set needs at least one image"));
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::config("image and camera counts differ"));
        }
        let (w, h) = (self.images[0].width, self.images[0].height);
        for (i, img) in self.images.iter().enumerate() {
            if img.width != w || img.height != h {
                return Err(Error::config(format!(
                    "image {i} is {}x{}, expected {w}x{h}",
                    img.width, img.height
                )));
            }
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Options for [`load_transforms`].
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Integer image downscale (the 800x800 originals are rarely needed at
    /// desk scale).
    pub downscale: u32,
    /// Scene box half-side scale applied to the default [-1.5, 1.5]^3.
    pub bbox_scale: f32,
    /// Background color images with alpha are composited over.
    pub background: [f32; 3],
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            downscale: 4,
            bbox_scale: 1.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Deserialize)]
struct TransformsJson {
    camera_angle_x: f64,
    frames: Vec<FrameJson>,
}

#[derive(Deserialize)]
struct FrameJson {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

fn frame_image_path(dir: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.trim_start_matches("./");
    let direct = dir.join(rel);
    if direct.extension().is_some() {
        direct
    } else {
        dir.join(format!("{rel}.png"))
    }
}

/// Load a posed-image set from a directory holding `transforms_<split>.json`
/// (or `transforms.json`) and the referenced images. Alpha channels are
/// pre-composited over the configured background at load time.
pub fn load_transforms(dir: &Path, split: SplitTag, opts: &LoadOptions) -> Result<PosedImageSet> {
    let split_name = match split {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    let candidates = [
        dir.join(format!("transforms_{split_name}.json")),
        dir.join("transforms.json"),
    ];
    let tf_path = candidates
        .iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Load {
            what: dir.display().to_string(),
            message: format!("no transforms_{split_name}.json or transforms.json found"),
        })?;
    let raw = std::fs::read_to_string(tf_path).map_err(|e| Error::io(tf_path, e))?;
    let tf: TransformsJson = serde_json::from_str(&raw).map_err(|e| Error::Load {
        what: tf_path.display().to_string(),
        message: format!("malformed JSON: {e}"),
    })?;
    if tf.frames.is_empty() {
        return Err(Error::Load {
            what: tf_path.display().to_string(),
            message: "transforms file lists no frames".into(),
        });
    }

    let loaded: Vec<Result<(ImageRgb, CameraModel)>> = tf
        .frames
        .par_iter()
        .map(|frame| load_frame(dir, frame, tf.camera_angle_x, opts))
        .collect();
    let mut images = Vec::with_capacity(loaded.len());
    let mut cameras = Vec::with_capacity(loaded.len());
    for r in loaded {
        let (img, cam) = r?;
        images.push(img);
        cameras.push(cam);
    }

    let half = 1.5 * opts.bbox_scale;
    let set = PosedImageSet {
        images,
        cameras,
        split,
        bbox: Aabb::new([-half; 3], [half; 3])?,
        background: opts.background,
    };
    set.validate()?;
    Ok(set)
}

fn load_frame(
    dir: &Path,
    frame: &FrameJson,
    camera_angle_x: f64,
    opts: &LoadOptions,
) -> Result<(ImageRgb, CameraModel)> {
    let m = &frame.transform_matrix;
    if m.len() != 4 || m.iter().any(|row| row.len() != 4) {
        return Err(Error::Load {
            what: frame.file_path.clone(),
            message: "transform_matrix is not 4x4".into(),
        });
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Load {
            what: frame.file_path.clone(),
            message: "transform_matrix has non-finite entries".into(),
        });
    }

    let img_path = frame_image_path(dir, &frame.file_path);
    let dyn_img = image::open(&img_path).map_err(|e| Error::Load {
        what: img_path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgba = dyn_img.to_rgba8();
    let (w, h) = (rgba.width(), rgba.height());
    let mut img = ImageRgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = rgba.get_pixel(x, y).0;
            let a = p[3] as f32 / 255.0;
            let mut c = [0.0f32; 3];
            for ch in 0..3 {
                let fg = p[ch] as f32 / 255.0;
                c[ch] = fg * a + opts.background[ch] * (1.0 - a);
            }
            img.set(x, y, c);
        }
    }
    let img = img.downscale(opts.downscale);

    let rot = Matrix3::new(
        m[0][0] as f32,
        m[0][1] as f32,
        m[0][2] as f32,
        m[1][0] as f32,
        m[1][1] as f32,
        m[1][2] as f32,
        m[2][0] as f32,
        m[2][1] as f32,
        m[2][2] as f32,
    );
    let pos = Vector3::new(m[0][3] as f32, m[1][3] as f32, m[2][3] as f32);
    let focal = CameraModel::focal_from_fov_x(camera_angle_x as f32, img.width);
    let cam = CameraModel::new(rot, pos, focal, img.width, img.height).map_err(|e| Error::Load {
        what: frame.file_path.clone(),
        message: format!("bad camera: {e}"),
    })?;
    Ok((img, cam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_fixture(dir: &Path, with_alpha_zero_pixel: bool) {
        let mut img = image::RgbaImage::new(100, 100);
        for y in 0..100 {
            for x in 0..100 {
                img.put_pixel(x, y, image::Rgba([200, 100, 50, 255]));
            }
        }
        if with_alpha_zero_pixel {
            img.put_pixel(0, 0, image::Rgba([30, 30, 30, 0]));
        }
        img.save_with_format(dir.join("r_0.png"), image::ImageFormat::Png)
            .unwrap();
        let tf = serde_json::json!({
            "camera_angle_x": std::f64::consts::FRAC_PI_2,
            "frames": [
                {
                    "file_path": "./r_0",
                    "transform_matrix": [
                        [1.0, 0.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0, 0.0],
                        [0.0, 0.0, 1.0, 4.0],
                        [0.0, 0.0, 0.0, 1.0]
                    ]
                }
            ]
        });
        fs::write(
            dir.join("transforms_train.json"),
            serde_json::to_string_pretty(&tf).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn minimal_fixture_focal_from_fov() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), false);
        let opts = LoadOptions {
            downscale: 1,
            ..LoadOptions::default()
        };
        let set = load_transforms(dir.path(), SplitTag::Train, &opts).unwrap();
        assert_eq!(set.len(), 1);
        // camera_angle_x = pi/2, width 100 -> focal = 50 / tan(pi/4) = 50.
        assert!((set.cameras[0].focal - 50.0).abs() < 1e-3);
        assert_eq!(set.cameras[0].position, [0.0, 0.0, 4.0]);
    }

    #[test]
    fn missing_image_error_names_file() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), false);
        fs::remove_file(dir.path().join("r_0.png")).unwrap();
        let err = load_transforms(dir.path(), SplitTag::Train, &LoadOptions::default())
            .unwrap_err();
        match err {
            Error::Load { what, .. } => assert!(what.contains("r_0"), "got {what}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn alpha_composites_over_white() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), true);
        let opts = LoadOptions {
            downscale: 1,
            ..LoadOptions::default()
        };
        let set = load_transforms(dir.path(), SplitTag::Train, &opts).unwrap();
        assert_eq!(set.images[0].get(0, 0), [1.0, 1.0, 1.0]);
        let opaque = set.images[0].get(5, 5);
        assert!((opaque[0] - 200.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn loader_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), true);
        let a = load_transforms(dir.path(), SplitTag::Train, &LoadOptions::default()).unwrap();
        let b = load_transforms(dir.path(), SplitTag::Train, &LoadOptions::default()).unwrap();
        assert_eq!(a.images[0].pixels, b.images[0].pixels);
        assert_eq!(a.cameras[0], b.cameras[0]);
    }

    #[test]
    fn malformed_json_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("transforms_train.json"), "{not json").unwrap();
        assert!(matches!(
            load_transforms(dir.path(), SplitTag::Train, &LoadOptions::default()),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn downscale_averages_blocks() {
        let mut img = ImageRgb::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let v = if x < 2 { 0.0 } else { 1.0 };
                img.set(x, y, [v; 3]);
            }
        }
        let small = img.downscale(2);
        assert_eq!(small.width, 2);
        assert_eq!(small.get(0, 0), [0.0; 3]);
        assert_eq!(small.get(1, 0), [1.0; 3]);
    }
}
