//! Radiance-field reconstruction from posed images, with the ray-marching
//! occupancy grid seeded from a noisy point-cloud prior.
//!
//! The pipeline: a multi-resolution hash encoding feeds two small MLP heads
//! (density, color); rays march through an occupancy grid that skips empty
//! space; emission-absorption compositing renders pixels. The grid can start
//! from a splatted point cloud whose cells stay locked on during periodic
//! density-based updates, and the density activation carries a configurable
//! scale factor so occupied cells render near-opaque from the first
//! iteration. Together these cut the iterations needed to reach a target
//! PSNR roughly in half against a plain bootstrap baseline.

pub mod camera;
pub mod cloud;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geom;
pub mod hashgrid;
pub mod nn;
pub mod occupancy;
pub mod ply;
pub mod procedural;
pub mod render;
pub mod snapshot;
pub mod train;

pub use camera::{generate_rays, pixel_ray, CameraModel, Ray, RayBatch};
pub use cloud::{degrade_prior, CloudSource, PointCloud};
pub use dataset::{load_transforms, ImageRgb, LoadOptions, PosedImageSet, SplitTag};
pub use error::{Error, Result};
pub use field::{FieldConfig, RadianceField};
pub use geom::Aabb;
pub use hashgrid::{hash_index, FeatureTables, HashEncoder, HashGridConfig};
pub use occupancy::{
    grid_iou, splat, update_grid, DensityProbe, GridUpdateConfig, OccupancyGrid, SplatConfig,
    SplatReport, UpdateReport,
};
pub use ply::{load_ply, parse_ply, save_ply, write_ply, PlyEncoding};
pub use procedural::{
    generate_procedural_dataset, make_procedural_scene, sample_prior_cloud, CameraRing,
    GroundTruthRenderer, ProceduralDataset, ProceduralScene, SceneId, SceneManifest,
};
pub use render::{
    march_ray, render_ray, render_ray_backward, scaled_density, DensityScaleConfig, MarchConfig,
    RaySegmentSamples,
};
pub use snapshot::{load_grid, load_model, save_grid, save_model};
pub use train::{
    ablation_suite, evaluate_checkpoints, metrics_to_csv, psnr, render_view, train,
    AblationConfig, AblationReport, EvalReport, GridInit, MetricRow, TrainConfig, TrainRun,
};
