//! The training orchestrator: ray batching, the differentiable pipeline,
//! the occupancy-update schedule, and the iteration-budget evaluation
//! protocol (PSNR at fixed checkpoints, iterations-to-threshold, speedup
//! ratios against a named baseline).
//!
//! One step is a pipeline: parallel per-chunk forward/backward over rays
//! (read-only model) -> gradient merge in fixed chunk order -> exclusive
//! optimizer step -> periodic exclusive grid update. Chunk boundaries and
//! merge order are fixed, so runs are bit-reproducible at any thread count.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_ray, Ray};
use crate::cloud::PointCloud;
use crate::dataset::{ImageRgb, PosedImageSet};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldGrads, RadianceField};
use crate::geom::mix_seed;
use crate::hashgrid::HashGridConfig;
use crate::nn::{AdamConfig, AdamState};
use crate::occupancy::{splat, update_grid, GridUpdateConfig, OccupancyGrid, SplatConfig};
use crate::procedural::SceneId;
use crate::render::{march_ray, render_ray, render_ray_backward, DensityScaleConfig, MarchConfig};
use crate::snapshot::load_grid;

const STREAM_FIELD: u64 = 0;
const STREAM_BATCH: u64 = 10;
const STREAM_PHASE: u64 = 11;
const STREAM_UPDATE: u64 = 12;
const STREAM_EVAL: u64 = 13;

/// Rays processed per parallel work unit. Fixed: chunking is part of the
/// deterministic reduction order.
const RAY_CHUNK: usize = 128;

/// How the occupancy grid starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "path")]
pub enum GridInit {
    /// All cells occupied with a cache grace period; the plain bootstrap.
    RandomBootstrap,
    /// Splat the geometry prior; splatted cells form the locked prior mask.
    PriorSplat,
    /// Load a grid snapshot saved by an earlier run.
    Snapshot(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub field: FieldConfig,
    pub grid_init: GridInit,
    pub grid_resolution: usize,
    /// Splat radius in cells (prior-splat mode).
    pub splat_radius: f32,
    pub update: GridUpdateConfig,
    /// When false the grid is frozen at its initial state (ablation arm).
    pub update_enabled: bool,
    pub adam: AdamConfig,
    pub rays_per_batch: usize,
    pub iters: u32,
    /// Iterations at which the test subset is rendered and PSNR recorded.
    pub checkpoints: Vec<u32>,
    pub march: MarchConfig,
    /// Size of the fixed test-view subset rendered at checkpoints.
    pub eval_views: usize,
    pub seed: u64,
    /// Deterministic-mode reporting: wall-clock fields are zeroed so metric
    /// streams are byte-comparable across runs.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Full-scale defaults: 16-level hash grid, 128^3 occupancy, step
    /// diagonal/1024, 4096 rays per batch.
    pub fn full(bbox: crate::geom::Aabb, seed: u64) -> Self {
        let hash = HashGridConfig::full(bbox);
        let march = MarchConfig::new(bbox.diagonal() / 1024.0);
        TrainConfig {
            field: FieldConfig::new(hash, DensityScaleConfig::default()),
            grid_init: GridInit::RandomBootstrap,
            grid_resolution: 128,
            splat_radius: 1.0,
            update: GridUpdateConfig::default(),
            update_enabled: true,
            adam: AdamConfig::default(),
            rays_per_batch: 4096,
            iters: 1000,
            checkpoints: vec![10, 100, 500, 1000],
            march,
            eval_views: 4,
            seed,
            deterministic: false,
        }
    }

    /// Desk-scale preset: 8-level hash grid, 64^3 occupancy grid, step
    /// diagonal/512, 512 rays per batch. This is the acceptance surface.
    pub fn toy(bbox: crate::geom::Aabb, seed: u64) -> Self {
        let mut cfg = Self::full(bbox, seed);
        cfg.field.hash = HashGridConfig::toy(bbox);
        cfg.grid_resolution = 64;
        cfg.march = MarchConfig::new(bbox.diagonal() / 512.0);
        cfg.rays_per_batch = 512;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.update.validate()?;
        self.march.validate()?;
        if self.grid_resolution == 0 {
            return Err(Error::config("grid resolution must be positive"));
        }
        if self.rays_per_batch == 0 {
            return Err(Error::config("rays per batch must be >= 1"));
        }
        if self.splat_radius < 0.0 {
            return Err(Error::config("splat radius must be >= 0"));
        }
        if self.eval_views == 0 {
            return Err(Error::config("eval views must be >= 1"));
        }
        let mut prev = 0u32;
        for &c in &self.checkpoints {
            if c <= prev {
                return Err(Error::config("checkpoints must be strictly ascending"));
            }
            if c > self.iters {
                return Err(Error::config(format!(
                    "checkpoint {c} exceeds total iterations {}",
                    self.iters
                )));
            }
            prev = c;
        }
        Ok(())
    }
}

/// One row of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: u32,
    pub loss: f32,
    /// Present exactly at checkpoint iterations.
    pub psnr: Option<f32>,
    pub occupied_cells: usize,
    pub samples_per_ray: f32,
    pub wallclock_ms: f64,
}

/// Everything one training run produces.
pub struct TrainRun {
    pub config: TrainConfig,
    pub metrics: Vec<MetricRow>,
    pub field: RadianceField,
    pub grid: OccupancyGrid,
    /// The grid exactly as initialized (before any update round).
    pub initial_grid: OccupancyGrid,
    pub skipped_steps: u32,
    pub truncated_rays: u64,
    pub eval_view_indices: Vec<usize>,
    /// First eval view rendered at each checkpoint (for artifact output).
    pub checkpoint_renders: Vec<(u32, ImageRgb)>,
}

impl TrainRun {
    pub fn checkpoint_psnrs(&self) -> Vec<(u32, f32)> {
        self.metrics
            .iter()
            .filter_map(|m| m.psnr.map(|p| (m.iter, p)))
            .collect()
    }
}

/// Serialize a metric stream as CSV. In deterministic mode the wall-clock
/// column is written as 0 so byte equality holds across runs.
pub fn metrics_to_csv(metrics: &[MetricRow], deterministic: bool) -> String {
    let mut out = String::from("iter,loss,psnr,occupied_cells,samples_per_ray,wallclock_ms\n");
    for m in metrics {
        let psnr = m.psnr.map(|p| format!("{p:.2}")).unwrap_or_default();
        let wallclock = if deterministic { 0.0 } else { m.wallclock_ms };
        out.push_str(&format!(
            "{},{:.6e},{},{},{:.2},{:.1}\n",
            m.iter, m.loss, psnr, m.occupied_cells, m.samples_per_ray, wallclock
        ));
    }
    out
}

/// Peak signal-to-noise ratio in decibels over all pixels and channels,
/// capped at 100 dB for near-identical images.
pub fn psnr(rendered: &ImageRgb, reference: &ImageRgb) -> Result<f32> {
    if rendered.width != reference.width || rendered.height != reference.height {
        return Err(Error::usage(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            rendered.width, reference.width, rendered.height, reference.height
        )));
    }
    let mut acc = 0.0f64;
    for (a, b) in rendered.pixels.iter().zip(&reference.pixels) {
        for ch in 0..3 {
            let d = a[ch] as f64 - b[ch] as f64;
            acc += d * d;
        }
    }
    let mse = acc / (rendered.pixels.len() as f64 * 3.0);
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()) as f32)
}

fn phase_for(seed: u64, iter: u32, ray: u64) -> f32 {
    let bits = mix_seed(seed, STREAM_PHASE, ((iter as u64) << 32) ^ ray);
    (bits >> 40) as f32 / (1u64 << 24) as f32
}

struct SampledBatch {
    rays: Vec<Ray>,
    targets: Vec<[f32; 3]>,
}

fn sample_ray_batch(data: &PosedImageSet, n: usize, seed: u64, iter: u32) -> SampledBatch {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_BATCH, iter as u64));
    let mut rays = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let img_idx = rng.gen_range(0..data.images.len());
        let x = rng.gen_range(0..data.images[img_idx].width);
        let y = rng.gen_range(0..data.images[img_idx].height);
        rays.push(pixel_ray(&data.cameras[img_idx], x, y, &data.bbox));
        targets.push(data.images[img_idx].get(x, y));
    }
    SampledBatch { rays, targets }
}

struct StepOutput {
    loss: f32,
    grads: FieldGrads,
    samples_emitted: u64,
    truncated_rays: u64,
}

/// Forward + backward over one ray batch. Exposed for the end-to-end
/// gradient checks, which need the loss and raw gradients without an
/// optimizer step.
pub fn loss_and_grads(
    field: &RadianceField,
    grid: &OccupancyGrid,
    march: &MarchConfig,
    rays: &[Ray],
    targets: &[[f32; 3]],
    background: [f32; 3],
    seed: u64,
    iter: u32,
    jittered: bool,
) -> Result<(f32, FieldGrads)> {
    let out = train_step(
        field, grid, march, rays, targets, background, seed, iter, jittered,
    )?;
    Ok((out.loss, out.grads))
}

fn train_step(
    field: &RadianceField,
    grid: &OccupancyGrid,
    march: &MarchConfig,
    rays: &[Ray],
    targets: &[[f32; 3]],
    background: [f32; 3],
    seed: u64,
    iter: u32,
    jittered: bool,
) -> Result<StepOutput> {
    let batch_rays = rays.len();
    let norm = 2.0 / (batch_rays as f32 * 3.0);
    let bbox = grid.bbox();

    struct ChunkOut {
        grads: FieldGrads,
        loss_sum: f64,
        samples: u64,
        truncated: u64,
    }

    let chunk_results: Vec<Result<ChunkOut>> = rays
        .par_chunks(RAY_CHUNK)
        .zip(targets.par_chunks(RAY_CHUNK))
        .enumerate()
        .map(|(chunk_idx, (chunk_rays, chunk_targets))| {
            let mut positions: Vec<Vector3<f32>> = Vec::new();
            let mut ray_ranges: Vec<(usize, usize)> = Vec::with_capacity(chunk_rays.len());
            let mut ts_all: Vec<f32> = Vec::new();
            let mut truncated = 0u64;
            for (ri, ray) in chunk_rays.iter().enumerate() {
                let global_ray = (chunk_idx * RAY_CHUNK + ri) as u64;
                let phase = if jittered {
                    phase_for(seed, iter, global_ray)
                } else {
                    0.5
                };
                let marched = march_ray(ray, grid, march, phase);
                if marched.truncated {
                    truncated += 1;
                }
                let start = positions.len();
                for &t in &marched.ts {
                    positions.push(bbox.clamp(&(ray.origin + t * ray.dir)));
                }
                ts_all.extend_from_slice(&marched.ts);
                ray_ranges.push((start, positions.len()));
            }

            let fwd = field.forward_samples(&positions)?;
            let mut d_sigma = vec![0.0f32; positions.len()];
            let mut d_rgb = vec![[0.0f32; 3]; positions.len()];
            let mut loss_sum = 0.0f64;

            for (ri, &(start, end)) in ray_ranges.iter().enumerate() {
                let n = end - start;
                let deltas = vec![march.step; n];
                let seg = render_ray(
                    &ts_all[start..end],
                    &deltas,
                    &fwd.sigma[start..end],
                    &fwd.rgb[start..end],
                    background,
                    march.early_stop,
                )?;
                let target = chunk_targets[ri];
                let mut upstream = [0.0f32; 3];
                for ch in 0..3 {
                    let diff = seg.pixel[ch] - target[ch];
                    loss_sum += (diff as f64) * (diff as f64);
                    upstream[ch] = norm * diff;
                }
                let (ds, dc) = render_ray_backward(&seg, upstream);
                d_sigma[start..end].copy_from_slice(&ds);
                d_rgb[start..end].copy_from_slice(&dc);
            }

            let mut grads = FieldGrads::zeros_like(field);
            field.backward_samples(&fwd, &d_sigma, &d_rgb, &mut grads)?;
            Ok(ChunkOut {
                grads,
                loss_sum,
                samples: positions.len() as u64,
                truncated,
            })
        })
        .collect();

    let mut total = FieldGrads::zeros_like(field);
    let mut loss_sum = 0.0f64;
    let mut samples = 0u64;
    let mut truncated = 0u64;
    for r in chunk_results {
        let c = r?;
        total.add_assign(&c.grads);
        loss_sum += c.loss_sum;
        samples += c.samples;
        truncated += c.truncated;
    }
    Ok(StepOutput {
        loss: (loss_sum / (batch_rays as f64 * 3.0)) as f32,
        grads: total,
        samples_emitted: samples,
        truncated_rays: truncated,
    })
}

fn grads_are_finite(grads: &FieldGrads) -> bool {
    grads.tables.iter().all(|v| v.is_finite())
        && grads
            .density
            .layers
            .iter()
            .chain(grads.color.layers.iter())
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
}

fn initial_grid(
    config: &TrainConfig,
    data: &PosedImageSet,
    prior: Option<&PointCloud>,
) -> Result<OccupancyGrid> {
    match &config.grid_init {
        GridInit::RandomBootstrap => OccupancyGrid::all_occupied(
            config.grid_resolution,
            data.bbox,
            2.0 * config.update.density_threshold,
        ),
        GridInit::PriorSplat => {
            let prior = prior.ok_or_else(|| {
                Error::config("prior-splat initialization requires a point cloud prior")
            })?;
            let (mut grid, _report) = splat(
                prior,
                &SplatConfig {
                    radius: config.splat_radius,
                    resolution: config.grid_resolution,
                    bbox: data.bbox,
                },
            )?;
            grid.seed_prior_cache(config.update.density_threshold);
            Ok(grid)
        }
        GridInit::Snapshot(path) => {
            let grid = load_grid(path)?;
            if grid.resolution() != config.grid_resolution || grid.bbox() != data.bbox {
                return Err(Error::config(format!(
                    "snapshot grid is {}^3 over {:?}, run needs {}^3 over {:?}",
                    grid.resolution(),
                    grid.bbox(),
                    config.grid_resolution,
                    data.bbox
                )));
            }
            Ok(grid)
        }
    }
}

fn pick_eval_views(test: &PosedImageSet, n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_EVAL, 0));
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n.min(test.len()));
    idx.sort_unstable();
    idx
}

/// Render one posed view with the current model and grid.
pub fn render_view(
    field: &RadianceField,
    grid: &OccupancyGrid,
    camera: &crate::camera::CameraModel,
    march: &MarchConfig,
    background: [f32; 3],
) -> Result<ImageRgb> {
    let pixels: Vec<[u32; 2]> = (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| [x, y]))
        .collect();
    let batch = crate::camera::generate_rays(camera, &pixels, &grid.bbox())?;
    let colors = field.render_rays(&batch.rays, grid, march, background);
    let mut img = ImageRgb::new(camera.width, camera.height);
    img.pixels = colors;
    Ok(img)
}

fn eval_checkpoint_psnr(
    field: &RadianceField,
    grid: &OccupancyGrid,
    test: &PosedImageSet,
    views: &[usize],
    march: &MarchConfig,
) -> Result<(f32, ImageRgb)> {
    let mut sum = 0.0f64;
    let mut first: Option<ImageRgb> = None;
    for &vi in views {
        let img = render_view(field, grid, &test.cameras[vi], march, test.background)?;
        sum += psnr(&img, &test.images[vi])? as f64;
        if first.is_none() {
            first = Some(img);
        }
    }
    Ok((
        (sum / views.len() as f64) as f32,
        first.expect("at least one eval view"),
    ))
}

/// Train a radiance field. `prior` is required exactly when the grid
/// initializes from a prior splat. Checkpoints render the fixed test-view
/// subset and record PSNR into the metric stream.
pub fn train(
    config: &TrainConfig,
    data: &PosedImageSet,
    test: &PosedImageSet,
    prior: Option<&PointCloud>,
) -> Result<TrainRun> {
    config.validate()?;
    data.validate()?;
    test.validate()?;
    if config.field.hash.bbox != data.bbox {
        return Err(Error::config(
            "field bounding box does not match the dataset bounding box",
        ));
    }
    if matches!(config.grid_init, GridInit::PriorSplat) && prior.is_none() {
        return Err(Error::config(
            "prior-splat initialization requires a point cloud prior",
        ));
    }

    let mut field = RadianceField::new(config.field, mix_seed(config.seed, STREAM_FIELD, 0))?;
    let mut grid = initial_grid(config, data, prior)?;
    let initial = grid.clone();
    let eval_view_indices = pick_eval_views(test, config.eval_views, config.seed);

    let mut adam: Vec<AdamState> = field
        .param_tensor_lens()
        .into_iter()
        .map(|len| AdamState::new(len, config.adam))
        .collect();

    let mut metrics = Vec::with_capacity(config.iters as usize);
    let mut skipped_steps = 0u32;
    let mut truncated_rays = 0u64;
    let mut checkpoint_renders = Vec::with_capacity(config.checkpoints.len());

    for it in 0..config.iters {
        let t0 = Instant::now();
        let batch = sample_ray_batch(data, config.rays_per_batch, config.seed, it);
        let step = train_step(
            &field,
            &grid,
            &config.march,
            &batch.rays,
            &batch.targets,
            data.background,
            config.seed,
            it,
            true,
        )?;
        truncated_rays += step.truncated_rays;

        if grads_are_finite(&step.grads) {
            let mut offset = 0;
            let mut grad_slices: Vec<&[f32]> = vec![&step.grads.tables];
            grad_slices.extend(step.grads.density.tensors());
            grad_slices.extend(step.grads.color.tensors());
            for (tensor, gslice) in field.param_tensors_mut().into_iter().zip(&grad_slices) {
                adam[offset].apply(tensor, gslice)?;
                offset += 1;
            }
        } else {
            skipped_steps += 1;
        }

        let iter_num = it + 1;
        if config.update_enabled && iter_num % config.update.period == 0 {
            update_grid(
                &mut grid,
                &field,
                &config.update,
                mix_seed(config.seed, STREAM_UPDATE, iter_num as u64),
            )?;
        }

        let psnr_val = if config.checkpoints.contains(&iter_num) {
            let (p, img) = eval_checkpoint_psnr(
                &field,
                &grid,
                test,
                &eval_view_indices,
                &config.march,
            )?;
            checkpoint_renders.push((iter_num, img));
            Some(p)
        } else {
            None
        };

        metrics.push(MetricRow {
            iter: iter_num,
            loss: step.loss,
            psnr: psnr_val,
            occupied_cells: grid.occupied_count(),
            samples_per_ray: step.samples_emitted as f32 / config.rays_per_batch as f32,
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainRun {
        config: config.clone(),
        metrics,
        field,
        grid,
        initial_grid: initial,
        skipped_steps,
        truncated_rays,
        eval_view_indices,
        checkpoint_renders,
    })
}

/// Per-run evaluation row in an [`EvalReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEval {
    pub name: String,
    pub psnr_at: Vec<(u32, f32)>,
    pub iters_to_threshold: Option<u32>,
    /// baseline iterations-to-threshold / this run's; present when both
    /// runs reached the threshold.
    pub speedup_vs_baseline: Option<f32>,
}

/// Tabulated PSNR-at-iteration protocol across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_db: f32,
    pub baseline: String,
    pub runs: Vec<RunEval>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,iter,psnr\n");
        for r in &self.runs {
            for (it, p) in &r.psnr_at {
                out.push_str(&format!("{},{},{:.2}\n", r.name, it, p));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn run(&self, name: &str) -> Option<&RunEval> {
        self.runs.iter().find(|r| r.name == name)
    }
}

fn iters_to_threshold(psnr_at: &[(u32, f32)], threshold: f32) -> Option<u32> {
    psnr_at
        .iter()
        .find(|(_, p)| *p >= threshold)
        .map(|(it, _)| *it)
}

/// Tabulate checkpoint PSNRs, iterations-to-threshold, and speedup ratios
/// against the named baseline. All runs must share the same checkpoint set.
pub fn evaluate_checkpoints(
    runs: &[(String, Vec<(u32, f32)>)],
    threshold_db: f32,
    baseline: &str,
) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::usage("no runs to evaluate"));
    }
    let checkpoint_set: Vec<u32> = runs[0].1.iter().map(|(it, _)| *it).collect();
    for (name, psnr_at) in runs {
        let this: Vec<u32> = psnr_at.iter().map(|(it, _)| *it).collect();
        if this != checkpoint_set {
            return Err(Error::usage(format!(
                "run '{name}' has checkpoint set {this:?}, expected {checkpoint_set:?}"
            )));
        }
    }
    let baseline_run = runs
        .iter()
        .find(|(n, _)| n == baseline)
        .ok_or_else(|| Error::usage(format!("baseline run '{baseline}' not found")))?;
    let baseline_iters = iters_to_threshold(&baseline_run.1, threshold_db);

    let evals = runs
        .iter()
        .map(|(name, psnr_at)| {
            let own = iters_to_threshold(psnr_at, threshold_db);
            let speedup = match (baseline_iters, own) {
                (Some(b), Some(o)) => Some(b as f32 / o as f32),
                _ => None,
            };
            RunEval {
                name: name.clone(),
                psnr_at: psnr_at.clone(),
                iters_to_threshold: own,
                speedup_vs_baseline: speedup,
            }
        })
        .collect();
    Ok(EvalReport {
        threshold_db,
        baseline: baseline.to_string(),
        runs: evals,
    })
}

/// One arm of the ablation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub prior: bool,
    pub density_scale: f32,
    pub splat_radius: f32,
    pub locked_union: bool,
}

fn ablation_arms(scale: f32) -> Vec<AblationArm> {
    let mut arms = vec![AblationArm {
        name: "baseline".into(),
        prior: false,
        density_scale: 1.0,
        splat_radius: 0.0,
        locked_union: true,
    }];
    for (name, ds, r) in [
        ("prior", 1.0, 0.0),
        ("prior+scale", scale, 0.0),
        ("prior+scale+splat", scale, 1.0),
    ] {
        for locked in [true, false] {
            arms.push(AblationArm {
                name: if locked {
                    format!("{name}+locked")
                } else {
                    name.to_string()
                },
                prior: true,
                density_scale: ds,
                splat_radius: r,
                locked_union: locked,
            });
        }
    }
    arms
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArmResult {
    pub arm: AblationArm,
    pub per_seed_iters_to_threshold: Vec<Option<u32>>,
    pub per_seed_final_psnr: Vec<f32>,
    pub median_iters_to_threshold: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub scene: SceneId,
    pub seeds: Vec<u64>,
    pub threshold_db: f32,
    pub arms: Vec<AblationArmResult>,
}

/// Ablation protocol parameters: the base train configuration plus the
/// controlled degradation applied to the synthetic prior (mirroring sparse,
/// noisy reconstruction output).
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub threshold_db: f32,
    pub prior_points: usize,
    pub dropout: f32,
    pub jitter_sigma: f32,
}

pub fn median_option(values: &[Option<u32>]) -> Option<u32> {
    let mut known: Vec<u32> = values.iter().filter_map(|v| *v).collect();
    if known.len() * 2 <= values.len() {
        // The median run did not reach the threshold.
        return None;
    }
    known.sort_unstable();
    Some(known[known.len() / 2])
}

/// Run the ablation matrix on one procedural scene: baseline, prior without
/// scaling, prior with scaling, and prior with scaling and splatting, each
/// prior arm with and without the locked union. All arms share seeds, data
/// and ray schedules (paired design).
pub fn ablation_suite(
    scene: SceneId,
    seeds: &[u64],
    ring: &crate::procedural::CameraRing,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    let arms = ablation_arms(cfg.base.field.density_scale.scale.max(100.0));
    let mut results: Vec<AblationArmResult> = arms
        .iter()
        .map(|arm| AblationArmResult {
            arm: arm.clone(),
            per_seed_iters_to_threshold: Vec::new(),
            per_seed_final_psnr: Vec::new(),
            median_iters_to_threshold: None,
        })
        .collect();

    for &seed in seeds {
        let ds = crate::procedural::generate_procedural_dataset(
            scene,
            seed,
            ring,
            cfg.base.march.step,
        )?;
        let clean = crate::procedural::sample_prior_cloud(&ds.scene, cfg.prior_points, seed ^ 0x9e37);
        let degraded = crate::cloud::degrade_prior(
            &clean,
            cfg.jitter_sigma,
            cfg.dropout,
            0.0,
            &ds.scene.bbox,
            seed ^ 0x517c,
        )?;

        for (arm, out) in arms.iter().zip(results.iter_mut()) {
            let mut tc = cfg.base.clone();
            tc.seed = seed;
            tc.field.density_scale = DensityScaleConfig {
                scale: arm.density_scale.max(1.0),
            };
            tc.splat_radius = arm.splat_radius;
            tc.update.locked_union = arm.locked_union;
            tc.grid_init = if arm.prior {
                GridInit::PriorSplat
            } else {
                GridInit::RandomBootstrap
            };
            let prior = arm.prior.then_some(&degraded);
            let run = train(&tc, &ds.train, &ds.test, prior)?;
            let psnr_at = run.checkpoint_psnrs();
            out.per_seed_iters_to_threshold
                .push(iters_to_threshold(&psnr_at, cfg.threshold_db));
            out.per_seed_final_psnr
                .push(psnr_at.last().map(|(_, p)| *p).unwrap_or(0.0));
        }
    }

    for out in &mut results {
        out.median_iters_to_threshold = median_option(&out.per_seed_iters_to_threshold);
    }
    Ok(AblationReport {
        scene,
        seeds: seeds.to_vec(),
        threshold_db: cfg.threshold_db,
        arms: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use crate::procedural::{generate_procedural_dataset, CameraRing, SceneId};

    fn tiny_train_config(bbox: Aabb, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::toy(bbox, seed);
        cfg.field.hash.levels = 4;
        cfg.field.hash.table_size = 1 << 10;
        cfg.field.hash.max_resolution = 64;
        cfg.field.hidden_width = 16;
        cfg.grid_resolution = 32;
        cfg.rays_per_batch = 64;
        cfg.march = MarchConfig::new(bbox.diagonal() / 128.0);
        cfg.deterministic = true;
        cfg
    }

    fn tiny_dataset(seed: u64) -> crate::procedural::ProceduralDataset {
        let ring = CameraRing {
            n_train: 8,
            n_test: 4,
            width: 24,
            height: 24,
            ..CameraRing::default()
        };
        generate_procedural_dataset(SceneId::TwoBoxes, seed, &ring, 3.46 / 128.0).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = ImageRgb::filled(8, 8, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0, "identical images hit the cap");

        let b = ImageRgb::filled(8, 8, [0.6; 3]);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "0.1 offset = 20 dB, got {p}");

        let c = ImageRgb::filled(9, 8, [0.5; 3]);
        assert!(matches!(psnr(&a, &c), Err(Error::Usage(_))));
    }

    #[test]
    fn psnr_matches_direct_mse() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut a = ImageRgb::new(16, 16);
        let mut b = ImageRgb::new(16, 16);
        for i in 0..a.pixels.len() {
            a.pixels[i] = [rng.gen(), rng.gen(), rng.gen()];
            b.pixels[i] = [rng.gen(), rng.gen(), rng.gen()];
        }
        let p = psnr(&a, &b).unwrap() as f64;
        let mut mse = 0.0f64;
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            for ch in 0..3 {
                mse += (x[ch] as f64 - y[ch] as f64).powi(2);
            }
        }
        mse /= a.pixels.len() as f64 * 3.0;
        let direct = 10.0 * (1.0 / mse).log10();
        assert!((p - direct).abs() < 1e-5, "psnr {p} vs direct {direct}");
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = tiny_dataset(3);
        let mut cfg = tiny_train_config(ds.scene.bbox, 3);
        cfg.iters = 0;
        cfg.checkpoints = vec![];
        let run = train(&cfg, &ds.train, &ds.test, None).unwrap();
        assert!(run.metrics.is_empty());
        assert_eq!(run.grid.occupied_count(), run.initial_grid.occupied_count());
    }

    #[test]
    fn prior_splat_initial_grid_contract() {
        let ds = tiny_dataset(4);
        let prior = crate::procedural::sample_prior_cloud(&ds.scene, 2000, 5);
        let mut cfg = tiny_train_config(ds.scene.bbox, 4);
        cfg.grid_init = GridInit::PriorSplat;
        cfg.iters = 0;
        cfg.checkpoints = vec![];
        let run = train(&cfg, &ds.train, &ds.test, Some(&prior)).unwrap();

        let (expect, _) = splat(
            &prior,
            &SplatConfig {
                radius: cfg.splat_radius,
                resolution: cfg.grid_resolution,
                bbox: ds.scene.bbox,
            },
        )
        .unwrap();
        assert_eq!(run.grid.bits(), expect.bits());
        assert_eq!(run.grid.prior_mask(), expect.prior_mask());
        assert!(run.grid.prior_count() > 0);
    }

    #[test]
    fn prior_required_for_prior_splat() {
        let ds = tiny_dataset(5);
        let mut cfg = tiny_train_config(ds.scene.bbox, 5);
        cfg.grid_init = GridInit::PriorSplat;
        assert!(matches!(
            train(&cfg, &ds.train, &ds.test, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_checkpoints_rejected() {
        let ds = tiny_dataset(6);
        let mut cfg = tiny_train_config(ds.scene.bbox, 6);
        cfg.iters = 100;
        cfg.checkpoints = vec![10, 200];
        assert!(matches!(
            train(&cfg, &ds.train, &ds.test, None),
            Err(Error::Config(_))
        ));
        cfg.checkpoints = vec![50, 10];
        assert!(matches!(
            train(&cfg, &ds.train, &ds.test, None),
            Err(Error::Config(_))
        ));
    }

    /// Short smoke run: loss drops, metrics are shaped right, prior cells
    /// stay occupied, and the run is bit-reproducible.
    #[test]
    fn smoke_train_runs_and_reproduces() {
        let ds = tiny_dataset(7);
        let prior = crate::procedural::sample_prior_cloud(&ds.scene, 3000, 8);
        let mut cfg = tiny_train_config(ds.scene.bbox, 7);
        cfg.grid_init = GridInit::PriorSplat;
        cfg.iters = 40;
        cfg.checkpoints = vec![10, 40];
        cfg.update.period = 8;

        let run_a = train(&cfg, &ds.train, &ds.test, Some(&prior)).unwrap();
        assert_eq!(run_a.metrics.len(), 40);
        let early: f32 = run_a.metrics[..5].iter().map(|m| m.loss).sum::<f32>() / 5.0;
        let late: f32 = run_a.metrics[35..].iter().map(|m| m.loss).sum::<f32>() / 5.0;
        assert!(late < early, "loss should drop: {early} -> {late}");
        assert_eq!(run_a.checkpoint_psnrs().len(), 2);
        assert!(run_a.metrics.iter().all(|m| m.psnr.is_none()
            || m.iter == 10
            || m.iter == 40));
        // Locked union held through updates.
        assert!(run_a
            .grid
            .prior_mask()
            .is_subset_of(run_a.grid.bits()));

        let run_b = train(&cfg, &ds.train, &ds.test, Some(&prior)).unwrap();
        assert_eq!(
            metrics_to_csv(&run_a.metrics, true),
            metrics_to_csv(&run_b.metrics, true),
            "deterministic reruns must produce identical metric streams"
        );
    }

    #[test]
    fn evaluate_checkpoints_cases() {
        // Threshold above every PSNR: no crossing, ratio undefined.
        let runs = vec![("only".to_string(), vec![(10, 11.0), (100, 18.0)])];
        let rep = evaluate_checkpoints(&runs, 25.0, "only").unwrap();
        assert_eq!(rep.runs[0].iters_to_threshold, None);
        assert_eq!(rep.runs[0].speedup_vs_baseline, None);

        // Crafted streams: A crosses 25 dB at 400, B at 200 -> ratio 2.
        let runs = vec![
            (
                "a".to_string(),
                vec![(100, 20.0), (200, 23.0), (400, 25.5), (800, 30.0)],
            ),
            (
                "b".to_string(),
                vec![(100, 22.0), (200, 25.1), (400, 28.0), (800, 31.0)],
            ),
        ];
        let rep = evaluate_checkpoints(&runs, 25.0, "a").unwrap();
        assert_eq!(rep.run("b").unwrap().iters_to_threshold, Some(200));
        assert_eq!(rep.run("b").unwrap().speedup_vs_baseline, Some(2.0));
        assert_eq!(rep.run("a").unwrap().speedup_vs_baseline, Some(1.0));
        assert!(rep.to_csv().contains("b,200,25.10"));

        // Mismatched checkpoint sets are rejected.
        let runs = vec![
            ("a".to_string(), vec![(10, 20.0)]),
            ("b".to_string(), vec![(20, 20.0)]),
        ];
        assert!(matches!(
            evaluate_checkpoints(&runs, 25.0, "a"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn median_option_handles_missing() {
        assert_eq!(median_option(&[Some(10), Some(20), Some(30)]), Some(20));
        assert_eq!(median_option(&[Some(10), None, None]), None);
        assert_eq!(median_option(&[Some(10), Some(20), None]), Some(20));
        assert_eq!(median_option(&[]), None);
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![
            MetricRow {
                iter: 1,
                loss: 0.125,
                psnr: None,
                occupied_cells: 99,
                samples_per_ray: 12.5,
                wallclock_ms: 33.3,
            },
            MetricRow {
                iter: 2,
                loss: 0.0625,
                psnr: Some(21.234),
                occupied_cells: 98,
                samples_per_ray: 11.0,
                wallclock_ms: 21.0,
            },
        ];
        let csv = metrics_to_csv(&rows, true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iter,loss,psnr,occupied_cells,samples_per_ray,wallclock_ms"
        );
        assert!(lines[1].starts_with("1,"));
        assert!(lines[1].contains(",,99,"), "psnr empty off-checkpoint");
        assert!(lines[2].contains(",21.23,"), "psnr printed with 2 decimals");
        assert!(lines[1].ends_with(",0.0"), "wallclock zeroed when deterministic");
    }
}
