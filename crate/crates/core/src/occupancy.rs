//! The occupancy grid and the operations that make the geometry prior
//! useful: point-cloud splatting, the locked-union update rule, and grid
//! comparison.
//!
//! The grid is a boolean voxelization over the scene box. Ray marching only
//! samples inside occupied cells. The prior mask records which cells were
//! set from the geometry prior at initialization; the update rule never
//! clears them (occupancy = prior OR density-cache > tau).

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::Aabb;

/// Flat bitfield with little-endian bit order (bit i of byte b is cell
/// 8*b + i), x-fastest cell indexing. This is the exact layout the grid
/// snapshot file stores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    bytes: Vec<u8>,
    len: usize,
}

impl BitGrid {
    pub fn new(len: usize) -> Self {
        BitGrid {
            bytes: vec![0u8; len.div_ceil(8)],
            len,
        }
    }

    pub fn filled(len: usize) -> Self {
        let mut g = BitGrid {
            bytes: vec![0xffu8; len.div_ceil(8)],
            len,
        };
        g.clear_tail();
        g
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 8;
        if rem != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= (1u8 << rem) - 1;
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.bytes[i / 8] >> (i % 8)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u8 << (i % 8);
        if value {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::config(format!(
                "bitfield payload {} bytes does not match {} bits",
                bytes.len(),
                len
            )));
        }
        let mut g = BitGrid { bytes, len };
        g.clear_tail();
        Ok(g)
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitGrid) -> bool {
        self.bytes
            .iter()
            .zip(&other.bytes)
            .all(|(a, b)| a & !b == 0)
    }
}

/// Occupancy over an `R^3` lattice with a per-cell density cache and an
/// immutable prior mask.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    resolution: usize,
    bbox: Aabb,
    bits: BitGrid,
    prior: BitGrid,
    cache: Vec<f32>,
}

impl OccupancyGrid {
    pub fn empty(resolution: usize, bbox: Aabb) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::config("grid resolution must be positive"));
        }
        if !bbox.is_valid() {
            return Err(Error::config("invalid bounding box"));
        }
        let n = resolution * resolution * resolution;
        Ok(OccupancyGrid {
            resolution,
            bbox,
            bits: BitGrid::new(n),
            prior: BitGrid::new(n),
            cache: vec![0.0; n],
        })
    }

    /// Fully occupied grid with the cache preloaded to `cache_init`; the
    /// bootstrap initialization for runs without a geometry prior. The cache
    /// preload acts as a grace period: cells survive updates until the decay
    /// brings them below the threshold or the model's density keeps them.
    pub fn all_occupied(resolution: usize, bbox: Aabb, cache_init: f32) -> Result<Self> {
        let mut g = Self::empty(resolution, bbox)?;
        g.bits = BitGrid::filled(g.cell_count());
        g.cache.fill(cache_init);
        Ok(g)
    }

    pub fn from_parts(
        resolution: usize,
        bbox: Aabb,
        bits: BitGrid,
        prior: BitGrid,
        cache: Vec<f32>,
    ) -> Result<Self> {
        let n = resolution * resolution * resolution;
        if bits.len() != n || prior.len() != n || cache.len() != n {
            return Err(Error::config("grid part sizes do not match resolution^3"));
        }
        if !prior.is_subset_of(&bits) {
            return Err(Error::config("prior mask must be a subset of occupancy"));
        }
        if cache.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("density cache must be finite and >= 0"));
        }
        Ok(OccupancyGrid {
            resolution,
            bbox,
            bits,
            prior,
            cache,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn prior_count(&self) -> usize {
        self.prior.count_ones()
    }

    pub fn bits(&self) -> &BitGrid {
        &self.bits
    }

    pub fn prior_mask(&self) -> &BitGrid {
        &self.prior
    }

    pub fn cache(&self) -> &[f32] {
        &self.cache
    }

    /// Seed the density cache of every prior cell. Prior cells are locked
    /// anyway; this keeps them alive in unlocked (ablation) configurations
    /// for the first decay rounds.
    pub fn seed_prior_cache(&mut self, value: f32) {
        for i in 0..self.cell_count() {
            if self.prior.get(i) {
                self.cache[i] = self.cache[i].max(value);
            }
        }
    }

    #[inline]
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.resolution * (c[1] + self.resolution * c[2])
    }

    /// Cell of a point inside the box; the upper boundary maps to the last
    /// cell. Returns None outside the box.
    pub fn cell_of(&self, p: &Vector3<f32>) -> Option<[usize; 3]> {
        if !self.bbox.contains(p) {
            return None;
        }
        let s = self.bbox.size();
        let r = self.resolution;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.bbox.min[a]) / s[a] * r as f32).floor() as i64;
            c[a] = t.clamp(0, r as i64 - 1) as usize;
        }
        Some(c)
    }

    pub fn cell_center(&self, c: [usize; 3]) -> Vector3<f32> {
        let s = self.bbox.size();
        let r = self.resolution as f32;
        Vector3::new(
            self.bbox.min[0] + (c[0] as f32 + 0.5) * s[0] / r,
            self.bbox.min[1] + (c[1] as f32 + 0.5) * s[1] / r,
            self.bbox.min[2] + (c[2] as f32 + 0.5) * s[2] / r,
        )
    }

    pub fn cell_min(&self, c: [usize; 3]) -> Vector3<f32> {
        let s = self.bbox.size();
        let r = self.resolution as f32;
        Vector3::new(
            self.bbox.min[0] + c[0] as f32 * s[0] / r,
            self.bbox.min[1] + c[1] as f32 * s[1] / r,
            self.bbox.min[2] + c[2] as f32 * s[2] / r,
        )
    }

    pub fn cell_widths(&self) -> [f32; 3] {
        let s = self.bbox.size();
        let r = self.resolution as f32;
        [s[0] / r, s[1] / r, s[2] / r]
    }

    pub fn get_cell(&self, c: [usize; 3]) -> bool {
        self.bits.get(self.cell_index(c))
    }

    pub fn set_cell(&mut self, c: [usize; 3], value: bool) {
        let i = self.cell_index(c);
        self.bits.set(i, value);
    }

    pub fn set_prior_cell(&mut self, c: [usize; 3]) {
        let i = self.cell_index(c);
        self.prior.set(i, true);
        self.bits.set(i, true);
    }

    /// Whether the cell containing `point` is occupied. Points outside the
    /// box are empty space.
    pub fn occupied(&self, point: &Vector3<f32>) -> bool {
        match self.cell_of(point) {
            Some(c) => self.bits.get(self.cell_index(c)),
            None => false,
        }
    }

    pub fn occupied_cells(&self) -> Vec<[usize; 3]> {
        let r = self.resolution;
        let mut out = Vec::new();
        let mut i = 0usize;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    if self.bits.get(i) {
                        out.push([x, y, z]);
                    }
                    i += 1;
                }
            }
        }
        out
    }
}

/// Splatting configuration. The radius is measured in cell widths using the
/// Euclidean cell-center-to-point distance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplatConfig {
    pub radius: f32,
    pub resolution: usize,
    pub bbox: Aabb,
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 0.0 {
            return Err(Error::config("splat radius must be >= 0"));
        }
        if self.resolution == 0 {
            return Err(Error::config("grid resolution must be positive"));
        }
        if !self.bbox.is_valid() {
            return Err(Error::config("degenerate bounding box"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplatReport {
    pub points_used: usize,
    /// Points outside the bounding box are dropped with a count, never an
    /// abort; real reconstruction clouds contain far outliers.
    pub points_outside: usize,
}

/// Voxelize a point cloud: a cell is marked when its center lies within
/// `radius` (in cell widths) of some point, and the cell containing each
/// in-box point is always marked. The returned grid's prior mask equals its
/// occupancy bitfield.
pub fn splat(cloud: &PointCloud, cfg: &SplatConfig) -> Result<(OccupancyGrid, SplatReport)> {
    cfg.validate()?;
    let mut grid = OccupancyGrid::empty(cfg.resolution, cfg.bbox)?;
    let mut report = SplatReport::default();
    let r = cfg.resolution as i64;
    let size = cfg.bbox.size();
    let radius = cfg.radius;
    let rad_sq = radius * radius;

    for p in &cloud.points {
        if !cfg.bbox.contains(p) {
            report.points_outside += 1;
            continue;
        }
        report.points_used += 1;
        // Continuous cell coordinates in [0, R].
        let q = [
            (p.x - cfg.bbox.min[0]) / size[0] * cfg.resolution as f32,
            (p.y - cfg.bbox.min[1]) / size[1] * cfg.resolution as f32,
            (p.z - cfg.bbox.min[2]) / size[2] * cfg.resolution as f32,
        ];
        let containing = [
            (q[0].floor() as i64).clamp(0, r - 1) as usize,
            (q[1].floor() as i64).clamp(0, r - 1) as usize,
            (q[2].floor() as i64).clamp(0, r - 1) as usize,
        ];
        grid.set_prior_cell(containing);
        if radius <= 0.0 {
            continue;
        }
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            lo[a] = ((q[a] - 0.5 - radius).ceil() as i64).clamp(0, r - 1);
            hi[a] = ((q[a] - 0.5 + radius).floor() as i64).clamp(0, r - 1);
        }
        for z in lo[2]..=hi[2] {
            let dz = z as f32 + 0.5 - q[2];
            for y in lo[1]..=hi[1] {
                let dy = y as f32 + 0.5 - q[1];
                for x in lo[0]..=hi[0] {
                    let dx = x as f32 + 0.5 - q[0];
                    if dx * dx + dy * dy + dz * dz <= rad_sq {
                        grid.set_prior_cell([x as usize, y as usize, z as usize]);
                    }
                }
            }
        }
    }
    Ok((grid, report))
}

/// Density source for grid updates. Implemented by the radiance field; plain
/// closures over single points work too.
pub trait DensityProbe {
    fn densities(&self, points: &[Vector3<f32>]) -> Vec<f32>;
}

impl<F> DensityProbe for F
where
    F: Fn(&Vector3<f32>) -> f32,
{
    fn densities(&self, points: &[Vector3<f32>]) -> Vec<f32> {
        points.iter().map(self).collect()
    }
}

/// Parameters of the periodic occupancy re-estimation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridUpdateConfig {
    /// Density threshold tau: cells whose cached density exceeds it are
    /// occupied.
    pub density_threshold: f32,
    /// Multiplicative cache decay per update round.
    pub cache_decay: f32,
    /// Update period in training iterations.
    pub period: u32,
    /// When true (the default), prior-mask cells stay occupied regardless of
    /// the cache: occupancy = prior OR cache > tau. When false the prior
    /// mask is ignored by the rule (ablation arm).
    pub locked_union: bool,
}

impl Default for GridUpdateConfig {
    fn default() -> Self {
        GridUpdateConfig {
            density_threshold: 10.0,
            cache_decay: 0.95,
            period: 16,
            locked_union: true,
        }
    }
}

impl GridUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.density_threshold <= 0.0 {
            return Err(Error::config("density threshold must be > 0"));
        }
        if !(0.0..1.0).contains(&self.cache_decay) || self.cache_decay == 0.0 {
            return Err(Error::config("cache decay must lie in (0, 1)"));
        }
        if self.period < 1 {
            return Err(Error::config("update period must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub cells_added: usize,
    pub cells_removed: usize,
    pub samples_probed: usize,
}

/// One occupancy re-estimation round.
///
/// Samples one jittered position per currently-occupied cell plus an
/// equal-size uniform sample over the whole box, probes densities, updates
/// the cache as `max(decay * cache, probed)` per sampled cell, then
/// re-evaluates every cell as `prior OR cache > tau`.
pub fn update_grid<P: DensityProbe + ?Sized>(
    grid: &mut OccupancyGrid,
    probe: &P,
    cfg: &GridUpdateConfig,
    seed: u64,
) -> Result<UpdateReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = grid.cell_widths();

    let occupied = grid.occupied_cells();
    let mut positions = Vec::with_capacity(occupied.len() * 2);
    let mut cells = Vec::with_capacity(occupied.len() * 2);
    for c in &occupied {
        let lo = grid.cell_min(*c);
        positions.push(Vector3::new(
            lo.x + rng.gen::<f32>() * widths[0],
            lo.y + rng.gen::<f32>() * widths[1],
            lo.z + rng.gen::<f32>() * widths[2],
        ));
        cells.push(grid.cell_index(*c));
    }
    let bbox = grid.bbox();
    for _ in 0..occupied.len() {
        let p = Vector3::new(
            rng.gen_range(bbox.min[0]..bbox.max[0]),
            rng.gen_range(bbox.min[1]..bbox.max[1]),
            rng.gen_range(bbox.min[2]..bbox.max[2]),
        );
        let c = grid.cell_of(&p).expect("uniform sample inside box");
        cells.push(grid.cell_index(c));
        positions.push(p);
    }

    let sigmas = probe.densities(&positions);
    if sigmas.len() != positions.len() {
        return Err(Error::usage("density probe returned wrong sample count"));
    }

    // Per-cell max of this round's probes (order-independent merge).
    let mut probed: Vec<(usize, f32)> = cells.into_iter().zip(sigmas).collect();
    probed.sort_unstable_by_key(|(c, _)| *c);
    let mut i = 0usize;
    while i < probed.len() {
        let cell = probed[i].0;
        let mut m = 0.0f32;
        let mut j = i;
        while j < probed.len() && probed[j].0 == cell {
            m = m.max(probed[j].1);
            j += 1;
        }
        if !m.is_finite() {
            m = 0.0;
        }
        grid.cache[cell] = (cfg.cache_decay * grid.cache[cell]).max(m.max(0.0));
        i = j;
    }

    let mut report = UpdateReport {
        samples_probed: positions.len(),
        ..Default::default()
    };
    for i in 0..grid.cell_count() {
        let was = grid.bits.get(i);
        let keep_prior = cfg.locked_union && grid.prior.get(i);
        let now = keep_prior || grid.cache[i] > cfg.density_threshold;
        if now != was {
            if now {
                report.cells_added += 1;
            } else {
                report.cells_removed += 1;
            }
            grid.bits.set(i, now);
        }
    }
    if cfg.locked_union {
        debug_assert!(grid.prior.is_subset_of(&grid.bits));
    }
    Ok(report)
}

/// Intersection-over-union of two grids' occupancy bitfields. Defined as 1
/// when both grids are empty.
pub fn grid_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f32> {
    if a.resolution != b.resolution || a.bbox != b.bbox {
        return Err(Error::usage(format!(
            "grid shapes do not match: {}^3 {:?} vs {}^3 {:?}",
            a.resolution, a.bbox, b.resolution, b.bbox
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.bytes.iter().zip(&b.bits.bytes) {
        inter += (x & y).count_ones() as usize;
        union += (x | y).count_ones() as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f32 / union as f32)
}
