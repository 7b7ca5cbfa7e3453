//! The learnable scene representation: hash-encoded features feeding a
//! density head (1 hidden layer, scaled-exponential output) and a color head
//! (2 hidden layers, sigmoid output).
//!
//! Batched forward/backward over flat sample lists; parallelism lives in the
//! caller, which processes fixed-size ray chunks and merges gradients in
//! chunk order so results do not depend on thread count.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom::mix_seed;
use crate::hashgrid::{CornerRef, FeatureTables, HashEncoder, HashGridConfig};
use crate::nn::{Activation, Mlp, MlpGrads, MlpTape};
use crate::occupancy::DensityProbe;
use crate::render::DensityScaleConfig;

/// Hidden width of both MLP heads.
pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hash: HashGridConfig,
    pub hidden_width: usize,
    pub density_scale: DensityScaleConfig,
}

impl FieldConfig {
    pub fn new(hash: HashGridConfig, density_scale: DensityScaleConfig) -> Self {
        FieldConfig {
            hash,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            density_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        self.density_scale.validate()?;
        if self.hidden_width == 0 {
            return Err(crate::error::Error::config("hidden width must be positive"));
        }
        Ok(())
    }
}

/// Forward record for one batch of sample positions.
pub struct FieldForward {
    pub encoded: Array2<f32>,
    pub footprints: Vec<[CornerRef; 8]>,
    pub density_tape: MlpTape,
    pub color_tape: MlpTape,
    pub sigma: Vec<f32>,
    pub rgb: Vec<[f32; 3]>,
}

/// Parameter gradients for one batch, aligned with [`RadianceField`]
/// parameter tensors.
pub struct FieldGrads {
    pub tables: Vec<f32>,
    pub density: MlpGrads,
    pub color: MlpGrads,
}

impl FieldGrads {
    pub fn zeros_like(field: &RadianceField) -> Self {
        FieldGrads {
            tables: vec![0.0; field.tables.len()],
            density: MlpGrads::zeros_like(&field.density_head),
            color: MlpGrads::zeros_like(&field.color_head),
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            *a += b;
        }
        self.density.add_assign(&other.density);
        self.color.add_assign(&other.color);
    }
}

pub struct RadianceField {
    config: FieldConfig,
    encoder: HashEncoder,
    tables: FeatureTables,
    density_head: Mlp,
    color_head: Mlp,
}

impl RadianceField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = HashEncoder::new(config.hash)?;
        let tables = FeatureTables::new(&config.hash, mix_seed(seed, 1, 0))?;
        let d = config.hash.output_dim();
        let h = config.hidden_width;
        let density_head = Mlp::new(
            &[d, h, 1],
            Activation::ExpScaled {
                scale: config.density_scale.scale,
            },
            mix_seed(seed, 2, 0),
        )?;
        let color_head = Mlp::new(&[d, h, h, 3], Activation::Sigmoid, mix_seed(seed, 3, 0))?;
        Ok(RadianceField {
            config,
            encoder,
            tables,
            density_head,
            color_head,
        })
    }

    pub fn from_parts(
        config: FieldConfig,
        tables: FeatureTables,
        density_head: Mlp,
        color_head: Mlp,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = HashEncoder::new(config.hash)?;
        Ok(RadianceField {
            config,
            encoder,
            tables,
            density_head,
            color_head,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn encoder(&self) -> &HashEncoder {
        &self.encoder
    }

    pub fn tables(&self) -> &FeatureTables {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut FeatureTables {
        &mut self.tables
    }

    pub fn density_head(&self) -> &Mlp {
        &self.density_head
    }

    pub fn color_head(&self) -> &Mlp {
        &self.color_head
    }

    pub fn param_count(&self) -> usize {
        self.tables.len() + self.density_head.param_count() + self.color_head.param_count()
    }

    /// All parameter tensors in the fixed optimizer order: tables first,
    /// then density head (w, b per layer), then color head.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = vec![self.tables.data_mut() as &mut [f32]];
        out.extend(self.density_head.param_tensors_mut());
        out.extend(self.color_head.param_tensors_mut());
        out
    }

    pub fn param_tensor_lens(&self) -> Vec<usize> {
        let mut out = vec![self.tables.len()];
        out.extend(self.density_head.param_tensors().iter().map(|t| t.len()));
        out.extend(self.color_head.param_tensors().iter().map(|t| t.len()));
        out
    }

    /// Encode a batch of in-box positions and run both heads.
    pub fn forward_samples(&self, points: &[Vector3<f32>]) -> Result<FieldForward> {
        let n = points.len();
        let d = self.encoder.output_dim();
        let levels = self.config.hash.levels;
        let mut encoded = Array2::<f32>::zeros((n, d));
        let mut footprints =
            vec![[CornerRef { index: 0, weight: 0.0 }; 8]; n * levels];
        {
            let enc_slice = encoded.as_slice_mut().expect("contiguous");
            for (i, p) in points.iter().enumerate() {
                self.encoder.encode_unchecked(
                    &self.tables,
                    p,
                    &mut enc_slice[i * d..(i + 1) * d],
                    &mut footprints[i * levels..(i + 1) * levels],
                );
            }
        }
        let (sig_out, density_tape) = self.density_head.forward(encoded.view())?;
        let (rgb_out, color_tape) = self.color_head.forward(encoded.view())?;
        let sigma = sig_out.column(0).to_vec();
        let rgb = (0..n)
            .map(|i| [rgb_out[(i, 0)], rgb_out[(i, 1)], rgb_out[(i, 2)]])
            .collect();
        Ok(FieldForward {
            encoded,
            footprints,
            density_tape,
            color_tape,
            sigma,
            rgb,
        })
    }

    /// Backward from per-sample density/color gradients down to parameter
    /// gradients. Table gradients scatter through the stored footprints.
    pub fn backward_samples(
        &self,
        fwd: &FieldForward,
        d_sigma: &[f32],
        d_rgb: &[[f32; 3]],
        out: &mut FieldGrads,
    ) -> Result<()> {
        let n = fwd.sigma.len();
        debug_assert_eq!(d_sigma.len(), n);
        debug_assert_eq!(d_rgb.len(), n);
        let ds = Array2::from_shape_fn((n, 1), |(i, _)| d_sigma[i]);
        let dc = Array2::from_shape_fn((n, 3), |(i, j)| d_rgb[i][j]);
        let (dens_grads, denc_a) = self.density_head.backward(&fwd.density_tape, ds.view())?;
        let (color_grads, denc_b) = self.color_head.backward(&fwd.color_tape, dc.view())?;
        out.density.add_assign(&dens_grads);
        out.color.add_assign(&color_grads);

        let d = self.encoder.output_dim();
        let levels = self.config.hash.levels;
        let mut upstream = vec![0.0f32; d];
        for i in 0..n {
            for j in 0..d {
                upstream[j] = denc_a[(i, j)] + denc_b[(i, j)];
            }
            self.encoder.scatter_gradients(
                &fwd.footprints[i * levels..(i + 1) * levels],
                &upstream,
                &mut out.tables,
            );
        }
        Ok(())
    }

    /// Density-only forward without tape, chunked in parallel. This is the
    /// probe the occupancy updates use; it returns the scaled density the
    /// renderer would see.
    pub fn density_batch(&self, points: &[Vector3<f32>]) -> Vec<f32> {
        const CHUNK: usize = 4096;
        let parts: Vec<Vec<f32>> = points
            .par_chunks(CHUNK)
            .map(|chunk| {
                let d = self.encoder.output_dim();
                let levels = self.config.hash.levels;
                let mut enc = Array2::<f32>::zeros((chunk.len(), d));
                let mut fp = vec![[CornerRef { index: 0, weight: 0.0 }; 8]; levels];
                let slice = enc.as_slice_mut().expect("contiguous");
                for (i, p) in chunk.iter().enumerate() {
                    self.encoder.encode_unchecked(
                        &self.tables,
                        p,
                        &mut slice[i * d..(i + 1) * d],
                        &mut fp,
                    );
                }
                let (out, _) = self
                    .density_head
                    .forward(enc.view())
                    .expect("shapes fixed by construction");
                out.column(0).to_vec()
            })
            .collect();
        parts.concat()
    }

    /// Color-only forward (no tape) for a batch of positions.
    pub fn rgb_batch(&self, points: &[Vector3<f32>]) -> Vec<[f32; 3]> {
        let fwd = self.forward_no_tape(points);
        fwd.1
    }

    /// Density and color without tapes, serial; used by the segmented
    /// renderer which batches across rays itself.
    pub fn forward_no_tape(&self, points: &[Vector3<f32>]) -> (Vec<f32>, Vec<[f32; 3]>) {
        let n = points.len();
        let d = self.encoder.output_dim();
        let levels = self.config.hash.levels;
        let mut enc = Array2::<f32>::zeros((n, d));
        let mut fp = vec![[CornerRef { index: 0, weight: 0.0 }; 8]; levels];
        {
            let slice = enc.as_slice_mut().expect("contiguous");
            for (i, p) in points.iter().enumerate() {
                self.encoder
                    .encode_unchecked(&self.tables, p, &mut slice[i * d..(i + 1) * d], &mut fp);
            }
        }
        let (sig, _) = self
            .density_head
            .forward(enc.view())
            .expect("shapes fixed by construction");
        let (rgb, _) = self
            .color_head
            .forward(enc.view())
            .expect("shapes fixed by construction");
        (
            sig.column(0).to_vec(),
            (0..n).map(|i| [rgb[(i, 0)], rgb[(i, 1)], rgb[(i, 2)]]).collect(),
        )
    }
}

impl RadianceField {
    /// Forward-only rendering of a set of rays against an occupancy grid:
    /// segmented marching with early termination, batched through the MLPs.
    /// Fixed phase 0.5 (evaluation convention). Parallel over ray chunks;
    /// results are per-ray and independent of thread count.
    pub fn render_rays(
        &self,
        rays: &[crate::camera::Ray],
        grid: &crate::occupancy::OccupancyGrid,
        march: &crate::render::MarchConfig,
        background: [f32; 3],
    ) -> Vec<[f32; 3]> {
        const RAY_CHUNK: usize = 256;
        const SEG: usize = 32;
        let bbox = grid.bbox();
        let parts: Vec<Vec<[f32; 3]>> = rays
            .par_chunks(RAY_CHUNK)
            .map(|chunk| {
                struct RayState {
                    step_index: u32,
                    emitted: usize,
                    trans: f32,
                    accum: [f32; 3],
                    done: bool,
                }
                let mut states: Vec<RayState> = chunk
                    .iter()
                    .map(|r| RayState {
                        step_index: 0,
                        emitted: 0,
                        trans: 1.0,
                        accum: [0.0; 3],
                        done: r.degenerate,
                    })
                    .collect();
                let mut positions: Vec<Vector3<f32>> = Vec::new();
                let mut owners: Vec<usize> = Vec::new();
                loop {
                    positions.clear();
                    owners.clear();
                    for (ri, ray) in chunk.iter().enumerate() {
                        let st = &mut states[ri];
                        if st.done {
                            continue;
                        }
                        let mut got = 0usize;
                        loop {
                            let t = ray.near + (st.step_index as f32 + 0.5) * march.step;
                            if t >= ray.far {
                                st.done = true;
                                break;
                            }
                            if st.emitted >= march.max_samples {
                                st.done = true;
                                break;
                            }
                            st.step_index += 1;
                            let p = bbox.clamp(&(ray.origin + t * ray.dir));
                            if grid.occupied(&p) {
                                positions.push(p);
                                owners.push(ri);
                                st.emitted += 1;
                                got += 1;
                                if got >= SEG {
                                    break;
                                }
                            }
                        }
                    }
                    if positions.is_empty() {
                        break;
                    }
                    let (sigma, rgb) = self.forward_no_tape(&positions);
                    for (k, &ri) in owners.iter().enumerate() {
                        let st = &mut states[ri];
                        if st.done && st.trans < march.early_stop {
                            continue;
                        }
                        let alpha = 1.0 - (-sigma[k] * march.step).exp();
                        let t_next = st.trans * (1.0 - alpha);
                        let w = st.trans - t_next;
                        for ch in 0..3 {
                            st.accum[ch] += w * rgb[k][ch];
                        }
                        st.trans = t_next;
                        if march.early_stop > 0.0 && st.trans < march.early_stop {
                            st.done = true;
                        }
                    }
                }
                states
                    .iter()
                    .map(|st| {
                        let mut px = st.accum;
                        for ch in 0..3 {
                            px[ch] += st.trans * background[ch];
                        }
                        px
                    })
                    .collect()
            })
            .collect();
        parts.concat()
    }
}

impl DensityProbe for RadianceField {
    fn densities(&self, points: &[Vector3<f32>]) -> Vec<f32> {
        self.density_batch(points)
    }
}

/// Helper for tests and snapshot code: identical encoded view through an
/// explicit view type.
pub fn encoded_view(fwd: &FieldForward) -> ArrayView2<'_, f32> {
    fwd.encoded.view()
}
