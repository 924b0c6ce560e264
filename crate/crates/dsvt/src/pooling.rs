//! Attention-style 3D pooling over dense-ified local regions, plus the
//! linear and max-pooling baselines.
//!
//! Each non-empty pooling region is padded to a dense `l*w*h` block (empty
//! child cells hold zero features). A max-pooled query cross-attends over the
//! block; positional encodings are added to the query and keys so empty cells
//! still contribute geometric information to the addressing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{layer_norm, positional_encoding};
use crate::error::{Error, Result};
use crate::params::{tensor_rng, LayerNormParams, Linear};
use crate::tensor::FeatureTensor;
use crate::voxel::{GridSpec, SparseVoxelGrid};

/// Non-overlapping pooling region; the stride equals the region size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRegionSpec {
    pub region: [usize; 3],
}

impl PoolRegionSpec {
    pub fn z_stride(stride: usize) -> Self {
        Self {
            region: [1, 1, stride],
        }
    }

    pub fn slots(&self) -> usize {
        self.region.iter().product()
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.region[a] == 0 {
                return Err(Error::Config(format!("pool region axis {a} must be >= 1")));
            }
            if dims[a] % self.region[a] != 0 {
                return Err(Error::Config(format!(
                    "pool region {} does not divide grid extent {} on axis {a}",
                    self.region[a], dims[a]
                )));
            }
        }
        Ok(())
    }
}

/// Pooling operator selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolVariant {
    /// Max-pooled query attending over the full dense region (no key mask).
    AttnPool,
    /// Same, with empty children masked out of the softmax.
    AttnPoolMasked,
    /// The max-pooled query alone.
    MaxPoolOnly,
    /// Flatten the dense block and apply one affine layer plus LayerNorm.
    LinearPool,
}

/// Weights of one pooling stage. All variants share the container; each uses
/// the pieces it needs.
#[derive(Debug, Clone)]
pub struct PoolParams {
    pub channels: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `(C, l*w*h*C)` projection of the flattened block (LinearPool).
    pub flatten: Linear,
    pub ln: LayerNormParams,
}

impl PoolParams {
    pub fn seeded(channels: usize, heads: usize, region: [usize; 3], seed: u64) -> Self {
        let slots: usize = region.iter().product();
        Self {
            channels,
            heads,
            wq: Linear::seeded(channels, channels, &mut tensor_rng(seed, "pool.wq")),
            wk: Linear::seeded(channels, channels, &mut tensor_rng(seed, "pool.wk")),
            wv: Linear::seeded(channels, channels, &mut tensor_rng(seed, "pool.wv")),
            wo: Linear::seeded(channels, channels, &mut tensor_rng(seed, "pool.wo")),
            flatten: Linear::seeded(
                channels,
                slots * channels,
                &mut tensor_rng(seed, "pool.flatten"),
            ),
            ln: LayerNormParams::identity(channels),
        }
    }

    /// Identity attention projections and no-op flatten, for hand-checkable
    /// tests.
    pub fn identity(channels: usize, heads: usize, region: [usize; 3]) -> Self {
        let slots: usize = region.iter().product();
        Self {
            channels,
            heads,
            wq: Linear::identity(channels),
            wk: Linear::identity(channels),
            wv: Linear::identity(channels),
            wo: Linear::identity(channels),
            flatten: Linear {
                weight: FeatureTensor::zeros(&[channels, slots * channels]),
                bias: vec![0.0; channels],
            },
            ln: LayerNormParams::identity(channels),
        }
    }

    pub fn validate(&self, region: [usize; 3]) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "pool heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        let slots: usize = region.iter().product();
        if self.flatten.in_dim() != slots * self.channels
            || self.flatten.out_dim() != self.channels
        {
            return Err(Error::Config(format!(
                "pool flatten projection is ({}, {}), expected ({}, {})",
                self.flatten.out_dim(),
                self.flatten.in_dim(),
                self.channels,
                slots * self.channels
            )));
        }
        Ok(())
    }
}

/// Dense per-region blocks of one pooling pass.
#[derive(Debug, Clone)]
pub struct RegionBlocks {
    /// Output (parent) voxel coordinates, raster order.
    pub parent_coords: Vec<[u32; 3]>,
    /// `(regions, l*w*h, C)`; empty child cells hold zero vectors.
    pub features: FeatureTensor,
    /// `(regions * l*w*h)` flattened child-validity mask.
    pub child_mask: Vec<bool>,
    /// `(l*w*h, 3)` inner offsets of the region raster, shared by every block.
    pub child_offsets: FeatureTensor,
    pub region: [usize; 3],
}

impl RegionBlocks {
    pub fn num_regions(&self) -> usize {
        self.parent_coords.len()
    }

    pub fn block(&self, r: usize) -> &[f32] {
        let rowlen = self.features.shape()[1] * self.features.shape()[2];
        &self.features.data()[r * rowlen..(r + 1) * rowlen]
    }

    pub fn mask(&self, r: usize) -> &[bool] {
        let slots = self.features.shape()[1];
        &self.child_mask[r * slots..(r + 1) * slots]
    }
}

fn child_slot(offset: [u32; 3], region: [usize; 3]) -> usize {
    (offset[2] as usize * region[1] + offset[1] as usize) * region[0] + offset[0] as usize
}

/// Densify every pooling region holding at least one occupied voxel.
pub fn group_regions(grid: &SparseVoxelGrid, spec: &PoolRegionSpec) -> Result<RegionBlocks> {
    let dims = grid.dims();
    spec.validate(dims)?;
    let region = spec.region;
    let slots = spec.slots();
    let channels = grid.channels();
    let parent_dims = [
        dims[0] / region[0],
        dims[1] / region[1],
        dims[2] / region[2],
    ];

    // Parent raster key per voxel, then group.
    let keyed: Vec<(u64, u32)> = grid
        .coords()
        .iter()
        .enumerate()
        .map(|(v, c)| {
            let p = [
                c[0] as usize / region[0],
                c[1] as usize / region[1],
                c[2] as usize / region[2],
            ];
            let key = (p[2] as u64 * parent_dims[1] as u64 + p[1] as u64) * parent_dims[0] as u64
                + p[0] as u64;
            (key, v as u32)
        })
        .collect();
    let mut order: Vec<usize> = (0..keyed.len()).collect();
    order.sort_unstable_by_key(|&i| keyed[i]);

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || keyed[order[i]].0 != keyed[order[start]].0 {
            runs.push((start, i));
            start = i;
        }
    }

    let mut parent_coords = vec![[0u32; 3]; runs.len()];
    let mut features = FeatureTensor::zeros(&[runs.len(), slots, channels]);
    let mut child_mask = vec![false; runs.len() * slots];

    features
        .data_mut()
        .par_chunks_mut(slots * channels)
        .zip(child_mask.par_chunks_mut(slots))
        .zip(parent_coords.par_iter_mut())
        .zip(&runs)
        .for_each(|(((block, mask), parent), &(lo, hi))| {
            let first = grid.coords()[keyed[order[lo]].1 as usize];
            *parent = [
                first[0] / region[0] as u32,
                first[1] / region[1] as u32,
                first[2] / region[2] as u32,
            ];
            for &i in &order[lo..hi] {
                let v = keyed[i].1 as usize;
                let c = grid.coords()[v];
                let offset = [
                    c[0] - parent[0] * region[0] as u32,
                    c[1] - parent[1] * region[1] as u32,
                    c[2] - parent[2] * region[2] as u32,
                ];
                let slot = child_slot(offset, region);
                mask[slot] = true;
                block[slot * channels..(slot + 1) * channels]
                    .copy_from_slice(grid.feature_row(v));
            }
        });

    // Shared raster offsets for positional encoding of child cells.
    let mut offs = Vec::with_capacity(slots * 3);
    for oz in 0..region[2] {
        for oy in 0..region[1] {
            for ox in 0..region[0] {
                offs.extend_from_slice(&[ox as f32, oy as f32, oz as f32]);
            }
        }
    }
    let child_offsets = FeatureTensor::from_vec(&[slots, 3], offs)?;

    Ok(RegionBlocks {
        parent_coords,
        features,
        child_mask,
        child_offsets,
        region,
    })
}

/// Componentwise max over the valid children of one block.
pub fn max_pool_query(block: &[f32], child_mask: &[bool], channels: usize) -> Vec<f32> {
    debug_assert_eq!(block.len(), child_mask.len() * channels);
    let mut out = vec![f32::NEG_INFINITY; channels];
    let mut any = false;
    for (slot, valid) in child_mask.iter().enumerate() {
        if !valid {
            continue;
        }
        any = true;
        for (o, v) in out.iter_mut().zip(&block[slot * channels..(slot + 1) * channels]) {
            *o = o.max(*v);
        }
    }
    assert!(any, "max_pool_query on a region with no valid child");
    out
}

/// Pool one dense block down to a single feature row.
///
/// `child_pe` is the positional encoding of the child offsets and
/// `center_pe` that of the region center; both are added to the attention
/// addressing (query and keys) but never to the values.
pub fn attn_pool_single(
    block: &[f32],
    child_mask: &[bool],
    child_pe: &FeatureTensor,
    center_pe: &[f32],
    variant: PoolVariant,
    params: &PoolParams,
) -> Vec<f32> {
    let c = params.channels;
    let slots = child_mask.len();
    let query_base = max_pool_query(block, child_mask, c);
    match variant {
        PoolVariant::MaxPoolOnly => query_base,
        PoolVariant::LinearPool => {
            let mut flat = vec![0.0f32; c];
            params.flatten.apply(block, &mut flat);
            let t = FeatureTensor::from_vec(&[1, c], flat).expect("flatten row");
            layer_norm(&t, &params.ln).into_data()
        }
        PoolVariant::AttnPool | PoolVariant::AttnPoolMasked => {
            let masked = matches!(variant, PoolVariant::AttnPoolMasked);
            let heads = params.heads;
            let d = c / heads;
            let scale = 1.0 / (d as f64).sqrt();

            let q_in: Vec<f32> = query_base
                .iter()
                .zip(center_pe)
                .map(|(a, b)| a + b)
                .collect();
            let mut q = vec![0.0f32; c];
            params.wq.apply(&q_in, &mut q);

            let mut k = vec![0.0f32; slots * c];
            let mut v = vec![0.0f32; slots * c];
            let mut kin = vec![0.0f32; c];
            for j in 0..slots {
                let row = &block[j * c..(j + 1) * c];
                let pe = child_pe.row(j);
                for i in 0..c {
                    kin[i] = row[i] + pe[i];
                }
                params.wk.apply(&kin, &mut k[j * c..(j + 1) * c]);
                params.wv.apply(row, &mut v[j * c..(j + 1) * c]);
            }

            let mut attn = vec![0.0f32; c];
            let mut scores = vec![0.0f64; slots];
            for h in 0..heads {
                let off = h * d;
                let mut max = f64::NEG_INFINITY;
                for j in 0..slots {
                    if masked && !child_mask[j] {
                        continue;
                    }
                    let mut dot = 0.0f64;
                    for a in 0..d {
                        dot += q[off + a] as f64 * k[j * c + off + a] as f64;
                    }
                    scores[j] = dot * scale;
                    if scores[j] > max {
                        max = scores[j];
                    }
                }
                let mut denom = 0.0f64;
                for j in 0..slots {
                    if masked && !child_mask[j] {
                        continue;
                    }
                    scores[j] = (scores[j] - max).exp();
                    denom += scores[j];
                }
                for a in 0..d {
                    let mut acc = 0.0f64;
                    for j in 0..slots {
                        if masked && !child_mask[j] {
                            continue;
                        }
                        acc += scores[j] * v[j * c + off + a] as f64;
                    }
                    attn[off + a] = (acc / denom) as f32;
                }
            }
            let mut out = vec![0.0f32; c];
            params.wo.apply(&attn, &mut out);
            out
        }
    }
}

/// Apply one pooling stage to a whole grid, producing the downsampled grid.
/// Output voxels are the regions with at least one occupied child, at the
/// integer-divided parent coordinates, in raster order.
pub fn pool_grid(
    grid: &SparseVoxelGrid,
    spec: &PoolRegionSpec,
    variant: PoolVariant,
    params: &PoolParams,
) -> Result<SparseVoxelGrid> {
    params.validate(spec.region)?;
    if params.channels != grid.channels() {
        return Err(Error::Contract(format!(
            "pool params have {} channels, grid has {}",
            params.channels,
            grid.channels()
        )));
    }
    let blocks = group_regions(grid, spec)?;
    let c = grid.channels();
    let slots = spec.slots();

    let child_pe = positional_encoding(&blocks.child_offsets, spec.region, c)?;
    let center: Vec<f32> = spec
        .region
        .iter()
        .map(|r| (*r as f32 - 1.0) / 2.0)
        .collect();
    let center_t = FeatureTensor::from_vec(&[1, 3], center)?;
    let center_pe = positional_encoding(&center_t, spec.region, c)?;

    let mut pooled = FeatureTensor::zeros(&[blocks.num_regions(), c]);
    pooled
        .data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(r, out)| {
            let row = attn_pool_single(
                blocks.block(r),
                &blocks.child_mask[r * slots..(r + 1) * slots],
                &child_pe,
                center_pe.data(),
                variant,
                params,
            );
            out.copy_from_slice(&row);
        });

    let dims = grid.dims();
    let new_dims = [
        dims[0] / spec.region[0],
        dims[1] / spec.region[1],
        dims[2] / spec.region[2],
    ];
    let old = grid.spec();
    let new_spec = GridSpec {
        range_min: old.range_min,
        range_max: old.range_max,
        voxel_size: [
            old.voxel_size[0] * spec.region[0] as f32,
            old.voxel_size[1] * spec.region[1] as f32,
            old.voxel_size[2] * spec.region[2] as f32,
        ],
    };
    SparseVoxelGrid::new(blocks.parent_coords, pooled, new_dims, new_spec)
}
