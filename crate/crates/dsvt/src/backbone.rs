//! The full backbone: blocks of rotated-set attention layers over windowed
//! sparse voxels, optional Z-axis pooling between stages, and the final
//! bird's-eye-view scatter. Ships the pillar (P) and voxel (V) presets.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{positional_encoding, transformer_layer, AttentionParams};
use crate::error::{Error, Result};
use crate::params::{
    derive_seed, load_tensors, save_tensors, LayerNormParams, Linear, NamedTensor,
};
use crate::pooling::{pool_grid, PoolParams, PoolRegionSpec, PoolVariant};
use crate::set_partition::{gather_sets, scatter_sets, ScenePartition, SortStrategy};
use crate::tensor::FeatureTensor;
use crate::voxel::{dense_bev_scatter, voxelize, EmbedParams, GridSpec, PointCloud, SparseVoxelGrid};
use crate::window::{assign_windows, make_schedule, WindowAssignment};

/// Backbone flavor: pillars keep a single Z layer; voxels pool Z down across
/// stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "P")]
    Pillar,
    #[serde(rename = "V")]
    Voxel,
}

/// How the two layers of each block order voxels before set slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionStrategy {
    /// X-major in the first layer, Y-major in the second.
    Rotate,
    /// Seeded shuffle in both layers.
    Random { seed: u64 },
    /// Round-robin spread in both layers.
    Sparse,
    /// X-major in both layers (non-rotating).
    Regional,
}

/// Which axis a layer sorts by under the rotating strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerAxis {
    X,
    Y,
}

/// Resolve the sort strategy of layer `layer` (0 or 1) in block `block`.
pub fn layer_strategy(strategy: PartitionStrategy, block: usize, layer: usize) -> SortStrategy {
    match strategy {
        PartitionStrategy::Rotate => {
            if layer == 0 {
                SortStrategy::XMajor
            } else {
                SortStrategy::YMajor
            }
        }
        PartitionStrategy::Regional => SortStrategy::XMajor,
        PartitionStrategy::Sparse => SortStrategy::Sparse,
        PartitionStrategy::Random { seed } => SortStrategy::Random {
            seed: derive_seed(seed, &format!("block{block}.layer{layer}")),
        },
    }
}

/// Full hyperparameter record of a backbone; serializes field-for-field as
/// the JSON config consumed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid: GridSpec,
    pub variant: Variant,
    pub blocks_per_stage: Vec<usize>,
    /// XY extent of even-indexed blocks' windows.
    pub window_a: [usize; 2],
    /// XY extent of odd-indexed (shifted) blocks' windows.
    pub window_b: [usize; 2],
    pub tau: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Z pooling strides between stages (voxel variant; one fewer than stages).
    #[serde(default)]
    pub pool_z_strides: Vec<usize>,
    /// Per-stage Z window sizes (voxel variant).
    #[serde(default)]
    pub z_windows: Vec<usize>,
    pub partition: PartitionStrategy,
    pub pool_variant: PoolVariant,
}

impl BackboneConfig {
    /// Pillar backbone: 0.32 m pillars over a 150 m scene, four blocks of
    /// hybrid (12,12,1)/(24,24,1) windows, 36-voxel sets, 192 channels.
    pub fn dsvt_p() -> Self {
        Self {
            grid: GridSpec {
                range_min: [0.0, 0.0, 0.0],
                range_max: [150.0, 150.0, 6.0],
                voxel_size: [0.32, 0.32, 6.0],
            },
            variant: Variant::Pillar,
            blocks_per_stage: vec![4],
            window_a: [12, 12],
            window_b: [24, 24],
            tau: 36,
            channels: 192,
            heads: 8,
            ffn: 384,
            pool_z_strides: vec![],
            z_windows: vec![],
            partition: PartitionStrategy::Rotate,
            pool_variant: PoolVariant::AttnPool,
        }
    }

    /// Voxel backbone: 0.1875 m Z voxels pooled 32 -> 8 -> 2 -> 1 across four
    /// stages, 48-voxel sets.
    pub fn dsvt_v() -> Self {
        Self {
            grid: GridSpec {
                range_min: [0.0, 0.0, 0.0],
                range_max: [150.0, 150.0, 6.0],
                voxel_size: [0.32, 0.32, 0.1875],
            },
            variant: Variant::Voxel,
            blocks_per_stage: vec![1, 1, 1, 1],
            window_a: [12, 12],
            window_b: [24, 24],
            tau: 48,
            channels: 192,
            heads: 8,
            ffn: 384,
            pool_z_strides: vec![4, 4, 2],
            z_windows: vec![32, 8, 2, 1],
            partition: PartitionStrategy::Rotate,
            pool_variant: PoolVariant::AttnPool,
        }
    }

    /// Pillar backbone sized for the smaller-range benchmark: (30,30,1)
    /// windows, 90-voxel sets, 128 channels.
    pub fn dsvt_nus() -> Self {
        Self {
            grid: GridSpec {
                range_min: [0.0, 0.0, 0.0],
                range_max: [108.0, 108.0, 8.0],
                voxel_size: [0.3, 0.3, 8.0],
            },
            variant: Variant::Pillar,
            blocks_per_stage: vec![4],
            window_a: [30, 30],
            window_b: [30, 30],
            tau: 90,
            channels: 128,
            heads: 8,
            ffn: 256,
            pool_z_strides: vec![],
            z_windows: vec![],
            partition: PartitionStrategy::Rotate,
            pool_variant: PoolVariant::AttnPool,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "dsvt-p" => Some(Self::dsvt_p()),
            "dsvt-v" => Some(Self::dsvt_v()),
            "dsvt-nus" => Some(Self::dsvt_nus()),
            _ => None,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.blocks_per_stage.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn num_pools(&self) -> usize {
        match self.variant {
            Variant::Pillar => 0,
            Variant::Voxel => self.num_stages() - 1,
        }
    }

    /// Z window size of the given stage's blocks.
    pub fn stage_z_window(&self, stage: usize) -> usize {
        match self.variant {
            Variant::Pillar => 1,
            Variant::Voxel => self.z_windows[stage],
        }
    }

    /// Grid Z extent while the given stage runs.
    pub fn stage_z_extent(&self, stage: usize) -> usize {
        let mut z = self.grid.dims()[2];
        for s in 0..stage.min(self.pool_z_strides.len()) {
            z /= self.pool_z_strides[s];
        }
        z
    }

    pub fn stage_z_extents(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.stage_z_extent(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(
                "blocks_per_stage must be non-empty with every entry >= 1".into(),
            ));
        }
        if self.window_a.contains(&0) || self.window_b.contains(&0) {
            return Err(Error::Config("window sizes must be >= 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.channels < 6 {
            return Err(Error::Config(
                "channels must be >= 6 for positional encoding".into(),
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.ffn == 0 {
            return Err(Error::Config("ffn width must be >= 1".into()));
        }
        let dims = self.grid.dims();
        match self.variant {
            Variant::Pillar => {
                if self.num_stages() != 1 {
                    return Err(Error::Config(
                        "pillar variant uses a single stage".into(),
                    ));
                }
                if dims[2] != 1 {
                    return Err(Error::Config(format!(
                        "pillar variant needs Gz = 1, grid has Gz = {}",
                        dims[2]
                    )));
                }
            }
            Variant::Voxel => {
                if self.z_windows.len() != self.num_stages() {
                    return Err(Error::Config(format!(
                        "z_windows has {} entries for {} stages",
                        self.z_windows.len(),
                        self.num_stages()
                    )));
                }
                if self.pool_z_strides.len() != self.num_stages() - 1 {
                    return Err(Error::Config(format!(
                        "pool_z_strides has {} entries, expected {} (stages - 1)",
                        self.pool_z_strides.len(),
                        self.num_stages() - 1
                    )));
                }
                let mut z = dims[2];
                for (s, stride) in self.pool_z_strides.iter().enumerate() {
                    if *stride == 0 || z % stride != 0 {
                        return Err(Error::Config(format!(
                            "pool stride {stride} after stage {s} does not divide z extent {z}"
                        )));
                    }
                    z /= stride;
                }
                if z != 1 {
                    return Err(Error::Config(format!(
                        "voxel variant must pool Z down to 1, ends at {z}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(s);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("config field `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Weights of one block: one attention layer per partition axis.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub first: AttentionParams,
    pub second: AttentionParams,
}

/// All learnable state of a backbone.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub embed: EmbedParams,
    pub blocks: Vec<BlockWeights>,
    pub pools: Vec<PoolParams>,
}

impl BackboneWeights {
    /// Deterministic pseudo-random weights for forward-only runs.
    /// `extra_dim` is the per-point attribute width of the scenes this
    /// backbone will consume.
    pub fn seeded(cfg: &BackboneConfig, extra_dim: usize, seed: u64) -> Self {
        let embed = EmbedParams::seeded(3 + extra_dim, cfg.channels, derive_seed(seed, "embed"));
        let blocks = (0..cfg.total_blocks())
            .map(|b| BlockWeights {
                first: AttentionParams::seeded(
                    cfg.channels,
                    cfg.heads,
                    cfg.ffn,
                    derive_seed(seed, &format!("block{b}.first")),
                ),
                second: AttentionParams::seeded(
                    cfg.channels,
                    cfg.heads,
                    cfg.ffn,
                    derive_seed(seed, &format!("block{b}.second")),
                ),
            })
            .collect();
        let pools = (0..cfg.num_pools())
            .map(|p| {
                PoolParams::seeded(
                    cfg.channels,
                    cfg.heads,
                    [1, 1, cfg.pool_z_strides[p]],
                    derive_seed(seed, &format!("pool{p}")),
                )
            })
            .collect();
        Self {
            embed,
            blocks,
            pools,
        }
    }

    /// Check this weight set against a config, nominating the first mismatch.
    pub fn validate_for(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.embed.channels() != cfg.channels {
            return Err(Error::Contract(format!(
                "embed produces {} channels, config expects {}",
                self.embed.channels(),
                cfg.channels
            )));
        }
        if self.blocks.len() != cfg.total_blocks() {
            return Err(Error::Contract(format!(
                "weights hold {} blocks, config expects {}",
                self.blocks.len(),
                cfg.total_blocks()
            )));
        }
        for (b, bw) in self.blocks.iter().enumerate() {
            for (tag, layer) in [("first", &bw.first), ("second", &bw.second)] {
                if layer.channels != cfg.channels
                    || layer.heads != cfg.heads
                    || layer.ffn1.out_dim() != cfg.ffn
                {
                    return Err(Error::Contract(format!(
                        "block{b}.{tag}: expected C={} heads={} ffn={}, found C={} heads={} ffn={}",
                        cfg.channels,
                        cfg.heads,
                        cfg.ffn,
                        layer.channels,
                        layer.heads,
                        layer.ffn1.out_dim()
                    )));
                }
                layer.validate()?;
            }
        }
        if self.pools.len() != cfg.num_pools() {
            return Err(Error::Contract(format!(
                "weights hold {} pool stages, config expects {}",
                self.pools.len(),
                cfg.num_pools()
            )));
        }
        for (p, pw) in self.pools.iter().enumerate() {
            pw.validate([1, 1, cfg.pool_z_strides[p]])?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fn push_linear<'a>(out: &mut Vec<NamedTensor<'a>>, name: String, lin: &'a Linear) {
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: lin.weight.shape().to_vec(),
                data: lin.weight.data(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: vec![lin.bias.len()],
                data: &lin.bias,
            });
        }
        fn push_ln<'a>(out: &mut Vec<NamedTensor<'a>>, name: String, ln: &'a LayerNormParams) {
            out.push(NamedTensor {
                name: format!("{name}.gamma"),
                shape: vec![ln.gamma.len()],
                data: &ln.gamma,
            });
            out.push(NamedTensor {
                name: format!("{name}.beta"),
                shape: vec![ln.beta.len()],
                data: &ln.beta,
            });
        }
        let mut tensors: Vec<NamedTensor<'_>> = Vec::new();
        push_linear(&mut tensors, "embed".into(), &self.embed.linear);
        for (b, bw) in self.blocks.iter().enumerate() {
            for (tag, layer) in [("first", &bw.first), ("second", &bw.second)] {
                let base = format!("block{b}.{tag}");
                push_linear(&mut tensors, format!("{base}.wq"), &layer.wq);
                push_linear(&mut tensors, format!("{base}.wk"), &layer.wk);
                push_linear(&mut tensors, format!("{base}.wv"), &layer.wv);
                push_linear(&mut tensors, format!("{base}.wo"), &layer.wo);
                push_linear(&mut tensors, format!("{base}.ffn1"), &layer.ffn1);
                push_linear(&mut tensors, format!("{base}.ffn2"), &layer.ffn2);
                push_ln(&mut tensors, format!("{base}.ln1"), &layer.ln1);
                push_ln(&mut tensors, format!("{base}.ln2"), &layer.ln2);
            }
        }
        for (p, pw) in self.pools.iter().enumerate() {
            let base = format!("pool{p}");
            push_linear(&mut tensors, format!("{base}.wq"), &pw.wq);
            push_linear(&mut tensors, format!("{base}.wk"), &pw.wk);
            push_linear(&mut tensors, format!("{base}.wv"), &pw.wv);
            push_linear(&mut tensors, format!("{base}.wo"), &pw.wo);
            push_linear(&mut tensors, format!("{base}.flatten"), &pw.flatten);
            push_ln(&mut tensors, format!("{base}.ln"), &pw.ln);
        }
        save_tensors(path, &tensors)
    }

    /// Load a blob saved by [`BackboneWeights::save`], validating every shape
    /// against `cfg`.
    pub fn load(path: &Path, cfg: &BackboneConfig) -> Result<Self> {
        fn take(
            by_name: &mut HashMap<String, FeatureTensor>,
            name: String,
            shape: &[usize],
        ) -> Result<FeatureTensor> {
            let t = by_name.remove(&name).ok_or_else(|| {
                Error::Contract(format!("weights file is missing tensor `{name}`"))
            })?;
            if t.shape() != shape {
                return Err(Error::Contract(format!(
                    "tensor `{name}`: expected shape {:?}, found {:?}",
                    shape,
                    t.shape()
                )));
            }
            Ok(t)
        }
        fn take_linear(
            by_name: &mut HashMap<String, FeatureTensor>,
            name: &str,
            out: usize,
            inp: usize,
        ) -> Result<Linear> {
            Ok(Linear {
                weight: take(by_name, format!("{name}.weight"), &[out, inp])?,
                bias: take(by_name, format!("{name}.bias"), &[out])?.into_data(),
            })
        }
        fn take_ln(
            by_name: &mut HashMap<String, FeatureTensor>,
            name: &str,
            dim: usize,
        ) -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: take(by_name, format!("{name}.gamma"), &[dim])?.into_data(),
                beta: take(by_name, format!("{name}.beta"), &[dim])?.into_data(),
            })
        }

        let mut by_name: HashMap<String, FeatureTensor> =
            load_tensors(path)?.into_iter().collect();
        let c = cfg.channels;

        // Embed input width comes from the file itself (it depends on the
        // scene's attribute count, not the config).
        let embed_w = by_name
            .get("embed.weight")
            .ok_or_else(|| Error::Contract("weights file is missing tensor `embed.weight`".into()))?;
        if embed_w.shape().len() != 2 || embed_w.shape()[0] != c {
            return Err(Error::Contract(format!(
                "tensor `embed.weight`: expected shape [{c}, 3 + extra_dim], found {:?}",
                embed_w.shape()
            )));
        }
        let in_dim = embed_w.shape()[1];
        let embed = EmbedParams {
            linear: take_linear(&mut by_name, "embed", c, in_dim)?,
        };

        let mut blocks = Vec::with_capacity(cfg.total_blocks());
        for b in 0..cfg.total_blocks() {
            let mut layer = |tag: &str| -> Result<AttentionParams> {
                let base = format!("block{b}.{tag}");
                Ok(AttentionParams {
                    channels: c,
                    heads: cfg.heads,
                    wq: take_linear(&mut by_name, &format!("{base}.wq"), c, c)?,
                    wk: take_linear(&mut by_name, &format!("{base}.wk"), c, c)?,
                    wv: take_linear(&mut by_name, &format!("{base}.wv"), c, c)?,
                    wo: take_linear(&mut by_name, &format!("{base}.wo"), c, c)?,
                    ffn1: take_linear(&mut by_name, &format!("{base}.ffn1"), cfg.ffn, c)?,
                    ffn2: take_linear(&mut by_name, &format!("{base}.ffn2"), c, cfg.ffn)?,
                    ln1: take_ln(&mut by_name, &format!("{base}.ln1"), c)?,
                    ln2: take_ln(&mut by_name, &format!("{base}.ln2"), c)?,
                })
            };
            blocks.push(BlockWeights {
                first: layer("first")?,
                second: layer("second")?,
            });
        }

        let mut pools = Vec::with_capacity(cfg.num_pools());
        for p in 0..cfg.num_pools() {
            let base = format!("pool{p}");
            let slots = cfg.pool_z_strides[p];
            pools.push(PoolParams {
                channels: c,
                heads: cfg.heads,
                wq: take_linear(&mut by_name, &format!("{base}.wq"), c, c)?,
                wk: take_linear(&mut by_name, &format!("{base}.wk"), c, c)?,
                wv: take_linear(&mut by_name, &format!("{base}.wv"), c, c)?,
                wo: take_linear(&mut by_name, &format!("{base}.wo"), c, c)?,
                flatten: take_linear(&mut by_name, &format!("{base}.flatten"), c, slots * c)?,
                ln: take_ln(&mut by_name, &format!("{base}.ln"), c)?,
            });
        }

        let w = Self {
            embed,
            blocks,
            pools,
        };
        w.validate_for(cfg)?;
        Ok(w)
    }
}

/// Counters reported by layers and the full forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LayerStats {
    pub windows: usize,
    pub sets: usize,
    /// Batched attention calls made for this layer (1, or 0 on an empty grid).
    pub attention_invocations: u64,
}

/// One set-attention layer over an existing window assignment: sort,
/// partition, gather, one batched transformer layer over all sets of all
/// windows, scatter back. Voxel coordinates are untouched.
pub fn dsvt_layer(
    grid: &mut SparseVoxelGrid,
    assignment: &WindowAssignment,
    tau: usize,
    strategy: SortStrategy,
    params: &AttentionParams,
) -> Result<LayerStats> {
    if assignment.num_voxels() != grid.len() {
        return Err(Error::Contract(format!(
            "assignment covers {} voxels, grid has {}",
            assignment.num_voxels(),
            grid.len()
        )));
    }
    if assignment.num_windows() == 0 {
        return Ok(LayerStats::default());
    }
    let partition = ScenePartition::build(assignment, tau, strategy);
    let batch = gather_sets(grid.features(), assignment, &partition)?;
    let pe = positional_encoding(&batch.coords, assignment.spec().size, params.channels)?;
    let out = transformer_layer(&batch.features, &batch.key_mask, Some(&pe), params)?;
    scatter_sets(&out, assignment, &partition, grid.features_mut())?;
    Ok(LayerStats {
        windows: assignment.num_windows(),
        sets: partition.total_sets(),
        attention_invocations: 1,
    })
}

/// One block: a single window assignment feeding two layers whose sort
/// strategies come from the configured partition scheme.
pub fn dsvt_block(
    grid: &mut SparseVoxelGrid,
    window: &crate::window::WindowSpec,
    weights: &BlockWeights,
    strategy: PartitionStrategy,
    tau: usize,
    block_index: usize,
) -> Result<LayerStats> {
    let assignment = assign_windows(grid, window)?;
    let a = dsvt_layer(
        grid,
        &assignment,
        tau,
        layer_strategy(strategy, block_index, 0),
        &weights.first,
    )?;
    let b = dsvt_layer(
        grid,
        &assignment,
        tau,
        layer_strategy(strategy, block_index, 1),
        &weights.second,
    )?;
    Ok(LayerStats {
        windows: a.windows,
        sets: a.sets + b.sets,
        attention_invocations: a.attention_invocations + b.attention_invocations,
    })
}

/// Everything the forward pass learned about its own run; also the content
/// of the BEV sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub bev_shape: [usize; 3],
    pub stage_z_extents: Vec<usize>,
    pub stage_voxel_counts: Vec<usize>,
    pub final_voxels: usize,
    pub attention_invocations: u64,
    #[serde(skip)]
    pub final_coords: Vec<[u32; 3]>,
}

/// Run the whole data path: voxelize, blocks per stage, inter-stage pooling
/// for the voxel variant, then the dense BEV scatter.
pub fn forward(
    pc: &PointCloud,
    cfg: &BackboneConfig,
    weights: &BackboneWeights,
) -> Result<(FeatureTensor, ForwardReport)> {
    cfg.validate()?;
    weights.validate_for(cfg)?;
    if weights.embed.in_dim() != 3 + pc.extra_dim() {
        return Err(Error::Contract(format!(
            "embed expects descriptors of width {}, scene provides {}",
            weights.embed.in_dim(),
            3 + pc.extra_dim()
        )));
    }
    let mut grid = voxelize(pc, &cfg.grid, &weights.embed)?;
    let schedule = make_schedule(cfg)?;

    let mut stage_voxel_counts = Vec::with_capacity(cfg.num_stages());
    let mut invocations = 0u64;
    let mut block_index = 0usize;
    for stage in 0..cfg.num_stages() {
        stage_voxel_counts.push(grid.len());
        for _ in 0..cfg.blocks_per_stage[stage] {
            let stats = dsvt_block(
                &mut grid,
                schedule.block(block_index),
                &weights.blocks[block_index],
                cfg.partition,
                cfg.tau,
                block_index,
            )?;
            invocations += stats.attention_invocations;
            block_index += 1;
        }
        if matches!(cfg.variant, Variant::Voxel) && stage + 1 < cfg.num_stages() {
            grid = pool_grid(
                &grid,
                &PoolRegionSpec::z_stride(cfg.pool_z_strides[stage]),
                cfg.pool_variant,
                &weights.pools[stage],
            )?;
        }
    }

    let bev = dense_bev_scatter(&grid)?;
    let report = ForwardReport {
        bev_shape: [bev.shape()[0], bev.shape()[1], bev.shape()[2]],
        stage_z_extents: cfg.stage_z_extents(),
        stage_voxel_counts,
        final_voxels: grid.len(),
        attention_invocations: invocations,
        final_coords: grid.coords().to_vec(),
    };
    Ok((bev, report))
}

/// Build the per-block partition dump of a voxelized scene: window rosters
/// partitioned at the config's tau for every block of the schedule. Rank
/// tables depend only on window occupancy, never on the sort strategy.
pub fn partition_dump(
    grid: &SparseVoxelGrid,
    cfg: &BackboneConfig,
) -> Result<crate::set_partition::ScheduleDump> {
    use crate::set_partition::{BlockDump, PartitionDump, ScheduleDump};
    let schedule = make_schedule(cfg)?;
    let mut blocks = Vec::with_capacity(schedule.len());
    for (b, spec) in schedule.specs().iter().enumerate() {
        let assignment = assign_windows(grid, spec)?;
        let partition = ScenePartition::build(&assignment, cfg.tau, SortStrategy::XMajor);
        let windows = (0..assignment.num_windows())
            .map(|w| PartitionDump::from_partition(assignment.window_key(w), partition.window(w)))
            .collect();
        blocks.push(BlockDump {
            block: b,
            window_size: spec.size,
            shift: spec.shift,
            windows,
        });
    }
    Ok(ScheduleDump {
        tau: cfg.tau,
        voxels: grid.len(),
        blocks,
    })
}

/// JSON sidecar written next to a BEV blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BevSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub stage_z_extents: Vec<usize>,
    pub final_voxels: usize,
}

/// Write the BEV map as a raw little-endian f32 blob plus its JSON sidecar.
pub fn save_bev(path: &Path, bev: &FeatureTensor, report: &ForwardReport) -> Result<()> {
    use byteorder::{ByteOrder, LittleEndian};
    let mut bytes = vec![0u8; 4 * bev.len()];
    LittleEndian::write_f32_into(bev.data(), &mut bytes);
    std::fs::write(path, bytes)?;
    let sidecar = BevSidecar {
        shape: report.bev_shape,
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: "row-major (C, Gy, Gx)".into(),
        stage_z_extents: report.stage_z_extents.clone(),
        final_voxels: report.final_voxels,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Parse(format!("sidecar encode: {e}")))?;
    std::fs::write(crate::params::sidecar_path(path), json)?;
    Ok(())
}
