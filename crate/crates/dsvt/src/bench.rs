//! Synthetic scene generation and head-to-head benchmarking of batching
//! strategies: dynamic size-equalized sets versus fully-padded windows versus
//! capacity bucketing.
//!
//! Every strategy pads and never drops, so valid slots always equal the
//! scene's voxel count; they differ in total slots (the padding ratio) and in
//! how many attention invocations cover the scene.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_layer, AttentionParams};
use crate::error::{Error, Result};
use crate::set_partition::{gather_sets, ScenePartition, SortStrategy};
use crate::tensor::FeatureTensor;
use crate::voxel::{voxelize, EmbedParams, GridSpec, PointCloud};
use crate::window::{assign_windows, WindowAssignment, WindowSpec};

/// Generator for clustered sparse scenes: Gaussian clusters flattened near
/// the ground plane plus a uniform background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub extent: [f32; 3],
    pub clusters: u32,
    pub points_per_cluster: u32,
    pub cluster_std_xy: f32,
    pub cluster_std_z: f32,
    pub background_points: u32,
    pub seed: u64,
}

impl Default for SceneModel {
    fn default() -> Self {
        Self {
            extent: [150.0, 150.0, 6.0],
            clusters: 10,
            points_per_cluster: 200,
            cluster_std_xy: 1.5,
            cluster_std_z: 0.4,
            background_points: 1000,
            seed: 0,
        }
    }
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config(format!(
                "scene extent must be positive, got {:?}",
                self.extent
            )));
        }
        if !(self.cluster_std_xy >= 0.0 && self.cluster_std_z >= 0.0) {
            return Err(Error::Config("cluster std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(s);
        let model: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            Error::Config(format!("scene model field `{}`: {}", e.path(), e.inner()))
        })?;
        model.validate()?;
        Ok(model)
    }
}

/// Deterministically sample a scene from its model.
pub fn synth_scene(model: &SceneModel) -> Result<PointCloud> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let total = model.clusters as usize * model.points_per_cluster as usize
        + model.background_points as usize;
    let mut pts = Vec::with_capacity(total);
    for _ in 0..model.clusters {
        let center = [
            rng.random_range(0.0..model.extent[0]),
            rng.random_range(0.0..model.extent[1]),
            rng.random_range(0.0..(0.25 * model.extent[2]).max(f32::MIN_POSITIVE)),
        ];
        let nxy = Normal::new(0.0f32, model.cluster_std_xy.max(f32::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("cluster std: {e}")))?;
        let nz = Normal::new(0.0f32, model.cluster_std_z.max(f32::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("cluster std: {e}")))?;
        for _ in 0..model.points_per_cluster {
            pts.push([
                center[0] + nxy.sample(&mut rng),
                center[1] + nxy.sample(&mut rng),
                (center[2] + nz.sample(&mut rng)).abs(),
            ]);
        }
    }
    for _ in 0..model.background_points {
        pts.push([
            rng.random_range(0.0..model.extent[0]),
            rng.random_range(0.0..model.extent[1]),
            rng.random_range(0.0..model.extent[2]),
        ]);
    }
    PointCloud::xyz_only(pts)
}

/// Batching strategy under benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    DynamicSet,
    FullyPadding,
    Bucketing,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::DynamicSet => "dynamic_set",
            Strategy::FullyPadding => "fully_padding",
            Strategy::Bucketing => "bucketing",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Strategy>> {
        s.split(',')
            .map(|tag| match tag.trim() {
                "dynamic_set" => Ok(Strategy::DynamicSet),
                "fully_padding" => Ok(Strategy::FullyPadding),
                "bucketing" => Ok(Strategy::Bucketing),
                other => Err(Error::Config(format!(
                    "unknown strategy `{other}` (expected dynamic_set, fully_padding, bucketing)"
                ))),
            })
            .collect()
    }
}

/// Slot bookkeeping common to all strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotCounts {
    pub windows: usize,
    pub total_slots: u64,
    pub valid_slots: u64,
    pub invocations: u64,
}

impl SlotCounts {
    pub fn pad_ratio(&self) -> f64 {
        if self.total_slots == 0 {
            0.0
        } else {
            1.0 - self.valid_slots as f64 / self.total_slots as f64
        }
    }
}

/// Every non-empty window contributes all `L*W*H` cells as slots; occupied
/// cells are the valid ones. One invocation covers the uniform batch.
pub fn full_padding_counts(assignment: &WindowAssignment) -> SlotCounts {
    let windows = assignment.num_windows();
    let slots = assignment.spec().slots() as u64;
    SlotCounts {
        windows,
        total_slots: windows as u64 * slots,
        valid_slots: assignment.num_voxels() as u64,
        invocations: u64::from(windows > 0),
    }
}

/// Pad each window to the smallest bucket bound covering its voxel count;
/// one invocation per non-empty bucket.
pub fn bucketing_counts(assignment: &WindowAssignment, bounds: &[usize]) -> Result<SlotCounts> {
    if bounds.is_empty() || bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket bounds must be strictly ascending, got {bounds:?}"
        )));
    }
    let mut total = 0u64;
    let mut used = vec![false; bounds.len()];
    for w in 0..assignment.num_windows() {
        let n = assignment.roster(w).len();
        let Some(b) = bounds.iter().position(|bound| *bound >= n) else {
            return Err(Error::Config(format!(
                "window with {n} voxels exceeds the last bucket bound {}",
                bounds.last().unwrap()
            )));
        };
        used[b] = true;
        total += bounds[b] as u64;
    }
    Ok(SlotCounts {
        windows: assignment.num_windows(),
        total_slots: total,
        valid_slots: assignment.num_voxels() as u64,
        invocations: used.iter().filter(|u| **u).count() as u64,
    })
}

/// Size-equalized sets: `S * tau` slots per window, one invocation for the
/// whole scene.
pub fn dynamic_set_counts(assignment: &WindowAssignment, tau: usize) -> SlotCounts {
    let partition = ScenePartition::build(assignment, tau, SortStrategy::XMajor);
    SlotCounts {
        windows: assignment.num_windows(),
        total_slots: partition.total_slots(),
        valid_slots: partition.total_voxels(),
        invocations: u64::from(assignment.num_windows() > 0),
    }
}

/// Default bucket ladder: roughly a ninth, a third, and all of the window.
pub fn default_bucket_bounds(window_slots: usize) -> Vec<usize> {
    let mut bounds = vec![
        window_slots.div_ceil(9),
        window_slots.div_ceil(3),
        window_slots,
    ];
    bounds.dedup();
    bounds
}

/// Everything a benchmark run needs besides the scene itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub grid: GridSpec,
    pub window: [usize; 3],
    pub tau: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn: usize,
    pub bucket_bounds: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// Pillar grid over the given extent with the paper-scale attention width.
    pub fn for_extent(extent: [f32; 3], window: [usize; 2], tau: usize) -> Self {
        let slots = window[0] * window[1];
        Self {
            grid: GridSpec {
                range_min: [0.0; 3],
                range_max: extent,
                voxel_size: [0.32, 0.32, extent[2]],
            },
            window: [window[0], window[1], 1],
            tau,
            channels: 192,
            heads: 8,
            ffn: 384,
            bucket_bounds: default_bucket_bounds(slots),
            repeats: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        WindowSpec::unshifted(self.window).validate()?;
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.channels < 6 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} / heads {} invalid",
                self.channels, self.heads
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        let slots = WindowSpec::unshifted(self.window).slots();
        if self.bucket_bounds.last().copied().unwrap_or(0) < slots {
            return Err(Error::Config(format!(
                "last bucket bound must cover the window's {slots} cells, got {:?}",
                self.bucket_bounds
            )));
        }
        Ok(())
    }
}

/// One row of the benchmark report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub windows: usize,
    pub total_slots: u64,
    pub valid_slots: u64,
    pub pad_ratio: f64,
    pub invocations: u64,
    pub median_ms: f64,
    pub p90_ms: f64,
}

fn timing_stats(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p90 = samples[((n as f64 * 0.9).ceil() as usize).clamp(1, n) - 1];
    (median, p90)
}

/// Run one strategy over an already-voxelized scene: window assignment,
/// strategy-specific padding/partitioning, and the batched attention forward.
/// Returns the slot counts and the number of attention invocations.
fn run_strategy(
    grid: &crate::voxel::SparseVoxelGrid,
    window: &WindowSpec,
    strategy: Strategy,
    tau: usize,
    bounds: &[usize],
    params: &AttentionParams,
) -> Result<SlotCounts> {
    let assignment = assign_windows(grid, window)?;
    if assignment.num_windows() == 0 {
        return Ok(SlotCounts {
            windows: 0,
            total_slots: 0,
            valid_slots: 0,
            invocations: 0,
        });
    }
    let channels = params.channels;
    match strategy {
        Strategy::DynamicSet => {
            let partition = ScenePartition::build(&assignment, tau, SortStrategy::XMajor);
            let batch = gather_sets(grid.features(), &assignment, &partition)?;
            let _ = transformer_layer(&batch.features, &batch.key_mask, None, params)?;
            Ok(SlotCounts {
                windows: assignment.num_windows(),
                total_slots: partition.total_slots(),
                valid_slots: partition.total_voxels(),
                invocations: 1,
            })
        }
        Strategy::FullyPadding => {
            // Dense windows: every cell is a token at its raster position.
            let slots = window.slots();
            let windows = assignment.num_windows();
            let mut x = FeatureTensor::zeros(&[windows, slots, channels]);
            let mut mask = vec![false; windows * slots];
            for w in 0..windows {
                for &v in assignment.roster(w) {
                    let ic = assignment.inner_coords(v as usize);
                    let cell = (ic[2] as usize * window.size[1] + ic[1] as usize)
                        * window.size[0]
                        + ic[0] as usize;
                    x.row3_mut(w, cell).copy_from_slice(grid.features().row(v as usize));
                    mask[w * slots + cell] = true;
                }
            }
            let _ = transformer_layer(&x, &mask, None, params)?;
            Ok(SlotCounts {
                windows,
                total_slots: (windows * slots) as u64,
                valid_slots: assignment.num_voxels() as u64,
                invocations: 1,
            })
        }
        Strategy::Bucketing => {
            let counts = bucketing_counts(&assignment, bounds)?;
            // Group windows per bucket and run one batched call per bucket.
            let mut invocations = 0u64;
            for &bound in bounds {
                let members: Vec<usize> = (0..assignment.num_windows())
                    .filter(|&w| {
                        let n = assignment.roster(w).len();
                        let b = bounds.iter().position(|x| *x >= n).unwrap();
                        bounds[b] == bound
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut x = FeatureTensor::zeros(&[members.len(), bound, channels]);
                let mut mask = vec![false; members.len() * bound];
                for (row, &w) in members.iter().enumerate() {
                    for (slot, &v) in assignment.roster(w).iter().enumerate() {
                        x.row3_mut(row, slot)
                            .copy_from_slice(grid.features().row(v as usize));
                        mask[row * bound + slot] = true;
                    }
                }
                let _ = transformer_layer(&x, &mask, None, params)?;
                invocations += 1;
            }
            debug_assert_eq!(invocations, counts.invocations);
            Ok(SlotCounts {
                invocations,
                ..counts
            })
        }
    }
}

/// Benchmark the requested strategies over one scene. The scene is voxelized
/// once outside the timers; each timed sample covers window assignment,
/// strategy partitioning/padding, and the batched attention forward.
pub fn run_bench(
    pc: &PointCloud,
    cfg: &BenchConfig,
    strategies: &[Strategy],
) -> Result<Vec<StrategyReport>> {
    cfg.validate()?;
    let embed = EmbedParams::seeded(3 + pc.extra_dim(), cfg.channels, cfg.seed);
    let grid = voxelize(pc, &cfg.grid, &embed)?;
    let params = AttentionParams::seeded(cfg.channels, cfg.heads, cfg.ffn, cfg.seed);
    let window = WindowSpec::unshifted(cfg.window);

    let mut reports = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        // Warm-up, discarded.
        let counts = run_strategy(&grid, &window, strategy, cfg.tau, &cfg.bucket_bounds, &params)?;
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            let again =
                run_strategy(&grid, &window, strategy, cfg.tau, &cfg.bucket_bounds, &params)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
            debug_assert_eq!(again, counts);
        }
        let (median_ms, p90_ms) = timing_stats(samples);
        reports.push(StrategyReport {
            strategy: strategy.name().to_string(),
            windows: counts.windows,
            total_slots: counts.total_slots,
            valid_slots: counts.valid_slots,
            pad_ratio: counts.pad_ratio(),
            invocations: counts.invocations,
            median_ms,
            p90_ms,
        });
    }
    Ok(reports)
}

/// Write reports with the fixed CSV schema.
pub fn write_reports_csv(path: &Path, reports: &[StrategyReport]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    wtr.write_record([
        "strategy",
        "windows",
        "total_slots",
        "valid_slots",
        "pad_ratio",
        "invocations",
        "median_ms",
        "p90_ms",
    ])
    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for r in reports {
        wtr.write_record([
            r.strategy.clone(),
            r.windows.to_string(),
            r.total_slots.to_string(),
            r.valid_slots.to_string(),
            format!("{:.6}", r.pad_ratio),
            r.invocations.to_string(),
            format!("{:.3}", r.median_ms),
            format!("{:.3}", r.p90_ms),
        ])
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    }
    wtr.flush()?;
    Ok(())
}

/// JSON mirror of the CSV report with the scene model embedded when the
/// scene was synthesized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchJson {
    pub scene_model: Option<SceneModel>,
    pub config: BenchConfig,
    pub reports: Vec<StrategyReport>,
}

pub fn write_reports_json(
    path: &Path,
    cfg: &BenchConfig,
    model: Option<&SceneModel>,
    reports: &[StrategyReport],
) -> Result<()> {
    let doc = BenchJson {
        scene_model: model.cloned(),
        config: cfg.clone(),
        reports: reports.to_vec(),
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Parse(format!("report encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}
