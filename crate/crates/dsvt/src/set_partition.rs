//! Size-equalized set partitioning of window voxels.
//!
//! Each window's `N` voxels are split into `S = ceil(N / tau)` sets of
//! exactly `tau` slots. Slot `k` of set `j` holds sorted rank
//! `floor((j*tau + k) * N / (S*tau))`, computed in exact integer arithmetic.
//! Ranks duplicated to fill a set are masked; the first occurrence is the
//! valid slot. Distinct sets never share a rank, every rank is covered, and
//! per-set unique counts differ by at most one — these guarantees are
//! enforced by property tests and the `check` command.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;
use crate::window::WindowAssignment;

/// Voxel-ordering strategy used to assign inner-window IDs before slicing
/// into sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SortStrategy {
    /// Lexicographic by (x, y, z) inner coordinates.
    XMajor,
    /// Lexicographic by (y, x, z) inner coordinates.
    YMajor,
    /// Seeded uniform shuffle; the window key is mixed into the seed.
    Random { seed: u64 },
    /// Round-robin deal of the X-major order so each set's members spread
    /// across the window region.
    Sparse,
    /// X-major in every layer (the non-rotating baseline).
    Regional,
}

/// Number of sets needed to cover `n` voxels at `tau` slots each:
/// the minimal `s` with `s * tau >= n`.
pub fn count_sets(n: usize, tau: usize) -> usize {
    assert!(n >= 1, "count_sets: empty windows are never materialized");
    assert!(tau >= 1, "count_sets: tau must be positive");
    n / tau + usize::from(n % tau > 0)
}

/// The `s x tau` rank table plus its first-occurrence mask.
///
/// `q[j*tau + k] = floor((j*tau + k) * n / (s*tau))`, exact in integers.
pub fn set_indices(n: usize, tau: usize, s: usize) -> (Vec<u32>, Vec<bool>) {
    debug_assert_eq!(s, count_sets(n, tau));
    let denom = (s as u128) * (tau as u128);
    let mut q = Vec::with_capacity(s * tau);
    let mut mask = Vec::with_capacity(s * tau);
    for j in 0..s {
        for k in 0..tau {
            let slot = (j as u128) * (tau as u128) + (k as u128);
            let rank = (slot * n as u128 / denom) as u32;
            mask.push(k == 0 || q.last() != Some(&rank));
            q.push(rank);
        }
    }
    (q, mask)
}

/// Inner-window voxel IDs: a permutation of roster positions in the order
/// chosen by `strategy`. `d[rank]` is the roster position of the voxel with
/// sorted rank `rank`.
///
/// `set_count` drives the round-robin stride of the `Sparse` strategy and is
/// ignored by the others. Ties cannot arise between distinct voxels (inner
/// coordinates are unique within a window); the roster position is still the
/// final sort key so the order is total.
pub fn sort_voxels(
    inner: &[[u32; 3]],
    strategy: SortStrategy,
    window_key: u64,
    set_count: usize,
) -> Vec<u32> {
    let n = inner.len();
    let mut d: Vec<u32> = (0..n as u32).collect();
    match strategy {
        SortStrategy::XMajor | SortStrategy::Regional => {
            d.sort_unstable_by_key(|&p| {
                let c = inner[p as usize];
                (c[0], c[1], c[2], p)
            });
        }
        SortStrategy::YMajor => {
            d.sort_unstable_by_key(|&p| {
                let c = inner[p as usize];
                (c[1], c[0], c[2], p)
            });
        }
        SortStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, window_key));
            d.shuffle(&mut rng);
        }
        SortStrategy::Sparse => {
            d.sort_unstable_by_key(|&p| {
                let c = inner[p as usize];
                (c[0], c[1], c[2], p)
            });
            let stride = set_count.max(1);
            let mut dealt = Vec::with_capacity(n);
            for pile in 0..stride {
                let mut i = pile;
                while i < n {
                    dealt.push(d[i]);
                    i += stride;
                }
            }
            d = dealt;
        }
    }
    d
}

fn mix_seed(seed: u64, window_key: u64) -> u64 {
    // splitmix64 finalizer over the window key, xor'd into the seed.
    let mut z = window_key.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    seed ^ (z ^ (z >> 31))
}

/// One window's dynamic set partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    n: usize,
    s: usize,
    tau: usize,
    /// `s * tau` sorted ranks, row-major by set.
    q: Vec<u32>,
    /// First-occurrence mask aligned with `q`.
    mask: Vec<bool>,
    /// `d[rank]` = roster position of the voxel at that rank.
    inner_ids: Vec<u32>,
}

impl SetPartition {
    /// Partition one window roster given its inner coordinates.
    pub fn build(
        inner: &[[u32; 3]],
        tau: usize,
        strategy: SortStrategy,
        window_key: u64,
    ) -> Self {
        let n = inner.len();
        let s = count_sets(n, tau);
        let (q, mask) = set_indices(n, tau, s);
        let inner_ids = sort_voxels(inner, strategy, window_key, s);
        Self {
            n,
            s,
            tau,
            q,
            mask,
            inner_ids,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.n
    }

    pub fn num_sets(&self) -> usize {
        self.s
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Rank table row of set `j`.
    pub fn set_ranks(&self, j: usize) -> &[u32] {
        &self.q[j * self.tau..(j + 1) * self.tau]
    }

    pub fn set_mask(&self, j: usize) -> &[bool] {
        &self.mask[j * self.tau..(j + 1) * self.tau]
    }

    pub fn inner_ids(&self) -> &[u32] {
        &self.inner_ids
    }

    /// Roster position feeding slot `(j, k)`.
    pub fn roster_position(&self, j: usize, k: usize) -> usize {
        self.inner_ids[self.q[j * self.tau + k] as usize] as usize
    }

    /// Padded slots beyond the window's voxel count; always `< tau`.
    pub fn padding(&self) -> usize {
        self.s * self.tau - self.n
    }
}

/// All window partitions of one scene layer, in window order.
#[derive(Debug, Clone)]
pub struct ScenePartition {
    per_window: Vec<SetPartition>,
    /// Cumulative set counts; `set_offsets[w]..set_offsets[w+1]` are the
    /// batch rows owned by window `w`.
    set_offsets: Vec<usize>,
    tau: usize,
}

impl ScenePartition {
    pub fn build(assignment: &WindowAssignment, tau: usize, strategy: SortStrategy) -> Self {
        use rayon::prelude::*;
        let per_window: Vec<SetPartition> = (0..assignment.num_windows())
            .into_par_iter()
            .map(|w| {
                let roster = assignment.roster(w);
                let inner: Vec<[u32; 3]> = roster
                    .iter()
                    .map(|&v| assignment.inner_coords(v as usize))
                    .collect();
                SetPartition::build(&inner, tau, strategy, assignment.window_key(w))
            })
            .collect();
        let mut set_offsets = Vec::with_capacity(per_window.len() + 1);
        set_offsets.push(0);
        for p in &per_window {
            set_offsets.push(set_offsets.last().unwrap() + p.num_sets());
        }
        Self {
            per_window,
            set_offsets,
            tau,
        }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn num_windows(&self) -> usize {
        self.per_window.len()
    }

    pub fn window(&self, w: usize) -> &SetPartition {
        &self.per_window[w]
    }

    pub fn total_sets(&self) -> usize {
        *self.set_offsets.last().unwrap()
    }

    pub fn set_offset(&self, w: usize) -> usize {
        self.set_offsets[w]
    }

    pub fn total_slots(&self) -> u64 {
        self.total_sets() as u64 * self.tau as u64
    }

    pub fn total_voxels(&self) -> u64 {
        self.per_window.iter().map(|p| p.num_voxels() as u64).sum()
    }
}

/// Set-batched tensors for one attention invocation: features, inner-window
/// coordinates, and the key mask of every set of every window.
#[derive(Debug, Clone)]
pub struct SetBatch {
    /// `(total_sets, tau, C)`
    pub features: FeatureTensor,
    /// `(total_sets, tau, 3)` inner-window coordinates as floats.
    pub coords: FeatureTensor,
    /// `(total_sets, tau)` flattened; `true` marks the valid (first) slot.
    pub key_mask: Vec<bool>,
    /// Window index owning each set row.
    pub window_of_set: Vec<usize>,
}

impl SetBatch {
    pub fn num_sets(&self) -> usize {
        self.window_of_set.len()
    }

    pub fn tau(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn mask_row(&self, set: usize) -> &[bool] {
        let tau = self.tau();
        &self.key_mask[set * tau..(set + 1) * tau]
    }
}

/// Gather voxel features and coordinates into the set-batched layout.
/// Duplicated (masked) slots carry a copy of their rank's feature row.
pub fn gather_sets(
    features: &FeatureTensor,
    assignment: &WindowAssignment,
    partition: &ScenePartition,
) -> Result<SetBatch> {
    use rayon::prelude::*;
    if features.shape().len() != 2 || features.shape()[0] != assignment.num_voxels() {
        return Err(Error::Contract(format!(
            "gather_sets: features shape {:?} does not cover {} voxels",
            features.shape(),
            assignment.num_voxels()
        )));
    }
    let channels = features.shape()[1];
    let tau = partition.tau();
    let total_sets = partition.total_sets();

    let mut batch = FeatureTensor::zeros(&[total_sets, tau, channels]);
    let mut coords = FeatureTensor::zeros(&[total_sets, tau, 3]);
    let mut key_mask = vec![false; total_sets * tau];
    let mut window_of_set = vec![0usize; total_sets];

    // Resolve each batch row's window up front so rows parallelize cleanly.
    for w in 0..partition.num_windows() {
        for s in partition.set_offset(w)..partition.set_offset(w + 1) {
            window_of_set[s] = w;
        }
    }

    batch
        .data_mut()
        .par_chunks_mut(tau * channels)
        .zip(coords.data_mut().par_chunks_mut(tau * 3))
        .zip(key_mask.par_chunks_mut(tau))
        .enumerate()
        .for_each(|(set_row, ((frow, crow), mrow))| {
            let w = window_of_set[set_row];
            let part = partition.window(w);
            let j = set_row - partition.set_offset(w);
            let roster = assignment.roster(w);
            let ranks = part.set_ranks(j);
            let mask = part.set_mask(j);
            for k in 0..tau {
                let roster_pos = part.inner_ids()[ranks[k] as usize] as usize;
                let voxel = roster[roster_pos] as usize;
                frow[k * channels..(k + 1) * channels].copy_from_slice(features.row(voxel));
                let ic = assignment.inner_coords(voxel);
                crow[k * 3] = ic[0] as f32;
                crow[k * 3 + 1] = ic[1] as f32;
                crow[k * 3 + 2] = ic[2] as f32;
                mrow[k] = mask[k];
            }
        });

    Ok(SetBatch {
        features: batch,
        coords,
        key_mask,
        window_of_set,
    })
}

/// Write mask-true batch rows back to voxel storage. Masked slots are
/// discarded; by the partition guarantees every voxel is written exactly once.
pub fn scatter_sets(
    batch_features: &FeatureTensor,
    assignment: &WindowAssignment,
    partition: &ScenePartition,
    features: &mut FeatureTensor,
) -> Result<()> {
    use rayon::prelude::*;
    let tau = partition.tau();
    let expected = [partition.total_sets(), tau, features.shape()[1]];
    if batch_features.shape() != expected {
        return Err(Error::Contract(format!(
            "scatter_sets: batch shape {:?}, expected {:?}",
            batch_features.shape(),
            expected
        )));
    }
    if features.shape()[0] != assignment.num_voxels() {
        return Err(Error::Contract(format!(
            "scatter_sets: features cover {} voxels, assignment has {}",
            features.shape()[0],
            assignment.num_voxels()
        )));
    }

    // Invert the partition: source (set row, slot) per voxel.
    const UNSET: u32 = u32::MAX;
    let n = assignment.num_voxels();
    let mut src_set = vec![UNSET; n];
    let mut src_slot = vec![0u32; n];
    for w in 0..partition.num_windows() {
        let part = partition.window(w);
        let roster = assignment.roster(w);
        let base = partition.set_offset(w);
        for j in 0..part.num_sets() {
            let ranks = part.set_ranks(j);
            let mask = part.set_mask(j);
            for k in 0..tau {
                if mask[k] {
                    let voxel = roster[part.inner_ids()[ranks[k] as usize] as usize] as usize;
                    debug_assert_eq!(src_set[voxel], UNSET, "voxel written twice");
                    src_set[voxel] = (base + j) as u32;
                    src_slot[voxel] = k as u32;
                }
            }
        }
    }
    if src_set.iter().any(|&s| s == UNSET) {
        return Err(Error::Invariant(
            "scatter_sets: a voxel was never written; partition incomplete".into(),
        ));
    }

    let channels = features.shape()[1];
    features
        .data_mut()
        .par_chunks_mut(channels)
        .enumerate()
        .for_each(|(v, row)| {
            row.copy_from_slice(
                batch_features.row3(src_set[v] as usize, src_slot[v] as usize),
            );
        });
    Ok(())
}

/// JSON shape of one window's partition in the dump emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionDump {
    pub window_id: u64,
    pub n: usize,
    pub s: usize,
    pub tau: usize,
    pub q: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl PartitionDump {
    pub fn from_partition(window_id: u64, p: &SetPartition) -> Self {
        Self {
            window_id,
            n: p.num_voxels(),
            s: p.num_sets(),
            tau: p.tau(),
            q: (0..p.num_sets()).map(|j| p.set_ranks(j).to_vec()).collect(),
            mask: (0..p.num_sets()).map(|j| p.set_mask(j).to_vec()).collect(),
        }
    }
}

/// All window partitions of one schedule block in the JSON dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDump {
    pub block: usize,
    pub window_size: [usize; 3],
    pub shift: [usize; 3],
    pub windows: Vec<PartitionDump>,
}

/// The full partition dump written by the CLI: one entry per schedule block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub tau: usize,
    pub voxels: usize,
    pub blocks: Vec<BlockDump>,
}
