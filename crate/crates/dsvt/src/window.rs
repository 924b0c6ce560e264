//! Assignment of sparse voxels to non-overlapping 3D windows, and the
//! alternating window schedule across transformer blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::voxel::SparseVoxelGrid;

/// A fixed window shape plus the coordinate shift applied before binning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn unshifted(size: [usize; 3]) -> Self {
        Self {
            size,
            shift: [0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 {
                return Err(Error::Config(format!("window size axis {a} must be >= 1")));
            }
            if self.shift[a] >= self.size[a] {
                return Err(Error::Config(format!(
                    "window shift axis {a}: {} must be < size {}",
                    self.shift[a], self.size[a]
                )));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }
}

/// Per-voxel window membership plus per-window rosters.
///
/// Rosters are contiguous slices of voxel indices grouped by ascending window
/// key; together they partition `[0, N)`. Only non-empty windows are
/// materialized.
#[derive(Debug, Clone)]
pub struct WindowAssignment {
    spec: WindowSpec,
    /// Scalar window key per voxel (internal encoding, never serialized).
    voxel_window: Vec<u64>,
    /// Inner-window coordinates per voxel, each in `[0, window_size)`.
    inner_coords: Vec<[u32; 3]>,
    /// Ascending keys of the materialized windows.
    window_keys: Vec<u64>,
    /// CSR-style offsets into `roster`, length `windows + 1`.
    roster_offsets: Vec<usize>,
    /// Voxel indices grouped by window, ascending within each window.
    roster: Vec<u32>,
}

impl WindowAssignment {
    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn num_windows(&self) -> usize {
        self.window_keys.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_window.len()
    }

    pub fn window_key(&self, w: usize) -> u64 {
        self.window_keys[w]
    }

    pub fn roster(&self, w: usize) -> &[u32] {
        &self.roster[self.roster_offsets[w]..self.roster_offsets[w + 1]]
    }

    pub fn window_of_voxel(&self, v: usize) -> u64 {
        self.voxel_window[v]
    }

    pub fn inner_coords(&self, v: usize) -> [u32; 3] {
        self.inner_coords[v]
    }
}

/// Bin every voxel of `grid` into the window holding
/// `floor((coord + shift) / size)` per axis.
pub fn assign_windows(grid: &SparseVoxelGrid, spec: &WindowSpec) -> Result<WindowAssignment> {
    spec.validate()?;
    let dims = grid.dims();
    // Window-cell extents of the shifted grid, used only to pack the scalar key.
    let cells_x = ((dims[0] - 1 + spec.shift[0]) / spec.size[0] + 1) as u64;
    let cells_y = ((dims[1] - 1 + spec.shift[1]) / spec.size[1] + 1) as u64;

    let per_voxel: Vec<(u64, [u32; 3])> = grid
        .coords()
        .par_iter()
        .map(|c| {
            let mut cell = [0u64; 3];
            let mut inner = [0u32; 3];
            for a in 0..3 {
                let shifted = c[a] as usize + spec.shift[a];
                cell[a] = (shifted / spec.size[a]) as u64;
                inner[a] = (shifted % spec.size[a]) as u32;
            }
            let key = (cell[2] * cells_y + cell[1]) * cells_x + cell[0];
            (key, inner)
        })
        .collect();

    if grid.is_empty() {
        return Ok(WindowAssignment {
            spec: *spec,
            voxel_window: Vec::new(),
            inner_coords: Vec::new(),
            window_keys: Vec::new(),
            roster_offsets: vec![0],
            roster: Vec::new(),
        });
    }

    let mut order: Vec<u32> = (0..grid.len() as u32).collect();
    order.par_sort_unstable_by_key(|&v| (per_voxel[v as usize].0, v));

    let mut window_keys = Vec::new();
    let mut roster_offsets = vec![0usize];
    for (i, &v) in order.iter().enumerate() {
        let key = per_voxel[v as usize].0;
        if window_keys.last() != Some(&key) {
            if i > 0 {
                roster_offsets.push(i);
            }
            window_keys.push(key);
        }
    }
    roster_offsets.push(order.len());

    Ok(WindowAssignment {
        spec: *spec,
        voxel_window: per_voxel.iter().map(|(k, _)| *k).collect(),
        inner_coords: per_voxel.iter().map(|(_, i)| *i).collect(),
        window_keys,
        roster_offsets,
        roster: order,
    })
}

/// The per-block window specs of a whole backbone, flattened across stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    specs: Vec<WindowSpec>,
}

impl BlockSchedule {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn block(&self, i: usize) -> &WindowSpec {
        &self.specs[i]
    }

    pub fn specs(&self) -> &[WindowSpec] {
        &self.specs
    }
}

/// Build the alternating window schedule: even blocks use XY pair A with no
/// shift, odd blocks use pair B shifted by half a window. The parity runs
/// globally across stages; Z windows cover each stage's full extent and are
/// never shifted when they do.
pub fn make_schedule(cfg: &BackboneConfig) -> Result<BlockSchedule> {
    cfg.validate()?;
    let mut specs = Vec::new();
    let mut block_index = 0usize;
    for stage in 0..cfg.num_stages() {
        let z_window = cfg.stage_z_window(stage);
        let z_extent = cfg.stage_z_extent(stage);
        if z_extent % z_window != 0 {
            return Err(Error::Config(format!(
                "stage {stage}: z window {z_window} does not divide z extent {z_extent}"
            )));
        }
        for _ in 0..cfg.blocks_per_stage[stage] {
            let xy = if block_index % 2 == 0 {
                cfg.window_a
            } else {
                cfg.window_b
            };
            let size = [xy[0], xy[1], z_window];
            let shift = if block_index % 2 == 0 {
                [0, 0, 0]
            } else {
                let zs = if z_window >= z_extent { 0 } else { z_window / 2 };
                [xy[0] / 2, xy[1] / 2, zs]
            };
            let spec = WindowSpec { size, shift };
            spec.validate()?;
            specs.push(spec);
            block_index += 1;
        }
    }
    if specs.is_empty() {
        return Err(Error::Config("schedule has no blocks".into()));
    }
    Ok(BlockSchedule { specs })
}

/// Schedule for a plain block list with a fixed Z window (used by the
/// benchmark harness and tests that bypass a full backbone config).
pub fn simple_schedule(
    blocks: usize,
    window_a: [usize; 2],
    window_b: [usize; 2],
    z_window: usize,
) -> BlockSchedule {
    let specs = (0..blocks)
        .map(|i| {
            let xy = if i % 2 == 0 { window_a } else { window_b };
            let shift = if i % 2 == 0 {
                [0, 0, 0]
            } else {
                [xy[0] / 2, xy[1] / 2, 0]
            };
            WindowSpec {
                size: [xy[0], xy[1], z_window],
                shift,
            }
        })
        .collect();
    BlockSchedule { specs }
}

/// Used by tests and the V variant: schedule entries grouped back per stage.
pub fn stage_slices(cfg: &BackboneConfig) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(cfg.num_stages());
    let mut start = 0;
    for &b in &cfg.blocks_per_stage {
        out.push(start..start + b);
        start += b;
    }
    out
}
