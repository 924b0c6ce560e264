//! Point-cloud ingestion and sparse voxelization.
//!
//! Raw points are binned into a regular grid; each occupied voxel gets a
//! feature embedded from the mean of its points' descriptors (offset to the
//! voxel center concatenated with the extra per-point attributes). Voxels are
//! emitted in row-major `(iz, iy, ix)` ascending order, the canonical order
//! every later stage re-derives its own sorts from.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::gelu;
use crate::error::{Error, Result};
use crate::params::{tensor_rng, Linear};
use crate::tensor::FeatureTensor;

/// Raw input points: xyz in meters plus a uniform-width vector of extra
/// attributes (intensity and the like).
#[derive(Debug, Clone)]
pub struct PointCloud {
    xyz: Vec<[f32; 3]>,
    extras: Vec<f32>,
    extra_dim: usize,
}

impl PointCloud {
    /// Validates finiteness of every coordinate and attribute, and that
    /// `extras` is exactly `len * extra_dim` long.
    pub fn new(xyz: Vec<[f32; 3]>, extras: Vec<f32>, extra_dim: usize) -> Result<Self> {
        if extras.len() != xyz.len() * extra_dim {
            return Err(Error::InvalidInput(format!(
                "extras length {} != {} points x {} attributes",
                extras.len(),
                xyz.len(),
                extra_dim
            )));
        }
        for (i, p) in xyz.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has non-finite coordinates {p:?}"
                )));
            }
        }
        if let Some(i) = extras.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "point {} has a non-finite attribute",
                i / extra_dim.max(1)
            )));
        }
        Ok(Self {
            xyz,
            extras,
            extra_dim,
        })
    }

    pub fn xyz_only(xyz: Vec<[f32; 3]>) -> Result<Self> {
        Self::new(xyz, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn extra_dim(&self) -> usize {
        self.extra_dim
    }

    pub fn xyz(&self) -> &[[f32; 3]] {
        &self.xyz
    }

    pub fn extras_of(&self, i: usize) -> &[f32] {
        &self.extras[i * self.extra_dim..(i + 1) * self.extra_dim]
    }

    /// Read `x,y,z[,a0,a1,...]` CSV. The first three header names must be
    /// exactly `x`, `y`, `z`; every remaining column is an extra attribute.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("{}: header: {e}", path.display())))?
            .clone();
        if headers.len() < 3
            || headers.get(0) != Some("x")
            || headers.get(1) != Some("y")
            || headers.get(2) != Some("z")
        {
            return Err(Error::Parse(format!(
                "{}: header must start with `x,y,z`, got `{}`",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let extra_dim = headers.len() - 3;
        let mut xyz = Vec::new();
        let mut extras = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), row + 1)))?;
            if rec.len() != headers.len() {
                return Err(Error::Parse(format!(
                    "{}: row {}: expected {} fields, got {}",
                    path.display(),
                    row + 1,
                    headers.len(),
                    rec.len()
                )));
            }
            let parse = |col: usize| -> Result<f32> {
                rec[col].parse::<f32>().map_err(|e| {
                    Error::Parse(format!(
                        "{}: row {}: column `{}`: {e}",
                        path.display(),
                        row + 1,
                        &headers[col]
                    ))
                })
            };
            xyz.push([parse(0)?, parse(1)?, parse(2)?]);
            for col in 3..headers.len() {
                extras.push(parse(col)?);
            }
        }
        Self::new(xyz, extras, extra_dim)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        for k in 0..self.extra_dim {
            header.push(format!("a{k}"));
        }
        wtr.write_record(&header)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.xyz[i].iter().map(|v| v.to_string()).collect();
            rec.extend(self.extras_of(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read raw little-endian f32 rows of `3 + extra_dim` values each.
    pub fn from_le_bin(path: &Path, extra_dim: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let stride = 4 * (3 + extra_dim);
        if bytes.len() % stride != 0 {
            return Err(Error::Parse(format!(
                "{}: {} bytes is not a multiple of the {}-byte row ({} floats per point)",
                path.display(),
                bytes.len(),
                stride,
                3 + extra_dim
            )));
        }
        let n = bytes.len() / stride;
        let mut vals = vec![0.0f32; n * (3 + extra_dim)];
        LittleEndian::read_f32_into(&bytes, &mut vals);
        let mut xyz = Vec::with_capacity(n);
        let mut extras = Vec::with_capacity(n * extra_dim);
        for row in vals.chunks_exact(3 + extra_dim) {
            xyz.push([row[0], row[1], row[2]]);
            extras.extend_from_slice(&row[3..]);
        }
        Self::new(xyz, extras, extra_dim)
    }

    pub fn to_le_bin(&self, path: &Path) -> Result<()> {
        let stride = 3 + self.extra_dim;
        let mut vals = Vec::with_capacity(self.len() * stride);
        for i in 0..self.len() {
            vals.extend_from_slice(&self.xyz[i]);
            vals.extend_from_slice(self.extras_of(i));
        }
        let mut bytes = vec![0u8; 4 * vals.len()];
        LittleEndian::write_f32_into(&vals, &mut bytes);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Load by file extension: `.csv` is parsed as CSV, anything else as the
    /// raw binary format with the given attribute width.
    pub fn from_file(path: &Path, extra_dim: usize) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::from_csv(path),
            _ => Self::from_le_bin(path, extra_dim),
        }
    }
}

/// Axis-aligned grid over `[range_min, range_max)` with per-axis voxel sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub range_min: [f32; 3],
    pub range_max: [f32; 3],
    pub voxel_size: [f32; 3],
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.range_min[a].is_finite() && self.range_max[a].is_finite()) {
                return Err(Error::Config(format!("grid range axis {a} not finite")));
            }
            if self.range_max[a] <= self.range_min[a] {
                return Err(Error::Config(format!(
                    "grid range axis {a}: max {} <= min {}",
                    self.range_max[a], self.range_min[a]
                )));
            }
            if !(self.voxel_size[a].is_finite() && self.voxel_size[a] > 0.0) {
                return Err(Error::Config(format!(
                    "voxel_size axis {a} must be positive, got {}",
                    self.voxel_size[a]
                )));
            }
        }
        Ok(())
    }

    /// Grid extents `ceil((max - min) / size)`, each at least 1.
    ///
    /// Cell counts within one part in 10^6 of an integer snap to it, so
    /// extents that are exact multiples of the voxel size (up to f32
    /// representation noise) do not gain a spurious boundary cell.
    pub fn dims(&self) -> [usize; 3] {
        let mut d = [0usize; 3];
        for a in 0..3 {
            let span = (self.range_max[a] as f64 - self.range_min[a] as f64)
                / self.voxel_size[a] as f64;
            let snapped = span.round();
            let cells = if (span - snapped).abs() <= 1e-6 * span.max(1.0) {
                snapped
            } else {
                span.ceil()
            };
            d[a] = (cells as usize).max(1);
        }
        d
    }
}

/// The affine embedding applied to a voxel's mean point descriptor.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub linear: Linear,
}

impl EmbedParams {
    /// `in_dim` is `3 + extra_dim` (offset-to-center plus attributes).
    pub fn seeded(in_dim: usize, channels: usize, seed: u64) -> Self {
        Self {
            linear: Linear::seeded(channels, in_dim, &mut tensor_rng(seed, "embed")),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn channels(&self) -> usize {
        self.linear.out_dim()
    }
}

/// Sparse set of occupied voxels: integer coordinates plus one feature row
/// per voxel, in row-major `(iz, iy, ix)` ascending order.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    coords: Vec<[u32; 3]>,
    features: FeatureTensor,
    dims: [usize; 3],
    spec: GridSpec,
}

impl SparseVoxelGrid {
    /// Validates coordinate bounds, uniqueness, and the feature row count.
    pub fn new(
        coords: Vec<[u32; 3]>,
        features: FeatureTensor,
        dims: [usize; 3],
        spec: GridSpec,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != coords.len() {
            return Err(Error::Contract(format!(
                "features shape {:?} does not match {} voxels",
                features.shape(),
                coords.len()
            )));
        }
        let mut prev: Option<u64> = None;
        for c in &coords {
            if c[0] as usize >= dims[0] || c[1] as usize >= dims[1] || c[2] as usize >= dims[2] {
                return Err(Error::Contract(format!(
                    "voxel {c:?} outside grid dims {dims:?}"
                )));
            }
            let key = Self::raster_key(*c, dims);
            if let Some(p) = prev {
                if key <= p {
                    return Err(Error::Contract(
                        "voxel coords must be unique and (iz, iy, ix) ascending".into(),
                    ));
                }
            }
            prev = Some(key);
        }
        Ok(Self {
            coords,
            features,
            dims,
            spec,
        })
    }

    fn raster_key(c: [u32; 3], dims: [usize; 3]) -> u64 {
        (c[2] as u64 * dims[1] as u64 + c[1] as u64) * dims[0] as u64 + c[0] as u64
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &FeatureTensor {
        &self.features
    }

    /// Mutable feature rows; coordinates are fixed for the grid's lifetime.
    pub fn features_mut(&mut self) -> &mut FeatureTensor {
        &mut self.features
    }

    pub fn feature_row(&self, v: usize) -> &[f32] {
        self.features.row(v)
    }
}

/// Bin points into voxels and embed per-voxel features.
///
/// Out-of-range points are dropped. Within a voxel, point descriptors are
/// mean-pooled in a value-sorted order so the result is bit-identical under
/// any permutation of the input, then passed through the affine embedding
/// and a GELU.
pub fn voxelize(pc: &PointCloud, spec: &GridSpec, embed: &EmbedParams) -> Result<SparseVoxelGrid> {
    spec.validate()?;
    if embed.in_dim() != 3 + pc.extra_dim() {
        return Err(Error::Contract(format!(
            "embedding expects {} inputs, point descriptors have {}",
            embed.in_dim(),
            3 + pc.extra_dim()
        )));
    }
    let dims = spec.dims();

    // Per-point voxel key; None for out-of-range points.
    let keys: Vec<Option<(u64, [u32; 3])>> = pc
        .xyz()
        .par_iter()
        .map(|p| {
            let mut idx = [0u32; 3];
            for a in 0..3 {
                if !(p[a] >= spec.range_min[a] && p[a] < spec.range_max[a]) {
                    return None;
                }
                let rel = (p[a] as f64 - spec.range_min[a] as f64) / spec.voxel_size[a] as f64;
                idx[a] = (rel.floor() as usize).min(dims[a] - 1) as u32;
            }
            Some((SparseVoxelGrid::raster_key(idx, dims), idx))
        })
        .collect();

    let mut kept: Vec<(u64, u32)> = keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|(key, _)| (key, i as u32)))
        .collect();

    // Order: voxel key, then point values, so accumulation order is a
    // function of the multiset of points alone.
    kept.par_sort_unstable_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let (pa, pb) = (&pc.xyz()[a.1 as usize], &pc.xyz()[b.1 as usize]);
            for axis in 0..3 {
                match pa[axis].total_cmp(&pb[axis]) {
                    std::cmp::Ordering::Equal => {}
                    o => return o,
                }
            }
            for (ea, eb) in pc
                .extras_of(a.1 as usize)
                .iter()
                .zip(pc.extras_of(b.1 as usize))
            {
                match ea.total_cmp(eb) {
                    std::cmp::Ordering::Equal => {}
                    o => return o,
                }
            }
            a.1.cmp(&b.1)
        })
    });

    // Run boundaries per voxel.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=kept.len() {
        if i == kept.len() || kept[i].0 != kept[start].0 {
            runs.push((start, i));
            start = i;
        }
    }

    let channels = embed.channels();
    let in_dim = embed.in_dim();
    let mut coords = vec![[0u32; 3]; runs.len()];
    let mut feat = vec![0.0f32; runs.len() * channels];

    coords
        .par_iter_mut()
        .zip(feat.par_chunks_mut(channels))
        .zip(&runs)
        .for_each(|((coord, frow), &(lo, hi))| {
            let idx = keys[kept[lo].1 as usize].unwrap().1;
            *coord = idx;
            let mut center = [0.0f64; 3];
            for a in 0..3 {
                center[a] =
                    spec.range_min[a] as f64 + (idx[a] as f64 + 0.5) * spec.voxel_size[a] as f64;
            }
            let mut mean = vec![0.0f64; in_dim];
            for &(_, pi) in &kept[lo..hi] {
                let p = &pc.xyz()[pi as usize];
                for a in 0..3 {
                    mean[a] += p[a] as f64 - center[a];
                }
                for (m, e) in mean[3..].iter_mut().zip(pc.extras_of(pi as usize)) {
                    *m += *e as f64;
                }
            }
            let count = (hi - lo) as f64;
            for m in &mut mean {
                *m /= count;
            }
            let w = embed.linear.weight.data();
            for (o, f) in frow.iter_mut().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = embed.linear.bias[o] as f64;
                for (wi, mi) in row.iter().zip(&mean) {
                    acc += *wi as f64 * mi;
                }
                *f = gelu(acc as f32);
            }
        });

    SparseVoxelGrid::new(
        coords,
        FeatureTensor::from_vec(&[runs.len(), channels], feat)?,
        dims,
        *spec,
    )
}

/// Scatter a `Gz = 1` grid into a dense `(C, Gy, Gx)` bird's-eye-view map.
pub fn dense_bev_scatter(grid: &SparseVoxelGrid) -> Result<FeatureTensor> {
    let dims = grid.dims();
    if dims[2] != 1 {
        return Err(Error::Contract(format!(
            "dense_bev_scatter requires Gz = 1, grid has Gz = {}",
            dims[2]
        )));
    }
    let (gx, gy, c) = (dims[0], dims[1], grid.channels());
    let mut map = FeatureTensor::zeros(&[c, gy, gx]);
    let data = map.data_mut();
    for (v, coord) in grid.coords().iter().enumerate() {
        let (ix, iy) = (coord[0] as usize, coord[1] as usize);
        let row = grid.feature_row(v);
        for (ch, val) in row.iter().enumerate() {
            data[(ch * gy + iy) * gx + ix] = *val;
        }
    }
    Ok(map)
}
