//! Python bindings: set-partition primitives, scene synthesis, the invariant
//! suite, and a `Backbone` class running the full forward pass.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use dsvt::backbone::{BackboneConfig, BackboneWeights};
use dsvt::bench::SceneModel;
use dsvt::error::Error;
use dsvt::selfcheck::{CheckOptions, Mutation};
use dsvt::voxel::PointCloud;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Minimal number of sets covering `n` voxels at `tau` slots each.
#[pyfunction]
fn count_sets(n: usize, tau: usize) -> PyResult<usize> {
    if n == 0 || tau == 0 {
        return Err(PyValueError::new_err("n and tau must be >= 1"));
    }
    Ok(dsvt::set_partition::count_sets(n, tau))
}

/// The rank table and first-occurrence mask as nested lists, one row per set.
#[pyfunction]
fn set_indices(n: usize, tau: usize) -> PyResult<(Vec<Vec<u32>>, Vec<Vec<bool>>)> {
    if n == 0 || tau == 0 {
        return Err(PyValueError::new_err("n and tau must be >= 1"));
    }
    let s = dsvt::set_partition::count_sets(n, tau);
    let (q, mask) = dsvt::set_partition::set_indices(n, tau, s);
    Ok((
        q.chunks(tau).map(|r| r.to_vec()).collect(),
        mask.chunks(tau).map(|r| r.to_vec()).collect(),
    ))
}

/// Sample a clustered synthetic scene from a scene-model JSON document.
#[pyfunction]
fn synth_scene(model_json: &str) -> PyResult<Vec<(f32, f32, f32)>> {
    let model = SceneModel::from_json_str(model_json).map_err(to_py)?;
    let pc = dsvt::bench::synth_scene(&model).map_err(to_py)?;
    Ok(pc.xyz().iter().map(|p| (p[0], p[1], p[2])).collect())
}

/// Run the randomized invariant suite; raises on the first violation with
/// its witness in the message.
#[pyfunction]
#[pyo3(signature = (iters=10_000, trials=50, seed=0, mutate=None))]
fn run_check(iters: usize, trials: usize, seed: u64, mutate: Option<&str>) -> PyResult<()> {
    let mutation = match mutate {
        None => None,
        Some("float-floor") => Some(Mutation::FloatFloor),
        Some(other) => {
            return Err(PyValueError::new_err(format!(
                "unknown mutation `{other}` (expected float-floor)"
            )))
        }
    };
    let opts = CheckOptions {
        iters,
        trials,
        seed,
        mutation,
        ..CheckOptions::default()
    };
    dsvt::selfcheck::run_check(&opts).map(|_| ()).map_err(to_py)
}

fn cloud_from(points: Vec<(f32, f32, f32)>) -> PyResult<PointCloud> {
    PointCloud::xyz_only(points.into_iter().map(|p| [p.0, p.1, p.2]).collect()).map_err(to_py)
}

/// A configured backbone with deterministic seeded weights.
#[pyclass]
struct Backbone {
    cfg: BackboneConfig,
    weights: BackboneWeights,
}

#[pymethods]
impl Backbone {
    /// Build from a preset name (`dsvt-p`, `dsvt-v`, `dsvt-nus`) or a config
    /// JSON document, with weights drawn from `seed`.
    #[new]
    #[pyo3(signature = (preset=None, config_json=None, seed=0))]
    fn new(preset: Option<&str>, config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match (preset, config_json) {
            (Some(name), None) => BackboneConfig::preset(name).ok_or_else(|| {
                PyValueError::new_err(format!(
                    "unknown preset `{name}` (expected dsvt-p, dsvt-v, or dsvt-nus)"
                ))
            })?,
            (None, Some(json)) => BackboneConfig::from_json_str(json).map_err(to_py)?,
            _ => {
                return Err(PyValueError::new_err(
                    "exactly one of preset or config_json is required",
                ))
            }
        };
        let weights = BackboneWeights::seeded(&cfg, 0, seed);
        Ok(Self { cfg, weights })
    }

    /// The configuration as a JSON document.
    fn config_json(&self) -> String {
        self.cfg.to_json_string()
    }

    /// Run the forward pass over xyz points. Returns the BEV shape
    /// `(C, Gy, Gx)` and the map as little-endian f32 bytes.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        points: Vec<(f32, f32, f32)>,
    ) -> PyResult<((usize, usize, usize), Bound<'py, PyBytes>)> {
        let pc = cloud_from(points)?;
        let (bev, report) = dsvt::backbone::forward(&pc, &self.cfg, &self.weights).map_err(to_py)?;
        let mut bytes = vec![0u8; 4 * bev.len()];
        for (chunk, v) in bytes.chunks_exact_mut(4).zip(bev.data()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        let shape = report.bev_shape;
        Ok(((shape[0], shape[1], shape[2]), PyBytes::new(py, &bytes)))
    }

    /// Per-stage grid Z extents of this configuration.
    fn stage_z_extents(&self) -> Vec<usize> {
        self.cfg.stage_z_extents()
    }

    /// Voxelize the points and dump every block's window partitions as JSON.
    fn partition_json(&self, points: Vec<(f32, f32, f32)>) -> PyResult<String> {
        let pc = cloud_from(points)?;
        let grid = dsvt::voxel::voxelize(&pc, &self.cfg.grid, &self.weights.embed).map_err(to_py)?;
        let dump = dsvt::backbone::partition_dump(&grid, &self.cfg).map_err(to_py)?;
        serde_json::to_string_pretty(&dump).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pymodule]
fn dsvt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(count_sets, m)?)?;
    m.add_function(wrap_pyfunction!(set_indices, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(run_check, m)?)?;
    m.add_class::<Backbone>()?;
    Ok(())
}
