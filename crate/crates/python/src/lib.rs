//! Python bindings: tile levels, sparsity measures, pruning, ADC energy,
//! checkpoints and whole experiments.
//!
//! Reports and plans cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pythonize::pythonize;
use serde::Serialize;

use xbarprune::energy::{normalized_energy, AdcProfile};
use xbarprune::pipeline::{self, Experiment};
use xbarprune::prune::{self as core_prune, Provenance};
use xbarprune::regularize::Grouping;
use xbarprune::sparsity;
use xbarprune::{levels, Level, LayerShape};

create_exception!(xbarprune_py, XbarpruneError, PyException, "Raised by every failing xbarprune call; `exit_code` mirrors the CLI.");

fn err(e: xbarprune::Error) -> PyErr {
    Python::attach(|py| {
        let exc = XbarpruneError::new_err(e.to_string());
        let _ = exc.value(py).setattr("exit_code", e.exit_code());
        exc
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    Ok(pythonize(py, value)?)
}

fn level_label(level: Level) -> String {
    level.to_string()
}

/// Levels available to an `n x n` tile.
#[pyclass(name = "SparsityLevelSet", frozen)]
struct PyLevelSet(xbarprune::SparsityLevelSet);

#[pymethods]
impl PyLevelSet {
    #[new]
    fn new(tile_size: usize) -> PyResult<Self> {
        xbarprune::SparsityLevelSet::new(tile_size).map(Self).map_err(err)
    }

    #[getter]
    fn tile_size(&self) -> usize {
        self.0.tile_size()
    }

    #[getter]
    fn full_bits(&self) -> u32 {
        self.0.full_bits()
    }

    /// `(label, sparsity, keep, bits)` per level, least sparse first.
    fn levels(&self) -> Vec<(String, f64, usize, u32)> {
        let n = self.0.tile_size();
        self.0
            .levels()
            .iter()
            .map(|&l| (level_label(l), l.sparsity(), l.keep(n), self.0.bits(l)))
            .collect()
    }

    fn sparsities(&self) -> Vec<f64> {
        self.0.sparsities()
    }

    /// Label of the closest level; ties go to the sparser one.
    fn closest(&self, sparsity: f64) -> String {
        level_label(self.0.closest(sparsity))
    }

    /// ADC bits a tile needs when its densest column holds `max_nnz` weights.
    fn bits_for_max_nnz(&self, max_nnz: usize) -> u32 {
        self.0.bits(self.0.level_for_max_nnz(max_nnz))
    }

    fn __repr__(&self) -> String {
        format!("SparsityLevelSet(tile_size={})", self.0.tile_size())
    }
}

/// A layer's weights as a crossbar matrix (rows are inputs).
#[pyclass(name = "LayerMatrix", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLayer(xbarprune::LayerMatrix);

#[pymethods]
impl PyLayer {
    /// Dense layer from its row-major `fan_in x fan_out` values.
    #[staticmethod]
    fn dense(name: &str, fan_in: usize, fan_out: usize, values: Vec<f64>) -> PyResult<Self> {
        xbarprune::LayerMatrix::new(name, LayerShape::dense(fan_in, fan_out), values)
            .map(Self)
            .map_err(err)
    }

    /// Convolution from its `[out][in][k][k]` kernel tensor.
    #[staticmethod]
    fn conv(name: &str, out_channels: usize, in_channels: usize, kernel: usize, weights: Vec<f64>) -> PyResult<Self> {
        xbarprune::tiling::flatten_layer(name, &weights, LayerShape::conv(out_channels, in_channels, kernel))
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn name(&self) -> &str {
        self.0.name()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols()
    }

    /// Row-major matrix values.
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    /// Tile statistics: one dict per tile with its densest column and level.
    fn tiles<'py>(&self, py: Python<'py>, tile_size: usize) -> PyResult<Bound<'py, PyAny>> {
        let grid = xbarprune::partition(&self.0, tile_size).map_err(err)?;
        let stats: Vec<_> = grid.tiles.iter().map(sparsity::tile_stats).collect();
        to_py(py, &stats)
    }

    fn __repr__(&self) -> String {
        format!("LayerMatrix({:?}, {}x{})", self.0.name(), self.0.rows(), self.0.cols())
    }
}

/// Keep mask over a layer matrix; `True` keeps the weight.
#[pyclass(name = "PruneMask", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMask(xbarprune::PruneMask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(rows: usize, cols: usize, bits: Vec<bool>) -> PyResult<Self> {
        if bits.len() != rows * cols {
            return Err(err(xbarprune::Error::Dimension(format!(
                "{} mask bits for a {rows}x{cols} layer",
                bits.len()
            ))));
        }
        Ok(Self(xbarprune::PruneMask::from_bits(rows, cols, bits)))
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols()
    }

    fn bits(&self) -> Vec<bool> {
        self.0.bits().to_vec()
    }

    #[getter]
    fn pruned_fraction(&self) -> f64 {
        self.0.pruned_fraction()
    }

    #[getter]
    fn provenance(&self) -> String {
        serde_json::to_value(self.0.provenance)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    fn __repr__(&self) -> String {
        format!(
            "PruneMask({}x{}, pruned={:.4}, provenance={})",
            self.0.rows(),
            self.0.cols(),
            self.0.pruned_fraction(),
            self.provenance()
        )
    }
}

type LayerArg<'a> = (PyRef<'a, PyLayer>, Option<PyRef<'a, PyMask>>);

fn owned_layers(layers: &[LayerArg<'_>]) -> Vec<(xbarprune::LayerMatrix, Option<xbarprune::PruneMask>)> {
    layers
        .iter()
        .map(|(m, k)| (m.0.clone(), k.as_ref().map(|k| k.0.clone())))
        .collect()
}

/// Saved weights and masks.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint(xbarprune::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        xbarprune::Checkpoint::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// `(LayerMatrix, PruneMask | None)` for every weight layer.
    fn layers(&self) -> PyResult<Vec<(PyLayer, Option<PyMask>)>> {
        Ok(self
            .0
            .layers()
            .map_err(err)?
            .into_iter()
            .map(|(m, k)| (PyLayer(m), k.map(PyMask)))
            .collect())
    }

    /// Tile histogram and energy report.
    fn analyze<'py>(&self, py: Python<'py>, tile_size: usize) -> PyResult<Bound<'py, PyAny>> {
        let layers = self.0.layers().map_err(err)?;
        to_py(py, &pipeline::analyze(&layers, tile_size).map_err(err)?)
    }
}

/// A validated experiment configuration.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(xbarprune::ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_json(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        xbarprune::ExperimentConfig::from_json(text, &overrides).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        xbarprune::ExperimentConfig::load(&path, &overrides).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.method.label()
    }

    #[getter]
    fn tile_size(&self) -> usize {
        self.0.tile_size()
    }
}

/// Outcome of a full train, prune and fine-tune run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    result: pipeline::MethodResult,
    seed: u64,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn accuracy(&self) -> f64 {
        self.result.accuracy
    }

    #[getter]
    fn accuracy_before_finetune(&self) -> f64 {
        self.result.accuracy_before_finetune
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.result.summary(self.seed))
    }

    fn plan<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.result.plan)
    }

    fn analysis<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.result.analysis)
    }

    /// Per-epoch records of each training stage, keyed by stage name.
    fn histories<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.result.histories)
    }

    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint(xbarprune::Checkpoint::from_network(&self.result.network))
    }
}

/// Runs the configured method end to end. Relative data paths resolve
/// against `base`. The GIL is released while training.
#[pyfunction]
#[pyo3(signature = (config, base = PathBuf::from(".")))]
fn run_experiment(py: Python<'_>, config: &PyConfig, base: PathBuf) -> PyResult<PyRunResult> {
    let cfg = config.0.clone();
    let seed = cfg.train.seed;
    let result = py
        .detach(|| Experiment::load(cfg, &base).and_then(|e| e.run()))
        .map_err(err)?;
    Ok(PyRunResult { result, seed })
}

#[pyfunction]
fn target_sparsity(bits: u32) -> f64 {
    levels::target_sparsity(bits)
}

#[pyfunction]
fn hoyer_square(w: Vec<f64>) -> f64 {
    sparsity::hoyer_square(&w)
}

#[pyfunction]
fn hoyer_square_grad(w: Vec<f64>) -> Vec<f64> {
    sparsity::hoyer_square_grad(&w)
}

#[pyfunction]
fn l0_count(w: Vec<f64>) -> usize {
    sparsity::l0_count(&w)
}

#[pyfunction]
#[pyo3(signature = (layer, allowed_ratio, mask = None))]
fn prune_unstructured(layer: &PyLayer, allowed_ratio: f64, mask: Option<&PyMask>) -> PyResult<PyMask> {
    core_prune::prune_unstructured(&layer.0, mask.map(|k| &k.0), allowed_ratio)
        .map(PyMask)
        .map_err(err)
}

/// Per-tile discretized pruning; returns the new mask and the layer plan.
#[pyfunction]
#[pyo3(signature = (layer, allowed_ratio, tile_size, mask = None))]
fn prune_per_tile<'py>(
    py: Python<'py>,
    layer: &PyLayer,
    allowed_ratio: f64,
    tile_size: usize,
    mask: Option<&PyMask>,
) -> PyResult<(PyMask, Bound<'py, PyAny>)> {
    let (m, plan) = core_prune::prune_layer_per_tile(&layer.0, mask.map(|k| &k.0), allowed_ratio, tile_size)
        .map_err(err)?;
    Ok((PyMask(m.with_provenance(Provenance::Dub)), to_py(py, &plan)?))
}

/// Removes whole `"column"`, `"row"` or `"tile"` groups within the budget.
#[pyfunction]
#[pyo3(signature = (layer, tile_size, grouping, allowed_ratio, mask = None))]
fn prune_structured(
    layer: &PyLayer,
    tile_size: usize,
    grouping: &str,
    allowed_ratio: f64,
    mask: Option<&PyMask>,
) -> PyResult<PyMask> {
    let grouping = match grouping {
        "column" => Grouping::Column,
        "row" => Grouping::Row,
        "tile" => Grouping::Tile,
        other => {
            return Err(err(xbarprune::Error::InvalidArgument(format!(
                "grouping must be column, row or tile, got '{other}'"
            ))))
        }
    };
    core_prune::prune_structured(&layer.0, mask.map(|k| &k.0), tile_size, grouping, allowed_ratio)
        .map(PyMask)
        .map_err(err)
}

/// Energy report over `(LayerMatrix, PruneMask | None)` pairs.
#[pyfunction]
fn energy_report<'py>(py: Python<'py>, layers: Vec<LayerArg<'py>>, tile_size: usize) -> PyResult<Bound<'py, PyAny>> {
    let owned = owned_layers(&layers);
    to_py(py, &pipeline::analyze(&owned, tile_size).map_err(err)?.report)
}

/// Normalized ADC energy of tiles with the given bit precisions.
#[pyfunction]
fn energy_from_bits(tile_size: usize, bits: Vec<u32>) -> PyResult<f64> {
    AdcProfile::from_bits(tile_size, &bits)
        .and_then(|p| normalized_energy(&p))
        .map_err(err)
}

#[pymodule]
pub fn xbarprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("XbarpruneError", m.py().get_type::<XbarpruneError>())?;
    m.add_class::<PyLevelSet>()?;
    m.add_class::<PyLayer>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(target_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(hoyer_square, m)?)?;
    m.add_function(wrap_pyfunction!(hoyer_square_grad, m)?)?;
    m.add_function(wrap_pyfunction!(l0_count, m)?)?;
    m.add_function(wrap_pyfunction!(prune_unstructured, m)?)?;
    m.add_function(wrap_pyfunction!(prune_per_tile, m)?)?;
    m.add_function(wrap_pyfunction!(prune_structured, m)?)?;
    m.add_function(wrap_pyfunction!(energy_report, m)?)?;
    m.add_function(wrap_pyfunction!(energy_from_bits, m)?)?;
    Ok(())
}
