//! Python bindings. Results cross the boundary as plain dicts and lists
//! (serialized through JSON), matrices as lists of row lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use mitp::datasets::{generate_synthetic as generate, Dataset};
use mitp::harness::{self, DataSource, Model, SweepConfig};
use mitp::memory_hub::{MemoryHub, SimilarityType};
use mitp::numerics::{Graph, ParamStore, Rng, RowSimilarity, Tensor};
use mitp::MitpError;

fn py_err(e: MitpError) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

/// A complete experiment description.
#[pyclass(name = "RunConfig", module = "mitp")]
struct PyRunConfig {
    inner: harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, optionally overridden by a JSON object string.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => harness::RunConfig::from_json_str(text).map_err(py_err)?,
            None => harness::RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::RunConfig::from_file(&path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.ablation_variant.to_string()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.inner.ablation_variant = v.parse().map_err(py_err)?;
        if self.inner.ablation_variant == harness::Variant::Baseline {
            self.inner.interaction_layers.clear();
        }
        Ok(())
    }

    #[getter]
    fn similarity(&self) -> String {
        self.inner.similarity.to_string()
    }

    #[setter]
    fn set_similarity(&mut self, s: &str) -> PyResult<()> {
        self.inner.similarity = s.parse().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn interaction_layers(&self) -> Vec<usize> {
        self.inner.interaction_layers.clone()
    }

    #[setter]
    fn set_interaction_layers(&mut self, layers: Vec<usize>) {
        self.inner.interaction_layers = layers;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.epochs = epochs;
    }

    #[getter]
    fn prompt_length(&self) -> usize {
        self.inner.prompt_length
    }

    #[setter]
    fn set_prompt_length(&mut self, l: usize) {
        self.inner.prompt_length = l;
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[setter]
    fn set_lr(&mut self, lr: f64) {
        self.inner.lr = lr;
    }

    #[getter]
    fn train_fraction(&self) -> f64 {
        self.inner.train_fraction
    }

    #[setter]
    fn set_train_fraction(&mut self, f: f64) {
        self.inner.train_fraction = f;
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(variant={}, similarity={}, layers={:?}, L={}, seed={})",
            self.inner.ablation_variant,
            self.inner.similarity,
            self.inner.interaction_layers,
            self.inner.prompt_length,
            self.inner.seed
        )
    }
}

/// Trains one config and returns the RunResult as a dict.
#[pyfunction]
fn train_run<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let result = py.detach(move || harness::train_run(&cfg)).map_err(py_err)?;
    to_py(py, &result)
}

/// Runs an ablation matrix from a sweep JSON string
/// (`{"base": {...}, "axes": {...}}`); returns `{results, aggregates}`.
#[pyfunction]
#[pyo3(signature = (sweep_json, threads=1))]
fn ablation_matrix<'py>(py: Python<'py>, sweep_json: &str, threads: usize) -> PyResult<Bound<'py, PyAny>> {
    let sweep = SweepConfig::from_json_str(sweep_json).map_err(py_err)?;
    let report = py
        .detach(move || harness::ablation_matrix(&sweep.base, &sweep.axes, threads))
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Trainable/frozen counts per parameter group.
#[pyfunction]
fn param_census<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let model = Model::build(&config.inner).map_err(py_err)?;
    to_py(py, &harness::param_census(&model).map_err(py_err)?)
}

fn row_similarity(kind: &str) -> PyResult<RowSimilarity> {
    Ok(match kind {
        "cosine" => RowSimilarity::Cosine,
        "covariance" => RowSimilarity::Covariance,
        "pearson" => RowSimilarity::Pearson,
        "mmd" => RowSimilarity::Mmd,
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown similarity `{kind}` (cosine | covariance | pearson | mmd)"
            )))
        }
    })
}

/// Per-row similarity of two equally shaped matrices.
#[pyfunction]
fn similarity_scores(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, kind: &str) -> PyResult<Vec<f64>> {
    mitp::memory_hub::similarity_values(&tensor(a)?, &tensor(b)?, row_similarity(kind)?).map_err(py_err)
}

/// One hub step with freshly initialized weights. Returns a dict with the
/// next prompts and the gates `z`, `r` of each modality.
#[pyfunction]
#[pyo3(signature = (p_v, p_t, similarity="cosine", hidden=None, seed=0))]
fn hub_step<'py>(
    py: Python<'py>,
    p_v: Vec<Vec<f64>>,
    p_t: Vec<Vec<f64>>,
    similarity: &str,
    hidden: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (pv, pt) = (tensor(p_v)?, tensor(p_t)?);
    let sim: SimilarityType = similarity.parse().map_err(py_err)?;
    let (d_v, d_t) = (pv.dims2().1, pt.dims2().1);
    let mut store = ParamStore::new();
    let h = hidden.unwrap_or_else(|| MemoryHub::default_hidden(d_v, d_t));
    let hub = MemoryHub::init(&mut Rng::new(seed).fork("memory_hub"), d_v, d_t, h, sim, &mut store);
    let mut g = Graph::new();
    let (v, t) = (g.constant(pv), g.constant(pt));
    let (tv, tt) = hub.hub_step_traced(&mut g, &store, v, t).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("p_v_next", g.value(tv.next).to_rows())?;
    out.set_item("p_t_next", g.value(tt.next).to_rows())?;
    out.set_item("z_v", g.value(tv.z).data().to_vec())?;
    out.set_item("r_v", g.value(tv.r).data().to_vec())?;
    out.set_item("z_t", g.value(tt.z).data().to_vec())?;
    out.set_item("r_t", g.value(tt.r).data().to_vec())?;
    Ok(out)
}

fn dataset_to_py<'py>(py: Python<'py>, d: &Dataset) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for ex in &d.examples {
        let item = PyDict::new(py);
        item.set_item("patches", ex.patches.to_rows())?;
        item.set_item("tokens", ex.tokens.clone())?;
        item.set_item("labels", ex.labels.clone())?;
        list.append(item)?;
    }
    Ok(list)
}

/// The config's synthetic splits as `{"train": [...], "val": [...], "test": [...]}`.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn generate_synthetic<'py>(py: Python<'py>, config: &PyRunConfig, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let DataSource::Synthetic(spec) = &config.inner.data else {
        return Err(PyValueError::new_err("config does not use synthetic data"));
    };
    let splits = generate(spec, seed.unwrap_or_else(|| config.inner.data_seed())).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("train", dataset_to_py(py, &splits.train)?)?;
    out.set_item("val", dataset_to_py(py, &splits.val)?)?;
    out.set_item("test", dataset_to_py(py, &splits.test)?)?;
    Ok(out)
}

/// Runs every finite-difference suite; returns one summary dict per suite.
#[pyfunction]
#[pyo3(signature = (tolerance=1e-4))]
fn gradcheck<'py>(py: Python<'py>, tolerance: f64) -> PyResult<Bound<'py, PyAny>> {
    let results = py.detach(move || harness::gradient_suites(tolerance)).map_err(py_err)?;
    to_py(py, &harness::summarize(&results))
}

#[pymodule]
#[pyo3(name = "mitp")]
fn mitp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(param_census, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_scores, m)?)?;
    m.add_function(wrap_pyfunction!(hub_step, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_names_map_to_kinds() {
        assert!(matches!(row_similarity("pearson"), Ok(RowSimilarity::Pearson)));
        assert!(matches!(row_similarity("mmd"), Ok(RowSimilarity::Mmd)));
    }

    #[test]
    fn config_errors_become_value_errors() {
        Python::initialize();
        Python::attach(|py| {
            let e = py_err(MitpError::Config("x".into()));
            assert!(e.is_instance_of::<PyValueError>(py));
            let e = py_err(MitpError::Data("y".into()));
            assert!(e.is_instance_of::<PyRuntimeError>(py));
        });
    }
}
