use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ufps_core::federation::{self, RunConfig};
use ufps_core::labels::{LabelMap, Provenance};
use ufps_core::metrics;
use ufps_core::model::{self, ParamVector, PixelGrid};
use ufps_core::pseudolabel::{self, TeacherSet};
use ufps_core::report::{evaluate_client, MetricRow};
use ufps_core::susam;
use ufps_core::synthdata::{self, Benchmark, ClientDataset, SplitSizes, NUM_FOREGROUND};
use ufps_core::UfpsError;

fn to_py(e: UfpsError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Run configuration; every field is reachable through JSON.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, optionally overridden by a (partial) JSON document.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(s) => RunConfig::from_json_str(s).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with every round boundary scaled to `rounds` total.
    fn rescaled(&self, rounds: usize) -> PyResult<Self> {
        let inner = self.inner.rescaled(rounds);
        inner.validate().map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    /// Copy with every module except pseudo labels switched off.
    fn fedavg_star(&self) -> Self {
        PyRunConfig {
            inner: self.inner.fedavg_star(),
        }
    }

    /// Copy with the dotted `key` set to `value` (JSON text or a bare string).
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        let inner = ufps_core::cli::override_key(&self.inner, key, value).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(rounds={}, seed={}, hash={})",
            self.inner.rounds,
            self.inner.seed,
            &self.inner.hash()[..12]
        )
    }
}

/// One client split: images and labels as flat row-major lists.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: ClientDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn client_id(&self) -> usize {
        self.inner.client_id
    }

    #[getter]
    fn annotated(&self) -> Vec<u8> {
        self.inner.annotated.iter().collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        let img = &self.inner.samples[0].image;
        (img.height(), img.width())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        self.sample(index).map(|s| s.image.intensities().to_vec())
    }

    /// True classes of every pixel, including withheld ones.
    fn labels(&self, index: usize) -> PyResult<Vec<u8>> {
        self.sample(index).map(|s| s.labels.classes().to_vec())
    }

    /// 1 where the label is annotated (or pseudo), 0 where it is withheld.
    fn known(&self, index: usize) -> PyResult<Vec<u8>> {
        self.sample(index).map(|s| {
            s.labels
                .provenance()
                .iter()
                .map(|&p| u8::from(p != Provenance::Unknown))
                .collect()
        })
    }
}

impl PyDataset {
    fn sample(&self, index: usize) -> PyResult<&synthdata::Sample> {
        self.inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample {index} out of range")))
    }
}

/// Synthetic benchmark: in-federation clients plus one held-out client.
#[pyclass(name = "Benchmark")]
struct PyBenchmark {
    inner: Benchmark,
}

#[pymethods]
impl PyBenchmark {
    #[new]
    #[pyo3(signature = (seed=0, train=40, val=8, test=16))]
    fn new(seed: u64, train: usize, val: usize, test: usize) -> PyResult<Self> {
        let inner = synthdata::benchmark_with(seed, SplitSizes { train, val, test }).map_err(to_py)?;
        Ok(PyBenchmark { inner })
    }

    /// Number of in-federation clients.
    #[getter]
    fn num_clients(&self) -> usize {
        self.inner.clients.len()
    }

    /// Split `split` ("train", "val" or "test") of `client`; the held-out
    /// client has the last id.
    fn split(&self, client: usize, split: &str) -> PyResult<PyDataset> {
        let c = self
            .inner
            .all_clients()
            .find(|c| c.spec.client_id == client)
            .ok_or_else(|| PyValueError::new_err(format!("no client {client}")))?;
        let d = match split {
            "train" => &c.train,
            "val" => &c.val,
            "test" => &c.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        Ok(PyDataset { inner: d.clone() })
    }
}

fn grid(values: Vec<f64>, width: usize, height: usize) -> PyResult<PixelGrid> {
    PixelGrid::new(width, height, values).map_err(to_py)
}

/// Model parameters with the layout they belong to.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: ParamVector,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn params(&self) -> Vec<f64> {
        self.params.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.params.len()
    }

    /// Per-pixel class prediction of a flat row-major image.
    fn predict(&self, image: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<u8>> {
        model::predict(&self.params, &grid(image, width, height)?).map_err(to_py)
    }

    /// Per-pixel class probabilities, pixel-major.
    fn probabilities(&self, image: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<f64>> {
        let probs = model::forward(&self.params, &grid(image, width, height)?).map_err(to_py)?;
        Ok(probs.data().to_vec())
    }
}

#[pyclass(name = "Teachers")]
struct PyTeachers {
    inner: TeacherSet,
}

#[pymethods]
impl PyTeachers {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn owned(&self) -> Vec<Vec<u8>> {
        self.inner
            .teachers()
            .iter()
            .map(|t| t.owned.iter().collect())
            .collect()
    }

    /// Merged teacher pseudo label of a flat row-major image.
    fn pseudo_label(&self, image: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<u8>> {
        let out = pseudolabel::run_teachers(&self.inner, &grid(image, width, height)?)
            .map_err(to_py)?;
        Ok(out.merged.classes().to_vec())
    }
}

/// Result of a federated run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    best_round: usize,
    #[pyo3(get)]
    config_hash: String,
    /// `(round, mean validation Dice)` per validated round.
    #[pyo3(get)]
    history: Vec<(usize, f64)>,
    best: ParamVector,
    last: ParamVector,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn best_model(&self) -> PyModel {
        PyModel {
            params: self.best.clone(),
        }
    }

    #[getter]
    fn final_model(&self) -> PyModel {
        PyModel {
            params: self.last.clone(),
        }
    }
}

#[pyfunction]
fn pretrain_teachers(py: Python<'_>, config: &PyRunConfig, bench: &PyBenchmark) -> PyResult<PyTeachers> {
    let train: Vec<&ClientDataset> = bench.inner.clients.iter().map(|c| &c.train).collect();
    let inner = py
        .detach(|| federation::pretrain_teachers(&train, &config.inner))
        .map_err(to_py)?;
    Ok(PyTeachers { inner })
}

#[pyfunction]
#[pyo3(signature = (config, bench, teachers=None))]
fn train(
    py: Python<'_>,
    config: &PyRunConfig,
    bench: &PyBenchmark,
    teachers: Option<&PyTeachers>,
) -> PyResult<PyRunResult> {
    let train: Vec<&ClientDataset> = bench.inner.clients.iter().map(|c| &c.train).collect();
    let val: Vec<&ClientDataset> = bench.inner.clients.iter().map(|c| &c.val).collect();
    let art = py
        .detach(|| federation::run(&config.inner, &train, &val, teachers.map(|t| &t.inner)))
        .map_err(to_py)?;
    Ok(PyRunResult {
        best_round: art.best_round,
        config_hash: art.config_hash,
        history: art
            .history
            .iter()
            .map(|r| (r.round, r.mean_val_dice()))
            .collect(),
        best: art.best_global,
        last: art.final_global,
    })
}

fn row_dict<'py>(py: Python<'py>, r: &MetricRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("run", &r.run)?;
    d.set_item("round", r.round)?;
    d.set_item("client", r.client)?;
    d.set_item("class", r.class)?;
    d.set_item("dice", r.dice)?;
    d.set_item("hd", r.hd)?;
    d.set_item("jc", r.jc)?;
    d.set_item("sen", r.sen)?;
    d.set_item("spe", r.spe)?;
    d.set_item("rve", r.rve)?;
    Ok(d)
}

/// Metric rows of `model` on every client's test split.
#[pyfunction]
#[pyo3(signature = (model, bench, run="run", post=false))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    bench: &PyBenchmark,
    run: &str,
    post: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let classes: Vec<u8> = (1..=NUM_FOREGROUND as u8).collect();
    let mut rows = Vec::new();
    for c in bench.inner.all_clients() {
        rows.extend(
            evaluate_client(run, 0, c.spec.client_id, &c.test.samples, &classes, post, |img| {
                let pred = model::predict(&model.params, img)?;
                LabelMap::uniform(img.width(), img.height(), pred, Provenance::Pseudo)
            })
            .map_err(to_py)?,
        );
    }
    rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pyfunction]
fn proportional_weights(counts: Vec<usize>) -> PyResult<Vec<f64>> {
    federation::proportional_weights(&counts).map_err(to_py)
}

#[pyfunction]
fn ua_weights(
    mu: Vec<f64>,
    var: Vec<f64>,
    proportional: Vec<f64>,
    tau_mu: f64,
    tau_var: f64,
) -> PyResult<Vec<f64>> {
    federation::ua_weights(&mu, &var, &proportional, tau_mu, tau_var).map_err(to_py)
}

/// Indices kept by the top-k magnitude mask.
#[pyfunction]
fn topk_mask(gradient: Vec<f64>, fraction: f64) -> Vec<usize> {
    susam::topk_mask(&gradient, fraction).indices().collect()
}

#[pyfunction]
fn hausdorff(a: Vec<(usize, usize)>, b: Vec<(usize, usize)>, diagonal: f64) -> f64 {
    metrics::hausdorff(&a, &b, diagonal)
}

/// Dice of `class` between two flat label lists.
#[pyfunction]
fn dice(pred: Vec<u8>, truth: Vec<u8>, class: u8) -> PyResult<f64> {
    if pred.len() != truth.len() {
        return Err(PyValueError::new_err("label lists differ in length"));
    }
    Ok(metrics::dice(&metrics::confusion_classes(&pred, &truth, class)))
}

#[pymodule]
fn ufps(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTeachers>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(pretrain_teachers, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(proportional_weights, m)?)?;
    m.add_function(wrap_pyfunction!(ua_weights, m)?)?;
    m.add_function(wrap_pyfunction!(topk_mask, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    Ok(())
}
