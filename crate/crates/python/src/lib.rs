//! Python bindings: dataset generation and I/O, training, evaluation and
//! attention dumps.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use attrformer::data::Split;
use attrformer::numeric::Matrix;
use attrformer::train::{dump_attention, evaluate_setting, localization_accuracy, EpochLog, Setting};

fn py_err(e: attrformer::Error) -> PyErr {
    match e {
        attrformer::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[pyclass(name = "Dataset", module = "attrformer_py")]
struct PyDataset {
    inner: attrformer::ZslDataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a synthetic dataset; `spec_json` overrides generator defaults.
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn synthetic(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: attrformer::SyntheticSpec = parse_json(spec_json)?;
        Ok(Self {
            inner: attrformer::generate_synthetic(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: attrformer::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        attrformer::save_dataset(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn num_attributes(&self) -> usize {
        self.inner.num_attributes()
    }

    #[getter]
    fn seen_classes(&self) -> Vec<usize> {
        self.inner.classes.seen_ids().to_vec()
    }

    #[getter]
    fn unseen_classes(&self) -> Vec<usize> {
        self.inner.classes.unseen_ids().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.test_seen.len() + self.inner.test_unseen.len()
    }

    /// Number of images in `train`, `test_seen` or `test_unseen`.
    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(parse_split(split)?).len())
    }

    /// `(features, label)` of one image; features are `HW` rows of `D_in`.
    fn example(&self, split: &str, index: usize) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let examples = self.inner.split(parse_split(split)?);
        let e = examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range (len {})", examples.len())))?;
        Ok((rows(&e.features), e.label))
    }
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test_seen" => Ok(Split::TestSeen),
        "test_unseen" => Ok(Split::TestUnseen),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

#[pyclass(name = "Model", module = "attrformer_py")]
struct PyModel {
    inner: attrformer::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: attrformer::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Attribute scores for one image.
    fn psi(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let m = Matrix::from_rows(&features).map_err(py_err)?;
        self.inner.psi(&m).map_err(py_err)
    }

    /// Test metrics keyed `acc`, `U`, `S`, `H` (percent).
    #[pyo3(signature = (dataset, setting="both"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, setting: &str) -> PyResult<Bound<'py, PyDict>> {
        let setting = Setting::parse(setting).map_err(py_err)?;
        let m = evaluate_setting(&self.inner, &dataset.inner, setting).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("acc", m.acc)?;
        d.set_item("U", m.u)?;
        d.set_item("S", m.s)?;
        d.set_item("H", m.h)?;
        Ok(d)
    }

    /// Fraction of active attributes whose attention peaks at the planted cell.
    fn localization(&self, dataset: &PyDataset) -> PyResult<f64> {
        localization_accuracy(&self.inner, &dataset.inner).map_err(py_err)
    }

    /// Writes attention maps and returns how many images were dumped.
    #[pyo3(signature = (dataset, out_dir, limit=None))]
    fn dump_attention(&self, dataset: &PyDataset, out_dir: PathBuf, limit: Option<usize>) -> PyResult<usize> {
        Ok(dump_attention(&self.inner, &dataset.inner, &out_dir, limit)
            .map_err(py_err)?
            .len())
    }

    /// The run configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

fn log_dict<'py>(py: Python<'py>, l: &EpochLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", l.epoch)?;
    d.set_item("loss_total", l.loss_total)?;
    d.set_item("loss_ace", l.loss_ace)?;
    d.set_item("loss_ar", l.loss_ar)?;
    d.set_item("loss_sc", l.loss_sc)?;
    d.set_item("acc", l.acc)?;
    d.set_item("U", l.u)?;
    d.set_item("S", l.s)?;
    d.set_item("H", l.h)?;
    Ok(d)
}

/// Trains on `dataset`; `config_json` overrides run defaults. Returns the
/// model and one log dict per epoch.
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config_json: Option<&str>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg: attrformer::RunConfig = parse_json(config_json)?;
    let (model, logs) = py
        .detach(|| attrformer::train(&dataset.inner, &cfg))
        .map_err(py_err)?;
    let logs = logs.iter().map(|l| log_dict(py, l)).collect::<PyResult<_>>()?;
    Ok((PyModel { inner: model }, logs))
}

#[pyfunction]
fn harmonic_mean(u: f64, s: f64) -> f64 {
    attrformer::harmonic_mean(u, s)
}

#[pymodule]
fn attrformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    Ok(())
}
