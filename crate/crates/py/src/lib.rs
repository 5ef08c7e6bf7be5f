//! Python bindings. Tensors cross the boundary as flat lists of floats plus
//! a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vimoe::analysis as an;
use vimoe::data::{self, GenConfig, Split};
use vimoe::model::{self, Task};
use vimoe::numerics::Tensor;
use vimoe::train;

fn err(e: vimoe::Error) -> PyErr {
    use vimoe::Error::*;
    match e {
        Format { .. } | Io(_) => PyIOError::new_err(e.to_string()),
        Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Shape { .. } | Contract(_) | Config(_) => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vimoe::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {name:?}"))),
    }
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// `ModelConfig("vit-tiny-lab", task="segmentation", num_experts="4", ...)`.
    #[new]
    #[pyo3(signature = (preset = "vit-tiny-lab", task = None, **overrides))]
    fn new(preset: &str, task: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = model::ModelConfig::preset(preset).py()?;
        if let Some(t) = task {
            c = c.with_task(t.parse::<Task>().py()?);
        }
        if let Some(kv) = overrides {
            for (k, v) in kv.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                if !c.set(&key, &value).py()? {
                    return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
                }
            }
        }
        c.validate().py()?;
        Ok(Self { inner: c })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.num_experts
    }

    #[getter]
    fn moe_last_l(&self) -> usize {
        self.inner.moe_last_l
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    /// `(total, activated)` parameter counts.
    fn count_params(&self) -> PyResult<(u64, u64)> {
        let r = model::count_params(&self.inner).py()?;
        Ok((r.total_params, r.activated_params))
    }

    #[pyo3(signature = (resolution = None))]
    fn count_flops(&self, resolution: Option<usize>) -> PyResult<u64> {
        Ok(model::count_flops(&self.inner, resolution.unwrap_or(self.inner.image_size)).py()?.flops)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.inner.to_kv().trim_end().replace('\n', ", "))
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (classes, count, seed = 0, split = "train"))]
    fn classification(classes: usize, count: usize, seed: u64, split: &str) -> PyResult<Self> {
        let d = data::gen_cluster_classification(classes, count, seed, self::split(split)?, &GenConfig::default()).py()?;
        Ok(Self { inner: d })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, count, seed = 0, split = "train"))]
    fn segmentation(classes: usize, count: usize, seed: u64, split: &str) -> PyResult<Self> {
        let d = data::gen_region_segmentation(classes, count, seed, self::split(split)?, &GenConfig::default()).py()?;
        Ok(Self { inner: d })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&path, &self.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task().to_string()
    }

    /// `(shape, values)` of image `i`, channels first.
    fn image(&self, i: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(i));
        }
        let t = self.inner.image(i);
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Class of image `i` (classification) or its pixel label map.
    fn label(&self, py: Python<'_>, i: usize) -> PyResult<Py<PyAny>> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(i));
        }
        match self.inner.class(i) {
            Some(c) => Ok(c.into_pyobject(py)?.into_any().unbind()),
            None => Ok(self.inner.label_map(i).unwrap_or(&[]).to_vec().into_pyobject(py)?.into_any().unbind()),
        }
    }

    fn hash(&self) -> u64 {
        self.inner.hash()
    }
}

#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: train::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut t = train::TrainConfig::default();
        if let Some(kv) = overrides {
            for (k, v) in kv.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string().to_lowercase();
                if !t.set(&key, &value).py()? {
                    return Err(PyValueError::new_err(format!("unknown training key {key:?}")));
                }
            }
        }
        t.validate().py()?;
        Ok(Self { inner: t })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }
}

#[pyclass(name = "RoutingLog")]
struct PyRoutingLog {
    inner: an::RoutingLog,
}

#[pymethods]
impl PyRoutingLog {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: an::load_log(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        an::save_log(&path, &self.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    /// MoE layers, 1 = deepest.
    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.moe_blocks.iter().rev().map(|&b| self.inner.ell_of_block(b as usize)).collect()
    }

    /// Display-ordered heatmap of layer `layer`, plus its row and column
    /// orders and specialization score.
    fn heatmap<'py>(&self, py: Python<'py>, layer: usize) -> PyResult<Bound<'py, PyDict>> {
        let b = self.inner.block_of_ell(layer).py()?;
        let h = an::build_heatmap(&self.inner, b).py()?;
        let d = PyDict::new(py);
        d.set_item("matrix", h.display())?;
        d.set_item("rows", h.row_order.clone())?;
        d.set_item("cols", h.col_order.clone())?;
        d.set_item("score", an::specialization_score(&h).py()?)?;
        d.set_item("csv", h.to_csv())?;
        Ok(d)
    }

    fn expert_load(&self, layer: usize) -> PyResult<Vec<f64>> {
        let b = self.inner.block_of_ell(layer).py()?;
        an::expert_load(&self.inner, b).py()
    }

    /// `(keep, degree, low_degree, suggested_experts)`.
    #[pyo3(signature = (tau = an::DEFAULT_TAU))]
    fn recommend(&self, tau: f64) -> PyResult<(usize, u128, bool, Option<usize>)> {
        let (_, r) = an::layer_reports(&self.inner, tau).py()?;
        Ok((r.keep, r.degree, r.low_degree, r.suggested_experts))
    }

    fn empirical_degree(&self) -> PyResult<usize> {
        an::empirical_degree(&self.inner, &[]).py()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: model::ViMoE,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: model::ViMoE::build(&config.inner, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&path, &self.inner).py()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_params(&self) -> usize {
        self.inner.store.num_elements()
    }

    /// Logits (flat, row-major) and the top-1 expert of every routing unit
    /// per MoE block.
    fn predict(&self, shape: Vec<usize>, values: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<usize>>)> {
        let image = Tensor::new(shape, values).py()?;
        let p = self.inner.predict(&image).py()?;
        let top1 = p.routing.iter().map(|l| l.iter().map(|d| d.selected[0]).collect()).collect();
        Ok((p.logits.data().to_vec(), top1))
    }

    /// Trains in place and returns one dict per completed epoch.
    #[pyo3(signature = (data, config, eval = None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: &PyDataset,
        config: &PyTrainConfig,
        eval: Option<PyRef<'_, PyDataset>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let run = train::train(&mut self.inner, &data.inner, eval.as_ref().map(|e| &e.inner), &config.inner).py()?;
        if let Some(e) = run.failure {
            return Err(err(e));
        }
        run.record
            .epochs
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("task_loss", e.task_loss)?;
                d.set_item("aux_loss", e.aux_loss)?;
                d.set_item("metric", e.metric)?;
                d.set_item("expert_load", e.expert_load.clone())?;
                Ok(d)
            })
            .collect()
    }

    /// `(metric, routing_log)`.
    fn evaluate(&self, data: &PyDataset) -> PyResult<(f64, PyRoutingLog)> {
        let ev = train::evaluate(&self.inner, &data.inner).py()?;
        Ok((ev.metric, PyRoutingLog { inner: ev.log }))
    }
}

/// `C(n, k)^layers`.
#[pyfunction]
fn routing_degree(experts: usize, top_k: usize, layers: usize) -> PyResult<u128> {
    model::routing_degree(experts, top_k, layers).py()
}

/// Load-balancing loss from per-expert top-1 counts and probability sums.
#[pyfunction]
fn load_balance_loss(counts: Vec<u64>, prob_sums: Vec<f64>, tokens: u64, alpha: f64) -> PyResult<f64> {
    vimoe::moe::load_balance_value(&counts, &prob_sums, tokens, alpha).py()
}

#[pymodule]
#[pyo3(name = "vimoe")]
fn vimoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRoutingLog>()?;
    m.add_function(wrap_pyfunction!(routing_degree, m)?)?;
    m.add_function(wrap_pyfunction!(load_balance_loss, m)?)?;
    Ok(())
}
