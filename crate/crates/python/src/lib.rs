//! Python bindings: frozen encoders, the embedding queue, InfoNCE,
//! few-shot heads and episodes, diversity statistics and the shape generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use soi_core::contrastive::{encoder_from_checkpoint, info_nce as core_info_nce, EmbeddingQueue};
use soi_core::data::Checkpoint;
use soi_core::diversity::{image_statistics as core_image_statistics, quantize, Histogram256};
use soi_core::fewshot::{fit_classifier, sample_episode as core_sample_episode, ClassIndex, ClassifierKind, FitSettings, Protocol};
use soi_core::synth::{render_shape as core_render_shape, ShapeStyle};
use soi_core::tensor::Tensor;
use soi_core::verify::gradient_suite;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image_tensor(data: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor> {
    Tensor::new([3, height, width], data).map_err(value_err)
}

/// A frozen encoder loaded from an `encoder` or `trainer` checkpoint.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: soi_core::nn::Encoder,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: encoder_from_checkpoint(&ckpt).map_err(value_err)? })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.config().input_size;
        (c, h, w)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Embeds flattened `[3, H, W]` images at the encoder's input size.
    fn embed(&self, images: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, h, w) = self.input_size();
        let tensors = images.into_iter().map(|d| image_tensor(d, h, w)).collect::<PyResult<Vec<_>>>()?;
        soi_core::fewshot::embed(&self.inner, &tensors).map_err(value_err)
    }
}

/// Fixed-capacity FIFO of unit-norm embeddings.
#[pyclass(name = "EmbeddingQueue")]
struct PyQueue {
    inner: EmbeddingQueue<f32>,
}

#[pymethods]
impl PyQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: EmbeddingQueue::new(capacity, dim).map_err(value_err)? })
    }

    fn enqueue(&mut self, embedding: Vec<f32>) -> PyResult<()> {
        self.inner.enqueue(&embedding).map_err(value_err)
    }

    /// Contents, oldest first.
    fn entries(&self) -> Vec<Vec<f32>> {
        self.inner.iter().map(<[f32]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }
}

/// InfoNCE of one query against its positive and a list of negatives.
#[pyfunction]
#[pyo3(signature = (query, positive, negatives, tau, exclusive = false))]
fn info_nce(query: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64, exclusive: bool) -> PyResult<f64> {
    let refs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    core_info_nce(&query, &positive, &refs, tau, exclusive).map_err(value_err)
}

/// Fits a few-shot head (`LR`, `SVM`, `NN`, `Cosine`, `Proto`) and predicts queries.
#[pyfunction]
#[pyo3(signature = (kind, support, labels, queries, reg = 1.0))]
fn fit_predict(kind: &str, support: Vec<Vec<f64>>, labels: Vec<usize>, queries: Vec<Vec<f64>>, reg: f64) -> PyResult<Vec<usize>> {
    let kind: ClassifierKind = kind.parse().map_err(PyValueError::new_err)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let settings = FitSettings { reg, ..FitSettings::default() };
    let clf = fit_classifier(&support, &labels, classes, kind, &settings).map_err(value_err)?;
    clf.predict(&queries).map_err(value_err)
}

/// Samples an episode over item `labels`; returns `(classes, support, query)`
/// with `(item index, local label)` pairs.
#[pyfunction]
fn sample_episode(labels: Vec<usize>, n_way: usize, k_shot: usize, q_query: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let ep = core_sample_episode(&ClassIndex::new(&labels), Protocol { n_way, k_shot, q_query }, seed).map_err(value_err)?;
    Ok((ep.classes, ep.support, ep.query))
}

/// `[HSV_H, HSV_S, HSV_V, Median, Mean, SD]` of a flattened `[3, H, W]` image, on a 0-255 scale.
#[pyfunction]
fn image_statistics(image: Vec<f32>, height: usize, width: usize) -> PyResult<[f64; 6]> {
    core_image_statistics(&image_tensor(image, height, width)?).map_err(value_err)
}

/// Shannon entropy in bits of the 256-bin histogram of `values` on a 0-255 scale.
#[pyfunction]
fn entropy(values: Vec<f64>) -> f64 {
    let mut h = Histogram256::default();
    for v in values {
        h.add(quantize(v));
    }
    h.entropy()
}

/// One procedural shape image, flattened `[3, size, size]`.
#[pyfunction]
#[pyo3(signature = (class_id, size = 32, seed = 0, style = "colored-texture"))]
fn render_shape(class_id: usize, size: usize, seed: u64, style: &str) -> PyResult<Vec<f32>> {
    if class_id >= soi_core::synth::SHAPE_CLASSES.len() {
        return Err(PyValueError::new_err(format!("class_id must be below {}", soi_core::synth::SHAPE_CLASSES.len())));
    }
    let style: ShapeStyle = style.parse().map_err(PyValueError::new_err)?;
    Ok(core_render_shape(class_id, style, size, seed).into_data())
}

/// Runs the double-precision gradient checks; returns `(name, max relative error)`.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64)>> {
    Ok(gradient_suite().map_err(value_err)?.into_iter().map(|c| (c.name, c.max_rel_error)).collect())
}

#[pymodule]
fn soi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyQueue>()?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(fit_predict, m)?)?;
    m.add_function(wrap_pyfunction!(sample_episode, m)?)?;
    m.add_function(wrap_pyfunction!(image_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(render_shape, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
