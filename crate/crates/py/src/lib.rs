//! Python bindings: angle algebra, synthetic datasets, models, training,
//! evaluation and KITTI scoring.

use std::collections::HashMap;
use std::fmt::Display;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use semicircle_core::angle;
use semicircle_core::eval::{self, EvalReport};
use semicircle_core::kitti::{self, DifficultyFilter};
use semicircle_core::nn::{Checkpoint, Model as CoreModel, ModelSpec};
use semicircle_core::synth::{self, Dataset as CoreDataset, GeneratorSpec, Image};
use semicircle_core::train::{self, RunConfig};
use semicircle_core::Orientation;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// I/O failures become `OSError`, everything else `ValueError`.
fn core_err<E: std::error::Error + 'static>(e: E) -> PyErr {
    let mut source: Option<&dyn std::error::Error> = Some(&e);
    while let Some(s) = source {
        if s.is::<std::io::Error>() {
            return PyIOError::new_err(e.to_string());
        }
        source = s.source();
    }
    value_err(e)
}

fn orientation(theta: f64) -> PyResult<Orientation> {
    Orientation::new(theta).map_err(value_err)
}

/// Wraps an angle into (-π, π].
#[pyfunction]
fn wrap(angle: f64) -> PyResult<f64> {
    Ok(orientation(angle)?.radians())
}

/// `(epsilon, class_index, folded, cos_target)` of an orientation.
#[pyfunction]
fn decompose(theta: f64) -> PyResult<(u8, u8, f64, f64)> {
    let d = angle::decompose(orientation(theta)?);
    Ok((d.epsilon, d.class_index, d.folded, d.cos_target))
}

#[pyfunction]
fn reconstruct(class_index: u8, folded: f64) -> PyResult<f64> {
    Ok(angle::reconstruct(class_index, folded).map_err(value_err)?.radians())
}

#[pyfunction]
fn mirror(theta: f64) -> PyResult<f64> {
    Ok(angle::mirror(orientation(theta)?).radians())
}

#[pyfunction]
fn angular_error(predicted: f64, truth: f64) -> PyResult<f64> {
    Ok(angle::angular_error(orientation(predicted)?, orientation(truth)?).delta())
}

/// `(1 + cos Δ) / 2` for the wrapped difference of two orientations.
#[pyfunction]
fn orientation_similarity(predicted: f64, truth: f64) -> PyResult<f64> {
    Ok(angle::orientation_similarity(angle::angular_error(orientation(predicted)?, orientation(truth)?)))
}

/// Synthetic oriented-object images with their orientations.
#[pyclass(module = "semicircle", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (count = 1000, kappa = 0.5, noise = 0.05, seed = 7, side = 32))]
    fn generate(count: usize, kappa: f64, noise: f64, seed: u64, side: usize) -> PyResult<Self> {
        let spec = GeneratorSpec {
            image_side: side,
            count,
            asymmetry_kappa: kappa,
            noise_sigma: noise,
            seed,
            ..GeneratorSpec::default()
        };
        Ok(Self {
            inner: synth::generate(&spec).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: synth::load(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        synth::save(&self.inner, path).map_err(core_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.image_side()
    }

    fn thetas(&self) -> Vec<f64> {
        self.inner.samples.iter().map(|s| s.theta.radians()).collect()
    }

    /// Row-major pixels of sample `index`.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(index)
            .map(|s| s.image.pixels().to_vec())
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} out of range")))
    }

    fn label_balance(&self) -> f64 {
        self.inner.label_balance()
    }

    /// Mirrored copy of every sample appended after the originals.
    fn flip_augment(&self) -> Self {
        Self {
            inner: synth::flip_augment(&self.inner),
        }
    }
}

/// Orientation model with a semicircle classifier and a folded-cosine
/// regressor.
#[pyclass(module = "semicircle", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (side = 32, seed = 0))]
    fn new(side: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::new(ModelSpec::desk(side), seed).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(core_err)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.inner.clone()).save(path).map_err(core_err)
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.input_side()
    }

    /// `(theta, class_index)` for one image given as row-major pixels.
    fn predict(&self, pixels: Vec<f32>) -> PyResult<(f64, u8)> {
        let image = Image::new(self.inner.input_side(), pixels).map_err(value_err)?;
        let p = self.inner.predict_orientation(&image).map_err(core_err)?;
        Ok((p.orientation.radians(), p.class_index))
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &eval::evaluate(&self.inner, &dataset.inner).map_err(core_err)?)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sample_count", r.sample_count)?;
    d.set_item("semicircle_accuracy", r.semicircle_accuracy)?;
    d.set_item("mean_abs_angular_error", r.mean_abs_angular_error)?;
    d.set_item("mean_sq_angular_error", r.mean_sq_angular_error)?;
    d.set_item("confusion_mass", r.confusion_mass)?;
    d.set_item("orientation_score", r.orientation_score)?;
    let h = PyDict::new(py);
    h.set_item("bin_edges", r.histogram.bin_edges.clone())?;
    h.set_item("mean_sq_error", r.histogram.mean_sq_error.clone())?;
    h.set_item("counts", r.histogram.counts.clone())?;
    d.set_item("histogram", h)?;
    Ok(d)
}

/// Trains a model; `overrides` takes configuration keys such as
/// `stage1.iters` or `seed`. Returns the model and the training log as CSV.
#[pyfunction]
#[pyo3(signature = (dataset, mode = "supervised", scale = "desk", overrides = None))]
fn train_model(
    dataset: &Dataset,
    mode: &str,
    scale: &str,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<(Model, String)> {
    let mut text = format!("mode = {mode}\nscale = {scale}\n");
    let mut keys: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    keys.sort();
    for (k, v) in keys {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let mut config = RunConfig::from_kv(&text).map_err(core_err)?;
    config.image_side = dataset.inner.image_side();
    let outcome = train::run(&config, &dataset.inner).map_err(core_err)?;
    Ok((Model { inner: outcome.model }, outcome.log.to_csv()))
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    model.evaluate(py, dataset)
}

/// Average Orientation Similarity of KITTI prediction files against ground
/// truth, both given as directories of `<image id>.txt` label files.
#[pyfunction]
#[pyo3(signature = (gt_dir, pred_dir, class_name = "Car", difficulty = "moderate", iou = 0.7))]
fn kitti_aos(gt_dir: &str, pred_dir: &str, class_name: &str, difficulty: &str, iou: f64) -> PyResult<f64> {
    let filter = match difficulty {
        "easy" => DifficultyFilter::EASY,
        "moderate" => DifficultyFilter::MODERATE,
        "hard" => DifficultyFilter::HARD,
        other => return Err(value_err(format!("unknown difficulty `{other}`; valid: easy, moderate, hard"))),
    };
    let gt = kitti::load_label_dir(gt_dir)
        .map_err(core_err)?
        .into_iter()
        .map(|(id, r)| (id, kitti::filter_difficulty(&r, &filter)))
        .collect();
    let pred = kitti::load_label_dir(pred_dir)
        .map_err(core_err)?
        .into_iter()
        .map(|(id, mut r)| {
            r.retain(|x| x.height() >= filter.min_box_height);
            (id, r)
        })
        .collect();
    let input = kitti::to_aos_input(&gt, &pred, class_name).map_err(core_err)?;
    eval::aos(&input, iou, 11).map_err(core_err)
}

#[pymodule]
fn semicircle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(wrap, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(mirror, m)?)?;
    m.add_function(wrap_pyfunction!(angular_error, m)?)?;
    m.add_function(wrap_pyfunction!(orientation_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(kitti_aos, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
