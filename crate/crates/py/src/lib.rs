//! Python module `sanlab_py`: partition schemes, synthetic data, training,
//! detection and the analysis measures, over plain Python values.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use sanlab::analysis::{self, CamMatrix};
use sanlab::detector::{DetectOptions, Detection};
use sanlab::synth::{self, Annotation, DatasetConfig};
use sanlab::train::{self, SanMode, TrainingConfig};
use sanlab::{checkpoint, Tensor};

fn py_err(e: sanlab::Error) -> PyErr {
    match e {
        sanlab::Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "RoI", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyRoI(sanlab::RoI);

#[pymethods]
impl PyRoI {
    #[new]
    #[pyo3(signature = (x1, y1, x2, y2, image_id = 0))]
    fn new(x1: f32, y1: f32, x2: f32, y2: f32, image_id: usize) -> PyResult<Self> {
        sanlab::RoI::new(x1, y1, x2, y2, image_id).map(Self).map_err(py_err)
    }

    #[getter]
    fn coords(&self) -> (f32, f32, f32, f32) {
        (self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }

    #[getter]
    fn image_id(&self) -> usize {
        self.0.image_id
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyRoI) -> f64 {
        self.0.iou(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("RoI({}, {}, {}, {}, image_id={})", self.0.x1, self.0.y1, self.0.x2, self.0.y2, self.0.image_id)
    }
}

#[pyclass(name = "ScalePartitionScheme", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyScheme(sanlab::ScalePartitionScheme);

#[pymethods]
impl PyScheme {
    /// `boundaries` are areas in pixels², strictly increasing.
    #[new]
    fn new(ref_scale: usize, boundaries: Vec<f64>) -> PyResult<Self> {
        sanlab::ScalePartitionScheme::new(ref_scale, boundaries).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn voc() -> Self {
        Self(sanlab::ScalePartitionScheme::voc())
    }

    #[staticmethod]
    fn coco() -> Self {
        Self(sanlab::ScalePartitionScheme::coco())
    }

    #[staticmethod]
    fn toy() -> Self {
        Self(sanlab::ScalePartitionScheme::toy())
    }

    #[getter]
    fn ref_scale(&self) -> usize {
        self.0.ref_scale
    }

    #[getter]
    fn boundaries(&self) -> Vec<f64> {
        self.0.boundaries.clone()
    }

    fn num_partitions(&self) -> usize {
        self.0.num_partitions()
    }

    fn index_for_area(&self, area: f64) -> usize {
        self.0.index_for_area(area)
    }

    fn partition(&self, roi: &PyRoI) -> usize {
        sanlab::partition_index(&roi.0, &self.0)
    }
}

/// One synthetic image: `pixels` is a flat channel-major list of
/// `3 × height × width` floats in `[0, 1]`.
#[pyclass(name = "Sample", frozen)]
pub struct PySample(synth::Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn image_id(&self) -> usize {
        self.0.image.id
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (3, self.0.image.height(), self.0.image.width())
    }

    #[getter]
    fn pixels(&self) -> Vec<f32> {
        self.0.image.pixels.data().to_vec()
    }

    /// `(class_id, RoI)` pairs.
    #[getter]
    fn annotations(&self) -> Vec<(usize, PyRoI)> {
        self.0.annotations.iter().map(|a| (a.class_id, PyRoI(a.roi))).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (num_images, seed = 0, image_size = 96, num_classes = 3, first_id = 0))]
fn generate_dataset(
    num_images: usize,
    seed: u64,
    image_size: usize,
    num_classes: usize,
    first_id: usize,
) -> PyResult<Vec<PySample>> {
    let cfg = DatasetConfig {
        num_images,
        seed,
        image_size,
        num_classes,
        first_id,
        ..DatasetConfig::default()
    };
    let samples = synth::generate_dataset(&cfg).map_err(py_err)?;
    Ok(samples.into_iter().map(PySample).collect())
}

#[pyclass(name = "Detector", frozen)]
pub struct PyDetector(sanlab::detector::Detector);

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        checkpoint::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.0).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn has_san(&self) -> bool {
        self.0.san.is_some()
    }

    /// Detections on a sample for the given proposals, as
    /// `(class_id, score, RoI)` tuples.
    fn detect(&self, sample: &PySample, proposals: Vec<PyRoI>) -> PyResult<Vec<(usize, f32, PyRoI)>> {
        let props: Vec<sanlab::RoI> = proposals.iter().map(|r| r.0).collect();
        let dets = self
            .0
            .detect(&sample.0.image, &props, &DetectOptions::default())
            .map_err(py_err)?;
        Ok(dets.into_iter().map(|d| (d.class_id, d.score, PyRoI(d.roi))).collect())
    }

    /// `(mAP, per-class AP)` on a list of samples, with the built-in
    /// proposal generator seeded by `seed`.
    #[pyo3(signature = (samples, seed = 0))]
    fn evaluate(&self, samples: Vec<Bound<'_, PySample>>, seed: u64) -> PyResult<(f64, Vec<Option<f64>>)> {
        let owned: Vec<synth::Sample> = samples.iter().map(|s| s.get().0.clone()).collect();
        let rep = analysis::evaluate_model(&self.0, &owned, seed, &DetectOptions::default()).map_err(py_err)?;
        Ok((rep.map, rep.per_class))
    }
}

/// Trains a detector; returns it with the per-step `(l_cls, l_reg, l_san)`
/// log.
#[pyfunction]
#[pyo3(signature = (samples, iterations = 2000, san = "full", seed = 0, base_lr = 0.02))]
fn train_detector(
    py: Python<'_>,
    samples: Vec<Bound<'_, PySample>>,
    iterations: usize,
    san: &str,
    seed: u64,
    base_lr: f64,
) -> PyResult<(PyDetector, Vec<(f64, f64, f64)>)> {
    let owned: Vec<synth::Sample> = samples.iter().map(|s| s.get().0.clone()).collect();
    let mode: SanMode = san.parse().map_err(py_err)?;
    let cfg = TrainingConfig {
        iterations,
        lr_decay_step: (iterations * 3 / 4).max(1),
        san: mode,
        seed,
        base_lr,
        ..TrainingConfig::default()
    };
    let out = py.detach(|| train::train(&owned, &cfg, |_| {})).map_err(py_err)?;
    let log = out.log.iter().map(|r| (r.l_cls, r.l_reg, r.l_san)).collect();
    Ok((PyDetector(out.model), log))
}

/// Channel activation matrix: `(channel_ids, values[row][col])`.
#[pyfunction]
#[pyo3(signature = (vectors, k = 10))]
fn compute_cam(vectors: Vec<(usize, Vec<f64>)>, k: usize) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let cam = analysis::compute_cam(&vectors, k).map_err(py_err)?;
    Ok((cam.channel_ids, cam.values))
}

#[pyfunction]
#[pyo3(signature = (vectors, k = 10))]
fn cam_stability(vectors: Vec<(usize, Vec<f64>)>, k: usize) -> PyResult<f64> {
    let cam: CamMatrix = analysis::compute_cam(&vectors, k).map_err(py_err)?;
    analysis::cam_stability(&cam, k).map_err(py_err)
}

#[pyfunction]
fn rmse_without_san(z_s: Vec<f64>, z_s0: Vec<f64>) -> PyResult<f64> {
    let t = |v: Vec<f64>| Tensor::new(vec![1, v.len(), 1, 1], v).map_err(py_err);
    analysis::rmse_without_san(&t(z_s)?, &t(z_s0)?).map_err(py_err)
}

/// `(mAP, per-class AP)` for `(class_id, score, RoI)` detections against
/// `(class_id, RoI)` ground truths.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, num_classes, iou_thresh = 0.5))]
fn evaluate_ap(
    detections: Vec<(usize, f32, PyRoI)>,
    ground_truth: Vec<(usize, PyRoI)>,
    num_classes: usize,
    iou_thresh: f64,
) -> (f64, Vec<Option<f64>>) {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(class_id, score, roi)| Detection {
            roi: roi.0,
            class_id,
            score,
        })
        .collect();
    let gts: Vec<Annotation> = ground_truth
        .into_iter()
        .map(|(class_id, roi)| Annotation { roi: roi.0, class_id })
        .collect();
    let rep = analysis::evaluate_ap(&dets, &gts, num_classes, iou_thresh);
    (rep.map, rep.per_class)
}

#[pymodule]
fn sanlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRoI>()?;
    m.add_class::<PyScheme>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_detector, m)?)?;
    m.add_function(wrap_pyfunction!(compute_cam, m)?)?;
    m.add_function(wrap_pyfunction!(cam_stability, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_without_san, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ap, m)?)?;
    Ok(())
}
