//! Python bindings: synthetic clip generation, the metric stack, the
//! assignment solver, tracking math, and checkpoint inference.

use dvps_core::assignloss::hungarian_match;
use dvps_core::config::ExperimentConfig;
use dvps_core::fuse::{infer_frame, FuseThresholds};
use dvps_core::metrics::{
    self, depth_aware_instances, depth_stats, dvpq, panoptic_quality, stq_components, FrameMaps,
};
use dvps_core::synthgen::{generate_clip, SceneSpec};
use dvps_core::tracker::{bidirectional_similarity, TrackMemory};
use ndarray::{Array1, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::collections::BTreeSet;

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn seq_from_arrays(
    class: &PyReadonlyArray3<u16>,
    inst: &PyReadonlyArray3<u16>,
    depth: &PyReadonlyArray3<f32>,
) -> PyResult<Vec<FrameMaps>> {
    let c = class.as_array();
    let i = inst.as_array();
    let d = depth.as_array();
    if c.shape() != i.shape() || c.shape() != d.shape() {
        return Err(value_err("class/instance/depth sequences must share shape (T,H,W)"));
    }
    Ok((0..c.shape()[0])
        .map(|t| FrameMaps {
            class: c.index_axis(ndarray::Axis(0), t).to_owned(),
            instance: i.index_axis(ndarray::Axis(0), t).to_owned(),
            depth: d.index_axis(ndarray::Axis(0), t).to_owned(),
        })
        .collect())
}

fn things_set(things: Vec<u16>) -> BTreeSet<u16> {
    things.into_iter().collect()
}

/// Generate one deterministic synthetic clip. Returns a dict with
/// `images (T,3,H,W) f32`, `panoptic (T,2,H,W) u16`, `depth (T,H,W) f32`.
#[pyfunction]
#[pyo3(signature = (seed, frames=6, height=64, width=64, things_min=1, things_max=5))]
fn generate_clip_py(
    py: Python<'_>,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    things_min: usize,
    things_max: usize,
) -> PyResult<Py<PyDict>> {
    let spec = SceneSpec {
        seed,
        frames,
        height,
        width,
        things_min,
        things_max,
        ..Default::default()
    };
    let clip = generate_clip(&spec).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("images", clip.images.clone().into_pyarray(py))?;
    out.set_item("panoptic", clip.panoptic.clone().into_pyarray(py))?;
    out.set_item("depth", clip.depth.clone().into_pyarray(py))?;
    Ok(out.into())
}

/// Panoptic quality of one frame pair. Returns `(pq, per_class)` where
/// `per_class` maps class id to `(pq, iou_sum, tp, fp, fn)`.
#[pyfunction]
fn panoptic_quality_py(
    pred_class: PyReadonlyArray2<u16>,
    pred_inst: PyReadonlyArray2<u16>,
    gt_class: PyReadonlyArray2<u16>,
    gt_inst: PyReadonlyArray2<u16>,
    things: Vec<u16>,
) -> PyResult<(f64, std::collections::BTreeMap<u16, (f64, f64, usize, usize, usize)>)> {
    let stats = panoptic_quality(
        &pred_class.as_array().to_owned(),
        &pred_inst.as_array().to_owned(),
        &gt_class.as_array().to_owned(),
        &gt_inst.as_array().to_owned(),
        &things_set(things),
    )
    .map_err(value_err)?;
    let per_class = stats
        .per_class
        .iter()
        .map(|(&c, s)| (c, (s.pq(), s.iou_sum, s.tp, s.fp, s.fn_)))
        .collect();
    Ok((stats.pq().unwrap_or(1.0), per_class))
}

/// Windowed depth-masked panoptic quality `DVPQ^k_lambda` for one
/// sequence. `lam <= 0` means no depth masking (infinity).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn dvpq_py(
    pred_class: PyReadonlyArray3<u16>,
    pred_inst: PyReadonlyArray3<u16>,
    pred_depth: PyReadonlyArray3<f32>,
    gt_class: PyReadonlyArray3<u16>,
    gt_inst: PyReadonlyArray3<u16>,
    gt_depth: PyReadonlyArray3<f32>,
    k: usize,
    lam: f64,
    things: Vec<u16>,
) -> PyResult<(f64, f64, f64)> {
    let pred = seq_from_arrays(&pred_class, &pred_inst, &pred_depth)?;
    let gt = seq_from_arrays(&gt_class, &gt_inst, &gt_depth)?;
    let lam = if lam <= 0.0 { f64::INFINITY } else { lam };
    let v = dvpq(&pred, &gt, k, lam, &things_set(things)).map_err(value_err)?;
    Ok((v.all, v.thing, v.stuff))
}

/// Association and segmentation quality (AQ, SQ) for one sequence.
#[pyfunction]
fn stq_py(
    pred_class: PyReadonlyArray3<u16>,
    pred_inst: PyReadonlyArray3<u16>,
    gt_class: PyReadonlyArray3<u16>,
    gt_inst: PyReadonlyArray3<u16>,
) -> PyResult<(f64, f64)> {
    let zeros = |c: &PyReadonlyArray3<u16>| {
        Array3::<f32>::zeros((
            c.as_array().shape()[0],
            c.as_array().shape()[1],
            c.as_array().shape()[2],
        ))
    };
    let pd = zeros(&pred_class);
    let gd = zeros(&gt_class);
    let pred: Vec<FrameMaps> = (0..pd.shape()[0])
        .map(|t| FrameMaps {
            class: pred_class.as_array().index_axis(ndarray::Axis(0), t).to_owned(),
            instance: pred_inst.as_array().index_axis(ndarray::Axis(0), t).to_owned(),
            depth: pd.index_axis(ndarray::Axis(0), t).to_owned(),
        })
        .collect();
    let gt: Vec<FrameMaps> = (0..gd.shape()[0])
        .map(|t| FrameMaps {
            class: gt_class.as_array().index_axis(ndarray::Axis(0), t).to_owned(),
            instance: gt_inst.as_array().index_axis(ndarray::Axis(0), t).to_owned(),
            depth: gd.index_axis(ndarray::Axis(0), t).to_owned(),
        })
        .collect();
    stq_components(&pred, &gt).map_err(value_err)
}

#[pyfunction]
fn dstq_py(aq: f64, sq: f64, dq: f64) -> f64 {
    metrics::dstq(aq, sq, dq)
}

/// DQ (fraction within 10% relative error) and abs rel over valid pixels.
#[pyfunction]
fn depth_quality_py(
    pred: PyReadonlyArray2<f32>,
    gt: PyReadonlyArray2<f32>,
) -> PyResult<(f64, f64)> {
    let s = depth_stats(&pred.as_array().to_owned(), &gt.as_array().to_owned());
    Ok((s.dq().map_err(value_err)?, s.abs_rel().map_err(value_err)?))
}

/// Depth-aware instance counts `(aware, total)` for one frame.
#[pyfunction]
fn depth_aware_py(
    pred: PyReadonlyArray2<f32>,
    gt: PyReadonlyArray2<f32>,
    gt_inst: PyReadonlyArray2<u16>,
) -> (usize, usize) {
    depth_aware_instances(
        &pred.as_array().to_owned(),
        &gt.as_array().to_owned(),
        &gt_inst.as_array().to_owned(),
    )
}

/// Minimum-cost assignment of an `n x m` cost matrix (`m <= n`); returns
/// the query row chosen for each column.
#[pyfunction]
fn hungarian_py(cost: PyReadonlyArray2<f64>) -> PyResult<Vec<usize>> {
    hungarian_match(&cost.as_array().to_owned()).map_err(value_err)
}

/// Bidirectional-softmax similarity between two embedding sets.
#[pyfunction]
fn bidirectional_softmax_py<'py>(
    py: Python<'py>,
    a: PyReadonlyArray2<f64>,
    b: PyReadonlyArray2<f64>,
) -> Bound<'py, PyArray2<f64>> {
    bidirectional_similarity(&a.as_array().to_owned(), &b.as_array().to_owned()).into_pyarray(py)
}

/// Contrastive tracking loss `log(1 + sum exp(v k- - v k+))` (values only).
#[pyfunction]
fn track_loss_py(
    v: PyReadonlyArray2<f64>,
    positives: PyReadonlyArray2<f64>,
    negatives: PyReadonlyArray2<f64>,
) -> f64 {
    let v = v.as_array();
    let pos = positives.as_array();
    let neg = negatives.as_array();
    if pos.nrows() == 0 || neg.nrows() == 0 {
        return 0.0;
    }
    let dot = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    };
    let mut s = 0.0;
    for p in pos.outer_iter() {
        for n in neg.outer_iter() {
            s += (dot(v.row(0), n) - dot(v.row(0), p)).exp();
        }
    }
    (1.0 + s).ln()
}

/// A trained (or freshly initialized) model usable for inference.
#[pyclass]
struct Model {
    inner: dvps_core::model::Model,
    thresholds: FuseThresholds,
    momentum: f64,
    evict_after: usize,
}

#[pymethods]
impl Model {
    /// Fresh model from a config text (flat `key = value` lines; empty
    /// string for defaults).
    #[new]
    #[pyo3(signature = (config_text="", seed=0))]
    fn new(config_text: &str, seed: u64) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse(config_text).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        Ok(Self {
            inner: dvps_core::model::Model::new(cfg.model_config(), seed),
            thresholds: cfg.fuse_thresholds(),
            momentum: cfg.momentum,
            evict_after: cfg.evict_after,
        })
    }

    /// Load a checkpoint produced by the trainer.
    #[staticmethod]
    #[pyo3(signature = (path, config_text=""))]
    fn load(path: &str, config_text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse(config_text).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        let inner =
            dvps_core::model::Model::load(std::path::Path::new(path), cfg.model_config())
                .map_err(runtime_err)?;
        Ok(Self {
            inner,
            thresholds: cfg.fuse_thresholds(),
            momentum: cfg.momentum,
            evict_after: cfg.evict_after,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(runtime_err)
    }

    fn n_parameters(&self) -> usize {
        self.inner.params.n_scalars()
    }

    /// Run tracked inference over a clip `(T,3,H,W) f32`; returns
    /// `(class (T,H,W) u16, instance (T,H,W) u16, depth (T,H,W) f32)`.
    fn infer_clip<'py>(
        &self,
        py: Python<'py>,
        images: PyReadonlyArray4<f32>,
    ) -> PyResult<(
        Bound<'py, PyArray3<u16>>,
        Bound<'py, PyArray3<u16>>,
        Bound<'py, PyArray3<f32>>,
    )> {
        let imgs = images.as_array();
        let (t_n, c, h, w) = (
            imgs.shape()[0],
            imgs.shape()[1],
            imgs.shape()[2],
            imgs.shape()[3],
        );
        if c != 3 {
            return Err(value_err("expected (T,3,H,W) images"));
        }
        let mut class = Array3::<u16>::zeros((t_n, h, w));
        let mut inst = Array3::<u16>::zeros((t_n, h, w));
        let mut depth = Array3::<f32>::zeros((t_n, h, w));
        let mut memory = TrackMemory::new(self.momentum, self.evict_after);
        for t in 0..t_n {
            let img: ndarray::Array3<f64> = imgs
                .index_axis(ndarray::Axis(0), t)
                .mapv(|v| v as f64);
            let r = infer_frame(&self.inner, &img, &mut memory, t, &self.thresholds)
                .map_err(runtime_err)?;
            class.index_axis_mut(ndarray::Axis(0), t).assign(&r.class);
            inst.index_axis_mut(ndarray::Axis(0), t).assign(&r.instance);
            depth.index_axis_mut(ndarray::Axis(0), t).assign(&r.depth);
        }
        Ok((
            class.into_pyarray(py),
            inst.into_pyarray(py),
            depth.into_pyarray(py),
        ))
    }
}

use numpy::PyReadonlyArray4;

#[pymodule]
fn dvps(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_clip_py, m)?)?;
    m.add_function(wrap_pyfunction!(panoptic_quality_py, m)?)?;
    m.add_function(wrap_pyfunction!(dvpq_py, m)?)?;
    m.add_function(wrap_pyfunction!(stq_py, m)?)?;
    m.add_function(wrap_pyfunction!(dstq_py, m)?)?;
    m.add_function(wrap_pyfunction!(depth_quality_py, m)?)?;
    m.add_function(wrap_pyfunction!(depth_aware_py, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_py, m)?)?;
    m.add_function(wrap_pyfunction!(bidirectional_softmax_py, m)?)?;
    m.add_function(wrap_pyfunction!(track_loss_py, m)?)?;
    m.add_class::<Model>()?;
    let _ = Array1::<f64>::zeros(1);
    Ok(())
}
