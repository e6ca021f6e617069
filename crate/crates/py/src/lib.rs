//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use relsparse::assignment::{hungarian as solve, CostMatrix};
use relsparse::checks::all_suites;
use relsparse::corridor::{calibrate_dmin, label_dataset, relabel, FrameLabels, RelevanceConfig};
use relsparse::dataset::SceneDataset;
use relsparse::geometry::{convex_hull, polygon_distance, ConvexPolygon, OrientedBoxBEV, Point2};
use relsparse::metrics::{evaluate as eval_report, Detection, DetectionRecord, MetricsConfig};
use relsparse::profiler::{large_schedule, pipeline_flops, sensitivity, PipelineShape};
use relsparse::sparsity::{run_frame, ModelConfig, ModelParams, PipelineOptions, RunMode, ScheduleConfig};
use relsparse::synthetic::{gen_synthetic, SyntheticSpec};

fn err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, v: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (v,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Scenes with ego and agent tracks plus annotated keyframes.
#[pyclass(name = "Dataset", module = "relsparse_py")]
struct PyDataset {
    inner: SceneDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (scenes=4, seed=0, duration=None))]
    fn synthetic(scenes: usize, seed: u64, duration: Option<f64>) -> Self {
        let base = SyntheticSpec::default();
        let spec = SyntheticSpec { scenes, seed, duration: duration.unwrap_or(base.duration), ..base };
        Self { inner: gen_synthetic(&spec) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: SceneDataset = serde_json::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn num_scenes(&self) -> usize {
        self.inner.scenes.len()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.frames().count()
    }

    fn frame_ids(&self) -> Vec<String> {
        self.inner.frames().map(|(_, f)| f.frame_id.clone()).collect()
    }

    /// Ground truth reissued as detections with a fixed score.
    #[pyo3(signature = (score=0.9))]
    fn perfect_detections<'py>(&self, py: Python<'py>, score: f64) -> PyResult<Bound<'py, PyAny>> {
        let recs: Vec<DetectionRecord> = self
            .inner
            .frames()
            .flat_map(|(_, f)| f.gt_boxes.iter().map(move |g| DetectionRecord::from(&Detection::from_gt(&f.frame_id, g, score))))
            .collect();
        to_py(py, &recs)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(scenes={}, frames={})", self.num_scenes(), self.num_frames())
    }
}

/// Convex polygon in the BEV plane, counter-clockwise.
#[pyclass(name = "Polygon", module = "relsparse_py")]
struct PyPolygon {
    inner: ConvexPolygon,
}

#[pymethods]
impl PyPolygon {
    #[staticmethod]
    fn hull(points: Vec<(f64, f64)>) -> PyResult<Self> {
        let pts: Vec<Point2> = points.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        Ok(Self { inner: convex_hull(&pts).map_err(err)? })
    }

    #[staticmethod]
    fn from_box(x: f64, y: f64, yaw: f64, length: f64, width: f64) -> PyResult<Self> {
        let b = OrientedBoxBEV::new(Point2::new(x, y), yaw, length, width).map_err(err)?;
        Ok(Self { inner: ConvexPolygon::from_box(&b) })
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.inner.vertices().iter().map(|p| (p.x, p.y)).collect()
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    #[pyo3(signature = (x, y, eps=1e-9))]
    fn contains(&self, x: f64, y: f64, eps: f64) -> bool {
        self.inner.contains(Point2::new(x, y), eps)
    }

    fn distance(&self, other: &PyPolygon) -> f64 {
        polygon_distance(&self.inner, &other.inner)
    }
}

/// Minimum-cost assignment; returns `(pairs, total_cost)`.
#[pyfunction]
fn hungarian(costs: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let a = solve(&CostMatrix::from_rows(&costs).map_err(err)?);
    Ok((a.pairs, a.total_cost))
}

/// Corridor relevance labels, one dict per frame.
#[pyfunction]
#[pyo3(signature = (dataset, d_min=None))]
fn label<'py>(py: Python<'py>, dataset: &PyDataset, d_min: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RelevanceConfig { d_min: d_min.unwrap_or(RelevanceConfig::default().d_min), ..RelevanceConfig::default() };
    cfg.validate().map_err(err)?;
    to_py(py, &label_dataset(&dataset.inner, &cfg))
}

#[pyfunction]
fn calibrate<'py>(py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &calibrate_dmin(&dataset.inner, &RelevanceConfig::default()).map_err(err)?)
}

#[pyfunction]
fn relabel_at<'py>(py: Python<'py>, labels: &Bound<'py, PyAny>, d_min: f64) -> PyResult<Bound<'py, PyAny>> {
    let l: Vec<FrameLabels> = from_py(py, labels)?;
    to_py(py, &relabel(&l, d_min))
}

/// Metrics report for detection dicts; RM metrics need `labels`.
#[pyfunction]
#[pyo3(signature = (dataset, detections, labels=None, ra_radius=None))]
fn evaluate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    detections: &Bound<'py, PyAny>,
    labels: Option<&Bound<'py, PyAny>>,
    ra_radius: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let recs: Vec<DetectionRecord> = from_py(py, detections)?;
    let dets: Vec<Detection> = recs.into_iter().map(Detection::try_from).collect::<Result<_, _>>().map_err(err)?;
    let labels: Option<Vec<FrameLabels>> = labels.map(|l| from_py(py, l)).transpose()?;
    let base = MetricsConfig::default();
    let cfg = MetricsConfig { ra_radius: ra_radius.unwrap_or(base.ra_radius), ..base };
    to_py(py, &eval_report(&dataset.inner, &dets, labels.as_deref(), &cfg).map_err(err)?)
}

/// FLOP report and sensitivities for the large pipeline shape.
#[pyfunction]
fn profile<'py>(py: Python<'py>, tkr: f64) -> PyResult<Bound<'py, PyAny>> {
    let shape = PipelineShape::large();
    let report = pipeline_flops(&shape, &large_schedule(tkr)).map_err(err)?;
    let sens = sensitivity(&shape).map_err(err)?;
    to_py(py, &serde_json::json!({ "report": report, "sensitivity": sens }))
}

/// One frame through the toy model; returns the sparsity trace.
#[pyfunction]
#[pyo3(signature = (dataset, tkr, mode="sparse_eval", seed=0))]
fn run_toy_frame<'py>(py: Python<'py>, dataset: &PyDataset, tkr: f64, mode: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let mode: RunMode = mode.parse().map_err(err)?;
    let cfg = ModelConfig::default();
    let params = ModelParams::random(&cfg, seed).map_err(err)?;
    let schedule = if mode == RunMode::Dense { ScheduleConfig::dense_for(&cfg) } else { ScheduleConfig::for_model(&cfg, tkr) };
    schedule.validate().map_err(err)?;
    let frame = dataset.inner.frames().next().ok_or_else(|| err("dataset has no frames"))?.1;
    let out = run_frame(&params, frame, None, &schedule, &PipelineOptions { seed, ..PipelineOptions::new(mode) }).map_err(err)?;
    to_py(py, &out.output.trace)
}

#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &all_suites(seed))
}

#[pymodule]
fn relsparse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPolygon>()?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(label, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(relabel_at, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(run_toy_frame, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
