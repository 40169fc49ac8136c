//! Python bindings: scenes, cameras, rendering, actions, synthetic demos,
//! models, training and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use hgwm::camera::{ring_rig as core_ring_rig, Camera as CoreCamera};
use hgwm::geometry::Vec3;
use hgwm::io::{read_demo, read_scene, write_scene};
use hgwm::losses::loss_bc as core_loss_bc;
use hgwm::models::{argmax_action, Model as CoreModel, ARM_LOGITS};
use hgwm::raster::{render as core_render, render_brute_force, RasterConfig, RenderOutput as CoreRender};
use hgwm::synth::{generate_demos as core_generate, GenConfig, TaskId};
use hgwm::trainer::{
    evaluate as core_evaluate, load_model, train as core_train, ModelPredictor, Predictor, TrainConfig,
};
use hgwm::types::{
    ArmAction as CoreArmAction, BimanualAction as CoreBimanual, Gaussian as CoreGaussian, GaussianSet as CoreSet,
    RoleAssignment,
};
use hgwm::world_model::{predict_step, PredictOptions};

create_exception!(hgwm_py, HgwmError, PyException);

fn err(e: hgwm::Error) -> PyErr {
    HgwmError::new_err(e.to_string())
}

/// One Gaussian primitive.
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct Gaussian(CoreGaussian);

#[pymethods]
impl Gaussian {
    #[new]
    #[pyo3(signature = (mu, color, rot, scale, opacity, logits))]
    fn new(mu: [f64; 3], color: [f64; 3], rot: [f64; 4], scale: [f64; 3], opacity: f64, logits: [f64; 3]) -> PyResult<Self> {
        CoreGaussian::new(mu, color, rot, scale, opacity, logits).map(Self).map_err(err)
    }

    #[getter]
    fn mu(&self) -> [f64; 3] {
        self.0.mu()
    }

    #[getter]
    fn color(&self) -> [f64; 3] {
        self.0.color()
    }

    #[getter]
    fn rot(&self) -> [f64; 4] {
        self.0.rot()
    }

    #[getter]
    fn scale(&self) -> [f64; 3] {
        self.0.scale()
    }

    #[getter]
    fn opacity(&self) -> f64 {
        self.0.opacity()
    }

    #[getter]
    fn logits(&self) -> [f64; 3] {
        self.0.logits()
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(mu={:?}, opacity={})", self.0.mu(), self.0.opacity())
    }
}

/// An ordered collection of Gaussians.
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct GaussianSet(CoreSet);

#[pymethods]
impl GaussianSet {
    #[new]
    #[pyo3(signature = (gaussians, timestamp = 0))]
    fn new(gaussians: Vec<Gaussian>, timestamp: u64) -> Self {
        Self(CoreSet::new(gaussians.into_iter().map(|g| g.0).collect(), timestamp))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_scene(&path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_scene(&path, &self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<Gaussian> {
        self.0
            .gaussians
            .get(i)
            .cloned()
            .map(Gaussian)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("index {i} out of range")))
    }

    #[getter]
    fn timestamp(&self) -> u64 {
        self.0.timestamp
    }
}

/// Pinhole camera (+z forward, +x right, +y down).
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct Camera(CoreCamera);

#[pymethods]
impl Camera {
    #[staticmethod]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_deg: f64, width: usize, height: usize) -> PyResult<Self> {
        CoreCamera::look_at(Vec3::from(eye), Vec3::from(target), Vec3::from(up), fov_deg, width, height)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    /// `(u, v, depth)` of a world point, or None behind the near plane.
    fn project(&self, point: [f64; 3]) -> Option<(f64, f64, f64)> {
        self.0
            .project_point(&Vec3::from(point))
            .visible()
            .map(|(p, d)| (p.x, p.y, d))
    }

    fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        self.0.unproject(u, v, depth).into()
    }
}

/// Cameras evenly spaced on a ring around the workspace.
#[pyfunction]
fn ring_rig(n: usize, width: usize, height: usize) -> PyResult<Vec<Camera>> {
    Ok(core_ring_rig(n, width, height).map_err(err)?.into_iter().map(Camera).collect())
}

/// Rendered colour, instance logits, depth and transmittance of one view.
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct RenderOutput(CoreRender);

#[pymethods]
impl RenderOutput {
    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    /// Row-major interleaved RGB, `height * width * 3` values.
    #[getter]
    fn rgb(&self) -> Vec<f64> {
        self.0.rgb.clone()
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.0.logits.clone()
    }

    #[getter]
    fn depth(&self) -> Vec<f64> {
        self.0.depth.clone()
    }

    #[getter]
    fn transmittance(&self) -> Vec<f64> {
        self.0.transmittance.clone()
    }

    /// Argmax class per pixel; 255 where coverage is at most `min_coverage`.
    #[pyo3(signature = (min_coverage = 0.5))]
    fn labels(&self, min_coverage: f64) -> Vec<u8> {
        self.0.label_image(min_coverage).data
    }
}

#[pyfunction]
#[pyo3(signature = (scene, camera, brute_force = false))]
fn render(scene: &GaussianSet, camera: &Camera, brute_force: bool) -> PyResult<RenderOutput> {
    let cfg = RasterConfig::default();
    let out = if brute_force {
        render_brute_force(&scene.0, &camera.0, &cfg)
    } else {
        core_render(&scene.0, &camera.0, &cfg)
    };
    out.map(RenderOutput).map_err(err)
}

/// Discretized keyframe action of one arm.
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct ArmAction(CoreArmAction);

#[pymethods]
impl ArmAction {
    #[new]
    #[pyo3(signature = (trans_bin, rot_bins, open, collide = false))]
    fn new(trans_bin: [usize; 3], rot_bins: [usize; 3], open: bool, collide: bool) -> PyResult<Self> {
        CoreArmAction::new(trans_bin, rot_bins, open, collide).map(Self).map_err(err)
    }

    #[getter]
    fn trans_bin(&self) -> [usize; 3] {
        self.0.trans_bin()
    }

    #[getter]
    fn rot_bins(&self) -> [usize; 3] {
        self.0.rot_bins()
    }

    #[getter]
    fn open(&self) -> bool {
        self.0.open()
    }

    #[getter]
    fn collide(&self) -> bool {
        self.0.collide()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "ArmAction(trans_bin={:?}, rot_bins={:?}, open={}, collide={})",
            self.0.trans_bin(),
            self.0.rot_bins(),
            self.0.open(),
            self.0.collide()
        )
    }
}

/// Actions of both arms plus which arm stabilizes.
#[pyclass(module = "hgwm_py", from_py_object)]
#[derive(Clone)]
struct BimanualAction(CoreBimanual);

#[pymethods]
impl BimanualAction {
    /// `role` is "left-stabilizes" or "right-stabilizes".
    #[new]
    #[pyo3(signature = (left, right, role = "right-stabilizes"))]
    fn new(left: &ArmAction, right: &ArmAction, role: &str) -> PyResult<Self> {
        let role: RoleAssignment = role.parse().map_err(err)?;
        Ok(Self(CoreBimanual::from_arms(left.0, right.0, role)))
    }

    #[getter]
    fn left(&self) -> ArmAction {
        ArmAction(self.0.left())
    }

    #[getter]
    fn right(&self) -> ArmAction {
        ArmAction(self.0.right())
    }

    #[getter]
    fn role(&self) -> String {
        self.0.role.to_string()
    }
}

/// Summed behavior-cloning cross-entropy of `2 * 520` logits (left arm first).
#[pyfunction]
fn loss_bc(logits: Vec<f64>, action: &BimanualAction) -> PyResult<f64> {
    core_loss_bc(&logits, &action.0).map_err(err)
}

/// Writes `n` scripted demos of `task` under `out/demos`; returns their step counts.
#[pyfunction]
#[pyo3(signature = (task, n, out, seed = 0, size = 64, cameras = 3))]
fn generate_demos(task: &str, n: usize, out: PathBuf, seed: u64, size: usize, cameras: usize) -> PyResult<Vec<usize>> {
    let task: TaskId = task.parse().map_err(err)?;
    let cfg = GenConfig {
        views: cameras,
        width: size,
        height: size,
        ..GenConfig::default()
    };
    core_generate(task, n, seed, &cfg, &out).map_err(err)
}

fn config_with(overrides: BTreeMap<String, String>) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(err)?;
    }
    Ok(cfg)
}

/// World model plus action head.
#[pyclass(module = "hgwm_py", unsendable)]
struct Model(CoreModel);

#[pymethods]
impl Model {
    /// Fresh model; `config` holds training-config keys such as `grid`.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let cfg = config_with(config.unwrap_or_default())?;
        CoreModel::new(cfg.model, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        load_model(&checkpoint, None).map(Self).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Current and predicted next renders for step `step` of a demo
    /// directory, one per recorded camera.
    fn predict(&self, demo: PathBuf, step: usize) -> PyResult<(Vec<RenderOutput>, Vec<RenderOutput>)> {
        let d = read_demo(&demo).map_err(err)?;
        let s = d
            .steps
            .get(step)
            .ok_or_else(|| HgwmError::new_err(format!("step {step} but the demo has {} steps", d.steps.len())))?;
        let cams = s.observation.cameras();
        let b = predict_step(&self.0, &s.observation, &s.action, &cams, &PredictOptions::default()).map_err(err)?;
        let wrap = |v: Vec<CoreRender>| v.into_iter().map(RenderOutput).collect();
        Ok((wrap(b.current_render), wrap(b.future_render)))
    }

    /// Argmax actions `(left, right)` decoded for step `step` of a demo.
    fn decode(&self, demo: PathBuf, step: usize) -> PyResult<(ArmAction, ArmAction)> {
        let d = read_demo(&demo).map_err(err)?;
        if step >= d.steps.len() {
            return Err(HgwmError::new_err(format!("step {step} but the demo has {} steps", d.steps.len())));
        }
        let p = ModelPredictor {
            model: &self.0,
            raster: RasterConfig::default(),
        };
        let logits = p.predict(&d, step).map_err(err)?.action_logits;
        let left = argmax_action(&logits[..ARM_LOGITS]).map_err(err)?;
        let right = argmax_action(&logits[ARM_LOGITS..]).map_err(err)?;
        Ok((ArmAction(left), ArmAction(right)))
    }
}

fn losses_dict(c: &hgwm::losses::LossComponents) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("bc", c.bc), ("recon", c.recon), ("task", c.task), ("pred", c.pred)])
}

/// Trains on `dataset`, writing checkpoints and metrics under `out`.
/// `config` overrides any training-config key.
#[pyfunction]
#[pyo3(signature = (dataset, out, steps, seed = 0, config = None, resume = None))]
fn train(
    py: Python<'_>,
    dataset: PathBuf,
    out: PathBuf,
    steps: usize,
    seed: u64,
    config: Option<BTreeMap<String, String>>,
    resume: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = config_with(config.unwrap_or_default())?;
    cfg.dataset = dataset;
    cfg.out = out;
    cfg.steps = steps;
    cfg.seed = seed;
    let s = core_train(&cfg, resume.as_deref()).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("steps_done", s.steps_done)?;
    d.set_item("initial", losses_dict(&s.initial))?;
    d.set_item("last", losses_dict(&s.last))?;
    d.set_item("checkpoints", s.checkpoints)?;
    d.set_item("skipped_samples", s.skipped_samples)?;
    Ok(d.into_any().unbind())
}

/// Evaluation report of a checkpoint on a dataset as a `str -> str` dict.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, dataset: PathBuf) -> PyResult<BTreeMap<String, String>> {
    let model = load_model(&checkpoint, None).map_err(err)?;
    let demos = hgwm::io::read_dataset(&dataset).map_err(err)?;
    let p = ModelPredictor {
        model: &model,
        raster: RasterConfig::default(),
    };
    Ok(core_evaluate(&p, &demos, &Default::default()).map_err(err)?.to_kv())
}

#[pymodule]
fn hgwm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HgwmError", m.py().get_type::<HgwmError>())?;
    m.add_class::<Gaussian>()?;
    m.add_class::<GaussianSet>()?;
    m.add_class::<Camera>()?;
    m.add_class::<RenderOutput>()?;
    m.add_class::<ArmAction>()?;
    m.add_class::<BimanualAction>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(ring_rig, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(loss_bc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
