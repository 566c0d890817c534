//! Python bindings: arm model, renderer, module networks, gradient mixing
//! and the command-line pipeline.

use std::path::PathBuf;

use handeye::control::{self, ControlNet};
use handeye::eval;
use handeye::finetune::{self, CombinedPolicy};
use handeye::nn::{Checkpoint, GradSet};
use handeye::perception::PerceptionNet;
use handeye::render::{self, Camera, ImageFrame, ThetaVec};
use handeye::sim::{ArmModel, ReachAction, SceneState, NUM_ACTIONS};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: SceneState,
}

#[pymethods]
impl PyScene {
    #[new]
    fn new(q: [f64; 3], target: [f64; 2]) -> Self {
        Self {
            inner: SceneState { q, target },
        }
    }

    #[getter]
    fn q(&self) -> [f64; 3] {
        self.inner.q
    }

    #[getter]
    fn target(&self) -> [f64; 2] {
        self.inner.target
    }

    fn __repr__(&self) -> String {
        format!("Scene(q={:?}, target={:?})", self.inner.q, self.inner.target)
    }
}

#[pyclass(name = "Arm")]
struct PyArm {
    arm: ArmModel,
    camera: Camera,
}

#[pymethods]
impl PyArm {
    #[new]
    fn new() -> Self {
        Self {
            arm: ArmModel::default(),
            camera: Camera::default(),
        }
    }

    fn forward_kinematics(&self, q: [f64; 3]) -> [f64; 2] {
        self.arm.forward_kinematics(q)
    }

    fn distance(&self, scene: &PyScene) -> f64 {
        self.arm.distance(&scene.inner)
    }

    fn reward(&self, scene: &PyScene) -> f64 {
        self.arm.reward(&scene.inner)
    }

    /// Applies canonical action `action` (0..9).
    fn step(&self, scene: &PyScene, action: usize) -> PyResult<PyScene> {
        let a = ReachAction::from_id(action).map_err(value_err)?;
        Ok(PyScene {
            inner: self.arm.apply_action(&scene.inner, a),
        })
    }

    fn guided_action(&self, scene: &PyScene) -> usize {
        self.arm.guided_action(&scene.inner).id()
    }

    fn sample_task(&self, seed: u64) -> PyResult<PyScene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = self.arm.sample_task(&mut rng, &self.camera.viewport).map_err(value_err)?;
        Ok(PyScene { inner })
    }

    /// Evaluation-campaign task for `trial` under `seed`.
    fn campaign_task(&self, seed: u64, trial: usize) -> PyResult<PyScene> {
        let inner = eval::campaign_task(&self.arm, &self.camera, seed, trial).map_err(value_err)?;
        Ok(PyScene { inner })
    }

    fn render(&self, scene: &PyScene) -> PyFrame {
        PyFrame {
            inner: render::render(&scene.inner, &self.arm, &self.camera),
        }
    }

    fn normalize_theta(&self, scene: &PyScene) -> [f64; 5] {
        render::normalize_theta(&scene.inner, &self.arm, &self.camera).0
    }

    #[staticmethod]
    fn px_per_cm() -> f64 {
        Camera::default().px_per_cm()
    }
}

#[pyclass(name = "Frame")]
struct PyFrame {
    inner: ImageFrame,
}

#[pymethods]
impl PyFrame {
    /// Row-major 84×84 intensities in [0, 1].
    fn pixels(&self) -> Vec<f32> {
        self.inner.values().collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (render::RESOLUTION, render::RESOLUTION)
    }
}

fn load_net(path: PathBuf, name: &str) -> PyResult<handeye::nn::Network> {
    let ck = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(ck.get(name).map_err(value_err)?.clone())
}

#[pyclass(name = "PerceptionNet")]
struct PyPerception {
    inner: PerceptionNet,
}

#[pymethods]
impl PyPerception {
    #[new]
    fn new(seed: u64) -> Self {
        Self {
            inner: PerceptionNet::new(seed),
        }
    }

    /// Loads network `name` from a checkpoint file.
    #[staticmethod]
    #[pyo3(signature = (path, name = "perception"))]
    fn load(path: PathBuf, name: &str) -> PyResult<Self> {
        let inner = PerceptionNet::from_network(load_net(path, name)?).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn perceive(&self, frame: &PyFrame) -> [f64; 5] {
        self.inner.perceive(&frame.inner).0
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.net.param_count()
    }
}

#[pyclass(name = "ControlNet")]
struct PyControl {
    inner: ControlNet,
}

#[pymethods]
impl PyControl {
    #[new]
    fn new(seed: u64) -> Self {
        Self {
            inner: ControlNet::new(seed),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (path, name = "control"))]
    fn load(path: PathBuf, name: &str) -> PyResult<Self> {
        let inner = ControlNet::from_network(load_net(path, name)?).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn q_values(&self, theta: [f64; 5]) -> [f32; NUM_ACTIONS] {
        control::q_values(&self.inner, &ThetaVec(theta))
    }

    fn greedy_action(&self, theta: [f64; 5]) -> usize {
        control::greedy_action(&self.q_values(theta)).id()
    }

    /// Ground-truth-Θ campaign summary as a dict.
    #[pyo3(signature = (trials = 400, seed = 1))]
    fn evaluate_cr<'py>(&self, py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let (arm, cam) = (ArmModel::default(), Camera::default());
        let c = eval::run_campaign(&arm, &cam, control::ground_truth_policy(&arm, &cam, &self.inner), trials, seed)
            .map_err(value_err)?;
        summary_dict(py, &eval::summarize(&c.reports, &cam).map_err(value_err)?)
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &eval::CampaignSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n", s.n)?;
    d.set_item("rbar", s.rbar)?;
    d.set_item("d_med_cm", s.d_med_cm)?;
    d.set_item("d_q3_cm", s.d_q3_cm)?;
    d.set_item("d_med_px", s.d_med_px)?;
    d.set_item("d_q3_px", s.d_q3_px)?;
    Ok(d)
}

/// Greedy combined policy over rendered frames.
#[pyfunction]
fn combined_q(perception: &PyPerception, control: &PyControl, frame: &PyFrame) -> [f32; NUM_ACTIONS] {
    let p = CombinedPolicy {
        perception: perception.inner.clone(),
        control: control.inner.clone(),
    };
    finetune::combined_q(&p, &frame.inner)
}

#[pyfunction]
fn mix_gradients(gp: Vec<f32>, gq: Vec<f32>, beta: f64) -> PyResult<Vec<f32>> {
    let m = finetune::mix_gradients(&GradSet { values: gp }, &GradSet { values: gq }, beta).map_err(value_err)?;
    Ok(m.values)
}

#[pyfunction]
fn bellman_target(reward: f64, next_q: Vec<f32>, gamma: f64, terminal: bool) -> f64 {
    control::bellman_target(reward, &next_q, gamma, terminal)
}

/// Runs the command line with `args` (without the program name); returns
/// the process exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    match handeye::cli::run_from(std::iter::once("handeye".to_string()).chain(args)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.report());
            e.exit_code()
        }
    }
}

#[pymodule]
fn handeye_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyArm>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyPerception>()?;
    m.add_class::<PyControl>()?;
    m.add_function(wrap_pyfunction!(combined_q, m)?)?;
    m.add_function(wrap_pyfunction!(mix_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(bellman_target, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("NUM_ACTIONS", NUM_ACTIONS)?;
    m.add("HORIZON", handeye::sim::HORIZON)?;
    Ok(())
}
