//! Python module `kinesim`: scenes, tokenization, models, closed-loop
//! rollouts, metrics and preference fine-tuning.
//!
//! States are `(x, y, theta, v)` tuples and actions `(a, w)` tuples.
//! Structured results (metrics, DPO reports) come back as dicts.

use std::path::PathBuf;

use ks::codec::{dequantize, quantize, ActionToken, VOCAB};
use ks::kinematics::{ctra_step as step, AgentState, ControlAction};
use ks::metrics::evaluate as evaluate_groups;
use ks::model::{load_checkpoint, save_checkpoint, sequences_for_agent, train as train_model, Model, ModelConfig, Sampler, Sequence, TrainConfig};
use ks::plot::{render_svg, PlotOptions};
use ks::preference::{build_pairs, dpo_finetune as finetune, prepare_examples, DpoConfig, DriverProfile};
use ks::rollout::{batch_rollouts, history_tokens, save_simulated, RolloutConfig, SimulatedScenario};
use ks::scene::{generate_synthetic, load_scenario, save_scenario, GenConfig, MapIndex, Scenario, SceneConfig};
use ks::tokenizer::{tokenize_track as tokenize, TokenizerConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type State = (f64, f64, f64, f64);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_state(s: State) -> AgentState {
    AgentState::new(s.0, s.1, s.2, s.3)
}

fn tuple(s: &AgentState) -> State {
    (s.x, s.y, s.theta, s.v)
}

fn token(t: usize) -> PyResult<ActionToken> {
    ActionToken::from_flat(t).map_err(err)
}

/// Serializes to JSON and parses it with Python's `json` module.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parses `value` as JSON and deserializes it; `None` gives the default.
fn from_py<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, value: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = value else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// One closed-loop kinematic step.
#[pyfunction]
#[pyo3(signature = (state, action, dt = 0.5))]
fn ctra_step(state: State, action: (f64, f64), dt: f64) -> PyResult<State> {
    step(&to_state(state), &ControlAction::new(action.0, action.1), dt).map(|n| tuple(&n)).map_err(err)
}

/// Token of the bin containing `(a, w)`.
#[pyfunction]
fn quantize_action(a: f64, w: f64) -> PyResult<usize> {
    quantize(&ControlAction::new(a, w)).map(|t| t.flat()).map_err(err)
}

/// Bin-centre action `(a, w)` of a token.
#[pyfunction]
fn dequantize_token(t: usize) -> PyResult<(f64, f64)> {
    let u = dequantize(token(t)?);
    Ok((u.a, u.w))
}

/// Tokenizes a fully observed track. Returns `(tokens, ctl_states, residuals)`.
#[pyfunction]
#[pyo3(signature = (states, window = 3, dt = 0.5))]
fn tokenize_track(states: Vec<State>, window: usize, dt: f64) -> PyResult<(Vec<usize>, Vec<State>, Vec<f64>)> {
    let states: Vec<AgentState> = states.into_iter().map(to_state).collect();
    let cfg = TokenizerConfig { window, dt, ..TokenizerConfig::default() };
    let out = tokenize(&states, &cfg).map_err(err)?;
    Ok((out.tokens.iter().map(|t| t.flat()).collect(), out.ctl_states.iter().map(tuple).collect(), out.residuals))
}

#[pyclass(name = "Scenario", module = "kinesim", frozen, from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_scenario(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scenario(&self.inner, path).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn ego(&self) -> Option<u32> {
        self.inner.ego
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn current_step(&self) -> usize {
        self.inner.current_step()
    }

    fn agent_ids(&self) -> Vec<u32> {
        self.inner.tracks.iter().map(|t| t.id()).collect()
    }

    /// Logged states of an agent; `None` where the agent is not observed.
    fn states(&self, agent: u32) -> PyResult<Vec<Option<State>>> {
        let tr = self.inner.track(agent).map_err(err)?;
        Ok(tr.states.iter().zip(&tr.valid).map(|(s, &v)| v.then(|| tuple(s))).collect())
    }

    /// Logged tokens of an agent, recovered by the tokenizer when the
    /// file carries none.
    fn tokens(&self, agent: u32) -> PyResult<Vec<usize>> {
        let tr = self.inner.track(agent).map_err(err)?;
        Ok(history_tokens(tr, self.inner.dt).map_err(err)?.iter().map(|t| t.flat()).collect())
    }

    #[pyo3(signature = (highlight = vec![], width = 800.0))]
    fn to_svg(&self, highlight: Vec<u32>, width: f64) -> String {
        let opts = PlotOptions { width, ..PlotOptions::default() };
        render_svg(&self.inner, self.inner.current_step(), &highlight, &opts)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(id={:?}, agents={}, steps={})", self.inner.id, self.inner.tracks.len(), self.inner.steps())
    }
}

/// Synthetic scenes from generator settings, e.g. `{"straight_follow": 10}`.
/// Archetype counts default to zero.
#[pyfunction]
#[pyo3(signature = (seed, settings = None))]
fn generate_scenes(seed: u64, settings: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<PyScenario>> {
    let mut cfg = GenConfig::empty();
    for (k, v) in settings.into_iter().flat_map(|d| d.iter()) {
        cfg.set(&k.str()?.to_string(), &v.str()?.to_string().to_lowercase()).map_err(err)?;
    }
    Ok(generate_synthetic(&cfg, seed).map_err(err)?.into_iter().map(|inner| PyScenario { inner }).collect())
}

#[pyclass(name = "Rollout", module = "kinesim", frozen, from_py_object)]
#[derive(Clone)]
struct PyRollout {
    inner: SimulatedScenario,
}

#[pymethods]
impl PyRollout {
    #[getter]
    fn start(&self) -> usize {
        self.inner.start
    }

    #[getter]
    fn controlled(&self) -> Vec<u32> {
        self.inner.controlled()
    }

    fn tokens(&self, agent: u32) -> PyResult<Vec<usize>> {
        let t = self.inner.tokens.get(&agent).ok_or_else(|| err(format!("agent {agent} is not controlled")))?;
        Ok(t.iter().map(|t| t.flat()).collect())
    }

    /// States from the start step through the end of the rollout.
    fn states(&self, agent: u32) -> PyResult<Vec<State>> {
        Ok(self.inner.future_states(agent).map_err(err)?.iter().map(tuple).collect())
    }

    fn is_feasible(&self) -> bool {
        self.inner.is_feasible()
    }

    fn scenario(&self) -> PyScenario {
        PyScenario { inner: self.inner.scenario.clone() }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_simulated(&self.inner, path).map_err(err)
    }
}

fn sequences(scenes: &[PyScenario], ego_only: bool, unified: bool) -> PyResult<Vec<Sequence>> {
    let mut out = vec![];
    for s in scenes {
        let s = &s.inner;
        let index = MapIndex::new(s, SceneConfig::default());
        for tr in &s.tracks {
            if (ego_only && s.ego != Some(tr.id())) || tr.valid.iter().filter(|v| **v).count() < 2 {
                continue;
            }
            let toks = history_tokens(tr, s.dt).map_err(err)?;
            out.extend(sequences_for_agent(s, &index, tr.id(), &toks, unified).map_err(err)?);
        }
    }
    Ok(out)
}

#[pyclass(name = "Model", module = "kinesim", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// New randomly initialized model. `config` uses the checkpoint's
    /// field names (`d_model`, `enc_layers`, ...); missing keys keep
    /// their defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let mut merged = serde_json::to_value(ModelConfig::default()).map_err(err)?;
        if let Some(d) = config {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            let over: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
            for (k, v) in over.as_object().into_iter().flatten() {
                if merged.get(k).is_none() {
                    return Err(err(format!("unknown model config key {k:?}")));
                }
                merged[k] = v.clone();
            }
        }
        let cfg: ModelConfig = serde_json::from_value(merged).map_err(err)?;
        Ok(Self { inner: Model::new(cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn num_weights(&self) -> usize {
        self.inner.num_weights()
    }

    /// Teacher-forced training on the logged tokens of `scenes`. `config`
    /// holds training settings (`epochs`, `batch_size`, `lr`, `seed`, ...).
    /// Returns the per-epoch loss curve.
    #[pyo3(signature = (scenes, val_scenes = vec![], config = None, ego_only = false))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        scenes: Vec<PyScenario>,
        val_scenes: Vec<PyScenario>,
        config: Option<&Bound<'py, PyDict>>,
        ego_only: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = from_py(py, config)?;
        let usr = self.inner.config.unified_spatial_repr;
        let train_set = sequences(&scenes, ego_only, usr)?;
        let val = sequences(&val_scenes, true, usr)?;
        let model = &mut self.inner;
        let curve = py.detach(|| train_model(model, &train_set, &val, &cfg)).map_err(err)?;
        to_py(py, &curve.epochs)
    }

    /// Closed-loop rollouts of `scene`. `sampler` is `argmax`, `top-p:P`
    /// or `temperature:T`; `controlled` defaults to the ego.
    #[pyo3(signature = (scene, samples = 1, sampler = "argmax", horizon = 16, seed = 0, controlled = vec![]))]
    fn rollout(&self, py: Python<'_>, scene: &PyScenario, samples: usize, sampler: &str, horizon: usize, seed: u64, controlled: Vec<u32>) -> PyResult<Vec<PyRollout>> {
        let sampler: Sampler = sampler.parse().map_err(err)?;
        let cfg = RolloutConfig { horizon, sampler, controlled, seed, samples, ..RolloutConfig::default() };
        let sims = py.detach(|| batch_rollouts(&scene.inner, &self.inner, &cfg)).map_err(err)?;
        Ok(sims.into_iter().map(|inner| PyRollout { inner }).collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(d_model={}, enc_layers={}, dec_layers={}, weights={})", c.d_model, c.enc_layers, c.dec_layers, self.inner.num_weights())
    }
}

/// Metrics over rollouts grouped by scenario; `ground_truth` adds minADE.
#[pyfunction]
#[pyo3(signature = (groups, ground_truth = None))]
fn evaluate<'py>(py: Python<'py>, groups: Vec<Vec<PyRollout>>, ground_truth: Option<Vec<PyScenario>>) -> PyResult<Bound<'py, PyAny>> {
    let groups: Vec<Vec<SimulatedScenario>> = groups.into_iter().map(|g| g.into_iter().map(|r| r.inner).collect()).collect();
    let gt: Option<Vec<Scenario>> = ground_truth.map(|v| v.into_iter().map(|s| s.inner).collect());
    let report = evaluate_groups(&groups, gt.as_deref()).map_err(err)?;
    to_py(py, &report)
}

/// Preference fine-tuning of `reference` for a driver profile (`safety`,
/// `fast` or `comfort`). Pairs come from `samples` rollouts per scene.
/// Returns the tuned model and the report.
#[pyfunction]
#[pyo3(signature = (reference, scenes, profile, samples = 8, sampler = "top-p:0.9", seed = 0, config = None))]
fn dpo_finetune<'py>(
    py: Python<'py>,
    reference: &PyModel,
    scenes: Vec<PyScenario>,
    profile: &str,
    samples: usize,
    sampler: &str,
    seed: u64,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let profile: DriverProfile = profile.parse().map_err(err)?;
    let sampler: Sampler = sampler.parse().map_err(err)?;
    let cfg: DpoConfig = from_py(py, config)?;
    let scenes: Vec<Scenario> = scenes.into_iter().map(|s| s.inner).collect();
    let rcfg = RolloutConfig { sampler, samples, seed, ..RolloutConfig::default() };
    let reference = &reference.inner;
    let (model, report) = py
        .detach(|| -> ks::Result<_> {
            let mut pairs = vec![];
            for s in &scenes {
                let Some(ego) = s.ego else { continue };
                pairs.extend(build_pairs(&batch_rollouts(s, reference, &rcfg)?, ego, profile)?);
            }
            let examples = prepare_examples(reference, &pairs, &scenes, cfg.workers)?;
            finetune(reference, &examples, &cfg)
        })
        .map_err(err)?;
    Ok((PyModel { inner: model }, to_py(py, &report)?))
}

#[pymodule]
fn kinesim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VOCAB", VOCAB)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRollout>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ctra_step, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_action, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize_token, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_track, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_finetune, m)?)?;
    Ok(())
}
