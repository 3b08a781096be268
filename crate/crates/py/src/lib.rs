//! Python bindings: events, the tetris DAG, per-stage decisions and the
//! simulator.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use tetris_core::engine::{self, ProtocolParams, StageState, Verdict};
use tetris_core::sim::{self, run_scenario_with, RunOptions};
use tetris_core::{
    create_event as core_create_event, Digest, Insert, KeyedHashSigner, Membership, ScenarioConfig,
    ValidatorId,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn digest(hex: &str) -> PyResult<Digest> {
    Digest::from_hex(hex).map_err(value_err)
}

#[pyclass(name = "Signer", module = "tetris", frozen)]
struct PySigner(KeyedHashSigner);

#[pymethods]
impl PySigner {
    #[new]
    fn new(seed: u64) -> Self {
        PySigner(KeyedHashSigner::new(seed))
    }
}

#[pyclass(name = "Event", module = "tetris", frozen, from_py_object)]
#[derive(Clone)]
struct PyEvent(tetris_core::Event);

#[pymethods]
impl PyEvent {
    #[getter]
    fn vid(&self) -> u32 {
        self.0.vid().0
    }

    #[getter]
    fn seq(&self) -> u64 {
        self.0.seq()
    }

    #[getter]
    fn digest(&self) -> String {
        self.0.digest().to_hex()
    }

    #[getter]
    fn parents(&self) -> Vec<String> {
        self.0.parent_hashes().iter().map(Digest::to_hex).collect()
    }

    #[getter]
    fn txs(&self) -> Vec<String> {
        self.0.tx_hashes().iter().map(Digest::to_hex).collect()
    }

    fn to_wire(&self) -> Vec<u8> {
        self.0.to_wire()
    }

    #[staticmethod]
    fn from_wire(bytes: Vec<u8>) -> PyResult<Self> {
        tetris_core::Event::from_wire(&bytes).map(PyEvent).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Event(vid={}, seq={}, digest={})", self.vid(), self.seq(), &self.digest()[..12])
    }
}

/// Signs a new event. `txs` are hex transaction digests.
#[pyfunction]
#[pyo3(signature = (vid, self_parent, others, txs, signer))]
fn create_event(
    vid: u32,
    self_parent: Option<PyEvent>,
    others: Vec<PyEvent>,
    txs: Vec<String>,
    signer: &PySigner,
) -> PyResult<PyEvent> {
    let txs = txs.iter().map(|t| digest(t)).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&tetris_core::Event> = others.iter().map(|e| &e.0).collect();
    core_create_event(ValidatorId(vid), self_parent.as_ref().map(|e| &e.0), &refs, txs, &signer.0)
        .map(PyEvent)
        .map_err(value_err)
}

/// Hex digest of a transaction payload.
#[pyfunction]
fn tx_digest(payload: &[u8]) -> String {
    Digest::of(payload).to_hex()
}

#[pyclass(name = "Tetris", module = "tetris")]
struct PyTetris {
    inner: tetris_core::Tetris,
}

#[pymethods]
impl PyTetris {
    /// A store for members `0..n`.
    #[new]
    fn new(n: usize) -> PyResult<Self> {
        let m = Membership::first(n).map_err(value_err)?;
        Ok(Self { inner: tetris_core::Tetris::new(m) })
    }

    /// Returns `("accepted", [digests])`, `("pending", [missing])` or
    /// `("rejected", [reason])`.
    fn insert(&mut self, e: &PyEvent) -> (String, Vec<String>) {
        match self.inner.insert(e.0.clone()) {
            Insert::Accepted(ds) => ("accepted".into(), ds.iter().map(Digest::to_hex).collect()),
            Insert::Pending(ds) => ("pending".into(), ds.iter().map(Digest::to_hex).collect()),
            Insert::Rejected(r) => ("rejected".into(), vec![format!("{r:?}")]),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ancestors(&self, x: &str) -> PyResult<Vec<String>> {
        let set = self.inner.ancestors(&digest(x)?).map_err(|e| PyKeyError::new_err(e.to_string()))?;
        Ok(set.iter().map(Digest::to_hex).collect())
    }

    fn know(&self, x: &str, y: &str) -> PyResult<bool> {
        self.inner.know(&digest(x)?, &digest(y)?).map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    fn know_well(&self, x: &str, y: &str) -> PyResult<bool> {
        self.inner.know_well(&digest(x)?, &digest(y)?).map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    fn fork_records(&self) -> Vec<(u32, u64)> {
        self.inner.fork_records().iter().map(|(v, s)| (v.0, *s)).collect()
    }

    /// Runs the decision procedure for every member in `stage`. Returns
    /// `{base: (verdict or None, decided round or None)}` and the
    /// witnesses per round.
    #[pyo3(signature = (stage, coin_interval=10, signer=None))]
    fn decide(
        &self,
        stage: u64,
        coin_interval: u32,
        signer: Option<&PySigner>,
    ) -> PyResult<(Vec<(u32, Option<bool>, Option<u32>)>, Vec<(u32, Vec<String>)>)> {
        let params = ProtocolParams { coin_interval, ..Default::default() };
        params.validate().map_err(value_err)?;
        let mut s = StageState::new(stage, self.inner.membership().clone());
        s.sync(&self.inner);
        let members: Vec<ValidatorId> = self.inner.membership().iter().collect();
        let mut verdicts = Vec::new();
        for b in members {
            let v = match signer {
                Some(c) => engine::decide_with_coin(&self.inner, &mut s, b, &params, &c.0),
                None => engine::decide(&self.inner, &mut s, b, &params),
            };
            let value = match v {
                Verdict::Decided(x) => Some(x),
                Verdict::Undecided => None,
            };
            verdicts.push((b.0, value, s.decided_rounds().get(&b).copied()));
        }
        let witnesses = (0..=s.max_round())
            .map(|r| (r, s.witnesses_in(&self.inner, r).iter().map(Digest::to_hex).collect()))
            .collect();
        Ok((verdicts, witnesses))
    }

    fn to_dot(&self) -> String {
        self.inner.to_dot(&Default::default())
    }
}

/// Runs a scenario given as JSON and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None))]
fn run_scenario(config_json: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = ScenarioConfig::from_json(config_json).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    tetris_core::run_scenario(&cfg).map(|r| r.to_json()).map_err(value_err)
}

/// Vote table for one base event, from the first honest validator's view
/// unless `validator` is given.
#[pyfunction]
#[pyo3(signature = (config_json, stage, base, validator=None))]
fn explain(config_json: &str, stage: u64, base: u32, validator: Option<u32>) -> PyResult<String> {
    let cfg = ScenarioConfig::from_json(config_json).map_err(value_err)?;
    let mut simulation = run_scenario_with(&cfg, RunOptions::default()).map_err(value_err)?;
    simulation.run();
    let id = match validator {
        Some(v) => ValidatorId(v),
        None => cfg.honest_ids()[0],
    };
    sim::explain(&simulation, id, stage, ValidatorId(base)).map_err(value_err)
}

/// Names of the built-in scenario battery.
#[pyfunction]
fn suite_names() -> Vec<&'static str> {
    sim::SUITE_NAMES.to_vec()
}

/// JSON config of a built-in scenario.
#[pyfunction]
fn suite_scenario(name: &str, n: usize) -> PyResult<String> {
    let cfg = sim::suite_scenario(name, n).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
    Ok(cfg.to_json())
}

#[pymodule]
fn tetris(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySigner>()?;
    m.add_class::<PyEvent>()?;
    m.add_class::<PyTetris>()?;
    m.add_function(wrap_pyfunction!(create_event, m)?)?;
    m.add_function(wrap_pyfunction!(tx_digest, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(suite_names, m)?)?;
    m.add_function(wrap_pyfunction!(suite_scenario, m)?)?;
    Ok(())
}
