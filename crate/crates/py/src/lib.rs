//! Python bindings: corpora, target and draft models, speculative decoding,
//! the losslessness certification and the metric helpers.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use msd_core::bench::run_bench;
use msd_core::datagen::{self, InstructionExample};
use msd_core::draft::{DraftConfig, DraftMode, DraftParams};
use msd_core::engine::{self, DecodeMode, SpecConfig};
use msd_core::lossless::{certify, default_grid};
use msd_core::metrics::{self, RunMetrics, SpeedupInputs};
use msd_core::rng::RngState;
use msd_core::target::{TargetConfig, TargetParams};
use msd_core::trainer;
use msd_core::verifier::{self, AcceptanceRule};
use msd_core::weights::WeightFile;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One instruction example (optional image grid, instruction, answer).
#[pyclass(module = "msd", frozen, from_py_object)]
#[derive(Clone)]
pub struct Example {
    inner: InstructionExample,
}

#[pymethods]
impl Example {
    #[getter]
    fn system(&self) -> Vec<usize> {
        self.inner.system.clone()
    }

    #[getter]
    fn instruction(&self) -> Vec<usize> {
        self.inner.instruction.clone()
    }

    #[getter]
    fn answer(&self) -> Vec<usize> {
        self.inner.answer.clone()
    }

    /// Grid colors (row major) or `None` for text-only examples.
    #[getter]
    fn colors(&self) -> Option<Vec<usize>> {
        self.inner.image.as_ref().map(|g| g.colors.clone())
    }

    #[getter]
    fn kind(&self) -> String {
        serde_json::to_value(self.inner.kind())
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(s).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Example(kind={}, answer={:?})", self.kind(), self.inner.answer)
    }
}

fn wrap(examples: Vec<InstructionExample>) -> Vec<Example> {
    examples.into_iter().map(|inner| Example { inner }).collect()
}

#[pyfunction]
#[pyo3(signature = (count, grammar_seed=0, seed=0))]
fn gen_text_corpus(count: usize, grammar_seed: u64, seed: u64) -> PyResult<Vec<Example>> {
    Ok(wrap(datagen::gen_text_corpus(count, grammar_seed, seed).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (count, side=3, grammar_seed=0, seed=0))]
fn gen_visual_corpus(count: usize, side: usize, grammar_seed: u64, seed: u64) -> PyResult<Vec<Example>> {
    Ok(wrap(datagen::gen_visual_corpus(count, side, grammar_seed, seed).map_err(err)?))
}

/// The toy multimodal target model.
#[pyclass(module = "msd", frozen)]
pub struct Target {
    inner: TargetParams,
}

#[pymethods]
impl Target {
    /// Random initialisation; `config` is a JSON object of target settings.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: TargetConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(err)?,
            None => TargetConfig::default(),
        };
        Ok(Self {
            inner: TargetParams::new(TargetConfig { seed, ..config }),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(err)?;
        let file = WeightFile::from_bytes(&bytes).map_err(err)?;
        Ok(Self {
            inner: file.target.ok_or_else(|| err("file holds no target weights"))?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = WeightFile {
            target: Some(self.inner.clone()),
            ..Default::default()
        };
        std::fs::write(path, file.to_bytes().map_err(err)?).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        use msd_core::layers::Parameters;
        self.inner.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Plain target decoding of the example's prompt.
    #[pyo3(signature = (example, max_tokens=24, temperature=0.0, seed=0))]
    fn generate(&self, example: &Example, max_tokens: usize, temperature: f64, seed: u64) -> PyResult<Vec<usize>> {
        let seq = example.inner.prompt(&self.inner).map_err(err)?;
        let out = self
            .inner
            .autoregressive_generate(&seq, temperature, max_tokens, &mut RngState::new(seed))
            .map_err(err)?;
        Ok(out.into_iter().map(|t| t.id).collect())
    }
}

fn draft_mode(mode: &str) -> PyResult<DraftMode> {
    match mode {
        "decoupled" => Ok(DraftMode::Decoupled),
        "baseline-concat" => Ok(DraftMode::BaselineConcat),
        other => Err(err(format!("unknown draft mode {other}"))),
    }
}

/// Single-block feature-level draft model tied to a target.
#[pyclass(module = "msd", frozen)]
pub struct Draft {
    inner: DraftParams,
}

#[pymethods]
impl Draft {
    #[new]
    #[pyo3(signature = (target, mode="decoupled", seed=1))]
    fn new(target: &Target, mode: &str, seed: u64) -> PyResult<Self> {
        let config = DraftConfig {
            mode: draft_mode(mode)?,
            seed,
            ..DraftConfig::default()
        };
        Ok(Self {
            inner: DraftParams::new(&target.inner, &config),
        })
    }

    #[staticmethod]
    fn load(path: &str, target: &Target) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(err)?;
        let file = WeightFile::from_bytes_with(&bytes, Some(&target.inner)).map_err(err)?;
        let (_, inner) = file.draft.ok_or_else(|| err("file holds no draft weights"))?;
        Ok(Self { inner })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            DraftMode::Decoupled => "decoupled",
            DraftMode::BaselineConcat => "baseline-concat",
        }
    }

    /// Mean held-out draft loss over `examples` with CE weight `w`.
    #[pyo3(signature = (target, examples, w=0.1))]
    fn loss(&self, target: &Target, examples: Vec<Example>, w: f64) -> PyResult<f64> {
        let raw: Vec<InstructionExample> = examples.into_iter().map(|e| e.inner).collect();
        let prepared = trainer::prepare_examples(&target.inner, &raw).map_err(err)?;
        trainer::mean_loss(&self.inner, &target.inner, &prepared, w).map_err(err)
    }
}

fn spec(mode: &str, gamma: usize, plan: Option<Vec<usize>>, temperature: f64, max_tokens: usize) -> PyResult<SpecConfig> {
    let mode = match mode {
        "chain" => DecodeMode::Chain { gamma },
        "tree" => DecodeMode::Tree {
            plan: plan.unwrap_or_else(|| vec![4, 2, 2, 1, 1]),
        },
        other => return Err(err(format!("unknown decode mode {other}"))),
    };
    Ok(SpecConfig {
        mode,
        temperature,
        max_tokens,
        rule: AcceptanceRule::Standard,
    })
}

fn metrics_dict<'py>(py: Python<'py>, m: &RunMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tau", m.tau)?;
    d.set_item("tau_accepted", m.tau_accepted)?;
    d.set_item("n_alpha", m.n_alpha.clone())?;
    d.set_item("cycles", m.cycles)?;
    d.set_item("tokens", m.tokens)?;
    Ok(d)
}

/// Speculative decoding of one prompt; returns `(tokens, metrics)`.
#[pyfunction]
#[pyo3(signature = (target, draft, example, mode="chain", gamma=4, plan=None, temperature=0.0, max_tokens=24, seed=0))]
#[allow(clippy::too_many_arguments)]
fn speculative_generate<'py>(
    py: Python<'py>,
    target: &Target,
    draft: &Draft,
    example: &Example,
    mode: &str,
    gamma: usize,
    plan: Option<Vec<usize>>,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, Bound<'py, PyDict>)> {
    let config = spec(mode, gamma, plan, temperature, max_tokens)?;
    let seq = example.inner.prompt(&target.inner).map_err(err)?;
    let (tokens, traces) =
        engine::speculative_generate(&target.inner, &draft.inner, &seq, &config, &mut RngState::new(seed)).map_err(err)?;
    let m = RunMetrics::from_traces(&traces).map_err(err)?;
    Ok((tokens, metrics_dict(py, &m)?))
}

/// Decodes every example; at temperature 0 outputs are checked against
/// plain target decoding. Returns the run metrics.
#[pyfunction]
#[pyo3(name = "bench", signature = (target, draft, examples, mode="chain", gamma=4, plan=None, temperature=0.0, max_tokens=24, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_benchmark<'py>(
    py: Python<'py>,
    target: &Target,
    draft: &Draft,
    examples: Vec<Example>,
    mode: &str,
    gamma: usize,
    plan: Option<Vec<usize>>,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = spec(mode, gamma, plan, temperature, max_tokens)?;
    let raw: Vec<InstructionExample> = examples.into_iter().map(|e| e.inner).collect();
    let run = run_bench(&target.inner, &draft.inner, &raw, &config, seed).map_err(err)?;
    let d = metrics_dict(py, &run.metrics)?;
    d.set_item("greedy_checked", run.greedy_checked)?;
    Ok(d)
}

/// Exhaustive losslessness certification; returns `(instances, max_tv, passed)`.
#[pyfunction]
#[pyo3(signature = (seeds=3, uncapped=false))]
fn verify_lossless(seeds: usize, uncapped: bool) -> PyResult<(usize, f64, bool)> {
    let rule = if uncapped {
        AcceptanceRule::UncappedRatio
    } else {
        AcceptanceRule::Standard
    };
    let report = certify(&default_grid(seeds), rule).map_err(err)?;
    Ok((report.instance_count, report.max_tv, report.passed))
}

#[pyfunction]
fn acceptance_probability(p: f64, q: f64) -> PyResult<f64> {
    verifier::acceptance_probability(p, q).map_err(err)
}

/// `norm(max(0, p − q))`; falls back to `p` when the residual vanishes.
#[pyfunction]
fn adjusted_distribution(p: Vec<f64>, q: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(verifier::adjusted_distribution(&p, &q).map_err(err)?.0)
}

#[pyfunction]
fn omega(gamma: usize, alpha: f64) -> PyResult<f64> {
    metrics::omega(gamma, alpha).map_err(err)
}

/// Speedup model with an explicit ω.
#[pyfunction]
#[pyo3(signature = (tokens, t_p, t_q, t_v, gamma, omega, t_profiling=0.0))]
fn speedup_ratio(tokens: f64, t_p: f64, t_q: f64, t_v: f64, gamma: usize, omega: f64, t_profiling: f64) -> PyResult<f64> {
    let inputs = SpeedupInputs {
        tokens,
        t_p,
        t_q,
        t_v,
        t_profiling,
        gamma,
    };
    metrics::speedup_ratio_with_omega(&inputs, omega).map_err(err)
}

#[pyfunction]
fn mix_fractions(t: usize, total: usize) -> PyResult<(f64, f64)> {
    trainer::mix_fractions(t, total).map_err(err)
}

#[pymodule]
fn msd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Example>()?;
    m.add_class::<Target>()?;
    m.add_class::<Draft>()?;
    m.add_function(wrap_pyfunction!(gen_text_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gen_visual_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(speculative_generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(verify_lossless, m)?)?;
    m.add_function(wrap_pyfunction!(acceptance_probability, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(omega, m)?)?;
    m.add_function(wrap_pyfunction!(speedup_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(mix_fractions, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
