//! Benchmark runs: speculative decoding over an evaluation set with
//! per-example traces, the inline greedy-equivalence check and timing
//! aggregates for the speedup model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::InstructionExample;
use crate::draft::DraftParams;
use crate::engine::{speculative_generate, CycleTrace, SpecConfig};
use crate::error::{Error, Result};
use crate::metrics::{ExampleCounts, RunMetrics};
use crate::rng::RngState;
use crate::target::TargetParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub index: usize,
    pub output: Vec<usize>,
    pub counts: ExampleCounts,
    pub traces: Vec<CycleTrace>,
}

/// Wall-clock aggregates in seconds; never part of deterministic outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Mean autoregressive target step.
    pub t_p: f64,
    /// Mean prefill over the prompt.
    pub t_profiling: f64,
    /// Mean draft time per candidate.
    pub t_q: f64,
    /// Mean verification forward.
    pub t_v: f64,
    pub speculative_seconds: f64,
    pub autoregressive_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub spec: SpecConfig,
    pub metrics: RunMetrics,
    pub examples: Vec<ExampleResult>,
    /// Outputs matched plain target decoding (checked at temperature 0).
    pub greedy_checked: bool,
    pub timing: Timing,
}

impl BenchRun {
    pub fn counts(&self) -> Vec<ExampleCounts> {
        self.examples.iter().map(|e| e.counts).collect()
    }

    pub fn traces(&self) -> Vec<CycleTrace> {
        self.examples.iter().flat_map(|e| e.traces.iter().cloned()).collect()
    }
}

/// Decodes every example's prompt. Example `i` draws from stream `i` of
/// `seed`. At temperature 0 each output is compared with plain target
/// decoding and any difference is an error.
pub fn run_bench(
    target: &TargetParams,
    draft: &DraftParams,
    examples: &[InstructionExample],
    spec: &SpecConfig,
    seed: u64,
) -> Result<BenchRun> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let greedy = spec.temperature == 0.0;
    let mut results = Vec::with_capacity(examples.len());
    let mut timing = Timing::default();
    let (mut ar_tokens, mut prefill_total) = (0usize, 0.0);
    for (index, ex) in examples.iter().enumerate() {
        let seq = ex.prompt(target)?;
        let start = Instant::now();
        let (output, traces) = speculative_generate(target, draft, &seq, spec, &mut RngState::derive(seed, index as u64))?;
        timing.speculative_seconds += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut session = crate::target::TargetSession::new(target);
        target.target_forward(&seq, &mut session)?;
        prefill_total += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let reference = target.autoregressive_generate(&seq, spec.temperature, spec.max_tokens, &mut RngState::derive(seed, index as u64))?;
        timing.autoregressive_seconds += start.elapsed().as_secs_f64();
        ar_tokens += reference.len();
        if greedy {
            let reference: Vec<usize> = reference.iter().map(|t| t.id).collect();
            if reference != output {
                return Err(Error::GreedyMismatch { example: index });
            }
        }
        results.push(ExampleResult {
            index,
            counts: ExampleCounts {
                tokens: output.len(),
                cycles: traces.len(),
            },
            output,
            traces,
        });
    }
    let all: Vec<CycleTrace> = results.iter().flat_map(|e| e.traces.iter().cloned()).collect();
    let metrics = RunMetrics::from_traces(&all)?;
    timing.t_profiling = prefill_total / examples.len() as f64;
    timing.t_p = ((timing.autoregressive_seconds - prefill_total) / ar_tokens.max(1) as f64).max(0.0);
    timing.t_q = metrics.t_q;
    timing.t_v = metrics.t_v;
    Ok(BenchRun {
        spec: spec.clone(),
        metrics,
        examples: results,
        greedy_checked: greedy,
        timing,
    })
}
