//! Evaluation quantities computed from cycle traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::CycleTrace;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Mean tokens committed per cycle, correction/bonus token included.
pub fn compute_tau(traces: &[CycleTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let total: usize = traces.iter().map(|t| t.appended).sum();
    Ok(total as f64 / traces.len() as f64)
}

/// Mean accepted candidates per cycle (correction/bonus excluded).
pub fn compute_tau_accepted(traces: &[CycleTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let total: usize = traces.iter().map(|t| t.accepted).sum();
    Ok(total as f64 / traces.len() as f64)
}

/// Acceptance rate of the n-th chained candidate given the first n-1 were
/// accepted; `None` where no cycle got that far.
pub fn compute_n_alpha(traces: &[CycleTrace]) -> Result<Vec<Option<f64>>> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    if traces.iter().any(|t| t.mode != "chain") {
        return Err(Error::NotChainTraces);
    }
    let depth = traces.iter().map(|t| t.candidates.len()).max().unwrap_or(0);
    let mut reached = vec![0usize; depth];
    let mut accepted = vec![0usize; depth];
    for t in traces {
        for f in &t.accept_flags {
            reached[f.depth - 1] += 1;
            if f.accepted {
                accepted[f.depth - 1] += 1;
            }
        }
    }
    Ok(reached
        .iter()
        .zip(&accepted)
        .map(|(&r, &a)| (r > 0).then(|| a as f64 / r as f64))
        .collect())
}

/// Expected tokens per verification step, `Σ_{i=0..γ} α^i`.
pub fn omega(gamma: usize, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be at least 1".into()));
    }
    Ok((0..=gamma).map(|i| alpha.powi(i as i32)).sum())
}

/// Timing inputs of the speedup model (seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupInputs {
    pub tokens: f64,
    pub t_p: f64,
    pub t_q: f64,
    pub t_v: f64,
    pub t_profiling: f64,
    pub gamma: usize,
}

/// `(N·T_p + T_prof) / (N·(γ·T_q + T_v)/ω + T_prof)`.
pub fn speedup_ratio_with_omega(inputs: &SpeedupInputs, omega: f64) -> Result<f64> {
    let SpeedupInputs {
        tokens,
        t_p,
        t_q,
        t_v,
        t_profiling,
        gamma,
    } = *inputs;
    if [t_p, t_q, t_v, t_profiling].iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidArgument("timings must be non-negative".into()));
    }
    if tokens < 1.0 {
        return Err(Error::InvalidArgument("need at least one token".into()));
    }
    let denom = tokens * ((gamma as f64 * t_q + t_v) / omega) + t_profiling;
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("speedup denominator is zero".into()));
    }
    Ok((tokens * t_p + t_profiling) / denom)
}

pub fn speedup_ratio(inputs: &SpeedupInputs, alpha: f64) -> Result<f64> {
    speedup_ratio_with_omega(inputs, omega(inputs.gamma, alpha)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tau: f64,
    pub tau_accepted: f64,
    pub n_alpha: Option<Vec<Option<f64>>>,
    pub cycles: usize,
    pub tokens: usize,
    pub t_q: f64,
    pub t_v: f64,
}

impl RunMetrics {
    pub fn from_traces(traces: &[CycleTrace]) -> Result<Self> {
        let chain = traces.iter().all(|t| t.mode == "chain");
        let n = traces.len().max(1) as f64;
        let draft: f64 = traces.iter().map(|t| t.draft_time).sum();
        let verify: f64 = traces.iter().map(|t| t.verify_time).sum();
        let gamma = traces.iter().map(|t| t.candidates.len()).max().unwrap_or(1).max(1) as f64;
        Ok(Self {
            tau: compute_tau(traces)?,
            tau_accepted: compute_tau_accepted(traces)?,
            n_alpha: if chain { Some(compute_n_alpha(traces)?) } else { None },
            cycles: traces.len(),
            tokens: traces.iter().map(|t| t.appended).sum(),
            t_q: draft / n / gamma,
            t_v: verify / n,
        })
    }
}

/// Per-example totals used for resampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleCounts {
    pub tokens: usize,
    pub cycles: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDiff {
    /// Observed τ(a) − τ(b).
    pub diff: f64,
    /// Half-width of the 95% percentile interval of the resampled difference.
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BootstrapDiff {
    /// `a` beats `b` by more than the interval half-width.
    pub fn significant(&self) -> bool {
        self.diff > self.half_width
    }
}

fn ratio(xs: &[ExampleCounts], idx: impl Iterator<Item = usize>) -> f64 {
    let (mut t, mut c) = (0usize, 0usize);
    for i in idx {
        t += xs[i].tokens;
        c += xs[i].cycles;
    }
    t as f64 / c.max(1) as f64
}

/// Paired bootstrap over examples of τ(a) − τ(b), τ as a ratio of sums.
pub fn paired_bootstrap(a: &[ExampleCounts], b: &[ExampleCounts], resamples: usize, seed: u64) -> Result<BootstrapDiff> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("paired bootstrap needs equal, non-empty samples".into()));
    }
    let n = a.len();
    let diff = ratio(a, 0..n) - ratio(b, 0..n);
    let mut rng = RngState::new(seed);
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            ratio(a, idx.iter().copied()) - ratio(b, idx.iter().copied())
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let q = |f: f64| diffs[((f * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let (lower, upper) = (q(0.025), q(0.975));
    Ok(BootstrapDiff {
        diff,
        half_width: (upper - lower) / 2.0,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{AcceptFlag, CorrectionKind};
    use proptest::prelude::*;

    fn chain_trace(flags: &[bool], gamma: usize) -> CycleTrace {
        let accepted = flags.iter().take_while(|f| **f).count();
        CycleTrace {
            cycle_index: 0,
            mode: "chain".into(),
            candidates: vec![1; gamma],
            parents: (0..gamma).map(|i| i.checked_sub(1)).collect(),
            accept_flags: flags
                .iter()
                .enumerate()
                .map(|(i, &a)| AcceptFlag { node: i, depth: i + 1, accepted: a })
                .collect(),
            accepted,
            appended: accepted + 1,
            correction: 0,
            correction_kind: if accepted == gamma { CorrectionKind::Bonus } else { CorrectionKind::Resample },
            truncated: false,
            draft_time: 0.0,
            verify_time: 0.0,
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(compute_tau(&[chain_trace(&[true; 4], 4)]).unwrap(), 5.0);
        assert_eq!(compute_tau(&[chain_trace(&[false], 4)]).unwrap(), 1.0);
        let ts = [
            chain_trace(&[true; 4], 4),
            chain_trace(&[false], 4),
            chain_trace(&[true, true, false], 4),
        ];
        assert_eq!(compute_tau(&ts).unwrap(), 3.0);
        assert_eq!(compute_tau_accepted(&ts).unwrap(), 2.0);
        assert!(matches!(compute_tau(&[]), Err(Error::EmptyTraces)));
    }

    #[test]
    fn n_alpha_examples() {
        let all = compute_n_alpha(&[chain_trace(&[true; 3], 3), chain_trace(&[true; 3], 3)]).unwrap();
        assert_eq!(all, vec![Some(1.0); 3]);
        let a = compute_n_alpha(&[chain_trace(&[true, false], 3), chain_trace(&[true, true], 3)]).unwrap();
        assert_eq!(a[0], Some(1.0));
        assert_eq!(a[1], Some(0.5));
        assert_eq!(a[2], None);
        let mut tree = chain_trace(&[true], 1);
        tree.mode = "tree".into();
        assert_eq!(compute_n_alpha(&[tree]).unwrap_err().to_string(), "n-alpha defined for chain drafts");
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega(3, 0.5).unwrap(), 1.875);
        assert_eq!(omega(5, 0.0).unwrap(), 1.0);
        assert_eq!(omega(4, 1.0).unwrap(), 5.0);
        assert!(omega(2, 1.5).is_err());
    }

    #[test]
    fn speedup_examples() {
        let base = SpeedupInputs { tokens: 100.0, t_p: 10.0, t_q: 1.0, t_v: 12.0, t_profiling: 0.0, gamma: 4 };
        assert!((speedup_ratio_with_omega(&base, 3.0).unwrap() - 1.875).abs() < 1e-9);
        let free = SpeedupInputs { tokens: 50.0, t_p: 2.0, t_q: 0.0, t_v: 2.0, t_profiling: 0.0, gamma: 4 };
        assert!((speedup_ratio_with_omega(&free, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let huge = SpeedupInputs { t_profiling: 1e6 * 100.0 * 10.0, ..base };
        assert!((speedup_ratio_with_omega(&huge, 3.0).unwrap() - 1.0).abs() < 1e-3);
        let zero = SpeedupInputs { t_q: 0.0, t_v: 0.0, ..base };
        assert!(speedup_ratio_with_omega(&zero, 3.0).is_err());
    }

    #[test]
    fn bootstrap_separates_clear_differences() {
        let a: Vec<ExampleCounts> = (0..100).map(|i| ExampleCounts { tokens: 30 + i % 3, cycles: 10 }).collect();
        let b: Vec<ExampleCounts> = (0..100).map(|i| ExampleCounts { tokens: 20 + i % 5, cycles: 10 }).collect();
        let r = paired_bootstrap(&a, &b, 2000, 1).unwrap();
        assert!(r.significant());
        let same = paired_bootstrap(&a, &a, 2000, 1).unwrap();
        assert_eq!(same.diff, 0.0);
        assert!(!same.significant());
        assert_eq!(r, paired_bootstrap(&a, &b, 2000, 1).unwrap());
    }

    proptest! {
        #[test]
        fn omega_is_monotone(gamma in 1usize..8, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(omega(gamma, lo).unwrap() <= omega(gamma, hi).unwrap());
            prop_assert!(omega(gamma, a).unwrap() <= omega(gamma + 1, a).unwrap());
        }

        #[test]
        fn tau_is_total_over_cycles(cycles in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..5), 1..20)) {
            let ts: Vec<CycleTrace> = cycles.iter().map(|f| {
                let cut = f.iter().position(|x| !x).map_or(f.len(), |p| p + 1);
                chain_trace(&f[..cut], 4)
            }).collect();
            let total: usize = ts.iter().map(|t| t.appended).sum();
            prop_assert_eq!(compute_tau(&ts).unwrap(), total as f64 / ts.len() as f64);
            prop_assert!(compute_tau(&ts).unwrap() >= 1.0);
            for a in compute_n_alpha(&ts).unwrap().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn speedup_decreases_with_profiling(p1 in 0.0f64..1e4, extra in 1.0f64..1e4) {
            // ω = 3 > (γ·T_q + T_v)/T_p = 1.6
            let base = SpeedupInputs { tokens: 100.0, t_p: 10.0, t_q: 1.0, t_v: 12.0, t_profiling: p1, gamma: 4 };
            let more = SpeedupInputs { t_profiling: p1 + extra, ..base };
            prop_assert!(speedup_ratio_with_omega(&more, 3.0).unwrap() < speedup_ratio_with_omega(&base, 3.0).unwrap());
        }
    }
}
