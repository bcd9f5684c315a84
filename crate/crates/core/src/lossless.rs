//! Exhaustive certification that speculative decoding reproduces the
//! target's output distribution.
//!
//! Every random choice goes through [`Chance`]; [`ScriptedChance`] replays a
//! script of branch indices and multiplies up the probability of the branch
//! taken, so running a cycle once per script (odometer order) enumerates
//! every outcome with its exact weight. Cycles compose through a memo keyed
//! on the committed output, because the decoder state after a cycle depends
//! only on which tokens were committed. The reference distribution comes
//! from an independent path enumeration over full target re-forwards.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::draft::{DraftConfig, DraftMode, DraftParams};
use crate::engine::{DecodeMode, SpecConfig, SpeculativeDecoder};
use crate::error::{Error, Result};
use crate::rng::{Chance, RngState};
use crate::sampling::softmax_with_temperature;
use crate::target::{AssembledSequence, ImagePatchGrid, TargetConfig, TargetParams, TargetSession, TextRole, TextToken, EOS};
use crate::tensor::Matrix;
use crate::verifier::AcceptanceRule;

pub type OutputDistribution = BTreeMap<Vec<usize>, f64>;

/// Replays a fixed branch script; unscripted calls take branch 0.
#[derive(Debug, Default)]
pub struct ScriptedChance {
    script: Vec<usize>,
    arity: Vec<usize>,
    cursor: usize,
    weight: f64,
    improper: Option<f64>,
}

impl ScriptedChance {
    pub fn new(script: Vec<usize>) -> Self {
        Self {
            script,
            arity: Vec::new(),
            cursor: 0,
            weight: 1.0,
            improper: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn choose(&mut self, arity: usize) -> usize {
        if self.cursor == self.script.len() {
            self.script.push(0);
        }
        self.arity.push(arity);
        let c = self.script[self.cursor];
        self.cursor += 1;
        c
    }

    /// The next script in odometer order, or `None` when exhausted.
    fn next_script(mut self) -> Option<Vec<usize>> {
        self.script.truncate(self.cursor);
        while let Some(last) = self.script.pop() {
            let k = self.script.len();
            if last + 1 < self.arity[k] {
                self.script.push(last + 1);
                return Some(self.script);
            }
        }
        None
    }
}

impl Chance for ScriptedChance {
    fn categorical(&mut self, dist: &[f64]) -> Result<usize> {
        let support: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
        if support.is_empty() {
            return Err(Error::InvalidDistribution("all-zero".into()));
        }
        let i = support[self.choose(support.len())];
        self.weight *= dist[i];
        Ok(i)
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        // Branch weights are p and 1 - p; a branch of weight zero is skipped.
        // Signed weights would let an out-of-range p cancel out exactly, so it
        // is recorded and fails the enumeration instead.
        if !(0.0..=1.0).contains(&p) {
            self.improper.get_or_insert(p);
        }
        let mut branches = Vec::with_capacity(2);
        if p != 0.0 {
            branches.push(true);
        }
        if p != 1.0 {
            branches.push(false);
        }
        let b = branches[self.choose(branches.len())];
        self.weight *= if b { p } else { 1.0 - p };
        b
    }
}

/// Runs `f` once per branch script; returns `(weight, output)` for every outcome.
pub fn enumerate_outcomes<T>(mut f: impl FnMut(&mut ScriptedChance) -> Result<T>) -> Result<Vec<(f64, T)>> {
    let mut out = Vec::new();
    let mut script = Vec::new();
    loop {
        let mut chance = ScriptedChance::new(script);
        let value = f(&mut chance)?;
        if let Some(p) = chance.improper {
            return Err(Error::ImproperProbability(p));
        }
        out.push((chance.weight, value));
        match chance.next_script() {
            Some(s) => script = s,
            None => return Ok(out),
        }
    }
}

/// Exact output distribution of plain decoding, by path enumeration with a
/// fresh full forward for every prefix.
pub fn autoregressive_distribution(
    target: &TargetParams,
    seq: &AssembledSequence,
    temperature: f64,
    max_tokens: usize,
) -> Result<OutputDistribution> {
    fn walk(
        target: &TargetParams,
        seq: &AssembledSequence,
        temperature: f64,
        max_tokens: usize,
        prefix: &mut Vec<usize>,
        mass: f64,
        out: &mut OutputDistribution,
    ) -> Result<()> {
        let mut full = seq.clone();
        full.extend_text(prefix, target)?;
        let logits = target.target_forward(&full, &mut TargetSession::new(target))?.logits;
        let p = softmax_with_temperature(logits.row(full.len() - 1), temperature)?;
        for (tok, &pt) in p.iter().enumerate() {
            if pt == 0.0 {
                continue;
            }
            prefix.push(tok);
            if tok == EOS || prefix.len() == max_tokens {
                *out.entry(prefix.clone()).or_insert(0.0) += mass * pt;
            } else {
                walk(target, seq, temperature, max_tokens, prefix, mass * pt, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(target, seq, temperature, max_tokens, &mut Vec::new(), 1.0, &mut out)?;
    Ok(out)
}

/// Exact output distribution of speculative decoding.
pub fn speculative_distribution(
    target: &TargetParams,
    draft: &DraftParams,
    seq: &AssembledSequence,
    config: &SpecConfig,
) -> Result<OutputDistribution> {
    let dec = SpeculativeDecoder::prefill(target, draft, seq)?;
    let mut memo = HashMap::new();
    cycle_distribution(&dec, config, &mut memo)
}

fn cycle_distribution(
    dec: &SpeculativeDecoder<'_>,
    config: &SpecConfig,
    memo: &mut HashMap<Vec<usize>, OutputDistribution>,
) -> Result<OutputDistribution> {
    if dec.is_done() {
        return Ok(BTreeMap::from([(dec.generated().to_vec(), 1.0)]));
    }
    if let Some(d) = memo.get(dec.generated()) {
        return Ok(d.clone());
    }
    let mut drafter = dec.clone();
    let trees = enumerate_outcomes(|ch| drafter.draft_phase(config, ch))?;
    // Weight of each committed block, with one successor state per block.
    let mut blocks: BTreeMap<Vec<usize>, (f64, Option<SpeculativeDecoder<'_>>)> = BTreeMap::new();
    for (w_draft, tree) in trees {
        let mut scored = dec.clone();
        let scores = scored.score(&tree, config.temperature)?;
        let decisions = enumerate_outcomes(|ch| SpeculativeDecoder::decide(&tree, &scores, config, ch))?;
        for (w_verify, result) in decisions {
            let kept = scored.kept_tokens(&result, config.max_tokens);
            let entry = blocks.entry(kept).or_insert((0.0, None));
            entry.0 += w_draft * w_verify;
            if entry.1.is_none() {
                let mut next = scored.clone();
                next.apply(&result, config.max_tokens)?;
                entry.1 = Some(next);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (_, (w, next)) in blocks {
        let next = next.expect("state recorded with its block");
        for (seq, p) in cycle_distribution(&next, config, memo)? {
            *out.entry(seq).or_insert(0.0) += w * p;
        }
    }
    memo.insert(dec.generated().to_vec(), out.clone());
    Ok(out)
}

pub fn total_variation(a: &OutputDistribution, b: &OutputDistribution) -> f64 {
    let mut sum = 0.0;
    for (k, pa) in a {
        sum += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in b {
        if !a.contains_key(k) {
            sum += pb.abs();
        }
    }
    0.5 * sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosslessInstance {
    pub vocab: usize,
    pub temperature: f64,
    pub mode: DecodeMode,
    pub seed: u64,
    pub max_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance: LosslessInstance,
    pub draft_mode: DraftMode,
    pub outcomes: usize,
    pub tv: f64,
    /// Set when the decoder asked for a probability outside [0, 1].
    pub violation: Option<String>,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none() && self.tv <= TV_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub rule: AcceptanceRule,
    pub tolerance: f64,
    pub instance_count: usize,
    pub max_tv: f64,
    pub passed: bool,
    pub instances: Vec<InstanceReport>,
}

pub const TV_TOLERANCE: f64 = 1e-9;

/// vocab {3, 4, 6} × T {0.7, 1.0} × {chain 1, chain 2, tree [2,1]} × 3 seeds.
/// Outputs are capped at 3 tokens.
pub fn default_grid(seeds: usize) -> Vec<LosslessInstance> {
    let mut grid = Vec::new();
    for vocab in [3, 4, 6] {
        for temperature in [0.7, 1.0] {
            for mode in [
                DecodeMode::Chain { gamma: 1 },
                DecodeMode::Chain { gamma: 2 },
                DecodeMode::Tree { plan: vec![2, 1] },
            ] {
                for seed in 0..seeds as u64 {
                    grid.push(LosslessInstance {
                        vocab,
                        temperature,
                        mode: mode.clone(),
                        seed,
                        max_tokens: 3,
                    });
                }
            }
        }
    }
    grid
}

/// Tiny seeded target, draft and prompt for one instance. Prompts carry a
/// one-patch image; every third seed ends the prompt on the visual position.
pub fn tiny_instance(vocab: usize, seed: u64) -> Result<(TargetParams, DraftParams, AssembledSequence)> {
    let target = TargetParams::new(TargetConfig {
        vocab,
        dim: 6,
        heads: 2,
        depth: 1,
        vision_depth: 1,
        patch_dim: 2,
        max_patches: 1,
        mlp_hidden: 8,
        projector_hidden: 6,
        max_positions: 16,
        seed: 10_000 + seed * 31 + vocab as u64,
    });
    let mode = if seed.is_multiple_of(2) {
        DraftMode::Decoupled
    } else {
        DraftMode::BaselineConcat
    };
    let draft = DraftParams::new(
        &target,
        &DraftConfig {
            mode,
            mlp_hidden: 8,
            seed: 20_000 + seed,
        },
    );
    let mut rng = RngState::new(30_000 + seed);
    let grid = ImagePatchGrid::new(1, Matrix::randn(1, 2, 1.0, &mut rng))?;
    let instruction: Vec<usize> = if seed % 3 == 2 {
        Vec::new()
    } else {
        vec![1 + seed as usize % (vocab - 1)]
    };
    let seq = target.assemble_sequence(
        &TextToken::list(&[1], TextRole::System),
        Some(&grid),
        &TextToken::list(&instruction, TextRole::Instruction),
    )?;
    Ok((target, draft, seq))
}

pub fn certify_instance(instance: &LosslessInstance, rule: AcceptanceRule) -> Result<InstanceReport> {
    let (target, draft, seq) = tiny_instance(instance.vocab, instance.seed)?;
    let config = SpecConfig {
        mode: instance.mode.clone(),
        temperature: instance.temperature,
        max_tokens: instance.max_tokens,
        rule,
    };
    let reference = autoregressive_distribution(&target, &seq, instance.temperature, instance.max_tokens)?;
    let (tv, violation) = match speculative_distribution(&target, &draft, &seq, &config) {
        Ok(spec) => (total_variation(&reference, &spec), None),
        Err(e @ Error::ImproperProbability(_)) => (f64::NAN, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(InstanceReport {
        instance: instance.clone(),
        draft_mode: draft.mode,
        outcomes: reference.len(),
        tv,
        violation,
    })
}

pub fn certify(grid: &[LosslessInstance], rule: AcceptanceRule) -> Result<CertificationReport> {
    let instances = grid
        .iter()
        .map(|i| certify_instance(i, rule))
        .collect::<Result<Vec<_>>>()?;
    let max_tv = instances.iter().map(|r| r.tv).filter(|t| t.is_finite()).fold(0.0, f64::max);
    Ok(CertificationReport {
        rule,
        tolerance: TV_TOLERANCE,
        instance_count: instances.len(),
        max_tv,
        passed: instances.iter().all(InstanceReport::passed),
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::verify_chain;

    #[test]
    fn odometer_covers_every_branch_once() {
        let outcomes = enumerate_outcomes(|ch| {
            let a = ch.categorical(&[0.5, 0.0, 0.5])?;
            let b = ch.bernoulli(0.25);
            Ok((a, b))
        })
        .unwrap();
        let keys: Vec<(usize, bool)> = outcomes.iter().map(|(_, v)| *v).collect();
        assert_eq!(keys, vec![(0, true), (0, false), (2, true), (2, false)]);
        let total: f64 = outcomes.iter().map(|(w, _)| w).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!((outcomes[1].0 - 0.375).abs() < 1e-15);
    }

    #[test]
    fn certain_bernoulli_has_one_branch() {
        let outcomes = enumerate_outcomes(|ch| Ok(ch.bernoulli(1.0))).unwrap();
        assert_eq!(outcomes, vec![(1.0, true)]);
    }

    fn random_dist(rng: &mut RngState, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    /// Fixed p/q tables, vocab 3, γ = 2: completing each appended block with
    /// the target's own conditionals must give the target's joint over three tokens.
    fn chain_block_matches_tables(rule: AcceptanceRule, seed: u64) -> Result<f64> {
        let v = 3;
        let mut rng = RngState::new(seed);
        let p1 = random_dist(&mut rng, v);
        let p2: Vec<Vec<f64>> = (0..v).map(|_| random_dist(&mut rng, v)).collect();
        let p3: Vec<Vec<Vec<f64>>> = (0..v).map(|_| (0..v).map(|_| random_dist(&mut rng, v)).collect()).collect();
        let q1 = random_dist(&mut rng, v);
        let q2: Vec<Vec<f64>> = (0..v).map(|_| random_dist(&mut rng, v)).collect();
        let reference: OutputDistribution = (0..v)
            .flat_map(|a| (0..v).flat_map(move |b| (0..v).map(move |c| (a, b, c))))
            .map(|(a, b, c)| (vec![a, b, c], p1[a] * p2[a][b] * p3[a][b][c]))
            .collect();
        let outcomes = enumerate_outcomes(|ch| {
            let x1 = ch.categorical(&q1)?;
            let x2 = ch.categorical(&q2[x1])?;
            let p = vec![p1.clone(), p2[x1].clone(), p3[x1][x2].clone()];
            verify_chain(&[x1, x2], &[q1.clone(), q2[x1].clone()], &p, 1.0, ch, rule)
        })?;
        let mut spec = OutputDistribution::new();
        for (w, r) in outcomes {
            let block = r.appended();
            let completions: Vec<(Vec<usize>, f64)> = match block.len() {
                1 => (0..v)
                    .flat_map(|b| (0..v).map(move |c| (b, c)))
                    .map(|(b, c)| (vec![block[0], b, c], p2[block[0]][b] * p3[block[0]][b][c]))
                    .collect(),
                2 => (0..v).map(|c| (vec![block[0], block[1], c], p3[block[0]][block[1]][c])).collect(),
                _ => vec![(block.clone(), 1.0)],
            };
            for (s, pc) in completions {
                *spec.entry(s).or_insert(0.0) += w * pc;
            }
        }
        Ok(total_variation(&reference, &spec))
    }

    #[test]
    fn chain_verification_is_exact_on_tables() {
        for seed in 0..20 {
            assert!(chain_block_matches_tables(AcceptanceRule::Standard, seed).unwrap() <= 1e-12);
        }
        let broken = (0..20).filter(|&s| {
            matches!(
                chain_block_matches_tables(AcceptanceRule::UncappedRatio, s),
                Err(Error::ImproperProbability(_))
            )
        });
        assert!(broken.count() > 0);
    }

    #[test]
    fn autoregressive_distribution_sums_to_one() {
        let (t, _, seq) = tiny_instance(4, 0).unwrap();
        let d = autoregressive_distribution(&t, &seq, 1.0, 2).unwrap();
        let s: f64 = d.values().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(d.keys().all(|k| k.len() == 2 || k.last() == Some(&EOS)));
    }

    #[test]
    fn tree_instance_certifies_and_mutation_fails() {
        let inst = LosslessInstance {
            vocab: 4,
            temperature: 1.0,
            mode: DecodeMode::Tree { plan: vec![2, 1] },
            seed: 1,
            max_tokens: 2,
        };
        let good = certify_instance(&inst, AcceptanceRule::Standard).unwrap();
        assert!(good.tv <= TV_TOLERANCE, "tv {}", good.tv);
        let bad = certify_instance(&inst, AcceptanceRule::UncappedRatio).unwrap();
        assert!(!bad.passed());
        assert!(bad.violation.unwrap().contains("improper"));
    }

    #[test]
    fn default_grid_has_fifty_four_instances() {
        assert_eq!(default_grid(3).len(), 54);
    }
}
