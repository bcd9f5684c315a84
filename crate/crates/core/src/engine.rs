//! The draft→verify decode loop.
//!
//! The target cache always holds every committed position except the newest
//! one, which stays "pending": each cycle feeds it to the target together
//! with the candidates, so one forward scores the whole draft. The draft
//! cache holds the same positions, built from the target's true features.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{build_draft_inputs, draft_forward, draft_tree, extend_committed, DraftMode, DraftParams, DraftSession, DraftTree};
use crate::error::{Error, Result};
use crate::rng::Chance;
use crate::sampling::softmax_with_temperature;
use crate::target::{AssembledSequence, Modality, TargetParams, TargetSession, EOS};
use crate::tensor::Matrix;
use crate::verifier::{verify_chain, verify_tree, AcceptFlag, AcceptanceRule, CorrectionKind, VerificationResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeMode {
    Chain { gamma: usize },
    Tree { plan: Vec<usize> },
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Chain { .. } => "chain",
            DecodeMode::Tree { .. } => "tree",
        }
    }

    fn plan(&self) -> Vec<usize> {
        match self {
            DecodeMode::Chain { gamma } => vec![1; *gamma],
            DecodeMode::Tree { plan } => plan.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub rule: AcceptanceRule,
}

/// Everything recorded about one drafting-verification cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycle_index: usize,
    pub mode: String,
    pub candidates: Vec<usize>,
    pub parents: Vec<Option<usize>>,
    pub accept_flags: Vec<AcceptFlag>,
    /// Candidates kept (after truncation).
    pub accepted: usize,
    /// Tokens committed this cycle, correction/bonus included.
    pub appended: usize,
    pub correction: usize,
    pub correction_kind: CorrectionKind,
    pub truncated: bool,
    pub draft_time: f64,
    pub verify_time: f64,
}

impl CycleTrace {
    /// The trace as JSON with timing fields removed.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("trace serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("draft_time");
            obj.remove("verify_time");
        }
        v
    }
}

pub fn write_traces_jsonl<W: Write>(traces: &[CycleTrace], mut out: W) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces_jsonl<R: BufRead>(input: R) -> Result<Vec<CycleTrace>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Target scores for a drafted tree: `p` after the pending token, then after each node.
#[derive(Clone, Debug)]
pub struct Scores {
    pub p_root: Vec<f64>,
    pub p_nodes: Vec<Vec<f64>>,
}

/// Mutable generation state for one request.
#[derive(Clone, Debug)]
pub struct SpeculativeDecoder<'a> {
    target: &'a TargetParams,
    draft: &'a DraftParams,
    target_session: TargetSession,
    draft_session: DraftSession,
    pending: Vec<f64>,
    pending_visual: bool,
    generated: Vec<usize>,
    cycles: usize,
    done: bool,
}

impl<'a> SpeculativeDecoder<'a> {
    /// Prefills both models on `seq`. The last prompt position stays pending
    /// and is scored together with the first cycle's candidates; a
    /// one-position prompt leaves the draft without a frontier, so its first
    /// cycle proposes nothing and the target alone emits one token.
    pub fn prefill(target: &'a TargetParams, draft: &'a DraftParams, seq: &AssembledSequence) -> Result<Self> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::InvalidArgument("prompt is empty".into()));
        }
        let mut target_session = TargetSession::new(target);
        let mut draft_session = DraftSession::new(target);
        if len > 1 {
            let mut prefix = seq.clone();
            prefix.embeddings.truncate_rows(len - 1);
            prefix.modality.truncate(len - 1);
            prefix.token_ids.truncate(len - 1);
            let out = target.target_forward(&prefix, &mut target_session)?;
            let inputs = build_draft_inputs(seq, &out.hidden, draft)?;
            draft_forward(&inputs, target, draft, &mut draft_session)?;
        }
        Ok(Self {
            target,
            draft,
            target_session,
            draft_session,
            pending: seq.embeddings.row(len - 1).to_vec(),
            pending_visual: seq.modality[len - 1] == Modality::Visual,
            generated: Vec::new(),
            cycles: 0,
            done: false,
        })
    }

    pub fn generated(&self) -> &[usize] {
        &self.generated
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn target_session(&self) -> &TargetSession {
        &self.target_session
    }

    pub fn draft_session(&self) -> &DraftSession {
        &self.draft_session
    }

    /// Draft phase: builds the candidate tree from the draft frontier.
    pub fn draft_phase(&mut self, config: &SpecConfig, chance: &mut dyn Chance) -> Result<DraftTree> {
        if self.draft_session.is_empty() {
            return Ok(DraftTree { nodes: Vec::new(), expansions: Vec::new(), plan: config.mode.plan() });
        }
        draft_tree(
            &mut self.draft_session,
            self.target,
            self.draft,
            &config.mode.plan(),
            config.temperature,
            chance,
        )
    }

    /// One target forward over `[pending, candidates...]` under the tree mask.
    pub fn score(&mut self, tree: &DraftTree, temperature: f64) -> Result<Scores> {
        let mut rows = Matrix::zeros(0, self.target.dim());
        rows.push_row(&self.pending)?;
        let mut parents = vec![None];
        for n in &tree.nodes {
            rows.push_row(self.target.token_embedding(n.token)?)?;
            parents.push(Some(n.parent.map_or(0, |p| p + 1)));
        }
        let (_, logits) = self.target.forward_speculative(&mut self.target_session, &rows, &parents)?;
        let mut p = (0..logits.rows())
            .map(|i| softmax_with_temperature(logits.row(i), temperature))
            .collect::<Result<Vec<_>>>()?;
        let p_nodes = p.split_off(1);
        Ok(Scores {
            p_root: p.pop().expect("root row"),
            p_nodes,
        })
    }

    /// Verification decision only; no state changes besides `chance`.
    pub fn decide(
        tree: &DraftTree,
        scores: &Scores,
        config: &SpecConfig,
        chance: &mut dyn Chance,
    ) -> Result<VerificationResult> {
        match &config.mode {
            DecodeMode::Chain { .. } => {
                let mut p = Vec::with_capacity(tree.nodes.len() + 1);
                p.push(scores.p_root.clone());
                p.extend(scores.p_nodes.iter().cloned());
                let q: Vec<Vec<f64>> = tree.expansions.iter().map(|e| e.q.clone()).collect();
                verify_chain(&tree.tokens(), &q, &p, config.temperature, chance, config.rule)
            }
            DecodeMode::Tree { .. } => {
                verify_tree(tree, &scores.p_root, &scores.p_nodes, config.temperature, chance, config.rule)
            }
        }
    }

    /// Tokens a verification result actually appends, after EOS and
    /// max-token truncation.
    pub fn kept_tokens(&self, result: &VerificationResult, max_tokens: usize) -> Vec<usize> {
        let room = max_tokens.saturating_sub(self.generated.len());
        let mut kept = Vec::new();
        for t in result.appended() {
            if kept.len() == room {
                break;
            }
            kept.push(t);
            if t == EOS {
                break;
            }
        }
        kept
    }

    /// Commits the outcome of a scored cycle to both caches.
    pub fn apply(&mut self, result: &VerificationResult, max_tokens: usize) -> Result<(usize, bool)> {
        let kept = self.kept_tokens(result, max_tokens);
        let accepted = kept.len().min(result.accepted_count());
        let truncated = kept.len() < result.accepted_count() + 1;
        let mut keep = vec![0];
        keep.extend(result.accepted_nodes[..accepted].iter().map(|n| n + 1));
        self.target_session.commit(&keep)?;
        self.generated.extend_from_slice(&kept);
        self.cycles += 1;
        if kept.last() == Some(&EOS) || self.generated.len() >= max_tokens {
            self.done = true;
            return Ok((accepted, truncated));
        }
        // True features for the newly committed positions, each paired with
        // the embedding that follows it.
        let hidden = self.target_session.hidden();
        let first = hidden.rows() - keep.len();
        let mut rows = Matrix::zeros(0, self.target.dim());
        for (j, &tok) in kept.iter().enumerate() {
            if j == 0 && self.pending_visual && self.draft.mode == DraftMode::Decoupled {
                rows.push_row(&self.pending)?;
            } else {
                rows.push_row(&self.draft.fuse_row(hidden.row(first + j), self.target.token_embedding(tok)?))?;
            }
        }
        extend_committed(self.target, self.draft, &mut self.draft_session, &rows)?;
        let last = *kept.last().expect("at least one token per cycle");
        self.pending = self.target.token_embedding(last)?.to_vec();
        self.pending_visual = false;
        Ok((accepted, truncated))
    }

    /// One full drafting-verification cycle.
    pub fn step(&mut self, config: &SpecConfig, chance: &mut dyn Chance) -> Result<CycleTrace> {
        if self.done {
            return Err(Error::InvalidArgument("generation already finished".into()));
        }
        let t0 = Instant::now();
        let tree = self.draft_phase(config, chance)?;
        let draft_time = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let scores = self.score(&tree, config.temperature)?;
        let result = Self::decide(&tree, &scores, config, chance)?;
        let cycle_index = self.cycles;
        let before = self.generated.len();
        let (accepted, truncated) = self.apply(&result, config.max_tokens)?;
        let verify_time = t1.elapsed().as_secs_f64();
        Ok(CycleTrace {
            cycle_index,
            mode: config.mode.name().to_string(),
            candidates: tree.tokens(),
            parents: tree.parents(),
            accept_flags: result.flags.clone(),
            accepted,
            appended: self.generated.len() - before,
            correction: result.correction,
            correction_kind: result.correction_kind,
            truncated,
            draft_time,
            verify_time,
        })
    }

    pub fn run(&mut self, config: &SpecConfig, chance: &mut dyn Chance) -> Result<Vec<CycleTrace>> {
        let mut traces = Vec::new();
        while !self.done {
            traces.push(self.step(config, chance)?);
        }
        Ok(traces)
    }
}

/// Prefills and decodes to EOS or `max_tokens`.
pub fn speculative_generate(
    target: &TargetParams,
    draft: &DraftParams,
    seq: &AssembledSequence,
    config: &SpecConfig,
    chance: &mut dyn Chance,
) -> Result<(Vec<usize>, Vec<CycleTrace>)> {
    if config.max_tokens == 0 {
        return Err(Error::InvalidArgument("max tokens must be at least 1".into()));
    }
    let mut dec = SpeculativeDecoder::prefill(target, draft, seq)?;
    let traces = dec.run(config, chance)?;
    Ok((dec.generated, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::DraftConfig;
    use crate::rng::RngState;
    use crate::target::{ImagePatchGrid, TargetConfig, TextRole, TextToken};

    fn models(seed: u64, vocab: usize) -> (TargetParams, DraftParams) {
        let t = TargetParams::new(TargetConfig {
            vocab,
            dim: 8,
            heads: 2,
            depth: 2,
            vision_depth: 1,
            patch_dim: 3,
            max_patches: 4,
            mlp_hidden: 12,
            projector_hidden: 10,
            max_positions: 40,
            seed,
        });
        let mode = if seed.is_multiple_of(2) { DraftMode::Decoupled } else { DraftMode::BaselineConcat };
        let d = DraftParams::new(&t, &DraftConfig { mode, mlp_hidden: 12, seed: seed + 1000 });
        (t, d)
    }

    fn prompt(t: &TargetParams, seed: u64, with_image: bool, instr: usize) -> AssembledSequence {
        let mut rng = RngState::new(seed ^ 77);
        let grid = with_image.then(|| ImagePatchGrid::new(2, Matrix::randn(4, 3, 1.0, &mut rng)).unwrap());
        let v = t.vocab();
        let ids: Vec<usize> = (0..instr).map(|i| 1 + (i * 7 + seed as usize) % (v - 1)).collect();
        t.assemble_sequence(
            &TextToken::list(&[1], TextRole::System),
            grid.as_ref(),
            &TextToken::list(&ids, TextRole::Instruction),
        )
        .unwrap()
    }

    #[test]
    fn greedy_output_equals_autoregressive() {
        let modes = [
            DecodeMode::Chain { gamma: 1 },
            DecodeMode::Chain { gamma: 4 },
            DecodeMode::Tree { plan: vec![2, 1] },
            DecodeMode::Tree { plan: vec![4, 2, 2, 1, 1] },
        ];
        for seed in 0..40u64 {
            let (t, d) = models(seed, 10);
            let with_image = seed % 2 == 0;
            let seq = prompt(&t, seed, with_image, (seed % 3) as usize + usize::from(!with_image && seed % 3 == 0));
            let ar = t.autoregressive_generate(&seq, 0.0, 12, &mut RngState::new(0)).unwrap();
            let ar: Vec<usize> = ar.iter().map(|x| x.id).collect();
            for mode in &modes {
                let cfg = SpecConfig { mode: mode.clone(), temperature: 0.0, max_tokens: 12, rule: AcceptanceRule::Standard };
                let (out, traces) = speculative_generate(&t, &d, &seq, &cfg, &mut RngState::new(seed)).unwrap();
                assert_eq!(out, ar, "seed {seed} mode {mode:?}");
                let total: usize = traces.iter().map(|c| c.appended).sum();
                assert_eq!(total, out.len());
            }
        }
    }

    #[test]
    fn one_position_prompt_starts_with_a_target_only_cycle() {
        for seed in 0..8u64 {
            let (t, d) = models(seed, 9);
            let seq = prompt(&t, seed, false, 0);
            assert_eq!(seq.len(), 1);
            let ar = t.autoregressive_generate(&seq, 0.0, 10, &mut RngState::new(0)).unwrap();
            let ar: Vec<usize> = ar.iter().map(|x| x.id).collect();
            for mode in [DecodeMode::Chain { gamma: 3 }, DecodeMode::Tree { plan: vec![2, 2] }] {
                let cfg = SpecConfig { mode, temperature: 0.0, max_tokens: 10, rule: AcceptanceRule::Standard };
                let (out, traces) = speculative_generate(&t, &d, &seq, &cfg, &mut RngState::new(seed)).unwrap();
                assert_eq!(out, ar);
                assert!(traces[0].candidates.is_empty());
                assert_eq!(traces[0].appended, 1);
                assert!(traces[1..].iter().all(|c| !c.candidates.is_empty()));
            }
        }
    }

    #[test]
    fn cycle_arithmetic_and_prefix_integrity() {
        for seed in 0..10u64 {
            let (t, d) = models(seed, 8);
            let seq = prompt(&t, seed, true, 2);
            let cfg = SpecConfig { mode: DecodeMode::Tree { plan: vec![3, 2, 1] }, temperature: 1.0, max_tokens: 20, rule: AcceptanceRule::Standard };
            let mut dec = SpeculativeDecoder::prefill(&t, &d, &seq).unwrap();
            let mut rng = RngState::new(seed);
            while !dec.is_done() {
                let tr = dec.step(&cfg, &mut rng).unwrap();
                if !tr.truncated {
                    assert_eq!(tr.appended, tr.accepted + 1);
                }
                assert!(tr.appended >= 1 && tr.appended <= 4);
                let session = dec.target_session();
                let mut fresh = TargetSession::new(&t);
                let committed = AssembledSequence {
                    embeddings: session.inputs().clone(),
                    modality: vec![Modality::Text; session.len()],
                    token_ids: vec![None; session.len()],
                    system_len: 0,
                    visual: 0..0,
                };
                let out = t.target_forward(&committed, &mut fresh).unwrap();
                assert!(out.hidden.max_abs_diff(session.hidden()) <= 1e-10);
                if !dec.is_done() {
                    assert_eq!(dec.draft_session().len(), session.len());
                }
            }
        }
    }

    #[test]
    fn max_tokens_truncates_mid_cycle() {
        let (t, d) = models(3, 8);
        let seq = prompt(&t, 3, false, 3);
        let cfg = SpecConfig { mode: DecodeMode::Chain { gamma: 4 }, temperature: 0.0, max_tokens: 2, rule: AcceptanceRule::Standard };
        let (out, traces) = speculative_generate(&t, &d, &seq, &cfg, &mut RngState::new(0)).unwrap();
        assert!(out.len() <= 2);
        let total: usize = traces.iter().map(|c| c.appended).sum();
        assert_eq!(total, out.len());
    }

    #[test]
    fn empty_prompt_rejected() {
        let (t, d) = models(1, 8);
        let mut seq = t.assemble_sequence(&[], None, &TextToken::list(&[2], TextRole::Instruction)).unwrap();
        seq.embeddings.truncate_rows(0);
        seq.modality.clear();
        seq.token_ids.clear();
        assert!(SpeculativeDecoder::prefill(&t, &d, &seq).is_err());
    }

    #[test]
    fn traces_round_trip_jsonl() {
        let (t, d) = models(2, 8);
        let seq = prompt(&t, 2, true, 1);
        let cfg = SpecConfig { mode: DecodeMode::Tree { plan: vec![2, 1] }, temperature: 1.0, max_tokens: 10, rule: AcceptanceRule::Standard };
        let (_, traces) = speculative_generate(&t, &d, &seq, &cfg, &mut RngState::new(5)).unwrap();
        let mut buf = Vec::new();
        write_traces_jsonl(&traces, &mut buf).unwrap();
        let back = read_traces_jsonl(&buf[..]).unwrap();
        assert_eq!(back, traces);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"correction_kind\""));
    }

    #[test]
    fn first_token_frequencies_match_target_within_three_sigma() {
        // vocab 4: the speculative first token must follow the target's p.
        let (t, d) = models(12, 4);
        let seq = prompt(&t, 12, true, 1);
        let mut session = TargetSession::new(&t);
        let out = t.target_forward(&seq, &mut session).unwrap();
        let p = out.distribution(seq.len() - 1, 1.0).unwrap();
        let cfg = SpecConfig { mode: DecodeMode::Chain { gamma: 2 }, temperature: 1.0, max_tokens: 1, rule: AcceptanceRule::Standard };
        let base = SpeculativeDecoder::prefill(&t, &d, &seq).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = RngState::new(2024);
        for _ in 0..n {
            let mut dec = base.clone();
            dec.step(&cfg, &mut rng).unwrap();
            counts[dec.generated()[0]] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let sigma = (n as f64 * p[k] * (1.0 - p[k])).sqrt();
            assert!((c as f64 - n as f64 * p[k]).abs() <= 3.0 * sigma + 1.0, "token {k}: {c} vs {}", n as f64 * p[k]);
        }
    }
}
