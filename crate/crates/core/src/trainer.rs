//! Draft training against frozen target teacher signals: the feature
//! regression loss with analytic gradients, the progressive text→visual
//! epoch mix, and the two-stage schedule with its ablation presets.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::InstructionExample;
use crate::draft::{DraftConfig, DraftMode, DraftParams};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::mask::AttentionMask;
use crate::optim::{clip_global_norm, cosine_lr, Sgd};
use crate::rng::RngState;
use crate::sampling::argmax;
use crate::target::{AssembledSequence, Modality, TargetParams, TargetSession};
use crate::tensor::{axpy, dot, Matrix};

/// One sequence with its cached teacher signals.
///
/// Draft row `i` sees `(h_i, e_{i+1})` and predicts `h_{i+1}`; only rows whose
/// predicted position lies in the text continuation (after the system prefix
/// and the image span) are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    /// Teacher features, one row per position.
    pub hidden: Matrix,
    /// Teacher argmax next token at each position.
    pub teacher_tokens: Vec<usize>,
    /// Draft rows included in the loss.
    pub scored: Vec<usize>,
    pub visual: bool,
    /// First answer position (prompt length).
    pub answer_start: usize,
}

impl TrainExample {
    pub fn new(target: &TargetParams, example: &InstructionExample) -> Result<Self> {
        let seq = example.full_sequence(target)?;
        Self::from_sequence(target, &seq, seq.len() - example.answer.len())
    }

    pub fn from_sequence(target: &TargetParams, seq: &AssembledSequence, answer_start: usize) -> Result<Self> {
        let n = seq.len();
        if n < 2 {
            return Err(Error::InvalidArgument("training sequence needs two positions".into()));
        }
        let mut session = TargetSession::new(target);
        let out = target.target_forward(seq, &mut session)?;
        let text_start = seq.system_len.max(seq.visual.end).max(1);
        // The final position only predicts past the end of the example.
        let scored = (text_start..n - 1).map(|p| p - 1).collect();
        Ok(Self {
            embeddings: seq.embeddings.clone(),
            modality: seq.modality.clone(),
            hidden: out.hidden,
            teacher_tokens: (0..n).map(|i| argmax(out.logits.row(i))).collect(),
            scored,
            visual: !seq.visual.is_empty(),
            answer_start,
        })
    }

    /// Number of draft rows (every position with a successor).
    pub fn rows(&self) -> usize {
        self.embeddings.rows() - 1
    }
}

pub fn prepare_examples(target: &TargetParams, examples: &[InstructionExample]) -> Result<Vec<TrainExample>> {
    examples.iter().map(|e| TrainExample::new(target, e)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub feature: f64,
    pub cross_entropy: f64,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

struct DraftPass {
    features: Matrix,
    tape: crate::layers::BlockTape,
    fuse_in: Matrix,
    fused_rows: Vec<usize>,
}

/// Teacher-forced draft forward over every row of `example`.
fn draft_pass(draft: &DraftParams, target: &TargetParams, example: &TrainExample) -> Result<DraftPass> {
    let n = example.rows();
    let d = draft.dim();
    let mut x = Matrix::zeros(n, d);
    let mut fuse_in = Matrix::zeros(0, 2 * d);
    let mut fused_rows = Vec::new();
    let mut cat = vec![0.0; 2 * d];
    for i in 0..n {
        if example.modality[i] == Modality::Visual && draft.mode == DraftMode::Decoupled {
            x.row_mut(i).copy_from_slice(example.embeddings.row(i));
        } else {
            cat[..d].copy_from_slice(example.hidden.row(i));
            cat[d..].copy_from_slice(example.embeddings.row(i + 1));
            fuse_in.push_row(&cat)?;
            fused_rows.push(i);
        }
    }
    let fused = draft.fuse.forward(&fuse_in);
    for (r, &i) in fused_rows.iter().enumerate() {
        x.row_mut(i).copy_from_slice(fused.row(r));
    }
    for i in 0..n {
        axpy(x.row_mut(i), 1.0, target.position(i)?);
    }
    let (features, tape) = draft.block.forward_train(&x, &AttentionMask::causal(n))?;
    Ok(DraftPass {
        features,
        tape,
        fuse_in,
        fused_rows,
    })
}

/// Smooth-L1 feature regression (mean over dims) plus `w` × cross-entropy
/// against the teacher's argmax token, averaged over scored rows. When
/// `grad` is given, exact gradients for the fusion map and block are added
/// into it; the target's embeddings and LM head stay frozen.
pub fn draft_loss(
    draft: &DraftParams,
    target: &TargetParams,
    example: &TrainExample,
    w: f64,
    grad: Option<&mut DraftParams>,
) -> Result<LossParts> {
    if example.scored.is_empty() {
        return Err(Error::InvalidArgument("empty loss mask".into()));
    }
    let d = draft.dim();
    let DraftPass { features, tape, fuse_in, fused_rows } = draft_pass(draft, target, example)?;
    let inv = 1.0 / example.scored.len() as f64;
    let head = &target.lm_head.weight;
    let mut dfeat = Matrix::zeros(features.rows(), d);
    let (mut feature_sum, mut ce_sum) = (0.0, 0.0);
    for &i in &example.scored {
        let f = features.row(i);
        let h = example.hidden.row(i + 1);
        let drow = dfeat.row_mut(i);
        for k in 0..d {
            let (l, g) = smooth_l1(f[k] - h[k]);
            feature_sum += l / d as f64;
            drow[k] = g * inv / d as f64;
        }
        let logits = target.head_logits(f);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let tok = example.teacher_tokens[i + 1];
        ce_sum += max + z.ln() - logits[tok];
        if w != 0.0 {
            let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
            dlogits[tok] -= 1.0;
            for v in &mut dlogits {
                *v *= w * inv;
            }
            for (k, dk) in drow.iter_mut().enumerate() {
                *dk += dot(head.row(k), &dlogits);
            }
        }
    }
    let parts = LossParts {
        total: inv * (feature_sum + w * ce_sum),
        feature: inv * feature_sum,
        cross_entropy: inv * ce_sum,
    };

    if let Some(grad) = grad {
        let dx = draft.block.backward(&tape, &dfeat, &mut grad.block);
        if !fused_rows.is_empty() {
            let mut dfused = Matrix::zeros(0, d);
            for &i in &fused_rows {
                dfused.push_row(dx.row(i))?;
            }
            draft.fuse.backward(&fuse_in, &dfused, &mut grad.fuse);
        }
    }
    Ok(parts)
}

/// Mean loss over a set of examples (no gradients).
pub fn mean_loss(draft: &DraftParams, target: &TargetParams, examples: &[TrainExample], w: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let mut sum = 0.0;
    for ex in examples {
        sum += draft_loss(draft, target, ex, w, None)?.total;
    }
    Ok(sum / examples.len() as f64)
}

/// Share of scored rows where the draft's top token equals the teacher's,
/// split into (image-determined answer rows, all other rows).
pub fn token_agreement(draft: &DraftParams, target: &TargetParams, examples: &[TrainExample]) -> Result<(f64, f64)> {
    let (mut hit, mut total) = ([0usize; 2], [0usize; 2]);
    for ex in examples {
        let pass = draft_pass(draft, target, ex)?;
        // Row i predicts the token after position i + 1; the first answer
        // token of a visual example follows the last prompt position.
        let visual_row = ex.visual.then(|| ex.answer_start - 2);
        for &i in &ex.scored {
            let k = usize::from(Some(i) != visual_row);
            total[k] += 1;
            if argmax(&target.head_logits(pass.features.row(i))) == ex.teacher_tokens[i + 1] {
                hit[k] += 1;
            }
        }
    }
    let rate = |k: usize| if total[k] == 0 { f64::NAN } else { hit[k] as f64 / total[k] as f64 };
    Ok((rate(0), rate(1)))
}

/// Largest relative error per tensor between `analytic` and central finite
/// differences of `loss`, checked on every entry.
pub fn finite_difference_check<P: Parameters>(
    params: &P,
    analytic: &P,
    eps: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> Vec<(String, f64)> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Matrix> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (t, name) in names.into_iter().enumerate() {
        let len = grads[t].data().len();
        let mut worst: f64 = 0.0;
        for j in 0..len {
            let orig = probe.tensors_mut()[t].data()[j];
            probe.tensors_mut()[t].data_mut()[j] = orig + eps;
            let up = loss(&probe);
            probe.tensors_mut()[t].data_mut()[j] = orig - eps;
            let down = loss(&probe);
            probe.tensors_mut()[t].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = grads[t].data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-5));
        }
        out.push((name, worst));
    }
    out
}

/// `((T - t) / T, t / T)`.
pub fn mix_fractions(t: usize, total: usize) -> Result<(f64, f64)> {
    if total == 0 {
        return Err(Error::InvalidArgument("total epochs must be at least 1".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!("epoch {t} beyond schedule of {total}")));
    }
    Ok(((total - t) as f64 / total as f64, t as f64 / total as f64))
}

/// Number of text examples in an epoch of `size`: `size · (T - t) / T`,
/// rounded half up.
pub fn text_count(size: usize, t: usize, total: usize) -> Result<usize> {
    mix_fractions(t, total)?;
    Ok((2 * size * (total - t) + total) / (2 * total))
}

#[derive(Clone, Debug)]
pub struct EpochDataset<'a> {
    pub examples: Vec<&'a TrainExample>,
    pub text_count: usize,
    pub visual_count: usize,
    /// Set when a source was smaller than its share and was sampled with
    /// replacement.
    pub with_replacement: bool,
}

fn draw<'a>(source: &'a [TrainExample], count: usize, rng: &mut RngState, replaced: &mut bool) -> Vec<&'a TrainExample> {
    if count <= source.len() {
        index::sample(rng, source.len(), count).into_iter().map(|i| &source[i]).collect()
    } else {
        *replaced = true;
        (0..count).map(|_| &source[rng.random_range(0..source.len())]).collect()
    }
}

/// Samples one epoch of the progressive mix. Passing the same slice as both
/// sources makes the schedule a no-op.
pub fn build_epoch_dataset<'a>(
    text: &'a [TrainExample],
    visual: &'a [TrainExample],
    t: usize,
    total: usize,
    size: usize,
    rng: &mut RngState,
) -> Result<EpochDataset<'a>> {
    if text.is_empty() || visual.is_empty() {
        return Err(Error::InvalidArgument("both sources must be non-empty".into()));
    }
    let n_text = text_count(size, t, total)?;
    let mut replaced = false;
    let mut examples = if std::ptr::eq(text, visual) {
        draw(text, size, rng, &mut replaced)
    } else {
        let mut e = draw(text, n_text, rng, &mut replaced);
        e.extend(draw(visual, size - n_text, rng, &mut replaced));
        e
    };
    examples.shuffle(rng);
    Ok(EpochDataset {
        examples,
        text_count: n_text,
        visual_count: size - n_text,
        with_replacement: replaced,
    })
}

/// Draft training strategies compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Visual data in both stages (same epoch budget as the two-stage arms).
    VisionOnly,
    /// One half of the visual data, then the other half.
    Vision1Vision2,
    /// Text data in both stages.
    TextOnly,
    /// Text, then visual data straight away.
    TwoStageDirect,
    /// Text, then a linear text→visual mix.
    TwoStageGradual,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::VisionOnly,
        Strategy::Vision1Vision2,
        Strategy::TextOnly,
        Strategy::TwoStageDirect,
        Strategy::TwoStageGradual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::VisionOnly => "vision-only",
            Strategy::Vision1Vision2 => "vision1-vision2",
            Strategy::TextOnly => "text-only",
            Strategy::TwoStageDirect => "two-stage-direct",
            Strategy::TwoStageGradual => "two-stage-gradual",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub draft: DraftConfig,
    pub strategy: Strategy,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub epoch_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the cross-entropy term.
    pub w: f64,
    /// Optional global-norm gradient clip.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            draft: DraftConfig::default(),
            strategy: Strategy::TwoStageGradual,
            stage1_epochs: 10,
            stage2_epochs: 20,
            epoch_size: 3600,
            batch: 16,
            lr: 0.4,
            momentum: 0.9,
            w: 0.1,
            clip: None,
            seed: 1,
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub stage: usize,
    pub text_fraction: f64,
    pub mean_loss: f64,
    pub with_replacement: bool,
}

pub fn write_loss_csv<W: std::io::Write>(rows: &[EpochLoss], mut out: W) -> Result<()> {
    writeln!(out, "epoch,stage,text_fraction,mean_loss")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.stage, r.text_fraction, r.mean_loss)?;
    }
    Ok(())
}

fn train_epoch(
    draft: &mut DraftParams,
    target: &TargetParams,
    sgd: &mut Sgd<DraftParams>,
    examples: &[&TrainExample],
    config: &TrainConfig,
    step: &mut usize,
    total_steps: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for batch in examples.chunks(config.batch) {
        let mut grad = draft.zeros_like();
        for ex in batch {
            sum += draft_loss(draft, target, ex, config.w, Some(&mut grad))?.total;
        }
        for t in grad.tensors_mut() {
            t.scale(1.0 / batch.len() as f64);
        }
        if let Some(c) = config.clip {
            clip_global_norm(&mut grad, c);
        }
        sgd.step(draft, &grad, cosine_lr(config.lr, *step, total_steps));
        *step += 1;
    }
    Ok(sum / examples.len() as f64)
}

/// Trains a fresh draft under `config.strategy`. The target is only read.
/// Stage 1 runs `stage1_epochs`; stage 2 runs epochs `t = 1..=T` with the
/// learning rate restarting its cosine decay at each stage.
pub fn train_two_stage(
    target: &TargetParams,
    text: &[TrainExample],
    visual: &[TrainExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(DraftParams, Vec<EpochLoss>)> {
    if text.is_empty() || visual.is_empty() {
        return Err(Error::InvalidArgument("both training sets must be non-empty".into()));
    }
    if config.batch == 0 || config.epoch_size == 0 || config.stage2_epochs == 0 {
        return Err(Error::InvalidArgument("batch, epoch size and stage-2 epochs must be positive".into()));
    }
    let mut draft = DraftParams::new(target, &config.draft);
    let mut sgd = Sgd::new(&draft, config.momentum);
    let mut rng = RngState::derive(config.seed, 0xd7);
    let (first_half, second_half) = visual.split_at(visual.len() / 2);
    let mut curve = Vec::new();
    let mut epoch = 0;
    for stage in [1, 2] {
        let epochs = if stage == 1 { config.stage1_epochs } else { config.stage2_epochs };
        let steps = epochs * config.epoch_size.div_ceil(config.batch);
        let mut step = 0;
        for e in 0..epochs {
            let t_mix = if stage == 1 { 0 } else { e + 1 };
            let total = if stage == 1 { 1 } else { config.stage2_epochs };
            let (src_text, src_visual, t, total): (&[TrainExample], &[TrainExample], usize, usize) =
                match (config.strategy, stage) {
                    (Strategy::VisionOnly, _) => (visual, visual, 1, 1),
                    (Strategy::Vision1Vision2, 1) if !first_half.is_empty() => (first_half, first_half, 1, 1),
                    (Strategy::Vision1Vision2, _) => (second_half, second_half, 1, 1),
                    (Strategy::TextOnly, _) => (text, text, 0, 1),
                    (Strategy::TwoStageDirect, 1) | (Strategy::TwoStageGradual, 1) => (text, visual, 0, 1),
                    (Strategy::TwoStageDirect, _) => (text, visual, 1, 1),
                    (Strategy::TwoStageGradual, _) => (text, visual, t_mix, total),
                };
            let data = build_epoch_dataset(src_text, src_visual, t, total, config.epoch_size, &mut rng)?;
            let mean_loss = train_epoch(&mut draft, target, &mut sgd, &data.examples, config, &mut step, steps)?;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "mean loss {mean_loss} in stage {stage}, epoch {epoch} ({})",
                    config.strategy
                )));
            }
            let text_fraction = data.examples.iter().filter(|e| !e.visual).count() as f64 / data.examples.len() as f64;
            let row = EpochLoss {
                epoch,
                stage,
                text_fraction,
                mean_loss,
                with_replacement: data.with_replacement,
            };
            on_epoch(&row);
            curve.push(row);
            epoch += 1;
        }
    }
    Ok((draft, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_text_corpus, gen_visual_corpus};
    use crate::target::TargetConfig;

    fn small_target(seed: u64) -> TargetParams {
        TargetParams::new(TargetConfig {
            dim: 8,
            depth: 1,
            vision_depth: 1,
            mlp_hidden: 8,
            projector_hidden: 8,
            seed,
            ..TargetConfig::default()
        })
    }

    fn small_draft(target: &TargetParams, mode: DraftMode, seed: u64) -> DraftParams {
        DraftParams::new(target, &DraftConfig { mode, mlp_hidden: 8, seed })
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        assert_eq!(mix_fractions(0, 20).unwrap(), (1.0, 0.0));
        assert_eq!(mix_fractions(20, 20).unwrap(), (0.0, 1.0));
        assert_eq!(mix_fractions(10, 20).unwrap(), (0.5, 0.5));
        assert!(mix_fractions(21, 20).is_err());
        assert!(mix_fractions(0, 0).is_err());
    }

    #[test]
    fn epoch_counts() {
        assert_eq!(text_count(100, 0, 20).unwrap(), 100);
        assert_eq!(text_count(100, 5, 20).unwrap(), 75);
        assert_eq!(text_count(100, 20, 20).unwrap(), 0);
        assert_eq!(text_count(10, 1, 4).unwrap(), 8); // 7.5 rounds up
    }

    #[test]
    fn scored_rows_skip_prefix_and_image() {
        let t = small_target(0);
        let ex = &gen_visual_corpus(1, 3, 1, 4).unwrap()[0];
        let tr = TrainExample::new(&t, ex).unwrap();
        let n = tr.embeddings.rows();
        assert_eq!(tr.scored.first(), Some(&(2 + 9 - 1)));
        assert_eq!(tr.scored.last(), Some(&(n - 3)));
        assert!(tr.visual);
        let tx = TrainExample::new(&t, &gen_text_corpus(1, 1, 1).unwrap()[0]).unwrap();
        assert_eq!(tx.scored[0], 1);
        assert!(!tx.visual);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let t = small_target(0);
        let d = small_draft(&t, DraftMode::Decoupled, 1);
        let mut ex = TrainExample::new(&t, &gen_text_corpus(1, 1, 1).unwrap()[0]).unwrap();
        ex.scored.clear();
        assert!(matches!(draft_loss(&d, &t, &ex, 0.1, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn perfect_features_have_zero_regression_term() {
        // Feature term is exactly zero when the prediction matches h.
        let t = small_target(0);
        let ex = TrainExample::new(&t, &gen_text_corpus(1, 1, 1).unwrap()[0]).unwrap();
        let mut d = small_draft(&t, DraftMode::Decoupled, 1);
        for m in d.tensors_mut() {
            m.fill(0.0);
        }
        // A zeroed block passes its input through; set the fuse map to
        // reproduce the teacher exactly on a one-row example.
        let mut one = ex.clone();
        one.embeddings.truncate_rows(2);
        one.modality.truncate(2);
        one.hidden.truncate_rows(2);
        one.scored = vec![0];
        let h1 = one.hidden.row(1).to_vec();
        let pos = t.position(0).unwrap().to_vec();
        for k in 0..d.dim() {
            d.fuse.bias.row_mut(0)[k] = h1[k] - pos[k];
        }
        let parts = draft_loss(&d, &t, &one, 0.0, None).unwrap();
        assert!(parts.feature.abs() < 1e-24, "{}", parts.feature);
        assert_eq!(parts.total, parts.feature);
    }

    #[test]
    fn zero_weight_is_pure_regression() {
        let t = small_target(0);
        let ex = TrainExample::new(&t, &gen_text_corpus(1, 1, 1).unwrap()[0]).unwrap();
        let d = small_draft(&t, DraftMode::Decoupled, 1);
        let parts = draft_loss(&d, &t, &ex, 0.0, None).unwrap();
        assert_eq!(parts.total, parts.feature);
        let with = draft_loss(&d, &t, &ex, 0.1, None).unwrap();
        assert!((with.total - (with.feature + 0.1 * with.cross_entropy)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let t = small_target(seed);
            let mode = if seed % 2 == 0 { DraftMode::Decoupled } else { DraftMode::BaselineConcat };
            let d = small_draft(&t, mode, seed + 10);
            let ex = TrainExample::new(&t, &gen_visual_corpus(1, 2, 1, seed).unwrap()[0]).unwrap();
            let mut g = d.zeros_like();
            draft_loss(&d, &t, &ex, 0.1, Some(&mut g)).unwrap();
            for (name, err) in finite_difference_check(&d, &g, 1e-5, |p| draft_loss(p, &t, &ex, 0.1, None).unwrap().total) {
                assert!(err < 1e-4, "seed {seed} {name}: {err}");
            }
        }
    }

    #[test]
    fn epoch_dataset_is_seeded_and_proportioned() {
        let t = small_target(0);
        let text = prepare_examples(&t, &gen_text_corpus(60, 1, 1).unwrap()).unwrap();
        let vis = prepare_examples(&t, &gen_visual_corpus(60, 2, 1, 2).unwrap()).unwrap();
        let a = build_epoch_dataset(&text, &vis, 5, 20, 40, &mut RngState::new(3)).unwrap();
        let b = build_epoch_dataset(&text, &vis, 5, 20, 40, &mut RngState::new(3)).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.examples.iter().filter(|e| !e.visual).count(), 30);
        assert!(!a.with_replacement);
        let over = build_epoch_dataset(&text, &vis, 0, 20, 100, &mut RngState::new(3)).unwrap();
        assert!(over.with_replacement);
        assert_eq!(over.examples.len(), 100);
    }

    fn tiny_config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            draft: DraftConfig { mlp_hidden: 8, ..DraftConfig::default() },
            strategy,
            stage1_epochs: 1,
            stage2_epochs: 2,
            epoch_size: 16,
            batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_leaves_target_untouched() {
        let t = small_target(0);
        let before = t.clone();
        let text = prepare_examples(&t, &gen_text_corpus(20, 1, 1).unwrap()).unwrap();
        let vis = prepare_examples(&t, &gen_visual_corpus(20, 2, 1, 2).unwrap()).unwrap();
        let cfg = tiny_config(Strategy::TwoStageGradual);
        let (a, ca) = train_two_stage(&t, &text, &vis, &cfg, |_| {}).unwrap();
        let (b, cb) = train_two_stage(&t, &text, &vis, &cfg, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(t, before);
        assert_eq!(ca.len(), 3);
        assert_eq!(ca[0].text_fraction, 1.0);
        assert_eq!(ca[2].text_fraction, 0.0);
    }

    #[test]
    fn schedule_is_a_no_op_on_identical_sources() {
        let t = small_target(0);
        let set = prepare_examples(&t, &gen_visual_corpus(20, 2, 1, 2).unwrap()).unwrap();
        let mut gradual = tiny_config(Strategy::TwoStageGradual);
        gradual.stage1_epochs = 0;
        let mut direct = gradual.clone();
        direct.strategy = Strategy::TwoStageDirect;
        let (a, _) = train_two_stage(&t, &set, &set, &gradual, |_| {}).unwrap();
        let (b, _) = train_two_stage(&t, &set, &set, &direct, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_one_lowers_held_out_text_loss() {
        let t = small_target(0);
        let text = prepare_examples(&t, &gen_text_corpus(64, 1, 1).unwrap()).unwrap();
        let held = prepare_examples(&t, &gen_text_corpus(16, 1, 99).unwrap()).unwrap();
        let vis = prepare_examples(&t, &gen_visual_corpus(8, 2, 1, 2).unwrap()).unwrap();
        let mut cfg = tiny_config(Strategy::TextOnly);
        cfg.stage1_epochs = 3;
        cfg.stage2_epochs = 1;
        cfg.epoch_size = 64;
        let init = DraftParams::new(&t, &cfg.draft);
        let (trained, _) = train_two_stage(&t, &text, &vis, &cfg, |_| {}).unwrap();
        assert!(mean_loss(&trained, &t, &held, cfg.w).unwrap() < mean_loss(&init, &t, &held, cfg.w).unwrap());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }
}
