//! Seeded pretraining of the toy target on both corpora, plus the
//! held-out evaluations that gate it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{InstructionExample, QuestionKind};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tensor::Matrix;
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::rng::RngState;
use crate::sampling::argmax;
use crate::target::{ImagePatchGrid, LmExample, TargetConfig, TargetParams, TargetSession, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub target: TargetConfig,
    /// Epoch cap for the warm-up on "color of cell k" questions alone.
    pub warmup_max_epochs: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub accuracy_gate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            target: TargetConfig::default(),
            warmup_max_epochs: 15,
            max_epochs: 30,
            min_epochs: 4,
            batch: 16,
            lr: 3e-3,
            clip: 1.0,
            accuracy_gate: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub warmup: bool,
    pub lr: f64,
    pub loss: f64,
    pub cell_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub initial_cell_accuracy: f64,
    pub final_cell_accuracy: f64,
}

/// An example with its patch features computed once.
pub struct Prepared<'a> {
    pub example: &'a InstructionExample,
    pub grid: Option<ImagePatchGrid>,
    pub text: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

pub fn prepare(example: &InstructionExample) -> Result<Prepared<'_>> {
    let grid = example.grid()?;
    let m = grid.as_ref().map_or(0, ImagePatchGrid::patch_count);
    let mut text = example.instruction.clone();
    text.extend_from_slice(&example.answer);
    let prompt_len = example.system.len() + m + example.instruction.len();
    let targets = example
        .answer
        .iter()
        .enumerate()
        .map(|(j, &tok)| (prompt_len - 1 + j, tok))
        .collect();
    Ok(Prepared {
        example,
        grid,
        text,
        targets,
    })
}

impl Prepared<'_> {
    pub fn lm_example(&self) -> LmExample<'_> {
        LmExample {
            system: &self.example.system,
            grid: self.grid.as_ref(),
            text: &self.text,
            targets: &self.targets,
        }
    }
}

/// Greedy answer, optionally with the visual span hidden from text queries.
pub fn greedy_answer(target: &TargetParams, example: &InstructionExample, max_tokens: usize, hide_visual: bool) -> Result<Vec<usize>> {
    let seq = example.prompt(target)?;
    let mut session = if hide_visual {
        TargetSession::with_hidden_keys(target, seq.visual.clone())
    } else {
        TargetSession::new(target)
    };
    let out = target.target_forward(&seq, &mut session)?;
    let mut last = out.logits.row(out.logits.rows() - 1).to_vec();
    let mut tokens = Vec::new();
    loop {
        let tok = argmax(&last);
        tokens.push(tok);
        if tok == EOS || tokens.len() >= max_tokens {
            return Ok(tokens);
        }
        let row = Matrix::from_vec(1, target.dim(), target.token_embedding(tok)?.to_vec())?;
        let (_, logits) = target.forward_speculative(&mut session, &row, &[None])?;
        session.commit(&[0])?;
        last = logits.row(0).to_vec();
    }
}

/// Share of held-out "color of cell k" questions whose greedy answer puts the
/// right color at the visual answer slot.
pub fn cell_accuracy(target: &TargetParams, examples: &[InstructionExample], hide_visual: bool) -> Result<f64> {
    let cells: Vec<&InstructionExample> = examples.iter().filter(|e| e.kind() == QuestionKind::Cell).collect();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no cell questions to evaluate".into()));
    }
    let mut correct = 0;
    for ex in &cells {
        let slot = ex.visual_answer_index().expect("cell questions have a visual slot");
        let out = greedy_answer(target, ex, slot + 1, hide_visual)?;
        if out.get(slot) == Some(&ex.answer[slot]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / cells.len() as f64)
}

fn run_epoch(
    params: &mut TargetParams,
    adam: &mut Adam<TargetParams>,
    data: &[&Prepared<'_>],
    config: &PretrainConfig,
    rng: &mut RngState,
    lr: impl Fn(usize) -> f64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    for (step, batch) in order.chunks(config.batch).enumerate() {
        let mut grad = params.zeros_like();
        for &i in batch {
            loss_sum += params.lm_loss(&data[i].lm_example(), Some(&mut grad))?;
        }
        for t in grad.tensors_mut() {
            t.scale(1.0 / batch.len() as f64);
        }
        clip_global_norm(&mut grad, config.clip);
        adam.step(params, &grad, lr(step));
    }
    Ok(loss_sum / data.len() as f64)
}

/// Trains the target on both training sets. A warm-up on cell questions
/// alone (constant learning rate, until the held-out gate is met) seeds the
/// image lookup; the main phase then trains on everything with cosine decay
/// until held-out cell accuracy is back above the gate (after `min_epochs`).
pub fn pretrain_target(
    config: &PretrainConfig,
    text_train: &[InstructionExample],
    visual_train: &[InstructionExample],
    visual_held_out: &[InstructionExample],
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<(TargetParams, PretrainReport)> {
    if text_train.is_empty() || visual_train.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs both corpora".into()));
    }
    if config.batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut params = TargetParams::new(TargetConfig {
        seed: config.seed,
        ..config.target.clone()
    });
    let prepared = text_train
        .iter()
        .chain(visual_train)
        .map(prepare)
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&Prepared<'_>> = prepared.iter().collect();
    let cells: Vec<&Prepared<'_>> = prepared.iter().filter(|p| p.example.kind() == QuestionKind::Cell).collect();
    let initial = cell_accuracy(&params, visual_held_out, false)?;
    let mut adam = Adam::new(&params);
    let mut rng = RngState::derive(config.seed, 0x7a);
    let mut epochs = Vec::new();

    if !cells.is_empty() {
        for _ in 0..config.warmup_max_epochs {
            let loss = run_epoch(&mut params, &mut adam, &cells, config, &mut rng, |_| config.lr)?;
            let acc = finish_epoch(&params, visual_held_out, loss, config.lr, true, &mut epochs, &mut on_epoch)?;
            if acc >= config.accuracy_gate {
                break;
            }
        }
    }

    let steps_per_epoch = all.len().div_ceil(config.batch);
    let total_steps = steps_per_epoch * config.max_epochs;
    for epoch in 0..config.max_epochs {
        let offset = epoch * steps_per_epoch;
        let loss = run_epoch(&mut params, &mut adam, &all, config, &mut rng, |s| {
            cosine_lr(config.lr, offset + s, total_steps)
        })?;
        let lr = cosine_lr(config.lr, offset + steps_per_epoch - 1, total_steps);
        let acc = finish_epoch(&params, visual_held_out, loss, lr, false, &mut epochs, &mut on_epoch)?;
        if epoch + 1 >= config.min_epochs && acc >= config.accuracy_gate {
            return Ok((
                params,
                PretrainReport {
                    epochs,
                    initial_cell_accuracy: initial,
                    final_cell_accuracy: acc,
                },
            ));
        }
    }
    let last = epochs.last().map_or(0.0, |e| e.cell_accuracy);
    Err(Error::AccuracyNotReached(format!(
        "held-out cell accuracy {last:.3} after {} epochs, gate {}",
        config.max_epochs, config.accuracy_gate
    )))
}

fn finish_epoch(
    params: &TargetParams,
    held_out: &[InstructionExample],
    loss: f64,
    lr: f64,
    warmup: bool,
    epochs: &mut Vec<PretrainEpoch>,
    on_epoch: &mut impl FnMut(&PretrainEpoch),
) -> Result<f64> {
    let epoch = epochs.len();
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("target loss {loss} at epoch {epoch}")));
    }
    let acc = cell_accuracy(params, held_out, false)?;
    let record = PretrainEpoch {
        epoch,
        warmup,
        lr,
        loss,
        cell_accuracy: acc,
    };
    on_epoch(&record);
    epochs.push(record);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_text_corpus, gen_visual_corpus};

    #[test]
    fn targets_cover_the_answer() {
        let ex = &gen_visual_corpus(1, 3, 1, 1).unwrap()[0];
        let p = prepare(ex).unwrap();
        assert_eq!(p.targets.len(), ex.answer.len());
        assert_eq!(p.targets[0].0, 2 + 9 + ex.instruction.len() - 1);
        let t = &gen_text_corpus(1, 1, 1).unwrap()[0];
        assert_eq!(prepare(t).unwrap().targets[0].0, 2 + 3 - 1);
    }

    #[test]
    fn untrained_target_is_near_chance() {
        let held = gen_visual_corpus(200, 3, 1, 9).unwrap();
        let t = TargetParams::new(TargetConfig::default());
        let acc = cell_accuracy(&t, &held, false).unwrap();
        assert!(acc <= 2.0 / 8.0, "{acc}");
    }

    #[test]
    fn short_pretraining_is_deterministic_and_lowers_loss() {
        let cfg = PretrainConfig {
            target: TargetConfig { dim: 8, depth: 1, vision_depth: 1, mlp_hidden: 8, projector_hidden: 8, ..TargetConfig::default() },
            warmup_max_epochs: 1,
            max_epochs: 2,
            min_epochs: 1,
            accuracy_gate: 0.0,
            ..PretrainConfig::default()
        };
        let text = gen_text_corpus(32, 1, 1).unwrap();
        let vis = gen_visual_corpus(32, 3, 1, 2).unwrap();
        let held = gen_visual_corpus(10, 3, 1, 3).unwrap();
        let (a, ra) = pretrain_target(&cfg, &text, &vis, &held, |_| {}).unwrap();
        let (b, _) = pretrain_target(&cfg, &text, &vis, &held, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs.len(), 2);
        assert!(ra.epochs[0].warmup && !ra.epochs[1].warmup);
        let init = TargetParams::new(TargetConfig { seed: cfg.seed, ..cfg.target.clone() });
        let loss = |p: &TargetParams| -> f64 {
            text.iter().map(|e| p.lm_loss(&prepare(e).unwrap().lm_example(), None).unwrap()).sum()
        };
        assert!(loss(&a) < loss(&init));
    }
}
