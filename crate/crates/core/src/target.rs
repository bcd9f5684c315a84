//! The toy multimodal target model.
//!
//! Text tokens go through an embedding table; image patches go through a
//! bidirectional vision encoder and a two-layer projector into the same
//! width. The assembled sequence `[system | image | instruction]` (plus any
//! generated output) gets learned absolute positions and runs through a
//! stack of causal blocks. The final layer-normed activations are the
//! features `h`; the LM head maps them to next-token logits.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{silu, silu_backward, BlockParams, BlockTape, KvCache, LayerNorm, Linear, Parameters};
use crate::mask::AttentionMask;
use crate::rng::{Chance, RngState};
use crate::sampling::{argmax, softmax_with_temperature};
use crate::tensor::{axpy, Matrix};

pub const EOS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Visual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextRole {
    System,
    Instruction,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToken {
    pub id: usize,
    pub role: TextRole,
}

impl TextToken {
    pub fn new(id: usize, role: TextRole) -> Self {
        Self { id, role }
    }

    pub fn list(ids: &[usize], role: TextRole) -> Vec<TextToken> {
        ids.iter().map(|&id| TextToken { id, role }).collect()
    }
}

/// Raw visual input: one feature vector per patch of a `side × side` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePatchGrid {
    pub side: usize,
    pub patches: Matrix,
}

impl ImagePatchGrid {
    pub fn new(side: usize, patches: Matrix) -> Result<Self> {
        if patches.rows() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "{} patches for a {side}x{side} grid",
                patches.rows()
            )));
        }
        Ok(Self { side, patches })
    }

    pub fn patch_count(&self) -> usize {
        self.side * self.side
    }
}

/// Interleaved multimodal input: `[system | visual | instruction/output]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssembledSequence {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    /// Token id for text positions, `None` for visual ones.
    pub token_ids: Vec<Option<usize>>,
    pub system_len: usize,
    /// Visual span `[start, end)`; empty when there is no image.
    pub visual: Range<usize>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn prompt_text_ids(&self) -> Vec<usize> {
        self.token_ids.iter().flatten().copied().collect()
    }

    /// Appends text tokens (instruction continuation or generated output).
    pub fn extend_text(&mut self, ids: &[usize], params: &TargetParams) -> Result<()> {
        for &id in ids {
            self.embeddings.push_row(params.token_embedding(id)?)?;
            self.modality.push(Modality::Text);
            self.token_ids.push(Some(id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub vision_depth: usize,
    pub patch_dim: usize,
    pub max_patches: usize,
    pub mlp_hidden: usize,
    pub projector_hidden: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 32,
            heads: 2,
            depth: 4,
            vision_depth: 2,
            patch_dim: 8,
            max_patches: 9,
            mlp_hidden: 64,
            projector_hidden: 64,
            max_positions: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    pub config: TargetConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub patch_in: Linear,
    pub patch_position: Matrix,
    pub vision_blocks: Vec<BlockParams>,
    pub vision_norm: LayerNorm,
    pub projector_in: Linear,
    pub projector_out: Linear,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNorm,
    pub lm_head: Linear,
}

impl Parameters for TargetParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        out.push((p("token_embedding"), &self.token_embedding));
        out.push((p("position_embedding"), &self.position_embedding));
        self.patch_in.visit(&p("patch_in"), out);
        out.push((p("patch_position"), &self.patch_position));
        for (i, b) in self.vision_blocks.iter().enumerate() {
            b.visit(&p(&format!("vision_blocks.{i}")), out);
        }
        self.vision_norm.visit(&p("vision_norm"), out);
        self.projector_in.visit(&p("projector_in"), out);
        self.projector_out.visit(&p("projector_out"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&p(&format!("blocks.{i}")), out);
        }
        self.final_norm.visit(&p("final_norm"), out);
        self.lm_head.visit(&p("lm_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        self.patch_in.visit_mut(out);
        out.push(&mut self.patch_position);
        for b in &mut self.vision_blocks {
            b.visit_mut(out);
        }
        self.vision_norm.visit_mut(out);
        self.projector_in.visit_mut(out);
        self.projector_out.visit_mut(out);
        for b in &mut self.blocks {
            b.visit_mut(out);
        }
        self.final_norm.visit_mut(out);
        self.lm_head.visit_mut(out);
    }
}

/// Per-position outputs of a target forward.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetOutputs {
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl TargetOutputs {
    pub fn distribution(&self, position: usize, temperature: f64) -> Result<Vec<f64>> {
        softmax_with_temperature(self.logits.row(position), temperature)
    }
}

/// Speculative rows run through the target but not yet committed.
#[derive(Clone, Debug, Default)]
struct Scratch {
    inputs: Matrix,
    hidden: Matrix,
    logits: Matrix,
}

/// Mutable per-generation target state: committed inputs, their features and
/// logits, and one key/value cache per block.
#[derive(Clone, Debug)]
pub struct TargetSession {
    caches: Vec<KvCache>,
    inputs: Matrix,
    hidden: Matrix,
    logits: Matrix,
    scratch: Scratch,
    hidden_keys: Option<Range<usize>>,
}

impl TargetSession {
    pub fn new(params: &TargetParams) -> Self {
        let dim = params.config.dim;
        Self {
            caches: (0..params.blocks.len()).map(|_| KvCache::new(dim)).collect(),
            inputs: Matrix::zeros(0, dim),
            hidden: Matrix::zeros(0, dim),
            logits: Matrix::zeros(0, params.config.vocab),
            scratch: Scratch::default(),
            hidden_keys: None,
        }
    }

    /// Session in which text queries cannot attend to `span` (perception ablation).
    pub fn with_hidden_keys(params: &TargetParams, span: Range<usize>) -> Self {
        let mut s = Self::new(params);
        s.hidden_keys = Some(span);
        s
    }

    /// Number of committed positions.
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn cache_len(&self) -> usize {
        self.caches.first().map_or(0, KvCache::len)
    }

    /// Commits the speculative rows listed in `keep` (in order) and drops the rest.
    pub fn commit(&mut self, keep: &[usize]) -> Result<()> {
        let committed = self.len();
        for &k in keep {
            if k >= self.scratch.inputs.rows() {
                return Err(Error::StaleCache(format!("no speculative row {k}")));
            }
            self.inputs.push_row(self.scratch.inputs.row(k))?;
            self.hidden.push_row(self.scratch.hidden.row(k))?;
            self.logits.push_row(self.scratch.logits.row(k))?;
        }
        for c in &mut self.caches {
            c.compact(committed, keep);
        }
        self.scratch = Scratch::default();
        Ok(())
    }

    /// Drops committed rows beyond `len` (and any speculative rows).
    pub fn truncate(&mut self, len: usize) {
        self.inputs.truncate_rows(len);
        self.hidden.truncate_rows(len);
        self.logits.truncate_rows(len);
        for c in &mut self.caches {
            c.truncate(len);
        }
        self.scratch = Scratch::default();
    }
}

fn node_depths(parents: &[Option<usize>]) -> Vec<usize> {
    let mut depth = Vec::with_capacity(parents.len());
    for p in parents {
        depth.push(p.map_or(0, |p| depth[p] + 1));
    }
    depth
}

/// Parents describing a plain chain of `n` rows.
pub fn chain_parents(n: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| i.checked_sub(1)).collect()
}

impl TargetParams {
    pub fn new(config: TargetConfig) -> Self {
        let mut rng = RngState::new(config.seed);
        let d = config.dim;
        let std = 1.0 / (d as f64).sqrt();
        let token_embedding = Matrix::randn(config.vocab, d, 1.0, &mut rng);
        let position_embedding = Matrix::randn(config.max_positions, d, 0.5, &mut rng);
        let patch_in = Linear::new(config.patch_dim, d, 1.0 / (config.patch_dim as f64).sqrt(), &mut rng);
        let patch_position = Matrix::randn(config.max_patches, d, 0.5, &mut rng);
        let vision_blocks = (0..config.vision_depth)
            .map(|_| BlockParams::new(d, config.heads, config.mlp_hidden, config.vision_depth, &mut rng))
            .collect();
        let projector_in = Linear::new(d, config.projector_hidden, std, &mut rng);
        let projector_out = Linear::new(
            config.projector_hidden,
            d,
            1.0 / (config.projector_hidden as f64).sqrt(),
            &mut rng,
        );
        let blocks = (0..config.depth)
            .map(|_| BlockParams::new(d, config.heads, config.mlp_hidden, config.depth, &mut rng))
            .collect();
        let lm_head = Linear::new(d, config.vocab, std, &mut rng);
        Self {
            vision_norm: LayerNorm::new(d),
            final_norm: LayerNorm::new(d),
            config,
            token_embedding,
            position_embedding,
            patch_in,
            patch_position,
            vision_blocks,
            projector_in,
            projector_out,
            blocks,
            lm_head,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn token_embedding(&self, id: usize) -> Result<&[f64]> {
        if id >= self.config.vocab {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(self.token_embedding.row(id))
    }

    pub fn position(&self, pos: usize) -> Result<&[f64]> {
        if pos >= self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "position {pos} beyond the {} learned positions",
                self.config.max_positions
            )));
        }
        Ok(self.position_embedding.row(pos))
    }

    /// LM head applied to one feature row.
    pub fn head_logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.config.vocab];
        self.lm_head.forward_row(feature, &mut out);
        out
    }

    pub fn embed_text(&self, tokens: &[TextToken]) -> Result<Matrix> {
        let mut m = Matrix::zeros(0, self.dim());
        for t in tokens {
            m.push_row(self.token_embedding(t.id)?)?;
        }
        Ok(m)
    }

    fn check_grid(&self, grid: &ImagePatchGrid) -> Result<()> {
        if grid.patches.cols() != self.config.patch_dim {
            return Err(Error::DimensionMismatch(format!(
                "patch features of width {}, model expects {}",
                grid.patches.cols(),
                self.config.patch_dim
            )));
        }
        if grid.patches.rows() != grid.patch_count() {
            return Err(Error::DimensionMismatch("patch count is not side²".into()));
        }
        if grid.patch_count() > self.config.max_patches {
            return Err(Error::DimensionMismatch(format!(
                "{} patches exceed the model's {}",
                grid.patch_count(),
                self.config.max_patches
            )));
        }
        Ok(())
    }

    /// Vision encoder followed by the projector: one embedding per patch.
    pub fn embed_image(&self, grid: &ImagePatchGrid) -> Result<Matrix> {
        self.check_grid(grid)?;
        let m = grid.patch_count();
        let mut x = self.patch_in.forward(&grid.patches);
        for i in 0..m {
            axpy(x.row_mut(i), 1.0, self.patch_position.row(i));
        }
        let mask = AttentionMask::bidirectional(m);
        for b in &self.vision_blocks {
            x = b.forward_train(&x, &mask)?.0;
        }
        let x = self.vision_norm.apply(&x);
        let z = self.projector_in.forward(&x);
        Ok(self.projector_out.forward(&silu(&z)))
    }

    pub fn assemble_sequence(
        &self,
        system: &[TextToken],
        grid: Option<&ImagePatchGrid>,
        instruction: &[TextToken],
    ) -> Result<AssembledSequence> {
        let mut embeddings = self.embed_text(system)?;
        let visual_start = embeddings.rows();
        if let Some(g) = grid {
            embeddings.append(&self.embed_image(g)?)?;
        }
        let visual_end = embeddings.rows();
        embeddings.append(&self.embed_text(instruction)?)?;
        let mut modality = vec![Modality::Text; embeddings.rows()];
        modality[visual_start..visual_end].fill(Modality::Visual);
        let token_ids = system
            .iter()
            .map(|t| Some(t.id))
            .chain(std::iter::repeat_n(None, visual_end - visual_start))
            .chain(instruction.iter().map(|t| Some(t.id)))
            .collect();
        Ok(AssembledSequence {
            embeddings,
            modality,
            token_ids,
            system_len: system.len(),
            visual: visual_start..visual_end,
        })
    }

    fn final_features(&self, x: &Matrix) -> (Matrix, Matrix) {
        let hidden = self.final_norm.apply(x);
        let logits = self.lm_head.forward(&hidden);
        (hidden, logits)
    }

    /// Runs speculative rows through the model on top of the committed prefix.
    /// `parents` gives each row's tree parent (`None` = directly after the
    /// prefix); the row's position is the prefix length plus its depth.
    /// The rows stay pending until [`TargetSession::commit`].
    pub fn forward_speculative(
        &self,
        session: &mut TargetSession,
        inputs: &Matrix,
        parents: &[Option<usize>],
    ) -> Result<(Matrix, Matrix)> {
        if inputs.rows() != parents.len() {
            return Err(Error::DimensionMismatch("one parent per input row".into()));
        }
        let committed = session.len();
        if session.cache_len() != committed {
            return Err(Error::StaleCache("speculative rows already pending".into()));
        }
        let depths = node_depths(parents);
        let mut x = inputs.clone();
        for (i, d) in depths.iter().enumerate() {
            axpy(x.row_mut(i), 1.0, self.position(committed + d)?);
        }
        let mut mask = AttentionMask::tree_structured(committed, parents, 0);
        if let Some(span) = &session.hidden_keys {
            mask.block_keys(span.clone(), committed);
        }
        for (b, cache) in self.blocks.iter().zip(session.caches.iter_mut()) {
            x = b.forward_cached(&x, cache, &mask)?;
        }
        let (hidden, logits) = self.final_features(&x);
        session.scratch = Scratch {
            inputs: inputs.clone(),
            hidden: hidden.clone(),
            logits: logits.clone(),
        };
        Ok((hidden, logits))
    }

    /// Prefill (empty session) or incremental forward over `seq`. The session
    /// must hold exactly a prefix of `seq`; outputs cover every position.
    pub fn target_forward(
        &self,
        seq: &AssembledSequence,
        session: &mut TargetSession,
    ) -> Result<TargetOutputs> {
        let done = session.len();
        if done > seq.len() {
            return Err(Error::StaleCache(format!(
                "session holds {done} positions, sequence has {}",
                seq.len()
            )));
        }
        for i in 0..done {
            if session.inputs.row(i) != seq.embeddings.row(i) {
                return Err(Error::StaleCache(format!("position {i} diverges from the cached prefix")));
            }
        }
        let fresh = seq.embeddings.slice_rows(done, seq.len());
        if fresh.rows() > 0 {
            let parents = chain_parents(fresh.rows());
            self.forward_speculative(session, &fresh, &parents)?;
            let keep: Vec<usize> = (0..fresh.rows()).collect();
            session.commit(&keep)?;
        }
        Ok(TargetOutputs {
            hidden: session.hidden.clone(),
            logits: session.logits.clone(),
        })
    }

    /// Plain autoregressive decoding; the reference the speculative engine
    /// must reproduce. Stops after EOS or `max_tokens`.
    pub fn autoregressive_generate(
        &self,
        seq: &AssembledSequence,
        temperature: f64,
        max_tokens: usize,
        chance: &mut dyn Chance,
    ) -> Result<Vec<TextToken>> {
        if max_tokens == 0 {
            return Err(Error::InvalidArgument("max tokens must be at least 1".into()));
        }
        let mut session = TargetSession::new(self);
        let out = self.target_forward(seq, &mut session)?;
        let mut last = out.logits.row(out.logits.rows() - 1).to_vec();
        let mut tokens = Vec::new();
        loop {
            let tok = if temperature == 0.0 {
                argmax(&last)
            } else {
                chance.categorical(&softmax_with_temperature(&last, temperature)?)?
            };
            tokens.push(TextToken::new(tok, TextRole::Output));
            if tok == EOS || tokens.len() >= max_tokens {
                return Ok(tokens);
            }
            let row = Matrix::from_vec(1, self.dim(), self.token_embedding(tok)?.to_vec())?;
            let (_, logits) = self.forward_speculative(&mut session, &row, &[None])?;
            session.commit(&[0])?;
            last = logits.row(0).to_vec();
        }
    }
}

/// Activations of a full training forward through the target.
pub struct TargetTape {
    vision: Option<VisionTape>,
    seq_len: usize,
    text_ids: Vec<Option<usize>>,
    block_tapes: Vec<BlockTape>,
    final_tape: crate::layers::LayerNormTape,
    hidden: Matrix,
}

struct VisionTape {
    patches: Matrix,
    block_tapes: Vec<BlockTape>,
    norm_tape: crate::layers::LayerNormTape,
    normed: Matrix,
    pre_act: Matrix,
    act: Matrix,
    start: usize,
}

/// One language-modelling example for the target: predict `targets[i].1`
/// from position `targets[i].0`.
pub struct LmExample<'a> {
    pub system: &'a [usize],
    pub grid: Option<&'a ImagePatchGrid>,
    pub text: &'a [usize],
    pub targets: &'a [(usize, usize)],
}

impl TargetParams {
    /// Mean cross-entropy over `example.targets`; accumulates parameter
    /// gradients into `grad` when given.
    pub fn lm_loss(&self, example: &LmExample<'_>, grad: Option<&mut TargetParams>) -> Result<f64> {
        let (logits, tape) = self.forward_tape(example)?;
        let n = example.targets.len().max(1) as f64;
        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for &(pos, tok) in example.targets {
            let row = logits.row(pos);
            let p = softmax_with_temperature(row, 1.0)?;
            loss -= p[tok].max(1e-300).ln() / n;
            let d = dlogits.row_mut(pos);
            for (j, pj) in p.iter().enumerate() {
                d[j] += pj / n;
            }
            d[tok] -= 1.0 / n;
        }
        if let Some(g) = grad {
            self.backward_tape(&tape, &dlogits, g)?;
        }
        Ok(loss)
    }

    fn forward_tape(&self, ex: &LmExample<'_>) -> Result<(Matrix, TargetTape)> {
        let d = self.dim();
        let mut x = Matrix::zeros(0, d);
        let mut text_ids = Vec::new();
        for &id in ex.system {
            x.push_row(self.token_embedding(id)?)?;
            text_ids.push(Some(id));
        }
        let vision = match ex.grid {
            Some(grid) => {
                self.check_grid(grid)?;
                let m = grid.patch_count();
                let mut v = self.patch_in.forward(&grid.patches);
                for i in 0..m {
                    axpy(v.row_mut(i), 1.0, self.patch_position.row(i));
                }
                let mask = AttentionMask::bidirectional(m);
                let mut block_tapes = Vec::new();
                for b in &self.vision_blocks {
                    let (y, t) = b.forward_train(&v, &mask)?;
                    block_tapes.push(t);
                    v = y;
                }
                let (normed, norm_tape) = self.vision_norm.forward(&v);
                let pre_act = self.projector_in.forward(&normed);
                let act = silu(&pre_act);
                let e = self.projector_out.forward(&act);
                let start = x.rows();
                x.append(&e)?;
                text_ids.extend(std::iter::repeat_n(None, m));
                Some(VisionTape {
                    patches: grid.patches.clone(),
                    block_tapes,
                    norm_tape,
                    normed,
                    pre_act,
                    act,
                    start,
                })
            }
            None => None,
        };
        for &id in ex.text {
            x.push_row(self.token_embedding(id)?)?;
            text_ids.push(Some(id));
        }
        let len = x.rows();
        for i in 0..len {
            axpy(x.row_mut(i), 1.0, self.position(i)?);
        }
        let mask = AttentionMask::causal(len);
        let mut block_tapes = Vec::new();
        for b in &self.blocks {
            let (y, t) = b.forward_train(&x, &mask)?;
            block_tapes.push(t);
            x = y;
        }
        let (hidden, final_tape) = self.final_norm.forward(&x);
        let logits = self.lm_head.forward(&hidden);
        Ok((
            logits,
            TargetTape {
                vision,
                seq_len: len,
                text_ids,
                block_tapes,
                final_tape,
                hidden,
            },
        ))
    }

    fn backward_tape(&self, tape: &TargetTape, dlogits: &Matrix, g: &mut TargetParams) -> Result<()> {
        let dh = self.lm_head.backward(&tape.hidden, dlogits, &mut g.lm_head);
        let mut dx = self.final_norm.backward(&tape.final_tape, &dh, &mut g.final_norm);
        for (b, (t, gb)) in self
            .blocks
            .iter()
            .zip(tape.block_tapes.iter().zip(g.blocks.iter_mut()))
            .rev()
        {
            dx = b.backward(t, &dx, gb);
        }
        for i in 0..tape.seq_len {
            axpy(g.position_embedding.row_mut(i), 1.0, dx.row(i));
            if let Some(id) = tape.text_ids[i] {
                axpy(g.token_embedding.row_mut(id), 1.0, dx.row(i));
            }
        }
        if let Some(v) = &tape.vision {
            let m = v.patches.rows();
            let de = dx.slice_rows(v.start, v.start + m);
            let dact = self.projector_out.backward(&v.act, &de, &mut g.projector_out);
            let dpre = silu_backward(&v.pre_act, &dact);
            let dnormed = self.projector_in.backward(&v.normed, &dpre, &mut g.projector_in);
            let mut dv = self.vision_norm.backward(&v.norm_tape, &dnormed, &mut g.vision_norm);
            for (b, (t, gb)) in self
                .vision_blocks
                .iter()
                .zip(v.block_tapes.iter().zip(g.vision_blocks.iter_mut()))
                .rev()
            {
                dv = b.backward(t, &dv, gb);
            }
            for i in 0..m {
                axpy(g.patch_position.row_mut(i), 1.0, dv.row(i));
            }
            self.patch_in.backward(&v.patches, &dv, &mut g.patch_in);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(seed: u64) -> TargetConfig {
        TargetConfig {
            vocab: 8,
            dim: 8,
            heads: 2,
            depth: 2,
            vision_depth: 1,
            patch_dim: 3,
            max_patches: 4,
            mlp_hidden: 12,
            projector_hidden: 10,
            max_positions: 32,
            seed,
        }
    }

    fn grid(side: usize, seed: u64) -> ImagePatchGrid {
        let mut rng = RngState::new(seed);
        ImagePatchGrid::new(side, Matrix::randn(side * side, 3, 1.0, &mut rng)).unwrap()
    }

    fn text(ids: &[usize]) -> Vec<TextToken> {
        TextToken::list(ids, TextRole::Instruction)
    }

    #[test]
    fn embed_text_is_a_lookup() {
        let p = TargetParams::new(small_config(1));
        assert_eq!(p.embed_text(&[]).unwrap().rows(), 0);
        let e = p.embed_text(&text(&[3, 3])).unwrap();
        assert_eq!(e.row(0), e.row(1));
        let all = p.embed_text(&text(&(0..8).collect::<Vec<_>>())).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all.row(i), all.row(j));
            }
        }
        assert!(matches!(
            p.embed_text(&text(&[8])),
            Err(Error::TokenOutOfRange { id: 8, vocab: 8 })
        ));
    }

    #[test]
    fn embed_image_is_bidirectional_and_deterministic() {
        let p = TargetParams::new(small_config(2));
        let single = p.embed_image(&grid(1, 3)).unwrap();
        assert_eq!((single.rows(), single.cols()), (1, 8));
        let g = grid(2, 4);
        let a = p.embed_image(&g).unwrap();
        assert_eq!(a, p.embed_image(&g.clone()).unwrap());
        // Swap patches 1 and 2; patch 0's embedding must move.
        let mut swapped = g.clone();
        let (r1, r2) = (g.patches.row(1).to_vec(), g.patches.row(2).to_vec());
        swapped.patches.row_mut(1).copy_from_slice(&r2);
        swapped.patches.row_mut(2).copy_from_slice(&r1);
        let b = p.embed_image(&swapped).unwrap();
        assert_ne!(a.row(0), b.row(0));
        let bad = ImagePatchGrid {
            side: 1,
            patches: Matrix::zeros(1, 5),
        };
        assert!(p.embed_image(&bad).is_err());
    }

    #[test]
    fn assembled_layout_matches_interleaving() {
        let p = TargetParams::new(small_config(3));
        let sys = TextToken::list(&[1, 2], TextRole::System);
        let seq = p.assemble_sequence(&sys, Some(&grid(2, 5)), &text(&[3, 4, 5])).unwrap();
        assert_eq!(seq.len(), 9);
        let visual: Vec<usize> = (0..9).filter(|&i| seq.modality[i] == Modality::Visual).collect();
        assert_eq!(visual, vec![2, 3, 4, 5]);
        assert_eq!(seq.visual, 2..6);

        let suffix = p.assemble_sequence(&sys, Some(&grid(2, 5)), &[]).unwrap();
        assert_eq!(suffix.visual, 2..6);
        assert_eq!(suffix.len(), 6);

        let textual = p.assemble_sequence(&sys, None, &text(&[3])).unwrap();
        assert!(textual.visual.is_empty());
        assert!(textual.modality.iter().all(|m| *m == Modality::Text));

        let json = serde_json::to_string(&seq).unwrap();
        let back: AssembledSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(back.modality, seq.modality);
        assert_eq!(back.visual, seq.visual);
    }

    #[test]
    fn incremental_forward_matches_full_reforward() {
        for seed in 0..100u64 {
            let p = TargetParams::new(small_config(seed));
            let sys = TextToken::list(&[1], TextRole::System);
            let n_instr = 1 + (seed as usize % 4);
            let ids: Vec<usize> = (0..n_instr).map(|i| (i * 3 + seed as usize) % 8).collect();
            let g = (seed % 2 == 0).then(|| grid(1 + (seed as usize % 2), seed));
            let seq = p.assemble_sequence(&sys, g.as_ref(), &text(&ids)).unwrap();
            let mut session = TargetSession::new(&p);
            p.target_forward(&seq, &mut session).unwrap();
            let mut longer = seq.clone();
            longer.extend_text(&[(seed as usize) % 8], &p).unwrap();
            let inc = p.target_forward(&longer, &mut session).unwrap();
            let full = p.target_forward(&longer, &mut TargetSession::new(&p)).unwrap();
            assert!(inc.hidden.max_abs_diff(&full.hidden) <= 1e-10);
            assert!(inc.logits.max_abs_diff(&full.logits) <= 1e-10);
            for i in 0..longer.len() {
                let s: f64 = inc.distribution(i, 1.0).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            // Appending leaves earlier features untouched.
            for i in 0..seq.len() {
                assert_eq!(inc.hidden.row(i), full.hidden.row(i));
            }
        }
    }

    #[test]
    fn divergent_prefix_is_stale() {
        let p = TargetParams::new(small_config(4));
        let a = p.assemble_sequence(&[], None, &text(&[1, 2, 3])).unwrap();
        let b = p.assemble_sequence(&[], None, &text(&[1, 5, 3])).unwrap();
        let mut s = TargetSession::new(&p);
        p.target_forward(&a, &mut s).unwrap();
        assert!(matches!(p.target_forward(&b, &mut s), Err(Error::StaleCache(_))));
    }

    #[test]
    fn greedy_generation_is_repeatable() {
        let p = TargetParams::new(small_config(5));
        let seq = p.assemble_sequence(&[], Some(&grid(2, 1)), &text(&[1, 2])).unwrap();
        let mut r1 = RngState::new(0);
        let mut r2 = RngState::new(99);
        let a = p.autoregressive_generate(&seq, 0.0, 6, &mut r1).unwrap();
        let b = p.autoregressive_generate(&seq, 0.0, 6, &mut r2).unwrap();
        assert_eq!(a, b);
        let one = p.autoregressive_generate(&seq, 1.0, 1, &mut r1).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn lm_gradients_match_central_differences() {
        let mut p = TargetParams::new(small_config(6));
        let mut rng = RngState::new(7);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * (rng.uniform() - 0.5);
            }
        }
        let g = grid(2, 8);
        let targets = [(6usize, 3usize), (7, 5), (8, 0)];
        let ex = LmExample {
            system: &[1],
            grid: Some(&g),
            text: &[2, 4, 6, 1],
            targets: &targets,
        };
        let mut grad = p.zeros_like();
        p.lm_loss(&ex, Some(&mut grad)).unwrap();
        let eps = 1e-5;
        let analytic: Vec<Vec<f64>> = grad.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        let names: Vec<String> = grad.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut checked = 0;
        for (ti, values) in analytic.iter().enumerate() {
            // Every third entry keeps this affordable while touching every tensor.
            for j in (0..values.len()).step_by(3) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[j] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= eps;
                let num = (plus.lm_loss(&ex, None).unwrap() - minus.lm_loss(&ex, None).unwrap()) / (2.0 * eps);
                let a = values[j];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
                assert!(rel < 1e-4, "{} [{j}]: {a} vs {num}", names[ti]);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
