//! Feature-level draft model: a fusion map plus one causal block, sharing the
//! target's frozen embeddings and LM head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BlockParams, KvCache, Linear, Parameters};
use crate::mask::AttentionMask;
use crate::rng::{Chance, RngState};
use crate::sampling::{softmax_with_temperature, top_k};
use crate::target::{AssembledSequence, Modality, TargetParams};
use crate::tensor::{axpy, Matrix};

/// How per-position draft inputs are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DraftMode {
    /// Text positions fuse `(h_i, e_{i+1})`; visual positions pass `e_i` through.
    Decoupled,
    /// Every position fuses `(h_i, e_{i+1})`.
    BaselineConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DraftConfig {
    pub mode: DraftMode,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            mode: DraftMode::Decoupled,
            mlp_hidden: 64,
            seed: 1,
        }
    }
}

/// Trainable draft weights. Embeddings and the LM head come from the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftParams {
    pub mode: DraftMode,
    pub fuse: Linear,
    pub block: BlockParams,
}

impl Parameters for DraftParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.fuse.visit(&p("fuse"), out);
        self.block.visit(&p("block"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.fuse.visit_mut(out);
        self.block.visit_mut(out);
    }
}

impl DraftParams {
    pub fn new(target: &TargetParams, config: &DraftConfig) -> Self {
        let d = target.dim();
        let mut rng = RngState::new(config.seed);
        Self {
            mode: config.mode,
            fuse: Linear::new(2 * d, d, 1.0 / ((2 * d) as f64).sqrt(), &mut rng),
            block: BlockParams::new(d, target.config.heads, config.mlp_hidden, 1, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.fuse.outputs()
    }

    /// `f_down(concat(h, e))`.
    pub fn fuse_row(&self, h: &[f64], e: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(h.len() + e.len());
        x.extend_from_slice(h);
        x.extend_from_slice(e);
        let mut out = vec![0.0; self.dim()];
        self.fuse.forward_row(&x, &mut out);
        out
    }
}

/// One draft input vector per position plus the modality mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftInput {
    pub vectors: Matrix,
    pub modality: Vec<Modality>,
}

/// Builds draft inputs for the first `hidden.rows()` positions of `seq`.
/// A position without a successor in `seq` is the drafting frontier and is
/// paired with its own (most recently committed) embedding.
pub fn build_draft_inputs(seq: &AssembledSequence, hidden: &Matrix, draft: &DraftParams) -> Result<DraftInput> {
    let n = hidden.rows();
    if n > seq.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} hidden rows for a sequence of {}",
            seq.len()
        )));
    }
    let mut vectors = Matrix::zeros(0, draft.dim());
    for i in 0..n {
        if seq.modality[i] == Modality::Visual && draft.mode == DraftMode::Decoupled {
            vectors.push_row(seq.embeddings.row(i))?;
        } else {
            let next = seq.embeddings.row((i + 1).min(seq.len() - 1));
            vectors.push_row(&draft.fuse_row(hidden.row(i), next))?;
        }
    }
    Ok(DraftInput {
        vectors,
        modality: seq.modality[..n].to_vec(),
    })
}

/// Committed draft state: inputs, predicted features and logits, one cache.
#[derive(Clone, Debug)]
pub struct DraftSession {
    cache: KvCache,
    inputs: Matrix,
    features: Matrix,
    logits: Matrix,
}

impl DraftSession {
    pub fn new(target: &TargetParams) -> Self {
        let d = target.dim();
        Self {
            cache: KvCache::new(d),
            inputs: Matrix::zeros(0, d),
            features: Matrix::zeros(0, d),
            logits: Matrix::zeros(0, target.vocab()),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

fn depths(parents: &[Option<usize>]) -> Vec<usize> {
    let mut d = Vec::with_capacity(parents.len());
    for p in parents {
        d.push(p.map_or(1, |p| d[p] + 1));
    }
    d
}

/// Rows appended on top of the committed draft prefix. `parents` index the
/// whole speculative set; rows `query_start..` are the ones being run.
fn run_rows(
    target: &TargetParams,
    draft: &DraftParams,
    cache: &mut KvCache,
    committed: usize,
    inputs: &Matrix,
    parents: &[Option<usize>],
    query_start: usize,
) -> Result<(Matrix, Matrix)> {
    let depth = depths(parents);
    let mut x = inputs.clone();
    for (r, node) in (query_start..parents.len()).enumerate() {
        // A node at depth d sits d - 1 positions after the frontier row.
        axpy(x.row_mut(r), 1.0, target.position(committed + depth[node] - 1)?);
    }
    let mask = AttentionMask::tree_structured(committed, parents, query_start);
    let features = draft.block.forward_cached(&x, cache, &mask)?;
    let logits = target.lm_head.forward(&features);
    Ok((features, logits))
}

/// Feature outputs of a draft forward (all committed positions).
#[derive(Clone, Debug, PartialEq)]
pub struct DraftOutputs {
    pub features: Matrix,
    pub logits: Matrix,
}

impl DraftOutputs {
    pub fn distribution(&self, position: usize, temperature: f64) -> Result<Vec<f64>> {
        softmax_with_temperature(self.logits.row(position), temperature)
    }
}

/// Prefill or incremental draft forward; the session must hold a prefix of `inputs`.
pub fn draft_forward(
    inputs: &DraftInput,
    target: &TargetParams,
    draft: &DraftParams,
    session: &mut DraftSession,
) -> Result<DraftOutputs> {
    let done = session.len();
    if done > inputs.vectors.rows() || session.cache.len() != done {
        return Err(Error::StaleCache("draft session is ahead of its inputs".into()));
    }
    for i in 0..done {
        if session.inputs.row(i) != inputs.vectors.row(i) {
            return Err(Error::StaleCache(format!("draft position {i} diverges from the cached prefix")));
        }
    }
    let fresh = inputs.vectors.slice_rows(done, inputs.vectors.rows());
    extend_committed(target, draft, session, &fresh)?;
    Ok(DraftOutputs {
        features: session.features.clone(),
        logits: session.logits.clone(),
    })
}

/// Appends committed rows (built from true target features) to the session.
pub fn extend_committed(
    target: &TargetParams,
    draft: &DraftParams,
    session: &mut DraftSession,
    rows: &Matrix,
) -> Result<()> {
    if rows.rows() == 0 {
        return Ok(());
    }
    let committed = session.len();
    let parents: Vec<Option<usize>> = (0..rows.rows()).map(|i| i.checked_sub(1)).collect();
    // Committed rows sit at positions committed.., i.e. "depth 1" is the next position.
    let (features, logits) = run_rows(target, draft, &mut session.cache, committed, rows, &parents, 0)?;
    session.inputs.append(rows)?;
    session.features.append(&features)?;
    session.logits.append(&logits)?;
    Ok(())
}

/// One candidate node; `parent == None` hangs it off the root (the last
/// committed token).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub token: usize,
    /// Draft probability of `token` under its parent's distribution.
    pub q: f64,
    pub parent: Option<usize>,
    pub depth: usize,
}

/// Children drawn for one node: the draft distribution they were drawn from
/// and the draw order (repeats kept for sampling-mode verification).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub parent: Option<usize>,
    pub q: Vec<f64>,
    pub draws: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
    pub expansions: Vec<Expansion>,
    pub plan: Vec<usize>,
}

impl DraftTree {
    pub fn expansion_of(&self, parent: Option<usize>) -> Option<&Expansion> {
        self.expansions.iter().find(|e| e.parent == parent)
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Chain of `gamma` candidates with the draft distribution used at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftChain {
    pub tokens: Vec<usize>,
    pub q: Vec<Vec<f64>>,
}

/// Expands a draft tree from the session's frontier. Greedy mode
/// (temperature 0) takes the top-k distinct tokens per node; sampling mode
/// draws k i.i.d. tokens, merging duplicates into one node.
pub fn draft_tree(
    session: &mut DraftSession,
    target: &TargetParams,
    draft: &DraftParams,
    plan: &[usize],
    temperature: f64,
    chance: &mut dyn Chance,
) -> Result<DraftTree> {
    if plan.is_empty() || plan.contains(&0) {
        return Err(Error::InvalidArgument("tree plan needs at least one level of positive counts".into()));
    }
    let committed = session.len();
    if committed == 0 {
        return Err(Error::StaleCache("draft session has no frontier".into()));
    }
    let root_feature = session.features.row(committed - 1).to_vec();
    let root_logits = session.logits.row(committed - 1).to_vec();

    let mut nodes: Vec<DraftNode> = Vec::new();
    let mut expansions = Vec::new();
    let mut node_features: Vec<Vec<f64>> = Vec::new();
    let mut node_logits: Vec<Vec<f64>> = Vec::new();
    // (parent id, feature, logits) awaiting expansion.
    let mut frontier: Vec<Option<usize>> = vec![None];
    let mut spec_parents: Vec<Option<usize>> = Vec::new();

    let result = (|| -> Result<()> {
        for (level, &k) in plan.iter().enumerate() {
            let first_new = nodes.len();
            for &parent in &frontier {
                let logits = match parent {
                    None => &root_logits,
                    Some(u) => &node_logits[u],
                };
                let q = softmax_with_temperature(logits, temperature)?;
                let picks = if temperature == 0.0 {
                    top_k(logits, k)
                } else {
                    (0..k).map(|_| chance.categorical(&q)).collect::<Result<Vec<_>>>()?
                };
                let mut draws = Vec::with_capacity(k);
                for token in picks {
                    let existing = (first_new..nodes.len()).find(|&i| nodes[i].parent == parent && nodes[i].token == token);
                    let idx = existing.unwrap_or_else(|| {
                        nodes.push(DraftNode {
                            token,
                            q: q[token],
                            parent,
                            depth: level + 1,
                        });
                        nodes.len() - 1
                    });
                    draws.push(idx);
                }
                expansions.push(Expansion { parent, q, draws });
            }
            let new: Vec<usize> = (first_new..nodes.len()).collect();
            if level + 1 == plan.len() {
                break;
            }
            let mut rows = Matrix::zeros(0, draft.dim());
            for &i in &new {
                let h = match nodes[i].parent {
                    None => &root_feature,
                    Some(u) => &node_features[u],
                };
                rows.push_row(&draft.fuse_row(h, target.token_embedding(nodes[i].token)?))?;
                spec_parents.push(nodes[i].parent);
            }
            let (features, logits) =
                run_rows(target, draft, &mut session.cache, committed, &rows, &spec_parents, first_new)?;
            for r in 0..new.len() {
                node_features.push(features.row(r).to_vec());
                node_logits.push(logits.row(r).to_vec());
            }
            frontier = new.into_iter().map(Some).collect();
        }
        Ok(())
    })();
    session.cache.truncate(committed);
    result?;
    Ok(DraftTree {
        nodes,
        expansions,
        plan: plan.to_vec(),
    })
}

/// `gamma` autoregressive candidates; the drafted token's embedding is fed
/// back together with the draft's own predicted feature.
pub fn draft_chain(
    session: &mut DraftSession,
    target: &TargetParams,
    draft: &DraftParams,
    gamma: usize,
    temperature: f64,
    chance: &mut dyn Chance,
) -> Result<DraftChain> {
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be at least 1".into()));
    }
    let tree = draft_tree(session, target, draft, &vec![1; gamma], temperature, chance)?;
    Ok(DraftChain {
        tokens: tree.tokens(),
        q: tree.expansions.into_iter().map(|e| e.q).collect(),
    })
}
