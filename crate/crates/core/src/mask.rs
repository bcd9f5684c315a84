use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Causal,
    Bidirectional,
    TreeStructured,
}

/// Query × key visibility. Keys may include a cached prefix that precedes the
/// queries; queries always refer to the newest rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        Self::causal_with_prefix(n, 0)
    }

    /// `n` new queries at positions `prefix..prefix + n` over all earlier keys.
    pub fn causal_with_prefix(n: usize, prefix: usize) -> Self {
        let keys = prefix + n;
        let mut allowed = vec![false; n * keys];
        for i in 0..n {
            allowed[i * keys..i * keys + prefix + i + 1].fill(true);
        }
        Self {
            kind: MaskKind::Causal,
            queries: n,
            keys,
            allowed,
        }
    }

    pub fn bidirectional(n: usize) -> Self {
        Self {
            kind: MaskKind::Bidirectional,
            queries: n,
            keys: n,
            allowed: vec![true; n * n],
        }
    }

    /// Tree nodes appended after a committed prefix. `parents[i]` indexes an
    /// earlier node (`None` hangs the node directly off the prefix). Queries
    /// are the nodes `query_start..parents.len()`; each sees the whole prefix
    /// plus its own ancestors and itself.
    pub fn tree_structured(prefix: usize, parents: &[Option<usize>], query_start: usize) -> Self {
        let nodes = parents.len();
        let keys = prefix + nodes;
        let queries = nodes - query_start;
        let mut allowed = vec![false; queries * keys];
        for (qi, node) in (query_start..nodes).enumerate() {
            let row = &mut allowed[qi * keys..(qi + 1) * keys];
            row[..prefix].fill(true);
            let mut cur = Some(node);
            while let Some(c) = cur {
                debug_assert!(parents[c].is_none_or(|p| p < c), "parents precede children");
                row[prefix + c] = true;
                cur = parents[c];
            }
        }
        Self {
            kind: MaskKind::TreeStructured,
            queries,
            keys,
            allowed,
        }
    }

    /// Hides `keys` from every query outside `keys` itself.
    pub fn block_keys(&mut self, keys: Range<usize>, query_offset: usize) {
        for q in 0..self.queries {
            let pos = query_offset + q;
            if keys.contains(&pos) {
                continue;
            }
            for k in keys.clone() {
                if k < self.keys {
                    self.allowed[q * self.keys + k] = false;
                }
            }
        }
    }

    #[inline]
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    #[inline]
    pub fn queries(&self) -> usize {
        self.queries
    }

    #[inline]
    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    #[inline]
    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.keys..(query + 1) * self.keys]
    }
}
