//! Accept/reject of drafted candidates against the target distribution.

use serde::{Deserialize, Serialize};

use crate::draft::DraftTree;
use crate::error::{Error, Result};
use crate::rng::Chance;
use crate::sampling::{argmax, validate_distribution};

/// Guard against division by vanishing draft probabilities.
pub const PROBABILITY_FLOOR: f64 = 1e-300;
/// Residual mass below which the adjusted distribution falls back to `p`.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Acceptance test applied to each candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceRule {
    /// `min(1, p/q)`.
    #[default]
    Standard,
    /// `p/q` without the cap. Deliberately wrong; exists so the losslessness
    /// certification can show it detects a broken rule.
    UncappedRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionKind {
    Resample,
    Bonus,
    Fallback,
}

/// One accept/reject decision: which node (chain position for chains) at
/// which depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptFlag {
    pub node: usize,
    pub depth: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Accepted node indices, root to leaf.
    pub accepted_nodes: Vec<usize>,
    pub accepted_tokens: Vec<usize>,
    pub correction: usize,
    pub correction_kind: CorrectionKind,
    pub flags: Vec<AcceptFlag>,
}

impl VerificationResult {
    pub fn accepted_count(&self) -> usize {
        self.accepted_nodes.len()
    }

    /// Accepted tokens followed by the correction/bonus token.
    pub fn appended(&self) -> Vec<usize> {
        let mut out = self.accepted_tokens.clone();
        out.push(self.correction);
        out
    }
}

pub fn acceptance_probability(p: f64, q: f64) -> Result<f64> {
    acceptance_with(AcceptanceRule::Standard, p, q)
}

pub fn acceptance_with(rule: AcceptanceRule, p: f64, q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::OutsideDraftSupport);
    }
    let ratio = p.max(0.0) / q.max(PROBABILITY_FLOOR);
    Ok(match rule {
        AcceptanceRule::Standard => ratio.min(1.0),
        AcceptanceRule::UncappedRatio => ratio,
    })
}

/// `norm(max(0, p - q))`; the flag is set when the residual mass is too small
/// and `p` is returned instead.
pub fn adjusted_distribution(p: &[f64], q: &[f64]) -> Result<(Vec<f64>, bool)> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch("p and q differ in length".into()));
    }
    Ok(residual(p, q))
}

fn residual(p: &[f64], q: &[f64]) -> (Vec<f64>, bool) {
    let mut r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = r.iter().sum();
    if mass < RESIDUAL_FLOOR {
        return (p.to_vec(), true);
    }
    r.iter_mut().for_each(|x| *x /= mass);
    (r, false)
}

fn draw(dist: &[f64], temperature: f64, chance: &mut dyn Chance) -> Result<usize> {
    if temperature == 0.0 {
        Ok(argmax(dist))
    } else {
        chance.categorical(dist)
    }
}

/// Chain verification. `p` holds `candidates.len() + 1` target distributions
/// (the last one feeds the bonus token); `q[i]` is the draft distribution
/// `candidates[i]` was drawn from.
pub fn verify_chain(
    candidates: &[usize],
    q: &[Vec<f64>],
    p: &[Vec<f64>],
    temperature: f64,
    chance: &mut dyn Chance,
    rule: AcceptanceRule,
) -> Result<VerificationResult> {
    if q.len() != candidates.len() || p.len() != candidates.len() + 1 {
        return Err(Error::DimensionMismatch(
            "chain verification needs one q per candidate and one extra p".into(),
        ));
    }
    let mut accepted = Vec::new();
    let mut flags = Vec::new();
    for (i, &x) in candidates.iter().enumerate() {
        let ok = if temperature == 0.0 {
            x == argmax(&p[i])
        } else {
            let a = acceptance_with(rule, p[i][x], q[i][x])?;
            chance.bernoulli(a)
        };
        flags.push(AcceptFlag {
            node: i,
            depth: i + 1,
            accepted: ok,
        });
        if !ok {
            let (token, kind) = if temperature == 0.0 {
                (argmax(&p[i]), CorrectionKind::Resample)
            } else {
                let (r, fallback) = residual(&p[i], &q[i]);
                let kind = if fallback {
                    CorrectionKind::Fallback
                } else {
                    CorrectionKind::Resample
                };
                (chance.categorical(&r)?, kind)
            };
            return Ok(VerificationResult {
                accepted_tokens: accepted.iter().map(|&j| candidates[j]).collect(),
                accepted_nodes: accepted,
                correction: token,
                correction_kind: kind,
                flags,
            });
        }
        accepted.push(i);
    }
    Ok(VerificationResult {
        accepted_tokens: candidates.to_vec(),
        accepted_nodes: accepted,
        correction: draw(&p[candidates.len()], temperature, chance)?,
        correction_kind: CorrectionKind::Bonus,
        flags,
    })
}

/// Tree verification. `p_root` is the target distribution after the last
/// committed token; `p_nodes[i]` the one after node `i`.
///
/// Sampling mode walks a node's draws in order, testing each against a
/// residual that starts at `p` and shrinks to `norm(max(0, p_res - q))` after
/// every rejection; the first acceptance descends. Greedy mode descends into
/// the child matching `argmax(p)`.
pub fn verify_tree(
    tree: &DraftTree,
    p_root: &[f64],
    p_nodes: &[Vec<f64>],
    temperature: f64,
    chance: &mut dyn Chance,
    rule: AcceptanceRule,
) -> Result<VerificationResult> {
    if p_nodes.len() != tree.nodes.len() {
        return Err(Error::DimensionMismatch("one p per tree node".into()));
    }
    let mut current: Option<usize> = None;
    let mut accepted_nodes: Vec<usize> = Vec::new();
    let mut flags = Vec::new();
    loop {
        let p_cur = current.map_or(p_root, |c| p_nodes[c].as_slice());
        let Some(exp) = tree.expansion_of(current) else {
            return Ok(VerificationResult {
                accepted_tokens: accepted_nodes.iter().map(|&n| tree.nodes[n].token).collect(),
                accepted_nodes,
                correction: draw(p_cur, temperature, chance)?,
                correction_kind: CorrectionKind::Bonus,
                flags,
            });
        };
        let mut next = None;
        let mut kind = CorrectionKind::Resample;
        let correction;
        if temperature == 0.0 {
            let want = argmax(p_cur);
            let mut seen = Vec::new();
            for &c in &exp.draws {
                if seen.contains(&c) {
                    continue;
                }
                seen.push(c);
                let ok = tree.nodes[c].token == want;
                flags.push(AcceptFlag {
                    node: c,
                    depth: tree.nodes[c].depth,
                    accepted: ok,
                });
                if ok {
                    next = Some(c);
                    break;
                }
            }
            correction = want;
        } else {
            let mut p_res = p_cur.to_vec();
            for &c in &exp.draws {
                let x = tree.nodes[c].token;
                let a = acceptance_with(rule, p_res[x], exp.q[x])?;
                let ok = chance.bernoulli(a);
                flags.push(AcceptFlag {
                    node: c,
                    depth: tree.nodes[c].depth,
                    accepted: ok,
                });
                if ok {
                    next = Some(c);
                    break;
                }
                let (r, fallback) = residual(&p_res, &exp.q);
                if fallback {
                    kind = CorrectionKind::Fallback;
                }
                p_res = r;
            }
            correction = if next.is_none() {
                chance.categorical(&p_res)?
            } else {
                0
            };
        }
        match next {
            Some(c) => {
                accepted_nodes.push(c);
                current = Some(c);
            }
            None => {
                return Ok(VerificationResult {
                    accepted_tokens: accepted_nodes.iter().map(|&n| tree.nodes[n].token).collect(),
                    accepted_nodes,
                    correction,
                    correction_kind: kind,
                    flags,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::{DraftNode, Expansion};
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_probability(0.3, 0.3).unwrap(), 1.0);
        assert!((acceptance_probability(0.1, 0.4).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(acceptance_probability(0.5, 0.2).unwrap(), 1.0);
        assert_eq!(
            acceptance_probability(0.5, 0.0).unwrap_err().to_string(),
            "candidate outside draft support"
        );
        assert!((acceptance_with(AcceptanceRule::UncappedRatio, 0.5, 0.2).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn adjusted_examples() {
        assert_eq!(adjusted_distribution(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), (vec![0.0, 1.0], false));
        assert_eq!(adjusted_distribution(&[0.7, 0.3], &[0.7, 0.3]).unwrap(), (vec![0.7, 0.3], true));
        let (r, fb) = adjusted_distribution(&[0.6, 0.2, 0.2], &[0.2, 0.6, 0.2]).unwrap();
        assert!(!fb);
        assert!((r[0] - 1.0).abs() < 1e-15 && r[1] == 0.0 && r[2] == 0.0);
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn greedy_chain_matches_exactly() {
        let p = vec![one_hot(1, 3), one_hot(2, 3), one_hot(0, 3)];
        let q = vec![one_hot(1, 3), one_hot(0, 3)];
        let mut rng = RngState::new(0);
        let r = verify_chain(&[1, 0], &q, &p, 0.0, &mut rng, AcceptanceRule::Standard).unwrap();
        assert_eq!(r.accepted_tokens, vec![1]);
        assert_eq!(r.correction, 2);
        assert_eq!(r.appended(), vec![1, 2]);
        assert_eq!(rng.position(), 0);
    }

    #[test]
    fn full_acceptance_appends_bonus() {
        let u = vec![0.25; 4];
        let p = vec![u.clone(); 5];
        let q = vec![u; 4];
        let r = verify_chain(&[0, 1, 2, 3], &q, &p, 1.0, &mut RngState::new(1), AcceptanceRule::Standard).unwrap();
        assert_eq!(r.accepted_count(), 4);
        assert_eq!(r.appended().len(), 5);
        assert_eq!(r.correction_kind, CorrectionKind::Bonus);
    }

    fn chain_tree(tokens: &[usize], q: &[Vec<f64>]) -> DraftTree {
        DraftTree {
            nodes: tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| DraftNode {
                    token: t,
                    q: q[i][t],
                    parent: i.checked_sub(1),
                    depth: i + 1,
                })
                .collect(),
            expansions: (0..tokens.len())
                .map(|i| Expansion {
                    parent: i.checked_sub(1),
                    q: q[i].clone(),
                    draws: vec![i],
                })
                .collect(),
            plan: vec![1; tokens.len()],
        }
    }

    #[test]
    fn greedy_tree_descends_into_argmax_child() {
        let tree = DraftTree {
            nodes: vec![
                DraftNode { token: 0, q: 0.6, parent: None, depth: 1 },
                DraftNode { token: 1, q: 0.4, parent: None, depth: 1 },
            ],
            expansions: vec![Expansion {
                parent: None,
                q: vec![0.6, 0.4],
                draws: vec![0, 1],
            }],
            plan: vec![2],
        };
        let p_nodes = vec![one_hot(0, 2), one_hot(1, 2)];
        let r = verify_tree(&tree, &one_hot(1, 2), &p_nodes, 0.0, &mut RngState::new(0), AcceptanceRule::Standard)
            .unwrap();
        assert_eq!(r.accepted_nodes, vec![1]);
        assert_eq!(r.correction, 1);
        assert_eq!(r.correction_kind, CorrectionKind::Bonus);
    }

    proptest! {
        #[test]
        fn single_branch_tree_is_the_chain(seed in any::<u64>(), raw in prop::collection::vec(0.01f64..1.0, 9), toks in prop::collection::vec(0usize..3, 2)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<f64>>() };
            let q = vec![norm(&raw[0..3]), norm(&raw[3..6])];
            let p = vec![norm(&raw[6..9]), norm(&raw[3..6]), norm(&raw[0..3])];
            let a = verify_chain(&toks, &q, &p, 1.0, &mut RngState::new(seed), AcceptanceRule::Standard).unwrap();
            let tree = chain_tree(&toks, &q);
            let b = verify_tree(&tree, &p[0], &p[1..], 1.0, &mut RngState::new(seed), AcceptanceRule::Standard).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn appended_is_accepted_plus_one(seed in any::<u64>(), raw in prop::collection::vec(0.0f64..1.0, 12)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<f64>>() };
            let q = vec![norm(&raw[0..4]), norm(&raw[4..8])];
            let p = vec![norm(&raw[8..12]), norm(&raw[0..4]), norm(&raw[4..8])];
            let mut rng = RngState::new(seed);
            let toks = vec![crate::sampling::sample_categorical(&q[0], &mut rng).unwrap(), crate::sampling::sample_categorical(&q[1], &mut rng).unwrap()];
            let r = verify_chain(&toks, &q, &p, 1.0, &mut rng, AcceptanceRule::Standard).unwrap();
            prop_assert_eq!(r.appended().len(), r.accepted_count() + 1);
            prop_assert!(r.appended().len() <= 3);
            prop_assert_eq!(&r.accepted_tokens[..], &toks[..r.accepted_count()]);
        }
    }
}
