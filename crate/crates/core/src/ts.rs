//! Finite metric transition systems and greatest approximate
//! (bi)simulation relations.
//!
//! Outputs live in `R^n` under the max norm. Matching in the relation
//! engine is label-agnostic: a move of one system may be answered by a move
//! of the other under any label.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::to_canonical_string;

#[derive(Debug, Error)]
pub enum TsError {
    #[error("invalid transition system: {0}")]
    Invalid(String),
    #[error("output dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `(Q, L, ->, R^n, H)` with transitions grouped by `(state, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSystem {
    num_states: usize,
    num_labels: usize,
    dim: usize,
    input_dim: usize,
    outputs: Vec<f64>,
    inputs: Vec<f64>,
    // successors of (q, l) are targets[offsets[q * L + l]..offsets[q * L + l + 1]]
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl TransitionSystem {
    /// Builds from explicit triples `(source, label, target)`; duplicates
    /// are collapsed.
    pub fn new(
        outputs: Vec<Vec<f64>>,
        labels: Vec<Vec<f64>>,
        transitions: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<TransitionSystem, TsError> {
        let dim = outputs.first().map_or(0, Vec::len);
        if outputs.iter().any(|o| o.len() != dim) {
            return Err(TsError::Invalid("outputs must share one dimension".into()));
        }
        let input_dim = labels.first().map_or(0, Vec::len);
        if labels.iter().any(|l| l.len() != input_dim) {
            return Err(TsError::Invalid("labels must share one dimension".into()));
        }
        let nq = outputs.len();
        let nl = labels.len();
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nq * nl];
        for (q, l, p) in transitions {
            if q >= nq || p >= nq || l >= nl {
                return Err(TsError::Invalid(format!(
                    "transition ({q}, {l}, {p}) out of range for {nq} states, {nl} labels"
                )));
            }
            buckets[q * nl + l].push(p as u32);
        }
        let mut offsets = Vec::with_capacity(nq * nl + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut b in buckets {
            b.sort_unstable();
            b.dedup();
            targets.extend(b);
            offsets.push(targets.len());
        }
        Ok(TransitionSystem {
            num_states: nq,
            num_labels: nl,
            dim,
            input_dim,
            outputs: outputs.into_iter().flatten().collect(),
            inputs: labels.into_iter().flatten().collect(),
            offsets,
            targets,
        })
    }

    /// Builds directly from the grouped representation. Each successor
    /// group must be sorted and free of duplicates.
    pub(crate) fn from_parts(
        (num_states, num_labels): (usize, usize),
        (dim, input_dim): (usize, usize),
        outputs: Vec<f64>,
        inputs: Vec<f64>,
        offsets: Vec<usize>,
        targets: Vec<u32>,
    ) -> TransitionSystem {
        debug_assert_eq!(offsets.len(), num_states * num_labels + 1);
        TransitionSystem { num_states, num_labels, dim, input_dim, outputs, inputs, offsets, targets }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_transitions(&self) -> usize {
        self.targets.len()
    }

    pub fn output(&self, q: usize) -> &[f64] {
        &self.outputs[q * self.dim..(q + 1) * self.dim]
    }

    pub fn label(&self, l: usize) -> &[f64] {
        &self.inputs[l * self.input_dim..(l + 1) * self.input_dim]
    }

    /// Successors of `q` under `l`, sorted ascending.
    pub fn successors(&self, q: usize, l: usize) -> &[u32] {
        let k = q * self.num_labels() + l;
        &self.targets[self.offsets[k]..self.offsets[k + 1]]
    }

    /// Labels with at least one transition out of `q`.
    pub fn enabled_labels(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        let nl = self.num_labels();
        (0..nl).filter(move |&l| {
            let k = q * nl + l;
            self.offsets[k + 1] > self.offsets[k]
        })
    }

    /// All `(q, l, p)` triples, ordered by `q`, then `l`, then `p`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let nl = self.num_labels().max(1);
        (0..self.offsets.len() - 1).flat_map(move |k| {
            let (q, l) = (k / nl, k % nl);
            self.targets[self.offsets[k]..self.offsets[k + 1]].iter().map(move |&p| (q, l, p as usize))
        })
    }

    /// Label-erased successor sets.
    pub fn post_sets(&self) -> Vec<Vec<u32>> {
        let nl = self.num_labels();
        (0..self.num_states())
            .map(|q| {
                let lo = self.offsets[q * nl];
                let hi = self.offsets[(q + 1) * nl];
                let mut v = self.targets[lo..hi].to_vec();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect()
    }

    /// Index of the state whose output is closest to `x`; ties go to the
    /// smaller index.
    pub fn nearest_state(&self, x: &[f64]) -> Option<usize> {
        (0..self.num_states())
            .map(|q| (q, dist(self.output(q), x)))
            .fold(None, |best: Option<(usize, f64)>, (q, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((q, d)),
            })
            .map(|(q, _)| q)
    }

    pub fn to_doc(&self) -> TransitionSystemDoc {
        TransitionSystemDoc {
            dim: self.dim,
            input_dim: self.input_dim,
            outputs: (0..self.num_states()).map(|q| self.output(q).to_vec()).collect(),
            labels: (0..self.num_labels()).map(|l| self.label(l).to_vec()).collect(),
            transitions: self.transitions().map(|(q, l, p)| [q, l, p]).collect(),
        }
    }

    pub fn from_doc(doc: TransitionSystemDoc) -> Result<TransitionSystem, TsError> {
        if doc.outputs.iter().any(|o| o.len() != doc.dim) {
            return Err(TsError::Invalid("output length differs from `dim`".into()));
        }
        if doc.labels.iter().any(|l| l.len() != doc.input_dim) {
            return Err(TsError::Invalid("label length differs from `input_dim`".into()));
        }
        let mut ts =
            TransitionSystem::new(doc.outputs, doc.labels, doc.transitions.into_iter().map(|[q, l, p]| (q, l, p)))?;
        ts.dim = doc.dim;
        ts.input_dim = doc.input_dim;
        Ok(ts)
    }

    pub fn to_json(&self) -> Result<String, TsError> {
        Ok(to_canonical_string(&self.to_doc(), false)?)
    }

    pub fn from_json(text: &str) -> Result<TransitionSystem, TsError> {
        TransitionSystem::from_doc(serde_json::from_str(text)?)
    }

    /// Graphviz rendering: one node per state labeled with its output, one
    /// edge per transition labeled with its input. `ordinal` is the 1-based
    /// lexicographic state number.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph symbolic_model {\n  node [shape=circle];\n");
        for q in 0..self.num_states() {
            let coords: Vec<String> = self.output(q).iter().map(|v| format!("{}", round_display(*v))).collect();
            let _ = writeln!(s, "  q{q} [label=\"({})\", ordinal={}];", coords.join(", "), q + 1);
        }
        for (q, l, p) in self.transitions() {
            let input: Vec<String> = self.label(l).iter().map(|v| format!("{}", round_display(*v))).collect();
            let _ = writeln!(s, "  q{q} -> q{p} [label=\"{}\"];", input.join(", "));
        }
        s.push_str("}\n");
        s
    }
}

// Lattice coordinates carry representation noise (0.30000000000000004);
// 12 significant digits reads cleanly and stays unambiguous for the lattices
// in use.
fn round_display(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let digits = 12 - v.abs().log10().ceil() as i32;
    let scale = 10f64.powi(digits.clamp(-300, 300));
    (v * scale).round() / scale
}

/// Serialized form of a [`TransitionSystem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSystemDoc {
    pub dim: usize,
    pub input_dim: usize,
    pub outputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub transitions: Vec<[usize; 3]>,
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Pairs `(q1, q2)` of an approximate (bi)simulation, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRelation {
    pub eps: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl ApproxRelation {
    pub fn contains(&self, q1: usize, q2: usize) -> bool {
        self.pairs.binary_search(&(q1, q2)).is_ok()
    }

    pub fn is_subset_of(&self, other: &ApproxRelation) -> bool {
        self.pairs.iter().all(|&(a, b)| other.contains(a, b))
    }

    pub fn to_json(&self) -> Result<String, TsError> {
        Ok(to_canonical_string(self, true)?)
    }
}

struct Graph {
    post: Vec<Vec<u32>>,
    pre: Vec<Vec<u32>>,
}

impl Graph {
    fn of(ts: &TransitionSystem) -> Graph {
        let post = ts.post_sets();
        let mut pre = vec![Vec::new(); post.len()];
        for (q, succ) in post.iter().enumerate() {
            for &p in succ {
                pre[p as usize].push(q as u32);
            }
        }
        Graph { post, pre }
    }
}

/// Dense pair membership table.
struct PairSet {
    n2: usize,
    bits: Vec<bool>,
}

impl PairSet {
    fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.n2 + b]
    }
}

// Condition (ii) for one pair: every move of `a` in g1 has an answer from `b`
// in g2 staying in `rel`. With `flip`, the roles are swapped (condition iii).
fn matched(g1: &Graph, g2: &Graph, rel: &PairSet, a: usize, b: usize, flip: bool) -> bool {
    g1.post[a].iter().all(|&p1| {
        g2.post[b].iter().any(
            |&p2| {
                if flip {
                    rel.get(p2 as usize, p1 as usize)
                } else {
                    rel.get(p1 as usize, p2 as usize)
                }
            },
        )
    })
}

fn greatest_fixed_point(
    t1: &TransitionSystem,
    t2: &TransitionSystem,
    eps: f64,
    both: bool,
) -> Result<ApproxRelation, TsError> {
    if t1.dim() != t2.dim() {
        return Err(TsError::DimensionMismatch(t1.dim(), t2.dim()));
    }
    let (n1, n2) = (t1.num_states(), t2.num_states());
    let g1 = Graph::of(t1);
    let g2 = Graph::of(t2);
    let mut rel = PairSet { n2, bits: vec![false; n1 * n2] };
    let mut queue = VecDeque::new();
    let mut queued = vec![false; n1 * n2];
    for a in 0..n1 {
        for b in 0..n2 {
            if dist(t1.output(a), t2.output(b)) <= eps {
                rel.bits[a * n2 + b] = true;
                queued[a * n2 + b] = true;
                queue.push_back((a, b));
            }
        }
    }
    while let Some((a, b)) = queue.pop_front() {
        queued[a * n2 + b] = false;
        if !rel.get(a, b) {
            continue;
        }
        let ok = matched(&g1, &g2, &rel, a, b, false) && (!both || matched(&g2, &g1, &rel, b, a, true));
        if ok {
            continue;
        }
        rel.bits[a * n2 + b] = false;
        // only predecessor pairs can have used (a, b) as a witness
        for &ra in &g1.pre[a] {
            for &rb in &g2.pre[b] {
                let k = ra as usize * n2 + rb as usize;
                if rel.bits[k] && !queued[k] {
                    queued[k] = true;
                    queue.push_back((ra as usize, rb as usize));
                }
            }
        }
    }
    let pairs = (0..n1).flat_map(|a| (0..n2).map(move |b| (a, b))).filter(|&(a, b)| rel.get(a, b)).collect();
    Ok(ApproxRelation { eps, pairs })
}

/// Greatest ε-approximate bisimulation relation between `t1` and `t2`
/// (possibly empty).
pub fn greatest_bisim(t1: &TransitionSystem, t2: &TransitionSystem, eps: f64) -> Result<ApproxRelation, TsError> {
    greatest_fixed_point(t1, t2, eps, true)
}

/// Greatest ε-approximate simulation of `t1` by `t2`.
pub fn greatest_sim(t1: &TransitionSystem, t2: &TransitionSystem, eps: f64) -> Result<ApproxRelation, TsError> {
    greatest_fixed_point(t1, t2, eps, false)
}

/// True iff the greatest ε-approximate bisimulation covers every state of
/// both systems.
pub fn is_bisimilar(t1: &TransitionSystem, t2: &TransitionSystem, eps: f64) -> Result<bool, TsError> {
    let rel = greatest_bisim(t1, t2, eps)?;
    let mut left = vec![false; t1.num_states()];
    let mut right = vec![false; t2.num_states()];
    for &(a, b) in &rel.pairs {
        left[a] = true;
        right[b] = true;
    }
    Ok(left.into_iter().all(|x| x) && right.into_iter().all(|x| x))
}

/// Re-scans `rel` against the relation conditions. Returns the first pair
/// violating them, if any.
pub fn find_violation(
    t1: &TransitionSystem,
    t2: &TransitionSystem,
    rel: &ApproxRelation,
    bisimulation: bool,
) -> Option<(usize, usize)> {
    let (n1, n2) = (t1.num_states(), t2.num_states());
    let mut set = PairSet { n2, bits: vec![false; n1 * n2] };
    for &(a, b) in &rel.pairs {
        set.bits[a * n2 + b] = true;
    }
    let g1 = Graph::of(t1);
    let g2 = Graph::of(t2);
    rel.pairs.iter().copied().find(|&(a, b)| {
        dist(t1.output(a), t2.output(b)) > rel.eps
            || !matched(&g1, &g2, &set, a, b, false)
            || (bisimulation && !matched(&g2, &g1, &set, b, a, true))
    })
}
