//! Utterance-level permutation-invariant cross entropy.
//!
//! For `S` output heads and `S` target label streams the loss is
//!
//! ```text
//! J = min over bijections σ of  Σ_s Σ_t CE(ℓ^{σ(s)}_t, O^s_t)  / (S·T)
//! ```
//!
//! The CE of every (head, target) pair is summed over the whole utterance
//! before the minimum is taken, so one assignment holds for all frames.
//! Gradients flow only through the winning assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PosteriorStreams;
use crate::tensorcore::{softmax_ce_rows, Graph, Matrix, NodeId};

/// Largest stream count accepted by the brute-force permutation search.
pub const MAX_STREAMS: usize = 8;

/// Frame-level senone ids of one source stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub senones: Vec<u32>,
    pub stream_tag: usize,
}

impl LabelSequence {
    pub fn new(senones: Vec<u32>, stream_tag: usize) -> Self {
        LabelSequence {
            senones,
            stream_tag,
        }
    }

    pub fn len(&self) -> usize {
        self.senones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senones.is_empty()
    }
}

/// `costs[s][u] = Σ_t −log O^s[t, ℓ^u_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CePairMatrix {
    pub costs: Matrix,
    pub frame_count: usize,
}

impl CePairMatrix {
    pub fn num_streams(&self) -> usize {
        self.costs.rows()
    }

    pub fn assignment_cost(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .fold(0.0, |acc, (s, &u)| acc + self.costs.get(s, u))
    }
}

/// `perm[s]` is the target stream assigned to output head `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub assignment: Assignment,
    pub per_pair: CePairMatrix,
}

/// Lexicographic permutations of `0..n`, starting from the identity.
#[derive(Clone, Debug)]
pub struct Permutations {
    next: Option<Vec<usize>>,
}

impl Permutations {
    pub fn new(n: usize) -> Self {
        Permutations {
            next: Some((0..n).collect()),
        }
    }
}

impl Iterator for Permutations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut p = current.clone();
        // Standard next-permutation step.
        if let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) {
            let pivot = i - 1;
            let j = (i..p.len()).rev().find(|&j| p[j] > p[pivot]).unwrap();
            p.swap(pivot, j);
            p[i..].reverse();
            self.next = Some(p);
        }
        Some(current)
    }
}

fn check_targets(streams: usize, frames: usize, targets: &[LabelSequence]) -> Result<()> {
    if streams == 0 {
        return Err(Error::validation("no output streams"));
    }
    if targets.len() != streams {
        return Err(Error::validation(format!(
            "{} target streams for {streams} output heads",
            targets.len()
        )));
    }
    for (u, target) in targets.iter().enumerate() {
        if target.len() != frames {
            return Err(Error::validation(format!(
                "target {u} has {} frames, posteriors have {frames}",
                target.len()
            )));
        }
    }
    Ok(())
}

pub fn pairwise_ce_matrix(
    posteriors: &PosteriorStreams,
    targets: &[LabelSequence],
) -> Result<CePairMatrix> {
    let streams = posteriors.num_streams();
    let frames = posteriors.num_frames();
    check_targets(streams, frames, targets)?;
    let mut costs = Matrix::zeros(streams, streams);
    for (s, logits) in posteriors.logits.iter().enumerate() {
        for (u, target) in targets.iter().enumerate() {
            let (ce, _) = softmax_ce_rows(logits, &target.senones)?;
            costs.set(s, u, ce.iter().sum());
        }
    }
    Ok(CePairMatrix {
        costs,
        frame_count: frames,
    })
}

/// Exhaustive search over all `S!` assignments; ties go to the
/// lexicographically smallest permutation.
pub fn best_assignment(costs: &CePairMatrix) -> Result<Assignment> {
    let n = costs.num_streams();
    if n == 0 {
        return Err(Error::validation("empty cost matrix"));
    }
    if n > MAX_STREAMS {
        return Err(Error::Unsupported(format!(
            "{n} streams exceeds the brute-force limit of {MAX_STREAMS}"
        )));
    }
    let mut best: Option<Assignment> = None;
    for perm in Permutations::new(n) {
        let cost = costs.assignment_cost(&perm);
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(Assignment { perm, cost });
        }
    }
    Ok(best.expect("at least one permutation"))
}

fn finish(per_pair: CePairMatrix) -> Result<LossResult> {
    let assignment = best_assignment(&per_pair)?;
    let scale = (per_pair.num_streams() * per_pair.frame_count) as f64;
    let value = assignment.cost / scale;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("PIT loss is {value}")));
    }
    Ok(LossResult {
        value,
        assignment,
        per_pair,
    })
}

/// Loss value only; no graph is built.
pub fn pit_loss(posteriors: &PosteriorStreams, targets: &[LabelSequence]) -> Result<LossResult> {
    finish(pairwise_ce_matrix(posteriors, targets)?)
}

/// Records the PIT loss in `graph` on top of per-head logit nodes.
///
/// Builds exactly `S²` fused softmax-CE nodes. The returned root depends only
/// on the winning pairs, so `backward` delivers `(softmax − onehot)/(S·T)`
/// to the winning pairing and nothing from the others.
pub fn pit_loss_graph(
    graph: &mut Graph,
    logits: &[NodeId],
    targets: &[LabelSequence],
) -> Result<(NodeId, LossResult)> {
    let streams = logits.len();
    let frames = logits.first().map_or(0, |&id| graph.value(id).rows());
    check_targets(streams, frames, targets)?;
    let mut sums = Vec::with_capacity(streams * streams);
    let mut costs = Matrix::zeros(streams, streams);
    for (s, &head) in logits.iter().enumerate() {
        for (u, target) in targets.iter().enumerate() {
            let ce = graph.softmax_cross_entropy(head, &target.senones)?;
            let total = graph.sum(ce);
            costs.set(s, u, graph.value(total).get(0, 0));
            sums.push(total);
        }
    }
    let result = finish(CePairMatrix {
        costs,
        frame_count: frames,
    })?;
    let mut root = None;
    for (s, &u) in result.assignment.perm.iter().enumerate() {
        let term = sums[s * streams + u];
        root = Some(match root {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let root = graph.scale(root.unwrap(), 1.0 / (streams * frames) as f64);
    Ok((root, result))
}

#[cfg(test)]
mod tests;
