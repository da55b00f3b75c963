//! Prototype classifiers: per-class centroids, distance-softmax scoring, the
//! supervised loss, and pseudo-labeling of unlabeled samples.
//!
//! Every function here has a plain-value form operating on [`Tensor`]s; the
//! `*_on_tape` builders construct the same computation on a [`Tape`] so that
//! gradients flow from the losses back into the embeddings.

use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Probability floor applied to the correct-class score before the log in the
/// supervised loss.
pub const SUPERVISED_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    TargetPseudo,
    Combined,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::TargetPseudo => write!(f, "target-pseudo"),
            DomainTag::Combined => write!(f, "combined"),
        }
    }
}

/// Embedded samples with class labels; `n` may be zero for any class.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub domain: DomainTag,
}

impl LabeledSet {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, domain: DomainTag) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!(
                    "{} embedding rows vs {} labels",
                    if embeddings.rank() == 2 { embeddings.rows() } else { 0 },
                    labels.len()
                ),
            ));
        }
        Ok(LabeledSet {
            embeddings,
            labels,
            domain,
        })
    }
}

/// Per-class centroids with validity flags; `valid[c]` is true exactly when
/// at least one member of class `c` contributed to the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub centroids: Tensor,
    pub valid: Vec<bool>,
    pub domain: DomainTag,
}

impl PrototypeSet {
    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Row-stochastic class scores; each row is non-negative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probabilities: Tensor,
}

impl ScoreDistribution {
    /// Wraps a `[n × C]` matrix, checking the row-stochastic invariant.
    pub fn new(probabilities: Tensor) -> Result<Self> {
        if probabilities.rank() != 2 {
            return Err(Error::shape(
                "score_distribution",
                format!("expected rank 2, got {:?}", probabilities.shape()),
            ));
        }
        for i in 0..probabilities.rows() {
            let row = probabilities.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::domain(
                    "score_distribution",
                    format!("negative probability in row {}", i),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::domain(
                    "score_distribution",
                    format!("row {} sums to {}", i, s),
                ));
            }
        }
        Ok(ScoreDistribution { probabilities })
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.probabilities
    }

    pub fn samples(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn classes(&self) -> usize {
        self.probabilities.cols()
    }

    /// Highest-scoring class per row, ties broken by the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.samples()).map(|i| argmax_row(self.probabilities.row(i)).0).collect()
    }
}

fn argmax_row(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (j, &p) in row.iter().enumerate() {
        if p > best_p {
            best = j;
            best_p = p;
        }
    }
    (best, best_p)
}

/// Mean embedding per class. Classes with no members get a zero centroid and
/// `valid = false`; absent classes are legal, not an error.
pub fn compute_prototypes(set: &LabeledSet, classes: usize) -> Result<PrototypeSet> {
    let m = set.embeddings.cols();
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape(
            "compute_prototypes",
            format!("label {} out of range for {} classes", bad, classes),
        ));
    }
    let mut sums = vec![0.0; classes * m];
    let mut counts = vec![0usize; classes];
    for (i, &c) in set.labels.iter().enumerate() {
        counts[c] += 1;
        let row = set.embeddings.row(i);
        for (d, &v) in row.iter().enumerate() {
            sums[c * m + d] += v;
        }
    }
    let mut valid = vec![false; classes];
    for c in 0..classes {
        if counts[c] > 0 {
            valid[c] = true;
            for d in 0..m {
                sums[c * m + d] /= counts[c] as f64;
            }
        }
    }
    Ok(PrototypeSet {
        centroids: Tensor::matrix(classes, m, sums)?,
        valid,
        domain: set.domain,
    })
}

/// Distance-softmax scores of each embedding against every prototype:
/// `P[i,c] = exp(−d(e_i, μ_c)) / Σ_c' exp(−d(e_i, μ_c'))` with squared
/// Euclidean `d`. Every prototype must be valid.
pub fn classify(embeddings: &Tensor, protos: &PrototypeSet) -> Result<ScoreDistribution> {
    if !protos.all_valid() {
        return Err(Error::shape(
            "classify",
            format!("invalid prototype present: {:?}", protos.valid),
        ));
    }
    if embeddings.rank() != 2 || embeddings.cols() != protos.dim() {
        return Err(Error::shape(
            "classify",
            format!(
                "embeddings {:?} vs prototypes {:?}",
                embeddings.shape(),
                protos.centroids.shape()
            ),
        ));
    }
    let (n, c) = (embeddings.rows(), protos.classes());
    let mut probs = vec![0.0; n * c];
    for i in 0..n {
        let e = embeddings.row(i);
        let row = &mut probs[i * c..(i + 1) * c];
        for (j, v) in row.iter_mut().enumerate() {
            let p = protos.centroids.row(j);
            *v = -sq_euclidean(e, p);
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    ScoreDistribution::new(Tensor::matrix(n, c, probs)?)
}

fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Mean negative log-likelihood of the correct class, with the probability
/// floored at [`SUPERVISED_CLAMP`] so underflow never produces a NaN.
pub fn supervised_loss(scores: &ScoreDistribution, labels: &[usize]) -> Result<f64> {
    if scores.samples() != labels.len() {
        return Err(Error::shape(
            "supervised_loss",
            format!("{} score rows vs {} labels", scores.samples(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::domain("supervised_loss", "empty sample set"));
    }
    let c = scores.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(
            "supervised_loss",
            format!("label {} out of range for {} classes", bad, c),
        ));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = scores.probabilities().row(i)[y].clamp(SUPERVISED_CLAMP, 1.0);
        total -= p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Pseudo-label assignments produced on unlabeled target scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    /// `(sample index, class)` for samples whose top score cleared the
    /// threshold, in sample order.
    pub assignments: Vec<(usize, usize)>,
    /// Sample indices whose top score did not clear the threshold.
    pub rejected: Vec<usize>,
}

impl PseudoLabels {
    pub fn assigned_indices(&self) -> Vec<usize> {
        self.assignments.iter().map(|&(i, _)| i).collect()
    }

    pub fn assigned_classes(&self) -> Vec<usize> {
        self.assignments.iter().map(|&(_, c)| c).collect()
    }
}

/// Assigns `argmax_c scores[i,c]` to sample `i` when the maximum is strictly
/// above `threshold`; ties break toward the lowest class index. Everything
/// else lands in the rejected set.
pub fn pseudo_label(scores: &ScoreDistribution, threshold: f64) -> Result<PseudoLabels> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::domain(
            "pseudo_label",
            format!("threshold {} outside (0, 1]", threshold),
        ));
    }
    let mut assignments = Vec::new();
    let mut rejected = Vec::new();
    for i in 0..scores.samples() {
        let (class, p) = argmax_row(scores.probabilities().row(i));
        if p > threshold {
            assignments.push((i, class));
        } else {
            rejected.push(i);
        }
    }
    Ok(PseudoLabels {
        assignments,
        rejected,
    })
}

/// Fraction of assigned pseudo-labels that disagree with the oracle labels.
/// `None` when nothing was assigned (the ratio is undefined, not zero).
pub fn noise_ratio(assignments: &[(usize, usize)], oracle: &[usize]) -> Option<f64> {
    if assignments.is_empty() {
        return None;
    }
    let wrong = assignments
        .iter()
        .filter(|&&(i, c)| oracle[i] != c)
        .count();
    Some(wrong as f64 / assignments.len() as f64)
}

/// Convex combination `γ·ε_t + (1−γ)·ε_s` of target and source errors.
pub fn weighted_error(eps_t: f64, eps_s: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(
            "weighted_error",
            format!("gamma {} outside [0, 1]", gamma),
        ));
    }
    for (name, v) in [("eps_t", eps_t), ("eps_s", eps_s)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(
                "weighted_error",
                format!("{} = {} outside [0, 1]", name, v),
            ));
        }
    }
    Ok(gamma * eps_t + (1.0 - gamma) * eps_s)
}

// ── tape builders ──────────────────────────────────────────────────────────

/// Constant `[C × n]` matrix `W` with `W[c,i] = 1/|class c|` when
/// `labels[i] == c`, so `W · E` is the per-class mean of the embedding rows.
fn class_mean_weights(labels: &[usize], classes: usize) -> (Tensor, Vec<usize>) {
    let n = labels.len();
    let mut counts = vec![0usize; classes];
    for &c in labels {
        counts[c] += 1;
    }
    let mut w = vec![0.0; classes * n];
    for (i, &c) in labels.iter().enumerate() {
        w[c * n + i] = 1.0 / counts[c] as f64;
    }
    (
        Tensor::matrix(classes, n, w).expect("shape matches"),
        counts,
    )
}

/// Per-class mean of embedding rows as a `[C × m]` node; returns the node and
/// the validity flags (classes with no members get a zero row).
pub fn prototypes_on_tape(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    classes: usize,
) -> Result<(NodeId, Vec<bool>)> {
    let n = tape.value(embeddings).rows();
    if n != labels.len() {
        return Err(Error::shape(
            "prototypes",
            format!("{} embedding rows vs {} labels", n, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape(
            "prototypes",
            format!("label {} out of range for {} classes", bad, classes),
        ));
    }
    let (weights, counts) = class_mean_weights(labels, classes);
    let w = tape.leaf(weights);
    let node = tape.matmul(w, embeddings)?;
    Ok((node, counts.iter().map(|&c| c > 0).collect()))
}

/// Target prototypes with the source fallback: classes with pseudo-labeled
/// members get their target mean; classes with none reuse the source
/// prototype row so downstream scoring still sees a full set. Returns the
/// node plus a mask of classes that had real target members.
pub fn target_prototypes_with_fallback(
    tape: &mut Tape,
    target_embeddings: NodeId,
    pseudo_labels: &[usize],
    classes: usize,
    source_protos: NodeId,
) -> Result<(NodeId, Vec<bool>)> {
    let (partial, has_members) =
        prototypes_on_tape(tape, target_embeddings, pseudo_labels, classes)?;
    if has_members.iter().all(|&v| v) {
        return Ok((partial, has_members));
    }
    // Diagonal selector adds the source row exactly where the target mean is
    // missing; missing rows of `partial` are zero by construction.
    let mut diag = vec![0.0; classes * classes];
    for (c, &has) in has_members.iter().enumerate() {
        if !has {
            diag[c * classes + c] = 1.0;
        }
    }
    let sel = tape.leaf(Tensor::matrix(classes, classes, diag)?);
    let fallback = tape.matmul(sel, source_protos)?;
    let full = tape.add(partial, fallback)?;
    Ok((full, has_members))
}

/// Combined source-target prototypes: for each class, the sum of source and
/// pseudo-labeled target embeddings divided by the joint member count.
pub fn combined_prototypes_on_tape(
    tape: &mut Tape,
    source_embeddings: NodeId,
    source_labels: &[usize],
    target_embeddings: NodeId,
    target_labels: &[usize],
    classes: usize,
) -> Result<(NodeId, Vec<bool>)> {
    let ns = tape.value(source_embeddings).rows();
    let nt = tape.value(target_embeddings).rows();
    if ns != source_labels.len() || nt != target_labels.len() {
        return Err(Error::shape(
            "combined_prototypes",
            format!(
                "{}/{} embedding rows vs {}/{} labels",
                ns,
                nt,
                source_labels.len(),
                target_labels.len()
            ),
        ));
    }
    let mut counts = vec![0usize; classes];
    for &c in source_labels.iter().chain(target_labels) {
        if c >= classes {
            return Err(Error::shape(
                "combined_prototypes",
                format!("label {} out of range for {} classes", c, classes),
            ));
        }
        counts[c] += 1;
    }
    let weight = |labels: &[usize], n: usize| {
        let mut w = vec![0.0; classes * n];
        for (i, &c) in labels.iter().enumerate() {
            w[c * n + i] = 1.0 / counts[c] as f64;
        }
        Tensor::matrix(classes, n, w).expect("shape matches")
    };
    let ws = tape.leaf(weight(source_labels, ns));
    let wt = tape.leaf(weight(target_labels, nt));
    let from_source = tape.matmul(ws, source_embeddings)?;
    let from_target = tape.matmul(wt, target_embeddings)?;
    let node = tape.add(from_source, from_target)?;
    Ok((node, counts.iter().map(|&c| c > 0).collect()))
}

/// Distance-softmax scores on the tape: `softmax(−d(e, μ))` row-wise.
pub fn classify_on_tape(tape: &mut Tape, embeddings: NodeId, protos: NodeId) -> Result<NodeId> {
    let d = tape.sq_dist(embeddings, protos)?;
    let neg = tape.negate(d);
    tape.softmax_last(neg)
}

/// Mean negative log-likelihood node over `[n × C]` scores.
pub fn supervised_loss_on_tape(
    tape: &mut Tape,
    scores: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let (n, c) = {
        let t = tape.value(scores);
        (t.rows(), t.cols())
    };
    if n != labels.len() {
        return Err(Error::shape(
            "supervised_loss",
            format!("{} score rows vs {} labels", n, labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::domain("supervised_loss", "empty sample set"));
    }
    // Pick P[i, y_i] by gathering rows of the flattened score column.
    let flat = tape.reshape(scores, vec![n * c, 1])?;
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let correct = tape.gather_rows(flat, &picks)?;
    let clamped = tape.clamp(correct, SUPERVISED_CLAMP, 1.0);
    let logs = tape.log(clamped)?;
    let mean = tape.reduce_mean(logs)?;
    Ok(tape.negate(mean))
}
