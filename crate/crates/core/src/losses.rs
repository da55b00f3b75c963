//! Multi-granular adaptation losses: the class-level RKHS discrepancy between
//! prototype sets, the sample-level symmetric-KL discrepancy between score
//! distributions, the plain MMD baseline, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proto::{PrototypeSet, ScoreDistribution};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Probability floor/ceiling applied before the KL logs.
pub const KL_CLAMP: f64 = 1e-8;

/// Kernel choice for RKHS distances. The median policy resolves a bandwidth
/// per call from the vectors it is evaluated over; see [`KernelSpec::resolve`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Linear,
    RbfFixed { sigma_sq: f64 },
    #[default]
    RbfMedian,
}


/// A kernel with its bandwidth pinned, ready for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedKernel {
    Linear,
    Rbf { sigma_sq: f64 },
}

impl KernelSpec {
    /// Pins the bandwidth. For the median policy, `sigma_sq` becomes the
    /// median of squared pairwise distances among `vectors` (upper median:
    /// the element at index `len/2` of the ascending sort). Degenerate inputs
    /// (fewer than two vectors, or a zero median) fall back to 1.0.
    ///
    /// Gradients downstream treat the resolved bandwidth as a per-call
    /// constant.
    pub fn resolve(&self, vectors: &[&[f64]]) -> Result<ResolvedKernel> {
        match *self {
            KernelSpec::Linear => Ok(ResolvedKernel::Linear),
            KernelSpec::RbfFixed { sigma_sq } => {
                if sigma_sq <= 0.0 {
                    return Err(Error::domain(
                        "kernel",
                        format!("sigma_sq {} must be positive", sigma_sq),
                    ));
                }
                Ok(ResolvedKernel::Rbf { sigma_sq })
            }
            KernelSpec::RbfMedian => {
                let sigma_sq = match median_sq_bandwidth(vectors) {
                    Some(v) if v > 1e-12 => v,
                    _ => 1.0,
                };
                Ok(ResolvedKernel::Rbf { sigma_sq })
            }
        }
    }
}

/// Median of squared pairwise Euclidean distances (upper median), or `None`
/// when fewer than two vectors are given.
pub fn median_sq_bandwidth(vectors: &[&[f64]]) -> Option<f64> {
    if vectors.len() < 2 {
        return None;
    }
    let mut dists = Vec::with_capacity(vectors.len() * (vectors.len() - 1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            dists.push(sq_euclidean(vectors[i], vectors[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Some(dists[dists.len() / 2])
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

fn rbf_sigma_sq(kernel: &ResolvedKernel) -> Result<Option<f64>> {
    match *kernel {
        ResolvedKernel::Linear => Ok(None),
        ResolvedKernel::Rbf { sigma_sq } => {
            if sigma_sq <= 0.0 {
                Err(Error::domain(
                    "rkhs_sq_distance",
                    format!("sigma_sq {} must be positive", sigma_sq),
                ))
            } else {
                Ok(Some(sigma_sq))
            }
        }
    }
}

/// Squared RKHS distance `k(a,a) + k(b,b) − 2k(a,b)`: the plain squared
/// Euclidean distance under the linear kernel, `2(1 − exp(−‖a−b‖²/(2σ²)))`
/// under the Gaussian kernel.
pub fn rkhs_sq_distance(a: &[f64], b: &[f64], kernel: &ResolvedKernel) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "rkhs_sq_distance",
            format!("{} vs {} dims", a.len(), b.len()),
        ));
    }
    let d = sq_euclidean(a, b);
    match rbf_sigma_sq(kernel)? {
        None => Ok(d),
        Some(sigma_sq) => Ok(2.0 * (1.0 - (-d / (2.0 * sigma_sq)).exp())),
    }
}

/// The three pairwise terms of a multi-set discrepancy, each already averaged.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairTerms {
    /// source vs target
    pub st: f64,
    /// source vs combined
    pub s_st: f64,
    /// target vs combined
    pub t_st: f64,
}

impl PairTerms {
    pub fn sum(&self) -> f64 {
        self.st + self.s_st + self.t_st
    }
}

/// Class-level discrepancy over three prototype sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLevelLoss {
    pub total: f64,
    pub pairs: PairTerms,
    /// Classes valid in all three sets and therefore averaged over.
    pub classes_used: usize,
    /// Classes missing from at least one set and skipped.
    pub classes_skipped: usize,
}

impl ClassLevelLoss {
    /// True when no class was valid in all three sets; the loss is then a
    /// signal-free zero rather than an error.
    pub fn skipped_all(&self) -> bool {
        self.classes_used == 0
    }
}

fn joint_valid(s: &PrototypeSet, t: &PrototypeSet, st: &PrototypeSet) -> Vec<bool> {
    (0..s.classes())
        .map(|c| s.valid[c] && t.valid[c] && st.valid[c])
        .collect()
}

fn collect_valid_rows(sets: [&PrototypeSet; 3]) -> Vec<&[f64]> {
    let mut rows = Vec::new();
    for set in sets {
        for c in 0..set.classes() {
            if set.valid[c] {
                rows.push(set.centroids.row(c));
            }
        }
    }
    rows
}

/// Mean pairwise RKHS distance between the source, target, and combined
/// prototypes of each class. Classes invalid in any set are skipped and each
/// pair sum is renormalized by the jointly-valid count. A bandwidth under the
/// median policy is resolved from all valid prototype rows of the three sets.
pub fn class_level_loss(
    proto_s: &PrototypeSet,
    proto_t: &PrototypeSet,
    proto_st: &PrototypeSet,
    kernel: &KernelSpec,
) -> Result<ClassLevelLoss> {
    let c = proto_s.classes();
    if proto_t.classes() != c || proto_st.classes() != c || proto_t.dim() != proto_s.dim()
        || proto_st.dim() != proto_s.dim()
    {
        return Err(Error::shape(
            "class_level_loss",
            format!(
                "prototype sets disagree: {:?} / {:?} / {:?}",
                proto_s.centroids.shape(),
                proto_t.centroids.shape(),
                proto_st.centroids.shape()
            ),
        ));
    }
    let valid = joint_valid(proto_s, proto_t, proto_st);
    let used = valid.iter().filter(|&&v| v).count();
    if used == 0 {
        return Ok(ClassLevelLoss {
            total: 0.0,
            pairs: PairTerms::default(),
            classes_used: 0,
            classes_skipped: c,
        });
    }
    let resolved = kernel.resolve(&collect_valid_rows([proto_s, proto_t, proto_st]))?;
    let mut pairs = PairTerms::default();
    for (cls, &ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let (ms, mt, mst) = (
            proto_s.centroids.row(cls),
            proto_t.centroids.row(cls),
            proto_st.centroids.row(cls),
        );
        pairs.st += rkhs_sq_distance(ms, mt, &resolved)?;
        pairs.s_st += rkhs_sq_distance(ms, mst, &resolved)?;
        pairs.t_st += rkhs_sq_distance(mt, mst, &resolved)?;
    }
    pairs.st /= used as f64;
    pairs.s_st /= used as f64;
    pairs.t_st /= used as f64;
    Ok(ClassLevelLoss {
        total: pairs.sum(),
        pairs,
        classes_used: used,
        classes_skipped: c - used,
    })
}

/// Empirical maximum mean discrepancy between two embedding sets: the squared
/// RKHS distance between the domain mean embeddings. Under the linear kernel
/// this is `‖mean_s − mean_t‖²`; under a Gaussian kernel it expands to
/// `k̄_ss + k̄_tt − 2·k̄_st` over pairwise kernel evaluations. The median
/// bandwidth policy resolves over the pooled rows of both sets.
pub fn mmd(source: &Tensor, target: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    if source.rank() != 2 || target.rank() != 2 || source.cols() != target.cols() {
        return Err(Error::shape(
            "mmd",
            format!("{:?} vs {:?}", source.shape(), target.shape()),
        ));
    }
    let (ns, nt) = (source.rows(), target.rows());
    if ns == 0 || nt == 0 {
        return Err(Error::domain("mmd", "empty sample set"));
    }
    let pooled: Vec<&[f64]> = (0..ns)
        .map(|i| source.row(i))
        .chain((0..nt).map(|i| target.row(i)))
        .collect();
    let resolved = kernel.resolve(&pooled)?;
    match resolved {
        ResolvedKernel::Linear => {
            let m = source.cols();
            let mut mean_s = vec![0.0; m];
            let mut mean_t = vec![0.0; m];
            for i in 0..ns {
                for (d, v) in source.row(i).iter().enumerate() {
                    mean_s[d] += v;
                }
            }
            for i in 0..nt {
                for (d, v) in target.row(i).iter().enumerate() {
                    mean_t[d] += v;
                }
            }
            for v in &mut mean_s {
                *v /= ns as f64;
            }
            for v in &mut mean_t {
                *v /= nt as f64;
            }
            Ok(sq_euclidean(&mean_s, &mean_t))
        }
        ResolvedKernel::Rbf { sigma_sq } => {
            let k = |a: &[f64], b: &[f64]| (-sq_euclidean(a, b) / (2.0 * sigma_sq)).exp();
            let mut k_ss = 0.0;
            for i in 0..ns {
                for j in 0..ns {
                    k_ss += k(source.row(i), source.row(j));
                }
            }
            let mut k_tt = 0.0;
            for i in 0..nt {
                for j in 0..nt {
                    k_tt += k(target.row(i), target.row(j));
                }
            }
            let mut k_st = 0.0;
            for i in 0..ns {
                for j in 0..nt {
                    k_st += k(source.row(i), target.row(j));
                }
            }
            Ok(k_ss / (ns * ns) as f64 + k_tt / (nt * nt) as f64
                - 2.0 * k_st / (ns * nt) as f64)
        }
    }
}

/// Clamps a distribution into `[KL_CLAMP, 1]` and renormalizes it to sum one.
pub fn clamp_and_renormalize(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|v| v.clamp(KL_CLAMP, 1.0)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / s).collect()
}

/// Symmetric KL divergence `½(d_KL(p‖q) + d_KL(q‖p))` after clamping and
/// renormalizing both distributions, so degenerate inputs stay finite.
///
/// Each term `(p−q)·ln(p/q)` is evaluated from the ordered pair
/// `(min, max)`, which makes the result bitwise identical under argument
/// swap and non-negative by construction.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "symmetric_kl",
            format!("{} vs {} classes", p.len(), q.len()),
        ));
    }
    let p = clamp_and_renormalize(p);
    let q = clamp_and_renormalize(q);
    let mut acc = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let (lo, hi) = if pi < qi { (*pi, *qi) } else { (*qi, *pi) };
        if lo != hi {
            acc += (hi - lo) * (hi / lo).ln();
        }
    }
    Ok(0.5 * acc)
}

/// Sample-level discrepancy over three score matrices for the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLevelLoss {
    pub total: f64,
    pub pairs: PairTerms,
    pub samples: usize,
}

/// Mean over samples of the three pairwise symmetric KL divergences between
/// the score rows produced by the source, target, and combined classifiers.
pub fn sample_level_loss(
    scores_s: &ScoreDistribution,
    scores_t: &ScoreDistribution,
    scores_st: &ScoreDistribution,
) -> Result<SampleLevelLoss> {
    let n = scores_s.samples();
    if scores_t.samples() != n || scores_st.samples() != n {
        return Err(Error::shape(
            "sample_level_loss",
            format!(
                "sample counts disagree: {} / {} / {}",
                n,
                scores_t.samples(),
                scores_st.samples()
            ),
        ));
    }
    if scores_t.classes() != scores_s.classes() || scores_st.classes() != scores_s.classes() {
        return Err(Error::shape(
            "sample_level_loss",
            "class counts disagree".to_string(),
        ));
    }
    if n == 0 {
        return Err(Error::domain("sample_level_loss", "empty sample set"));
    }
    let mut pairs = PairTerms::default();
    for i in 0..n {
        let (ps, pt, pst) = (
            scores_s.probabilities().row(i),
            scores_t.probabilities().row(i),
            scores_st.probabilities().row(i),
        );
        pairs.st += symmetric_kl(ps, pt)?;
        pairs.s_st += symmetric_kl(ps, pst)?;
        pairs.t_st += symmetric_kl(pt, pst)?;
    }
    pairs.st /= n as f64;
    pairs.s_st /= n as f64;
    pairs.t_st /= n as f64;
    Ok(SampleLevelLoss {
        total: pairs.sum(),
        pairs,
        samples: n,
    })
}

/// The combined objective and its pieces, as logged per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_g: f64,
    pub l_t: f64,
    pub total: f64,
    pub l_g_pairs: PairTerms,
    pub l_t_pairs: PairTerms,
    pub classes_skipped: usize,
}

/// `total = L_S + α·L_G + β·L_T`; any non-finite component aborts with the
/// component's name.
pub fn total_objective(
    l_s: f64,
    l_g: f64,
    l_t: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [("L_S", l_s), ("L_G", l_g), ("L_T", l_t)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("objective component {}", name),
            });
        }
    }
    Ok(LossBreakdown {
        l_s,
        l_g,
        l_t,
        total: l_s + alpha * l_g + beta * l_t,
        l_g_pairs: PairTerms::default(),
        l_t_pairs: PairTerms::default(),
        classes_skipped: 0,
    })
}

// ── tape builders ──────────────────────────────────────────────────────────

/// Row-wise squared RKHS distance between two `[C × m]` nodes → `[C × 1]`.
fn rowwise_rkhs_on_tape(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    kernel: &ResolvedKernel,
) -> Result<NodeId> {
    let (c, m) = {
        let t = tape.value(a);
        (t.rows(), t.cols())
    };
    let neg_b = tape.negate(b);
    let diff = tape.add(a, neg_b)?;
    let sq = tape.square(diff);
    let ones = tape.leaf(Tensor::matrix(m, 1, vec![1.0; m])?);
    let row_sums = tape.matmul(sq, ones)?; // [C×1] of ‖a_c − b_c‖²
    match rbf_sigma_sq(kernel)? {
        None => Ok(row_sums),
        Some(sigma_sq) => {
            let scaled = tape.scale(row_sums, -1.0 / (2.0 * sigma_sq));
            let e = tape.exp(scaled);
            let neg_e = tape.negate(e);
            let one = tape.leaf(Tensor::matrix(c, 1, vec![1.0; c])?);
            let gap = tape.add(one, neg_e)?;
            Ok(tape.scale(gap, 2.0))
        }
    }
}

/// Node handles for the class-level loss and its pair terms.
pub struct ClassLevelNodes {
    pub total: NodeId,
    pub st: NodeId,
    pub s_st: NodeId,
    pub t_st: NodeId,
}

/// Class-level discrepancy on the tape over `[C × m]` prototype nodes;
/// `jointly_valid` marks the classes to average over (at least one required).
pub fn class_level_loss_on_tape(
    tape: &mut Tape,
    proto_s: NodeId,
    proto_t: NodeId,
    proto_st: NodeId,
    jointly_valid: &[bool],
    kernel: &ResolvedKernel,
) -> Result<ClassLevelNodes> {
    let c = tape.value(proto_s).rows();
    if jointly_valid.len() != c {
        return Err(Error::shape(
            "class_level_loss",
            format!("{} validity flags for {} classes", jointly_valid.len(), c),
        ));
    }
    let used = jointly_valid.iter().filter(|&&v| v).count();
    if used == 0 {
        return Err(Error::domain(
            "class_level_loss",
            "no jointly-valid class on tape",
        ));
    }
    let mask_t = Tensor::matrix(
        c,
        1,
        jointly_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let pair = |ta: &mut Tape, a: NodeId, b: NodeId| -> Result<NodeId> {
        let rows = rowwise_rkhs_on_tape(ta, a, b, kernel)?;
        let mask = ta.leaf(mask_t.clone());
        let masked = ta.mul(rows, mask)?;
        let sum = ta.reduce_sum(masked);
        Ok(ta.scale(sum, 1.0 / used as f64))
    };
    let st = pair(tape, proto_s, proto_t)?;
    let s_st = pair(tape, proto_s, proto_st)?;
    let t_st = pair(tape, proto_t, proto_st)?;
    let partial = tape.add(st, s_st)?;
    let total = tape.add(partial, t_st)?;
    Ok(ClassLevelNodes {
        total,
        st,
        s_st,
        t_st,
    })
}

/// Clamps a `[n × C]` score node into `[KL_CLAMP, 1]` and renormalizes each
/// row on the tape.
pub fn normalize_scores_on_tape(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    let c = tape.value(scores).cols();
    let clamped = tape.clamp(scores, KL_CLAMP, 1.0);
    let ones_col = tape.leaf(Tensor::matrix(c, 1, vec![1.0; c])?);
    let row_sums = tape.matmul(clamped, ones_col)?; // [n×1], strictly positive
    let log_sums = tape.log(row_sums)?;
    let neg_log = tape.negate(log_sums);
    let recip = tape.exp(neg_log); // 1 / row_sum
    let ones_row = tape.leaf(Tensor::matrix(1, c, vec![1.0; c])?);
    let spread = tape.matmul(recip, ones_row)?; // [n×C]
    tape.mul(clamped, spread)
}

/// Sum over all rows of the symmetric KL between two already-normalized score
/// nodes: `½ Σ (p − q)(log p − log q)`.
fn kl_pair_sum_on_tape(tape: &mut Tape, p: NodeId, q: NodeId) -> Result<NodeId> {
    let neg_q = tape.negate(q);
    let diff = tape.add(p, neg_q)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let neg_log_q = tape.negate(log_q);
    let log_diff = tape.add(log_p, neg_log_q)?;
    let prod = tape.mul(diff, log_diff)?;
    let sum = tape.reduce_sum(prod);
    Ok(tape.scale(sum, 0.5))
}

/// Node handles for the sample-level loss and its pair terms.
pub struct SampleLevelNodes {
    pub total: NodeId,
    pub st: NodeId,
    pub s_st: NodeId,
    pub t_st: NodeId,
}

/// Sample-level discrepancy on the tape. `parts` lists score-node triples
/// `(vs source protos, vs target protos, vs combined protos)` for disjoint
/// slices of the episode (for instance the source batch and the assigned
/// target batch); the KL sums are additive over samples, so the parts are
/// summed and divided by `total_samples` once.
pub fn sample_level_loss_on_tape(
    tape: &mut Tape,
    parts: &[(NodeId, NodeId, NodeId)],
    total_samples: usize,
) -> Result<SampleLevelNodes> {
    if parts.is_empty() || total_samples == 0 {
        return Err(Error::domain("sample_level_loss", "empty sample set"));
    }
    let normalized: Vec<(NodeId, NodeId, NodeId)> = parts
        .iter()
        .map(|&(s, t, st)| -> Result<_> {
            Ok((
                normalize_scores_on_tape(tape, s)?,
                normalize_scores_on_tape(tape, t)?,
                normalize_scores_on_tape(tape, st)?,
            ))
        })
        .collect::<Result<_>>()?;

    let pair = |ta: &mut Tape, pick: fn(&(NodeId, NodeId, NodeId)) -> (NodeId, NodeId)| -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for triple in &normalized {
            let (p, q) = pick(triple);
            let s = kl_pair_sum_on_tape(ta, p, q)?;
            acc = Some(match acc {
                None => s,
                Some(prev) => ta.add(prev, s)?,
            });
        }
        Ok(ta.scale(acc.expect("at least one part"), 1.0 / total_samples as f64))
    };
    let st = pair(tape, |t| (t.0, t.1))?;
    let s_st = pair(tape, |t| (t.0, t.2))?;
    let t_st = pair(tape, |t| (t.1, t.2))?;
    let partial = tape.add(st, s_st)?;
    let total = tape.add(partial, t_st)?;
    Ok(SampleLevelNodes {
        total,
        st,
        s_st,
        t_st,
    })
}

/// Empirical MMD on the tape between two `[n × m]` embedding nodes.
pub fn mmd_on_tape(
    tape: &mut Tape,
    source: NodeId,
    target: NodeId,
    kernel: &ResolvedKernel,
) -> Result<NodeId> {
    let ns = tape.value(source).rows();
    let nt = tape.value(target).rows();
    if ns == 0 || nt == 0 {
        return Err(Error::domain("mmd", "empty sample set"));
    }
    match rbf_sigma_sq(kernel)? {
        None => {
            let ws = tape.leaf(Tensor::matrix(1, ns, vec![1.0 / ns as f64; ns])?);
            let wt = tape.leaf(Tensor::matrix(1, nt, vec![1.0 / nt as f64; nt])?);
            let mean_s = tape.matmul(ws, source)?;
            let mean_t = tape.matmul(wt, target)?;
            let d = tape.sq_dist(mean_s, mean_t)?; // [1×1]
            Ok(tape.reduce_sum(d))
        }
        Some(sigma_sq) => {
            let mean_kernel = |ta: &mut Tape, a: NodeId, b: NodeId| -> Result<NodeId> {
                let d = ta.sq_dist(a, b)?;
                let scaled = ta.scale(d, -1.0 / (2.0 * sigma_sq));
                let k = ta.exp(scaled);
                ta.reduce_mean(k)
            };
            let k_ss = mean_kernel(tape, source, source)?;
            let k_tt = mean_kernel(tape, target, target)?;
            let k_st = mean_kernel(tape, source, target)?;
            let sum = tape.add(k_ss, k_tt)?;
            let neg = tape.scale(k_st, -2.0);
            tape.add(sum, neg)
        }
    }
}
