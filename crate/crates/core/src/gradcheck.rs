//! Central-difference verification of tape gradients, plus the standard
//! check suites run by tests and the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    class_level_loss_on_tape, sample_level_loss_on_tape, KernelSpec, ResolvedKernel,
};
use crate::proto::{
    classify_on_tape, combined_prototypes_on_tape, prototypes_on_tape, supervised_loss_on_tape,
    target_prototypes_with_fallback,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Name under which the checked tensor is registered on the probe tapes.
const PROBE: &str = "__gradcheck_x";

/// Compares the tape gradient of a scalar-valued function `f` against central
/// finite differences at `x`, returning the worst relative error
/// `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh tape and the node holding the current evaluation
/// point; it must return the scalar loss node. It is re-run `2·numel(x) + 1`
/// times, so keep probe tensors small.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::domain("grad_check", format!("step h = {}", h)));
    }

    let mut tape = Tape::new();
    let xnode = tape.param(PROBE, x.clone())?;
    let loss = f(&mut tape, xnode)?;
    check_finite(tape.value(loss).item())?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(PROBE)
        .expect("probe parameter is always registered")
        .data()
        .to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xnode = tape.leaf(Tensor::new(x.shape().to_vec(), data)?);
        let loss = f(&mut tape, xnode)?;
        let v = tape.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(
            "grad_check",
            format!("function value {} is not finite", v),
        ))
    }
}

/// Outcome of one suite entry: the worst relative error seen over all points.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub points: usize,
    pub max_error: f64,
}

impl SuiteResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error <= tolerance
    }
}

const STEP: f64 = 1e-5;

/// Random values in `±[0.1, 2.0]`, bounded away from the relu kink.
fn draw_signed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag: f64 = rng.random_range(0.1..2.0);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Random values in `[0.1, 2.0]` (safe for `log`).
fn draw_positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.1..2.0)).collect()
}

/// Gradient-checks every differentiable op at `points` random evaluation
/// points each (step 1e-5), returning the worst relative error per op.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    type BuildFn = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;
    // Each case draws fresh constants per point; `sum(square(op(..)))`
    // produces non-uniform upstream gradients for the op under test.
    let run = |name: &str,
               results: &mut Vec<SuiteResult>,
               rng: &mut ChaCha8Rng,
               make: &mut dyn FnMut(&mut ChaCha8Rng) -> (Tensor, BuildFn)|
     -> Result<()> {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let (x, f) = make(rng);
            let err = grad_check(|tape, x| f(tape, x), &x, STEP)?;
            worst = worst.max(err);
        }
        results.push(SuiteResult {
            name: name.to_string(),
            points,
            max_error: worst,
        });
        Ok(())
    };

    fn sum_sq(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
        let sq = tape.square(a);
        Ok(tape.reduce_sum(sq))
    }

    run("matmul (left operand)", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        let w = Tensor::matrix(3, 2, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let w = tape.leaf(w.clone());
            let y = tape.matmul(x, w)?;
            sum_sq(tape, y)
        }))
    })?;
    run("matmul (right operand)", &mut results, &mut rng, &mut |rng| {
        let a = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        let x = Tensor::matrix(3, 2, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let a = tape.leaf(a.clone());
            let y = tape.matmul(a, x)?;
            sum_sq(tape, y)
        }))
    })?;
    run("add", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        let b = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let b = tape.leaf(b.clone());
            let y = tape.add(x, b)?;
            sum_sq(tape, y)
        }))
    })?;
    run("add_bias (matrix operand)", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(3, 4, draw_signed(rng, 12)).expect("shape");
        let b = Tensor::vector(draw_signed(rng, 4));
        (x, Box::new(move |tape, x| {
            let b = tape.leaf(b.clone());
            let y = tape.add_bias(x, b)?;
            sum_sq(tape, y)
        }))
    })?;
    run("add_bias (bias operand)", &mut results, &mut rng, &mut |rng| {
        let a = Tensor::matrix(3, 4, draw_signed(rng, 12)).expect("shape");
        let x = Tensor::vector(draw_signed(rng, 4));
        (x, Box::new(move |tape, x| {
            let a = tape.leaf(a.clone());
            let y = tape.add_bias(a, x)?;
            sum_sq(tape, y)
        }))
    })?;
    run("mul", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        let b = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let b = tape.leaf(b.clone());
            let y = tape.mul(x, b)?;
            sum_sq(tape, y)
        }))
    })?;
    run("scale", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        let c: f64 = rng.random_range(-2.0..2.0);
        (x, Box::new(move |tape, x| {
            let y = tape.scale(x, c);
            sum_sq(tape, y)
        }))
    })?;
    run("negate", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.negate(x);
            let e = tape.exp(y);
            Ok(tape.reduce_sum(e))
        }))
    })?;
    run("square", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.square(x);
            let e = tape.exp(y);
            Ok(tape.reduce_sum(e))
        }))
    })?;
    run("relu", &mut results, &mut rng, &mut |rng| {
        // draw_signed keeps |x| >= 0.1, far from the kink at 0
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.relu(x);
            sum_sq(tape, y)
        }))
    })?;
    run("exp", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.exp(x);
            sum_sq(tape, y)
        }))
    })?;
    run("log", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_positive(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.log(x)?;
            sum_sq(tape, y)
        }))
    })?;
    run("clamp", &mut results, &mut rng, &mut |rng| {
        // bounds at ±2.5 leave the drawn values strictly interior
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let y = tape.clamp(x, -2.5, 2.5);
            sum_sq(tape, y)
        }))
    })?;
    run("reduce_sum", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let s = tape.reduce_sum(x);
            sum_sq(tape, s)
        }))
    })?;
    run("reduce_mean", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 3, draw_signed(rng, 6)).expect("shape");
        (x, Box::new(move |tape, x| {
            let m = tape.reduce_mean(x)?;
            sum_sq(tape, m)
        }))
    })?;
    run("squared_euclidean_distance (left)", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(3, 4, draw_signed(rng, 12)).expect("shape");
        let b = Tensor::matrix(2, 4, draw_signed(rng, 8)).expect("shape");
        (x, Box::new(move |tape, x| {
            let b = tape.leaf(b.clone());
            let d = tape.sq_dist(x, b)?;
            sum_sq(tape, d)
        }))
    })?;
    run("squared_euclidean_distance (right)", &mut results, &mut rng, &mut |rng| {
        let a = Tensor::matrix(3, 4, draw_signed(rng, 12)).expect("shape");
        let x = Tensor::matrix(2, 4, draw_signed(rng, 8)).expect("shape");
        (x, Box::new(move |tape, x| {
            let a = tape.leaf(a.clone());
            let d = tape.sq_dist(a, x)?;
            sum_sq(tape, d)
        }))
    })?;
    run("softmax_over_last_axis", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 4, draw_signed(rng, 8)).expect("shape");
        let g = Tensor::matrix(2, 4, draw_signed(rng, 8)).expect("shape");
        (x, Box::new(move |tape, x| {
            // weight the rows so the softmax Jacobian is exercised off-diagonal
            let s = tape.softmax_last(x)?;
            let g = tape.leaf(g.clone());
            let w = tape.mul(s, g)?;
            sum_sq(tape, w)
        }))
    })?;
    run("gather_rows", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(4, 3, draw_signed(rng, 12)).expect("shape");
        let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        (x, Box::new(move |tape, x| {
            let g = tape.gather_rows(x, &idx)?;
            sum_sq(tape, g)
        }))
    })?;
    run("reshape", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::matrix(2, 6, draw_signed(rng, 12)).expect("shape");
        (x, Box::new(move |tape, x| {
            let r = tape.reshape(x, vec![4, 3])?;
            let e = tape.exp(r);
            Ok(tape.reduce_sum(e))
        }))
    })?;
    run("conv2d (input)", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::new(vec![36], draw_signed(rng, 36)).expect("shape");
        let w = Tensor::new(vec![2, 1, 3, 3], draw_signed(rng, 18)).expect("shape");
        let b = Tensor::vector(draw_signed(rng, 2));
        (x, Box::new(move |tape, x| {
            let img = tape.reshape(x, vec![1, 1, 6, 6])?;
            let w = tape.leaf(w.clone());
            let b = tape.leaf(b.clone());
            let c = tape.conv2d(img, w, b)?;
            sum_sq(tape, c)
        }))
    })?;
    run("conv2d (weights)", &mut results, &mut rng, &mut |rng| {
        let img = Tensor::new(vec![1, 2, 5, 5], draw_signed(rng, 50)).expect("shape");
        let x = Tensor::new(vec![12], draw_signed(rng, 12)).expect("shape"); // [3,2,... no: 2 ch in
        let b = Tensor::vector(draw_signed(rng, 3));
        (x, Box::new(move |tape, x| {
            let w = tape.reshape(x, vec![3, 2, 1, 2])?; // 3 out, 2 in, 1×2 kernels
            let img = tape.leaf(img.clone());
            let b = tape.leaf(b.clone());
            let c = tape.conv2d(img, w, b)?;
            sum_sq(tape, c)
        }))
    })?;
    run("conv2d (bias)", &mut results, &mut rng, &mut |rng| {
        let img = Tensor::new(vec![1, 1, 4, 4], draw_signed(rng, 16)).expect("shape");
        let w = Tensor::new(vec![2, 1, 3, 3], draw_signed(rng, 18)).expect("shape");
        let x = Tensor::vector(draw_signed(rng, 2));
        (x, Box::new(move |tape, x| {
            let img = tape.leaf(img.clone());
            let w = tape.leaf(w.clone());
            let c = tape.conv2d(img, w, x)?;
            sum_sq(tape, c)
        }))
    })?;
    run("max_pool2", &mut results, &mut rng, &mut |rng| {
        let x = Tensor::new(vec![32], draw_signed(rng, 32)).expect("shape");
        (x, Box::new(move |tape, x| {
            let img = tape.reshape(x, vec![1, 2, 4, 4])?;
            let p = tape.max_pool2(img)?;
            sum_sq(tape, p)
        }))
    })?;

    Ok(results)
}

/// A random toy episode for loss-level gradient checks: class-balanced source
/// embeddings plus pseudo-labeled target embeddings, all packed into one
/// probe tensor so a single `grad_check` covers every input row.
struct ToyEpisode {
    x: Tensor,
    source_labels: Vec<usize>,
    target_labels: Vec<usize>,
}

impl ToyEpisode {
    fn draw(rng: &mut ChaCha8Rng, classes: usize, dim: usize, per_class: usize) -> Self {
        let n_source = classes * per_class;
        let n_target = classes + rng.random_range(0..classes);
        let source_labels: Vec<usize> =
            (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        // every class appears at least once so no fallback row is constant
        let mut target_labels: Vec<usize> = (0..classes).collect();
        for _ in classes..n_target {
            target_labels.push(rng.random_range(0..classes));
        }
        let x = Tensor::matrix(
            n_source + n_target,
            dim,
            draw_signed(rng, (n_source + n_target) * dim),
        )
        .expect("shape");
        ToyEpisode {
            x,
            source_labels,
            target_labels,
        }
    }
}

/// Which loss the episode check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeLoss {
    Supervised,
    ClassLevel,
    SampleLevel,
    Total,
}

fn episode_loss_node(
    tape: &mut Tape,
    x: NodeId,
    episode: &ToyEpisode,
    classes: usize,
    kernel: &ResolvedKernel,
    which: EpisodeLoss,
) -> Result<NodeId> {
    let ns = episode.source_labels.len();
    let nt = episode.target_labels.len();
    let src_rows: Vec<usize> = (0..ns).collect();
    let tgt_rows: Vec<usize> = (ns..ns + nt).collect();
    let emb_s = tape.gather_rows(x, &src_rows)?;
    let emb_t = tape.gather_rows(x, &tgt_rows)?;

    let (proto_s, _) = prototypes_on_tape(tape, emb_s, &episode.source_labels, classes)?;
    let scores_s_src = classify_on_tape(tape, emb_s, proto_s)?;
    let l_s = supervised_loss_on_tape(tape, scores_s_src, &episode.source_labels)?;
    if which == EpisodeLoss::Supervised {
        return Ok(l_s);
    }

    let (proto_t, t_has) =
        target_prototypes_with_fallback(tape, emb_t, &episode.target_labels, classes, proto_s)?;
    let (proto_st, _) = combined_prototypes_on_tape(
        tape,
        emb_s,
        &episode.source_labels,
        emb_t,
        &episode.target_labels,
        classes,
    )?;
    let lg = class_level_loss_on_tape(tape, proto_s, proto_t, proto_st, &t_has, kernel)?;
    if which == EpisodeLoss::ClassLevel {
        return Ok(lg.total);
    }

    let scores_t_src = classify_on_tape(tape, emb_s, proto_t)?;
    let scores_st_src = classify_on_tape(tape, emb_s, proto_st)?;
    let scores_s_tgt = classify_on_tape(tape, emb_t, proto_s)?;
    let scores_t_tgt = classify_on_tape(tape, emb_t, proto_t)?;
    let scores_st_tgt = classify_on_tape(tape, emb_t, proto_st)?;
    let lt = sample_level_loss_on_tape(
        tape,
        &[
            (scores_s_src, scores_t_src, scores_st_src),
            (scores_s_tgt, scores_t_tgt, scores_st_tgt),
        ],
        ns + nt,
    )?;
    if which == EpisodeLoss::SampleLevel {
        return Ok(lt.total);
    }

    let lg_scaled = tape.scale(lg.total, 1.0);
    let lt_scaled = tape.scale(lt.total, 1.0);
    let partial = tape.add(l_s, lg_scaled)?;
    tape.add(partial, lt_scaled)
}

/// Resolves the kernel against the episode's prototype rows at the
/// unperturbed point; the bandwidth then stays fixed through the check, which
/// is exactly how a training step differentiates the loss.
fn resolve_for_episode(
    episode: &ToyEpisode,
    classes: usize,
    kernel: &KernelSpec,
) -> Result<ResolvedKernel> {
    use crate::proto::{compute_prototypes, DomainTag, LabeledSet};
    let ns = episode.source_labels.len();
    let src_rows: Vec<usize> = (0..ns).collect();
    let tgt_rows: Vec<usize> = (ns..ns + episode.target_labels.len()).collect();
    let emb_s = episode.x.select_rows(&src_rows)?;
    let emb_t = episode.x.select_rows(&tgt_rows)?;
    let ps = compute_prototypes(
        &LabeledSet::new(emb_s.clone(), episode.source_labels.clone(), DomainTag::Source)?,
        classes,
    )?;
    let pt = compute_prototypes(
        &LabeledSet::new(emb_t, episode.target_labels.clone(), DomainTag::TargetPseudo)?,
        classes,
    )?;
    let mut rows: Vec<&[f64]> = Vec::new();
    for c in 0..classes {
        rows.push(ps.centroids.row(c));
        if pt.valid[c] {
            rows.push(pt.centroids.row(c));
        }
    }
    kernel.resolve(&rows)
}

/// Gradient-checks the supervised, class-level (both kernels), sample-level,
/// and combined losses over random toy episodes (3 classes, 4 dims).
pub fn episode_suite(episodes: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let dim = 4;
    let cases: [(&str, EpisodeLoss, KernelSpec); 5] = [
        ("episode L_S", EpisodeLoss::Supervised, KernelSpec::Linear),
        ("episode L_G (linear kernel)", EpisodeLoss::ClassLevel, KernelSpec::Linear),
        ("episode L_G (rbf kernel)", EpisodeLoss::ClassLevel, KernelSpec::RbfMedian),
        ("episode L_T", EpisodeLoss::SampleLevel, KernelSpec::Linear),
        ("episode total objective", EpisodeLoss::Total, KernelSpec::RbfMedian),
    ];
    let mut worst = vec![0.0_f64; cases.len()];
    for _ in 0..episodes {
        let episode = ToyEpisode::draw(&mut rng, classes, dim, 4);
        for (i, (_, which, kernel)) in cases.iter().enumerate() {
            let resolved = resolve_for_episode(&episode, classes, kernel)?;
            let err = grad_check(
                |tape, x| episode_loss_node(tape, x, &episode, classes, &resolved, *which),
                &episode.x,
                STEP,
            )?;
            worst[i] = worst[i].max(err);
        }
    }
    Ok(cases
        .iter()
        .zip(worst)
        .map(|((name, _, _), max_error)| SuiteResult {
            name: name.to_string(),
            points: episodes,
            max_error,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let err = grad_check(
            |tape, x| Ok(tape.square(x)),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "error {}", err);
    }

    #[test]
    fn rejects_non_finite_function_values() {
        // log of a negative probe point fails while evaluating f itself; a
        // function returning inf is the other path.
        let r = grad_check(
            |tape, x| {
                let e = tape.exp(x);
                let big = tape.scale(e, f64::INFINITY);
                Ok(tape.reduce_sum(big))
            },
            &Tensor::scalar(1.0),
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn composite_expression_passes() {
        // f(x) = sum(relu(x)·exp(x)) away from the relu kink.
        let x = Tensor::vector(vec![0.7, 1.3, 2.1, 0.4]);
        let err = grad_check(
            |tape, x| {
                let r = tape.relu(x);
                let e = tape.exp(x);
                let p = tape.mul(r, e)?;
                Ok(tape.reduce_sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {}", err);
    }

    #[test]
    fn every_op_passes_a_small_random_sweep() {
        // the full 100-point sweep runs in the acceptance suite; this keeps
        // a fast smoke version in the unit tests
        for r in op_suite(5, 41).unwrap() {
            assert!(r.passed(1e-4), "{}: max error {}", r.name, r.max_error);
        }
    }

    #[test]
    fn toy_episode_losses_pass_tight_checks() {
        for r in episode_suite(2, 42).unwrap() {
            assert!(
                r.max_error <= 1e-6,
                "{}: max error {}",
                r.name,
                r.max_error
            );
        }
    }
}
