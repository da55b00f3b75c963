//! The alternating training procedure: pseudo-label a fresh target batch with
//! source prototypes, then take one gradient step on the combined objective.
//! Also hosts episode sampling, pretraining, the frozen full-dataset
//! prototypes used at inference, and the training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::losses::{
    self, class_level_loss_on_tape, mmd_on_tape, sample_level_loss_on_tape, KernelSpec,
    LossBreakdown, PairTerms,
};
use crate::net::{self, NetworkConfig, Parameters};
use crate::proto::{
    classify, classify_on_tape, combined_prototypes_on_tape, compute_prototypes, noise_ratio,
    prototypes_on_tape, pseudo_label, supervised_loss_on_tape, target_prototypes_with_fallback,
    DomainTag, LabeledSet, PrototypeSet, PseudoLabels, ScoreDistribution,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Row chunk used for no-grad full-dataset embedding passes.
const EVAL_CHUNK: usize = 256;

// The source-episode and target-resampling streams are decoupled so that a
// run which never draws target batches still sees the same source episodes.
const SRC_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const TGT_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// The full objective: supervised + class-level + sample-level terms.
    Tpn,
    /// Replace both adaptation terms with plain MMD over batch embeddings.
    MmdBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Pseudo-label confidence threshold; the comparison is strict (`>`).
    pub threshold: f64,
    pub pretrain_iters: usize,
    pub max_iters: usize,
    /// Source samples per class per episode (class-balanced batches).
    pub source_per_class: usize,
    /// Target samples drawn fresh each iteration.
    pub target_batch: usize,
    pub optimizer: AdamHyper,
    pub kernel: KernelSpec,
    pub seed: u64,
    pub eval_every: usize,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            threshold: 0.6,
            pretrain_iters: 500,
            max_iters: 3000,
            source_per_class: 8,
            target_batch: 64,
            optimizer: AdamHyper::default(),
            kernel: KernelSpec::default(),
            seed: 0,
            eval_every: 100,
            loss_mode: LossMode::Tpn,
        }
    }
}

impl TrainConfig {
    /// Defaults for the reduced-scale digit transfer: the digit optimizer
    /// settings and a 60+60 batch (class-balanced source half).
    pub fn digits() -> Self {
        TrainConfig {
            source_per_class: 6,
            target_batch: 60,
            optimizer: AdamHyper::digits(),
            eval_every: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{} = {} must be finite and >= 0", name, v)));
            }
        }
        if self.source_per_class == 0 || self.target_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".to_string()));
        }
        Ok(())
    }
}

/// One training batch: class-balanced labeled source rows plus a fresh
/// unlabeled target draw.
#[derive(Debug, Clone)]
pub struct Episode {
    pub source_inputs: Tensor,
    pub source_labels: Vec<usize>,
    pub target_inputs: Tensor,
}

/// Draws class-balanced source episodes and resampled target batches from
/// two independent seeded streams.
pub struct EpisodeSampler {
    class_pools: Vec<Vec<usize>>,
    n_target: usize,
    per_class: usize,
    target_batch: usize,
    src_rng: ChaCha8Rng,
    tgt_rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(
        source_labels: &[usize],
        classes: usize,
        per_class: usize,
        target_batch: usize,
        n_target: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut class_pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &c) in source_labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::shape(
                    "episode_sampler",
                    format!("label {} out of range for {} classes", c, classes),
                ));
            }
            class_pools[c].push(i);
        }
        if let Some(empty) = class_pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "source data has no sample of class {}",
                empty
            )));
        }
        if n_target == 0 {
            return Err(Error::Config("target dataset is empty".to_string()));
        }
        Ok(EpisodeSampler {
            class_pools,
            n_target,
            per_class,
            target_batch,
            src_rng: ChaCha8Rng::seed_from_u64(seed ^ SRC_STREAM),
            tgt_rng: ChaCha8Rng::seed_from_u64(seed ^ TGT_STREAM),
        })
    }

    /// Next class-balanced source episode: `per_class` indices of every class
    /// in class-major order, with the matching labels.
    pub fn next_source(&mut self) -> (Vec<usize>, Vec<usize>) {
        let k = self.per_class;
        let mut indices = Vec::with_capacity(self.class_pools.len() * k);
        let mut labels = Vec::with_capacity(self.class_pools.len() * k);
        for (c, pool) in self.class_pools.iter().enumerate() {
            if pool.len() >= k {
                let picks = rand::seq::index::sample(&mut self.src_rng, pool.len(), k);
                for p in picks.iter() {
                    indices.push(pool[p]);
                }
            } else {
                // tiny class: sample with replacement to keep the balance
                for _ in 0..k {
                    let p = rand::Rng::random_range(&mut self.src_rng, 0..pool.len());
                    indices.push(pool[p]);
                }
            }
            labels.extend(std::iter::repeat_n(c, k));
        }
        (indices, labels)
    }

    /// Next resampled target batch (all indices when the dataset is smaller
    /// than the batch size).
    pub fn next_target(&mut self) -> Vec<usize> {
        if self.n_target <= self.target_batch {
            return (0..self.n_target).collect();
        }
        rand::seq::index::sample(&mut self.tgt_rng, self.n_target, self.target_batch).into_vec()
    }
}

/// What one training step produced.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub breakdown: LossBreakdown,
    /// Target samples in the episode that received a pseudo-label.
    pub assigned: usize,
    pub rejected: usize,
    /// True when no target sample cleared the threshold and the adaptation
    /// terms were skipped for the step.
    pub adaptation_skipped: bool,
}

/// Fraction of predictions agreeing with the reference labels.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// One gradient step on the supervised loss alone (plain prototypical step).
fn source_only_step(
    params: &mut Parameters,
    opt: &mut AdamState,
    inputs: &Tensor,
    labels: &[usize],
    classes: usize,
    hyper: &AdamHyper,
) -> Result<f64> {
    let net_cfg = params.config().clone();
    let mut tape = Tape::new();
    let nodes = params.register_on_tape(&mut tape)?;
    let x = tape.leaf(inputs.clone());
    let emb = net::embed_on_tape(&mut tape, &net_cfg, &nodes, x)?;
    let (protos, _) = prototypes_on_tape(&mut tape, emb, labels, classes)?;
    let scores = classify_on_tape(&mut tape, emb, protos)?;
    let loss = supervised_loss_on_tape(&mut tape, scores, labels)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    adam_step(params, &grads, opt, hyper)?;
    Ok(value)
}

/// Step 2 of the procedure: the full objective over already-embedded source
/// and assigned-target nodes, one backward pass, one optimizer step.
#[allow(clippy::too_many_arguments)]
fn adaptation_step(
    params: &mut Parameters,
    opt: &mut AdamState,
    mut tape: Tape,
    emb_s: crate::tape::NodeId,
    emb_t: crate::tape::NodeId,
    source_labels: &[usize],
    pseudo_classes: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (proto_s, _) = prototypes_on_tape(&mut tape, emb_s, source_labels, classes)?;
    let (proto_t, t_has_members) =
        target_prototypes_with_fallback(&mut tape, emb_t, pseudo_classes, classes, proto_s)?;
    let (proto_st, _) = combined_prototypes_on_tape(
        &mut tape,
        emb_s,
        source_labels,
        emb_t,
        pseudo_classes,
        classes,
    )?;

    // Bandwidth resolution sees the batch prototypes: all source and combined
    // rows, plus the target rows that have real members.
    let resolved = {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(3 * classes);
        for c in 0..classes {
            rows.push(tape.value(proto_s).row(c).to_vec());
        }
        for (c, &has) in t_has_members.iter().enumerate() {
            if has {
                rows.push(tape.value(proto_t).row(c).to_vec());
            }
        }
        for c in 0..classes {
            rows.push(tape.value(proto_st).row(c).to_vec());
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        cfg.kernel.resolve(&refs)?
    };

    let lg = class_level_loss_on_tape(
        &mut tape,
        proto_s,
        proto_t,
        proto_st,
        &t_has_members,
        &resolved,
    )?;

    let scores_s_src = classify_on_tape(&mut tape, emb_s, proto_s)?;
    let scores_t_src = classify_on_tape(&mut tape, emb_s, proto_t)?;
    let scores_st_src = classify_on_tape(&mut tape, emb_s, proto_st)?;
    let scores_s_tgt = classify_on_tape(&mut tape, emb_t, proto_s)?;
    let scores_t_tgt = classify_on_tape(&mut tape, emb_t, proto_t)?;
    let scores_st_tgt = classify_on_tape(&mut tape, emb_t, proto_st)?;
    let n_total = source_labels.len() + pseudo_classes.len();
    let lt = sample_level_loss_on_tape(
        &mut tape,
        &[
            (scores_s_src, scores_t_src, scores_st_src),
            (scores_s_tgt, scores_t_tgt, scores_st_tgt),
        ],
        n_total,
    )?;

    let l_s = supervised_loss_on_tape(&mut tape, scores_s_src, source_labels)?;
    let lg_scaled = tape.scale(lg.total, cfg.alpha);
    let lt_scaled = tape.scale(lt.total, cfg.beta);
    let partial = tape.add(l_s, lg_scaled)?;
    let total = tape.add(partial, lt_scaled)?;

    let mut breakdown = losses::total_objective(
        tape.value(l_s).item(),
        tape.value(lg.total).item(),
        tape.value(lt.total).item(),
        cfg.alpha,
        cfg.beta,
    )?;
    breakdown.l_g_pairs = PairTerms {
        st: tape.value(lg.st).item(),
        s_st: tape.value(lg.s_st).item(),
        t_st: tape.value(lg.t_st).item(),
    };
    breakdown.l_t_pairs = PairTerms {
        st: tape.value(lt.st).item(),
        s_st: tape.value(lt.s_st).item(),
        t_st: tape.value(lt.t_st).item(),
    };
    breakdown.classes_skipped = t_has_members.iter().filter(|&&h| !h).count();

    let grads = tape.backward(total)?;
    adam_step(params, &grads, opt, &cfg.optimizer)?;
    Ok(breakdown)
}

/// One gradient step on `L_S + α·MMD` over the raw batch embeddings.
fn mmd_baseline_step(
    params: &mut Parameters,
    opt: &mut AdamState,
    episode: &Episode,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let net_cfg = params.config().clone();
    let mut tape = Tape::new();
    let nodes = params.register_on_tape(&mut tape)?;
    let xs = tape.leaf(episode.source_inputs.clone());
    let emb_s = net::embed_on_tape(&mut tape, &net_cfg, &nodes, xs)?;
    let xt = tape.leaf(episode.target_inputs.clone());
    let emb_t = net::embed_on_tape(&mut tape, &net_cfg, &nodes, xt)?;

    let (proto_s, _) = prototypes_on_tape(&mut tape, emb_s, &episode.source_labels, classes)?;
    let scores = classify_on_tape(&mut tape, emb_s, proto_s)?;
    let l_s = supervised_loss_on_tape(&mut tape, scores, &episode.source_labels)?;

    let resolved = {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let es = tape.value(emb_s);
        for i in 0..es.rows() {
            rows.push(es.row(i).to_vec());
        }
        let et = tape.value(emb_t);
        for i in 0..et.rows() {
            rows.push(et.row(i).to_vec());
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        cfg.kernel.resolve(&refs)?
    };
    let m = mmd_on_tape(&mut tape, emb_s, emb_t, &resolved)?;
    let scaled = tape.scale(m, cfg.alpha);
    let total = tape.add(l_s, scaled)?;

    let breakdown = losses::total_objective(
        tape.value(l_s).item(),
        tape.value(m).item(),
        0.0,
        cfg.alpha,
        cfg.beta,
    )?;
    let grads = tape.backward(total)?;
    adam_step(params, &grads, opt, &cfg.optimizer)?;
    Ok(breakdown)
}

/// Runs the two-step procedure on one episode: pseudo-label the target batch
/// with the episode's source prototypes, then take one gradient step on the
/// objective. Falls back to the supervised loss alone when no target sample
/// clears the threshold or when both tradeoffs are zero.
pub fn train_step(
    params: &mut Parameters,
    opt: &mut AdamState,
    episode: &Episode,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if cfg.loss_mode == LossMode::MmdBaseline {
        let breakdown = mmd_baseline_step(params, opt, episode, classes, cfg)?;
        return Ok(StepMetrics {
            breakdown,
            assigned: 0,
            rejected: 0,
            adaptation_skipped: false,
        });
    }

    let pure_source = cfg.alpha == 0.0 && cfg.beta == 0.0;
    if pure_source {
        // Labeling cannot influence a supervised-only update; run it off-tape
        // for the metrics and keep the update identical to a plain
        // prototypical step.
        let emb_s = net::embed(params, &episode.source_inputs)?;
        let source_set =
            LabeledSet::new(emb_s, episode.source_labels.clone(), DomainTag::Source)?;
        let proto_s = compute_prototypes(&source_set, classes)?;
        let emb_t = net::embed(params, &episode.target_inputs)?;
        let pseudo = pseudo_label(&classify(&emb_t, &proto_s)?, cfg.threshold)?;
        let l_s = source_only_step(
            params,
            opt,
            &episode.source_inputs,
            &episode.source_labels,
            classes,
            &cfg.optimizer,
        )?;
        return Ok(StepMetrics {
            breakdown: losses::total_objective(l_s, 0.0, 0.0, cfg.alpha, cfg.beta)?,
            assigned: pseudo.assignments.len(),
            rejected: pseudo.rejected.len(),
            adaptation_skipped: false,
        });
    }

    // Step 1: embed both batches once, on the tape step 2 will differentiate,
    // and label the target batch from the recorded values.
    let net_cfg = params.config().clone();
    let mut tape = Tape::new();
    let nodes = params.register_on_tape(&mut tape)?;
    let xs = tape.leaf(episode.source_inputs.clone());
    let emb_s = net::embed_on_tape(&mut tape, &net_cfg, &nodes, xs)?;
    let xt = tape.leaf(episode.target_inputs.clone());
    let emb_t_full = net::embed_on_tape(&mut tape, &net_cfg, &nodes, xt)?;

    let source_set = LabeledSet::new(
        tape.value(emb_s).clone(),
        episode.source_labels.clone(),
        DomainTag::Source,
    )?;
    let proto_s = compute_prototypes(&source_set, classes)?;
    let target_scores = classify(tape.value(emb_t_full), &proto_s)?;
    let pseudo = pseudo_label(&target_scores, cfg.threshold)?;
    let assigned = pseudo.assignments.len();
    let rejected = pseudo.rejected.len();

    // Step 2: one gradient step.
    let breakdown = if assigned == 0 {
        drop(tape);
        let l_s = source_only_step(
            params,
            opt,
            &episode.source_inputs,
            &episode.source_labels,
            classes,
            &cfg.optimizer,
        )?;
        losses::total_objective(l_s, 0.0, 0.0, cfg.alpha, cfg.beta)?
    } else {
        let emb_t = tape.gather_rows(emb_t_full, &pseudo.assigned_indices())?;
        adaptation_step(
            params,
            opt,
            tape,
            emb_s,
            emb_t,
            &episode.source_labels,
            &pseudo.assigned_classes(),
            classes,
            cfg,
        )?
    };

    Ok(StepMetrics {
        breakdown,
        assigned,
        rejected,
        adaptation_skipped: assigned == 0,
    })
}

/// Optimizes the supervised loss alone over class-balanced source episodes.
/// Returns the per-iteration loss trace.
pub fn pretrain(
    params: &mut Parameters,
    opt: &mut AdamState,
    sampler: &mut EpisodeSampler,
    source_inputs: &Tensor,
    classes: usize,
    iters: usize,
    hyper: &AdamHyper,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(iters);
    for i in 0..iters {
        let (idx, labels) = sampler.next_source();
        let batch = source_inputs.select_rows(&idx)?;
        let loss = source_only_step(params, opt, &batch, &labels, classes, hyper).map_err(|e| {
            match e {
                Error::NonFinite { what } => Error::NonFinite {
                    what: format!("{} (pretrain diverged; last finite iteration {})", what, i),
                },
                other => other,
            }
        })?;
        trace.push(loss);
    }
    Ok(trace)
}

/// The three full-dataset prototype sets computed once after training, with
/// every class valid: target classes with no accepted pseudo-labels reuse the
/// source centroid, recorded in `t_substituted`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPrototypes {
    pub s: PrototypeSet,
    pub t: PrototypeSet,
    pub st: PrototypeSet,
    pub t_substituted: Vec<bool>,
}

/// Which frozen prototype set classifies at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtoChoice {
    S,
    T,
    St,
}

impl std::str::FromStr for ProtoChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(ProtoChoice::S),
            "t" => Ok(ProtoChoice::T),
            "st" => Ok(ProtoChoice::St),
            other => Err(Error::Config(format!(
                "unknown prototype set {:?} (expected s, t, or st)",
                other
            ))),
        }
    }
}

/// Computes the frozen sets over the whole training data with a final
/// pseudo-labeling pass; also returns that pass for diagnostics.
pub fn freeze_prototypes(
    params: &Parameters,
    source_inputs: &Tensor,
    source_labels: &[usize],
    target_inputs: &Tensor,
    classes: usize,
    threshold: f64,
) -> Result<(FrozenPrototypes, PseudoLabels)> {
    let emb_s = net::embed_all(params, source_inputs, EVAL_CHUNK)?;
    let source_set = LabeledSet::new(emb_s.clone(), source_labels.to_vec(), DomainTag::Source)?;
    let proto_s = compute_prototypes(&source_set, classes)?;
    if !proto_s.all_valid() {
        return Err(Error::Config(
            "source data does not cover every class".to_string(),
        ));
    }

    let emb_t = net::embed_all(params, target_inputs, EVAL_CHUNK)?;
    let scores = classify(&emb_t, &proto_s)?;
    let pseudo = pseudo_label(&scores, threshold)?;
    let assigned_rows = pseudo.assigned_indices();
    let assigned_classes = pseudo.assigned_classes();

    let target_set = LabeledSet::new(
        emb_t.select_rows(&assigned_rows)?,
        assigned_classes.clone(),
        DomainTag::TargetPseudo,
    )?;
    let mut proto_t = compute_prototypes(&target_set, classes)?;
    let mut substituted = vec![false; classes];
    for c in 0..classes {
        if !proto_t.valid[c] {
            substituted[c] = true;
            let src_row = proto_s.centroids.row(c).to_vec();
            let m = proto_t.dim();
            let mut data = proto_t.centroids.data().to_vec();
            data[c * m..(c + 1) * m].copy_from_slice(&src_row);
            proto_t.centroids = Tensor::matrix(classes, m, data)?;
            proto_t.valid[c] = true;
        }
    }

    // Combined set: all source rows plus the assigned target rows.
    let mut combined_rows = Vec::with_capacity(emb_s.rows() + assigned_rows.len());
    let mut combined_labels = Vec::with_capacity(emb_s.rows() + assigned_rows.len());
    for (i, &label) in source_labels.iter().enumerate() {
        combined_rows.push(emb_s.row(i).to_vec());
        combined_labels.push(label);
    }
    for (k, &row) in assigned_rows.iter().enumerate() {
        combined_rows.push(emb_t.row(row).to_vec());
        combined_labels.push(assigned_classes[k]);
    }
    let combined_set = LabeledSet::new(
        Tensor::from_rows(&combined_rows)?,
        combined_labels,
        DomainTag::Combined,
    )?;
    let proto_st = compute_prototypes(&combined_set, classes)?;

    Ok((
        FrozenPrototypes {
            s: proto_s,
            t: proto_t,
            st: proto_st,
            t_substituted: substituted,
        },
        pseudo,
    ))
}

/// Scores inputs against one frozen prototype set and returns the score
/// distribution with hard argmax labels.
pub fn predict(
    params: &Parameters,
    frozen: &FrozenPrototypes,
    inputs: &Tensor,
    which: ProtoChoice,
) -> Result<(ScoreDistribution, Vec<usize>)> {
    let protos = match which {
        ProtoChoice::S => &frozen.s,
        ProtoChoice::T => &frozen.t,
        ProtoChoice::St => &frozen.st,
    };
    let emb = net::embed_all(params, inputs, EVAL_CHUNK)?;
    let scores = classify(&emb, protos)?;
    let labels = scores.argmax();
    Ok((scores, labels))
}

/// One evaluation record; oracle-dependent fields are `None` without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub l_s: f64,
    pub l_g: f64,
    pub l_t: f64,
    pub total: f64,
    pub src_acc: f64,
    pub tgt_acc: Option<f64>,
    pub rho: Option<f64>,
    pub assigned_frac: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,L_S,L_G,L_T,total,src_acc,tgt_acc,rho,assigned_frac\n");
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.l_s,
                r.l_g,
                r.l_t,
                r.total,
                r.src_acc,
                opt(r.tgt_acc),
                opt(r.rho),
                r.assigned_frac
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Everything `fit` produces: trained parameters, the evaluation log, and the
/// frozen prototype sets for inference.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Parameters,
    pub log: TrainLog,
    pub frozen: FrozenPrototypes,
}

fn eval_stats(
    params: &Parameters,
    source_inputs: &Tensor,
    source_labels: &[usize],
    target_inputs: &Tensor,
    target_oracle: Option<&[usize]>,
    classes: usize,
    threshold: f64,
) -> Result<(f64, Option<f64>, Option<f64>, f64)> {
    let (frozen, pseudo) = freeze_prototypes(
        params,
        source_inputs,
        source_labels,
        target_inputs,
        classes,
        threshold,
    )?;
    let (_, src_pred) = predict(params, &frozen, source_inputs, ProtoChoice::St)?;
    let src_acc = accuracy(&src_pred, source_labels);
    let (tgt_acc, rho) = match target_oracle {
        Some(oracle) => {
            let (_, tgt_pred) = predict(params, &frozen, target_inputs, ProtoChoice::St)?;
            (
                Some(accuracy(&tgt_pred, oracle)),
                noise_ratio(&pseudo.assignments, oracle),
            )
        }
        None => (None, None),
    };
    let assigned_frac = pseudo.assignments.len() as f64 / target_inputs.rows() as f64;
    Ok((src_acc, tgt_acc, rho, assigned_frac))
}

/// Pretrains on source episodes, alternates the two-step procedure for
/// `max_iters` iterations, then freezes the three full-dataset prototype
/// sets with the final parameters. Oracle target labels feed diagnostics
/// only (`tgt_acc`, `rho`); the optimization path never sees them.
pub fn fit(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    source_inputs: &Tensor,
    source_labels: &[usize],
    target_inputs: &Tensor,
    classes: usize,
    target_oracle: Option<&[usize]>,
) -> Result<FitResult> {
    cfg.validate()?;
    if source_inputs.rank() != 2 || target_inputs.rank() != 2 {
        return Err(Error::shape("fit", "inputs must be [n × d] matrices".to_string()));
    }
    if source_inputs.rows() == 0 || target_inputs.rows() == 0 {
        return Err(Error::Config("datasets must be non-empty".to_string()));
    }
    if source_inputs.cols() != net_cfg.input_dim || target_inputs.cols() != net_cfg.input_dim {
        return Err(Error::shape(
            "fit",
            format!(
                "network expects input_dim {}, got source {} / target {}",
                net_cfg.input_dim,
                source_inputs.cols(),
                target_inputs.cols()
            ),
        ));
    }
    if let Some(oracle) = target_oracle {
        if oracle.len() != target_inputs.rows() {
            return Err(Error::shape(
                "fit",
                format!(
                    "{} oracle labels for {} target rows",
                    oracle.len(),
                    target_inputs.rows()
                ),
            ));
        }
        if let Some(&bad) = oracle.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(
                "fit",
                format!("oracle label {} out of range for {} classes", bad, classes),
            ));
        }
    }

    let mut params = net::init(net_cfg)?;
    let mut opt = AdamState::new();
    let mut sampler = EpisodeSampler::new(
        source_labels,
        classes,
        cfg.source_per_class,
        cfg.target_batch,
        target_inputs.rows(),
        cfg.seed,
    )?;

    pretrain(
        &mut params,
        &mut opt,
        &mut sampler,
        source_inputs,
        classes,
        cfg.pretrain_iters,
        &cfg.optimizer,
    )?;

    let mut log = TrainLog::default();
    for iter in 1..=cfg.max_iters {
        let (src_idx, src_labels) = sampler.next_source();
        let tgt_idx = sampler.next_target();
        let episode = Episode {
            source_inputs: source_inputs.select_rows(&src_idx)?,
            source_labels: src_labels,
            target_inputs: target_inputs.select_rows(&tgt_idx)?,
        };
        let metrics = train_step(&mut params, &mut opt, &episode, classes, cfg).map_err(|e| {
            match e {
                Error::NonFinite { what } => Error::NonFinite {
                    what: format!("{} at iteration {}", what, iter),
                },
                other => other,
            }
        })?;

        if iter == 1 || iter % cfg.eval_every == 0 || iter == cfg.max_iters {
            let (src_acc, tgt_acc, rho, assigned_frac) = eval_stats(
                &params,
                source_inputs,
                source_labels,
                target_inputs,
                target_oracle,
                classes,
                cfg.threshold,
            )?;
            log.records.push(TrainRecord {
                iteration: iter,
                l_s: metrics.breakdown.l_s,
                l_g: metrics.breakdown.l_g,
                l_t: metrics.breakdown.l_t,
                total: metrics.breakdown.total,
                src_acc,
                tgt_acc,
                rho,
                assigned_frac,
            });
        }
    }

    let (frozen, _) = freeze_prototypes(
        &params,
        source_inputs,
        source_labels,
        target_inputs,
        classes,
        cfg.threshold,
    )?;
    Ok(FitResult {
        params,
        log,
        frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_shifted_blobs;

    fn toy_net(seed: u64) -> NetworkConfig {
        NetworkConfig::mlp(2, vec![16, 16], 2, seed)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_iters: 40,
            max_iters: 30,
            source_per_class: 4,
            target_batch: 16,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    /// Class-balanced row picks from a class-major dataset layout.
    fn balanced_rows(per_class_in_data: usize, classes: usize, k: usize) -> Vec<usize> {
        (0..classes)
            .flat_map(|c| (0..k).map(move |i| c * per_class_in_data + i))
            .collect()
    }

    #[test]
    fn sampler_is_class_balanced_and_deterministic() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut a = EpisodeSampler::new(&labels, 3, 4, 8, 50, 7).unwrap();
        let mut b = EpisodeSampler::new(&labels, 3, 4, 8, 50, 7).unwrap();
        for _ in 0..5 {
            let (ia, la) = a.next_source();
            let (ib, lb) = b.next_source();
            assert_eq!(ia, ib);
            assert_eq!(la, lb);
            for c in 0..3 {
                assert_eq!(la.iter().filter(|&&l| l == c).count(), 4);
            }
            assert_eq!(a.next_target(), b.next_target());
        }
    }

    #[test]
    fn target_batches_are_resampled_each_iteration() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let mut s = EpisodeSampler::new(&labels, 2, 4, 16, 400, 3).unwrap();
        let first = s.next_target();
        let second = s.next_target();
        assert_ne!(first, second);
    }

    #[test]
    fn sampler_rejects_missing_classes() {
        let labels = vec![0, 0, 2, 2]; // class 1 absent
        assert!(EpisodeSampler::new(&labels, 3, 2, 4, 10, 0).is_err());
    }

    #[test]
    fn pretrain_zero_iterations_leaves_parameters_unchanged() {
        let pair = gen_shifted_blobs(3, 20, 0.0, [0.0, 0.0], 0.4, 1).unwrap();
        let net_cfg = toy_net(5);
        let mut params = net::init(&net_cfg).unwrap();
        let before = params.clone();
        let mut opt = AdamState::new();
        let mut sampler = EpisodeSampler::new(&pair.source_labels, 3, 4, 8, 60, 0).unwrap();
        let trace = pretrain(
            &mut params,
            &mut opt,
            &mut sampler,
            &pair.source_inputs,
            3,
            0,
            &AdamHyper::default(),
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn pretrain_separates_easy_blobs() {
        // Well-separated blobs: after a few hundred supervised iterations the
        // frozen source classifier should be near-perfect on source data.
        let pair = gen_shifted_blobs(2, 60, 0.0, [0.0, 0.0], 0.25, 2).unwrap();
        let net_cfg = toy_net(9);
        let mut params = net::init(&net_cfg).unwrap();
        let mut opt = AdamState::new();
        let mut sampler = EpisodeSampler::new(&pair.source_labels, 2, 8, 8, 120, 4).unwrap();
        let trace = pretrain(
            &mut params,
            &mut opt,
            &mut sampler,
            &pair.source_inputs,
            2,
            500,
            &AdamHyper::default(),
        )
        .unwrap();

        assert!(trace.iter().all(|l| l.is_finite()));
        let head: f64 = trace[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = trace[trace.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(tail <= head, "loss moving average rose: {} -> {}", head, tail);

        let (frozen, _) = freeze_prototypes(
            &params,
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            2,
            0.6,
        )
        .unwrap();
        let (_, pred) = predict(&params, &frozen, &pair.source_inputs, ProtoChoice::S).unwrap();
        let acc = accuracy(&pred, &pair.source_labels);
        assert!(acc >= 0.99, "source accuracy {}", acc);
    }

    #[test]
    fn train_step_skips_adaptation_when_nothing_clears_the_threshold() {
        let pair = gen_shifted_blobs(3, 20, 0.0, [0.0, 0.0], 0.4, 3).unwrap();
        let net_cfg = toy_net(1);
        let mut params = net::init(&net_cfg).unwrap();
        let mut opt = AdamState::new();
        let rows = balanced_rows(20, 3, 4);
        let episode = Episode {
            source_inputs: pair.source_inputs.select_rows(&rows).unwrap(),
            source_labels: rows.iter().map(|&i| pair.source_labels[i]).collect(),
            target_inputs: pair.target_inputs.select_rows(&[0, 1, 2, 3]).unwrap(),
        };
        let cfg = TrainConfig {
            // an untrained net cannot produce scores this confident
            threshold: 0.999_999,
            ..quick_cfg()
        };
        let metrics = train_step(&mut params, &mut opt, &episode, 3, &cfg).unwrap();
        assert!(metrics.adaptation_skipped);
        assert_eq!(metrics.assigned, 0);
        assert_eq!(metrics.breakdown.l_g, 0.0);
        assert_eq!(metrics.breakdown.l_t, 0.0);
        assert!(metrics.breakdown.l_s > 0.0);
    }

    #[test]
    fn zero_tradeoffs_reduce_to_the_plain_prototypical_step() {
        // One TPN step with α=β=0 must update parameters bit-for-bit like a
        // hand-built supervised prototypical step on the same batch.
        let pair = gen_shifted_blobs(3, 20, 30.0, [1.0, 0.0], 0.5, 4).unwrap();
        let net_cfg = toy_net(2);
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..quick_cfg()
        };
        let rows = balanced_rows(20, 3, 4);
        let episode = Episode {
            source_inputs: pair.source_inputs.select_rows(&rows).unwrap(),
            source_labels: rows.iter().map(|&i| pair.source_labels[i]).collect(),
            target_inputs: pair.target_inputs.select_rows(&[5, 6, 7]).unwrap(),
        };

        let mut params_a = net::init(&net_cfg).unwrap();
        let mut opt_a = AdamState::new();
        train_step(&mut params_a, &mut opt_a, &episode, 3, &cfg).unwrap();

        let mut params_b = net::init(&net_cfg).unwrap();
        let mut opt_b = AdamState::new();
        {
            let mut tape = Tape::new();
            let nodes = params_b.register_on_tape(&mut tape).unwrap();
            let x = tape.leaf(episode.source_inputs.clone());
            let emb = net::embed_on_tape(&mut tape, &net_cfg, &nodes, x).unwrap();
            let (protos, _) =
                prototypes_on_tape(&mut tape, emb, &episode.source_labels, 3).unwrap();
            let scores = classify_on_tape(&mut tape, emb, protos).unwrap();
            let loss = supervised_loss_on_tape(&mut tape, scores, &episode.source_labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            adam_step(&mut params_b, &grads, &mut opt_b, &cfg.optimizer).unwrap();
        }

        for ((na, ta), (nb, tb)) in params_a.iter().zip(params_b.iter()) {
            assert_eq!(na, nb);
            assert!(
                ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {} diverged",
                na
            );
        }
    }

    #[test]
    fn breakdown_total_matches_weighted_sum_on_every_record() {
        let pair = gen_shifted_blobs(3, 30, 25.0, [0.6, 0.0], 0.45, 6).unwrap();
        let cfg = TrainConfig {
            threshold: 0.5,
            ..quick_cfg()
        };
        let res = fit(
            &toy_net(3),
            &cfg,
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            3,
            pair.target_oracle_labels.as_deref(),
        )
        .unwrap();
        assert!(!res.log.records.is_empty());
        let mut last = 0;
        for r in &res.log.records {
            assert!(r.iteration > last, "iterations must strictly increase");
            last = r.iteration;
            let want = r.l_s + cfg.alpha * r.l_g + cfg.beta * r.l_t;
            assert!((r.total - want).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_is_deterministic_under_seed() {
        let pair = gen_shifted_blobs(3, 25, 20.0, [0.5, 0.2], 0.5, 8).unwrap();
        let run = || {
            fit(
                &toy_net(4),
                &quick_cfg(),
                &pair.source_inputs,
                &pair.source_labels,
                &pair.target_inputs,
                3,
                pair.target_oracle_labels.as_deref(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        for ((_, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn frozen_prototypes_are_valid_and_reproduce_the_member_means() {
        let pair = gen_shifted_blobs(4, 20, 30.0, [1.0, 0.0], 0.5, 5).unwrap();
        let res = fit(
            &toy_net(6),
            &quick_cfg(),
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            4,
            None,
        )
        .unwrap();
        let frozen = &res.frozen;
        assert!(frozen.s.all_valid());
        assert!(frozen.t.all_valid());
        assert!(frozen.st.all_valid());

        // source centroids must match a fresh prototype computation exactly
        let emb_s = net::embed_all(&res.params, &pair.source_inputs, 256).unwrap();
        let check = compute_prototypes(
            &LabeledSet::new(emb_s, pair.source_labels.clone(), DomainTag::Source).unwrap(),
            4,
        )
        .unwrap();
        for c in 0..4 {
            for d in 0..2 {
                let got = frozen.s.centroids.row(c)[d];
                let want = check.centroids.row(c)[d];
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn predict_wins_for_an_input_at_the_frozen_prototype() {
        // Identity embedding puts the prototypes in input space, so probing
        // exactly at a centroid must return its class from every set.
        let net_cfg = NetworkConfig::mlp(2, vec![], 2, 0);
        let mut params = net::init(&net_cfg).unwrap();
        params.insert(
            "fc0.weight",
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let centroids = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 1.5], vec![0.0, -2.0]])
            .unwrap();
        let mk = |domain| crate::proto::PrototypeSet {
            centroids: centroids.clone(),
            valid: vec![true; 3],
            domain,
        };
        let frozen = FrozenPrototypes {
            s: mk(DomainTag::Source),
            t: mk(DomainTag::TargetPseudo),
            st: mk(DomainTag::Combined),
            t_substituted: vec![false; 3],
        };
        for which in [ProtoChoice::S, ProtoChoice::T, ProtoChoice::St] {
            let (_, labels) = predict(&params, &frozen, &centroids, which).unwrap();
            assert_eq!(labels, vec![0, 1, 2]);
        }
    }

    #[test]
    fn mmd_baseline_mode_trains_on_supervised_plus_mmd() {
        let pair = gen_shifted_blobs(3, 30, 20.0, [0.7, 0.0], 0.5, 14).unwrap();
        let cfg = TrainConfig {
            loss_mode: LossMode::MmdBaseline,
            pretrain_iters: 20,
            max_iters: 40,
            source_per_class: 4,
            target_batch: 16,
            eval_every: 20,
            ..TrainConfig::default()
        };
        let res = fit(
            &toy_net(15),
            &cfg,
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            3,
            pair.target_oracle_labels.as_deref(),
        )
        .unwrap();
        for r in &res.log.records {
            // the MMD value rides in the L_G slot; no sample-level term exists
            assert_eq!(r.l_t, 0.0);
            assert!(r.l_g >= 0.0);
            assert!((r.total - (r.l_s + cfg.alpha * r.l_g)).abs() < 1e-9);
        }
        assert!(res.log.records.last().unwrap().src_acc > 0.9);
    }

    #[test]
    fn predict_recovers_the_class_at_a_frozen_prototype() {
        let pair = gen_shifted_blobs(3, 20, 10.0, [0.3, 0.0], 0.4, 12).unwrap();
        let res = fit(
            &toy_net(8),
            &quick_cfg(),
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            3,
            None,
        )
        .unwrap();
        // feed a source input whose embedding lands on its class prototype:
        // use the class mean of the raw source inputs per class as the probe
        // and check prediction matches the dominant class there.
        let (_, pred) = predict(&res.params, &res.frozen, &pair.source_inputs, ProtoChoice::St)
            .unwrap();
        let acc = accuracy(&pred, &pair.source_labels);
        assert!(acc > 0.9, "converged source accuracy {}", acc);
    }

    #[test]
    fn raising_the_threshold_never_grows_the_first_assignment_set() {
        let pair = gen_shifted_blobs(4, 30, 30.0, [1.0, 0.0], 0.5, 10).unwrap();
        let net_cfg = toy_net(10);
        // identical pretraining for every threshold
        let prepare = || {
            let mut params = net::init(&net_cfg).unwrap();
            let mut opt = AdamState::new();
            let mut sampler =
                EpisodeSampler::new(&pair.source_labels, 4, 8, 32, pair.target_inputs.rows(), 17)
                    .unwrap();
            pretrain(
                &mut params,
                &mut opt,
                &mut sampler,
                &pair.source_inputs,
                4,
                100,
                &AdamHyper::default(),
            )
            .unwrap();
            let (src_idx, src_labels) = sampler.next_source();
            let tgt_idx = sampler.next_target();
            (
                params,
                pair.source_inputs.select_rows(&src_idx).unwrap(),
                src_labels,
                pair.target_inputs.select_rows(&tgt_idx).unwrap(),
            )
        };
        let (params, src, src_labels, tgt) = prepare();
        let emb_s = net::embed(&params, &src).unwrap();
        let protos = compute_prototypes(
            &LabeledSet::new(emb_s, src_labels, DomainTag::Source).unwrap(),
            4,
        )
        .unwrap();
        let scores = classify(&net::embed(&params, &tgt).unwrap(), &protos).unwrap();

        let mut previous: Option<Vec<usize>> = None;
        for threshold in [0.3, 0.5, 0.6, 0.8, 0.95] {
            let assigned = pseudo_label(&scores, threshold).unwrap().assigned_indices();
            if let Some(prev) = &previous {
                assert!(
                    assigned.iter().all(|i| prev.contains(i)),
                    "threshold {} assigned a sample the lower threshold rejected",
                    threshold
                );
                assert!(assigned.len() <= prev.len());
            }
            previous = Some(assigned);
        }
    }

    #[test]
    fn csv_log_has_the_documented_header_and_field_count() {
        let log = TrainLog {
            records: vec![TrainRecord {
                iteration: 10,
                l_s: 1.5,
                l_g: 0.25,
                l_t: 0.125,
                total: 1.875,
                src_acc: 0.75,
                tgt_acc: None,
                rho: None,
                assigned_frac: 0.5,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,L_S,L_G,L_T,total,src_acc,tgt_acc,rho,assigned_frac"
        );
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 9);
        assert_eq!(row, "10,1.5,0.25,0.125,1.875,0.75,,,0.5");
    }

    #[test]
    fn fit_rejects_mismatched_dimensions() {
        let pair = gen_shifted_blobs(2, 10, 0.0, [0.0, 0.0], 0.3, 0).unwrap();
        let bad_net = NetworkConfig::mlp(5, vec![4], 2, 0);
        assert!(fit(
            &bad_net,
            &quick_cfg(),
            &pair.source_inputs,
            &pair.source_labels,
            &pair.target_inputs,
            2,
            None,
        )
        .is_err());
    }
}
