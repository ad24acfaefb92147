//! RL-free teacher construction: entropy-gated, advantage-weighted
//! contrastive fine-tuning of a low-rank adapter on base-model rollouts.
//!
//! The pipeline is rollout → filter → offline training, with no further
//! generation once the training set is built:
//!
//! 1. Sample `k_rollouts` completions per problem from the *base* model and
//!    keep only problems at the edge of competence (pass rate strictly
//!    between 0 and 1), capped at `retained` problems closest to 50%.
//! 2. Give every rollout its group-normalized, clipped advantage, and mark
//!    as *decision points* the generated tokens whose recorded base entropy
//!    exceeds `tau`.
//! 3. Train only the adapter: advantage-weighted cross-entropy on decision
//!    tokens, plus `lambda` times a full-vocabulary KL anchor to the frozen
//!    base everywhere else (prompt included).
//!
//! Decision masks come from the entropies recorded at sampling time and are
//! never recomputed as the adapter drifts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::grpo::group_advantage;
use crate::infer::{self, InferModel};
use crate::model::{forward, load_model, LoraAdapter, LoraConfig, LoraTarget, Params};
use crate::optim::{clip_grad_global_norm, warmup_linear, AdamW, OptimEntry};
use crate::rng;
use crate::rollout::{
    edge_filter, group_stats, log_probs, pass_at_1, rollouts_for, Rollout, SamplerConfig,
};
use crate::scalar::Scalar;
use crate::tasks::Problem;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RmConfig {
    /// Entropy threshold (nats) above which a generated token is a decision
    /// point.
    pub tau: f64,
    /// Rollouts sampled per problem.
    pub k_rollouts: usize,
    /// Problems sampled into the candidate pool.
    pub pool: usize,
    /// Edge-of-competence problems kept for training.
    pub retained: usize,
    pub lora: LoraConfig,
    /// Weight on the KL anchor.
    pub lambda: f64,
    /// Symmetric advantage clip: advantages live in `[-adv_clip, adv_clip]`.
    pub adv_clip: f64,
    pub epochs: usize,
    /// Sequences per micro-batch (one tape).
    pub batch: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub seed: u64,
    /// Ablation: zero the contribution of negative-advantage rollouts.
    pub positive_only: bool,
    pub sampler: SamplerConfig,
    /// Validation cadence in optimizer steps.
    pub eval_every: usize,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            tau: 1.2,
            k_rollouts: 20,
            pool: 150,
            retained: 50,
            lora: LoraConfig {
                rank: 32,
                alpha: 64.0,
                targets: LoraTarget::ALL.to_vec(),
                dropout: 0.0,
            },
            lambda: 0.2,
            adv_clip: 2.5,
            epochs: 1,
            batch: 1,
            grad_accum: 8,
            warmup_steps: 50,
            grad_clip: 1.0,
            weight_decay: 0.0,
            lr: 1e-3,
            seed: 42,
            positive_only: false,
            sampler: SamplerConfig::default(),
            eval_every: 25,
        }
    }
}

impl RmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.adv_clip <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "advantage clip must be > 0, got {}",
                self.adv_clip
            )));
        }
        if self.k_rollouts < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 rollouts per problem to normalize advantages".into(),
            ));
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig("batch and grad_accum must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training sequence: a base-model rollout with its offline labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub problem_id: u64,
    /// Prompt followed by the sampled completion.
    pub tokens: Vec<u16>,
    pub prompt_len: usize,
    /// Decision flags for generated tokens only
    /// (`decision.len() == tokens.len() - prompt_len`), so prompt positions
    /// can never be decision points by construction.
    pub decision: Vec<bool>,
    /// Group-normalized reward advantage, clipped.
    pub advantage: f64,
}

impl TrainSequence {
    pub fn decision_count(&self) -> usize {
        self.decision.iter().filter(|&&d| d).count()
    }

    /// Token indices (into `tokens`) of decision points.
    pub fn decision_positions(&self) -> Vec<usize> {
        self.decision
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(j, _)| self.prompt_len + j)
            .collect()
    }

    /// Token indices of anchored positions: every predictable token —
    /// prompt and completion alike, position 0 has no predecessor — that is
    /// not a decision point.
    pub fn anchor_positions(&self) -> Vec<usize> {
        (1..self.tokens.len())
            .filter(|&t| t < self.prompt_len || !self.decision[t - self.prompt_len])
            .collect()
    }
}

/// Group-normalize rewards and clip. `None` when the group is empty or has
/// zero variance (those problems never reach training anyway).
pub fn clipped_advantages(rewards: &[f64], clip: f64) -> Option<Vec<f64>> {
    group_advantage(rewards).map(|advs| advs.iter().map(|a| a.clamp(-clip, clip)).collect())
}

/// Sample the candidate pool's rollout groups from the base model. Split
/// out from [`training_set_from_groups`] so a τ sweep can reuse one set of
/// rollouts across thresholds.
pub fn sample_pool_rollouts<S: Scalar>(
    base: &InferModel<S>,
    pool: &[Problem],
    cfg: &RmConfig,
) -> Result<Vec<Vec<Rollout>>> {
    rollouts_for(base, pool, cfg.k_rollouts, &cfg.sampler, cfg.seed, "rm-rollout", 0)
}

/// Filter to the edge of competence, normalize advantages, and mark
/// decision points from the entropies recorded at sampling time.
pub fn training_set_from_groups(groups: &[Vec<Rollout>], cfg: &RmConfig) -> Result<Vec<TrainSequence>> {
    let stats = group_stats(groups);
    let retained = edge_filter(&stats, cfg.retained);
    if retained.is_empty() {
        return Err(Error::Training(
            "no problem landed at the edge of competence (pass rate strictly between 0 and 1); \
             enlarge the pool or rebalance its difficulty"
                .into(),
        ));
    }
    let keep: std::collections::HashSet<u64> = retained.into_iter().collect();
    let mut sequences = Vec::new();
    for group in groups {
        if group.is_empty() || !keep.contains(&group[0].problem_id) {
            continue;
        }
        let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
        let advantages = clipped_advantages(&rewards, cfg.adv_clip)
            .expect("edge-filtered group has nonzero reward variance");
        for (rollout, advantage) in group.iter().zip(advantages) {
            sequences.push(TrainSequence {
                problem_id: rollout.problem_id,
                tokens: rollout.tokens.clone(),
                prompt_len: rollout.prompt_len,
                decision: rollout.steps.iter().map(|s| s.entropy > cfg.tau).collect(),
                advantage,
            });
        }
    }
    Ok(sequences)
}

/// Rollout sampling plus labeling in one call.
pub fn build_training_set<S: Scalar>(
    base: &InferModel<S>,
    pool: &[Problem],
    cfg: &RmConfig,
) -> Result<Vec<TrainSequence>> {
    cfg.validate()?;
    let groups = sample_pool_rollouts(base, pool, cfg)?;
    training_set_from_groups(&groups, cfg)
}

/// Fraction of generated tokens marked as decision points.
pub fn gated_fraction(sequences: &[TrainSequence]) -> f64 {
    let decisions: usize = sequences.iter().map(|s| s.decision_count()).sum();
    let generated: usize = sequences.iter().map(|s| s.decision.len()).sum();
    if generated == 0 {
        0.0
    } else {
        decisions as f64 / generated as f64
    }
}

// ── training-set file ────────────────────────────────────────────────────

pub const TRAINSET_FORMAT: &str = "training-set";
pub const TRAINSET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSetHeader {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SeqRecord {
    problem_id: u64,
    tokens: Vec<u16>,
    prompt_len: usize,
    /// `'0'`/`'1'` per generated token.
    decision_mask: String,
    advantage: f64,
}

/// Line-delimited JSON: a header line, then one record per sequence, so a
/// run can be repeated exactly without regenerating rollouts.
pub fn save_training_set(path: &Path, meta: serde_json::Value, sequences: &[TrainSequence]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = TrainSetHeader {
        format: TRAINSET_FORMAT.to_string(),
        version: TRAINSET_VERSION,
        meta,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in sequences {
        let record = SeqRecord {
            problem_id: s.problem_id,
            tokens: s.tokens.clone(),
            prompt_len: s.prompt_len,
            decision_mask: s.decision.iter().map(|&d| if d { '1' } else { '0' }).collect(),
            advantage: s.advantage,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_training_set(path: &Path, produced_by: &str) -> Result<(TrainSetHeader, Vec<TrainSequence>)> {
    let file = crate::checkpoint::open_artifact(path, produced_by)?;
    let mut lines = BufReader::new(file).lines();
    let bad = |detail: String| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail,
    };
    let first = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))??;
    let header: TrainSetHeader =
        serde_json::from_str(&first).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != TRAINSET_FORMAT {
        return Err(bad(format!("format `{}` is not `{TRAINSET_FORMAT}`", header.format)));
    }
    if header.version != TRAINSET_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: header.version,
            expected: TRAINSET_VERSION,
        });
    }
    let mut sequences = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let r: SeqRecord = serde_json::from_str(&line).map_err(|e| bad(format!("bad record: {e}")))?;
        if r.prompt_len + r.decision_mask.len() != r.tokens.len() {
            return Err(bad(format!(
                "mask length {} does not cover completion of {} tokens",
                r.decision_mask.len(),
                r.tokens.len() - r.prompt_len.min(r.tokens.len())
            )));
        }
        let decision = r
            .decision_mask
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(bad(format!("mask character `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        sequences.push(TrainSequence {
            problem_id: r.problem_id,
            tokens: r.tokens,
            prompt_len: r.prompt_len,
            decision,
            advantage: r.advantage,
        });
    }
    Ok((header, sequences))
}

// ── the two losses ───────────────────────────────────────────────────────

/// Advantage-weighted cross-entropy over one sequence's decision tokens,
/// as tape nodes: `-A · Σ_{t∈D} log p_θ(x_t | x_<t)`, scaled by
/// `1/dec_total` so micro-batch gradients accumulate to one flat average
/// over the whole effective batch. `None` when the sequence contributes
/// nothing (no decision tokens, or gated out by `positive_only`).
fn decision_part<S: Scalar>(
    tape: &mut Tape<S>,
    logits: TensorId,
    seq: &TrainSequence,
    dec_total: usize,
    positive_only: bool,
) -> Result<Option<TensorId>> {
    let positions = seq.decision_positions();
    if positions.is_empty() || (positive_only && seq.advantage < 0.0) || seq.advantage == 0.0 {
        return Ok(None);
    }
    let rows: Vec<u32> = positions.iter().map(|&t| t as u32 - 1).collect();
    let picked = tape.take_rows(logits, &rows)?;
    let ls = tape.log_softmax(picked)?;
    let targets: Vec<u32> = positions.iter().map(|&t| seq.tokens[t] as u32).collect();
    let lp = tape.row_gather(ls, &targets)?;
    let s = tape.sum_all(lp);
    Ok(Some(tape.scale(s, S::from_f64(-seq.advantage / dec_total as f64))))
}

/// Full-vocabulary KL to the frozen base over one sequence's non-decision
/// positions, scaled by `lambda/anchor_total`. `base_rows[i]` must hold the
/// base model's logits for row `i` of the sequence (as from
/// [`infer::forced_logits`]). `None` when every position is a decision
/// point (the empty-mask convention — the caller counts these).
fn anchor_part<S: Scalar>(
    tape: &mut Tape<S>,
    logits: TensorId,
    seq: &TrainSequence,
    base_rows: &[Vec<S>],
    lambda: f64,
    anchor_total: usize,
) -> Result<Option<TensorId>> {
    let positions = seq.anchor_positions();
    if positions.is_empty() || lambda == 0.0 {
        return Ok(None);
    }
    let rows: Vec<u32> = positions.iter().map(|&t| t as u32 - 1).collect();
    let picked = tape.take_rows(logits, &rows)?;
    let vocab = base_rows[0].len();
    let mut targets = Vec::with_capacity(rows.len() * vocab);
    for &r in &rows {
        let row_f64: Vec<f64> = base_rows[r as usize].iter().map(|&x| x.to_f64()).collect();
        for lp in log_probs(&row_f64) {
            targets.push(S::from_f64(lp.exp()));
        }
    }
    let targets = Tensor { shape: vec![rows.len(), vocab], data: targets };
    let kl = tape.kl_sum(&targets, picked)?;
    Ok(Some(tape.scale(kl, S::from_f64(lambda / anchor_total as f64))))
}

/// Batch decision loss as a plain number, for tests and reporting. Averages
/// over all decision tokens in `sequences` (the denominator is unchanged by
/// `positive_only`, which only zeroes numerator contributions).
pub fn decision_loss<S: Scalar>(
    base: &Params<S>,
    adapter: &LoraAdapter<S>,
    sequences: &[TrainSequence],
    positive_only: bool,
) -> Result<f64> {
    let dec_total: usize = sequences.iter().map(|s| s.decision_count()).sum();
    if dec_total == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for seq in sequences {
        let mut tape = Tape::new();
        let model = load_model(&mut tape, base, Some(adapter), false, true);
        let logits = forward(&mut tape, &model, &seq.tokens, None)?;
        if let Some(part) = decision_part(&mut tape, logits, seq, dec_total, positive_only)? {
            total += tape.values(part)[0].to_f64();
        }
    }
    Ok(total)
}

/// Batch anchor loss as a plain number, averaged over all anchored
/// positions in `sequences`.
pub fn anchor_loss<S: Scalar>(
    base: &Params<S>,
    adapter: &LoraAdapter<S>,
    sequences: &[TrainSequence],
) -> Result<f64> {
    let anchor_total: usize = sequences.iter().map(|s| s.anchor_positions().len()).sum();
    if anchor_total == 0 {
        return Ok(0.0);
    }
    let base_infer = InferModel::new(base);
    let mut total = 0.0;
    for seq in sequences {
        let base_rows = infer::forced_logits(&base_infer, &seq.tokens)?;
        let mut tape = Tape::new();
        let model = load_model(&mut tape, base, Some(adapter), false, true);
        let logits = forward(&mut tape, &model, &seq.tokens, None)?;
        if let Some(part) = anchor_part(&mut tape, logits, seq, &base_rows, 1.0, anchor_total)? {
            total += tape.values(part)[0].to_f64();
        }
    }
    Ok(total)
}

// ── training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmLog {
    pub step: usize,
    /// `L_dec + λ·L_anchor`, averaged per the step's effective batch.
    pub loss: f64,
    pub lr: f64,
    pub val_pass1: Option<f64>,
}

/// What training produced: the validation-selected adapter plus the full
/// step log.
pub struct RmOutcome<S> {
    /// The checkpoint that scored best on validation (deployment choice).
    pub adapter: LoraAdapter<S>,
    /// Where training actually ended up, for diagnostics; on an abort this
    /// is the state before the poisoned step.
    pub final_adapter: LoraAdapter<S>,
    pub best_step: usize,
    pub best_pass1: f64,
    /// Validation pass@1 of the zero-initialized adapter — the untouched
    /// base — which every kept checkpoint must beat.
    pub baseline_pass1: f64,
    pub logs: Vec<RmLog>,
    /// Set when a non-finite loss cut training short.
    pub aborted: bool,
    /// Sequences whose anchor mask was empty (every position a decision
    /// point and no prompt interior) — each contributed 0 anchor loss.
    pub empty_anchor_sequences: usize,
}

/// One epoch (by default) of offline training on the prepared sequences,
/// selecting the checkpoint by greedy pass@1 on `validation`.
pub fn train<S: Scalar>(
    base: &Params<S>,
    sequences: &[TrainSequence],
    validation: &[Problem],
    cfg: &RmConfig,
) -> Result<RmOutcome<S>> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut adapter = LoraAdapter::<S>::init(&base.config, &cfg.lora, cfg.seed)?;
    let mut opt = AdamW::<S>::new(cfg.weight_decay);
    let base_infer = InferModel::new(base);

    let empty_anchor_sequences = sequences.iter().filter(|s| s.anchor_positions().is_empty()).count();
    if empty_anchor_sequences > 0 {
        eprintln!(
            "warning: {empty_anchor_sequences} sequence(s) have no anchorable position; \
             their anchor contribution is 0"
        );
    }

    let n = sequences.len();
    let micro_per_epoch = n.div_ceil(cfg.batch);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let warmup = cfg.warmup_steps.clamp(1, total_steps);

    // The zero-initialized adapter is exactly the base model; it is the
    // baseline every later checkpoint must beat.
    let mut best = adapter.clone();
    let baseline_pass1 = pass_at_1(&InferModel::merged(base, &adapter), validation)?;
    let mut best_pass1 = baseline_pass1;
    let mut best_step = 0usize;

    let mut logs = Vec::new();
    let mut aborted = false;
    let mut step = 0usize;
    'training: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "rm-epoch", &[epoch as u64]);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let micro_batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        for group in micro_batches.chunks(cfg.grad_accum) {
            let members: Vec<&TrainSequence> =
                group.iter().flat_map(|mb| mb.iter()).map(|&ix| &sequences[ix]).collect();
            // Denominators span the whole accumulation group so summed
            // micro-gradients equal the gradient of one flat average.
            let dec_total: usize = members.iter().map(|s| s.decision_count()).sum();
            let anchor_total: usize = members.iter().map(|s| s.anchor_positions().len()).sum();

            let mut grad_acc: Vec<Vec<S>> =
                adapter.tensors.iter().map(|nt| vec![S::ZERO; nt.tensor.data.len()]).collect();
            let mut loss_acc = 0.0;
            for mb in group {
                let mut tape = Tape::new();
                let model = load_model(&mut tape, base, Some(&adapter), false, true);
                let mut parts = Vec::new();
                for &ix in mb.iter() {
                    let seq = &sequences[ix];
                    let mask =
                        rm_dropout_mask::<S>(cfg.lora.dropout, seq.tokens.len(), cfg.seed, epoch, ix);
                    let logits = forward(&mut tape, &model, &seq.tokens, mask.as_deref())?;
                    if dec_total > 0 {
                        if let Some(part) =
                            decision_part(&mut tape, logits, seq, dec_total, cfg.positive_only)?
                        {
                            parts.push(part);
                        }
                    }
                    if anchor_total > 0 && cfg.lambda > 0.0 {
                        let base_rows = infer::forced_logits(&base_infer, &seq.tokens)?;
                        if let Some(part) =
                            anchor_part(&mut tape, logits, seq, &base_rows, cfg.lambda, anchor_total)?
                        {
                            parts.push(part);
                        }
                    }
                }
                if parts.is_empty() {
                    continue;
                }
                let sum = tape.add_n(&parts)?;
                tape.backward(sum)?;
                let v = tape.values(sum)[0].to_f64();
                if !v.is_finite() {
                    eprintln!("warning: non-finite loss at step {step}; keeping last good checkpoint");
                    aborted = true;
                    break 'training;
                }
                loss_acc += v;
                for (nt, acc) in adapter.tensors.iter().zip(grad_acc.iter_mut()) {
                    let g = tape
                        .grad(model.id(&nt.name))
                        .ok_or_else(|| Error::Training(format!("no gradient for `{}`", nt.name)))?;
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            let mut grad_refs: Vec<&mut [S]> = grad_acc.iter_mut().map(|g| g.as_mut_slice()).collect();
            clip_grad_global_norm(&mut grad_refs, cfg.grad_clip);
            let lr = cfg.lr * warmup_linear(step as u64 + 1, total_steps, warmup);
            let mut entries: Vec<OptimEntry<S>> = adapter
                .tensors
                .iter_mut()
                .zip(grad_acc.iter())
                .map(|(nt, g)| OptimEntry { name: &nt.name, param: &mut nt.tensor.data, grad: g })
                .collect();
            opt.step(lr, &mut entries)?;
            step += 1;

            let val_pass1 = if step.is_multiple_of(cfg.eval_every) || step as u64 == total_steps {
                let p = pass_at_1(&InferModel::merged(base, &adapter), validation)?;
                if p > best_pass1 {
                    best = adapter.clone();
                    best_pass1 = p;
                    best_step = step;
                }
                Some(p)
            } else {
                None
            };
            logs.push(RmLog { step, loss: loss_acc, lr, val_pass1 });
        }
    }
    Ok(RmOutcome {
        adapter: best,
        final_adapter: adapter,
        best_step,
        best_pass1,
        baseline_pass1,
        logs,
        aborted,
        empty_anchor_sequences,
    })
}

/// Per-position keep/scale factors for adapter dropout, on this trainer's
/// own stream; `None` (the identity path) when the rate is zero.
fn rm_dropout_mask<S: Scalar>(
    rate: f64,
    len: usize,
    seed: u64,
    epoch: usize,
    seq_ix: usize,
) -> Option<Vec<S>> {
    if rate <= 0.0 {
        return None;
    }
    use rand::Rng;
    let mut rng = rng::stream(seed, "rm-dropout", &[epoch as u64, seq_ix as u64]);
    let keep = 1.0 - rate;
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < keep { S::from_f64(1.0 / keep) } else { S::ZERO })
            .collect(),
    )
}

// ── τ sweep ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    /// Fraction of generated training tokens gated as decision points.
    pub gated_fraction: f64,
    pub val_pass1: f64,
}

/// Re-label one shared set of pool rollouts at each threshold, train at
/// each, and report validation pass@1 against the gated token budget.
pub fn tau_sweep<S: Scalar>(
    base: &Params<S>,
    pool: &[Problem],
    validation: &[Problem],
    taus: &[f64],
    cfg: &RmConfig,
) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let base_infer = InferModel::new(base);
    let groups = sample_pool_rollouts(&base_infer, pool, cfg)?;
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let sweep_cfg = RmConfig { tau, ..cfg.clone() };
        let sequences = training_set_from_groups(&groups, &sweep_cfg)?;
        let outcome = train(base, &sequences, validation, &sweep_cfg)?;
        points.push(SweepPoint {
            tau,
            gated_fraction: gated_fraction(&sequences),
            val_pass1: outcome.best_pass1,
        });
    }
    Ok(points)
}
