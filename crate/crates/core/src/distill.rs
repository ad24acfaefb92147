//! Compressing the teacher into a low-rank adapter by pure distillation.
//!
//! The teacher generates rollouts of its own; at every generated position we
//! cache its top-`k` logits. A zero-initialized adapter on the frozen base
//! is then trained to minimize the token-level KL divergence to the cached
//! distributions — no rewards, no sampling from the student. How small an
//! adapter still matches the teacher bounds the dimensionality of whatever
//! the RL stage actually changed.
//!
//! Both the teacher and the student distributions are renormalized over the
//! cached support before the KL is taken (with `k` = vocabulary size the
//! support is complete and nothing is truncated). The alternative — lumping
//! the tail into a bucket — would live entirely inside [`kl_row`] and
//! [`sequence_kl`] if ever wanted.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::infer::{self, InferModel, KvCache};
use crate::model::{forward, load_model, LoraAdapter, LoraConfig, LoraTarget, Params};
use crate::optim::{warmup_linear, AdamW, OptimEntry};
use crate::rng;
use crate::rollout::{generation_budget, sample_token, SamplerConfig};
use crate::scalar::Scalar;
use crate::tasks::{Problem, EOS};

// ── teacher cache ────────────────────────────────────────────────────────

/// One generated position: the teacher's top-`k` token ids (descending
/// logit, ties toward the lower id) and their raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedPosition {
    pub ids: Vec<u16>,
    pub logits: Vec<f32>,
}

/// One teacher rollout with a [`CachedPosition`] for every generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedRollout {
    pub problem_id: u64,
    pub prompt_len: usize,
    /// Prompt followed by the sampled completion.
    pub tokens: Vec<u16>,
    pub positions: Vec<CachedPosition>,
}

/// The distillation target: cached top-`k` teacher distributions along the
/// teacher's own sampled rollouts, plus the generation settings that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub k: usize,
    pub vocab: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub rollouts: Vec<CachedRollout>,
}

impl TeacherCache {
    /// Total generated positions across all rollouts.
    pub fn position_count(&self) -> usize {
        self.rollouts.iter().map(|r| r.positions.len()).sum()
    }
}

/// Sample one rollout per problem from the teacher and record its top-`k`
/// logits at every generated position. Each problem draws from its own RNG
/// stream, so the cache does not depend on problem order.
pub fn build_cache<S: Scalar>(
    teacher: &InferModel<S>,
    problems: &[Problem],
    k: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<TeacherCache> {
    let vocab = teacher.config.vocab;
    if k == 0 || k > vocab {
        return Err(Error::InvalidConfig(format!(
            "cache k must be in 1..={vocab}, got {k}"
        )));
    }
    let mut rollouts = Vec::with_capacity(problems.len());
    for problem in problems {
        let prompt = problem.prompt_tokens()?;
        let mut cache = KvCache::new(teacher);
        let mut logits_s = infer::prefill(teacher, &mut cache, &prompt)?;
        let mut rng = rng::stream(seed, "distill-cache", &[problem.id]);
        let mut tokens = prompt.clone();
        let mut positions = Vec::new();
        for _ in 0..generation_budget(problem.difficulty) {
            let row: Vec<f64> = logits_s.iter().map(|&x| x.to_f64()).collect();
            positions.push(top_k_of_row(&row, k));
            let token = sample_token(&row, sampler, &mut rng);
            tokens.push(token);
            if token == EOS || cache.len() == teacher.config.context {
                break;
            }
            logits_s = infer::step(teacher, &mut cache, token)?;
        }
        rollouts.push(CachedRollout {
            problem_id: problem.id,
            prompt_len: prompt.len(),
            tokens,
            positions,
        });
    }
    Ok(TeacherCache {
        k,
        vocab,
        seed,
        sampler: *sampler,
        rollouts,
    })
}

/// Top-`k` of a logit row by descending value, ties toward the lower id.
fn top_k_of_row(row: &[f64], k: usize) -> CachedPosition {
    let mut order: Vec<u16> = (0..row.len() as u16).collect();
    order.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let logits = order.iter().map(|&id| row[id as usize] as f32).collect();
    CachedPosition { ids: order, logits }
}

// ── cache container ──────────────────────────────────────────────────────
//
// Byte layout (all integers and floats little-endian):
//
//   magic              4 bytes  "RLTC"
//   version            u32
//   k                  u32
//   vocab              u32
//   rollout count      u32
//   generation seed    u64
//   temperature        f64
//   top_p              f64
//   per rollout:
//     problem id       u64
//     prompt length    u32
//     token count      u32
//     position count   u32      (== token count − prompt length)
//     tokens           token count × u16
//     per position:    k × u16 ids, then k × f32 logits
//
// Fixed widths mean a record can be sliced without parsing its neighbors.

pub const CACHE_MAGIC: &[u8; 4] = b"RLTC";
pub const CACHE_VERSION: u32 = 1;

pub fn save_cache(path: &Path, cache: &TeacherCache) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cache.k as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.rollouts.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cache.seed.to_le_bytes());
    buf.extend_from_slice(&cache.sampler.temperature.to_le_bytes());
    buf.extend_from_slice(&cache.sampler.top_p.to_le_bytes());
    for r in &cache.rollouts {
        buf.extend_from_slice(&r.problem_id.to_le_bytes());
        buf.extend_from_slice(&(r.prompt_len as u32).to_le_bytes());
        buf.extend_from_slice(&(r.tokens.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(r.positions.len() as u32).to_le_bytes());
        for &t in &r.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for p in &r.positions {
            for &id in &p.ids {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            for &v in &p.logits {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_cache(path: &Path, produced_by: &str) -> Result<TeacherCache> {
    let mut file = crate::checkpoint::open_artifact(path, produced_by)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let bad = |detail: &str| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > buf.len() {
            return Err(bad("truncated"));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != CACHE_MAGIC {
        return Err(bad("not a teacher cache (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let vocab = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let temperature = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let top_p = f64::from_le_bytes(take(8)?.try_into().unwrap());
    if k == 0 || k > vocab {
        return Err(bad(&format!("k {k} out of range for vocab {vocab}")));
    }
    let mut rollouts = Vec::with_capacity(count);
    for _ in 0..count {
        let problem_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let prompt_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n_tokens = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n_positions = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if prompt_len + n_positions != n_tokens {
            return Err(bad("position count does not match completion length"));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for chunk in take(2 * n_tokens)?.chunks_exact(2) {
            tokens.push(u16::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut positions = Vec::with_capacity(n_positions);
        for _ in 0..n_positions {
            let mut ids = Vec::with_capacity(k);
            for chunk in take(2 * k)?.chunks_exact(2) {
                let id = u16::from_le_bytes(chunk.try_into().unwrap());
                if id as usize >= vocab {
                    return Err(bad(&format!("token id {id} outside vocab {vocab}")));
                }
                ids.push(id);
            }
            let mut logits = Vec::with_capacity(k);
            for chunk in take(4 * k)?.chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(bad("non-finite cached logit"));
                }
                logits.push(v);
            }
            positions.push(CachedPosition { ids, logits });
        }
        rollouts.push(CachedRollout { problem_id, prompt_len, tokens, positions });
    }
    if at != buf.len() {
        return Err(bad("trailing bytes after last rollout"));
    }
    Ok(TeacherCache {
        k,
        vocab,
        seed,
        sampler: SamplerConfig { temperature, top_p },
        rollouts,
    })
}

// ── the KL objective ─────────────────────────────────────────────────────

/// KL(teacher ‖ student) at one position, both sides renormalized over the
/// cached support. Pure scalar version used for evaluation and as the
/// reference the taped loss is checked against.
pub fn kl_row(cached: &CachedPosition, student_row: &[f64]) -> f64 {
    let p = softmax_f64(cached.logits.iter().map(|&v| v as f64));
    let s: Vec<f64> = cached.ids.iter().map(|&id| student_row[id as usize]).collect();
    let ls = log_softmax_f64(&s);
    p.iter()
        .zip(&ls)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &li)| pi * (pi.ln() - li))
        .sum()
}

fn softmax_f64(logits: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = logits.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lz = z.ln() + m;
    logits.iter().map(|&x| x - lz).collect()
}

/// Taped KL sum for one cached rollout: forward the full sequence, select
/// the rows that produced generated tokens, gather the cached support
/// columns, and take KL against the renormalized teacher distributions.
/// Returns the summed (not averaged) KL node and the position count.
pub fn sequence_kl<S: Scalar>(
    tape: &mut Tape<S>,
    model: &crate::model::TapedModel,
    cached: &CachedRollout,
    k: usize,
    dropout_mask: Option<&[S]>,
) -> Result<(TensorId, usize)> {
    let g = cached.positions.len();
    let logits = forward(tape, model, &cached.tokens, dropout_mask)?;
    // Generated token j was sampled from the row at prompt_len − 1 + j.
    let rows: Vec<u32> = (0..g as u32).map(|j| cached.prompt_len as u32 - 1 + j).collect();
    let picked = tape.take_rows(logits, &rows)?;
    let flat_ids: Vec<u32> = cached
        .positions
        .iter()
        .flat_map(|p| p.ids.iter().map(|&id| id as u32))
        .collect();
    let support = tape.cols_gather(picked, &flat_ids, k)?;
    let mut targets = Vec::with_capacity(g * k);
    for p in &cached.positions {
        for t in softmax_f64(p.logits.iter().map(|&v| v as f64)) {
            targets.push(S::from_f64(t));
        }
    }
    let targets = Tensor { shape: vec![g, k], data: targets };
    let kl = tape.kl_sum(&targets, support)?;
    Ok((kl, g))
}

/// Mean KL of `model` against every cached position, by direct (non-taped)
/// forward passes. Reporting/selection metric.
pub fn eval_cache_kl<S: Scalar>(model: &InferModel<S>, cache: &TeacherCache) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in &cache.rollouts {
        let rows = infer::forced_logits(model, &r.tokens)?;
        for (j, p) in r.positions.iter().enumerate() {
            let row: Vec<f64> = rows[r.prompt_len - 1 + j].iter().map(|&x| x.to_f64()).collect();
            total += kl_row(p, &row);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

// ── training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistillConfig {
    /// Support size cached per position. Equal to the vocabulary here, so
    /// the "top-k" distribution is in fact complete.
    pub k: usize,
    pub epochs: usize,
    /// Sequences per micro-batch (one tape).
    pub batch: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of optimizer steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub lora: LoraConfig,
    /// Problems sampled into the cache.
    pub problems: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            k: 64,
            epochs: 3,
            batch: 2,
            grad_accum: 8,
            lr: 1e-4,
            weight_decay: 1e-2,
            warmup_ratio: 0.1,
            lora: LoraConfig {
                rank: 32,
                alpha: 64.0,
                targets: LoraTarget::ALL.to_vec(),
                dropout: 0.05,
            },
            problems: 100,
            seed: 44,
            sampler: SamplerConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.k == 0 || self.k > vocab {
            return Err(Error::InvalidConfig(format!(
                "cache support k={} outside 1..={vocab}",
                self.k
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig(
                "distillation needs at least one epoch, one sequence per batch, \
                 and one micro-batch per step"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        if self.problems == 0 {
            return Err(Error::InvalidConfig("cache needs at least one problem".into()));
        }
        self.lora.validate()
    }
}

/// The rank/module ablation grid: progressively smaller adapters down to a
/// single projection, each with α = 2r.
pub fn ablation_grid() -> Vec<(String, LoraConfig)> {
    let qkvo = |rank: usize| LoraConfig {
        rank,
        alpha: 2.0 * rank as f64,
        targets: LoraTarget::ALL.to_vec(),
        dropout: 0.05,
    };
    vec![
        ("rank32-qkvo".to_string(), qkvo(32)),
        ("rank16-qkvo".to_string(), qkvo(16)),
        ("rank8-qkvo".to_string(), qkvo(8)),
        (
            "rank8-o".to_string(),
            LoraConfig {
                rank: 8,
                alpha: 16.0,
                targets: vec![LoraTarget::O],
                dropout: 0.05,
            },
        ),
    ]
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillLog {
    pub step: usize,
    pub epoch: usize,
    /// Mean KL per generated token over the step's effective batch.
    pub loss: f64,
    pub lr: f64,
}

/// Train a fresh adapter on the frozen base to match the cache. The base
/// parameters are never given to the optimizer; only adapter tensors move.
pub fn distill<S: Scalar>(
    base: &Params<S>,
    cache: &TeacherCache,
    cfg: &DistillConfig,
) -> Result<(LoraAdapter<S>, Vec<DistillLog>)> {
    if cache.vocab != base.config.vocab {
        return Err(Error::VocabMismatch { left: cache.vocab, right: base.config.vocab });
    }
    if cache.rollouts.is_empty() {
        return Err(Error::Training("teacher cache holds no rollouts".into()));
    }
    let mut adapter = LoraAdapter::<S>::init(&base.config, &cfg.lora, cfg.seed)?;
    let mut opt = AdamW::<S>::new(cfg.weight_decay);

    let n = cache.rollouts.len();
    let micro_per_epoch = n.div_ceil(cfg.batch);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let warmup = ((cfg.warmup_ratio * total_steps as f64).round() as u64).max(1);

    let mut logs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "distill-epoch", &[epoch as u64]);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let micro_batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        for group in micro_batches.chunks(cfg.grad_accum) {
            // The divisor must cover the whole accumulation group so the
            // summed micro-gradients equal the gradient of one flat average
            // over every generated token in the effective batch.
            let total_tokens: usize = group
                .iter()
                .flat_map(|mb| mb.iter())
                .map(|&ix| cache.rollouts[ix].positions.len())
                .sum();
            if total_tokens == 0 {
                continue;
            }
            let mut grad_acc: Vec<Vec<S>> =
                adapter.tensors.iter().map(|nt| vec![S::ZERO; nt.tensor.data.len()]).collect();
            let mut loss_acc = 0.0;
            for mb in group {
                let mut tape = Tape::new();
                let model = load_model(&mut tape, base, Some(&adapter), false, true);
                let mut parts = Vec::new();
                for &ix in mb.iter() {
                    let r = &cache.rollouts[ix];
                    let mask = dropout_mask::<S>(cfg.lora.dropout, r.tokens.len(), cfg.seed, epoch, ix);
                    let (kl, _) = sequence_kl(&mut tape, &model, r, cfg.k, mask.as_deref())?;
                    parts.push(kl);
                }
                let sum = tape.add_n(&parts)?;
                let loss = tape.scale(sum, S::from_f64(1.0 / total_tokens as f64));
                tape.backward(loss)?;
                let v = tape.values(loss)[0].to_f64();
                if !v.is_finite() {
                    return Err(Error::Training(format!("non-finite distill loss at step {step}")));
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
            let lr = cfg.lr * warmup_linear(step as u64 + 1, total_steps, warmup);
            let mut entries: Vec<OptimEntry<S>> = adapter
                .tensors
                .iter_mut()
                .zip(grad_acc.iter())
                .map(|(nt, g)| OptimEntry { name: &nt.name, param: &mut nt.tensor.data, grad: g })
                .collect();
            opt.step(lr, &mut entries)?;
            step += 1;
            logs.push(DistillLog { step, epoch, loss: loss_acc, lr });
        }
    }
    Ok((adapter, logs))
}

/// Per-position keep/scale factors for adapter dropout; `None` disables the
/// mask entirely (identity path) when the rate is zero.
fn dropout_mask<S: Scalar>(
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
    let mut rng = rng::stream(seed, "distill-dropout", &[epoch as u64, seq_ix as u64]);
    let keep = 1.0 - rate;
    Some(
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    S::from_f64(1.0 / keep)
                } else {
                    S::ZERO
                }
            })
            .collect(),
    )
}

/// Mean-per-token loss of each epoch, for trend reporting.
pub fn epoch_means(logs: &[DistillLog], epochs: usize) -> Vec<f64> {
    (0..epochs)
        .map(|e| {
            let of_epoch: Vec<f64> =
                logs.iter().filter(|l| l.epoch == e).map(|l| l.loss).collect();
            of_epoch.iter().sum::<f64>() / of_epoch.len().max(1) as f64
        })
        .collect()
}
