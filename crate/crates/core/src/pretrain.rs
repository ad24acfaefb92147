//! Base-model pretraining: next-token prediction over the task corpus.
//!
//! Each optimizer step lays a batch of whole chains onto one tape, takes
//! the mean of their per-chain cross-entropies, backprops, clips the
//! global gradient norm, and applies AdamW under a linear warmup/decay
//! schedule. Chains are visited in seeded shuffled epochs, so the run is
//! a pure function of corpus and config.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, load_model, sequence_ce, Params, TransformerConfig};
use crate::optim::{clip_grad_global_norm, warmup_linear, AdamW, OptimEntry};
use crate::rng;
use crate::tasks::corpus_chains;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Optimizer steps.
    pub steps: usize,
    /// Chains per step.
    pub batch_chains: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent warming up.
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Record a log row every this many steps (and always the last).
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 1,
            steps: 2_000,
            batch_chains: 8,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            clip: 1.0,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One gradient step over `chains`; returns (mean loss, pre-clip norm).
/// Shared by pretraining and any later full-weight fine-tuning.
pub fn lm_step(
    params: &mut Params<f32>,
    opt: &mut AdamW<f32>,
    chains: &[&[u16]],
    lr: f64,
    clip: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let model = load_model(&mut tape, params, None, true, false);
    let mut parts = Vec::with_capacity(chains.len());
    for &chain in chains {
        let logits = forward(&mut tape, &model, chain, None)?;
        parts.push(sequence_ce(&mut tape, logits, chain, 0)?);
    }
    let sum = tape.add_n(&parts)?;
    let loss = tape.scale(sum, 1.0 / parts.len() as f32);
    tape.backward(loss)?;
    let loss_val = tape.values(loss)[0] as f64;

    // Pull gradients off the tape in parameter order, clip, apply.
    let mut grads: Vec<Vec<f32>> = Vec::with_capacity(params.tensors.len());
    for nt in params.tensors.iter() {
        let id = model.id(&nt.name);
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::Training(format!("no gradient for `{}`", nt.name)))?;
        grads.push(g.to_vec());
    }
    let mut grad_refs: Vec<&mut [f32]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
    let norm = clip_grad_global_norm(&mut grad_refs, clip);
    let mut entries: Vec<OptimEntry<f32>> = params
        .tensors
        .iter_mut()
        .zip(grads.iter())
        .map(|(nt, g)| OptimEntry { name: &nt.name, param: &mut nt.tensor.data, grad: g })
        .collect();
    opt.step(lr, &mut entries)?;
    Ok((loss_val, norm))
}

/// Train a fresh model on the corpus stream. Returns the weights and the
/// sampled training log.
pub fn pretrain(
    corpus: &[u16],
    model_cfg: &TransformerConfig,
    cfg: &PretrainConfig,
) -> Result<(Params<f32>, Vec<PretrainLog>)> {
    let chains = corpus_chains(corpus);
    if chains.is_empty() {
        return Err(Error::Training("pretraining corpus has no chains".into()));
    }
    if cfg.steps == 0 || cfg.batch_chains == 0 {
        return Err(Error::InvalidConfig("pretraining needs at least one step and one chain per batch".into()));
    }
    let mut params: Params<f32> = Params::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let warmup = ((cfg.steps as f64 * cfg.warmup_frac).round() as usize).max(1);

    let mut order: Vec<usize> = (0..chains.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = chains.len(); // force an initial shuffle
    let mut logs = Vec::new();

    for step in 0..cfg.steps {
        let mut batch: Vec<&[u16]> = Vec::with_capacity(cfg.batch_chains);
        while batch.len() < cfg.batch_chains {
            if cursor >= order.len() {
                let mut r = rng::stream(cfg.seed, "pretrain-epoch", &[epoch]);
                order.shuffle(&mut r);
                epoch += 1;
                cursor = 0;
            }
            batch.push(chains[order[cursor]]);
            cursor += 1;
        }
        let lr = cfg.lr * warmup_linear(step as u64 + 1, cfg.steps as u64, warmup as u64);
        let (loss, norm) = lm_step(&mut params, &mut opt, &batch, lr, cfg.clip)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} at step {step}")));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            logs.push(PretrainLog { step, loss, grad_norm: norm, lr });
        }
    }
    Ok((params, logs))
}
