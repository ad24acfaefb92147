//! Group-relative policy optimization over full model weights.
//!
//! For each problem a group of completions is sampled, rewarded by the
//! task verifier, and turned into advantages by normalizing within the
//! group: `(r - mean) / (std + 1e-8)`, population std. A group whose
//! rewards are all equal carries no signal and is skipped outright — it
//! contributes neither gradient nor token count.
//!
//! The update is the clipped surrogate: per generated token,
//! `min(ρ·Â, clip(ρ, 1-ε, 1+ε)·Â)` with `ρ = exp(logp_new - logp_old)`,
//! averaged uniformly over every generated token in the batch and
//! maximized. Old log-probabilities are the ones captured when the
//! rollout was sampled; no reference-policy KL term is used.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::infer::InferModel;
use crate::model::{forward, load_model, Params};
use crate::optim::{clip_grad_global_norm, AdamW, OptimEntry};
use crate::rng;
use crate::rollout::{pass_at_1, rollouts_for, Rollout, SamplerConfig};
use crate::scalar::Scalar;
use crate::tasks::Problem;

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Within-group normalized advantages, or `None` when every reward is the
/// same (zero-variance group: nothing to learn from).
pub fn group_advantage(rewards: &[f64]) -> Option<Vec<f64>> {
    if rewards.is_empty() || rewards.iter().all(|&r| r == rewards[0]) {
        return None;
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Some(rewards.iter().map(|&r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// One rollout with its group-normalized advantage.
#[derive(Debug, Clone)]
pub struct Credited<'a> {
    pub rollout: &'a Rollout,
    pub advantage: f64,
}

/// Flatten sampled groups into credited rollouts, dropping zero-variance
/// groups. Returns the credited batch and the number of skipped groups.
pub fn credit_groups(groups: &[Vec<Rollout>]) -> (Vec<Credited<'_>>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for g in groups {
        let rewards: Vec<f64> = g.iter().map(|r| r.reward).collect();
        match group_advantage(&rewards) {
            Some(advs) => {
                for (r, a) in g.iter().zip(advs) {
                    out.push(Credited { rollout: r, advantage: a });
                }
            }
            None => skipped += 1,
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoStepStats {
    pub surrogate_loss: f64,
    /// Fraction of tokens whose ratio left `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

/// One clipped-surrogate gradient step over a credited batch.
pub fn grpo_step<S: Scalar>(
    params: &mut Params<S>,
    opt: &mut AdamW<S>,
    batch: &[Credited<'_>],
    epsilon: f64,
    lr: f64,
    grad_clip: f64,
) -> Result<GrpoStepStats> {
    if batch.is_empty() {
        return Err(Error::Training("empty credited batch; every group was zero-variance".into()));
    }
    let total_tokens: usize = batch.iter().map(|c| c.rollout.steps.len()).sum();
    if total_tokens == 0 {
        return Err(Error::Training("credited batch has no generated tokens".into()));
    }

    let mut tape = Tape::new();
    let model = load_model(&mut tape, params, None, true, false);
    let mut parts = Vec::with_capacity(batch.len());
    let mut clipped_tokens = 0usize;
    for c in batch {
        let r = c.rollout;
        let g = r.steps.len();
        let logits = forward(&mut tape, &model, &r.tokens, None)?;
        // Generated token at sequence position p is predicted by row p-1.
        let rows: Vec<u32> = (0..g).map(|j| (r.prompt_len - 1 + j) as u32).collect();
        let picked = tape.take_rows(logits, &rows)?;
        let lp = tape.log_softmax(picked)?;
        let targets: Vec<u32> = r.steps.iter().map(|s| s.token as u32).collect();
        let new_lp = tape.row_gather(lp, &targets)?;
        let old: Vec<S> = r.steps.iter().map(|s| S::from_f64(s.logprob)).collect();
        let old_id = tape.leaf(&Tensor { shape: vec![g], data: old }, false);
        let diff = tape.sub(new_lp, old_id)?;
        let ratio = tape.exp(diff);
        for &x in tape.values(ratio) {
            let v = x.to_f64();
            if v < 1.0 - epsilon || v > 1.0 + epsilon {
                clipped_tokens += 1;
            }
        }
        let adv = S::from_f64(c.advantage);
        let surr1 = tape.scale(ratio, adv);
        let clipped = tape.clamp(ratio, S::from_f64(1.0 - epsilon), S::from_f64(1.0 + epsilon));
        let surr2 = tape.scale(clipped, adv);
        let surrogate = tape.minimum(surr1, surr2)?;
        parts.push(tape.sum_all(surrogate));
    }
    let total = tape.add_n(&parts)?;
    // Maximize the mean surrogate == minimize its negation.
    let loss = tape.scale(total, S::from_f64(-1.0 / total_tokens as f64));
    tape.backward(loss)?;
    let loss_val = tape.values(loss)[0].to_f64();

    let mut grads: Vec<Vec<S>> = Vec::with_capacity(params.tensors.len());
    for nt in params.tensors.iter() {
        let id = model.id(&nt.name);
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::Training(format!("no gradient for `{}`", nt.name)))?;
        grads.push(g.to_vec());
    }
    let mut grad_refs: Vec<&mut [S]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
    let norm = clip_grad_global_norm(&mut grad_refs, grad_clip);
    let mut entries: Vec<OptimEntry<S>> = params
        .tensors
        .iter_mut()
        .zip(grads.iter())
        .map(|(nt, g)| OptimEntry { name: &nt.name, param: &mut nt.tensor.data, grad: g })
        .collect();
    opt.step(lr, &mut entries)?;

    Ok(GrpoStepStats {
        surrogate_loss: loss_val,
        clip_fraction: clipped_tokens as f64 / total_tokens as f64,
        tokens: total_tokens,
        grad_norm: norm,
    })
}

// ── the teacher loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GrpoConfig {
    pub seed: u64,
    pub iterations: usize,
    pub problems_per_iter: usize,
    pub group_size: usize,
    pub epsilon: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub sampler: SamplerConfig,
    /// Evaluate held-out greedy pass rate every this many iterations.
    pub eval_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            seed: 3,
            iterations: 60,
            problems_per_iter: 16,
            group_size: 8,
            epsilon: 0.2,
            lr: 1e-4,
            grad_clip: 1.0,
            sampler: SamplerConfig::default(),
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GrpoLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub skipped_groups: usize,
    /// Greedy pass rate on the held-out set; only at eval iterations.
    pub heldout_pass1: Option<f64>,
    /// Seconds since training started. Excluded from determinism checks.
    pub wallclock_s: f64,
}

/// Train a teacher from `start` by iterated group sampling and clipped
/// surrogate steps. `iterations == 0` returns the start weights untouched.
pub fn train_teacher(
    start: &Params<f32>,
    pool: &[Problem],
    heldout: &[Problem],
    cfg: &GrpoConfig,
) -> Result<(Params<f32>, Vec<GrpoLog>)> {
    if cfg.group_size < 2 {
        return Err(Error::InvalidConfig("group size below 2 cannot carry group signal".into()));
    }
    if pool.is_empty() {
        return Err(Error::InvalidConfig("empty training pool".into()));
    }
    let mut params = start.clone();
    let mut opt = AdamW::new(0.0);
    let mut logs = Vec::with_capacity(cfg.iterations);
    let t0 = std::time::Instant::now();

    for iter in 0..cfg.iterations {
        // Draw this iteration's problems without replacement.
        let mut ix: Vec<usize> = (0..pool.len()).collect();
        let mut r = rng::stream(cfg.seed, "grpo-problems", &[iter as u64]);
        ix.shuffle(&mut r);
        let chosen: Vec<Problem> = ix[..cfg.problems_per_iter.min(pool.len())]
            .iter()
            .map(|&i| pool[i].clone())
            .collect();

        let im = InferModel::new(&params);
        let groups = rollouts_for(&im, &chosen, cfg.group_size, &cfg.sampler, cfg.seed, "grpo-rollout", iter as u64)?;
        let mean_reward = crate::rollout::mean_reward_of_groups(&groups);
        let (batch, skipped) = credit_groups(&groups);

        let (clip_fraction, _stats) = if batch.is_empty() {
            (0.0, None)
        } else {
            let stats = grpo_step(&mut params, &mut opt, &batch, cfg.epsilon, cfg.lr, cfg.grad_clip)?;
            (stats.clip_fraction, Some(stats))
        };

        let heldout_pass1 = if !heldout.is_empty() && (iter % cfg.eval_every == 0 || iter + 1 == cfg.iterations) {
            Some(pass_at_1(&InferModel::new(&params), heldout)?)
        } else {
            None
        };
        logs.push(GrpoLog {
            iteration: iter,
            mean_reward,
            clip_fraction,
            skipped_groups: skipped,
            heldout_pass1,
            wallclock_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok((params, logs))
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;
    use crate::rollout::StepRecord;

    #[test]
    fn advantages_match_direct_formula_for_every_binary_pattern() {
        // Exhaustive oracle over all 2^6 reward patterns of a group of 6.
        for pattern in 0u32..64 {
            let rewards: Vec<f64> = (0..6).map(|j| ((pattern >> j) & 1) as f64).collect();
            let ones = rewards.iter().sum::<f64>();
            match group_advantage(&rewards) {
                None => assert!(ones == 0.0 || ones == 6.0, "only constant groups are skipped"),
                Some(advs) => {
                    assert!(ones > 0.0 && ones < 6.0);
                    let mean = ones / 6.0;
                    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
                    for (a, r) in advs.iter().zip(&rewards) {
                        let expect = (r - mean) / (std + 1e-8);
                        assert!((a - expect).abs() < 1e-9, "pattern {pattern:06b}: {a} vs {expect}");
                    }
                    // Normalized advantages sum to ~0.
                    assert!(advs.iter().sum::<f64>().abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_nonbinary_rewards_are_also_skipped() {
        assert!(group_advantage(&[0.5, 0.5, 0.5]).is_none());
        assert!(group_advantage(&[]).is_none());
        assert!(group_advantage(&[0.2, 0.8]).is_some());
    }

    fn tiny_params(seed: u64) -> Params<f64> {
        let cfg = TransformerConfig { layers: 1, heads: 2, d_model: 16, d_ff: 32, vocab: 64, context: 32 };
        Params::init(&cfg, seed).unwrap()
    }

    /// Old logprobs computed from the very weights being stepped, so the
    /// ratio is exactly one and the surrogate must equal the advantage
    /// token-mean with zero clipping.
    #[test]
    fn unit_ratio_batch_recovers_mean_advantage() {
        let mut params = tiny_params(51);
        let im = InferModel::new(&params);
        let mk = |tokens: Vec<u16>, prompt_len: usize, reward: f64| -> Rollout {
            let rows = crate::infer::forced_logits(&im, &tokens).unwrap();
            let steps = (prompt_len..tokens.len())
                .map(|p| {
                    let logits: Vec<f64> = rows[p - 1].iter().map(|&x| x).collect();
                    let lp = crate::rollout::log_probs(&logits);
                    StepRecord {
                        token: tokens[p],
                        logprob: lp[tokens[p] as usize],
                        entropy: crate::rollout::token_entropy(&logits),
                    }
                })
                .collect();
            Rollout { problem_id: 0, prompt_len, tokens, steps, reward }
        };
        let groups = vec![vec![mk(vec![0, 5, 9, 12, 1], 2, 1.0), mk(vec![0, 5, 7, 7, 3, 1], 2, 0.0)]];
        let (batch, skipped) = credit_groups(&groups);
        assert_eq!(skipped, 0);
        let advs: Vec<f64> = batch.iter().map(|c| c.advantage).collect();

        let mut opt = AdamW::new(0.0);
        let stats = grpo_step(&mut params, &mut opt, &batch, 0.2, 1e-4, 1.0).unwrap();
        assert_eq!(stats.clip_fraction, 0.0, "ratio is exactly 1 everywhere");
        // loss = -(t1*a1 + t2*a2) / (t1 + t2)
        let expect = -(3.0 * advs[0] + 4.0 * advs[1]) / 7.0;
        assert!(
            (stats.surrogate_loss - expect).abs() < 1e-9,
            "{} vs {}",
            stats.surrogate_loss,
            expect
        );
    }

    #[test]
    fn step_loss_does_not_depend_on_rollout_order() {
        let params = tiny_params(52);
        let im = InferModel::new(&params);
        let mk = |tokens: Vec<u16>, reward: f64| -> Rollout {
            let rows = crate::infer::forced_logits(&im, &tokens).unwrap();
            let steps = (2..tokens.len())
                .map(|p| {
                    let lp = crate::rollout::log_probs(&rows[p - 1]);
                    StepRecord { token: tokens[p], logprob: lp[tokens[p] as usize], entropy: 0.0 }
                })
                .collect();
            Rollout { problem_id: 0, prompt_len: 2, tokens, steps, reward }
        };
        let groups = vec![vec![
            mk(vec![0, 5, 9, 12, 1], 1.0),
            mk(vec![0, 5, 7, 7, 3, 1], 0.0),
            mk(vec![0, 5, 2, 1], 1.0),
        ]];
        let (batch, _) = credit_groups(&groups);
        let run = |order: &[usize]| -> f64 {
            let mut p = params.clone();
            let mut opt = AdamW::new(0.0);
            let permuted: Vec<Credited> = order.iter().map(|&i| batch[i].clone()).collect();
            grpo_step(&mut p, &mut opt, &permuted, 0.2, 1e-4, 1.0).unwrap().surrogate_loss
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    /// End-to-end direction check: a one-armed bandit. The "task" is a
    /// single next token after a fixed prompt; reward 1 iff it is token 7.
    /// Iterated group sampling plus surrogate steps must raise the model's
    /// probability of token 7 substantially.
    #[test]
    fn grpo_raises_the_rewarded_token_probability() {
        let mut params = tiny_params(53);
        let prompt = vec![0u16, 11, 4];
        let p7 = |params: &Params<f64>| -> f64 {
            let im = InferModel::new(params);
            let mut cache = crate::infer::KvCache::new(&im);
            let logits = crate::infer::prefill(&im, &mut cache, &prompt).unwrap();
            crate::rollout::log_probs(&logits)[7].exp()
        };
        let before = p7(&params);
        let sampler = SamplerConfig { temperature: 1.0, top_p: 1.0 };
        let mut opt = AdamW::new(0.0);
        // Groups of 32: with P(target) starting near 1/64, smaller groups
        // are usually all-miss and skipped, starving the test of signal.
        for iter in 0..40 {
            let im = InferModel::new(&params);
            let mut group = Vec::new();
            for j in 0..32 {
                let mut r = rng::stream(54, "bandit", &[iter, j]);
                let (tokens, steps) =
                    crate::rollout::generate(&im, &prompt, 1, &sampler, &mut r).unwrap();
                let reward = if tokens[3] == 7 { 1.0 } else { 0.0 };
                group.push(Rollout { problem_id: 0, prompt_len: 3, tokens, steps, reward });
            }
            let groups = vec![group];
            let (batch, _) = credit_groups(&groups);
            if batch.is_empty() {
                continue; // all eight samples agreed; nothing to learn
            }
            grpo_step(&mut params, &mut opt, &batch, 0.2, 3e-3, 1.0).unwrap();
        }
        let after = p7(&params);
        assert!(
            after > before * 3.0 && after > 0.1,
            "P(rewarded token) should climb: {before} -> {after}"
        );
    }

    #[test]
    fn zero_iterations_returns_start_weights_unchanged() {
        let cfg32 = TransformerConfig { layers: 1, heads: 2, d_model: 16, d_ff: 32, vocab: 64, context: 48 };
        let start: Params<f32> = Params::init(&cfg32, 55).unwrap();
        let dist = crate::tasks::DifficultyDistribution::uniform(1..=2);
        let pool = crate::tasks::gen_problems(56, 4, &dist).unwrap();
        let cfg = GrpoConfig { iterations: 0, ..GrpoConfig::default() };
        let (out, logs) = train_teacher(&start, &pool, &[], &cfg).unwrap();
        assert!(logs.is_empty());
        for (a, b) in start.tensors.iter().zip(&out.tensors) {
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
