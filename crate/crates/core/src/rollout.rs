//! Sampling rollouts from a model and scoring them.
//!
//! Generation is nucleus sampling with a temperature knob: logits are
//! scaled, the smallest set of tokens whose mass reaches `top_p` is kept
//! (including the token that crosses the threshold), the rest is cut, and
//! the survivors are renormalized. Temperature zero short-circuits to
//! greedy. Ties always break toward the lowest token id, so decoding is a
//! pure function of weights, prompt, and RNG stream.
//!
//! Every generated token records two quantities at temperature 1 — the
//! model's raw log-probability of the emitted token and the entropy of the
//! full next-token distribution — because the downstream analyses
//! (advantage ratios, decision-point detection) are defined on the
//! unmodified distribution, not the sampling-shaped one.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::open_artifact;
use crate::error::{Error, Result};
use crate::infer::{self, InferModel, KvCache};
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{Problem, EOS};

// ── distribution helpers ─────────────────────────────────────────────────

/// Log-softmax of raw logits in f64.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Shannon entropy (nats) of the temperature-1 distribution, clamped into
/// `[0, ln V]` so downstream thresholds never see rounding spill.
pub fn token_entropy(logits: &[f64]) -> f64 {
    let lp = log_probs(logits);
    let h: f64 = lp.iter().map(|&l| if l > -745.0 { -l.exp() * l } else { 0.0 }).sum();
    h.clamp(0.0, (logits.len() as f64).ln())
}

/// Greedy argmax with ties broken toward the lowest id.
pub fn argmax(logits: &[f64]) -> u16 {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 0.6, top_p: 0.95 }
    }
}

pub const GREEDY: SamplerConfig = SamplerConfig { temperature: 0.0, top_p: 1.0 };

/// Draw one token. Returns the token id; the caller records logprob and
/// entropy from the raw logits separately.
pub fn sample_token(logits: &[f64], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> u16 {
    if cfg.temperature == 0.0 {
        return argmax(logits);
    }
    // Temperature-scaled probabilities.
    let scaled: Vec<f64> = logits.iter().map(|&x| x / cfg.temperature).collect();
    let lp = log_probs(&scaled);
    let mut order: Vec<usize> = (0..lp.len()).collect();
    // Descending probability, ties toward the lower id.
    order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
    // Keep the smallest prefix reaching top_p, including the crossing token.
    let mut kept = 0usize;
    let mut mass = 0.0f64;
    for &i in &order {
        kept += 1;
        mass += lp[i].exp();
        if mass >= cfg.top_p {
            break;
        }
    }
    let support = &order[..kept];
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for &i in support {
        acc += lp[i].exp() / mass;
        if u < acc {
            return i as u16;
        }
    }
    support[kept - 1] as u16
}

// ── rollouts ─────────────────────────────────────────────────────────────

/// Per-generated-token record, both captured at temperature 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub token: u16,
    pub logprob: f64,
    pub entropy: f64,
}

/// One sampled completion of one problem, with its binary reward.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Rollout {
    pub problem_id: u64,
    pub prompt_len: usize,
    /// Full token sequence: prompt, completion, and EOS when emitted.
    pub tokens: Vec<u16>,
    /// One record per generated token (`tokens[prompt_len..]`).
    pub steps: Vec<StepRecord>,
    pub reward: f64,
}

impl Rollout {
    pub fn completion_tokens(&self) -> &[u16] {
        &self.tokens[self.prompt_len..]
    }
}

/// Upper bound on generated tokens for a problem: the gold completion
/// length (8 per step, 4 for the marker) plus EOS plus slack.
pub fn generation_budget(difficulty: u32) -> usize {
    8 * difficulty as usize + 4 + 1 + 8
}

/// Sample one completion. Stops at EOS, the generation budget, or the end
/// of the context window, whichever comes first.
pub fn generate<S: Scalar>(
    model: &InferModel<S>,
    prompt: &[u16],
    max_new: usize,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u16>, Vec<StepRecord>)> {
    let mut cache = KvCache::new(model);
    let mut logits_s = infer::prefill(model, &mut cache, prompt)?;
    let mut tokens = prompt.to_vec();
    let mut steps = Vec::new();
    for _ in 0..max_new {
        let logits: Vec<f64> = logits_s.iter().map(|&x| x.to_f64()).collect();
        let token = sample_token(&logits, sampler, rng);
        let lp = log_probs(&logits);
        steps.push(StepRecord { token, logprob: lp[token as usize], entropy: token_entropy(&logits) });
        tokens.push(token);
        if token == EOS || cache.len() == model.config.context {
            break;
        }
        logits_s = infer::step(model, &mut cache, token)?;
    }
    Ok((tokens, steps))
}

/// Sample `k` scored rollouts per problem. Each rollout draws from its own
/// RNG stream keyed by `(tag, round, problem id, sample index)`, so results
/// do not depend on iteration order and never collide across stages.
pub fn rollouts_for<S: Scalar>(
    model: &InferModel<S>,
    problems: &[Problem],
    k: usize,
    sampler: &SamplerConfig,
    seed: u64,
    tag: &str,
    round: u64,
) -> Result<Vec<Vec<Rollout>>> {
    let mut out = Vec::with_capacity(problems.len());
    for p in problems {
        let prompt = p.prompt_tokens()?;
        let budget = generation_budget(p.difficulty).min(model.config.context - prompt.len());
        let mut group = Vec::with_capacity(k);
        for j in 0..k {
            let mut r = rng::stream(seed, tag, &[round, p.id, j as u64]);
            let (tokens, steps) = generate(model, &prompt, budget, sampler, &mut r)?;
            let reward = if crate::tasks::verify_tokens(&tokens[prompt.len()..], p) { 1.0 } else { 0.0 };
            group.push(Rollout { problem_id: p.id, prompt_len: prompt.len(), tokens, steps, reward });
        }
        out.push(group);
    }
    Ok(out)
}

// ── evaluation metrics ───────────────────────────────────────────────────

/// Fraction of problems whose greedy completion verifies.
pub fn pass_at_1<S: Scalar>(model: &InferModel<S>, problems: &[Problem]) -> Result<f64> {
    let groups = rollouts_for(model, problems, 1, &GREEDY, 0, "pass1", 0)?;
    Ok(mean_reward_of_groups(&groups))
}

/// Mean reward across all samples of all groups.
pub fn mean_reward_of_groups(groups: &[Vec<Rollout>]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for g in groups {
        for r in g {
            total += r.reward;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Per-problem pass rate over a sampled group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemStats {
    pub problem_id: u64,
    pub pass_rate: f64,
}

pub fn group_stats(groups: &[Vec<Rollout>]) -> Vec<ProblemStats> {
    groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| ProblemStats {
            problem_id: g[0].problem_id,
            pass_rate: g.iter().map(|r| r.reward).sum::<f64>() / g.len() as f64,
        })
        .collect()
}

/// Keep problems the model neither aces nor always fails (`0 < rate < 1`),
/// then the `n` with pass rates closest to one half — the edge of the
/// model's competence, where a group of samples actually carries signal.
/// Ties break toward the lower problem id.
pub fn edge_filter(stats: &[ProblemStats], n: usize) -> Vec<u64> {
    let mut edge: Vec<&ProblemStats> =
        stats.iter().filter(|s| s.pass_rate > 0.0 && s.pass_rate < 1.0).collect();
    edge.sort_by(|a, b| {
        let da = (a.pass_rate - 0.5).abs();
        let db = (b.pass_rate - 0.5).abs();
        da.partial_cmp(&db).unwrap().then(a.problem_id.cmp(&b.problem_id))
    });
    edge.iter().take(n).map(|s| s.problem_id).collect()
}

// ── rollout files ────────────────────────────────────────────────────────

pub const ROLLOUT_FORMAT: &str = "rollouts";
pub const ROLLOUT_VERSION: u32 = 1;

/// First line of a rollout file: format tag, version, free-form metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RolloutHeader {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
}

/// Write rollouts as JSONL: one header line, then one rollout per line.
pub fn save_rollouts(path: &Path, meta: serde_json::Value, rollouts: &[Rollout]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let header = RolloutHeader { format: ROLLOUT_FORMAT.into(), version: ROLLOUT_VERSION, meta };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for r in rollouts {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_rollouts(path: &Path, produced_by: &str) -> Result<(RolloutHeader, Vec<Rollout>)> {
    let f = open_artifact(path, produced_by)?;
    let mut lines = std::io::BufReader::new(f).lines();
    let head_line = lines.next().ok_or_else(|| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail: "empty rollout file".into(),
    })??;
    let header: RolloutHeader = serde_json::from_str(&head_line).map_err(|e| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail: format!("unreadable header line: {e}"),
    })?;
    if header.format != ROLLOUT_FORMAT {
        return Err(Error::MalformedArtifact {
            path: path.display().to_string(),
            detail: format!("format `{}` is not a rollout file", header.format),
        });
    }
    if header.version != ROLLOUT_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: header.version,
            expected: ROLLOUT_VERSION,
        });
    }
    let mut rollouts = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rollouts.push(serde_json::from_str(&line).map_err(|e| Error::MalformedArtifact {
            path: path.display().to_string(),
            detail: format!("rollout line {}: {e}", i + 2),
        })?);
    }
    Ok((header, rollouts))
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Params, TransformerConfig};

    #[test]
    fn entropy_of_uniform_and_peaked_distributions() {
        let uniform = vec![0.0f64; 64];
        assert!((token_entropy(&uniform) - 64f64.ln()).abs() < 1e-12);
        let mut peaked = vec![-1e6f64; 64];
        peaked[7] = 1e6;
        assert_eq!(token_entropy(&peaked), 0.0);
        // Clamp: entropy can never exceed ln V even with rounding.
        assert!(token_entropy(&uniform) <= 64f64.ln());
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let mut logits = vec![0.0f64; 16];
        logits[5] = 3.0;
        logits[9] = 3.0;
        assert_eq!(argmax(&logits), 5);
        let mut r = rng::stream(0, "tie", &[]);
        assert_eq!(sample_token(&logits, &GREEDY, &mut r), 5);
    }

    #[test]
    fn zero_temperature_equals_greedy_everywhere() {
        let mut r = rng::stream(1, "zt", &[]);
        for trial in 0..50 {
            let logits: Vec<f64> = (0..64).map(|i| ((trial * 64 + i) as f64 * 0.7).sin() * 3.0).collect();
            let mut rr = rng::stream(2, "zt-draw", &[trial as u64]);
            assert_eq!(sample_token(&logits, &GREEDY, &mut rr), argmax(&logits));
            let _: f64 = r.gen_range(0.0..1.0);
        }
    }

    #[test]
    fn nucleus_includes_the_crossing_token_and_cuts_the_tail() {
        // probs 0.5 / 0.3 / 0.2: at top_p = 0.6 the support must be {0, 1}
        // (token 1 crosses the threshold and stays), never token 2.
        let logits = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let cfg = SamplerConfig { temperature: 1.0, top_p: 0.6 };
        let mut seen = [0usize; 3];
        for j in 0..400 {
            let mut r = rng::stream(3, "nucleus", &[j]);
            seen[sample_token(&logits, &cfg, &mut r) as usize] += 1;
        }
        assert!(seen[0] > 0 && seen[1] > 0, "both kept tokens should appear: {seen:?}");
        assert_eq!(seen[2], 0, "tail token escaped the nucleus");
        // Renormalized ratio ≈ 0.5/0.3.
        let ratio = seen[0] as f64 / seen[1] as f64;
        assert!(ratio > 1.2 && ratio < 2.4, "ratio {ratio}");
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let logits: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos()).collect();
        let cfg = SamplerConfig::default();
        let draw = |seed: u64| -> Vec<u16> {
            (0..20)
                .map(|j| {
                    let mut r = rng::stream(seed, "det", &[j]);
                    sample_token(&logits, &cfg, &mut r)
                })
                .collect()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn generation_terminates_and_accounts_every_token() {
        let cfg = TransformerConfig { layers: 1, heads: 2, d_model: 16, d_ff: 32, vocab: 64, context: 64 };
        let params: Params<f32> = Params::init(&cfg, 41).unwrap();
        let model = InferModel::new(&params);
        let prompt = vec![0u16, 5, 12, 7];
        let mut r = rng::stream(42, "gen", &[]);
        let (tokens, steps) = generate(&model, &prompt, 16, &SamplerConfig::default(), &mut r).unwrap();
        assert!(steps.len() <= 16);
        assert_eq!(tokens.len(), prompt.len() + steps.len());
        for (i, s) in steps.iter().enumerate() {
            assert_eq!(s.token, tokens[prompt.len() + i]);
            assert!(s.logprob <= 0.0 && s.entropy >= 0.0);
        }
    }

    #[test]
    fn pure_metrics_from_constructed_groups() {
        let mk = |id: u64, rewards: &[f64]| -> Vec<Rollout> {
            rewards
                .iter()
                .map(|&reward| Rollout {
                    problem_id: id,
                    prompt_len: 1,
                    tokens: vec![0, 1],
                    steps: vec![],
                    reward,
                })
                .collect()
        };
        let groups = vec![mk(0, &[1.0, 0.0, 0.0, 0.0]), mk(1, &[1.0, 1.0, 1.0, 1.0]), mk(2, &[0.0, 0.0, 0.0, 0.0])];
        assert!((mean_reward_of_groups(&groups) - 5.0 / 12.0).abs() < 1e-12);
        let stats = group_stats(&groups);
        assert_eq!(stats[0], ProblemStats { problem_id: 0, pass_rate: 0.25 });
        assert_eq!(stats[1].pass_rate, 1.0);
    }

    #[test]
    fn edge_filter_selects_nearest_to_half_with_id_tiebreak() {
        let stats = vec![
            ProblemStats { problem_id: 10, pass_rate: 0.0 },  // dropped: never passes
            ProblemStats { problem_id: 11, pass_rate: 1.0 },  // dropped: always passes
            ProblemStats { problem_id: 12, pass_rate: 0.5 },  // distance 0.0
            ProblemStats { problem_id: 13, pass_rate: 0.25 }, // distance 0.25
            ProblemStats { problem_id: 14, pass_rate: 0.75 }, // distance 0.25, higher id
            ProblemStats { problem_id: 15, pass_rate: 0.9 },  // distance 0.4
        ];
        assert_eq!(edge_filter(&stats, 3), vec![12, 13, 14]);
        assert_eq!(edge_filter(&stats, 10), vec![12, 13, 14, 15]);
        assert_eq!(edge_filter(&stats, 0), Vec::<u64>::new());
    }

    #[test]
    fn rollout_files_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rollouts = vec![
            Rollout {
                problem_id: 3,
                prompt_len: 2,
                tokens: vec![0, 5, 9, 1],
                steps: vec![
                    StepRecord { token: 9, logprob: -0.25, entropy: 1.5 },
                    StepRecord { token: 1, logprob: -0.0625, entropy: 0.125 },
                ],
                reward: 1.0,
            },
            Rollout { problem_id: 4, prompt_len: 1, tokens: vec![0, 7], steps: vec![], reward: 0.0 },
        ];
        let meta = serde_json::json!({"stage": "test", "seed": 7});
        save_rollouts(&path, meta.clone(), &rollouts).unwrap();
        let (header, loaded) = load_rollouts(&path, "rollout").unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(loaded, rollouts);
        let path2 = dir.path().join("r2.jsonl");
        save_rollouts(&path2, header.meta, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rollout_file_version_mismatch_is_loud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, "{\"format\":\"rollouts\",\"version\":9,\"meta\":null}\n").unwrap();
        assert!(matches!(
            load_rollouts(&path, "rollout"),
            Err(Error::FormatVersion { found: 9, expected: 1, .. })
        ));
    }

    use crate::rng;
    use rand::Rng;
}
