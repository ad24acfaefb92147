//! Token-level comparison of a base model against its RL-tuned teacher.
//!
//! The base model greedy-decodes each problem. At every generated position
//! the teacher is fed the identical prefix and we ask where the teacher's
//! preferred token sits in the base model's own ranking:
//!
//! * `UNSHIFTED` — both models agree on the argmax;
//! * `RERANKED`  — they disagree, but the teacher's choice was already in the
//!   base model's top-[`RERANK_CUTOFF`];
//! * `SHIFTED`   — the teacher's choice sits below the cutoff.
//!
//! The aggregate report (rerank/shift rates, mean rank, entropy ratio)
//! summarizes how much of the teacher's behavior is re-weighting of options
//! the base model already entertained versus genuinely new proposals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{self, InferModel, KvCache};
use crate::rollout::{argmax, generation_budget, token_entropy};
use crate::scalar::Scalar;
use crate::tasks::{Problem, EOS};

/// Rank boundary between "reranked" and "shifted". A disagreeing teacher
/// token at rank ≤ 5 counts as a rerank of an option the base model already
/// had in view. Overridable per analysis for sensitivity runs.
pub const RERANK_CUTOFF: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DivergenceClass {
    Unshifted,
    Reranked,
    Shifted,
}

impl std::fmt::Display for DivergenceClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DivergenceClass::Unshifted => "UNSHIFTED",
            DivergenceClass::Reranked => "RERANKED",
            DivergenceClass::Shifted => "SHIFTED",
        };
        f.write_str(s)
    }
}

/// One generated position, classified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionRecord {
    /// Index within the generated completion (prompt positions are never
    /// recorded).
    pub position: usize,
    pub base_argmax: u16,
    pub teacher_argmax: u16,
    /// 1-indexed rank of the teacher's argmax under the base distribution.
    /// Rank 1 means agreement; disagreement forces rank ≥ 2.
    pub rank: usize,
    /// Base-model entropy at temperature 1, in nats.
    pub base_entropy: f64,
    pub class: DivergenceClass,
}

/// Aggregate over every classified position of an analysis run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub positions: usize,
    /// Percentage of positions where the teacher promotes a top-`cutoff`
    /// alternative, in `[0, 100]`.
    pub reranked_pct: f64,
    /// Percentage of positions where the teacher's choice was outside the
    /// base model's top-`cutoff`, in `[0, 100]`.
    pub shifted_pct: f64,
    /// Mean base-model rank of the teacher token over reranked positions;
    /// absent when no position was reranked. Always ≥ 2 when present.
    pub mean_rank: Option<f64>,
    /// Mean base entropy at reranked positions divided by mean base entropy
    /// at unshifted positions; absent unless both classes are populated.
    pub entropy_ratio: Option<f64>,
}

/// A classified position tagged with the problem it came from, for the
/// line-delimited per-position dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub problem_id: u64,
    #[serde(flatten)]
    pub record: PositionRecord,
}

/// Full result of [`analyze_pair`]: the summary plus every raw record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceAnalysis {
    pub report: TaxonomyReport,
    pub rows: Vec<DivergenceRow>,
}

/// Classify a single position from the two models' logit rows.
///
/// Rank is computed by descending base logit with ties broken toward the
/// lower token id — the same rule greedy decoding uses — so agreement on the
/// argmax is exactly rank 1.
pub fn classify_position(
    position: usize,
    base_row: &[f64],
    teacher_row: &[f64],
    cutoff: usize,
) -> Result<PositionRecord> {
    if base_row.len() != teacher_row.len() {
        return Err(Error::VocabMismatch {
            left: base_row.len(),
            right: teacher_row.len(),
        });
    }
    let base_argmax = argmax(base_row);
    let teacher_argmax = argmax(teacher_row);
    let target = base_row[teacher_argmax as usize];
    let mut rank = 1usize;
    for (id, &v) in base_row.iter().enumerate() {
        if v > target || (v == target && (id as u16) < teacher_argmax) {
            rank += 1;
        }
    }
    let class = if base_argmax == teacher_argmax {
        DivergenceClass::Unshifted
    } else if rank <= cutoff {
        DivergenceClass::Reranked
    } else {
        DivergenceClass::Shifted
    };
    Ok(PositionRecord {
        position,
        base_argmax,
        teacher_argmax,
        rank,
        base_entropy: token_entropy(base_row),
        class,
    })
}

/// Summarize a set of classified positions.
pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a PositionRecord>) -> TaxonomyReport {
    let mut positions = 0usize;
    let mut reranked = 0usize;
    let mut shifted = 0usize;
    let mut rank_sum = 0.0;
    let mut h_reranked = 0.0;
    let mut unshifted = 0usize;
    let mut h_unshifted = 0.0;
    for r in records {
        positions += 1;
        match r.class {
            DivergenceClass::Unshifted => {
                unshifted += 1;
                h_unshifted += r.base_entropy;
            }
            DivergenceClass::Reranked => {
                reranked += 1;
                rank_sum += r.rank as f64;
                h_reranked += r.base_entropy;
            }
            DivergenceClass::Shifted => shifted += 1,
        }
    }
    let pct = |n: usize| {
        if positions == 0 {
            0.0
        } else {
            100.0 * n as f64 / positions as f64
        }
    };
    let mean_rank = (reranked > 0).then(|| rank_sum / reranked as f64);
    // The ratio compares typical base uncertainty where the teacher reranks
    // against where it agrees; it needs both populations and a nonzero
    // denominator to mean anything.
    let entropy_ratio = (reranked > 0 && unshifted > 0 && h_unshifted > 0.0)
        .then(|| (h_reranked / reranked as f64) / (h_unshifted / unshifted as f64));
    TaxonomyReport {
        positions,
        reranked_pct: pct(reranked),
        shifted_pct: pct(shifted),
        mean_rank,
        entropy_ratio,
    }
}

/// Greedy-decode each problem with the base model, teacher-force the teacher
/// on the identical prefix, and classify every generated position.
pub fn analyze_pair<S: Scalar>(
    base: &InferModel<S>,
    teacher: &InferModel<S>,
    problems: &[Problem],
    cutoff: usize,
) -> Result<DivergenceAnalysis> {
    if base.config.vocab != teacher.config.vocab {
        return Err(Error::VocabMismatch {
            left: base.config.vocab,
            right: teacher.config.vocab,
        });
    }
    let mut rows = Vec::new();
    for problem in problems {
        let prompt = problem.prompt_tokens()?;
        let mut base_cache = KvCache::new(base);
        let mut teacher_cache = KvCache::new(teacher);
        let mut base_logits = infer::prefill(base, &mut base_cache, &prompt)?;
        let mut teacher_logits = infer::prefill(teacher, &mut teacher_cache, &prompt)?;
        for position in 0..generation_budget(problem.difficulty) {
            let base_row: Vec<f64> = base_logits.iter().map(|&x| x.to_f64()).collect();
            let teacher_row: Vec<f64> = teacher_logits.iter().map(|&x| x.to_f64()).collect();
            let record = classify_position(position, &base_row, &teacher_row, cutoff)?;
            let token = record.base_argmax;
            rows.push(DivergenceRow {
                problem_id: problem.id,
                record,
            });
            if token == EOS || base_cache.len() == base.config.context {
                break;
            }
            base_logits = infer::step(base, &mut base_cache, token)?;
            teacher_logits = infer::step(teacher, &mut teacher_cache, token)?;
        }
    }
    let report = aggregate(rows.iter().map(|r| &r.record));
    Ok(DivergenceAnalysis { report, rows })
}
