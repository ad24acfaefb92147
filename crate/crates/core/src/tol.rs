//! Numeric tolerances and experiment thresholds, pinned in one place.
//!
//! Tests and the acceptance suite reference these constants instead of
//! inlining numbers, so a threshold change is a one-line diff with history.

/// Finite-difference step for gradient verification (at f64).
pub const FD_STEP: f64 = 1e-4;

/// Worst allowed combined relative/absolute error between analytic and
/// finite-difference gradients. The combined metric is
/// `|a-b| / max(1, |a|, |b|)`; see `autodiff::gradcheck`.
pub const FD_TOL: f64 = 1e-4;

/// Group-advantage values must match a brute-force oracle this tightly.
pub const ADVANTAGE_ABS_TOL: f64 = 1e-9;

/// Reordering rollouts within a group must not move gradients more than
/// this (f64 accumulation-order noise only).
pub const GROUP_ORDER_TOL: f64 = 1e-9;

/// Minimum pass@1 lift (absolute) the RL teacher must show over the base
/// model on held-out problems.
pub const TEACHER_MIN_LIFT: f64 = 0.15;

/// Divergence-taxonomy bounds for a trained base/teacher pair: the teacher's
/// edits must be sparse and shallow.
pub const RERANKED_MAX: f64 = 0.10;
pub const SHIFTED_MAX: f64 = 0.01;
/// Mean base entropy at reranked positions over mean at unshifted positions.
pub const ENTROPY_RATIO_MIN: f64 = 2.0;
/// Mean base rank of the teacher's choice at reranked positions.
pub const MEAN_RANK_MIN: f64 = 2.0;

/// Oracle token substitution must recover at least this share of the
/// base-to-teacher pass@1 gap.
pub const ORACLE_MIN_GAP_RECOVERY: f64 = 0.80;

/// Random substitution at the same positions must lift pass@1 by at most
/// this (absolute, averaged over seeds).
pub const RANDOM_MAX_LIFT: f64 = 0.02;

/// Best entropy-gated threshold must recover at least this share of the gap.
pub const GATED_MIN_GAP_RECOVERY: f64 = 0.60;

/// A distilled adapter counts as "small" below this trainable fraction.
pub const DISTILL_MAX_TRAINABLE_FRACTION: f64 = 0.01;

/// Distilled student must match the teacher's pass@1 within this (absolute).
pub const DISTILL_MAX_GAP: f64 = 0.03;

/// Decision-token training must match the teacher's pass@1 within this.
pub const RM_MAX_GAP: f64 = 0.03;

/// Decision-token training may use at most this share of the teacher's
/// training wall-clock.
pub const RM_MAX_WALLCLOCK_FRACTION: f64 = 0.20;

/// The positive-only ablation must sit at least this far (absolute pass@1)
/// above the base and below the full method.
pub const POSITIVE_ONLY_MIN_MARGIN: f64 = 0.02;
