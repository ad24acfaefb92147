//! Stage orchestration: each CLI subcommand maps to one function here that
//! reads its inputs from the run directory, does the work, writes artifacts,
//! and records a manifest entry with content hashes and wall-clock.
//!
//! Layout of a run directory:
//!
//! ```text
//! tasks/         corpus.bin, {split}.jsonl
//! checkpoints/   base.ckpt, teacher.ckpt, adapter_{label}.ckpt
//! logs/          pretrain.csv, grpo.csv
//! rollouts/      {model}_{split}.jsonl
//! analysis/      divergence.json, intervention.json
//! distill/       cache.bin, grid.json, log.csv
//! rm/            training_set.jsonl, log.csv, summary.json, sweep.json
//! eval/          {model}.json
//! report/        tables and figures
//! manifest.json
//! ```
//!
//! Everything except the manifest (which carries timestamps) is
//! byte-reproducible from the config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::distill::{self, DistillConfig};
use crate::divergence::{self, DivergenceAnalysis};
use crate::error::{Error, Result};
use crate::grpo;
use crate::infer::InferModel;
use crate::intervention::{self, InterventionOutcome};
use crate::manifest::RunManifest;
use crate::model::{LoraAdapter, Params};
use crate::pretrain;
use crate::reasonmaxxer::{self, RmConfig, SweepPoint};
use crate::rollout::{self, Rollout, SamplerConfig, GREEDY};
use crate::tasks::{self, Problem};

// ── run directory layout ─────────────────────────────────────────────────

/// All artifact paths of one run, derived from its root directory.
#[derive(Debug, Clone)]
pub struct RunDirs {
    root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> RunDirs {
        RunDirs { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("tasks").join("corpus.bin")
    }

    pub fn problems(&self, split: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{split}.jsonl"))
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints").join("base.ckpt")
    }

    pub fn teacher_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints").join("teacher.ckpt")
    }

    pub fn adapter_ckpt(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("adapter_{label}.ckpt"))
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("logs").join("pretrain.csv")
    }

    pub fn grpo_log(&self) -> PathBuf {
        self.root.join("logs").join("grpo.csv")
    }

    pub fn rollouts(&self, model: &str, split: &str) -> PathBuf {
        self.root.join("rollouts").join(format!("{model}_{split}.jsonl"))
    }

    pub fn divergence(&self) -> PathBuf {
        self.root.join("analysis").join("divergence.json")
    }

    pub fn intervention(&self) -> PathBuf {
        self.root.join("analysis").join("intervention.json")
    }

    pub fn distill_cache(&self) -> PathBuf {
        self.root.join("distill").join("cache.bin")
    }

    pub fn distill_grid(&self) -> PathBuf {
        self.root.join("distill").join("grid.json")
    }

    pub fn distill_log(&self) -> PathBuf {
        self.root.join("distill").join("log.csv")
    }

    pub fn rm_training_set(&self) -> PathBuf {
        self.root.join("rm").join("training_set.jsonl")
    }

    pub fn rm_log(&self, label: &str) -> PathBuf {
        self.root.join("rm").join(format!("log_{label}.csv"))
    }

    pub fn rm_summary(&self, label: &str) -> PathBuf {
        self.root.join("rm").join(format!("summary_{label}.json"))
    }

    pub fn rm_sweep(&self) -> PathBuf {
        self.root.join("rm").join("sweep.json")
    }

    pub fn eval(&self, model: &str) -> PathBuf {
        self.root.join("eval").join(format!("{model}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

// ── enveloped JSON artifacts ─────────────────────────────────────────────

pub fn save_json<T: Serialize>(path: &Path, artifact: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(artifact)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a JSON artifact whose top level carries `format` and `version`.
pub fn load_json<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
    produced_by: &str,
) -> Result<T> {
    checkpoint::open_artifact(path, produced_by)?;
    let text = std::fs::read_to_string(path)?;
    let bad = |detail: String| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        other => return Err(bad(format!("format {other:?} is not `{format}`"))),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(version) => {}
        Some(v) => {
            return Err(Error::FormatVersion {
                path: path.display().to_string(),
                found: v as u32,
                expected: version,
            })
        }
        None => return Err(bad("missing version field".into())),
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceArtifact {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub analysis: DivergenceAnalysis,
}

pub const DIVERGENCE_FORMAT: &str = "divergence-analysis";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionArtifact {
    pub format: String,
    pub version: u32,
    pub rows: Vec<InterventionOutcome>,
}

pub const INTERVENTION_FORMAT: &str = "intervention-suite";

/// One adapter configuration's distillation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub rank: usize,
    pub targets: String,
    pub trainable_params: usize,
    /// Adapter parameters over base parameters.
    pub trainable_fraction: f64,
    /// Mean per-token KL against the cached teacher after training.
    pub eval_kl: f64,
    /// Greedy pass rate on the held-out split with the adapter merged in.
    pub heldout_pass1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillGridArtifact {
    pub format: String,
    pub version: u32,
    /// Teacher's own greedy pass rate on held-out, for reference.
    pub teacher_pass1: f64,
    pub rows: Vec<GridRow>,
}

pub const DISTILL_GRID_FORMAT: &str = "distill-grid";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmSummaryArtifact {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub tau: f64,
    pub positive_only: bool,
    /// Retained training sequences.
    pub sequences: usize,
    /// Fraction of generated training tokens gated as decision points.
    pub gated_fraction: f64,
    /// Validation pass@1 of the untouched base (zero adapter).
    pub baseline_pass1: f64,
    pub best_step: usize,
    pub best_pass1: f64,
    pub aborted: bool,
    pub empty_anchor_sequences: usize,
}

pub const RM_SUMMARY_FORMAT: &str = "rm-summary";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepArtifact {
    pub format: String,
    pub version: u32,
    pub points: Vec<SweepPoint>,
}

pub const RM_SWEEP_FORMAT: &str = "rm-sweep";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub format: String,
    pub version: u32,
    pub model: String,
    /// Problems in the held-out split.
    pub problems: usize,
    /// Greedy pass rate.
    pub pass1: f64,
    /// Mean reward over `k` sampled completions per problem.
    pub avg_at_k: f64,
    pub k: usize,
}

pub const EVAL_FORMAT: &str = "eval";

// ── small shared helpers ─────────────────────────────────────────────────

/// Write a CSV with Display-formatted cells (shortest round-trip for
/// floats, so files are byte-stable across runs).
pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn opt_cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record(
    cfg: &RunConfig,
    stage: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let dirs = RunDirs::new(&cfg.run.out);
    let mut manifest = RunManifest::load_or_new(dirs.root())?;
    manifest.record_stage(
        dirs.root(),
        stage,
        serde_json::to_value(cfg)?,
        inputs,
        outputs,
        started.elapsed().as_secs_f64(),
    )
}

fn load_base(dirs: &RunDirs) -> Result<Params<f32>> {
    checkpoint::load_params(&dirs.base_ckpt(), "pretrain-base")
}

fn load_teacher(dirs: &RunDirs) -> Result<Params<f32>> {
    checkpoint::load_params(&dirs.teacher_ckpt(), "train-grpo")
}

fn load_split(dirs: &RunDirs, split: &str) -> Result<Vec<Problem>> {
    let (_, problems) = tasks::load_problems(&dirs.problems(split), "gen-tasks")?;
    Ok(problems)
}

/// Resolve a model selector to merged inference weights.
///
/// `base` and `teacher` name the two full checkpoints; any other name loads
/// `checkpoints/adapter_{name}.ckpt` and merges it into the base.
pub fn resolve_model(dirs: &RunDirs, selector: &str) -> Result<Params<f32>> {
    match selector {
        "base" => load_base(dirs),
        "teacher" => load_teacher(dirs),
        label => {
            let base = load_base(dirs)?;
            let (model_cfg, adapter) = checkpoint::load_adapter(
                &dirs.adapter_ckpt(label),
                "distill or reasonmaxxer",
            )?;
            if model_cfg != base.config {
                return Err(Error::InvalidConfig(format!(
                    "adapter `{label}` was trained for a different model shape"
                )));
            }
            Ok(crate::model::merge_adapter(&base, &adapter))
        }
    }
}

/// Sample rollout groups with the work split across `threads` contiguous
/// problem chunks. Streams are keyed per problem, so the result is
/// byte-identical to the sequential call.
pub fn sharded_rollouts(
    model: &InferModel<f32>,
    problems: &[Problem],
    k: usize,
    sampler: &SamplerConfig,
    seed: u64,
    tag: &str,
    round: u64,
    threads: usize,
) -> Result<Vec<Vec<Rollout>>> {
    let threads = threads.clamp(1, problems.len().max(1));
    if threads == 1 {
        return rollout::rollouts_for(model, problems, k, sampler, seed, tag, round);
    }
    let chunk = problems.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<Rollout>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = problems
            .chunks(chunk)
            .map(|slice| s.spawn(move || rollout::rollouts_for(model, slice, k, sampler, seed, tag, round)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(problems.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

// ── stages ───────────────────────────────────────────────────────────────

pub const SPLIT_NAMES: [&str; 5] = ["grpo-pool", "heldout", "rm-pool", "validation", "analysis"];

#[derive(Debug, Clone, Serialize)]
pub struct TasksSummary {
    pub splits: Vec<(String, usize)>,
    pub corpus_tokens: usize,
}

/// Generate the pretraining corpus and the five disjoint problem splits.
pub fn gen_tasks(cfg: &RunConfig) -> Result<TasksSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let sizes = [
        cfg.splits.grpo_pool,
        cfg.splits.heldout,
        cfg.splits.rm_pool,
        cfg.splits.validation,
        cfg.splits.analysis,
    ];
    let specs: Vec<(&str, usize, tasks::DifficultyDistribution)> = SPLIT_NAMES
        .iter()
        .zip(sizes)
        .map(|(&name, count)| (name, count, cfg.splits.difficulty.clone()))
        .collect();
    let splits = tasks::gen_problem_splits(cfg.run.seed, &specs)?;

    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for (&name, problems) in SPLIT_NAMES.iter().zip(&splits) {
        let path = dirs.problems(name);
        let meta = serde_json::json!({
            "split": name,
            "count": problems.len(),
            "seed": cfg.run.seed,
        });
        tasks::save_problems(&path, meta, problems)?;
        summary.push((name.to_string(), problems.len()));
        outputs.push(path);
    }

    let stream = tasks::gen_pretrain_corpus(&cfg.corpus)?;
    tasks::save_corpus(&dirs.corpus(), &stream)?;
    outputs.push(dirs.corpus());

    record(cfg, "gen-tasks", &[], &outputs, started)?;
    Ok(TasksSummary { splits: summary, corpus_tokens: stream.len() })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: f64,
}

/// Train the base model on the corpus and checkpoint it.
pub fn pretrain_base(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let corpus = tasks::load_corpus(&dirs.corpus(), "gen-tasks")?;
    let (params, logs) = pretrain::pretrain(&corpus, &cfg.model, &cfg.pretrain)?;

    checkpoint::save_params(&dirs.base_ckpt(), &params)?;
    let rows: Vec<Vec<String>> = logs
        .iter()
        .map(|l| vec![l.step.to_string(), l.loss.to_string(), l.grad_norm.to_string(), l.lr.to_string()])
        .collect();
    write_csv(&dirs.pretrain_log(), &["step", "loss", "grad_norm", "lr"], &rows)?;

    record(
        cfg,
        "pretrain-base",
        &[dirs.corpus()],
        &[dirs.base_ckpt(), dirs.pretrain_log()],
        started,
    )?;
    Ok(PretrainSummary {
        steps: cfg.pretrain.steps,
        final_loss: logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GrpoSummary {
    pub iterations: usize,
    /// Last recorded held-out greedy pass rate.
    pub final_heldout_pass1: Option<f64>,
}

/// Train the teacher from the base checkpoint with clipped group-relative
/// policy steps.
pub fn train_grpo(cfg: &RunConfig) -> Result<GrpoSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let base = load_base(&dirs)?;
    let pool = load_split(&dirs, "grpo-pool")?;
    let heldout = load_split(&dirs, "heldout")?;
    let (params, logs) = grpo::train_teacher(&base, &pool, &heldout, &cfg.grpo)?;

    checkpoint::save_params(&dirs.teacher_ckpt(), &params)?;
    // Wall-clock lives in the manifest, not here: this file must be
    // byte-identical across reruns.
    let rows: Vec<Vec<String>> = logs
        .iter()
        .map(|l| {
            vec![
                l.iteration.to_string(),
                l.mean_reward.to_string(),
                l.clip_fraction.to_string(),
                l.skipped_groups.to_string(),
                opt_cell(l.heldout_pass1),
            ]
        })
        .collect();
    write_csv(
        &dirs.grpo_log(),
        &["iteration", "mean_reward", "clip_fraction", "skipped_groups", "heldout_pass1"],
        &rows,
    )?;

    record(
        cfg,
        "train-grpo",
        &[dirs.base_ckpt(), dirs.problems("grpo-pool"), dirs.problems("heldout")],
        &[dirs.teacher_ckpt(), dirs.grpo_log()],
        started,
    )?;
    Ok(GrpoSummary {
        iterations: cfg.grpo.iterations,
        final_heldout_pass1: logs.iter().rev().find_map(|l| l.heldout_pass1),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub groups: usize,
    pub k: usize,
    pub mean_reward: f64,
}

/// Sample and store `k` rollouts per problem of `split` under `model`.
pub fn rollout_stage(cfg: &RunConfig, model_sel: &str, split: &str, k: usize) -> Result<RolloutSummary> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("rollout k must be at least 1".into()));
    }
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let params = resolve_model(&dirs, model_sel)?;
    let model = InferModel::new(&params);
    let problems = load_split(&dirs, split)?;
    let groups = sharded_rollouts(
        &model,
        &problems,
        k,
        &cfg.sampler,
        cfg.run.seed,
        "cli-rollout",
        0,
        cfg.run.threads,
    )?;

    let flat: Vec<Rollout> = groups.iter().flatten().cloned().collect();
    let path = dirs.rollouts(model_sel, split);
    let meta = serde_json::json!({
        "model": model_sel,
        "split": split,
        "k": k,
        "seed": cfg.run.seed,
        "temperature": cfg.sampler.temperature,
        "top_p": cfg.sampler.top_p,
    });
    rollout::save_rollouts(&path, meta, &flat)?;

    let mut inputs = vec![dirs.problems(split)];
    inputs.push(dirs.base_ckpt());
    if model_sel == "teacher" {
        inputs.push(dirs.teacher_ckpt());
    } else if model_sel != "base" {
        inputs.push(dirs.adapter_ckpt(model_sel));
    }
    record(cfg, &format!("rollout-{model_sel}-{split}"), &inputs, &[path], started)?;
    Ok(RolloutSummary {
        groups: groups.len(),
        k,
        mean_reward: rollout::mean_reward_of_groups(&groups),
    })
}

/// Greedy-decode the analysis split under the base model, teacher-force the
/// teacher on the same prefixes, and classify every position.
pub fn analyze_divergence(cfg: &RunConfig) -> Result<DivergenceArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let base = load_base(&dirs)?;
    let teacher = load_teacher(&dirs)?;
    let problems = load_split(&dirs, "analysis")?;
    let analysis = divergence::analyze_pair(
        &InferModel::new(&base),
        &InferModel::new(&teacher),
        &problems,
        cfg.divergence.rerank_cutoff,
    )?;

    let artifact = DivergenceArtifact {
        format: DIVERGENCE_FORMAT.into(),
        version: 1,
        analysis,
    };
    save_json(&dirs.divergence(), &artifact)?;

    record(
        cfg,
        "analyze-divergence",
        &[dirs.base_ckpt(), dirs.teacher_ckpt(), dirs.problems("analysis")],
        &[dirs.divergence()],
        started,
    )?;
    Ok(artifact)
}

/// Run the decode-time intervention suite (base, oracle, random controls,
/// entropy gates) on the analysis split.
pub fn intervene(cfg: &RunConfig) -> Result<InterventionArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let base = load_base(&dirs)?;
    let teacher = load_teacher(&dirs)?;
    let problems = load_split(&dirs, "analysis")?;
    let rows = intervention::run_intervention_suite(
        &InferModel::new(&base),
        &InferModel::new(&teacher),
        &problems,
        &cfg.intervene.taus,
        &cfg.intervene.random_seeds,
        cfg.intervene.random_pool,
    )?;

    let artifact = InterventionArtifact {
        format: INTERVENTION_FORMAT.into(),
        version: 1,
        rows,
    };
    save_json(&dirs.intervention(), &artifact)?;

    record(
        cfg,
        "intervene",
        &[dirs.base_ckpt(), dirs.teacher_ckpt(), dirs.problems("analysis")],
        &[dirs.intervention()],
        started,
    )?;
    Ok(artifact)
}

/// Distill the teacher into a low-rank adapter on the frozen base.
///
/// Always trains the configured adapter (checkpointed as `distill`); with
/// `grid`, additionally trains each ablation configuration. Every row lands
/// in `distill/grid.json` with its trainable fraction, post-training KL
/// against the cache, and held-out pass rate.
pub fn distill_stage(cfg: &RunConfig, grid: bool) -> Result<DistillGridArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let base = load_base(&dirs)?;
    let teacher = load_teacher(&dirs)?;
    let teacher_infer = InferModel::new(&teacher);
    let pool = load_split(&dirs, "grpo-pool")?;
    let heldout = load_split(&dirs, "heldout")?;
    let n = cfg.distill.problems.min(pool.len());

    let cache = distill::build_cache(
        &teacher_infer,
        &pool[..n],
        cfg.distill.k,
        &cfg.distill.sampler,
        cfg.distill.seed,
    )?;
    distill::save_cache(&dirs.distill_cache(), &cache)?;

    let train_one = |label: &str, dcfg: &DistillConfig| -> Result<(GridRow, LoraAdapter<f32>)> {
        let (adapter, logs) = distill::distill(&base, &cache, dcfg)?;
        if label == "default" {
            let rows: Vec<Vec<String>> = logs
                .iter()
                .map(|l| vec![l.step.to_string(), l.epoch.to_string(), l.loss.to_string(), l.lr.to_string()])
                .collect();
            write_csv(&dirs.distill_log(), &["step", "epoch", "loss", "lr"], &rows)?;
        }
        let student = InferModel::merged(&base, &adapter);
        let row = GridRow {
            label: label.to_string(),
            rank: dcfg.lora.rank,
            targets: dcfg
                .lora
                .targets
                .iter()
                .map(|t| match t {
                    crate::model::LoraTarget::Q => "q",
                    crate::model::LoraTarget::K => "k",
                    crate::model::LoraTarget::V => "v",
                    crate::model::LoraTarget::O => "o",
                })
                .collect::<Vec<_>>()
                .join(""),
            trainable_params: adapter.param_count(),
            trainable_fraction: adapter.trainable_fraction(&base),
            eval_kl: distill::eval_cache_kl(&student, &cache)?,
            heldout_pass1: rollout::pass_at_1(&student, &heldout)?,
        };
        Ok((row, adapter))
    };

    let mut rows = Vec::new();
    let mut outputs = vec![dirs.distill_cache(), dirs.distill_log()];

    let (row, adapter) = train_one("default", &cfg.distill)?;
    checkpoint::save_adapter(&dirs.adapter_ckpt("distill"), &base.config, &adapter)?;
    outputs.push(dirs.adapter_ckpt("distill"));
    rows.push(row);

    if grid {
        for (label, lora) in distill::ablation_grid() {
            let dcfg = DistillConfig { lora, ..cfg.distill.clone() };
            let (row, adapter) = train_one(&label, &dcfg)?;
            let path = dirs.adapter_ckpt(&format!("distill-{label}"));
            checkpoint::save_adapter(&path, &base.config, &adapter)?;
            outputs.push(path);
            rows.push(row);
        }
    }

    let artifact = DistillGridArtifact {
        format: DISTILL_GRID_FORMAT.into(),
        version: 1,
        teacher_pass1: rollout::pass_at_1(&teacher_infer, &heldout)?,
        rows,
    };
    save_json(&dirs.distill_grid(), &artifact)?;
    outputs.push(dirs.distill_grid());

    record(
        cfg,
        if grid { "distill-grid" } else { "distill" },
        &[
            dirs.base_ckpt(),
            dirs.teacher_ckpt(),
            dirs.problems("grpo-pool"),
            dirs.problems("heldout"),
        ],
        &outputs,
        started,
    )?;
    Ok(artifact)
}

/// Build the entropy-gated training set from base rollouts and train the
/// adapter teacher-free. `positive_only` drops negative-advantage terms
/// from the decision loss and labels all artifacts `rm-positive`.
pub fn reasonmaxxer_stage(cfg: &RunConfig, positive_only: bool, tau: Option<f64>) -> Result<RmSummaryArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);
    let label = if positive_only { "rm-positive" } else { "rm" };

    let rm_cfg = RmConfig {
        positive_only,
        tau: tau.unwrap_or(cfg.rm.tau),
        ..cfg.rm.clone()
    };
    rm_cfg.validate()?;

    let base = load_base(&dirs)?;
    let base_infer = InferModel::new(&base);
    let mut pool = load_split(&dirs, "rm-pool")?;
    pool.truncate(rm_cfg.pool);
    let validation = load_split(&dirs, "validation")?;

    let sequences = reasonmaxxer::build_training_set(&base_infer, &pool, &rm_cfg)?;
    let meta = serde_json::json!({
        "tau": rm_cfg.tau,
        "pool": pool.len(),
        "k_rollouts": rm_cfg.k_rollouts,
        "seed": rm_cfg.seed,
    });
    reasonmaxxer::save_training_set(&dirs.rm_training_set(), meta, &sequences)?;

    let outcome = reasonmaxxer::train(&base, &sequences, &validation, &rm_cfg)?;
    if outcome.aborted {
        eprintln!("warning: training aborted on a non-finite loss; keeping the best checkpoint so far");
    }
    checkpoint::save_adapter(&dirs.adapter_ckpt(label), &base.config, &outcome.adapter)?;

    let rows: Vec<Vec<String>> = outcome
        .logs
        .iter()
        .map(|l| vec![l.step.to_string(), l.loss.to_string(), l.lr.to_string(), opt_cell(l.val_pass1)])
        .collect();
    write_csv(&dirs.rm_log(label), &["step", "loss", "lr", "val_pass1"], &rows)?;

    let artifact = RmSummaryArtifact {
        format: RM_SUMMARY_FORMAT.into(),
        version: 1,
        label: label.to_string(),
        tau: rm_cfg.tau,
        positive_only,
        sequences: sequences.len(),
        gated_fraction: reasonmaxxer::gated_fraction(&sequences),
        baseline_pass1: outcome.baseline_pass1,
        best_step: outcome.best_step,
        best_pass1: outcome.best_pass1,
        aborted: outcome.aborted,
        empty_anchor_sequences: outcome.empty_anchor_sequences,
    };
    save_json(&dirs.rm_summary(label), &artifact)?;

    record(
        cfg,
        &format!("reasonmaxxer-{label}"),
        &[dirs.base_ckpt(), dirs.problems("rm-pool"), dirs.problems("validation")],
        &[
            dirs.rm_training_set(),
            dirs.adapter_ckpt(label),
            dirs.rm_log(label),
            dirs.rm_summary(label),
        ],
        started,
    )?;
    Ok(artifact)
}

/// Re-run training at each gate threshold over one shared rollout set.
pub fn rm_sweep_stage(cfg: &RunConfig) -> Result<SweepArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let base = load_base(&dirs)?;
    let mut pool = load_split(&dirs, "rm-pool")?;
    pool.truncate(cfg.rm.pool);
    let validation = load_split(&dirs, "validation")?;
    let points = reasonmaxxer::tau_sweep(&base, &pool, &validation, &cfg.rm_sweep.taus, &cfg.rm)?;

    let artifact = SweepArtifact { format: RM_SWEEP_FORMAT.into(), version: 1, points };
    save_json(&dirs.rm_sweep(), &artifact)?;

    record(
        cfg,
        "rm-sweep",
        &[dirs.base_ckpt(), dirs.problems("rm-pool"), dirs.problems("validation")],
        &[dirs.rm_sweep()],
        started,
    )?;
    Ok(artifact)
}

/// Score a model on the held-out split: greedy pass@1 plus mean reward over
/// `k` sampled completions per problem.
pub fn evaluate(cfg: &RunConfig, model_sel: &str) -> Result<EvalArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);

    let params = resolve_model(&dirs, model_sel)?;
    let model = InferModel::new(&params);
    let heldout = load_split(&dirs, "heldout")?;
    let k = cfg.eval.avg_at;

    // Greedy with the same stream key as `pass_at_1`, sharded.
    let greedy = sharded_rollouts(&model, &heldout, 1, &GREEDY, 0, "pass1", 0, cfg.run.threads)?;
    let pass1 = rollout::mean_reward_of_groups(&greedy);
    let sampled = sharded_rollouts(
        &model,
        &heldout,
        k,
        &cfg.eval.sampler,
        cfg.run.seed,
        "eval-avg",
        0,
        cfg.run.threads,
    )?;

    let artifact = EvalArtifact {
        format: EVAL_FORMAT.into(),
        version: 1,
        model: model_sel.to_string(),
        problems: heldout.len(),
        pass1,
        avg_at_k: rollout::mean_reward_of_groups(&sampled),
        k,
    };
    save_json(&dirs.eval(model_sel), &artifact)?;

    let mut inputs = vec![dirs.problems("heldout"), dirs.base_ckpt()];
    if model_sel == "teacher" {
        inputs.push(dirs.teacher_ckpt());
    } else if model_sel != "base" {
        inputs.push(dirs.adapter_ckpt(model_sel));
    }
    record(cfg, &format!("evaluate-{model_sel}"), &inputs, &[dirs.eval(model_sel)], started)?;
    Ok(artifact)
}

/// Render every table and figure from the stored artifacts.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let started = Instant::now();
    let dirs = RunDirs::new(&cfg.run.out);
    let files = crate::report::write_all(&dirs)?;
    record(cfg, "report", &files.inputs, &files.outputs, started)?;
    Ok(files.outputs)
}

// ── tests ────────────────────────────────────────────────────────────────
