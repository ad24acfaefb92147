//! Command-line driver: one subcommand per pipeline stage.
//!
//! Configuration layers, weakest to strongest: built-in defaults, the
//! `--config` TOML file, `REASONLAB_*` environment variables, then flags.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use reasonlab::config::RunConfig;
use reasonlab::pipeline;

#[derive(Parser)]
#[command(
    name = "reasonlab",
    version,
    about = "Desk-scale laboratory for teacher-free reasoning training on verifiable arithmetic tasks"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the run output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for rollout sampling (results are identical at any
    /// thread count).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining corpus and the five problem splits.
    GenTasks,
    /// Train the base model on the corpus.
    PretrainBase,
    /// Train the teacher from the base with group-relative policy steps.
    TrainGrpo,
    /// Sample and store rollouts from a model over a split.
    Rollout {
        /// `base`, `teacher`, or an adapter label such as `rm`.
        #[arg(long, default_value = "base")]
        model: String,
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Completions per problem.
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Classify every greedy position where the teacher departs from the base.
    AnalyzeDivergence,
    /// Decode-time intervention suite: oracle, random controls, entropy gates.
    Intervene,
    /// Compress the teacher into a low-rank adapter on the frozen base.
    Distill {
        /// Also train every ablation adapter configuration.
        #[arg(long)]
        grid: bool,
    },
    /// Build the entropy-gated training set from base rollouts and train
    /// the adapter without a teacher.
    Reasonmaxxer {
        /// Sweep the gate threshold over one shared rollout set instead of
        /// training a single adapter.
        #[arg(long)]
        sweep: bool,
        /// Drop negative-advantage terms from the decision loss.
        #[arg(long)]
        positive_only: bool,
        /// Override the configured gate threshold.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Score a model on the held-out split (greedy pass@1 and sampled avg@k).
    Evaluate {
        /// `base`, `teacher`, or an adapter label such as `distill` or `rm`.
        #[arg(long)]
        model: String,
        /// Sampled completions per problem.
        #[arg(long)]
        avg_at: Option<usize>,
    },
    /// Render tables and figures from the stored artifacts.
    Report,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    cfg.apply_flags(cli.seed, cli.out, cli.threads);
    cfg.validate()?;

    match cli.command {
        Command::GenTasks => {
            let s = pipeline::gen_tasks(&cfg).context("gen-tasks failed")?;
            for (name, count) in &s.splits {
                println!("{name}: {count} problems");
            }
            println!(
                "corpus: {} tokens -> {}",
                s.corpus_tokens,
                cfg.run.out.display()
            );
        }
        Command::PretrainBase => {
            let s = pipeline::pretrain_base(&cfg).context("pretrain-base failed")?;
            println!("base trained for {} steps; final loss {:.4}", s.steps, s.final_loss);
        }
        Command::TrainGrpo => {
            let s = pipeline::train_grpo(&cfg).context("train-grpo failed")?;
            match s.final_heldout_pass1 {
                Some(p) => println!("teacher trained {} iterations; held-out pass@1 {:.3}", s.iterations, p),
                None => println!("teacher trained {} iterations", s.iterations),
            }
        }
        Command::Rollout { model, split, k } => {
            let s = pipeline::rollout_stage(&cfg, &model, &split, k)
                .with_context(|| format!("rollout of `{model}` on `{split}` failed"))?;
            println!(
                "{} problems x {} rollouts from {model}; mean reward {:.3}",
                s.groups, s.k, s.mean_reward
            );
        }
        Command::AnalyzeDivergence => {
            let a = pipeline::analyze_divergence(&cfg).context("analyze-divergence failed")?;
            let r = &a.analysis.report;
            println!(
                "{} positions: {:.2}% reranked, {:.2}% shifted",
                r.positions, r.reranked_pct, r.shifted_pct
            );
            if let Some(rank) = r.mean_rank {
                println!("mean base rank of teacher choice when reranked: {rank:.2}");
            }
        }
        Command::Intervene => {
            let a = pipeline::intervene(&cfg).context("intervene failed")?;
            for row in &a.rows {
                let label = match (row.tau, row.seed) {
                    (Some(tau), _) => format!("{} tau={tau}", row.condition),
                    (None, Some(seed)) => format!("{} seed={seed}", row.condition),
                    (None, None) => row.condition.clone(),
                };
                println!(
                    "{label:<24} pass@1 {:.3}  touched {:.2}% of tokens",
                    row.pass1,
                    100.0 * row.touch_fraction
                );
            }
        }
        Command::Distill { grid } => {
            let a = pipeline::distill_stage(&cfg, grid).context("distill failed")?;
            println!("teacher pass@1 {:.3}", a.teacher_pass1);
            for row in &a.rows {
                println!(
                    "{:<14} rank {:<3} {:<5} trainable {:.4}%  KL {:.4}  pass@1 {:.3}",
                    row.label,
                    row.rank,
                    row.targets,
                    100.0 * row.trainable_fraction,
                    row.eval_kl,
                    row.heldout_pass1
                );
            }
        }
        Command::Reasonmaxxer { sweep, positive_only, tau } => {
            if sweep {
                let a = pipeline::rm_sweep_stage(&cfg).context("reasonmaxxer sweep failed")?;
                for p in &a.points {
                    println!(
                        "tau {:<5} gated {:.2}%  validation pass@1 {:.3}",
                        p.tau,
                        100.0 * p.gated_fraction,
                        p.val_pass1
                    );
                }
            } else {
                let a = pipeline::reasonmaxxer_stage(&cfg, positive_only, tau)
                    .context("reasonmaxxer failed")?;
                println!(
                    "{}: {} sequences at tau={} ({:.2}% of tokens gated)",
                    a.label,
                    a.sequences,
                    a.tau,
                    100.0 * a.gated_fraction
                );
                println!(
                    "validation pass@1 {:.3} -> {:.3} (best step {})",
                    a.baseline_pass1, a.best_pass1, a.best_step
                );
                if a.aborted {
                    println!("training aborted early on a non-finite loss; kept the best checkpoint");
                }
            }
        }
        Command::Evaluate { model, avg_at } => {
            if let Some(k) = avg_at {
                cfg.eval.avg_at = k;
                cfg.validate()?;
            }
            let a = pipeline::evaluate(&cfg, &model)
                .with_context(|| format!("evaluate of `{model}` failed"))?;
            println!(
                "{model} on {} problems: pass@1 {:.3}, avg@{} {:.3}",
                a.problems, a.pass1, a.k, a.avg_at_k
            );
        }
        Command::Report => {
            let files = pipeline::report(&cfg).context("report failed")?;
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
