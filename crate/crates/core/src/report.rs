//! Render the run's tables and figures from stored artifacts.
//!
//! Everything under `report/` is derived purely from JSON artifacts earlier
//! stages wrote, so the report can be regenerated at any time and — with
//! one deliberate exception — is byte-identical across reruns of the same
//! config. The exception is `method_timing.csv`, which summarizes
//! wall-clock from the manifest and is excluded from reproducibility
//! comparisons by construction.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{
    load_json, write_csv, DistillGridArtifact, DivergenceArtifact, EvalArtifact,
    InterventionArtifact, RmSummaryArtifact, RunDirs, SweepArtifact, DISTILL_GRID_FORMAT,
    DIVERGENCE_FORMAT, EVAL_FORMAT, INTERVENTION_FORMAT, RM_SUMMARY_FORMAT, RM_SWEEP_FORMAT,
};

/// What the report stage read and wrote, for the manifest.
#[derive(Debug)]
pub struct ReportFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Write every table and figure. Fails up front with the full list of
/// missing artifacts rather than stopping at the first.
pub fn write_all(dirs: &RunDirs) -> Result<ReportFiles> {
    let required: Vec<(PathBuf, &str)> = vec![
        (dirs.divergence(), "analyze-divergence"),
        (dirs.intervention(), "intervene"),
        (dirs.distill_grid(), "distill"),
        (dirs.rm_summary("rm"), "reasonmaxxer"),
        (dirs.rm_sweep(), "reasonmaxxer --sweep"),
        (dirs.eval("base"), "evaluate --model base"),
        (dirs.eval("teacher"), "evaluate --model teacher"),
        (dirs.eval("distill"), "evaluate --model distill"),
        (dirs.eval("rm"), "evaluate --model rm"),
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|(path, _)| !path.exists())
        .map(|(path, cmd)| format!("  {}  (run `{cmd}`)", path.display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing.join("\n")));
    }

    let mut inputs: Vec<PathBuf> = required.into_iter().map(|(p, _)| p).collect();
    let out = dirs.report_dir();
    std::fs::create_dir_all(&out)?;
    let mut outputs = Vec::new();

    // ── divergence taxonomy ──────────────────────────────────────────
    let div: DivergenceArtifact = load_json(&dirs.divergence(), DIVERGENCE_FORMAT, 1, "analyze-divergence")?;
    let r = &div.analysis.report;
    write_csv(
        &out.join("taxonomy.csv"),
        &["positions", "reranked_pct", "shifted_pct", "mean_rank", "entropy_ratio"],
        &[vec![
            r.positions.to_string(),
            r.reranked_pct.to_string(),
            r.shifted_pct.to_string(),
            r.mean_rank.map(|v| v.to_string()).unwrap_or_default(),
            r.entropy_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ]],
    )?;
    let mut txt = String::new();
    writeln!(txt, "Where the teacher departs from the base (greedy analysis split)").unwrap();
    writeln!(txt).unwrap();
    writeln!(txt, "positions classified      {}", r.positions).unwrap();
    writeln!(txt, "reranked                  {:.2}%  (teacher promotes a base top-k alternative)", r.reranked_pct).unwrap();
    writeln!(txt, "shifted                   {:.2}%  (teacher token outside the base top-k)", r.shifted_pct).unwrap();
    match r.mean_rank {
        Some(v) => writeln!(txt, "mean base rank when reranked   {v:.2}").unwrap(),
        None => writeln!(txt, "mean base rank when reranked   n/a (no reranked positions)").unwrap(),
    }
    match r.entropy_ratio {
        Some(v) => writeln!(txt, "base entropy, reranked / unshifted   {v:.2}").unwrap(),
        None => writeln!(txt, "base entropy, reranked / unshifted   n/a").unwrap(),
    }
    std::fs::write(out.join("taxonomy.txt"), txt)?;
    outputs.push(out.join("taxonomy.csv"));
    outputs.push(out.join("taxonomy.txt"));

    // ── intervention suite ───────────────────────────────────────────
    let intervention: InterventionArtifact =
        load_json(&dirs.intervention(), INTERVENTION_FORMAT, 1, "intervene")?;
    let rows: Vec<Vec<String>> = intervention
        .rows
        .iter()
        .map(|row| {
            vec![
                row.condition.clone(),
                row.tau.map(|t| t.to_string()).unwrap_or_default(),
                row.seed.map(|s| s.to_string()).unwrap_or_default(),
                row.pass1.to_string(),
                row.touch_fraction.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("intervention.csv"),
        &["condition", "tau", "seed", "pass1", "touch_fraction"],
        &rows,
    )?;
    let bars: Vec<(String, f64)> = intervention
        .rows
        .iter()
        .map(|row| {
            let label = match (&row.condition[..], row.tau, row.seed) {
                ("entropy_gated", Some(tau), _) => format!("gate tau={tau}"),
                ("random", None, None) => "random (mean)".to_string(),
                ("random", None, Some(seed)) => format!("random seed={seed}"),
                (name, _, _) => name.to_string(),
            };
            (label, row.pass1)
        })
        .collect();
    std::fs::write(
        out.join("intervention.svg"),
        bar_chart("Decode-time intervention: pass@1", &bars),
    )?;
    outputs.push(out.join("intervention.csv"));
    outputs.push(out.join("intervention.svg"));

    // ── adapter ablation grid ────────────────────────────────────────
    let grid: DistillGridArtifact = load_json(&dirs.distill_grid(), DISTILL_GRID_FORMAT, 1, "distill")?;
    let rows: Vec<Vec<String>> = grid
        .rows
        .iter()
        .map(|g| {
            vec![
                g.label.clone(),
                g.rank.to_string(),
                g.targets.clone(),
                g.trainable_params.to_string(),
                g.trainable_fraction.to_string(),
                g.eval_kl.to_string(),
                g.heldout_pass1.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("distill_grid.csv"),
        &["label", "rank", "targets", "trainable_params", "trainable_fraction", "eval_kl", "heldout_pass1"],
        &rows,
    )?;
    let mut txt = String::new();
    writeln!(txt, "Teacher compressed into attention-only adapters (teacher pass@1 {:.3})", grid.teacher_pass1).unwrap();
    writeln!(txt).unwrap();
    let table_rows: Vec<Vec<String>> = grid
        .rows
        .iter()
        .map(|g| {
            vec![
                g.label.clone(),
                g.rank.to_string(),
                g.targets.clone(),
                format!("{:.4}%", 100.0 * g.trainable_fraction),
                format!("{:.4}", g.eval_kl),
                format!("{:.3}", g.heldout_pass1),
            ]
        })
        .collect();
    txt.push_str(&render_table(
        &["adapter", "rank", "targets", "trainable", "KL to teacher", "pass@1"],
        &table_rows,
    ));
    std::fs::write(out.join("distill_grid.txt"), txt)?;
    outputs.push(out.join("distill_grid.csv"));
    outputs.push(out.join("distill_grid.txt"));

    // ── method comparison ────────────────────────────────────────────
    let mut evals: Vec<EvalArtifact> = Vec::new();
    for label in ["base", "teacher", "distill", "rm"] {
        evals.push(load_json(&dirs.eval(label), EVAL_FORMAT, 1, "evaluate")?);
    }
    if dirs.eval("rm-positive").exists() {
        evals.push(load_json(&dirs.eval("rm-positive"), EVAL_FORMAT, 1, "evaluate")?);
        inputs.push(dirs.eval("rm-positive"));
    }
    let k = evals[0].k;
    let rows: Vec<Vec<String>> = evals
        .iter()
        .map(|e| vec![e.model.clone(), e.pass1.to_string(), e.avg_at_k.to_string()])
        .collect();
    write_csv(
        &out.join("method_comparison.csv"),
        &["model", "pass1", &format!("avg_at_{k}")],
        &rows,
    )?;
    let rm_summary: RmSummaryArtifact = load_json(&dirs.rm_summary("rm"), RM_SUMMARY_FORMAT, 1, "reasonmaxxer")?;
    let mut txt = String::new();
    writeln!(txt, "Held-out accuracy by method ({} problems)", evals[0].problems).unwrap();
    writeln!(txt).unwrap();
    let table_rows: Vec<Vec<String>> = evals
        .iter()
        .map(|e| vec![e.model.clone(), format!("{:.3}", e.pass1), format!("{:.3}", e.avg_at_k)])
        .collect();
    txt.push_str(&render_table(&["model", "pass@1", &format!("avg@{k}")], &table_rows));
    writeln!(txt).unwrap();
    writeln!(
        txt,
        "rm trained on {} sequences at tau={} ({:.1}% of generated tokens gated), best step {}.",
        rm_summary.sequences,
        rm_summary.tau,
        100.0 * rm_summary.gated_fraction,
        rm_summary.best_step,
    )
    .unwrap();
    std::fs::write(out.join("method_comparison.txt"), txt)?;
    inputs.push(dirs.rm_summary("rm"));
    outputs.push(out.join("method_comparison.csv"));
    outputs.push(out.join("method_comparison.txt"));

    // ── timing (manifest wall-clock; not byte-reproducible) ──────────
    let manifest = RunManifest::load_or_new(dirs.root())?;
    let rows: Vec<Vec<String>> = manifest
        .stages
        .iter()
        .map(|(stage, rec)| vec![stage.clone(), format!("{:.3}", rec.wallclock_s)])
        .collect();
    write_csv(&out.join("method_timing.csv"), &["stage", "wallclock_s"], &rows)?;
    outputs.push(out.join("method_timing.csv"));

    // ── gate-threshold sweep ─────────────────────────────────────────
    let sweep: SweepArtifact = load_json(&dirs.rm_sweep(), RM_SWEEP_FORMAT, 1, "reasonmaxxer --sweep")?;
    let rows: Vec<Vec<String>> = sweep
        .points
        .iter()
        .map(|p| vec![p.tau.to_string(), p.gated_fraction.to_string(), p.val_pass1.to_string()])
        .collect();
    write_csv(&out.join("tau_sweep.csv"), &["tau", "gated_fraction", "val_pass1"], &rows)?;
    let pass_series: Vec<(f64, f64)> = sweep.points.iter().map(|p| (p.tau, p.val_pass1)).collect();
    let gate_series: Vec<(f64, f64)> = sweep.points.iter().map(|p| (p.tau, p.gated_fraction)).collect();
    std::fs::write(
        out.join("tau_sweep.svg"),
        line_chart(
            "Gate threshold sweep",
            &[("val pass@1", &pass_series), ("gated fraction", &gate_series)],
        ),
    )?;
    outputs.push(out.join("tau_sweep.csv"));
    outputs.push(out.join("tau_sweep.svg"));

    Ok(ReportFiles { inputs, outputs })
}

// ── rendering helpers ────────────────────────────────────────────────────

/// Space-padded text table with a dashed rule under the header.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, h) in headers.iter().enumerate() {
        let sep = if i + 1 == cols { "\n" } else { "  " };
        write!(out, "{:<width$}{sep}", h, width = widths[i]).unwrap();
    }
    for (i, w) in widths.iter().enumerate() {
        let sep = if i + 1 == cols { "\n" } else { "  " };
        write!(out, "{:-<width$}{sep}", "", width = w).unwrap();
    }
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            let sep = if i + 1 == cols { "\n" } else { "  " };
            write!(out, "{:<width$}{sep}", cell, width = widths[i]).unwrap();
        }
    }
    out
}

/// Horizontal bar chart. Coordinates are written with fixed precision so
/// the file is byte-stable.
fn bar_chart(title: &str, rows: &[(String, f64)]) -> String {
    const LABEL_W: f64 = 170.0;
    const BAR_MAX: f64 = 380.0;
    const ROW_H: f64 = 26.0;
    let height = 50.0 + ROW_H * rows.len() as f64 + 12.0;
    let max = rows.iter().map(|r| r.1).fold(0.0_f64, f64::max).max(1e-9);

    let mut svg = String::new();
    write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="620" height="{height:.0}" viewBox="0 0 620 {height:.0}">"##
    )
    .unwrap();
    svg.push_str(r##"<rect width="620" height="100%" fill="white"/>"##);
    write!(
        svg,
        r##"<text x="12" y="24" font-family="monospace" font-size="14" fill="#222">{title}</text>"##
    )
    .unwrap();
    for (i, (label, value)) in rows.iter().enumerate() {
        let y = 48.0 + ROW_H * i as f64;
        let w = BAR_MAX * value / max;
        write!(
            svg,
            r##"<text x="12" y="{ty:.1}" font-family="monospace" font-size="11" fill="#222">{label}</text>"##,
            ty = y + 13.0
        )
        .unwrap();
        write!(
            svg,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="18" fill="#4878a8"/>"##,
            x = LABEL_W
        )
        .unwrap();
        write!(
            svg,
            r##"<text x="{tx:.1}" y="{ty:.1}" font-family="monospace" font-size="11" fill="#222">{value:.3}</text>"##,
            tx = LABEL_W + w + 6.0,
            ty = y + 13.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Line chart of one or more `(x, y)` series with y clamped to `[0, 1]`.
fn line_chart(title: &str, series: &[(&str, &Vec<(f64, f64)>)]) -> String {
    const W: f64 = 560.0;
    const H: f64 = 320.0;
    const L: f64 = 60.0; // left margin
    const B: f64 = 40.0; // bottom margin
    const T: f64 = 40.0; // top margin
    let colors = ["#4878a8", "#b05050", "#5a8a5a", "#8a6aa0"];

    let xs: Vec<f64> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)).collect();
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let x_span = (x_max - x_min).max(1e-9);
    let px = |x: f64| L + (x - x_min) / x_span * (W - L - 20.0);
    let py = |y: f64| H - B - y.clamp(0.0, 1.0) * (H - B - T);

    let mut svg = String::new();
    write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0}" height="{H:.0}" viewBox="0 0 {W:.0} {H:.0}">"##
    )
    .unwrap();
    write!(svg, r##"<rect width="{W:.0}" height="{H:.0}" fill="white"/>"##).unwrap();
    write!(
        svg,
        r##"<text x="12" y="24" font-family="monospace" font-size="14" fill="#222">{title}</text>"##
    )
    .unwrap();
    // Axes with y gridlines at 0, 0.5, 1.
    write!(
        svg,
        r##"<line x1="{L:.1}" y1="{t:.1}" x2="{L:.1}" y2="{b:.1}" stroke="#888"/>"##,
        t = py(1.0),
        b = py(0.0)
    )
    .unwrap();
    for frac in [0.0, 0.5, 1.0] {
        let y = py(frac);
        write!(
            svg,
            r##"<line x1="{L:.1}" y1="{y:.1}" x2="{r:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            r = W - 20.0
        )
        .unwrap();
        write!(
            svg,
            r##"<text x="{tx:.1}" y="{ty:.1}" font-family="monospace" font-size="10" fill="#666">{frac:.1}</text>"##,
            tx = L - 30.0,
            ty = y + 3.0
        )
        .unwrap();
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        write!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
            path.join(" ")
        )
        .unwrap();
        for &(x, y) in pts.iter() {
            write!(
                svg,
                r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="3" fill="{color}"/>"##,
                cx = px(x),
                cy = py(y)
            )
            .unwrap();
        }
        // x tick labels along the bottom, once.
        if si == 0 {
            for &(x, _) in pts.iter() {
                write!(
                    svg,
                    r##"<text x="{tx:.1}" y="{ty:.1}" font-family="monospace" font-size="10" fill="#666">{x}</text>"##,
                    tx = px(x) - 8.0,
                    ty = H - B + 16.0
                )
                .unwrap();
            }
        }
        // Legend swatches, top right.
        let ly = 20.0 + 14.0 * si as f64;
        write!(
            svg,
            r##"<rect x="{rx:.1}" y="{ry:.1}" width="10" height="10" fill="{color}"/>"##,
            rx = W - 170.0,
            ry = ly - 9.0
        )
        .unwrap();
        write!(
            svg,
            r##"<text x="{tx:.1}" y="{ty:.1}" font-family="monospace" font-size="10" fill="#222">{name}</text>"##,
            tx = W - 155.0,
            ty = ly
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
