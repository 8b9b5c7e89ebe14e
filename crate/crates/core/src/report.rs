//! Plain-text and CSV rendering of evaluation reports.

use std::fmt::Write as _;

use crate::ensemble::EvalReport;

/// Results tables: per-fold-averaged percentages per stage, plus the
/// pooled-count counterpart.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "evaluation report (k={}, seed={}, augmentation={})",
        report.config.k_folds, report.config.seed, report.augmentation_enabled
    );
    let width = report
        .stages
        .iter()
        .map(|s| s.stage.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let _ = writeln!(out);
    let _ = writeln!(out, "fold-averaged metrics (%)");
    let _ = writeln!(
        out,
        "{:<width$} {:>9} {:>10} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}",
        "stage", "Accuracy", "Precision", "Recall", "F-Score", "TN", "FP", "FN", "TP"
    );
    for s in &report.stages {
        let a = &s.averaged;
        let _ = writeln!(
            out,
            "{:<width$} {:>9.2} {:>10.2} {:>8.2} {:>8.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            s.stage,
            100.0 * a.accuracy,
            100.0 * a.precision,
            100.0 * a.recall,
            100.0 * a.f_score,
            a.tn_rate,
            a.fp_rate,
            a.fn_rate,
            a.tp_rate,
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "pooled-count metrics (%)");
    let _ = writeln!(
        out,
        "{:<width$} {:>9} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "stage", "Accuracy", "Precision", "Recall", "F-Score", "TN", "FP", "FN", "TP"
    );
    for s in &report.stages {
        let p = &s.pooled;
        let _ = writeln!(
            out,
            "{:<width$} {:>9.2} {:>10.2} {:>8.2} {:>8.2} {:>8} {:>8} {:>8} {:>8}",
            s.stage,
            100.0 * p.accuracy,
            100.0 * p.precision,
            100.0 * p.recall,
            100.0 * p.f_score,
            p.tn,
            p.fp,
            p.fn_,
            p.tp,
        );
    }
    let failed: Vec<String> = report
        .folds
        .iter()
        .filter(|f| !f.ok)
        .map(|f| format!("fold {}: {}", f.fold, f.error.clone().unwrap_or_default()))
        .collect();
    if !failed.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "failed folds:");
        for f in failed {
            let _ = writeln!(out, "  {f}");
        }
    }
    out
}

/// Per-stage score table for bar-chart plotting.
pub fn render_scores_csv(report: &EvalReport) -> String {
    let mut out = String::from("stage,accuracy,precision,recall,f_score\n");
    for s in &report.stages {
        let a = &s.averaged;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.stage, a.accuracy, a.precision, a.recall, a.f_score
        );
    }
    out
}
