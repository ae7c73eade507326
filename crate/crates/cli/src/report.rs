//! Ablation rows: relative WER reductions and parameter overheads.

use ctxasr::eval::{rwerr, ContextMode, EvalReport};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Consumption, ExperimentSpec};

/// Written by `eval`, read by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub spec: ExperimentSpec,
    pub split: String,
    pub context: ContextMode,
    pub total_params: usize,
    pub base_params: usize,
    pub added_params: usize,
    pub trainable_params: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub context: ContextMode,
    /// On ambiguous tokens, the multi-turn analogue.
    pub rwerr_ambiguous: f64,
    pub rwerr_overall: f64,
    pub rwerr_with_context: f64,
    pub rwerr_without_context: f64,
    pub added_param_pct: f64,
    pub trainable_param_pct: f64,
}

fn rel(base: f64, cand: f64) -> f64 {
    // a perfect baseline leaves nothing to reduce
    rwerr(base, cand).unwrap_or(0.0)
}

pub fn row(baseline: &EvalRecord, cand: &EvalRecord) -> ReportRow {
    let (b, c) = (&baseline.report, &cand.report);
    ReportRow {
        label: cand.spec.label(),
        context: cand.context,
        rwerr_ambiguous: rel(b.wer_ambiguous(), c.wer_ambiguous()),
        rwerr_overall: rel(b.wer_all(), c.wer_all()),
        rwerr_with_context: rel(b.wer_with_context(), c.wer_with_context()),
        rwerr_without_context: rel(b.wer_without_context(), c.wer_without_context()),
        added_param_pct: 100.0 * cand.added_params as f64 / cand.base_params.max(1) as f64,
        trainable_param_pct: 100.0 * cand.trainable_params as f64 / cand.total_params.max(1) as f64,
    }
}

/// Picks `explicit` or else the first context-free record.
pub fn choose_baseline<'a>(explicit: Option<&'a EvalRecord>, records: &'a [EvalRecord]) -> CliResult<&'a EvalRecord> {
    explicit
        .or_else(|| records.iter().find(|r| r.spec.consumption == Consumption::None))
        .ok_or_else(|| CliError::Usage("no baseline evaluation record".into()))
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let header = [
        "variant",
        "context",
        "rWERR amb %",
        "rWERR all %",
        "rWERR ctx %",
        "rWERR no-ctx %",
        "added params %",
        "trainable %",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                match r.context {
                    ContextMode::AsLabeled => "as-labeled".to_string(),
                    ContextMode::ForceEmpty => "force-empty".to_string(),
                },
                format!("{:.2}", r.rwerr_ambiguous),
                format!("{:.2}", r.rwerr_overall),
                format!("{:.2}", r.rwerr_with_context),
                format!("{:.2}", r.rwerr_without_context),
                format!("{:.2}", r.added_param_pct),
                format!("{:.2}", r.trainable_param_pct),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.len());
        }
    }
    let line = |items: Vec<&str>| {
        items
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for c in &cells {
        out.push_str(&line(c.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out.push_str("error rates are computed on token ids\n");
    out
}

/// One JSON object per line.
pub fn render_records(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serialisable row") + "\n")
        .collect()
}

pub fn parse_records(text: &str) -> CliResult<Vec<ReportRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("line {}: {e}", i + 1))))
        .collect()
}
