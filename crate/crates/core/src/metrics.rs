//! Threshold-free ranking metrics: AUROC, AUPR-In, AUPR-Out.
//!
//! AUROC is the Mann-Whitney statistic `P(score_pos > score_neg) + 1/2
//! P(equal)`, computed by rank summation with midranks for ties. Because
//! ranks are accumulated as doubled integers, the result is the exactly
//! rounded value of the underlying rational number — it matches a
//! pairwise-count oracle bit for bit.
//!
//! AUPR is average precision: descending-score walk where the step
//! happens once per unique score (tie groups move together), precision
//! sampled after each group that contains positives.

use std::io::Write;

use crate::error::{Error, Result};

/// Metrics of one scoring method on one binary task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub auroc: f64,
    pub aupr_out: f64,
    pub aupr_in: f64,
    /// Number of positive-class points (error / out-of-distribution).
    pub n_pos: usize,
    /// Number of negative-class points (correct / in-distribution).
    pub n_neg: usize,
}

fn check_binary(labels: &[u8]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok((n_pos, n_neg))
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("scores contain NaN".into()));
    }
    Ok(())
}

/// AUROC with the high-score class as positive (`labels[i] == 1`).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    check_finite(scores)?;
    let (n_pos, n_neg) = check_binary(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    // Doubled midranks keep everything in integers: a tie group spanning
    // 1-based positions i+1..=j has midrank (i+1+j)/2, doubled (i+1+j).
    let mut pos_double_rank_sum: u64 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let double_rank = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                pos_double_rank_sum += double_rank;
            }
        }
        i = j;
    }
    let u2 = pos_double_rank_sum - (n_pos as u64) * (n_pos as u64 + 1);
    Ok(u2 as f64 / (2 * n_pos as u64 * n_neg as u64) as f64)
}

/// Average precision with the high-score class as positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    check_finite(scores)?;
    let (n_pos, _) = check_binary(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&idx| labels[idx] == 1).count();
        tp += group_pos;
        fp += (j - i) - group_pos;
        if group_pos > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (group_pos as f64 / n_pos as f64) * precision;
        }
        i = j;
    }
    Ok(ap)
}

/// Bundles AUROC / AUPR-Out / AUPR-In for one task.
///
/// `labels[i] == 1` marks the "out" class (upstream error or OOD point)
/// and scores must already be oriented so that higher means more likely
/// out. AUPR-In is computed on negated scores with the in class as
/// positive.
pub fn evaluate_task(
    scores: &[f64],
    labels: &[u8],
    method: impl Into<String>,
    task: impl Into<String>,
) -> Result<EvalReport> {
    let (n_pos, n_neg) = check_binary(labels)?;
    let auroc = auroc(scores, labels)?;
    let aupr_out = average_precision(scores, labels)?;
    let neg_scores: Vec<f64> = scores.iter().map(|s| -s).collect();
    let in_labels: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
    let aupr_in = average_precision(&neg_scores, &in_labels)?;
    Ok(EvalReport {
        task: task.into(),
        method: method.into(),
        auroc,
        aupr_out,
        aupr_in,
        n_pos,
        n_neg,
    })
}

/// Writes reports as CSV: `task,method,auroc,aupr_out,aupr_in,n_pos,n_neg`.
pub fn write_report_csv(reports: &[EvalReport], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "task,method,auroc,aupr_out,aupr_in,n_pos,n_neg")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.task, r.method, r.auroc, r.aupr_out, r.aupr_in, r.n_pos, r.n_neg
        )?;
    }
    Ok(())
}

/// Human-readable aligned table (printed to stdout by the CLI).
pub fn format_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let task_w = reports.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
    let method_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    out.push_str(&format!(
        "{:<task_w$}  {:<method_w$}  {:>7}  {:>8}  {:>8}  {:>7}  {:>7}\n",
        "task", "method", "AUROC", "AUPR-Out", "AUPR-In", "n_pos", "n_neg"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<task_w$}  {:<method_w$}  {:>7.4}  {:>8.4}  {:>8.4}  {:>7}  {:>7}\n",
            r.task, r.method, r.auroc, r.aupr_out, r.aupr_in, r.n_pos, r.n_neg
        ));
    }
    out
}
