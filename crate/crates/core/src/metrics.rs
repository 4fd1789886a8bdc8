//! Span-level micro F1 and aggregation over runs.
//!
//! A predicted span counts as correct only when its class, start and end all
//! match a gold span. Rates with a zero denominator are 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{spans_from_tags, to_spans, TagLabel, TaggedSentence};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{gold} gold sentences but {pred} predictions")]
    SentenceCount { gold: usize, pred: usize },
    #[error("sentence {sentence}: {gold} gold tokens but {pred} predicted tags")]
    TokenCount {
        sentence: usize,
        gold: usize,
        pred: usize,
    },
    #[error("cannot aggregate zero reports")]
    NoReports,
    #[error("report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Span counts and the rates derived from them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

impl Score {
    pub fn from_counts(gold: usize, pred: usize, correct: usize) -> Self {
        let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = rate(correct, pred);
        let recall = rate(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            gold,
            pred,
            correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub micro: Score,
    pub per_class: BTreeMap<String, Score>,
}

/// Scores predicted tag sequences against gold sentences.
pub fn span_micro_f1(
    gold: &[TaggedSentence],
    pred: &[Vec<TagLabel>],
) -> Result<EvalReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::SentenceCount {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    // class -> (gold, pred, correct)
    let mut tally: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (sentence, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(MetricsError::TokenCount {
                sentence,
                gold: g.len(),
                pred: p.len(),
            });
        }
        let gold_spans: BTreeSet<_> = to_spans(g).into_iter().collect();
        for span in &gold_spans {
            tally.entry(span.class.clone()).or_default().0 += 1;
        }
        for span in spans_from_tags(p) {
            let entry = tally.entry(span.class.clone()).or_default();
            entry.1 += 1;
            if gold_spans.contains(&span) {
                entry.2 += 1;
            }
        }
    }
    let per_class: BTreeMap<String, Score> = tally
        .into_iter()
        .map(|(class, (g, p, c))| (class, Score::from_counts(g, p, c)))
        .collect();
    let (g, p, c) = per_class.values().fold((0, 0, 0), |acc, s| {
        (acc.0 + s.gold, acc.1 + s.pred, acc.2 + s.correct)
    });
    Ok(EvalReport {
        micro: Score::from_counts(g, p, c),
        per_class,
    })
}

/// Mean and sample standard deviation of micro F1 over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub runs: Vec<EvalReport>,
}

pub fn aggregate(reports: Vec<EvalReport>) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let f1: Vec<f64> = reports.iter().map(|r| r.micro.f1).collect();
    let n = f1.len() as f64;
    let mean = f1.iter().sum::<f64>() / n;
    let std = if f1.len() < 2 {
        0.0
    } else {
        (f1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(AggregateReport {
        mean_f1: mean,
        std_f1: std,
        runs: reports,
    })
}

impl AggregateReport {
    /// Machine-readable `key=value` form.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "runs={}", self.runs.len()).unwrap();
        writeln!(out, "mean_f1={}", self.mean_f1).unwrap();
        writeln!(out, "std_f1={}", self.std_f1).unwrap();
        for (i, run) in self.runs.iter().enumerate() {
            write_score(&mut out, &format!("run.{i}.micro"), &run.micro);
            for (class, score) in &run.per_class {
                write_score(&mut out, &format!("run.{i}.class.{class}"), score);
            }
        }
        out
    }

    /// Reads `runs`, `mean_f1` and `std_f1` back from
    /// [`AggregateReport::to_key_values`] output.
    pub fn summary_from_key_values(text: &str) -> Result<(usize, f64, f64), MetricsError> {
        let mut runs = None;
        let mut mean = None;
        let mut std = None;
        for (idx, line) in text.lines().enumerate() {
            let bad = |reason: &str| MetricsError::Parse {
                line: idx + 1,
                reason: reason.into(),
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "runs" => runs = Some(v.parse().map_err(|_| bad("bad run count"))?),
                "mean_f1" => mean = Some(v.parse().map_err(|_| bad("bad mean"))?),
                "std_f1" => std = Some(v.parse().map_err(|_| bad("bad std"))?),
                _ => {}
            }
        }
        match (runs, mean, std) {
            (Some(r), Some(m), Some(s)) => Ok((r, m, s)),
            _ => Err(MetricsError::Parse {
                line: 0,
                reason: "missing runs, mean_f1 or std_f1".into(),
            }),
        }
    }
}

fn write_score(out: &mut String, prefix: &str, s: &Score) {
    writeln!(out, "{prefix}.precision={}", s.precision).unwrap();
    writeln!(out, "{prefix}.recall={}", s.recall).unwrap();
    writeln!(out, "{prefix}.f1={}", s.f1).unwrap();
    writeln!(out, "{prefix}.gold={}", s.gold).unwrap();
    writeln!(out, "{prefix}.pred={}", s.pred).unwrap();
    writeln!(out, "{prefix}.correct={}", s.correct).unwrap();
}

/// Text table with one `mean±std` cell (F1 in percent) per condition.
pub fn render_table(rows: &[(String, &AggregateReport)]) -> String {
    let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>12}  {:>4}", "condition", "F1", "runs").unwrap();
    for (name, report) in rows {
        let cell = format!("{:.1}±{:.1}", 100.0 * report.mean_f1, 100.0 * report.std_f1);
        writeln!(out, "{name:<width$}  {cell:>12}  {:>4}", report.runs.len()).unwrap();
    }
    out
}

/// Per-class breakdown of one report.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<16} {:>9} {:>9} {:>9} {:>6} {:>6} {:>7}",
        "class", "precision", "recall", "f1", "gold", "pred", "correct"
    )
    .unwrap();
    let mut line = |name: &str, s: &Score| {
        writeln!(
            out,
            "{name:<16} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>7}",
            s.precision, s.recall, s.f1, s.gold, s.pred, s.correct
        )
        .unwrap();
    };
    for (class, s) in &report.per_class {
        line(class, s);
    }
    line("micro", &report.micro);
    out
}
