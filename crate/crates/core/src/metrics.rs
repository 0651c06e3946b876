//! Contains-the-answer accuracy and table-shaped reports.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("sample has no ground-truth answers")]
    EmptyAnswerList,
}

/// Case-fold, trim, collapse whitespace runs, and drop any space that
/// touches a non-alphanumeric character (`"$ 5.00"` and `"$5.00"` compare
/// equal, `"stop sign"` keeps its space).
pub fn normalize(text: &str) -> String {
    let collapsed = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = collapsed.chars().collect();
    let mut out = String::with_capacity(collapsed.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ' ' {
            let before = chars[i - 1];
            let after = chars[i + 1];
            if !before.is_alphanumeric() || !after.is_alphanumeric() {
                continue;
            }
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sample_id: String,
    pub correct: bool,
    pub matched_answer: Option<String>,
    pub final_answer: String,
}

/// A response is correct when it contains any ground-truth answer after
/// normalization of both sides. The first matching answer is reported.
pub fn contains_correct(
    sample_id: &str,
    response: &str,
    answers: &[String],
) -> Result<EvalResult, MetricsError> {
    if answers.is_empty() {
        return Err(MetricsError::EmptyAnswerList);
    }
    let haystack = normalize(response);
    let matched_answer = answers
        .iter()
        .find(|a| {
            let needle = normalize(a);
            !needle.is_empty() && haystack.contains(&needle)
        })
        .cloned();
    Ok(EvalResult {
        sample_id: sample_id.to_string(),
        correct: matched_answer.is_some(),
        matched_answer,
        final_answer: response.to_string(),
    })
}

/// Accuracy in hundredths of a percent, so 46.00% is `Percent(4600)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Percent(pub u32);

impl Percent {
    /// `100 * correct / total`, rounded half-up to two decimals.
    pub fn from_counts(correct: u64, total: u64) -> Self {
        assert!(total > 0 && correct <= total);
        Percent(((20_000 * correct + total) / (2 * total)) as u32)
    }

    /// Arithmetic mean, rounded half-up to two decimals.
    pub fn mean(values: &[Percent]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as u64;
        let sum: u64 = values.iter().map(|p| p.0 as u64).sum();
        Some(Percent(((2 * sum + n) / (2 * n)) as u32))
    }

    pub fn as_f64(&self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

/// One scored sample tagged with the row and column it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledResult {
    pub strategy: String,
    pub dataset: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: u64,
    pub total: u64,
    pub accuracy: Percent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub cells: Vec<Option<Cell>>,
    pub average: Option<Percent>,
}

impl ReportRow {
    pub fn cell(&self, report: &Report, dataset: &str) -> Option<&Cell> {
        let idx = report.datasets.iter().position(|d| d == dataset)?;
        self.cells[idx].as_ref()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        if !out.iter().any(|o| o == item) {
            out.push(item.to_string());
        }
    }
    out
}

/// Build a strategies-by-datasets table. Rows and columns keep the order in
/// which they first appear; the average is the mean of the row's dataset
/// accuracies.
pub fn aggregate(results: &[LabeledResult]) -> Report {
    let strategies = first_seen(results.iter().map(|r| r.strategy.as_str()));
    let datasets = first_seen(results.iter().map(|r| r.dataset.as_str()));
    let mut warnings = Vec::new();
    let rows = strategies
        .iter()
        .map(|strategy| {
            let cells: Vec<Option<Cell>> = datasets
                .iter()
                .map(|dataset| {
                    let (correct, total) = results
                        .iter()
                        .filter(|r| &r.strategy == strategy && &r.dataset == dataset)
                        .fold((0u64, 0u64), |(c, t), r| (c + r.result.correct as u64, t + 1));
                    if total == 0 {
                        warnings.push(format!(
                            "no results for strategy '{strategy}' on dataset '{dataset}'; cell omitted"
                        ));
                        log::warn!("empty group {strategy}/{dataset}");
                        None
                    } else {
                        Some(Cell {
                            correct,
                            total,
                            accuracy: Percent::from_counts(correct, total),
                        })
                    }
                })
                .collect();
            let present: Vec<Percent> = cells.iter().flatten().map(|c| c.accuracy).collect();
            ReportRow {
                strategy: strategy.clone(),
                average: Percent::mean(&present),
                cells,
            }
        })
        .collect();
    Report {
        datasets,
        rows,
        warnings,
    }
}

impl Report {
    pub fn row(&self, strategy: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Strategy |");
        for d in &self.datasets {
            out.push_str(&format!(" {d} |"));
        }
        out.push_str(" Average |\n|---|");
        for _ in &self.datasets {
            out.push_str("---:|");
        }
        out.push_str("---:|\n");
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.strategy));
            for cell in &row.cells {
                match cell {
                    Some(c) => out.push_str(&format!(" {} |", c.accuracy)),
                    None => out.push_str(" - |"),
                }
            }
            match row.average {
                Some(a) => out.push_str(&format!(" {a} |\n")),
                None => out.push_str(" - |\n"),
            }
        }
        for w in &self.warnings {
            out.push_str(&format!("\n> warning: {w}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.push("average".into());
        writer.write_record(&header).expect("in-memory csv");
        for row in &self.rows {
            let mut record = vec![row.strategy.clone()];
            record.extend(
                row.cells
                    .iter()
                    .map(|c| c.as_ref().map(|c| c.accuracy.to_string()).unwrap_or_default()),
            );
            record.push(row.average.map(|a| a.to_string()).unwrap_or_default());
            writer.write_record(&record).expect("in-memory csv");
        }
        String::from_utf8(writer.into_inner().expect("flush")).expect("utf8")
    }
}
