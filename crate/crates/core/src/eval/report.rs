use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::accuracy::{AccuracyReport, InterventionTable};
use super::chair::ChairScores;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scoring::Heatmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

/// Anything the toolkit can emit as a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    /// One accuracy row per named split or method.
    Accuracy { rows: Vec<(String, AccuracyReport)> },
    Intervention(InterventionTable),
    Chair(ChairScores),
    Heatmap(Heatmap),
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:+.3}"))
}

fn ratio(v: f64) -> String {
    format!("{v:.6}")
}

impl Report {
    fn csv(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Accuracy { rows } => {
                out.push_str("split,acc_yes,acc_no,acc\n");
                for (name, r) in rows {
                    out.push_str(&format!(
                        "{name},{},{},{}\n",
                        pct(r.acc_yes),
                        pct(r.acc_no),
                        pct(Some(r.acc))
                    ));
                }
            }
            Report::Intervention(t) => {
                out.push_str("condition,acc_yes,acc_no,acc,delta_yes,delta_no,delta_acc\n");
                for r in &t.rows {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        r.condition,
                        pct(r.report.acc_yes),
                        pct(r.report.acc_no),
                        pct(Some(r.report.acc)),
                        signed(r.delta_yes),
                        signed(r.delta_no),
                        signed(Some(r.delta_acc))
                    ));
                }
            }
            Report::Chair(c) => {
                out.push_str(
                    "hallucinated_objects,total_objects,hallucinated_sentences,total_sentences,\
                     object_ratio,sentence_ratio,swapped_c_s,swapped_c_i,conventional_chair_s,\
                     conventional_chair_i\n",
                );
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    c.hallucinated_objects,
                    c.total_objects,
                    c.hallucinated_sentences,
                    c.total_sentences,
                    ratio(c.object_ratio),
                    ratio(c.sentence_ratio),
                    ratio(c.swapped_labels.c_s),
                    ratio(c.swapped_labels.c_i),
                    ratio(c.conventional_labels.c_s),
                    ratio(c.conventional_labels.c_i),
                ));
            }
            Report::Heatmap(h) => out = h.to_csv(),
        }
        out
    }

    fn markdown(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Accuracy { rows } => {
                out.push_str("| Method | Acc_yes | Acc_no | Acc |\n|---|---|---|---|\n");
                for (name, r) in rows {
                    out.push_str(&format!(
                        "| {name} | {} | {} | {} |\n",
                        pct(r.acc_yes),
                        pct(r.acc_no),
                        pct(Some(r.acc))
                    ));
                }
            }
            Report::Intervention(t) => {
                out.push_str(
                    "| Condition | Acc_yes | Acc_no | Acc | ΔAcc_yes | ΔAcc_no | ΔAcc |\n\
                     |---|---|---|---|---|---|---|\n",
                );
                for r in &t.rows {
                    out.push_str(&format!(
                        "| {} | {} | {} | {} | {} | {} | {} |\n",
                        r.condition,
                        pct(r.report.acc_yes),
                        pct(r.report.acc_no),
                        pct(Some(r.report.acc)),
                        signed(r.delta_yes),
                        signed(r.delta_no),
                        signed(Some(r.delta_acc))
                    ));
                }
            }
            Report::Chair(c) => {
                out.push_str("| Labels | C_s | C_i |\n|---|---|---|\n");
                out.push_str(&format!(
                    "| swapped | {} | {} |\n| conventional | {} | {} |\n",
                    ratio(c.swapped_labels.c_s),
                    ratio(c.swapped_labels.c_i),
                    ratio(c.conventional_labels.c_s),
                    ratio(c.conventional_labels.c_i)
                ));
            }
            Report::Heatmap(h) => {
                out.push_str("| Layer | Rank | Score |\n|---|---|---|\n");
                for (layer, row) in h.rows.iter().enumerate() {
                    for (rank, s) in row.iter().enumerate() {
                        out.push_str(&format!("| {layer} | {rank} | {s} |\n"));
                    }
                }
            }
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Csv => self.csv(),
            ReportFormat::Markdown => self.markdown(),
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self)
                    .map_err(|e| Error::json("<report>", e))?;
                s.push('\n');
                s
            }
        })
    }
}

pub fn emit_report(report: &Report, destination: &Path, format: ReportFormat) -> Result<()> {
    fsutil::write_file_atomic(destination, report.render(format)?.as_bytes())
}
