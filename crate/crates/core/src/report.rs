//! The audit report: diagnosis, contributing features, the executed SQL
//! trace and the embedded hypothesis, rendered as canonical JSON or
//! markdown.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Question;
use crate::canonical::{format_real, to_canonical_json};
use crate::fusion::FusedDecision;
use crate::guard::{RepairAction, SourceAgent};
use crate::knowledge::{FitCategory, Hypothesis};
use crate::store::Value;

pub const REPORT_SCHEMA_VERSION: &str = "report-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    SqlOnly,
    CnnOnly,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "full" => Ok(Mode::Full),
            "sql_only" | "sql-only" => Ok(Mode::SqlOnly),
            "cnn_only" | "cnn-only" => Ok(Mode::CnnOnly),
            other => Err(format!("unknown mode {other:?} (full, sql_only, cnn_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributingFeature {
    pub feature_key: String,
    pub observed: Value,
    pub query_id: String,
    pub best_option: String,
    pub fit: FitCategory,
}

/// One executed query. `error` is set, and `rows` empty, when execution
/// failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub query_id: String,
    pub agent: SourceAgent,
    pub canonical_text: String,
    pub repair_log: Vec<RepairAction>,
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: String,
    pub case_id: String,
    pub mode: Mode,
    pub question: Question,
    pub diagnosis: Diagnosis,
    pub decision: FusedDecision,
    pub hypothesis: Option<Hypothesis>,
    pub contributing_features: Vec<ContributingFeature>,
    pub sql_trace: Vec<TraceEntry>,
    pub transcripts_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("finding {feature_key} references query {query_id}, which is not in the trace")]
    DanglingQueryId { feature_key: String, query_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl AuditReport {
    /// Assembles a report and checks that every finding points into the
    /// trace.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        question: &Question,
        mode: Mode,
        decision: FusedDecision,
        hypothesis: Option<Hypothesis>,
        sql_trace: Vec<TraceEntry>,
        transcripts_ref: String,
        ground_truth: Option<String>,
    ) -> Result<AuditReport, ReportError> {
        let mut contributing = Vec::new();
        if let Some(h) = &hypothesis {
            for f in &h.findings {
                if !sql_trace.iter().any(|t| t.query_id == f.query_id) {
                    return Err(ReportError::DanglingQueryId {
                        feature_key: f.feature_key.clone(),
                        query_id: f.query_id.clone(),
                    });
                }
                if let Some((best, fit)) = f.best_option(&question.options) {
                    contributing.push(ContributingFeature {
                        feature_key: f.feature_key.clone(),
                        observed: f.observed.clone(),
                        query_id: f.query_id.clone(),
                        best_option: best.to_owned(),
                        fit,
                    });
                }
            }
        }
        Ok(AuditReport {
            schema_version: REPORT_SCHEMA_VERSION.to_owned(),
            case_id: question.case_id.clone(),
            mode,
            question: question.clone(),
            diagnosis: Diagnosis {
                label: decision.label.clone(),
                confidence: decision.confidence(),
            },
            decision,
            hypothesis,
            contributing_features: contributing,
            sql_trace,
            transcripts_ref,
            ground_truth,
            narrative: None,
        })
    }

    /// Every finding and contributing feature resolves to a trace entry.
    pub fn check_closure(&self) -> Result<(), ReportError> {
        let refs = self
            .hypothesis
            .iter()
            .flat_map(|h| h.findings.iter().map(|f| (&f.feature_key, &f.query_id)))
            .chain(self.contributing_features.iter().map(|c| (&c.feature_key, &c.query_id)));
        for (feature_key, query_id) in refs {
            if !self.sql_trace.iter().any(|t| &t.query_id == query_id) {
                return Err(ReportError::DanglingQueryId {
                    feature_key: feature_key.clone(),
                    query_id: query_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.ground_truth.as_ref().map(|g| *g == self.diagnosis.label)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, ReportError> {
        self.check_closure()?;
        Ok(match format {
            ReportFormat::Json => to_canonical_json(self).expect("report serializes"),
            ReportFormat::Markdown => self.markdown(),
        })
    }

    fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Case {}\n", self.case_id);
        let _ = writeln!(s, "{}\n", self.question.prompt_text);
        let _ = writeln!(
            s,
            "**Diagnosis:** {} (confidence {})  \n**Mode:** {:?}",
            self.diagnosis.label,
            format_real(self.diagnosis.confidence),
            self.mode
        );
        if self.mode == Mode::Full {
            let _ = writeln!(
                s,
                "**Branches:** CNN {}, SQL {}; alpha {}{}",
                self.decision.branch_labels.cnn,
                self.decision.branch_labels.sql,
                format_real(self.decision.alpha),
                if self.decision.review_flag { "; **flagged for review**" } else { "" }
            );
        }
        if let Some(g) = &self.ground_truth {
            let _ = writeln!(s, "**Ground truth:** {g}");
        }
        s.push_str("\n## Options\n\n| option | fused | SQL confidence |\n|---|---|---|\n");
        for o in &self.question.options {
            let sql = self
                .hypothesis
                .as_ref()
                .and_then(|h| h.confidence(o))
                .map_or_else(|| "-".to_owned(), format_real);
            let _ = writeln!(s, "| {o} | {} | {sql} |", format_real(self.decision.fused[o]));
        }
        if !self.contributing_features.is_empty() {
            s.push_str("\n## Contributing features\n\n| feature | observed | best option | fit | query |\n|---|---|---|---|---|\n");
            for c in &self.contributing_features {
                let observed = c.observed.as_f64().map_or_else(|| c.observed.to_string(), format_real);
                let _ = writeln!(
                    s,
                    "| {} | {observed} | {} | {:?} | {} |",
                    c.feature_key, c.best_option, c.fit, c.query_id
                );
            }
        }
        if let Some(h) = &self.hypothesis {
            if !h.data_quality_notes.is_empty() {
                s.push_str("\n## Data quality\n\n");
                for n in &h.data_quality_notes {
                    let _ = writeln!(s, "- {n}");
                }
            }
        }
        if !self.sql_trace.is_empty() {
            s.push_str("\n## SQL trace\n");
            for t in &self.sql_trace {
                let _ = writeln!(s, "\n### {} ({:?})\n\n```sql\n{}\n```", t.query_id, t.agent, t.canonical_text);
                for r in &t.repair_log {
                    let _ = writeln!(
                        s,
                        "- repair {:?}: `{}` -> `{}` (distance {})",
                        r.kind, r.before, r.after, r.edit_distance
                    );
                }
                match &t.error {
                    Some(e) => {
                        let _ = writeln!(s, "\nerror: {e}");
                    }
                    None => {
                        let _ = writeln!(s, "\n| {} |", t.column_names.join(" | "));
                        let _ = writeln!(s, "|{}", "---|".repeat(t.column_names.len()));
                        for row in &t.rows {
                            let cells: Vec<String> = row
                                .iter()
                                .map(|v| match v {
                                    Value::Real(r) => format_real(*r),
                                    other => other.to_string(),
                                })
                                .collect();
                            let _ = writeln!(s, "| {} |", cells.join(" | "));
                        }
                    }
                }
            }
        }
        if let Some(n) = &self.narrative {
            let _ = writeln!(s, "\n## Generated narrative\n\n{n}");
        }
        s
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
