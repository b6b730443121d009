//! Three-stage guard for agent-emitted SQL: sanitization of the raw text,
//! parsing plus schema checking, and bounded automatic repair.
//!
//! The only way to obtain a [`ValidatedQuery`] is through this module, and
//! the executor accepts nothing else.

mod repair;
mod sanitize;
mod schema;

use serde::{Deserialize, Serialize};

use crate::sql::{render, Query};
use crate::store::SchemaManifest;

pub use repair::{edit_distance, nearest_unique, repair, MAX_EDIT_DISTANCE, MAX_REPAIR_PASSES};
pub use sanitize::sanitize;
pub use schema::{check_schema, output_types, SchemaViolation, SqlType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceAgent {
    Global,
    Local,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    KeywordFix,
    IdentifierFix,
    QuoteFix,
    ClauseDrop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAction {
    pub kind: RepairKind,
    pub before: String,
    pub after: String,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardStage {
    Sanitize,
    Parse,
    Schema,
    RepairExhausted,
}

/// Structured refusal, returned to the agent layer rather than raised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardRejection {
    pub stage: GuardStage,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl GuardRejection {
    pub fn new(stage: GuardStage, reason: impl Into<String>, position: Option<usize>) -> Self {
        GuardRejection {
            stage,
            reason: reason.into(),
            position,
            details: Vec::new(),
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }
}

impl std::fmt::Display for GuardRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.stage, self.reason)
    }
}

/// A query that passed every guard stage against a particular manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedQuery {
    #[serde(skip)]
    ast: Query,
    canonical_text: String,
    repair_log: Vec<RepairAction>,
    source_agent: SourceAgent,
}

impl ValidatedQuery {
    fn new(ast: Query, repair_log: Vec<RepairAction>, source_agent: SourceAgent) -> Self {
        ValidatedQuery {
            canonical_text: render(&ast),
            ast,
            repair_log,
            source_agent,
        }
    }

    pub fn ast(&self) -> &Query {
        &self.ast
    }

    pub fn canonical_text(&self) -> &str {
        &self.canonical_text
    }

    pub fn repair_log(&self) -> &[RepairAction] {
        &self.repair_log
    }

    pub fn source_agent(&self) -> SourceAgent {
        self.source_agent
    }

    pub fn table(&self) -> &str {
        &self.ast.from
    }
}

/// sanitize → parse → schema check → repair.
pub fn validate_pipeline(
    text: &str,
    manifest: &SchemaManifest,
    source: SourceAgent,
) -> Result<ValidatedQuery, GuardRejection> {
    let sanitized = sanitize(text)?;
    repair(&sanitized, manifest, source)
}
