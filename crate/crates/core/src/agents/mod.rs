//! The global and local feature reasoning agents: prompts, SQL extraction,
//! guarding of every emitted query, and the pluggable generation backend.

mod backend;
mod prompt;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::ResultTable;
use crate::guard::{validate_pipeline, GuardRejection, GuardStage, SourceAgent, ValidatedQuery};
use crate::sql::{Expr, SelectItem};
use crate::store::{Level, SchemaManifest};

pub use backend::{
    AgentTask, BackendError, CompletionRequest, LlmBackend, RemoteBackend, ScriptedBackend, TemplateBackend,
    ENV_API_KEY, ENV_BASE_URL, ENV_MODEL,
};
pub use prompt::{data_dictionary, range_prompts, PROMPT_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub case_id: String,
    pub prompt_text: String,
    pub options: Vec<String>,
}

impl Question {
    pub fn validate(&self) -> Result<(), String> {
        if self.options.len() < 2 {
            return Err(format!("question for {} needs at least two options", self.case_id));
        }
        for (i, o) in self.options.iter().enumerate() {
            if o.is_empty() {
                return Err("empty option label".into());
            }
            if self.options[..i].contains(o) {
                return Err(format!("duplicate option {o:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFeature {
    pub table: String,
    pub column: String,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPlan {
    pub target_features: Vec<TargetFeature>,
    pub focus: AgentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exchange {
    pub prompt_sent: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GuardOutcome {
    Validated(ValidatedQuery),
    Rejected(GuardRejection),
}

/// Append-only record of one agent stage. `extracted_queries[i]` was
/// guarded into `guard_outcomes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentTranscript {
    pub agent: AgentKind,
    pub backend: String,
    pub prompt_version: String,
    pub exchanges: Vec<Exchange>,
    pub extracted_queries: Vec<String>,
    pub guard_outcomes: Vec<GuardOutcome>,
    pub notes: Vec<String>,
}

impl AgentTranscript {
    fn new(agent: AgentKind, backend: &dyn LlmBackend) -> Self {
        AgentTranscript {
            agent,
            backend: backend.name().to_owned(),
            prompt_version: PROMPT_VERSION.to_owned(),
            exchanges: Vec::new(),
            extracted_queries: Vec::new(),
            guard_outcomes: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn validated(&self) -> impl Iterator<Item = &ValidatedQuery> {
        self.guard_outcomes.iter().filter_map(|o| match o {
            GuardOutcome::Validated(v) => Some(v),
            GuardOutcome::Rejected(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{agent:?} agent produced no plan or SQL after {attempts} attempts")]
    EmptyGeneration { agent: AgentKind, attempts: usize },
    #[error("manifest has no global-level table")]
    NoGlobalTable,
    #[error("local agent needs a global plan")]
    PlanNotGlobal,
}

/// Every fenced block tagged `sql`, or untagged with a SELECT head, in
/// document order.
pub fn extract_sql(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut lines = raw.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let tag = info.trim().to_ascii_lowercase();
        let mut body = Vec::new();
        for inner in lines.by_ref() {
            if inner.trim_start().starts_with("```") {
                break;
            }
            body.push(inner);
        }
        let text = body.join("\n").trim().to_owned();
        let head_select = text
            .split(|c: char| !c.is_ascii_alphabetic())
            .next()
            .is_some_and(|w| w.eq_ignore_ascii_case("select"));
        if (tag == "sql" || (tag.is_empty() && head_select)) && !text.is_empty() {
            out.push(text);
        }
    }
    out
}

/// The first fenced JSON block carrying `target_features`.
fn extract_plan(raw: &str) -> Option<Vec<TargetFeature>> {
    #[derive(Deserialize)]
    struct Wire {
        target_features: Vec<TargetFeature>,
    }
    let mut lines = raw.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let mut body = Vec::new();
        for inner in lines.by_ref() {
            if inner.trim_start().starts_with("```") {
                break;
            }
            body.push(inner);
        }
        if info.trim().eq_ignore_ascii_case("json") {
            if let Ok(w) = serde_json::from_str::<Wire>(&body.join("\n")) {
                return Some(w.target_features);
            }
        }
    }
    None
}

struct Stage<'a> {
    agent: AgentKind,
    task: AgentTask,
    manifest: &'a SchemaManifest,
    backend: &'a dyn LlmBackend,
    settings: &'a AgentSettings,
    levels: &'a [Level],
}

struct StageResult {
    raw_queries: Vec<String>,
    plan: Option<Vec<TargetFeature>>,
    transcript: AgentTranscript,
}

impl Stage<'_> {
    /// Generates, extracts and guards, regenerating while nothing usable
    /// came back and retries remain.
    fn run(&self, system: &str, user: &str) -> Result<StageResult, AgentError> {
        let mut transcript = AgentTranscript::new(self.agent, self.backend);
        let mut raw_queries = Vec::new();
        let mut plan = None;
        let mut user_prompt = user.to_owned();
        let attempts = self.settings.max_retries + 1;
        for attempt in 1..=attempts {
            let request = CompletionRequest {
                system,
                user: &user_prompt,
                temperature: self.settings.temperature,
                timeout: self.settings.timeout,
                task: self.task,
            };
            let response = self.backend.complete(&request)?;
            transcript.exchanges.push(Exchange {
                prompt_sent: format!("{system}\n\n{user_prompt}"),
                raw_response: response.clone(),
            });
            if self.agent == AgentKind::Global && plan.is_none() {
                plan = extract_plan(&response);
            }
            let queries = extract_sql(&response);
            let mut reasons = Vec::new();
            let mut usable = false;
            for q in queries {
                let outcome = self.guard(&q);
                match &outcome {
                    GuardOutcome::Validated(_) => usable = true,
                    GuardOutcome::Rejected(r) => reasons.push(r.reason.clone()),
                }
                transcript.extracted_queries.push(q.clone());
                transcript.guard_outcomes.push(outcome);
                raw_queries.push(q);
            }
            if usable {
                break;
            }
            if raw_queries.is_empty() && plan.is_none() {
                reasons.push("no fenced SQL block found".into());
            }
            if attempt < attempts {
                user_prompt = format!("{user}{}", prompt::retry_note(attempt, &reasons));
            }
        }
        if raw_queries.is_empty() && plan.is_none() {
            return Err(AgentError::EmptyGeneration {
                agent: self.agent,
                attempts,
            });
        }
        Ok(StageResult {
            raw_queries,
            plan,
            transcript,
        })
    }

    fn guard(&self, raw: &str) -> GuardOutcome {
        let source = match self.agent {
            AgentKind::Global => SourceAgent::Global,
            AgentKind::Local => SourceAgent::Local,
        };
        match validate_pipeline(raw, self.manifest, source) {
            Ok(vq) => {
                let level = self.manifest.table(vq.table()).map(|t| t.level);
                if level.is_some_and(|l| self.levels.contains(&l)) {
                    GuardOutcome::Validated(vq)
                } else {
                    GuardOutcome::Rejected(GuardRejection::new(
                        GuardStage::Schema,
                        format!("table {} is outside the {:?} agent's level", vq.table(), self.agent),
                        None,
                    ))
                }
            }
            Err(r) => GuardOutcome::Rejected(r),
        }
    }
}

pub fn plan_global(
    question: &Question,
    manifest: &SchemaManifest,
    backend: &dyn LlmBackend,
    settings: &AgentSettings,
) -> Result<(ReasoningPlan, Vec<String>, AgentTranscript), AgentError> {
    if manifest.tables_at(Level::Global).next().is_none() {
        return Err(AgentError::NoGlobalTable);
    }
    let (system, user) = prompt::global_prompts(question, manifest);
    let stage = Stage {
        agent: AgentKind::Global,
        task: AgentTask::GlobalPlan,
        manifest,
        backend,
        settings,
        levels: &[Level::Global],
    };
    let mut result = stage.run(&system, &user)?;
    let features = match result.plan.take() {
        Some(features) => {
            let mut kept = Vec::new();
            for f in features {
                let ok = manifest
                    .table(&f.table)
                    .is_some_and(|t| t.level == Level::Global && t.column(&f.column).is_some());
                if ok {
                    kept.push(f);
                } else {
                    result
                        .transcript
                        .notes
                        .push(format!("plan entry {}.{} dropped: not a global feature", f.table, f.column));
                }
            }
            kept
        }
        None => {
            result.transcript.notes.push("no plan block; plan derived from validated queries".into());
            plan_from_queries(result.transcript.validated(), manifest)
        }
    };
    let plan = ReasoningPlan {
        target_features: features,
        focus: AgentKind::Global,
    };
    Ok((plan, result.raw_queries, result.transcript))
}

fn plan_from_queries<'a>(
    queries: impl Iterator<Item = &'a ValidatedQuery>,
    manifest: &SchemaManifest,
) -> Vec<TargetFeature> {
    let mut out: Vec<TargetFeature> = Vec::new();
    let mut push = |table: &str, column: &str| {
        if !out.iter().any(|f| f.table == table && f.column == column) {
            out.push(TargetFeature {
                table: table.to_owned(),
                column: column.to_owned(),
                rationale: "referenced by a global query".into(),
            });
        }
    };
    for q in queries {
        let Some(schema) = manifest.table(q.table()) else { continue };
        for item in &q.ast().projections {
            match item {
                SelectItem::Wildcard => schema.columns.iter().for_each(|c| push(&schema.name, &c.name)),
                SelectItem::Expr { expr, .. } => expr.walk(&mut |e| {
                    if let Expr::Column(c) = e {
                        push(&schema.name, c);
                    }
                }),
            }
        }
    }
    out
}

/// `global_results` pairs query ids with the executed global queries.
pub fn plan_local(
    question: &Question,
    plan: &ReasoningPlan,
    global_results: &[(String, ResultTable)],
    manifest: &SchemaManifest,
    backend: &dyn LlmBackend,
    settings: &AgentSettings,
) -> Result<(Vec<String>, AgentTranscript), AgentError> {
    if plan.focus != AgentKind::Global {
        return Err(AgentError::PlanNotGlobal);
    }
    let (system, user) = prompt::local_prompts(question, plan, global_results, manifest);
    let stage = Stage {
        agent: AgentKind::Local,
        task: AgentTask::LocalQueries,
        manifest,
        backend,
        settings,
        levels: &[Level::LocalCellular, Level::LocalArchitecture],
    };
    let result = stage.run(&system, &user)?;
    Ok((result.raw_queries, result.transcript))
}
