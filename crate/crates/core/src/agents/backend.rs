use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::store::{Dtype, Level, SchemaManifest};

pub const ENV_API_KEY: &str = "EVIDENCESQL_LLM_API_KEY";
pub const ENV_BASE_URL: &str = "EVIDENCESQL_LLM_BASE_URL";
pub const ENV_MODEL: &str = "EVIDENCESQL_LLM_MODEL";

/// What a completion is for. Prompt text is authoritative for remote
/// models; the template backend dispatches on this tag instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentTask {
    GlobalPlan,
    LocalQueries,
    ReferenceRange,
    Narrative,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub temperature: f64,
    pub timeout: Duration,
    pub task: AgentTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint returned HTTP {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend does not support {0}")]
    Declined(&'static str),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Text-generation port. Implementations return text or a typed error and
/// never block past the request timeout.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError>;

    /// Whether numeric reference ranges may be requested.
    fn generates_ranges(&self) -> bool {
        true
    }

    /// Whether a free-text report narrative may be requested.
    fn generates_narrative(&self) -> bool {
        false
    }
}

/// Deterministic offline stand-in. The global stage reads every
/// global-level table whole; the local stage issues per-type counts, means
/// of each real cellular column over the first type in the domain, and
/// summary statistics of each real architecture column.
#[derive(Debug, Clone)]
pub struct TemplateBackend {
    manifest: SchemaManifest,
}

impl TemplateBackend {
    pub fn new(manifest: SchemaManifest) -> Self {
        TemplateBackend { manifest }
    }

    pub fn global_response(&self) -> String {
        let mut features = Vec::new();
        let mut sql = String::new();
        for table in self.manifest.tables_at(Level::Global) {
            for c in &table.columns {
                features.push(serde_json::json!({
                    "table": table.name,
                    "column": c.name,
                    "rationale": format!("whole-patch {} summary", c.name),
                }));
            }
            sql.push_str(&format!("```sql\nSELECT * FROM {}\n```\n", table.name));
        }
        let plan = serde_json::json!({ "target_features": features });
        format!("Plan:\n```json\n{plan}\n```\nQueries:\n{sql}")
    }

    pub fn local_queries(&self) -> Vec<String> {
        let mut out = Vec::new();
        let cellular: Vec<_> = self.manifest.tables_at(Level::LocalCellular).collect();
        let typed = cellular.iter().find_map(|t| {
            t.columns
                .iter()
                .find(|c| c.categorical_domain.as_ref().is_some_and(|d| !d.is_empty()))
                .map(|c| (*t, c))
        });
        if let Some((table, type_col)) = typed {
            out.push(format!(
                "SELECT {col}, COUNT(*) AS n FROM {t} GROUP BY {col}",
                col = type_col.name,
                t = table.name
            ));
            let first = &type_col.categorical_domain.as_ref().unwrap()[0];
            let means: Vec<String> = table
                .columns
                .iter()
                .filter(|c| c.dtype == Dtype::Real)
                .map(|c| format!("AVG({c}) AS {first}_mean_{c}", c = c.name))
                .collect();
            if !means.is_empty() {
                out.push(format!(
                    "SELECT {} FROM {} WHERE {} = '{}'",
                    means.join(", "),
                    table.name,
                    type_col.name,
                    first.replace('\'', "''")
                ));
            }
        }
        if let Some(table) = self.manifest.tables_at(Level::LocalArchitecture).next() {
            let mut items = vec![format!("COUNT(*) AS {}_count", table.name)];
            for c in table.columns.iter().filter(|c| c.dtype == Dtype::Real) {
                items.push(format!("AVG({c}) AS {t}_mean_{c}", c = c.name, t = table.name));
                items.push(format!("STDDEV({c}) AS {t}_sd_{c}", c = c.name, t = table.name));
            }
            out.push(format!("SELECT {} FROM {}", items.join(", "), table.name));
        }
        out
    }
}

impl LlmBackend for TemplateBackend {
    fn name(&self) -> &str {
        "template"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        match request.task {
            AgentTask::GlobalPlan => Ok(self.global_response()),
            AgentTask::LocalQueries => Ok(self
                .local_queries()
                .iter()
                .map(|q| format!("```sql\n{q}\n```\n"))
                .collect()),
            AgentTask::ReferenceRange => Err(BackendError::Declined("reference range generation")),
            AgentTask::Narrative => Err(BackendError::Declined("narrative generation")),
        }
    }

    fn generates_ranges(&self) -> bool {
        false
    }
}

/// Replays canned responses in order, then returns empty text. Every
/// request is recorded for inspection.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<Result<String, BackendError>>>,
    seen: Mutex<Vec<(AgentTask, String, String)>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(responses.into_iter().map(|s| Ok(s.into())))
    }

    pub fn with_results(responses: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        ScriptedBackend {
            responses: Mutex::new(responses.into_iter().collect()),
            seen: Mutex::default(),
        }
    }

    /// (task, system prompt, user prompt) for every call so far.
    pub fn requests(&self) -> Vec<(AgentTask, String, String)> {
        self.seen.lock().unwrap().clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        self.seen
            .lock()
            .unwrap()
            .push((request.task, request.system.to_owned(), request.user.to_owned()));
        self.responses.lock().unwrap().pop_front().unwrap_or_else(|| Ok(String::new()))
    }
}

/// Chat-completion endpoint (`POST {base_url}/chat/completions`).
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        RemoteBackend {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            model: model.into(),
            api_key,
        }
    }

    /// Reads the endpoint, model and key from the environment. The key is
    /// optional so that unauthenticated local servers work.
    pub fn from_env() -> Result<Self, BackendError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let base = var(ENV_BASE_URL).ok_or_else(|| BackendError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| BackendError::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(RemoteBackend::new(base, model, var(ENV_API_KEY)))
    }
}

impl LlmBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(request.timeout))
            .build()
            .into();
        let mut call = agent
            .post(format!("{}/chat/completions", self.base_url))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let response = call.send(body.to_string()).map_err(|e| match e {
            ureq::Error::StatusCode(code) => BackendError::Status(code),
            ureq::Error::Timeout(_) => BackendError::Timeout(request.timeout),
            other => BackendError::Transport(other.to_string()),
        })?;
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }

    fn generates_narrative(&self) -> bool {
        true
    }
}
