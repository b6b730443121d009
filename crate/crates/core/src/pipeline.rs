//! End-to-end orchestration for one case and for a labelled dataset:
//! agents, guard, execution, knowledge comparison, fusion and report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    plan_global, plan_local, AgentError, AgentSettings, AgentTask, AgentTranscript, CompletionRequest, LlmBackend,
    Question, ReasoningPlan,
};
use crate::canonical::to_canonical_json;
use crate::exec::{execute, ResultTable};
use crate::fusion::{fuse, fuse_cnn_only, fuse_sql_only, CnnOutput, FusionError, DEFAULT_ALPHA};
use crate::guard::ValidatedQuery;
use crate::knowledge::{
    build_hypothesis, calibrate_confidence, fetch_llm_ranges, observations, score_observations, uniform, Hypothesis,
    KnowledgeError, RangeBook,
};
use crate::report::{write_atomic, AuditReport, Mode, ReportError, ReportFormat, TraceEntry};
use crate::store::{ingest_case_dir, CaseBundle, SchemaManifest, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub mode: Mode,
    pub alpha: f64,
    pub agent: AgentSettings,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            mode: Mode::Full,
            alpha: DEFAULT_ALPHA,
            agent: AgentSettings::default(),
        }
    }
}

pub struct PipelineContext<'a> {
    pub manifest: &'a SchemaManifest,
    pub ranges: &'a RangeBook,
    pub backend: &'a dyn LlmBackend,
    pub settings: &'a RunSettings,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Store(_) => "store",
            PipelineError::Agent(_) => "agent",
            PipelineError::Fusion(_) => "fusion",
            PipelineError::Knowledge(_) => "knowledge",
            PipelineError::Report(_) => "report",
            PipelineError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseTranscripts {
    pub case_id: String,
    pub plan: Option<ReasoningPlan>,
    pub global: Option<AgentTranscript>,
    pub local: Option<AgentTranscript>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub report: AuditReport,
    pub transcripts: CaseTranscripts,
}

pub fn transcripts_ref(case_id: &str) -> String {
    format!("transcripts/{case_id}.json")
}

/// Checks the mode against what the case provides.
pub fn check_mode(mode: Mode, bundle: &CaseBundle) -> Result<(), PipelineError> {
    if matches!(mode, Mode::Full | Mode::CnnOnly) && bundle.cnn_probs().is_none() {
        return Err(PipelineError::Config(format!(
            "mode {mode:?} needs CNN probabilities but case {} has no sidecar cnn_probs",
            bundle.case_id()
        )));
    }
    Ok(())
}

struct SqlBranch {
    hypothesis: Hypothesis,
    trace: Vec<TraceEntry>,
    transcripts: CaseTranscripts,
}

fn run_queries<'q>(
    queries: impl Iterator<Item = &'q ValidatedQuery>,
    bundle: &CaseBundle,
    trace: &mut Vec<TraceEntry>,
    executed: &mut Vec<(String, &'q ValidatedQuery, ResultTable)>,
    notes: &mut Vec<String>,
) {
    for vq in queries {
        let query_id = format!("q{}", trace.len());
        let mut entry = TraceEntry {
            query_id: query_id.clone(),
            agent: vq.source_agent(),
            canonical_text: vq.canonical_text().to_owned(),
            repair_log: vq.repair_log().to_vec(),
            column_names: Vec::new(),
            rows: Vec::new(),
            error: None,
        };
        match execute(vq, bundle) {
            Ok(result) => {
                entry.column_names = result.column_names.clone();
                entry.rows = result.rows.clone();
                executed.push((query_id, vq, result));
            }
            Err(e) => {
                notes.push(format!("{query_id} failed: {e}"));
                entry.error = Some(e.to_string());
            }
        }
        trace.push(entry);
    }
}

/// Agent failures other than transport errors degrade to "no queries".
fn soften<T>(r: Result<T, AgentError>, notes: &mut Vec<String>) -> Result<Option<T>, PipelineError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(AgentError::Backend(e)) => Err(AgentError::Backend(e).into()),
        Err(e) => {
            notes.push(e.to_string());
            Ok(None)
        }
    }
}

fn sql_branch(bundle: &CaseBundle, question: &Question, ctx: &PipelineContext) -> Result<SqlBranch, PipelineError> {
    let agent = &ctx.settings.agent;
    let mut notes = Vec::new();
    let mut trace = Vec::new();
    let mut executed = Vec::new();

    let global = soften(plan_global(question, ctx.manifest, ctx.backend, agent), &mut notes)?;
    let (plan, global_transcript) = match global {
        Some((plan, _, t)) => (Some(plan), Some(t)),
        None => (None, None),
    };
    if let Some(t) = &global_transcript {
        run_queries(t.validated(), bundle, &mut trace, &mut executed, &mut notes);
    }
    let global_results: Vec<(String, ResultTable)> =
        executed.iter().map(|(id, _, r)| (id.clone(), r.clone())).collect();

    let local_transcript = match &plan {
        Some(plan) => soften(
            plan_local(question, plan, &global_results, ctx.manifest, ctx.backend, agent),
            &mut notes,
        )?
        .map(|(_, t)| t),
        None => None,
    };
    if let Some(t) = &local_transcript {
        run_queries(t.validated(), bundle, &mut trace, &mut executed, &mut notes);
    }
    for t in global_transcript.iter().chain(&local_transcript) {
        let rejected = t.guard_outcomes.len() - t.validated().count();
        if rejected > 0 {
            notes.push(format!("{rejected} {:?} agent query(ies) rejected by the guard", t.agent));
        }
    }

    let mut obs = Vec::new();
    for (id, vq, result) in &executed {
        let (o, n) = observations(id, vq, result, ctx.manifest);
        obs.extend(o);
        notes.extend(n);
    }

    let mut book = ctx.ranges.clone();
    let dynamic: Vec<String> = obs
        .iter()
        .map(|o| o.feature_key.clone())
        .filter(|k| !ctx.ranges.has_feature(k))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !dynamic.is_empty() && ctx.backend.generates_ranges() {
        match fetch_llm_ranges(&dynamic, &question.options, ctx.manifest, ctx.backend, agent) {
            Ok((ranges, n)) => {
                book.extend(ranges);
                notes.extend(n);
            }
            Err(e) => notes.push(format!("generated ranges unavailable: {e}")),
        }
    }

    let (findings, n) = score_observations(&obs, &question.options, &book);
    notes.extend(n);
    let confidences = match calibrate_confidence(&findings, &question.options) {
        Ok(c) => {
            notes.extend(c.note);
            c.confidences
        }
        Err(e) => {
            notes.push(format!("{e}; confidence is uniform"));
            uniform(&question.options)
        }
    };
    let hypothesis = build_hypothesis(question, findings, &confidences, notes);
    Ok(SqlBranch {
        hypothesis,
        trace,
        transcripts: CaseTranscripts {
            case_id: bundle.case_id().to_owned(),
            plan,
            global: global_transcript,
            local: local_transcript,
        },
    })
}

fn narrative(report: &AuditReport, backend: &dyn LlmBackend, settings: &AgentSettings) -> Option<String> {
    if !backend.generates_narrative() {
        return None;
    }
    let facts = to_canonical_json(&serde_json::json!({
        "diagnosis": report.diagnosis,
        "decision": report.decision,
        "contributing_features": report.contributing_features,
    }))
    .ok()?;
    let system = "Summarise the structured diagnostic report below in one short paragraph. \
                  Mention only facts present in it.";
    backend
        .complete(&CompletionRequest {
            system,
            user: &facts,
            temperature: settings.temperature,
            timeout: settings.timeout,
            task: AgentTask::Narrative,
        })
        .ok()
        .map(|t| t.trim().to_owned())
        .filter(|t| !t.is_empty())
}

/// Runs one case under the configured mode. The question's `case_id` is
/// replaced by the bundle's.
pub fn run_case(bundle: &CaseBundle, question: &Question, ctx: &PipelineContext) -> Result<CaseOutcome, PipelineError> {
    question.validate().map_err(PipelineError::Config)?;
    let settings = ctx.settings;
    if !(0.0..=1.0).contains(&settings.alpha) {
        return Err(PipelineError::Config(format!("alpha {} outside [0, 1]", settings.alpha)));
    }
    check_mode(settings.mode, bundle)?;
    let question = Question {
        case_id: bundle.case_id().to_owned(),
        ..question.clone()
    };
    let cnn = bundle
        .cnn_probs()
        .filter(|_| settings.mode != Mode::SqlOnly)
        .map(|p| CnnOutput::new(p, &question.options))
        .transpose()?;

    let (decision, hypothesis, trace, transcripts) = match settings.mode {
        Mode::CnnOnly => {
            let cnn = cnn.expect("checked by check_mode");
            let transcripts = CaseTranscripts {
                case_id: question.case_id.clone(),
                plan: None,
                global: None,
                local: None,
            };
            (fuse_cnn_only(&cnn), None, Vec::new(), transcripts)
        }
        mode => {
            let branch = sql_branch(bundle, &question, ctx)?;
            let decision = match (mode, &cnn) {
                (Mode::Full, Some(cnn)) => fuse(cnn, &branch.hypothesis, &question.options, settings.alpha)?,
                _ => fuse_sql_only(&branch.hypothesis, &question.options)?,
            };
            (decision, Some(branch.hypothesis), branch.trace, branch.transcripts)
        }
    };
    let mut report = AuditReport::new(
        &question,
        settings.mode,
        decision,
        hypothesis,
        trace,
        transcripts_ref(&question.case_id),
        bundle.ground_truth().map(str::to_owned),
    )?;
    report.narrative = narrative(&report, ctx.backend, &settings.agent);
    Ok(CaseOutcome { report, transcripts })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `reports/<case>.{json,md}` and `transcripts/<case>.json`.
pub fn write_case_artifacts(out: &Path, outcome: &CaseOutcome) -> Result<(), PipelineError> {
    let id = &outcome.report.case_id;
    let json = out.join("reports").join(format!("{id}.json"));
    write_atomic(&json, outcome.report.render(ReportFormat::Json)?.as_bytes()).map_err(io_err(&json))?;
    let md = out.join("reports").join(format!("{id}.md"));
    write_atomic(&md, outcome.report.render(ReportFormat::Markdown)?.as_bytes()).map_err(io_err(&md))?;
    let tr = out.join(transcripts_ref(id));
    let text = to_canonical_json(&outcome.transcripts).expect("transcripts serialize");
    write_atomic(&tr, text.as_bytes()).map_err(io_err(&tr))?;
    Ok(())
}

/// Questions for a dataset: a single entry applies to every case,
/// otherwise each case looks up its own by id.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSet {
    questions: Vec<Question>,
}

impl QuestionSet {
    pub fn new(questions: Vec<Question>) -> Result<QuestionSet, String> {
        if questions.is_empty() {
            return Err("questions file is empty".into());
        }
        for q in &questions {
            q.validate()?;
        }
        Ok(QuestionSet { questions })
    }

    /// Accepts a JSON list of questions or a single question object.
    pub fn from_json(text: &str) -> Result<QuestionSet, String> {
        let questions = match serde_json::from_str::<Vec<Question>>(text) {
            Ok(list) => list,
            Err(_) => vec![serde_json::from_str::<Question>(text).map_err(|e| e.to_string())?],
        };
        QuestionSet::new(questions)
    }

    pub fn for_case(&self, case_id: &str) -> Option<Question> {
        if let [shared] = self.questions.as_slice() {
            return Some(Question {
                case_id: case_id.to_owned(),
                ..shared.clone()
            });
        }
        self.questions.iter().find(|q| q.case_id == case_id).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: Mode,
    pub alpha: f64,
    pub n_cases: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub n_flagged: usize,
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub failures: Vec<CaseFailure>,
}

/// Per-case result of a batch, in case-id order.
pub type BatchResult = Vec<(String, Result<AuditReport, String>)>;

fn case_dirs(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Evaluates every case directory under `dataset` with `workers` threads.
/// Case failures are recorded, never fatal. Artifacts go to `out` when
/// given. The summary does not depend on completion order.
pub fn batch_eval(
    dataset: &Path,
    questions: &QuestionSet,
    ctx: &PipelineContext,
    workers: usize,
    out: Option<&Path>,
) -> Result<(EvalSummary, BatchResult), PipelineError> {
    let dirs = case_dirs(dataset)?;
    let slots: Mutex<Vec<Option<(String, Result<AuditReport, String>)>>> = Mutex::new(vec![None; dirs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(dir) = dirs.get(i) else { break };
        let fallback_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let result = (|| -> Result<(String, AuditReport), (String, String)> {
            let bundle = ingest_case_dir(ctx.manifest, dir).map_err(|e| (fallback_id.clone(), e.to_string()))?;
            let id = bundle.case_id().to_owned();
            if bundle.ground_truth().is_none() {
                return Err((id, "case has no ground_truth".into()));
            }
            let q = questions
                .for_case(&id)
                .ok_or_else(|| (id.clone(), "no question for case".to_owned()))?;
            let outcome = run_case(&bundle, &q, ctx).map_err(|e| (id.clone(), e.to_string()))?;
            if let Some(out) = out {
                write_case_artifacts(out, &outcome).map_err(|e| (id.clone(), e.to_string()))?;
            }
            Ok((id, outcome.report))
        })();
        let entry = match result {
            Ok((id, r)) => (id, Ok(r)),
            Err((id, e)) => (id, Err(e)),
        };
        slots.lock().unwrap()[i] = Some(entry);
    };
    let workers = workers.clamp(1, dirs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(worker);
        }
    });
    let results: BatchResult = slots.into_inner().unwrap().into_iter().flatten().collect();
    Ok((summarize(&results, ctx.settings), results))
}

pub fn summarize(results: &BatchResult, settings: &RunSettings) -> EvalSummary {
    let mut n_correct = 0;
    let mut n_flagged = 0;
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(report) => {
                let correct = report.is_correct() == Some(true);
                n_correct += correct as usize;
                n_flagged += report.decision.review_flag as usize;
                if let Some(g) = &report.ground_truth {
                    let e = per_class.entry(g.clone()).or_default();
                    e.0 += correct as usize;
                    e.1 += 1;
                }
            }
            Err(e) => failures.push(CaseFailure {
                case_id: id.clone(),
                error: e.clone(),
            }),
        }
    }
    let n_cases = results.len();
    EvalSummary {
        mode: settings.mode,
        alpha: settings.alpha,
        n_cases,
        n_correct,
        accuracy: if n_cases == 0 { 0.0 } else { n_correct as f64 / n_cases as f64 },
        n_flagged,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
        failures,
    }
}
