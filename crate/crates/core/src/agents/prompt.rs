use std::fmt::Write;

use super::{Question, ReasoningPlan};
use crate::exec::ResultTable;
use crate::store::{Level, SchemaManifest};

pub const PROMPT_VERSION: &str = "v1";

const GRAMMAR: &str = "\
SQL subset: one SELECT over one table. Allowed: column list with AS aliases or *, \
WHERE, GROUP BY, HAVING, ORDER BY [ASC|DESC], LIMIT n; + - * /, comparisons, \
AND/OR/NOT, IN (literals), BETWEEN literal AND literal; SQRT, ABS, ROUND; \
COUNT, SUM, AVG, MIN, MAX, STDDEV with optional DISTINCT. No joins, subqueries, \
comments or multiple statements. String literals use single quotes.";

fn level_name(level: Level) -> &'static str {
    match level {
        Level::LocalCellular => "local_cellular",
        Level::LocalArchitecture => "local_architecture",
        Level::Global => "global",
    }
}

/// Compact data dictionary, one line per table.
pub fn data_dictionary(manifest: &SchemaManifest, levels: &[Level]) -> String {
    let mut out = String::new();
    for table in manifest.tables.iter().filter(|t| levels.contains(&t.level)) {
        let cols: Vec<String> = table
            .columns
            .iter()
            .map(|c| {
                let mut s = format!("{} {:?}", c.name, c.dtype).to_lowercase();
                if let Some(unit) = &c.unit {
                    let _ = write!(s, " [{unit}]");
                }
                if let Some(domain) = &c.categorical_domain {
                    let _ = write!(s, " {{{}}}", domain.join("|"));
                }
                s
            })
            .collect();
        let _ = writeln!(out, "- {} ({}): {}", table.name, level_name(table.level), cols.join(", "));
    }
    out
}

fn system(role: &str, manifest: &SchemaManifest, levels: &[Level], extra: &str) -> String {
    format!(
        "[prompt {PROMPT_VERSION}] {role}\n\nTables:\n{}\n{GRAMMAR}\n\n{extra}\
         Emit every SQL query in its own ```sql fenced block and alias derived projections with AS.",
        data_dictionary(manifest, levels)
    )
}

fn question_block(q: &Question) -> String {
    let mut s = format!("Case: {}\nQuestion: {}\nOptions:\n", q.case_id, q.prompt_text);
    for (i, o) in q.options.iter().enumerate() {
        let _ = writeln!(s, "{}. {o}", i + 1);
    }
    s
}

pub fn global_prompts(q: &Question, manifest: &SchemaManifest) -> (String, String) {
    let system = system(
        "You are the global feature reasoning agent. Identify the whole-patch features most relevant to \
         the question and query them.",
        manifest,
        &[Level::Global],
        "First give a plan as a ```json block of the form \
         {\"target_features\":[{\"table\":...,\"column\":...,\"rationale\":...}]}. \
         Query global tables only.\n",
    );
    (system, question_block(q))
}

pub fn local_prompts(
    q: &Question,
    plan: &ReasoningPlan,
    global_results: &[(String, ResultTable)],
    manifest: &SchemaManifest,
) -> (String, String) {
    let system = system(
        "You are the local feature reasoning agent. Gather fine-grained cellular and architectural evidence \
         for the question, using WHERE for cell-type specificity and GROUP BY for population comparisons.",
        manifest,
        &[Level::LocalCellular, Level::LocalArchitecture],
        "Query local tables only.\n",
    );
    let mut user = question_block(q);
    user.push_str("\nGlobal plan:\n");
    for f in &plan.target_features {
        let _ = writeln!(user, "- {}.{}: {}", f.table, f.column, f.rationale);
    }
    if !global_results.is_empty() {
        user.push_str("\nGlobal results:\n");
        for (id, r) in global_results {
            let _ = writeln!(user, "{id}: {}", r.provenance.query);
            let _ = writeln!(user, "  {}", r.column_names.join(" | "));
            for row in &r.rows {
                let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
                let _ = writeln!(user, "  {}", cells.join(" | "));
            }
        }
    }
    (system, user)
}

pub fn range_prompts(feature_key: &str, option: &str, unit: Option<&str>) -> (String, String) {
    let system = format!(
        "[prompt {PROMPT_VERSION}] You supply reference ranges for quantitative histology features. \
         Answer with a single JSON object {{\"low\": number, \"high\": number}} and nothing else."
    );
    let unit = unit.map(|u| format!(" in {u}")).unwrap_or_default();
    let user = format!("Typical range of {feature_key}{unit} for diagnosis \"{option}\"?");
    (system, user)
}

pub fn retry_note(attempt: usize, reasons: &[String]) -> String {
    let mut s = format!("\n\nAttempt {attempt} produced no usable SQL.");
    for r in reasons {
        let _ = write!(s, "\n- {r}");
    }
    s
}
