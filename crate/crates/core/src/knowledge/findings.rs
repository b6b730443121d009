use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::{score_fit, FeatureFinding, RangeBook};
use crate::canonical::format_real;
use crate::exec::ResultTable;
use crate::guard::ValidatedQuery;
use crate::sql::{render_expr, AggArg, AggFunc, Expr, Query, SelectItem};
use crate::store::{Level, SchemaManifest, TableSchema, Value};

/// One numeric cell of a result, named by its feature key.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub feature_key: String,
    pub observed: Value,
    pub query_id: String,
}

/// Key for a projection in a single-row result. A bare column of a global
/// table, or an unfiltered ungrouped `AVG` of a column (the case-level
/// mean), is keyed `table.column`; anything else by alias or, failing
/// that, by its rendered expression.
pub fn feature_key(expr: &Expr, alias: Option<&str>, query: &Query, table: &TableSchema) -> String {
    let qualified = match expr {
        Expr::Column(c) if table.level == Level::Global => Some(c),
        Expr::Aggregate {
            func: AggFunc::Avg,
            arg: AggArg::Expr(inner),
            distinct: false,
        } if query.selection.is_none() && query.group_by.is_empty() => match inner.as_ref() {
            Expr::Column(c) => Some(c),
            _ => None,
        },
        _ => None,
    };
    match (qualified, alias) {
        (Some(c), _) => format!("{}.{c}", table.name),
        (None, Some(a)) => a.to_owned(),
        (None, None) => render_expr(expr),
    }
}

/// (expression, alias) per output column, wildcards expanded.
fn output_exprs(query: &Query, table: &TableSchema) -> Vec<(Expr, Option<String>)> {
    let mut out = Vec::new();
    for item in &query.projections {
        match item {
            SelectItem::Wildcard => out.extend(table.columns.iter().map(|c| (Expr::Column(c.name.clone()), None))),
            SelectItem::Expr { expr, alias } => out.push((expr.clone(), alias.clone())),
        }
    }
    out
}

fn is_numeric_or_null(v: &Value) -> bool {
    matches!(v, Value::Int(_) | Value::Real(_) | Value::Null)
}

/// Turns an executed result into observations. Grouped results yield one
/// observation per group and measure, keyed `name[key=value,...]`. Other
/// multi-row results are not evidence and only produce a note.
pub fn observations(
    query_id: &str,
    query: &ValidatedQuery,
    result: &ResultTable,
    manifest: &SchemaManifest,
) -> (Vec<Observation>, Vec<String>) {
    let mut obs = Vec::new();
    let mut notes = Vec::new();
    let Some(table) = manifest.table(query.table()) else {
        return (obs, notes);
    };
    let ast = query.ast();
    let exprs = output_exprs(ast, table);
    if result.rows.is_empty() {
        notes.push(format!("{query_id} returned no rows"));
        return (obs, notes);
    }
    let is_key = |e: &Expr| matches!(e, Expr::Column(c) if table.column(c).is_some_and(|s| s.is_key()));

    if ast.group_by.is_empty() {
        if result.rows.len() > 1 {
            notes.push(format!("{query_id} returned {} ungrouped rows; not used as evidence", result.rows.len()));
            return (obs, notes);
        }
        for ((expr, alias), value) in exprs.iter().zip(&result.rows[0]) {
            if is_key(expr) || !is_numeric_or_null(value) {
                continue;
            }
            obs.push(Observation {
                feature_key: feature_key(expr, alias.as_deref(), ast, table),
                observed: value.clone(),
                query_id: query_id.to_owned(),
            });
        }
        return (obs, notes);
    }

    let group_cols: Vec<usize> = exprs
        .iter()
        .enumerate()
        .filter(|(_, (e, _))| ast.group_by.contains(e))
        .map(|(i, _)| i)
        .collect();
    if group_cols.is_empty() {
        notes.push(format!("{query_id} does not project its grouping keys; not used as evidence"));
        return (obs, notes);
    }
    for row in &result.rows {
        let mut label = String::new();
        for (n, &i) in group_cols.iter().enumerate() {
            if n > 0 {
                label.push(',');
            }
            let _ = write!(label, "{}={}", result.column_names[i], row[i]);
        }
        for (i, ((expr, alias), value)) in exprs.iter().zip(row).enumerate() {
            if group_cols.contains(&i) || is_key(expr) || !is_numeric_or_null(value) {
                continue;
            }
            let base = alias.clone().unwrap_or_else(|| render_expr(expr));
            obs.push(Observation {
                feature_key: format!("{base}[{label}]"),
                observed: value.clone(),
                query_id: query_id.to_owned(),
            });
        }
    }
    (obs, notes)
}

/// Scores observations against the book. Observations with no range for
/// any option, and repeats of an already scored key, are left out and
/// noted.
pub fn score_observations(
    observations: &[Observation],
    options: &[String],
    book: &RangeBook,
) -> (Vec<FeatureFinding>, Vec<String>) {
    let mut findings = Vec::new();
    let mut notes = Vec::new();
    let mut seen = BTreeSet::new();
    let mut unranged = Vec::new();
    for o in observations {
        if !options.iter().any(|opt| book.get(&o.feature_key, opt).is_some()) {
            unranged.push(o.feature_key.as_str());
            continue;
        }
        if !seen.insert(o.feature_key.clone()) {
            notes.push(format!("{} observed again in {}; first observation kept", o.feature_key, o.query_id));
            continue;
        }
        let x = o.observed.as_f64();
        let mut fits = BTreeMap::new();
        let mut parts = Vec::new();
        let mut missing = Vec::new();
        for opt in options {
            let fit = match (book.get(&o.feature_key, opt), x) {
                (Some(range), Some(x)) => {
                    let cat = score_fit(x, range).ok().map(|f| f.category);
                    if let Some(c) = cat {
                        parts.push(format!(
                            "{opt} [{}, {}] {}: {c:?}",
                            format_real(range.low),
                            format_real(range.high),
                            match range.source {
                                super::RangeSource::Empirical => "empirical",
                                super::RangeSource::LlmKnowledge => "llm",
                            }
                        ));
                    }
                    cat
                }
                (None, _) => {
                    missing.push(opt.as_str());
                    None
                }
                _ => None,
            };
            fits.insert(opt.clone(), fit);
        }
        let observed_text = x.map_or_else(|| "NULL".to_owned(), format_real);
        let rationale = if parts.is_empty() {
            format!("{} = {observed_text}; not scored", o.feature_key)
        } else {
            format!("{} = {observed_text}; {}", o.feature_key, parts.join("; "))
        };
        let quality_note = if x.is_none() {
            Some("observed value is null".to_owned())
        } else if !missing.is_empty() {
            Some(format!("no reference range for {}", missing.join(", ")))
        } else {
            None
        };
        findings.push(FeatureFinding {
            feature_key: o.feature_key.clone(),
            observed: o.observed.clone(),
            query_id: o.query_id.clone(),
            fits,
            rationale,
            quality_note,
        });
    }
    if !unranged.is_empty() {
        notes.push(format!(
            "{} observation(s) without any reference range: {}",
            unranged.len(),
            unranged.join(", ")
        ));
    }
    (findings, notes)
}
