//! In-memory execution of validated queries against one case bundle.
//!
//! Null handling: comparisons against null are unknown and unknown filters
//! a row out; nulls form one group; aggregates skip nulls except
//! `COUNT(*)`; `SUM`/`AVG`/`STDDEV`/`MIN`/`MAX` over nothing give null while
//! `COUNT` gives 0. `ORDER BY` is stable and puts nulls last in either
//! direction. Division by zero is null. Sums use compensated accumulation.

mod aggregate;

pub use aggregate::{compensated_sum, sample_stddev, CompensatedSum};

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guard::ValidatedQuery;
use crate::sql::{render_expr, AggArg, BinaryOp, Expr, Query, ScalarFunc, SelectItem, SortDirection, UnaryOp};
use crate::store::{CaseBundle, FeatureTable, KeyPart, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query: String,
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub provenance: Provenance,
}

impl ResultTable {
    /// Index of a named output column.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// The single cell of a one-row, one-column result.
    pub fn scalar(&self) -> Option<&Value> {
        match (self.rows.as_slice(), self.column_names.len()) {
            ([row], 1) => row.first(),
            _ => None,
        }
    }
}

/// `row` is the input row index for row-level expressions and the group
/// index for expressions evaluated once per group.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecError {
    #[error("table {table} is not in case {case_id}")]
    TableNotInBundle { table: String, case_id: String },
    #[error("{function} domain error at row {row}: {detail}")]
    ArithmeticDomain {
        function: String,
        row: usize,
        detail: String,
    },
    #[error("integer overflow at row {row}")]
    IntegerOverflow { row: usize },
    #[error("non-finite result at row {row}")]
    NonFinite { row: usize },
}

pub fn execute(query: &ValidatedQuery, bundle: &CaseBundle) -> Result<ResultTable, ExecError> {
    let table = bundle
        .table(query.table())
        .ok_or_else(|| ExecError::TableNotInBundle {
            table: query.table().to_owned(),
            case_id: bundle.case_id().to_owned(),
        })?;
    let (column_names, rows) = run(query.ast(), table)?;
    Ok(ResultTable {
        column_names,
        rows,
        provenance: Provenance {
            query: query.canonical_text().to_owned(),
            case_id: bundle.case_id().to_owned(),
        },
    })
}

/// Runs each query independently; entry `i` belongs to `queries[i]`.
pub fn execute_batch(queries: &[ValidatedQuery], bundle: &CaseBundle) -> Vec<(usize, Result<ResultTable, ExecError>)> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| (i, execute(q, bundle)))
        .collect()
}

/// Output column names for a query over `table`.
pub fn output_names(query: &Query, table: &FeatureTable) -> Vec<String> {
    let mut names = Vec::new();
    for item in &query.projections {
        match item {
            SelectItem::Wildcard => names.extend(table.schema().column_names().map(str::to_owned)),
            SelectItem::Expr { expr, alias } => names.push(alias.clone().unwrap_or_else(|| render_expr(expr))),
        }
    }
    names
}

/// Executes a parsed query directly. Callers outside the crate go through
/// [`execute`], which only accepts guard-validated queries.
pub(crate) fn run(query: &Query, table: &FeatureTable) -> Result<(Vec<String>, Vec<Vec<Value>>), ExecError> {
    let names = output_names(query, table);
    let ev = Evaluator { table };

    let mut selected = Vec::new();
    for r in 0..table.row_count() {
        let keep = match &query.selection {
            Some(pred) => truthy(&ev.eval(pred, &Ctx::Row(r))?),
            None => true,
        };
        if keep {
            selected.push(r);
        }
    }

    // Each output row carries its sort keys alongside the projected values.
    let mut out: Vec<(Vec<Value>, Vec<Value>)> = Vec::new();
    if query.is_aggregate() {
        for (g, rows) in partition(&ev, query, &selected)?.iter().enumerate() {
            let ctx = Ctx::Group { rows, index: g };
            if let Some(h) = &query.having {
                if !truthy(&ev.eval(h, &ctx)?) {
                    continue;
                }
            }
            let values = ev.project(query, &ctx)?;
            let keys = ev.sort_keys(query, &names, &values, &ctx)?;
            out.push((values, keys));
        }
    } else {
        for &r in &selected {
            let ctx = Ctx::Row(r);
            let values = ev.project(query, &ctx)?;
            let keys = ev.sort_keys(query, &names, &values, &ctx)?;
            out.push((values, keys));
        }
    }

    if !query.order_by.is_empty() {
        out.sort_by(|a, b| compare_keys(&a.1, &b.1, query));
    }
    let mut rows: Vec<Vec<Value>> = out.into_iter().map(|(v, _)| v).collect();
    if let Some(limit) = query.limit {
        rows.truncate(usize::try_from(limit).unwrap_or(usize::MAX));
    }
    Ok((names, rows))
}

/// Groups in first-appearance order. Without GROUP BY every selected row
/// lands in a single group, which exists even when no row was selected.
fn partition(ev: &Evaluator, query: &Query, selected: &[usize]) -> Result<Vec<Vec<usize>>, ExecError> {
    if query.group_by.is_empty() {
        return Ok(vec![selected.to_vec()]);
    }
    let mut index: HashMap<Vec<KeyPart>, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &r in selected {
        let key = query
            .group_by
            .iter()
            .map(|e| ev.eval(e, &Ctx::Row(r)).map(|v| v.group_key()))
            .collect::<Result<Vec<_>, _>>()?;
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r);
    }
    Ok(groups)
}

fn compare_keys(a: &[Value], b: &[Value], query: &Query) -> Ordering {
    for ((x, y), o) in a.iter().zip(b).zip(&query.order_by) {
        let ord = match (x.is_null(), y.is_null()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (false, false) => {
                let ord = x.sql_cmp(y).unwrap_or(Ordering::Equal);
                match o.direction {
                    SortDirection::Asc => ord,
                    SortDirection::Desc => ord.reverse(),
                }
            }
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

fn truthy(v: &Value) -> bool {
    matches!(v, Value::Int(1))
}

fn boolean(b: Option<bool>) -> Value {
    b.map_or(Value::Null, |b| Value::Int(b as i64))
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Null => None,
        other => Some(truthy(other)),
    }
}

enum Ctx<'a> {
    Row(usize),
    Group { rows: &'a [usize], index: usize },
}

impl Ctx<'_> {
    fn row(&self) -> usize {
        match self {
            Ctx::Row(r) => *r,
            Ctx::Group { index, .. } => *index,
        }
    }
}

struct Evaluator<'a> {
    table: &'a FeatureTable,
}

impl Evaluator<'_> {
    fn project(&self, query: &Query, ctx: &Ctx) -> Result<Vec<Value>, ExecError> {
        let mut values = Vec::new();
        for item in &query.projections {
            match item {
                SelectItem::Wildcard => {
                    let Ctx::Row(r) = ctx else { continue };
                    values.extend(self.table.row(*r));
                }
                SelectItem::Expr { expr, .. } => values.push(self.eval(expr, ctx)?),
            }
        }
        Ok(values)
    }

    /// A bare ORDER BY column matching an output name sorts by that output.
    fn sort_keys(&self, query: &Query, names: &[String], values: &[Value], ctx: &Ctx) -> Result<Vec<Value>, ExecError> {
        query
            .order_by
            .iter()
            .map(|o| {
                if let Expr::Column(c) = &o.expr {
                    let aliased = query.aliases().any(|a| a == c);
                    if aliased {
                        if let Some(i) = names.iter().position(|n| n == c) {
                            return Ok(values[i].clone());
                        }
                    }
                }
                self.eval(&o.expr, ctx)
            })
            .collect()
    }

    fn column(&self, name: &str, ctx: &Ctx) -> Value {
        let Some(c) = self.table.schema().column_index(name) else {
            return Value::Null;
        };
        match ctx {
            Ctx::Row(r) => self.table.value(*r, c),
            Ctx::Group { rows, .. } => rows.first().map_or(Value::Null, |&r| self.table.value(r, c)),
        }
    }

    fn eval(&self, expr: &Expr, ctx: &Ctx) -> Result<Value, ExecError> {
        let row = ctx.row();
        match expr {
            Expr::Column(name) => Ok(self.column(name, ctx)),
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Unary { op, expr } => {
                let v = self.eval(expr, ctx)?;
                match op {
                    UnaryOp::Not => Ok(boolean(as_bool(&v).map(|b| !b))),
                    UnaryOp::Neg => match v {
                        Value::Int(i) => i.checked_neg().map(Value::Int).ok_or(ExecError::IntegerOverflow { row }),
                        Value::Real(r) => Ok(Value::Real(-r)),
                        _ => Ok(Value::Null),
                    },
                }
            }
            Expr::Binary { op, left, right } => {
                let l = self.eval(left, ctx)?;
                let r = self.eval(right, ctx)?;
                match op {
                    BinaryOp::And => Ok(boolean(match (as_bool(&l), as_bool(&r)) {
                        (Some(false), _) | (_, Some(false)) => Some(false),
                        (Some(true), Some(true)) => Some(true),
                        _ => None,
                    })),
                    BinaryOp::Or => Ok(boolean(match (as_bool(&l), as_bool(&r)) {
                        (Some(true), _) | (_, Some(true)) => Some(true),
                        (Some(false), Some(false)) => Some(false),
                        _ => None,
                    })),
                    op if op.is_comparison() => Ok(boolean(l.sql_cmp(&r).map(|ord| match op {
                        BinaryOp::Eq => ord == Ordering::Equal,
                        BinaryOp::NotEq => ord != Ordering::Equal,
                        BinaryOp::Lt => ord == Ordering::Less,
                        BinaryOp::LtEq => ord != Ordering::Greater,
                        BinaryOp::Gt => ord == Ordering::Greater,
                        _ => ord != Ordering::Less,
                    }))),
                    op => arithmetic(*op, &l, &r, row),
                }
            }
            Expr::InList { expr, list } => {
                let v = self.eval(expr, ctx)?;
                if v.is_null() {
                    return Ok(Value::Null);
                }
                let mut unknown = false;
                for item in list {
                    match v.sql_cmp(item) {
                        Some(Ordering::Equal) => return Ok(Value::Int(1)),
                        None => unknown = true,
                        _ => {}
                    }
                }
                Ok(if unknown { Value::Null } else { Value::Int(0) })
            }
            Expr::Between { expr, low, high } => {
                let v = self.eval(expr, ctx)?;
                let lo = v.sql_cmp(low).map(|o| o != Ordering::Less);
                let hi = v.sql_cmp(high).map(|o| o != Ordering::Greater);
                Ok(boolean(match (lo, hi) {
                    (Some(false), _) | (_, Some(false)) => Some(false),
                    (Some(true), Some(true)) => Some(true),
                    _ => None,
                }))
            }
            Expr::Scalar { func, args } => {
                let x = self.eval(&args[0], ctx)?;
                let digits = match args.get(1) {
                    Some(a) => Some(self.eval(a, ctx)?),
                    None => None,
                };
                scalar(*func, &x, digits.as_ref(), row)
            }
            Expr::Aggregate { func, arg, distinct } => {
                let rows: &[usize] = match ctx {
                    Ctx::Group { rows, .. } => rows,
                    Ctx::Row(r) => std::slice::from_ref(r),
                };
                let values = match arg {
                    AggArg::Star => return Ok(Value::Int(rows.len() as i64)),
                    AggArg::Expr(e) => rows
                        .iter()
                        .map(|&r| self.eval(e, &Ctx::Row(r)))
                        .collect::<Result<Vec<_>, _>>()?,
                };
                aggregate::apply(*func, values, *distinct, row)
            }
        }
    }
}

fn finite(v: f64, row: usize) -> Result<Value, ExecError> {
    Value::real(v).ok_or(ExecError::NonFinite { row })
}

fn arithmetic(op: BinaryOp, l: &Value, r: &Value, row: usize) -> Result<Value, ExecError> {
    if l.is_null() || r.is_null() {
        return Ok(Value::Null);
    }
    if op == BinaryOp::Div {
        let (Some(a), Some(b)) = (l.as_f64(), r.as_f64()) else {
            return Ok(Value::Null);
        };
        if b == 0.0 {
            return Ok(Value::Null);
        }
        return finite(a / b, row);
    }
    if let (Value::Int(a), Value::Int(b)) = (l, r) {
        let v = match op {
            BinaryOp::Add => a.checked_add(*b),
            BinaryOp::Sub => a.checked_sub(*b),
            _ => a.checked_mul(*b),
        };
        return v.map(Value::Int).ok_or(ExecError::IntegerOverflow { row });
    }
    let (Some(a), Some(b)) = (l.as_f64(), r.as_f64()) else {
        return Ok(Value::Null);
    };
    finite(
        match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            _ => a * b,
        },
        row,
    )
}

/// `ROUND(x, n)` scales by `10^n`, rounds half away from zero and scales
/// back. When the scaling leaves the finite range `x` is returned as is.
pub fn round_to(x: f64, digits: i64) -> f64 {
    let n = digits.clamp(-400, 400) as i32;
    let p = 10f64.powi(n);
    let scaled = x * p;
    if !scaled.is_finite() || p == 0.0 || !p.is_finite() {
        return x;
    }
    let y = scaled.round() / p;
    if y.is_finite() {
        y
    } else {
        x
    }
}

fn scalar(func: ScalarFunc, x: &Value, digits: Option<&Value>, row: usize) -> Result<Value, ExecError> {
    if x.is_null() {
        return Ok(Value::Null);
    }
    match func {
        ScalarFunc::Abs => match x {
            Value::Int(i) => i.checked_abs().map(Value::Int).ok_or(ExecError::IntegerOverflow { row }),
            Value::Real(r) => Ok(Value::Real(r.abs())),
            _ => Ok(Value::Null),
        },
        ScalarFunc::Sqrt => {
            let v = x.as_f64().unwrap_or(f64::NAN);
            if v < 0.0 {
                return Err(ExecError::ArithmeticDomain {
                    function: "SQRT".into(),
                    row,
                    detail: format!("negative argument {v}"),
                });
            }
            finite(v.sqrt(), row)
        }
        ScalarFunc::Round => {
            let n = match digits {
                None => 0,
                Some(Value::Int(n)) => *n,
                Some(_) => return Ok(Value::Null),
            };
            finite(round_to(x.as_f64().unwrap_or(f64::NAN), n), row)
        }
    }
}
