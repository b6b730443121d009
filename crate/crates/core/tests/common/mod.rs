//! Shared test support: fixture paths, a seeded generator for tables and
//! typed queries, and a brute-force reference evaluator for the SQL subset.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evidencesql::agents::{Question, TemplateBackend};
use evidencesql::canonical::to_canonical_json;
use evidencesql::exec::execute;
use evidencesql::fusion::{fuse, CnnOutput};
use evidencesql::guard::{validate_pipeline, GuardStage, RepairAction, SourceAgent};
use evidencesql::knowledge::{
    RangeBook, build_hypothesis, calibrate_confidence, compute_empirical_ranges, score_fit, FeatureFinding, FitCategory,
    Hypothesis, RangeSource, RankedOption, ReferenceRange,
};
use evidencesql::pipeline::{batch_eval, BatchResult, EvalSummary, PipelineContext, QuestionSet, RunSettings};
use evidencesql::report::{AuditReport, Mode};
use evidencesql::sql::{
    parse, render, render_expr, AggArg, AggFunc, BinaryOp, Expr, OrderByExpr, Query, ScalarFunc, SelectItem, SortDirection, UnaryOp,
};
use evidencesql::store::{ingest_case_dir, load_training_split, CaseBundle, ColumnSchema, Dtype, FeatureTable, Level, SchemaManifest, TableSchema, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub const CORE_FEATURES: [&str; 4] = [
    "global_features.neoplastic_ratio",
    "global_features.nuclear_pleomorphism_index",
    "global_features.gland_area_ratio",
    "structures.lumen_ratio",
];

pub fn options() -> Vec<String> {
    vec!["tubular_adenocarcinoma".into(), "papillary_adenocarcinoma".into()]
}

// ---------------------------------------------------------------- values

pub fn values_match(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Null, Value::Null) => true,
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Text(x), Value::Text(y)) => x == y,
        (Value::Real(x), Value::Real(y)) => reals_match(*x, *y),
        _ => false,
    }
}

/// Relative 1e-9, with an absolute floor of 1e-12 for results that are
/// zero up to rounding.
pub fn reals_match(x: f64, y: f64) -> bool {
    let d = (x - y).abs();
    x == y || d <= 1e-9 * x.abs().max(y.abs()) || d <= 1e-12
}

pub fn rows_match(a: &[Vec<Value>], b: &[Vec<Value>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(r, s)| r.len() == s.len() && r.iter().zip(s).all(|(x, y)| values_match(x, y)))
}

/// Exactly rounded sum (Shewchuk's partials).
pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x0 in xs {
        let mut x = x0;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials.iter().rev().fold(0.0, |acc, p| acc + p)
}

/// Quantile by sorting and interpolating between order statistics.
pub fn quantile_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (v.len() as f64 - 1.0);
    let below = pos.floor();
    let frac = pos - below;
    let i = below as usize;
    if i + 1 >= v.len() {
        v[v.len() - 1]
    } else {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    }
}

// ------------------------------------------------------------- generator

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Ty {
    Int,
    Real,
    Text,
}

const WORDS: [&str; 5] = ["alpha", "beta", "gamma", "delta", "o'k"];

pub struct RandomTable {
    pub schema: TableSchema,
    pub rows: Vec<Vec<Value>>,
}

impl RandomTable {
    pub fn manifest(&self) -> SchemaManifest {
        SchemaManifest {
            version: "random".into(),
            tables: vec![self.schema.clone()],
        }
    }

    fn typed_columns(&self) -> Vec<(String, Ty)> {
        self.schema
            .columns
            .iter()
            .map(|c| {
                let t = match c.dtype {
                    Dtype::Integer => Ty::Int,
                    Dtype::Real => Ty::Real,
                    Dtype::Text => Ty::Text,
                };
                (c.name.clone(), t)
            })
            .collect()
    }
}

/// Up to `max_rows` rows over 1..=6 columns drawn from small pools, so that
/// grouping, ties and nulls all occur.
pub fn random_table(rng: &mut ChaCha8Rng, max_rows: usize) -> RandomTable {
    let ncols = rng.random_range(1..=6);
    let mut columns = Vec::new();
    for i in 0..ncols {
        let dtype = match rng.random_range(0..3) {
            0 => Dtype::Integer,
            1 => Dtype::Real,
            _ => Dtype::Text,
        };
        columns.push(ColumnSchema {
            name: format!("c{i}"),
            dtype,
            unit: None,
            categorical_domain: None,
        });
    }
    let nrows = rng.random_range(0..=max_rows);
    let rows = (0..nrows)
        .map(|_| {
            columns
                .iter()
                .map(|c| {
                    if rng.random_bool(0.12) {
                        return Value::Null;
                    }
                    match c.dtype {
                        Dtype::Integer => Value::Int(rng.random_range(-6..=12)),
                        Dtype::Real => Value::Real(rng.random_range(-40..=80) as f64 / 4.0),
                        Dtype::Text => Value::Text(WORDS[rng.random_range(0..WORDS.len())].into()),
                    }
                })
                .collect()
        })
        .collect();
    RandomTable {
        schema: TableSchema {
            name: "t".into(),
            level: Level::LocalCellular,
            columns,
        },
        rows,
    }
}

pub struct QueryGen<'a> {
    rng: &'a mut ChaCha8Rng,
    cols: Vec<(String, Ty)>,
}

fn lit_int(v: i64) -> Expr {
    Expr::Literal(Value::Int(v))
}

fn bin(op: BinaryOp, l: Expr, r: Expr) -> Expr {
    Expr::Binary {
        op,
        left: Box::new(l),
        right: Box::new(r),
    }
}

fn num_type(op: BinaryOp, a: Ty, b: Ty) -> Ty {
    match (op, a, b) {
        (BinaryOp::Div, _, _) => Ty::Real,
        (_, Ty::Int, Ty::Int) => Ty::Int,
        _ => Ty::Real,
    }
}

const CMP_OPS: [BinaryOp; 6] = [
    BinaryOp::Eq,
    BinaryOp::NotEq,
    BinaryOp::Lt,
    BinaryOp::LtEq,
    BinaryOp::Gt,
    BinaryOp::GtEq,
];
const ARITH_OPS: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

impl<'a> QueryGen<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, table: &RandomTable) -> Self {
        QueryGen {
            cols: table.typed_columns(),
            rng,
        }
    }

    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.rng.random_range(0..xs.len())]
    }

    fn cols_of(&self, pred: impl Fn(Ty) -> bool) -> Vec<(String, Ty)> {
        self.cols.iter().filter(|(_, t)| pred(*t)).cloned().collect()
    }

    fn num_literal(&mut self) -> (Expr, Ty) {
        if self.rng.random_bool(0.5) {
            (lit_int(self.rng.random_range(-5..=9)), Ty::Int)
        } else {
            (Expr::Literal(Value::Real(self.rng.random_range(-20..=40) as f64 / 4.0)), Ty::Real)
        }
    }

    fn text_literal(&mut self) -> Expr {
        let w = self.pick(&WORDS);
        Expr::Literal(Value::Text(w.into()))
    }

    /// Row-level numeric expression.
    pub fn num_expr(&mut self, depth: u32) -> (Expr, Ty) {
        let numeric = self.cols_of(|t| t != Ty::Text);
        let choice = if depth == 0 { self.rng.random_range(0..2) } else { self.rng.random_range(0..7) };
        match choice {
            0 if !numeric.is_empty() => {
                let (c, t) = numeric[self.rng.random_range(0..numeric.len())].clone();
                (Expr::Column(c), t)
            }
            0 | 1 => self.num_literal(),
            2 | 3 => {
                let op = self.pick(&ARITH_OPS);
                let (l, lt) = self.num_expr(depth - 1);
                let (r, rt) = self.num_expr(depth - 1);
                (bin(op, l, r), num_type(op, lt, rt))
            }
            4 => {
                let (e, t) = self.num_expr(depth - 1);
                (
                    Expr::Unary {
                        op: UnaryOp::Neg,
                        expr: Box::new(e),
                    },
                    t,
                )
            }
            5 => {
                let (e, t) = self.num_expr(depth - 1);
                match self.rng.random_range(0..4) {
                    0 => (Expr::Scalar { func: ScalarFunc::Abs, args: vec![e] }, t),
                    1 => (Expr::Scalar { func: ScalarFunc::Round, args: vec![e] }, Ty::Real),
                    2 => (
                        Expr::Scalar {
                            func: ScalarFunc::Round,
                            args: vec![e, lit_int(self.rng.random_range(0..=2))],
                        },
                        Ty::Real,
                    ),
                    _ => (
                        Expr::Scalar {
                            func: ScalarFunc::Sqrt,
                            args: vec![Expr::Scalar { func: ScalarFunc::Abs, args: vec![e] }],
                        },
                        Ty::Real,
                    ),
                }
            }
            _ => self.num_expr(depth - 1),
        }
    }

    fn text_expr(&mut self) -> Option<Expr> {
        let text = self.cols_of(|t| t == Ty::Text);
        if text.is_empty() {
            return None;
        }
        Some(if self.rng.random_bool(0.8) {
            Expr::Column(text[self.rng.random_range(0..text.len())].0.clone())
        } else {
            self.text_literal()
        })
    }

    /// Row-level predicate.
    pub fn bool_expr(&mut self, depth: u32) -> Expr {
        let choice = if depth == 0 { self.rng.random_range(0..4) } else { self.rng.random_range(0..7) };
        match choice {
            0 | 1 => {
                let op = self.pick(&CMP_OPS);
                if self.rng.random_bool(0.3) {
                    if let Some(t) = self.text_expr() {
                        let lit = self.text_literal();
                        return bin(op, t, lit);
                    }
                }
                let (l, _) = self.num_expr(1);
                let (r, _) = self.num_expr(0);
                bin(op, l, r)
            }
            2 => {
                if self.rng.random_bool(0.4) {
                    if let Some(t) = self.text_expr() {
                        let n = self.rng.random_range(1..=3);
                        let mut list: Vec<Value> =
                            (0..n).map(|_| Value::Text(self.pick(&WORDS).into())).collect();
                        if self.rng.random_bool(0.2) {
                            list.push(Value::Null);
                        }
                        return Expr::InList { expr: Box::new(t), list };
                    }
                }
                let (e, _) = self.num_expr(1);
                let n = self.rng.random_range(1..=4);
                let mut list: Vec<Value> = (0..n)
                    .map(|_| match self.num_literal().0 {
                        Expr::Literal(v) => v,
                        _ => unreachable!(),
                    })
                    .collect();
                if self.rng.random_bool(0.2) {
                    list.push(Value::Null);
                }
                Expr::InList { expr: Box::new(e), list }
            }
            3 => {
                let (e, _) = self.num_expr(1);
                let a = self.rng.random_range(-10..=10);
                let b = a + self.rng.random_range(0..=10);
                Expr::Between {
                    expr: Box::new(e),
                    low: Value::Int(a),
                    high: if self.rng.random_bool(0.5) {
                        Value::Int(b)
                    } else {
                        Value::Real(b as f64 + 0.5)
                    },
                }
            }
            4 => Expr::Unary {
                op: UnaryOp::Not,
                expr: Box::new(self.bool_expr(depth - 1)),
            },
            _ => {
                let op = if self.rng.random_bool(0.5) { BinaryOp::And } else { BinaryOp::Or };
                let l = self.bool_expr(depth - 1);
                let r = self.bool_expr(depth - 1);
                bin(op, l, r)
            }
        }
    }

    /// Aggregate-context numeric expression; `groups` are the grouping
    /// columns that may appear bare.
    fn agg_num(&mut self, depth: u32, groups: &[(String, Ty)]) -> (Expr, Ty) {
        let numeric_groups: Vec<_> = groups.iter().filter(|(_, t)| *t != Ty::Text).cloned().collect();
        let choice = if depth == 0 { self.rng.random_range(0..3) } else { self.rng.random_range(0..6) };
        match choice {
            0 if !numeric_groups.is_empty() && self.rng.random_bool(0.5) => {
                let (c, t) = numeric_groups[self.rng.random_range(0..numeric_groups.len())].clone();
                (Expr::Column(c), t)
            }
            0 | 1 => {
                let distinct = self.rng.random_bool(0.2);
                match self.rng.random_range(0..3) {
                    0 => (
                        Expr::Aggregate {
                            func: AggFunc::Count,
                            arg: AggArg::Star,
                            distinct: false,
                        },
                        Ty::Int,
                    ),
                    1 => {
                        let arg = if self.rng.random_bool(0.3) {
                            self.text_expr().unwrap_or_else(|| self.num_expr(1).0)
                        } else {
                            self.num_expr(1).0
                        };
                        (
                            Expr::Aggregate {
                                func: AggFunc::Count,
                                arg: AggArg::Expr(Box::new(arg)),
                                distinct,
                            },
                            Ty::Int,
                        )
                    }
                    _ => {
                        let func = self.pick(&[AggFunc::Sum, AggFunc::Avg, AggFunc::Min, AggFunc::Max, AggFunc::Stddev]);
                        let (arg, t) = self.num_expr(1);
                        let ty = match func {
                            AggFunc::Sum | AggFunc::Min | AggFunc::Max => t,
                            _ => Ty::Real,
                        };
                        (
                            Expr::Aggregate {
                                func,
                                arg: AggArg::Expr(Box::new(arg)),
                                distinct,
                            },
                            ty,
                        )
                    }
                }
            }
            2 => self.num_literal(),
            3 => {
                let op = self.pick(&ARITH_OPS);
                let (l, lt) = self.agg_num(depth - 1, groups);
                let (r, rt) = self.agg_num(depth - 1, groups);
                (bin(op, l, r), num_type(op, lt, rt))
            }
            4 => {
                let (e, _) = self.agg_num(depth - 1, groups);
                (
                    Expr::Scalar {
                        func: ScalarFunc::Sqrt,
                        args: vec![Expr::Scalar { func: ScalarFunc::Abs, args: vec![e] }],
                    },
                    Ty::Real,
                )
            }
            _ => {
                let (e, _) = self.agg_num(depth - 1, groups);
                (
                    Expr::Scalar {
                        func: ScalarFunc::Round,
                        args: vec![e, lit_int(self.rng.random_range(0..=2))],
                    },
                    Ty::Real,
                )
            }
        }
    }

    fn agg_any(&mut self, groups: &[(String, Ty)]) -> Expr {
        if self.rng.random_bool(0.15) {
            if let Some(t) = self.text_expr() {
                let func = self.pick(&[AggFunc::Min, AggFunc::Max]);
                return Expr::Aggregate {
                    func,
                    arg: AggArg::Expr(Box::new(t)),
                    distinct: false,
                };
            }
        }
        self.agg_num(2, groups).0
    }

    fn having(&mut self, depth: u32, groups: &[(String, Ty)]) -> Expr {
        if depth > 0 && self.rng.random_bool(0.3) {
            let op = if self.rng.random_bool(0.5) { BinaryOp::And } else { BinaryOp::Or };
            let l = self.having(depth - 1, groups);
            let r = self.having(depth - 1, groups);
            return bin(op, l, r);
        }
        let op = self.pick(&CMP_OPS);
        let (l, _) = self.agg_num(1, groups);
        let (r, _) = self.num_literal();
        bin(op, l, r)
    }

    fn direction(&mut self) -> SortDirection {
        if self.rng.random_bool(0.5) {
            SortDirection::Asc
        } else {
            SortDirection::Desc
        }
    }

    /// A query over table `t` that type-checks against its manifest.
    pub fn query(&mut self) -> Query {
        let aggregate = self.rng.random_bool(0.45);
        let selection = self.rng.random_bool(0.6).then(|| self.bool_expr(2));
        let mut projections = Vec::new();
        let mut group_by = Vec::new();
        let mut having = None;
        let mut order_by = Vec::new();
        let mut aliases = Vec::new();
        let alias = |gen: &mut Self, i: usize, aliases: &mut Vec<String>| {
            gen.rng.random_bool(0.4).then(|| {
                let a = format!("r{i}");
                aliases.push(a.clone());
                a
            })
        };
        if aggregate {
            let mut groups = Vec::new();
            for _ in 0..self.rng.random_range(0..=2) {
                let (c, t) = self.cols[self.rng.random_range(0..self.cols.len())].clone();
                if !groups.iter().any(|(g, _): &(String, Ty)| *g == c) {
                    groups.push((c, t));
                }
            }
            group_by = groups.iter().map(|(c, _)| Expr::Column(c.clone())).collect();
            for (c, _) in &groups {
                if self.rng.random_bool(0.7) {
                    let a = alias(self, projections.len(), &mut aliases);
                    projections.push(SelectItem::Expr { expr: Expr::Column(c.clone()), alias: a });
                }
            }
            for _ in 0..self.rng.random_range(1..=3) {
                let e = self.agg_any(&groups);
                let a = alias(self, projections.len(), &mut aliases);
                projections.push(SelectItem::Expr { expr: e, alias: a });
            }
            if self.rng.random_bool(0.35) {
                having = Some(self.having(1, &groups));
            }
            for _ in 0..self.rng.random_range(0..=2) {
                let expr = if !aliases.is_empty() && self.rng.random_bool(0.3) {
                    Expr::Column(aliases[self.rng.random_range(0..aliases.len())].clone())
                } else if !groups.is_empty() && self.rng.random_bool(0.4) {
                    Expr::Column(groups[self.rng.random_range(0..groups.len())].0.clone())
                } else {
                    self.agg_any(&groups)
                };
                let direction = self.direction();
                order_by.push(OrderByExpr { expr, direction });
            }
        } else {
            if self.rng.random_bool(0.1) {
                projections.push(SelectItem::Wildcard);
            }
            for _ in 0..self.rng.random_range(1..=3) {
                let e = if self.rng.random_bool(0.25) {
                    self.text_expr().unwrap_or_else(|| self.num_expr(2).0)
                } else {
                    self.num_expr(2).0
                };
                let a = alias(self, projections.len(), &mut aliases);
                projections.push(SelectItem::Expr { expr: e, alias: a });
            }
            for _ in 0..self.rng.random_range(0..=2) {
                let expr = if !aliases.is_empty() && self.rng.random_bool(0.3) {
                    Expr::Column(aliases[self.rng.random_range(0..aliases.len())].clone())
                } else if self.rng.random_bool(0.2) {
                    self.text_expr().unwrap_or_else(|| self.num_expr(1).0)
                } else {
                    self.num_expr(1).0
                };
                let direction = self.direction();
                order_by.push(OrderByExpr { expr, direction });
            }
        }
        let limit = self.rng.random_bool(0.25).then(|| self.rng.random_range(0..8));
        Query {
            projections,
            from: "t".into(),
            selection,
            group_by,
            having,
            order_by,
            limit,
        }
    }
}

// ---------------------------------------------------------------- oracle

pub type Row = Vec<Value>;

fn has_aggregate(e: &Expr) -> bool {
    match e {
        Expr::Aggregate { .. } => true,
        Expr::Column(_) | Expr::Literal(_) => false,
        Expr::Unary { expr, .. } | Expr::InList { expr, .. } | Expr::Between { expr, .. } => has_aggregate(expr),
        Expr::Binary { left, right, .. } => has_aggregate(left) || has_aggregate(right),
        Expr::Scalar { args, .. } => args.iter().any(has_aggregate),
    }
}

fn num(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Real(r) => Some(*r),
        _ => None,
    }
}

fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Null, _) | (_, Value::Null) => None,
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        _ => num(a)?.partial_cmp(&num(b)?),
    }
}

/// Grouping / DISTINCT identity: nulls equal each other, numbers compare
/// by value within their kind.
fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Null, Value::Null) => true,
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Real(x), Value::Real(y)) => x == y,
        (Value::Text(x), Value::Text(y)) => x == y,
        _ => false,
    }
}

fn tri(v: Option<bool>) -> Value {
    match v {
        None => Value::Null,
        Some(b) => Value::Int(b as i64),
    }
}

fn truth(v: &Value) -> Option<bool> {
    match v {
        Value::Null => None,
        Value::Int(i) => Some(*i == 1),
        _ => Some(false),
    }
}

fn real(x: f64) -> Result<Value, String> {
    if x.is_finite() {
        Ok(Value::Real(x))
    } else {
        Err("non-finite".into())
    }
}

struct Oracle<'a> {
    schema: &'a TableSchema,
}

enum Scope<'a> {
    Row(&'a Row),
    Group(&'a [&'a Row]),
}

impl Oracle<'_> {
    fn col(&self, name: &str, scope: &Scope) -> Value {
        let i = self.schema.columns.iter().position(|c| c.name == name).expect("known column");
        match scope {
            Scope::Row(r) => r[i].clone(),
            Scope::Group(rows) => rows.first().map(|r| r[i].clone()).unwrap_or(Value::Null),
        }
    }

    fn eval(&self, e: &Expr, scope: &Scope) -> Result<Value, String> {
        Ok(match e {
            Expr::Column(c) => self.col(c, scope),
            Expr::Literal(v) => v.clone(),
            Expr::Unary { op: UnaryOp::Not, expr } => tri(truth(&self.eval(expr, scope)?).map(|b| !b)),
            Expr::Unary { op: UnaryOp::Neg, expr } => match self.eval(expr, scope)? {
                Value::Int(i) => Value::Int(i.checked_neg().ok_or("overflow")?),
                Value::Real(r) => Value::Real(-r),
                _ => Value::Null,
            },
            Expr::Binary { op, left, right } => {
                let a = self.eval(left, scope)?;
                let b = self.eval(right, scope)?;
                match op {
                    BinaryOp::And => {
                        let (x, y) = (truth(&a), truth(&b));
                        if x == Some(false) || y == Some(false) {
                            Value::Int(0)
                        } else if x.is_none() || y.is_none() {
                            Value::Null
                        } else {
                            Value::Int(1)
                        }
                    }
                    BinaryOp::Or => {
                        let (x, y) = (truth(&a), truth(&b));
                        if x == Some(true) || y == Some(true) {
                            Value::Int(1)
                        } else if x.is_none() || y.is_none() {
                            Value::Null
                        } else {
                            Value::Int(0)
                        }
                    }
                    BinaryOp::Eq => tri(compare(&a, &b).map(|o| o.is_eq())),
                    BinaryOp::NotEq => tri(compare(&a, &b).map(|o| o.is_ne())),
                    BinaryOp::Lt => tri(compare(&a, &b).map(|o| o.is_lt())),
                    BinaryOp::LtEq => tri(compare(&a, &b).map(|o| o.is_le())),
                    BinaryOp::Gt => tri(compare(&a, &b).map(|o| o.is_gt())),
                    BinaryOp::GtEq => tri(compare(&a, &b).map(|o| o.is_ge())),
                    _ => {
                        if a.is_null() || b.is_null() {
                            return Ok(Value::Null);
                        }
                        match (op, &a, &b) {
                            (BinaryOp::Div, _, _) => {
                                let d = num(&b).unwrap();
                                if d == 0.0 {
                                    Value::Null
                                } else {
                                    real(num(&a).unwrap() / d)?
                                }
                            }
                            (_, Value::Int(x), Value::Int(y)) => {
                                let wide = match op {
                                    BinaryOp::Add => *x as i128 + *y as i128,
                                    BinaryOp::Sub => *x as i128 - *y as i128,
                                    _ => *x as i128 * *y as i128,
                                };
                                Value::Int(i64::try_from(wide).map_err(|_| "overflow")?)
                            }
                            _ => {
                                let (x, y) = (num(&a).unwrap(), num(&b).unwrap());
                                real(match op {
                                    BinaryOp::Add => x + y,
                                    BinaryOp::Sub => x - y,
                                    _ => x * y,
                                })?
                            }
                        }
                    }
                }
            }
            Expr::InList { expr, list } => {
                let v = self.eval(expr, scope)?;
                let results: Vec<Option<Ordering>> = list.iter().map(|l| compare(&v, l)).collect();
                if v.is_null() {
                    Value::Null
                } else if results.iter().any(|r| *r == Some(Ordering::Equal)) {
                    Value::Int(1)
                } else if results.iter().any(Option::is_none) {
                    Value::Null
                } else {
                    Value::Int(0)
                }
            }
            Expr::Between { expr, low, high } => {
                let v = self.eval(expr, scope)?;
                let ge = compare(&v, low).map(|o| o.is_ge());
                let le = compare(&v, high).map(|o| o.is_le());
                match (ge, le) {
                    (Some(false), _) | (_, Some(false)) => Value::Int(0),
                    (Some(true), Some(true)) => Value::Int(1),
                    _ => Value::Null,
                }
            }
            Expr::Scalar { func, args } => {
                let x = self.eval(&args[0], scope)?;
                if x.is_null() {
                    return Ok(Value::Null);
                }
                match func {
                    ScalarFunc::Abs => match x {
                        Value::Int(i) => Value::Int(i.checked_abs().ok_or("overflow")?),
                        Value::Real(r) => Value::Real(r.abs()),
                        _ => Value::Null,
                    },
                    ScalarFunc::Sqrt => {
                        let v = num(&x).unwrap();
                        if v < 0.0 {
                            return Err("sqrt of negative".into());
                        }
                        real(v.sqrt())?
                    }
                    ScalarFunc::Round => {
                        let n = match args.get(1) {
                            Some(a) => match self.eval(a, scope)? {
                                Value::Int(n) => n,
                                _ => return Ok(Value::Null),
                            },
                            None => 0,
                        };
                        let scale = 10f64.powi(n as i32);
                        real((num(&x).unwrap() * scale).round() / scale)?
                    }
                }
            }
            Expr::Aggregate { func, arg, distinct } => {
                let rows: Vec<&Row> = match scope {
                    Scope::Group(rows) => rows.to_vec(),
                    Scope::Row(r) => vec![*r],
                };
                let inner = match arg {
                    AggArg::Star => return Ok(Value::Int(rows.len() as i64)),
                    AggArg::Expr(e) => e,
                };
                let mut vals: Vec<Value> = Vec::new();
                for r in &rows {
                    let v = self.eval(inner, &Scope::Row(r))?;
                    if v.is_null() || (*distinct && vals.iter().any(|w| same(w, &v))) {
                        continue;
                    }
                    vals.push(v);
                }
                aggregate(*func, &vals)?
            }
        })
    }
}

fn aggregate(func: AggFunc, vals: &[Value]) -> Result<Value, String> {
    if func == AggFunc::Count {
        return Ok(Value::Int(vals.len() as i64));
    }
    if vals.is_empty() {
        return Ok(Value::Null);
    }
    let xs: Vec<f64> = vals.iter().filter_map(num).collect();
    Ok(match func {
        AggFunc::Min | AggFunc::Max => {
            let mut best = &vals[0];
            for v in vals {
                let o = compare(v, best).unwrap();
                if (func == AggFunc::Min && o.is_lt()) || (func == AggFunc::Max && o.is_gt()) {
                    best = v;
                }
            }
            best.clone()
        }
        AggFunc::Sum => {
            if vals.iter().all(|v| matches!(v, Value::Int(_))) {
                let total: i128 = vals
                    .iter()
                    .map(|v| match v {
                        Value::Int(i) => *i as i128,
                        _ => 0,
                    })
                    .sum();
                Value::Int(i64::try_from(total).map_err(|_| "overflow")?)
            } else {
                real(exact_sum(&xs))?
            }
        }
        AggFunc::Avg => real(exact_sum(&xs) / xs.len() as f64)?,
        AggFunc::Stddev => {
            if xs.len() < 2 {
                Value::Null
            } else {
                let mean = exact_sum(&xs) / xs.len() as f64;
                let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
                real((exact_sum(&sq) / (xs.len() as f64 - 1.0)).sqrt())?
            }
        }
        AggFunc::Count => unreachable!(),
    })
}

/// Reference evaluation: materialise, filter, group by nested loops,
/// aggregate by definition, insertion-sort, truncate.
pub fn oracle_execute(q: &Query, schema: &TableSchema, rows: &[Row]) -> Result<(Vec<String>, Vec<Row>), String> {
    let o = Oracle { schema };
    let mut names = Vec::new();
    for p in &q.projections {
        match p {
            SelectItem::Wildcard => names.extend(schema.columns.iter().map(|c| c.name.clone())),
            SelectItem::Expr { expr, alias } => names.push(alias.clone().unwrap_or_else(|| render_expr(expr))),
        }
    }
    let mut kept: Vec<&Row> = Vec::new();
    for r in rows {
        let pass = match &q.selection {
            Some(w) => truth(&o.eval(w, &Scope::Row(r))?) == Some(true),
            None => true,
        };
        if pass {
            kept.push(r);
        }
    }
    let aggregate_query = !q.group_by.is_empty()
        || q.having.is_some()
        || q.projections.iter().any(|p| matches!(p, SelectItem::Expr { expr, .. } if has_aggregate(expr)))
        || q.order_by.iter().any(|ob| has_aggregate(&ob.expr));

    let project = |scope: &Scope| -> Result<Row, String> {
        let mut out = Vec::new();
        for p in &q.projections {
            match (p, scope) {
                (SelectItem::Wildcard, Scope::Row(r)) => out.extend(r.iter().cloned()),
                (SelectItem::Wildcard, Scope::Group(_)) => {}
                (SelectItem::Expr { expr, .. }, _) => out.push(o.eval(expr, scope)?),
            }
        }
        Ok(out)
    };
    let keys = |scope: &Scope, out: &Row| -> Result<Row, String> {
        let mut ks = Vec::new();
        for ob in &q.order_by {
            let aliased = match &ob.expr {
                Expr::Column(c) => q.projections.iter().position(
                    |p| matches!(p, SelectItem::Expr { alias: Some(a), .. } if a == c),
                ),
                _ => None,
            };
            ks.push(match aliased {
                Some(_) => {
                    let Expr::Column(c) = &ob.expr else { unreachable!() };
                    out[names.iter().position(|n| n == c).unwrap()].clone()
                }
                None => o.eval(&ob.expr, scope)?,
            });
        }
        Ok(ks)
    };

    let mut produced: Vec<(Row, Row)> = Vec::new();
    if aggregate_query {
        let mut groups: Vec<Vec<&Row>> = Vec::new();
        if q.group_by.is_empty() {
            groups.push(kept.clone());
        } else {
            let mut group_keys: Vec<Row> = Vec::new();
            for r in &kept {
                let k: Row = q
                    .group_by
                    .iter()
                    .map(|g| o.eval(g, &Scope::Row(r)))
                    .collect::<Result<_, _>>()?;
                let mut found = None;
                for (gi, gk) in group_keys.iter().enumerate() {
                    if gk.iter().zip(&k).all(|(a, b)| same(a, b)) {
                        found = Some(gi);
                        break;
                    }
                }
                match found {
                    Some(gi) => groups[gi].push(r),
                    None => {
                        group_keys.push(k);
                        groups.push(vec![r]);
                    }
                }
            }
        }
        for g in &groups {
            let scope = Scope::Group(g);
            if let Some(h) = &q.having {
                if truth(&o.eval(h, &scope)?) != Some(true) {
                    continue;
                }
            }
            let out = project(&scope)?;
            let k = keys(&scope, &out)?;
            produced.push((out, k));
        }
    } else {
        for r in &kept {
            let scope = Scope::Row(r);
            let out = project(&scope)?;
            let k = keys(&scope, &out)?;
            produced.push((out, k));
        }
    }

    let before = |a: &Row, b: &Row| -> bool {
        for (i, ob) in q.order_by.iter().enumerate() {
            let (x, y) = (&a[i], &b[i]);
            let ord = match (x.is_null(), y.is_null()) {
                (true, true) => Ordering::Equal,
                (true, false) => Ordering::Greater,
                (false, true) => Ordering::Less,
                _ => {
                    let c = compare(x, y).unwrap();
                    if ob.direction == SortDirection::Desc {
                        c.reverse()
                    } else {
                        c
                    }
                }
            };
            if ord != Ordering::Equal {
                return ord == Ordering::Less;
            }
        }
        false
    };
    for i in 1..produced.len() {
        let mut j = i;
        while j > 0 && before(&produced[j].1, &produced[j - 1].1) {
            produced.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut out: Vec<Row> = produced.into_iter().map(|(r, _)| r).collect();
    if let Some(l) = q.limit {
        out.truncate(l as usize);
    }
    Ok((names, out))
}

// ---------------------------------------------------- round-trip helpers

/// Swaps literals in `e` for values drawn from the full range of each
/// kind: any finite double, extreme integers, awkward text, and NULL.
pub fn widen_literals(rng: &mut ChaCha8Rng, e: &mut Expr) {
    let wide = |rng: &mut ChaCha8Rng| -> Value {
        match rng.random_range(0..6) {
            0 => loop {
                let x = f64::from_bits(rng.random::<u64>());
                if x.is_finite() {
                    break Value::Real(x);
                }
            },
            1 => Value::Int(*[i64::MIN, i64::MAX, 0, -1].get(rng.random_range(0..4)).unwrap()),
            2 => Value::Int(rng.random()),
            3 => Value::Text(["", "it's", "a''b", "ünï", "SELECT", "--x", ";"][rng.random_range(0..7)].into()),
            4 => Value::Null,
            _ => Value::Real(rng.random_range(-1e6..1e6)),
        }
    };
    match e {
        Expr::Literal(v) => {
            if rng.random_bool(0.5) {
                *v = wide(rng);
            }
        }
        Expr::Column(_) => {}
        Expr::Unary { expr, .. } => widen_literals(rng, expr),
        Expr::Binary { left, right, .. } => {
            widen_literals(rng, left);
            widen_literals(rng, right);
        }
        Expr::InList { expr, list } => {
            widen_literals(rng, expr);
            for v in list {
                if rng.random_bool(0.5) {
                    *v = wide(rng);
                }
            }
        }
        Expr::Between { expr, low, high } => {
            widen_literals(rng, expr);
            if rng.random_bool(0.5) {
                *low = wide(rng);
                *high = wide(rng);
            }
        }
        Expr::Scalar { args, .. } => args.iter_mut().for_each(|a| widen_literals(rng, a)),
        Expr::Aggregate { arg, .. } => {
            if let AggArg::Expr(a) = arg {
                widen_literals(rng, a);
            }
        }
    }
}

/// A grammar-level query: typed generation followed by literal widening.
pub fn grammar_query(rng: &mut ChaCha8Rng) -> Query {
    let t = random_table(rng, 0);
    let mut q = QueryGen::new(rng, &t).query();
    for p in &mut q.projections {
        if let SelectItem::Expr { expr, .. } = p {
            widen_literals(rng, expr);
        }
    }
    for e in q.selection.iter_mut().chain(q.having.iter_mut()).chain(q.group_by.iter_mut()) {
        widen_literals(rng, e);
    }
    for ob in &mut q.order_by {
        widen_literals(rng, &mut ob.expr);
    }
    if rng.random_bool(0.1) {
        q.limit = Some(rng.random());
    }
    q
}

// --------------------------------------------------------------- drivers

/// Runs `n` random (table, query) pairs against the reference evaluator and
/// returns the mismatches.
pub fn oracle_mismatches(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let t = random_table(&mut rng, 100);
        let q = QueryGen::new(&mut rng, &t).query();
        let m = t.manifest();
        let text = render(&q);
        let vq = match validate_pipeline(&text, &m, SourceAgent::Manual) {
            Ok(vq) => vq,
            Err(e) => {
                bad.push(format!("#{i} rejected {text}: {e}"));
                continue;
            }
        };
        let b = CaseBundle::new(&m, "r", vec![FeatureTable::from_rows(t.schema.clone(), t.rows.clone()).unwrap()], None, None)
            .unwrap();
        let got = execute(&vq, &b);
        let want = oracle_execute(&q, &t.schema, &t.rows);
        match (got, want) {
            (Ok(g), Ok((names, rows))) => {
                if g.column_names != names || !rows_match(&g.rows, &rows) {
                    bad.push(format!("#{i} {text}\n engine {:?}\n oracle {:?}", g.rows, rows));
                }
            }
            (Err(_), Err(_)) => {}
            (g, w) => bad.push(format!("#{i} {text}: engine {g:?} oracle {w:?}")),
        }
    }
    bad
}

/// Returns the first failing (rendered text, detail) among `n` ASTs.
pub fn round_trip_failures(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..n {
        let q = grammar_query(&mut rng);
        let text = render(&q);
        match parse(&text) {
            Ok(back) if back == q => {}
            Ok(back) => bad.push(format!("{text}\n  reparsed as {}", render(&back))),
            Err(e) => bad.push(format!("{text}\n  {e}")),
        }
    }
    bad
}


#[derive(Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    pub input: String,
    pub expect: String,
    #[serde(default)]
    pub canonical: Option<String>,
    #[serde(default)]
    pub repair_log: Option<Vec<RepairAction>>,
    #[serde(default)]
    pub reason_contains: Option<String>,
}

pub fn guard_corpus() -> Vec<CorpusEntry> {
    let text = std::fs::read_to_string(fixtures().join("guard_corpus.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stage_name(stage: GuardStage) -> &'static str {
    match stage {
        GuardStage::Sanitize => "sanitize",
        GuardStage::Parse => "parse",
        GuardStage::Schema => "schema",
        GuardStage::RepairExhausted => "repair_exhausted",
    }
}

/// Entries whose outcome differs from the recorded expectation.
pub fn guard_corpus_failures(manifest: &SchemaManifest) -> Vec<String> {
    let mut bad = Vec::new();
    for e in guard_corpus() {
        let outcome = validate_pipeline(&e.input, manifest, SourceAgent::Manual);
        let ok = match (&outcome, e.expect.as_str()) {
            (Ok(vq), "validated") => {
                e.canonical.as_deref().is_none_or(|c| c == vq.canonical_text())
                    && e.repair_log.as_deref().is_none_or(|l| l == vq.repair_log())
            }
            (Err(r), stage) => {
                stage_name(r.stage) == stage
                    && e.reason_contains.as_deref().is_none_or(|s| r.reason.contains(s))
            }
            _ => false,
        };
        if !ok {
            bad.push(format!("{}: {:?}", e.name, outcome.map(|v| (v.canonical_text().to_owned(), v.repair_log().to_vec()))));
        }
    }
    bad
}

// ------------------------------------------------ scoring and calibration


pub fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("opt_{i}")).collect()
}

pub fn range(low: f64, high: f64) -> ReferenceRange {
    ReferenceRange {
        feature_key: "f".into(),
        option_label: "A".into(),
        low,
        high,
        source: RangeSource::Empirical,
        unit: None,
    }
}

fn weight(c: FitCategory) -> f64 {
    match c {
        FitCategory::Excellent => 1.0,
        FitCategory::Good => 0.75,
        FitCategory::Fair => 0.5,
        FitCategory::Poor => 0.25,
        FitCategory::NoFit => 0.0,
    }
}

/// Band by hand: distance outside the range over its width.
pub fn fit_oracle(observed: f64, low: f64, high: f64) -> FitCategory {
    let d = if observed < low {
        low - observed
    } else if observed > high {
        observed - high
    } else {
        0.0
    };
    let w = if high - low == 0.0 { 1e-9 } else { high - low };
    let r = d / w;
    if d == 0.0 {
        FitCategory::Excellent
    } else if r <= 0.25 {
        FitCategory::Good
    } else if r <= 0.75 {
        FitCategory::Fair
    } else if r <= 1.5 {
        FitCategory::Poor
    } else {
        FitCategory::NoFit
    }
}

fn random_findings(rng: &mut ChaCha8Rng, options: &[String]) -> Vec<FeatureFinding> {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|i| {
            let fits: BTreeMap<String, Option<FitCategory>> = options
                .iter()
                .map(|o| {
                    let c = rng
                        .random_bool(0.85)
                        .then(|| FitCategory::ALL[rng.random_range(0..5)]);
                    (o.clone(), c)
                })
                .collect();
            FeatureFinding {
                feature_key: format!("f{i}"),
                observed: Value::Real(rng.random()),
                query_id: format!("q{i}"),
                fits,
                rationale: String::new(),
                quality_note: None,
            }
        })
        .collect()
}

fn raw_oracle(findings: &[FeatureFinding], option: &str) -> f64 {
    let ws: Vec<f64> = findings
        .iter()
        .filter_map(|f| f.fits.get(option).copied().flatten())
        .map(weight)
        .collect();
    if ws.is_empty() {
        0.0
    } else {
        exact_sum(&ws) / ws.len() as f64
    }
}

fn rank_of(h: &Hypothesis, option: &str) -> usize {
    h.ranked_options.iter().position(|r| r.label == option).unwrap()
}

/// Simplex, agreement with a recomputed mean, and monotonicity under one
/// upgraded fit, over `n` random finding sets.
pub fn calibration_failures(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..n {
        let options = labels(rng.random_range(2..=5));
        let question = Question {
            case_id: format!("c{case}"),
            prompt_text: String::new(),
            options: options.clone(),
        };
        let findings = random_findings(&mut rng, &options);
        let cal = calibrate_confidence(&findings, &options).unwrap();
        let sum: f64 = cal.confidences.iter().map(|(_, c)| c).sum();
        if (sum - 1.0).abs() > 1e-9 || cal.confidences.iter().any(|(_, c)| !(0.0..=1.0).contains(c)) {
            bad.push(format!("#{case} off simplex: {:?}", cal.confidences));
        }
        let raw: Vec<f64> = options.iter().map(|o| raw_oracle(&findings, o)).collect();
        let total = exact_sum(&raw);
        for (i, (label, c)) in cal.confidences.iter().enumerate() {
            let want = if total > 0.0 { raw[i] / total } else { 1.0 / options.len() as f64 };
            if label != &options[i] || (c - want).abs() > 1e-12 {
                bad.push(format!("#{case} {label}: {c} vs {want}"));
            }
        }
        if (total == 0.0) != cal.note.is_some() {
            bad.push(format!("#{case} note {:?} with total {total}", cal.note));
        }

        // Upgrade one scored, non-excellent fit by one or more bands.
        let candidates: Vec<(usize, String)> = findings
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| {
                f.fits
                    .iter()
                    .filter(|(_, c)| matches!(c, Some(c) if *c != FitCategory::Excellent))
                    .map(move |(o, _)| (fi, o.clone()))
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let (fi, option) = candidates[rng.random_range(0..candidates.len())].clone();
        let mut upgraded = findings.clone();
        let old = upgraded[fi].fits[&option].unwrap();
        let better = FitCategory::ALL[rng.random_range(0..FitCategory::ALL.iter().position(|c| *c == old).unwrap())];
        upgraded[fi].fits.insert(option.clone(), Some(better));
        let before = calibrate_confidence(&findings, &options).unwrap();
        let after = calibrate_confidence(&upgraded, &options).unwrap();
        let idx = options.iter().position(|o| *o == option).unwrap();
        if after.raw_scores[idx].1 < before.raw_scores[idx].1 {
            bad.push(format!("#{case} raw score of {option} fell"));
        }
        let h0 = build_hypothesis(&question, findings.clone(), &before.confidences, vec![]);
        let h1 = build_hypothesis(&question, upgraded, &after.confidences, vec![]);
        if rank_of(&h1, &option) > rank_of(&h0, &option) {
            bad.push(format!("#{case} rank of {option} fell"));
        }
    }
    bad
}

/// score_fit against the hand band, plus symmetry about the range.
pub fn fit_band_failures(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let low: f64 = rng.random_range(-5.0..5.0);
        let high = if rng.random_bool(0.1) { low } else { low + rng.random_range(0.0..3.0) };
        let r = range(low, high);
        let x: f64 = rng.random_range(0.0..6.0);
        let observed = rng.random_range(low - 6.0..high + 6.0);
        let got = score_fit(observed, &r).unwrap().category;
        if got != fit_oracle(observed, low, high) {
            bad.push(format!("#{i} {observed} in [{low}, {high}]: {got:?}"));
        }
        let below = score_fit(low - x, &r).unwrap().category;
        let above = score_fit(high + x, &r).unwrap().category;
        if below != above {
            bad.push(format!("#{i} asymmetric at {x}: {below:?} vs {above:?}"));
        }
    }
    bad
}

// ------------------------------------------------------------------ fusion

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Coarse grids produce exact ties often enough to exercise tie-breaks.
    let raw: Vec<f64> = if rng.random_bool(0.3) {
        (0..n).map(|_| rng.random_range(0..4) as f64).collect()
    } else {
        (0..n).map(|_| rng.random::<f64>()).collect()
    };
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|x| x / total).collect()
}

fn first_max(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn hypothesis_from(options: &[String], conf: &[f64]) -> Hypothesis {
    Hypothesis {
        schema_version: "hypothesis-1".into(),
        case_id: "c".into(),
        ranked_options: options
            .iter()
            .zip(conf)
            .map(|(l, c)| RankedOption {
                label: l.clone(),
                confidence: *c,
            })
            .collect(),
        findings: vec![],
        data_quality_notes: vec![],
    }
}

/// Endpoint identities, simplex preservation and flag soundness.
pub fn fusion_failures(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let k = rng.random_range(2..=5);
        let options = labels(k);
        let cnn_p = random_simplex(&mut rng, k);
        let sql_p = random_simplex(&mut rng, k);
        let pairs: Vec<(String, f64)> = options.iter().cloned().zip(cnn_p.iter().copied()).collect();
        let cnn = CnnOutput::new(&pairs, &options).unwrap();
        let hyp = hypothesis_from(&options, &sql_p);
        let alpha = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let d = fuse(&cnn, &hyp, &options, alpha).unwrap();
        let fused: Vec<f64> = options.iter().map(|o| d.fused[o]).collect();
        for j in 0..k {
            let want = alpha * cnn_p[j] + (1.0 - alpha) * sql_p[j];
            if (fused[j] - want).abs() > 1e-15 {
                bad.push(format!("#{i} fused[{j}] {} vs {want}", fused[j]));
            }
        }
        if alpha == 1.0 && fused != cnn_p {
            bad.push(format!("#{i} alpha=1 is not the CNN vector"));
        }
        if alpha == 0.0 && fused != sql_p {
            bad.push(format!("#{i} alpha=0 is not the SQL vector"));
        }
        if (fused.iter().sum::<f64>() - 1.0).abs() > 1e-9 || fused.iter().any(|p| *p < 0.0) {
            bad.push(format!("#{i} off simplex {fused:?}"));
        }
        let (c, s) = (first_max(&cnn_p), first_max(&sql_p));
        if d.review_flag != (c != s) || d.branch_labels.cnn != options[c] || d.branch_labels.sql != options[s] {
            bad.push(format!("#{i} flag {} for cnn {c} sql {s}", d.review_flag));
        }
        if d.label != options[first_max(&fused)] {
            bad.push(format!("#{i} label {} vs fused argmax", d.label));
        }
    }
    bad
}

// --------------------------------------------------------- empirical ranges

/// A two-table schema: one global value per case and a local table whose
/// case-level value is the mean of its non-null rows.
pub fn range_manifest() -> SchemaManifest {
    let col = |n: &str| ColumnSchema {
        name: n.into(),
        dtype: Dtype::Real,
        unit: None,
        categorical_domain: None,
    };
    SchemaManifest {
        version: "ranges".into(),
        tables: vec![
            TableSchema {
                name: "g".into(),
                level: Level::Global,
                columns: vec![col("x")],
            },
            TableSchema {
                name: "c".into(),
                level: Level::LocalCellular,
                columns: vec![col("v")],
            },
        ],
    }
}

pub struct SplitCase {
    pub label: String,
    pub x: Option<f64>,
    pub v: Vec<Option<f64>>,
}

pub fn random_split(rng: &mut ChaCha8Rng, options: &[String]) -> Vec<SplitCase> {
    let n = rng.random_range(0..=40);
    let scale = 10f64.powi(rng.random_range(-3..4));
    (0..n)
        .map(|_| SplitCase {
            label: options[rng.random_range(0..options.len())].clone(),
            x: rng.random_bool(0.95).then(|| rng.random_range(-1.0..1.0) * scale),
            v: (0..rng.random_range(0..8))
                .map(|_| rng.random_bool(0.85).then(|| rng.random_range(0.0..2.0) * scale))
                .collect(),
        })
        .collect()
}

pub fn split_bundles(manifest: &SchemaManifest, split: &[SplitCase]) -> Vec<CaseBundle> {
    let real = |x: &Option<f64>| x.map_or(Value::Null, Value::Real);
    split
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let g = FeatureTable::from_rows(manifest.tables[0].clone(), vec![vec![real(&c.x)]]).unwrap();
            let l = FeatureTable::from_rows(manifest.tables[1].clone(), c.v.iter().map(|v| vec![real(v)]).collect())
                .unwrap();
            CaseBundle::new(manifest, format!("case_{i:03}"), vec![g, l], None, Some(c.label.clone())).unwrap()
        })
        .collect()
}

/// Ranges over random splits against sort-and-interpolate by hand.
pub fn range_failures(seed: u64, splits: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest = range_manifest();
    let keys = vec!["g.x".to_string(), "c.v".to_string()];
    let mut bad = Vec::new();
    for s in 0..splits {
        let options = labels(rng.random_range(2..=3));
        let split = random_split(&mut rng, &options);
        let q = if rng.random_bool(0.5) { 0.05 } else { rng.random_range(0.001..0.499) };
        let bundles = split_bundles(&manifest, &split);
        let (ranges, _) = compute_empirical_ranges(&bundles, &manifest, &keys, &options, q).unwrap();
        let mut expected = 0;
        for key in &keys {
            for o in &options {
                let values: Vec<f64> = split
                    .iter()
                    .filter(|c| &c.label == o)
                    .filter_map(|c| {
                        if key == "g.x" {
                            c.x
                        } else {
                            let vs: Vec<f64> = c.v.iter().flatten().copied().collect();
                            (!vs.is_empty()).then(|| exact_sum(&vs) / vs.len() as f64)
                        }
                    })
                    .collect();
                let got = ranges.iter().find(|r| &r.feature_key == key && &r.option_label == o);
                match (values.len() >= 3, got) {
                    (false, None) => {}
                    (true, Some(r)) => {
                        expected += 1;
                        let (lo, hi) = (quantile_oracle(&values, q), quantile_oracle(&values, 1.0 - q));
                        if !reals_match(r.low, lo) || !reals_match(r.high, hi) {
                            bad.push(format!("split {s} {key}/{o}: [{}, {}] vs [{lo}, {hi}]", r.low, r.high));
                        }
                    }
                    (support, got) => bad.push(format!("split {s} {key}/{o}: support {support}, got {got:?}")),
                }
            }
        }
        if ranges.len() != expected {
            bad.push(format!("split {s}: {} ranges, expected {expected}", ranges.len()));
        }
    }
    bad
}

// -------------------------------------------------------------- end to end


/// Empirical ranges of the core features over the fixture training split.
pub fn fixture_ranges(manifest: &SchemaManifest) -> RangeBook {
    let training = load_training_split(manifest, &fixtures().join("train")).unwrap();
    let keys: Vec<String> = CORE_FEATURES.iter().map(|s| s.to_string()).collect();
    let (ranges, _) = compute_empirical_ranges(&training, manifest, &keys, &options(), 0.05).unwrap();
    RangeBook::new(ranges)
}

pub fn fixture_questions() -> QuestionSet {
    QuestionSet::from_json(&std::fs::read_to_string(fixtures().join("question.json")).unwrap()).unwrap()
}

/// The 20-case evaluation fixture under the template backend.
pub fn run_eval(mode: Mode, out: Option<&Path>, workers: usize) -> (EvalSummary, BatchResult) {
    let manifest = SchemaManifest::canonical();
    let ranges = fixture_ranges(&manifest);
    let backend = TemplateBackend::new(manifest.clone());
    let settings = RunSettings {
        mode,
        ..RunSettings::default()
    };
    let ctx = PipelineContext {
        manifest: &manifest,
        ranges: &ranges,
        backend: &backend,
        settings: &settings,
    };
    batch_eval(&fixtures().join("eval"), &fixture_questions(), &ctx, workers, out).unwrap()
}

/// Every file under `root`, by relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Re-validates and re-executes every trace entry of `report` against the
/// freshly ingested case; rows must agree exactly.
pub fn replay_report(report: &AuditReport, manifest: &SchemaManifest) -> Vec<String> {
    let mut bad = Vec::new();
    if let Err(e) = report.check_closure() {
        bad.push(format!("{}: {e}", report.case_id));
    }
    let bundle = ingest_case_dir(manifest, &fixtures().join("eval").join(&report.case_id)).unwrap();
    for t in &report.sql_trace {
        let vq = match validate_pipeline(&t.canonical_text, manifest, SourceAgent::Manual) {
            Ok(vq) => vq,
            Err(e) => {
                bad.push(format!("{} {}: no longer validates: {e}", report.case_id, t.query_id));
                continue;
            }
        };
        if vq.canonical_text() != t.canonical_text || !vq.repair_log().is_empty() {
            bad.push(format!("{} {}: canonical text is not a fixed point", report.case_id, t.query_id));
        }
        match (execute(&vq, &bundle), &t.error) {
            (Ok(r), None) => {
                if r.column_names != t.column_names || r.rows != t.rows {
                    bad.push(format!("{} {}: rows differ", report.case_id, t.query_id));
                }
            }
            (Err(_), Some(_)) => {}
            (got, want) => bad.push(format!("{} {}: {got:?} vs recorded {want:?}", report.case_id, t.query_id)),
        }
    }
    bad
}

/// Replays the report files written under `out`: the re-executed rows,
/// serialised the same way, must equal the recorded ones byte for byte.
pub fn replay_written(out: &Path, manifest: &SchemaManifest) -> (usize, Vec<String>) {
    let mut bad = Vec::new();
    let mut n = 0;
    let mut files: Vec<_> = std::fs::read_dir(out.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    for path in files {
        n += 1;
        let text = std::fs::read_to_string(&path).unwrap();
        let report: AuditReport = serde_json::from_str(&text).unwrap();
        let recorded: serde_json::Value = serde_json::from_str(&text).unwrap();
        let bundle = ingest_case_dir(manifest, &fixtures().join("eval").join(&report.case_id)).unwrap();
        for (i, t) in report.sql_trace.iter().enumerate() {
            let Ok(vq) = validate_pipeline(&t.canonical_text, manifest, SourceAgent::Manual) else {
                bad.push(format!("{}: {} does not validate", report.case_id, t.query_id));
                continue;
            };
            if let Ok(r) = execute(&vq, &bundle) {
                let fresh = to_canonical_json(&r.rows).unwrap();
                let stored = to_canonical_json(&recorded["sql_trace"][i]["rows"]).unwrap();
                if fresh != stored {
                    bad.push(format!("{} {}: written rows differ", report.case_id, t.query_id));
                }
            }
        }
        let ids: Vec<&str> = report.sql_trace.iter().map(|t| t.query_id.as_str()).collect();
        for f in report.hypothesis.iter().flat_map(|h| &h.findings) {
            if !ids.contains(&f.query_id.as_str()) {
                bad.push(format!("{}: dangling {}", report.case_id, f.query_id));
            }
        }
    }
    (n, bad)
}
