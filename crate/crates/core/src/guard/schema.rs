use std::fmt;

use serde::Serialize;

use crate::sql::{AggArg, AggFunc, BinaryOp, Expr, Query, ScalarFunc, SelectItem, UnaryOp};
use crate::store::{Dtype, SchemaManifest, TableSchema, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemaViolation {
    UnknownTable { table: String },
    UnknownColumn { column: String, table: String },
    TypeError { message: String },
    UngroupedColumn { column: String },
}

impl SchemaViolation {
    /// Violations an identifier repair can address.
    pub fn is_identifier(&self) -> bool {
        matches!(self, SchemaViolation::UnknownTable { .. } | SchemaViolation::UnknownColumn { .. })
    }
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaViolation::UnknownTable { table } => write!(f, "UnknownTable({table:?})"),
            SchemaViolation::UnknownColumn { column, table } => {
                write!(f, "UnknownColumn({column:?}, table {table:?})")
            }
            SchemaViolation::TypeError { message } => write!(f, "TypeError({message:?})"),
            SchemaViolation::UngroupedColumn { column } => write!(f, "UngroupedColumn({column:?})"),
        }
    }
}

/// Static type of an expression. `Any` stands in for unresolved columns so
/// one unknown identifier does not cascade into type errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqlType {
    Int,
    Real,
    Text,
    Bool,
    Null,
    Any,
}

impl SqlType {
    fn numeric_ok(self) -> bool {
        matches!(self, SqlType::Int | SqlType::Real | SqlType::Null | SqlType::Any)
    }

    fn bool_ok(self) -> bool {
        matches!(self, SqlType::Bool | SqlType::Null | SqlType::Any)
    }

    fn describe(self) -> &'static str {
        match self {
            SqlType::Int => "integer",
            SqlType::Real => "real",
            SqlType::Text => "text",
            SqlType::Bool => "boolean",
            SqlType::Null => "null",
            SqlType::Any => "unknown",
        }
    }

    fn from_dtype(d: Dtype) -> SqlType {
        match d {
            Dtype::Integer => SqlType::Int,
            Dtype::Real => SqlType::Real,
            Dtype::Text => SqlType::Text,
        }
    }

    fn of_value(v: &Value) -> SqlType {
        match v {
            Value::Null => SqlType::Null,
            Value::Int(_) => SqlType::Int,
            Value::Real(_) => SqlType::Real,
            Value::Text(_) => SqlType::Text,
        }
    }
}

fn comparable(a: SqlType, b: SqlType) -> bool {
    use SqlType::*;
    match (a, b) {
        (Bool, _) | (_, Bool) => false,
        (Null | Any, _) | (_, Null | Any) => true,
        (Text, Text) => true,
        (Int | Real, Int | Real) => true,
        _ => false,
    }
}

struct Checker<'a> {
    table: &'a TableSchema,
    violations: Vec<SchemaViolation>,
}

impl Checker<'_> {
    fn type_error(&mut self, message: String) {
        let v = SchemaViolation::TypeError { message };
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }

    fn infer(&mut self, expr: &Expr) -> SqlType {
        match expr {
            Expr::Column(name) => match self.table.column(name) {
                Some(c) => SqlType::from_dtype(c.dtype),
                None => {
                    let v = SchemaViolation::UnknownColumn {
                        column: name.clone(),
                        table: self.table.name.clone(),
                    };
                    if !self.violations.contains(&v) {
                        self.violations.push(v);
                    }
                    SqlType::Any
                }
            },
            Expr::Literal(v) => SqlType::of_value(v),
            Expr::Unary { op: UnaryOp::Neg, expr } => {
                let t = self.infer(expr);
                if !t.numeric_ok() {
                    self.type_error(format!("negation of {} value", t.describe()));
                    return SqlType::Any;
                }
                t
            }
            Expr::Unary { op: UnaryOp::Not, expr } => {
                let t = self.infer(expr);
                if !t.bool_ok() {
                    self.type_error(format!("NOT on {} value", t.describe()));
                }
                SqlType::Bool
            }
            Expr::Binary { op, left, right } => {
                let (l, r) = (self.infer(left), self.infer(right));
                if op.is_arithmetic() {
                    if !l.numeric_ok() || !r.numeric_ok() {
                        self.type_error(format!(
                            "arithmetic {} between {} and {}",
                            op.symbol(),
                            l.describe(),
                            r.describe()
                        ));
                        return SqlType::Any;
                    }
                    match (op, l, r) {
                        (BinaryOp::Div, _, _) => SqlType::Real,
                        (_, SqlType::Int, SqlType::Int) => SqlType::Int,
                        (_, SqlType::Real, _) | (_, _, SqlType::Real) => SqlType::Real,
                        _ => SqlType::Any,
                    }
                } else if op.is_logical() {
                    if !l.bool_ok() || !r.bool_ok() {
                        self.type_error(format!(
                            "{} between {} and {}",
                            op.symbol(),
                            l.describe(),
                            r.describe()
                        ));
                    }
                    SqlType::Bool
                } else {
                    if !comparable(l, r) {
                        self.type_error(format!(
                            "comparison {} between {} and {}",
                            op.symbol(),
                            l.describe(),
                            r.describe()
                        ));
                    }
                    SqlType::Bool
                }
            }
            Expr::InList { expr, list } => {
                let t = self.infer(expr);
                for v in list {
                    let lt = SqlType::of_value(v);
                    if !comparable(t, lt) {
                        self.type_error(format!("IN list mixes {} and {}", t.describe(), lt.describe()));
                    }
                }
                SqlType::Bool
            }
            Expr::Between { expr, low, high } => {
                let t = self.infer(expr);
                for v in [low, high] {
                    let bt = SqlType::of_value(v);
                    if !comparable(t, bt) {
                        self.type_error(format!("BETWEEN mixes {} and {}", t.describe(), bt.describe()));
                    }
                }
                SqlType::Bool
            }
            Expr::Scalar { func, args } => {
                let types: Vec<SqlType> = args.iter().map(|a| self.infer(a)).collect();
                if !types[0].numeric_ok() {
                    let what = match &args[0] {
                        Expr::Column(_) => format!("{} column", types[0].describe()),
                        _ => format!("{} value", types[0].describe()),
                    };
                    self.type_error(format!("{} on {what}", func.name()));
                    return SqlType::Any;
                }
                if let Some(digits) = types.get(1) {
                    if !matches!(digits, SqlType::Int | SqlType::Null | SqlType::Any) {
                        self.type_error("ROUND precision must be an integer".into());
                    }
                }
                match func {
                    ScalarFunc::Sqrt | ScalarFunc::Round => SqlType::Real,
                    ScalarFunc::Abs => types[0],
                }
            }
            Expr::Aggregate { func, arg, .. } => {
                let t = match arg {
                    AggArg::Star => return SqlType::Int,
                    AggArg::Expr(e) => self.infer(e),
                };
                if t == SqlType::Bool {
                    self.type_error(format!("{} on boolean value", func.name()));
                    return SqlType::Any;
                }
                match func {
                    AggFunc::Count => SqlType::Int,
                    AggFunc::Min | AggFunc::Max => t,
                    AggFunc::Sum | AggFunc::Avg | AggFunc::Stddev => {
                        if !t.numeric_ok() {
                            let what = match arg {
                                AggArg::Expr(e) if matches!(**e, Expr::Column(_)) => {
                                    format!("{} column", t.describe())
                                }
                                _ => format!("{} value", t.describe()),
                            };
                            self.type_error(format!("{} on {what}", func.name()));
                            return SqlType::Any;
                        }
                        match (func, t) {
                            (AggFunc::Sum, SqlType::Int) => SqlType::Int,
                            _ => SqlType::Real,
                        }
                    }
                }
            }
        }
    }

    /// Column references outside aggregates must be grouping keys.
    fn check_grouped(&mut self, expr: &Expr, group_by: &[Expr], aliases: &[&str]) {
        if group_by.contains(expr) {
            return;
        }
        match expr {
            Expr::Column(c) => {
                if !aliases.contains(&c.as_str()) {
                    let v = SchemaViolation::UngroupedColumn { column: c.clone() };
                    if !self.violations.contains(&v) {
                        self.violations.push(v);
                    }
                }
            }
            Expr::Literal(_) | Expr::Aggregate { .. } => {}
            Expr::Unary { expr, .. } | Expr::InList { expr, .. } | Expr::Between { expr, .. } => {
                self.check_grouped(expr, group_by, aliases)
            }
            Expr::Binary { left, right, .. } => {
                self.check_grouped(left, group_by, aliases);
                self.check_grouped(right, group_by, aliases);
            }
            Expr::Scalar { args, .. } => {
                for a in args {
                    self.check_grouped(a, group_by, aliases);
                }
            }
        }
    }
}

/// Static types of each output column, in select-list order (wildcards
/// expanded). Returns `None` when the query does not type-check.
pub fn output_types(query: &Query, manifest: &SchemaManifest) -> Option<Vec<SqlType>> {
    let table = manifest.table(&query.from)?;
    let mut checker = Checker {
        table,
        violations: Vec::new(),
    };
    let mut out = Vec::new();
    for item in &query.projections {
        match item {
            SelectItem::Wildcard => out.extend(table.columns.iter().map(|c| SqlType::from_dtype(c.dtype))),
            SelectItem::Expr { expr, .. } => out.push(checker.infer(expr)),
        }
    }
    checker.violations.is_empty().then_some(out)
}

/// Resolves every table and column reference and type-checks every
/// expression. An empty result means the query is executable.
pub fn check_schema(query: &Query, manifest: &SchemaManifest) -> Vec<SchemaViolation> {
    let Some(table) = manifest.table(&query.from) else {
        return vec![SchemaViolation::UnknownTable {
            table: query.from.clone(),
        }];
    };
    let mut checker = Checker {
        table,
        violations: Vec::new(),
    };
    let aliases: Vec<&str> = query.aliases().collect();

    for item in &query.projections {
        if let SelectItem::Expr { expr, .. } = item {
            if checker.infer(expr) == SqlType::Bool {
                checker.type_error("boolean expression in select list".into());
            }
        }
    }
    if let Some(w) = &query.selection {
        if !checker.infer(w).bool_ok() {
            checker.type_error("WHERE clause is not a boolean condition".into());
        }
    }
    for g in &query.group_by {
        if checker.infer(g) == SqlType::Bool {
            checker.type_error("boolean expression in GROUP BY".into());
        }
    }
    if let Some(h) = &query.having {
        if !checker.infer(h).bool_ok() {
            checker.type_error("HAVING clause is not a boolean condition".into());
        }
    }
    for o in &query.order_by {
        let is_alias = matches!(&o.expr, Expr::Column(c) if aliases.contains(&c.as_str()));
        if !is_alias && checker.infer(&o.expr) == SqlType::Bool {
            checker.type_error("boolean expression in ORDER BY".into());
        }
    }

    if query.is_aggregate() {
        for item in &query.projections {
            match item {
                SelectItem::Wildcard => checker.violations.push(SchemaViolation::UngroupedColumn {
                    column: "*".into(),
                }),
                SelectItem::Expr { expr, .. } => checker.check_grouped(expr, &query.group_by, &[]),
            }
        }
        if let Some(h) = &query.having {
            checker.check_grouped(h, &query.group_by, &[]);
        }
        for o in &query.order_by {
            checker.check_grouped(&o.expr, &query.group_by, &aliases);
        }
    }
    checker.violations
}
