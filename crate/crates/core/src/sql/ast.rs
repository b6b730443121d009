use serde::Serialize;

use crate::store::Value;

/// A parsed single-table SELECT.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Query {
    pub projections: Vec<SelectItem>,
    pub from: String,
    pub selection: Option<Expr>,
    pub group_by: Vec<Expr>,
    pub having: Option<Expr>,
    pub order_by: Vec<OrderByExpr>,
    pub limit: Option<u64>,
}

impl Query {
    /// True when the query produces one row per group (explicit GROUP BY or
    /// any aggregate in the select list, HAVING or ORDER BY).
    pub fn is_aggregate(&self) -> bool {
        !self.group_by.is_empty()
            || self.having.is_some()
            || self.projections.iter().any(|p| match p {
                SelectItem::Expr { expr, .. } => expr.contains_aggregate(),
                SelectItem::Wildcard => false,
            })
            || self.order_by.iter().any(|o| o.expr.contains_aggregate())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SelectItem {
    Wildcard,
    Expr { expr: Expr, alias: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SortDirection {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderByExpr {
    pub expr: Expr,
    pub direction: SortDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Expr {
    Column(String),
    Literal(Value),
    Unary {
        op: UnaryOp,
        expr: Box<Expr>,
    },
    Binary {
        op: BinaryOp,
        left: Box<Expr>,
        right: Box<Expr>,
    },
    InList {
        expr: Box<Expr>,
        list: Vec<Value>,
    },
    Between {
        expr: Box<Expr>,
        low: Value,
        high: Value,
    },
    Scalar {
        func: ScalarFunc,
        args: Vec<Expr>,
    },
    Aggregate {
        func: AggFunc,
        arg: AggArg,
        distinct: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum AggArg {
    Star,
    Expr(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Eq => "=",
            BinaryOp::NotEq => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::LtEq => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::GtEq => ">=",
            BinaryOp::And => "AND",
            BinaryOp::Or => "OR",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinaryOp::Eq | BinaryOp::NotEq | BinaryOp::Lt | BinaryOp::LtEq | BinaryOp::Gt | BinaryOp::GtEq
        )
    }

    pub fn is_arithmetic(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div)
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinaryOp::And | BinaryOp::Or)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScalarFunc {
    Sqrt,
    Abs,
    Round,
}

impl ScalarFunc {
    pub const ALL: [ScalarFunc; 3] = [ScalarFunc::Sqrt, ScalarFunc::Abs, ScalarFunc::Round];

    pub fn name(self) -> &'static str {
        match self {
            ScalarFunc::Sqrt => "SQRT",
            ScalarFunc::Abs => "ABS",
            ScalarFunc::Round => "ROUND",
        }
    }

    pub fn from_name(name: &str) -> Option<ScalarFunc> {
        ScalarFunc::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    Min,
    Max,
    Stddev,
}

impl AggFunc {
    pub const ALL: [AggFunc; 6] = [
        AggFunc::Count,
        AggFunc::Sum,
        AggFunc::Avg,
        AggFunc::Min,
        AggFunc::Max,
        AggFunc::Stddev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "COUNT",
            AggFunc::Sum => "SUM",
            AggFunc::Avg => "AVG",
            AggFunc::Min => "MIN",
            AggFunc::Max => "MAX",
            AggFunc::Stddev => "STDDEV",
        }
    }

    pub fn from_name(name: &str) -> Option<AggFunc> {
        AggFunc::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(name))
    }
}

impl Expr {
    pub fn column(name: &str) -> Expr {
        Expr::Column(name.to_owned())
    }

    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
        Expr::Binary {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn contains_aggregate(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| found |= matches!(e, Expr::Aggregate { .. }));
        found
    }

    /// Pre-order traversal over this expression and its children, including
    /// aggregate arguments.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Column(_) | Expr::Literal(_) => {}
            Expr::Unary { expr, .. } | Expr::InList { expr, .. } | Expr::Between { expr, .. } => {
                expr.walk(f)
            }
            Expr::Binary { left, right, .. } => {
                left.walk(f);
                right.walk(f);
            }
            Expr::Scalar { args, .. } => args.iter().for_each(|a| a.walk(f)),
            Expr::Aggregate { arg, .. } => {
                if let AggArg::Expr(e) = arg {
                    e.walk(f)
                }
            }
        }
    }

    /// Mutable counterpart of [`Expr::walk`].
    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Expr)) {
        f(self);
        match self {
            Expr::Column(_) | Expr::Literal(_) => {}
            Expr::Unary { expr, .. } | Expr::InList { expr, .. } | Expr::Between { expr, .. } => {
                expr.walk_mut(f)
            }
            Expr::Binary { left, right, .. } => {
                left.walk_mut(f);
                right.walk_mut(f);
            }
            Expr::Scalar { args, .. } => args.iter_mut().for_each(|a| a.walk_mut(f)),
            Expr::Aggregate { arg, .. } => {
                if let AggArg::Expr(e) = arg {
                    e.walk_mut(f)
                }
            }
        }
    }
}

impl Query {
    /// Every expression in the query, in clause order.
    pub fn expressions(&self) -> impl Iterator<Item = &Expr> {
        self.projections
            .iter()
            .filter_map(|p| match p {
                SelectItem::Expr { expr, .. } => Some(expr),
                SelectItem::Wildcard => None,
            })
            .chain(self.selection.iter())
            .chain(self.group_by.iter())
            .chain(self.having.iter())
            .chain(self.order_by.iter().map(|o| &o.expr))
    }

    pub fn expressions_mut(&mut self) -> impl Iterator<Item = &mut Expr> {
        self.projections
            .iter_mut()
            .filter_map(|p| match p {
                SelectItem::Expr { expr, .. } => Some(expr),
                SelectItem::Wildcard => None,
            })
            .chain(self.selection.iter_mut())
            .chain(self.group_by.iter_mut())
            .chain(self.having.iter_mut())
            .chain(self.order_by.iter_mut().map(|o| &mut o.expr))
    }

    pub fn aliases(&self) -> impl Iterator<Item = &str> {
        self.projections.iter().filter_map(|p| match p {
            SelectItem::Expr { alias: Some(a), .. } => Some(a.as_str()),
            _ => None,
        })
    }
}
