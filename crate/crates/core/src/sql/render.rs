use super::ast::*;
use crate::store::Value;

/// Canonical text for a query: uppercase keywords, single spaces, and only
/// the parentheses the grammar needs. `parse(render(q)) == q`.
pub fn render(query: &Query) -> String {
    let mut out = String::from("SELECT ");
    let items: Vec<String> = query
        .projections
        .iter()
        .map(|item| match item {
            SelectItem::Wildcard => "*".to_owned(),
            SelectItem::Expr { expr, alias: None } => render_expr(expr),
            SelectItem::Expr {
                expr,
                alias: Some(a),
            } => format!("{} AS {a}", render_expr(expr)),
        })
        .collect();
    out.push_str(&items.join(", "));
    out.push_str(" FROM ");
    out.push_str(&query.from);
    if let Some(w) = &query.selection {
        out.push_str(" WHERE ");
        out.push_str(&render_expr(w));
    }
    if !query.group_by.is_empty() {
        let keys: Vec<String> = query.group_by.iter().map(render_expr).collect();
        out.push_str(" GROUP BY ");
        out.push_str(&keys.join(", "));
    }
    if let Some(h) = &query.having {
        out.push_str(" HAVING ");
        out.push_str(&render_expr(h));
    }
    if !query.order_by.is_empty() {
        let keys: Vec<String> = query
            .order_by
            .iter()
            .map(|o| match o.direction {
                SortDirection::Asc => render_expr(&o.expr),
                SortDirection::Desc => format!("{} DESC", render_expr(&o.expr)),
            })
            .collect();
        out.push_str(" ORDER BY ");
        out.push_str(&keys.join(", "));
    }
    if let Some(n) = query.limit {
        out.push_str(&format!(" LIMIT {n}"));
    }
    out
}

const PREC_OR: u8 = 1;
const PREC_AND: u8 = 2;
const PREC_NOT: u8 = 3;
const PREC_CMP: u8 = 4;
const PREC_ADD: u8 = 5;
const PREC_MUL: u8 = 6;
const PREC_NEG: u8 = 7;
const PREC_ATOM: u8 = 8;

fn precedence(expr: &Expr) -> u8 {
    match expr {
        Expr::Binary { op, .. } => binary_precedence(*op),
        Expr::Unary { op: UnaryOp::Not, .. } => PREC_NOT,
        Expr::Unary { op: UnaryOp::Neg, .. } => PREC_NEG,
        Expr::InList { .. } | Expr::Between { .. } => PREC_CMP,
        _ => PREC_ATOM,
    }
}

fn binary_precedence(op: BinaryOp) -> u8 {
    match op {
        BinaryOp::Or => PREC_OR,
        BinaryOp::And => PREC_AND,
        BinaryOp::Add | BinaryOp::Sub => PREC_ADD,
        BinaryOp::Mul | BinaryOp::Div => PREC_MUL,
        _ => PREC_CMP,
    }
}

fn wrap(expr: &Expr, parens: bool) -> String {
    if parens {
        format!("({})", render_expr(expr))
    } else {
        render_expr(expr)
    }
}

pub fn render_literal(value: &Value) -> String {
    match value {
        Value::Null => "NULL".into(),
        Value::Int(i) => i.to_string(),
        // Debug formatting always carries a '.' or an exponent, so the text
        // reparses as a real with identical bits.
        Value::Real(r) => format!("{r:?}"),
        Value::Text(s) => format!("'{}'", s.replace('\'', "''")),
    }
}

pub fn render_expr(expr: &Expr) -> String {
    match expr {
        Expr::Column(c) => c.clone(),
        Expr::Literal(v) => render_literal(v),
        Expr::Unary {
            op: UnaryOp::Neg,
            expr,
        } => {
            // A bare numeric literal would fold into a negative literal on
            // reparse, and `--` would lex as a comment.
            let bare = matches!(**expr, Expr::Column(_) | Expr::Scalar { .. } | Expr::Aggregate { .. });
            format!("-{}", wrap(expr, !bare))
        }
        Expr::Unary {
            op: UnaryOp::Not,
            expr,
        } => format!("NOT {}", wrap(expr, precedence(expr) < PREC_NOT)),
        Expr::Binary { op, left, right } => {
            let p = binary_precedence(*op);
            let left_parens = if op.is_comparison() {
                precedence(left) <= p
            } else {
                precedence(left) < p
            };
            let right_parens = precedence(right) <= p;
            format!(
                "{} {} {}",
                wrap(left, left_parens),
                op.symbol(),
                wrap(right, right_parens)
            )
        }
        Expr::InList { expr, list } => {
            let items: Vec<String> = list.iter().map(render_literal).collect();
            format!("{} IN ({})", wrap(expr, precedence(expr) <= PREC_CMP), items.join(", "))
        }
        Expr::Between { expr, low, high } => format!(
            "{} BETWEEN {} AND {}",
            wrap(expr, precedence(expr) <= PREC_CMP),
            render_literal(low),
            render_literal(high)
        ),
        Expr::Scalar { func, args } => {
            let args: Vec<String> = args.iter().map(render_expr).collect();
            format!("{}({})", func.name(), args.join(", "))
        }
        Expr::Aggregate { func, arg, distinct } => {
            let inner = match arg {
                AggArg::Star => "*".to_owned(),
                AggArg::Expr(e) => render_expr(e),
            };
            if *distinct {
                format!("{}(DISTINCT {inner})", func.name())
            } else {
                format!("{}({inner})", func.name())
            }
        }
    }
}
