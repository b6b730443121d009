use super::ast::*;
use super::lexer::{symbol_text, tokenize, Token, TokenKind};
use super::{is_reserved_word, ParseError, SyntaxErrorKind, UNSUPPORTED_KEYWORDS};
use crate::store::Value;

/// Parses exactly one SELECT statement of the supported subset.
pub fn parse(text: &str) -> Result<Query, ParseError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        agg_depth: 0,
        aggregates_allowed: true,
        query_complete: false,
    };
    parser.parse_query()
}

/// Which feature name to report for an unsupported keyword.
fn feature_name(keyword: &str) -> String {
    match keyword {
        "JOIN" | "INNER" | "LEFT" | "RIGHT" | "FULL" | "OUTER" | "CROSS" | "NATURAL" | "ON"
        | "USING" => "JOIN".into(),
        "UNION" | "INTERSECT" | "EXCEPT" => format!("set operation {keyword}"),
        "OVER" | "PARTITION" | "WINDOW" | "QUALIFY" => "window function".into(),
        "WITH" => "common table expression (WITH)".into(),
        "CASE" | "WHEN" | "THEN" | "ELSE" | "END" => "CASE expression".into(),
        "IS" => "IS [NOT] NULL predicate".into(),
        "EXISTS" => "subquery".into(),
        other => other.to_owned(),
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    agg_depth: usize,
    aggregates_allowed: bool,
    /// Set once the FROM table has been read; any later point is a clause
    /// boundary where the text so far forms a complete query.
    query_complete: bool,
}

const SELECT_ITEM_NEXT: &[&str] = &[",", "AS", "FROM"];
const AFTER_FROM: &[&str] = &["WHERE", "GROUP", "HAVING", "ORDER", "LIMIT", "end of input"];
const AFTER_WHERE: &[&str] = &[
    "AND", "OR", "NOT", "IN", "BETWEEN", "GROUP", "HAVING", "ORDER", "LIMIT", "end of input",
];
const AFTER_GROUP: &[&str] = &[",", "HAVING", "ORDER", "LIMIT", "end of input"];
const AFTER_HAVING: &[&str] = &["AND", "OR", "NOT", "IN", "BETWEEN", "ORDER", "LIMIT", "end of input"];
const AFTER_ORDER: &[&str] = &[",", "ASC", "DESC", "LIMIT", "end of input"];
const AFTER_LIMIT: &[&str] = &["end of input"];

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_at(&self, offset: usize) -> &Token {
        let i = (self.pos + offset).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if !matches!(t.kind, TokenKind::Eof) {
            self.pos += 1;
        }
        t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        self.peek().is_keyword(kw)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if &self.peek().kind == kind {
            self.advance();
            true
        } else {
            false
        }
    }

    fn unsupported_word(&self) -> Option<String> {
        match &self.peek().kind {
            TokenKind::Word(w) => {
                let upper = w.to_ascii_uppercase();
                UNSUPPORTED_KEYWORDS.contains(&upper.as_str()).then_some(upper)
            }
            _ => None,
        }
    }

    fn syntax(&self, kind: SyntaxErrorKind, expected: &[&str], message: impl Into<String>) -> ParseError {
        let token = self.peek();
        ParseError::Syntax {
            kind,
            position: token.start,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: token.describe(),
            message: message.into(),
        }
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        if let Some(keyword) = self.unsupported_word() {
            return ParseError::Unsupported {
                feature: feature_name(&keyword),
                keyword,
                position: self.peek().start,
                trailing: self.query_complete,
            };
        }
        let msg = format!(
            "expected {}, found {}",
            expected.join(" or "),
            self.peek().describe()
        );
        self.syntax(SyntaxErrorKind::UnexpectedToken, expected, msg)
    }

    fn invalid(&self, position: usize, message: impl Into<String>) -> ParseError {
        let found = self
            .tokens
            .iter()
            .find(|t| t.start == position)
            .map(Token::describe)
            .unwrap_or_default();
        ParseError::Syntax {
            kind: SyntaxErrorKind::InvalidStructure,
            position,
            expected: Vec::new(),
            found,
            message: message.into(),
        }
    }

    fn expect_kind(&mut self, kind: TokenKind) -> Result<Token, ParseError> {
        if self.peek().kind == kind {
            Ok(self.advance())
        } else {
            Err(self.unexpected(&[symbol_text(&kind)]))
        }
    }

    fn parse_query(&mut self) -> Result<Query, ParseError> {
        if !self.eat_keyword("SELECT") {
            return Err(self.unexpected(&["SELECT"]));
        }
        if self.at_keyword("DISTINCT") || self.at_keyword("ALL") || self.at_keyword("TOP") {
            let keyword = self.peek().describe().to_ascii_uppercase();
            return Err(ParseError::Unsupported {
                feature: format!("SELECT {keyword}"),
                keyword,
                position: self.peek().start,
                trailing: false,
            });
        }
        let projections = self.parse_select_list()?;
        if !self.eat_keyword("FROM") {
            return Err(self.unexpected(SELECT_ITEM_NEXT));
        }
        let from = self.parse_table_name()?;
        self.query_complete = true;
        if self.at_keyword("AS") {
            return Err(ParseError::Unsupported {
                feature: "table alias".into(),
                keyword: "AS".into(),
                position: self.peek().start,
                trailing: false,
            });
        }

        let mut next_expected = AFTER_FROM;
        let selection = if self.eat_keyword("WHERE") {
            self.aggregates_allowed = false;
            let e = self.parse_expr()?;
            self.aggregates_allowed = true;
            next_expected = AFTER_WHERE;
            Some(e)
        } else {
            None
        };

        let mut group_by = Vec::new();
        if self.at_keyword("GROUP") {
            self.advance();
            if !self.eat_keyword("BY") {
                return Err(self.unexpected(&["BY"]));
            }
            self.aggregates_allowed = false;
            loop {
                group_by.push(self.parse_expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            self.aggregates_allowed = true;
            next_expected = AFTER_GROUP;
        }

        let having_pos = self.peek().start;
        let having = if self.eat_keyword("HAVING") {
            let e = self.parse_expr()?;
            next_expected = AFTER_HAVING;
            Some(e)
        } else {
            None
        };

        let mut order_by = Vec::new();
        if self.at_keyword("ORDER") {
            self.advance();
            if !self.eat_keyword("BY") {
                return Err(self.unexpected(&["BY"]));
            }
            loop {
                let expr = self.parse_expr()?;
                let direction = if self.eat_keyword("DESC") {
                    SortDirection::Desc
                } else {
                    self.eat_keyword("ASC");
                    SortDirection::Asc
                };
                order_by.push(OrderByExpr { expr, direction });
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            next_expected = AFTER_ORDER;
        }

        let limit = if self.eat_keyword("LIMIT") {
            let token = self.peek().clone();
            let n = match &token.kind {
                TokenKind::Number(text) if text.bytes().all(|b| b.is_ascii_digit()) => {
                    text.parse::<u64>().map_err(|_| {
                        self.syntax(
                            SyntaxErrorKind::NumberOutOfRange,
                            &["integer"],
                            "LIMIT out of range",
                        )
                    })?
                }
                _ => {
                    return Err(self.syntax(
                        SyntaxErrorKind::UnexpectedToken,
                        &["non-negative integer"],
                        format!("expected non-negative integer after LIMIT, found {}", token.describe()),
                    ))
                }
            };
            self.advance();
            next_expected = AFTER_LIMIT;
            Some(n)
        } else {
            None
        };

        if self.peek().kind == TokenKind::Semicolon {
            let semi = self.advance();
            if self.peek().kind != TokenKind::Eof {
                return Err(ParseError::Syntax {
                    kind: SyntaxErrorKind::MultipleStatements,
                    position: semi.start,
                    expected: vec!["end of input".into()],
                    found: ";".into(),
                    message: "only a single statement is accepted".into(),
                });
            }
        }
        if self.peek().kind != TokenKind::Eof {
            return Err(self.unexpected(next_expected));
        }

        let query = Query {
            projections,
            from,
            selection,
            group_by,
            having,
            order_by,
            limit,
        };
        if query.having.is_some() && query.group_by.is_empty() && !all_projections_aggregated(&query) {
            return Err(self.invalid(
                having_pos,
                "HAVING requires GROUP BY or an all-aggregate select list",
            ));
        }
        Ok(query)
    }

    fn parse_select_list(&mut self) -> Result<Vec<SelectItem>, ParseError> {
        let mut items = Vec::new();
        loop {
            if self.peek().kind == TokenKind::Star {
                self.advance();
                items.push(SelectItem::Wildcard);
            } else {
                let expr = self.parse_expr()?;
                let alias = if self.eat_keyword("AS") {
                    Some(self.parse_identifier("alias")?)
                } else {
                    None
                };
                items.push(SelectItem::Expr { expr, alias });
            }
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }
        Ok(items)
    }

    fn parse_table_name(&mut self) -> Result<String, ParseError> {
        if self.peek().kind == TokenKind::LParen {
            return Err(ParseError::Unsupported {
                feature: "subquery".into(),
                keyword: "(".into(),
                position: self.peek().start,
                trailing: false,
            });
        }
        let name = self.parse_identifier("table name")?;
        if self.peek().kind == TokenKind::Dot {
            return Err(ParseError::Unsupported {
                feature: "qualified table name".into(),
                keyword: ".".into(),
                position: self.peek().start,
                trailing: false,
            });
        }
        Ok(name)
    }

    fn parse_identifier(&mut self, what: &str) -> Result<String, ParseError> {
        match &self.peek().kind {
            TokenKind::Word(w) if !is_reserved_word(w) => {
                let w = w.clone();
                self.advance();
                Ok(w)
            }
            _ => Err(self.unexpected(&[what])),
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.parse_and()?;
        while self.eat_keyword("OR") {
            let right = self.parse_and()?;
            left = Expr::binary(BinaryOp::Or, left, right);
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.parse_not()?;
        while self.eat_keyword("AND") {
            let right = self.parse_not()?;
            left = Expr::binary(BinaryOp::And, left, right);
        }
        Ok(left)
    }

    fn parse_not(&mut self) -> Result<Expr, ParseError> {
        if self.eat_keyword("NOT") {
            let expr = self.parse_not()?;
            return Ok(Expr::Unary {
                op: UnaryOp::Not,
                expr: Box::new(expr),
            });
        }
        self.parse_comparison()
    }

    fn parse_comparison(&mut self) -> Result<Expr, ParseError> {
        let left = self.parse_additive()?;
        let op = match self.peek().kind {
            TokenKind::Eq => Some(BinaryOp::Eq),
            TokenKind::NotEq => Some(BinaryOp::NotEq),
            TokenKind::Lt => Some(BinaryOp::Lt),
            TokenKind::LtEq => Some(BinaryOp::LtEq),
            TokenKind::Gt => Some(BinaryOp::Gt),
            TokenKind::GtEq => Some(BinaryOp::GtEq),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let right = self.parse_additive()?;
            return Ok(Expr::binary(op, left, right));
        }
        if self.at_keyword("NOT") && (self.peek_at(1).is_keyword("IN") || self.peek_at(1).is_keyword("BETWEEN")) {
            return Err(ParseError::Unsupported {
                feature: format!("NOT {}", self.peek_at(1).describe().to_ascii_uppercase()),
                keyword: "NOT".into(),
                position: self.peek().start,
                trailing: false,
            });
        }
        if self.eat_keyword("IN") {
            self.expect_kind(TokenKind::LParen)?;
            if self.at_keyword("SELECT") {
                return Err(ParseError::Unsupported {
                    feature: "subquery".into(),
                    keyword: "SELECT".into(),
                    position: self.peek().start,
                    trailing: false,
                });
            }
            let mut list = vec![self.parse_literal()?];
            while self.eat(&TokenKind::Comma) {
                list.push(self.parse_literal()?);
            }
            self.expect_kind(TokenKind::RParen)?;
            return Ok(Expr::InList {
                expr: Box::new(left),
                list,
            });
        }
        if self.eat_keyword("BETWEEN") {
            let low = self.parse_literal()?;
            if !self.eat_keyword("AND") {
                return Err(self.unexpected(&["AND"]));
            }
            let high = self.parse_literal()?;
            return Ok(Expr::Between {
                expr: Box::new(left),
                low,
                high,
            });
        }
        Ok(left)
    }

    fn parse_additive(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.parse_multiplicative()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Plus => BinaryOp::Add,
                TokenKind::Minus => BinaryOp::Sub,
                _ => return Ok(left),
            };
            self.advance();
            let right = self.parse_multiplicative()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn parse_multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.parse_unary()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Star => BinaryOp::Mul,
                TokenKind::Slash => BinaryOp::Div,
                _ => return Ok(left),
            };
            self.advance();
            let right = self.parse_unary()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().kind == TokenKind::Minus {
            if matches!(self.peek_at(1).kind, TokenKind::Number(_)) {
                return Ok(Expr::Literal(self.parse_literal()?));
            }
            self.advance();
            let expr = self.parse_unary()?;
            return Ok(Expr::Unary {
                op: UnaryOp::Neg,
                expr: Box::new(expr),
            });
        }
        self.parse_primary()
    }

    /// A literal, with an optional leading minus on numbers.
    fn parse_literal(&mut self) -> Result<Value, ParseError> {
        let negative = if self.peek().kind == TokenKind::Minus
            && matches!(self.peek_at(1).kind, TokenKind::Number(_))
        {
            self.advance();
            true
        } else {
            false
        };
        let token = self.peek().clone();
        let value = match &token.kind {
            TokenKind::Number(text) => self.number_value(text, negative)?,
            TokenKind::Str(s) => Value::Text(s.clone()),
            TokenKind::Word(w) if w.eq_ignore_ascii_case("NULL") => Value::Null,
            _ => return Err(self.unexpected(&["literal"])),
        };
        self.advance();
        Ok(value)
    }

    fn number_value(&self, text: &str, negative: bool) -> Result<Value, ParseError> {
        let signed = if negative {
            format!("-{text}")
        } else {
            text.to_owned()
        };
        let out_of_range = || {
            self.syntax(
                SyntaxErrorKind::NumberOutOfRange,
                &[],
                format!("numeric literal {signed} out of range"),
            )
        };
        if text.contains(['.', 'e', 'E']) {
            signed
                .parse::<f64>()
                .ok()
                .and_then(Value::real)
                .ok_or_else(out_of_range)
        } else {
            signed.parse::<i64>().map(Value::Int).map_err(|_| out_of_range())
        }
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        let token = self.peek().clone();
        match &token.kind {
            TokenKind::Number(_) | TokenKind::Str(_) => Ok(Expr::Literal(self.parse_literal()?)),
            TokenKind::LParen => {
                self.advance();
                if self.at_keyword("SELECT") {
                    return Err(ParseError::Unsupported {
                        feature: "subquery".into(),
                        keyword: "SELECT".into(),
                        position: self.peek().start,
                        trailing: false,
                    });
                }
                let e = self.parse_expr()?;
                self.expect_kind(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Word(w) if w.eq_ignore_ascii_case("NULL") => {
                self.advance();
                Ok(Expr::Literal(Value::Null))
            }
            TokenKind::Word(w) if self.peek_at(1).kind == TokenKind::LParen => {
                let name = w.clone();
                self.parse_function(&name, token.start)
            }
            TokenKind::Word(w) if !is_reserved_word(w) => {
                let name = w.clone();
                self.advance();
                if self.peek().kind == TokenKind::Dot {
                    return Err(ParseError::Unsupported {
                        feature: "qualified column reference".into(),
                        keyword: ".".into(),
                        position: self.peek().start,
                        trailing: false,
                    });
                }
                Ok(Expr::Column(name))
            }
            _ => Err(self.unexpected(&["expression"])),
        }
    }

    fn parse_function(&mut self, name: &str, start: usize) -> Result<Expr, ParseError> {
        if let Some(func) = AggFunc::from_name(name) {
            if !self.aggregates_allowed {
                return Err(self.invalid(start, format!("aggregate {} not allowed here", func.name())));
            }
            if self.agg_depth > 0 {
                return Err(self.invalid(start, "aggregate functions cannot be nested"));
            }
            self.advance();
            self.advance();
            let distinct = self.eat_keyword("DISTINCT");
            let arg = if self.peek().kind == TokenKind::Star {
                if func != AggFunc::Count || distinct {
                    return Err(self.invalid(self.peek().start, "only COUNT(*) accepts *"));
                }
                self.advance();
                AggArg::Star
            } else {
                self.agg_depth += 1;
                let e = self.parse_expr();
                self.agg_depth -= 1;
                AggArg::Expr(Box::new(e?))
            };
            self.expect_kind(TokenKind::RParen)?;
            if self.at_keyword("OVER") {
                return Err(self.unexpected(&[]));
            }
            return Ok(Expr::Aggregate { func, arg, distinct });
        }
        if let Some(func) = ScalarFunc::from_name(name) {
            self.advance();
            self.advance();
            let mut args = Vec::new();
            if self.peek().kind != TokenKind::RParen {
                loop {
                    args.push(self.parse_expr()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
            }
            self.expect_kind(TokenKind::RParen)?;
            let arity_ok = match func {
                ScalarFunc::Round => (1..=2).contains(&args.len()),
                _ => args.len() == 1,
            };
            if !arity_ok {
                return Err(self.invalid(start, format!("wrong number of arguments to {}", func.name())));
            }
            return Ok(Expr::Scalar { func, args });
        }
        let upper = name.to_ascii_uppercase();
        if UNSUPPORTED_KEYWORDS.contains(&upper.as_str()) {
            return Err(self.unexpected(&[]));
        }
        let expected: Vec<&str> = AggFunc::ALL
            .iter()
            .map(|f| f.name())
            .chain(ScalarFunc::ALL.iter().map(|f| f.name()))
            .collect();
        Err(self.syntax(
            SyntaxErrorKind::UnknownFunction,
            &expected,
            format!("unknown function {name}"),
        ))
    }
}

fn all_projections_aggregated(query: &Query) -> bool {
    query.projections.iter().all(|p| match p {
        SelectItem::Wildcard => false,
        SelectItem::Expr { expr, .. } => !has_bare_column(expr),
    })
}

/// True when a column is referenced outside any aggregate.
pub(crate) fn has_bare_column(expr: &Expr) -> bool {
    match expr {
        Expr::Column(_) => true,
        Expr::Literal(_) | Expr::Aggregate { .. } => false,
        Expr::Unary { expr, .. } | Expr::InList { expr, .. } | Expr::Between { expr, .. } => {
            has_bare_column(expr)
        }
        Expr::Binary { left, right, .. } => has_bare_column(left) || has_bare_column(right),
        Expr::Scalar { args, .. } => args.iter().any(has_bare_column),
    }
}
