//! The read-only SQL subset: a hand-written lexer and recursive-descent
//! parser for single-table SELECT, plus a canonical renderer.
//!
//! Supported: projections with `AS` aliases and `*`, `WHERE`, `GROUP BY`,
//! `HAVING`, `ORDER BY ... [ASC|DESC]`, `LIMIT n`; arithmetic, comparisons,
//! `AND`/`OR`/`NOT`, `IN (literals)`, `BETWEEN lit AND lit`; scalar functions
//! `SQRT`, `ABS`, `ROUND`; aggregates `COUNT`, `SUM`, `AVG`, `MIN`, `MAX`,
//! `STDDEV` (sample), each optionally `DISTINCT`.
//!
//! Keywords and function names are case-insensitive, identifiers are not.
//! Comment syntax is a hard error rather than being stripped.

mod ast;
mod lexer;
mod parser;
mod render;

use serde::Serialize;
use thiserror::Error;

pub use ast::*;
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse;
pub use render::{render, render_expr, render_literal};


/// Keywords of the supported grammar.
pub const GRAMMAR_KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "HAVING", "ORDER", "LIMIT", "AS", "ASC", "DESC",
    "AND", "OR", "NOT", "IN", "BETWEEN", "NULL", "DISTINCT",
];

/// Recognized SQL outside the subset; reported as unsupported features.
pub const UNSUPPORTED_KEYWORDS: &[&str] = &[
    "JOIN", "INNER", "LEFT", "RIGHT", "FULL", "OUTER", "CROSS", "NATURAL", "ON", "USING", "UNION",
    "INTERSECT", "EXCEPT", "WITH", "OVER", "PARTITION", "WINDOW", "QUALIFY", "OFFSET", "FETCH",
    "CASE", "WHEN", "THEN", "ELSE", "END", "LIKE", "ILIKE", "GLOB", "IS", "EXISTS", "CAST", "NULLS",
    "FOR", "INTO", "VALUES", "SET", "TOP", "ALL", "ANY", "COLLATE",
];

/// Statement heads that write or alter state.
pub const FORBIDDEN_KEYWORDS: &[&str] = &[
    "INSERT", "UPDATE", "DELETE", "DROP", "ALTER", "CREATE", "ATTACH", "PRAGMA", "DETACH",
    "TRUNCATE", "VACUUM", "GRANT", "REVOKE",
];

/// True when `word` cannot be used as a table, column or alias name.
pub fn is_reserved_word(word: &str) -> bool {
    let upper = word.to_ascii_uppercase();
    [GRAMMAR_KEYWORDS, UNSUPPORTED_KEYWORDS, FORBIDDEN_KEYWORDS]
        .iter()
        .any(|set| set.contains(&upper.as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntaxErrorKind {
    UnexpectedToken,
    UnknownFunction,
    UnterminatedString,
    DoubleQuoted,
    Comment,
    InvalidCharacter,
    NumberOutOfRange,
    MultipleStatements,
    InvalidStructure,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ParseError {
    #[error("syntax error at offset {position}: {message}")]
    Syntax {
        kind: SyntaxErrorKind,
        /// Byte offset of the first offending token.
        position: usize,
        expected: Vec<String>,
        found: String,
        message: String,
    },
    #[error("unsupported feature {feature} at offset {position}")]
    Unsupported {
        feature: String,
        keyword: String,
        position: usize,
        /// The text before `position` already forms a complete query.
        trailing: bool,
    },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { position, .. } | ParseError::Unsupported { position, .. } => *position,
        }
    }
}
