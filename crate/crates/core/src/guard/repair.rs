use super::schema::{check_schema, SchemaViolation};
use super::{GuardRejection, GuardStage, RepairAction, RepairKind, SourceAgent, ValidatedQuery};
use crate::sql::{parse, render, tokenize, AggFunc, Expr, ParseError, ScalarFunc, SyntaxErrorKind, TokenKind, GRAMMAR_KEYWORDS};
use crate::store::SchemaManifest;

/// Maximum number of repair rounds before giving up.
pub const MAX_REPAIR_PASSES: usize = 3;

/// Largest edit distance accepted for keyword and identifier fixes.
pub const MAX_EDIT_DISTANCE: usize = 2;

/// Trailing clauses that may be cut off when the text before them parses.
const DROPPABLE_CLAUSES: &[&str] = &["OFFSET", "FETCH", "NULLS", "FOR"];

pub fn edit_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(&a.to_lowercase(), &b.to_lowercase())
}

/// The candidate at minimal distance, if that minimum is within the
/// threshold and attained by exactly one candidate.
pub fn nearest_unique<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<(&'a str, usize)> {
    let mut best: Option<(&str, usize)> = None;
    let mut tied = false;
    for c in candidates {
        let d = edit_distance(word, c);
        if d > MAX_EDIT_DISTANCE {
            continue;
        }
        match best {
            Some((_, bd)) if d > bd => {}
            Some((prev, bd)) if d == bd => tied |= prev != c,
            _ => {
                best = Some((c, d));
                tied = false;
            }
        }
    }
    if tied {
        None
    } else {
        best
    }
}

enum Outcome {
    Repaired(String, Vec<RepairAction>),
    /// The failure is of a repairable kind but no unique fix exists.
    NoFix,
    /// Not something repair addresses at all.
    NotRepairable,
}

/// Parses, schema-checks and, where needed, repairs already-sanitized text.
pub fn repair(
    sanitized: &str,
    manifest: &SchemaManifest,
    source: SourceAgent,
) -> Result<ValidatedQuery, GuardRejection> {
    let mut sql = sanitized.to_owned();
    let mut log: Vec<RepairAction> = Vec::new();
    let mut passes = 0;
    loop {
        match parse(&sql) {
            Err(err) => {
                let outcome = if passes < MAX_REPAIR_PASSES {
                    repair_parse_error(&sql, &err)
                } else {
                    Outcome::NoFix
                };
                match outcome {
                    Outcome::Repaired(next, actions) => {
                        sql = next;
                        log.extend(actions);
                        passes += 1;
                    }
                    Outcome::NotRepairable if log.is_empty() => {
                        return Err(GuardRejection::new(GuardStage::Parse, err.to_string(), Some(err.position())))
                    }
                    _ => {
                        return Err(GuardRejection::new(
                            GuardStage::RepairExhausted,
                            format!("no repair for: {err}"),
                            Some(err.position()),
                        )
                        .with_details(vec![err.to_string()]))
                    }
                }
            }
            Ok(mut ast) => {
                let violations = check_schema(&ast, manifest);
                if violations.is_empty() {
                    return Ok(ValidatedQuery::new(ast, log, source));
                }
                let fixes = if passes < MAX_REPAIR_PASSES {
                    fix_identifiers(&mut ast, &violations, manifest)
                } else {
                    Vec::new()
                };
                if fixes.is_empty() {
                    let details: Vec<String> = violations.iter().map(ToString::to_string).collect();
                    let stage = if log.is_empty() && !violations.iter().any(SchemaViolation::is_identifier) {
                        GuardStage::Schema
                    } else {
                        GuardStage::RepairExhausted
                    };
                    return Err(GuardRejection::new(stage, details.join("; "), None).with_details(details));
                }
                log.extend(fixes);
                sql = render(&ast);
                passes += 1;
            }
        }
    }
}

fn repair_parse_error(sql: &str, err: &ParseError) -> Outcome {
    match err {
        ParseError::Syntax {
            kind: SyntaxErrorKind::DoubleQuoted,
            ..
        } => quote_fix(sql),
        ParseError::Syntax {
            kind: SyntaxErrorKind::UnexpectedToken | SyntaxErrorKind::UnknownFunction,
            position,
            expected,
            ..
        } => keyword_fix(sql, *position, expected),
        ParseError::Unsupported {
            keyword,
            position,
            trailing: true,
            ..
        } if DROPPABLE_CLAUSES.contains(&keyword.as_str()) => clause_drop(sql, *position),
        _ => Outcome::NotRepairable,
    }
}

fn keyword_fix(sql: &str, position: usize, expected: &[String]) -> Outcome {
    let Ok(tokens) = tokenize(sql) else {
        return Outcome::NotRepairable;
    };
    let Some(token) = tokens.iter().find(|t| t.start == position) else {
        return Outcome::NotRepairable;
    };
    let TokenKind::Word(word) = &token.kind else {
        return Outcome::NotRepairable;
    };
    let all: Vec<&str> = GRAMMAR_KEYWORDS
        .iter()
        .copied()
        .chain(AggFunc::ALL.iter().map(|f| f.name()))
        .chain(ScalarFunc::ALL.iter().map(|f| f.name()))
        .collect();
    // A correctly spelled keyword in the wrong place is not a typo.
    if all.iter().any(|k| k.eq_ignore_ascii_case(word)) {
        return Outcome::NotRepairable;
    }
    let restricted: Vec<&str> = all
        .iter()
        .copied()
        .filter(|k| expected.iter().any(|e| e == k))
        .collect();
    let candidates = if restricted.is_empty() { all } else { restricted };
    match nearest_unique(word, candidates) {
        Some((keyword, distance)) if distance > 0 => {
            let mut next = String::with_capacity(sql.len());
            next.push_str(&sql[..token.start]);
            next.push_str(keyword);
            next.push_str(&sql[token.end..]);
            Outcome::Repaired(
                next,
                vec![RepairAction {
                    kind: RepairKind::KeywordFix,
                    before: word.clone(),
                    after: keyword.to_owned(),
                    edit_distance: distance,
                }],
            )
        }
        _ => Outcome::NoFix,
    }
}

/// Rewrites every double-quoted run outside single-quoted strings as a
/// single-quoted literal.
fn quote_fix(sql: &str) -> Outcome {
    let bytes = sql.as_bytes();
    let mut out = String::with_capacity(sql.len());
    let mut actions = Vec::new();
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' => {
                let mut j = i + 1;
                while j < bytes.len() {
                    if bytes[j] == b'\'' {
                        if bytes.get(j + 1) == Some(&b'\'') {
                            j += 2;
                            continue;
                        }
                        break;
                    }
                    j += 1;
                }
                i = j + 1;
            }
            b'"' => {
                let Some(close) = sql[i + 1..].find('"') else {
                    return Outcome::NoFix;
                };
                let end = i + 1 + close;
                let inner = &sql[i + 1..end];
                let before = &sql[i..=end];
                let after = format!("'{}'", inner.replace('\'', "''"));
                out.push_str(&sql[copied..i]);
                out.push_str(&after);
                actions.push(RepairAction {
                    kind: RepairKind::QuoteFix,
                    before: before.to_owned(),
                    edit_distance: strsim::levenshtein(before, &after),
                    after,
                });
                i = end + 1;
                copied = i;
            }
            _ => i += 1,
        }
    }
    if actions.is_empty() {
        return Outcome::NoFix;
    }
    out.push_str(&sql[copied.min(sql.len())..]);
    Outcome::Repaired(out, actions)
}

fn clause_drop(sql: &str, position: usize) -> Outcome {
    let prefix = sql[..position].trim_end();
    if parse(prefix).is_err() {
        return Outcome::NoFix;
    }
    let dropped = sql[position..].trim();
    Outcome::Repaired(
        prefix.to_owned(),
        vec![RepairAction {
            kind: RepairKind::ClauseDrop,
            before: dropped.to_owned(),
            after: String::new(),
            edit_distance: dropped.chars().count(),
        }],
    )
}

fn fix_identifiers(
    ast: &mut crate::sql::Query,
    violations: &[SchemaViolation],
    manifest: &SchemaManifest,
) -> Vec<RepairAction> {
    let mut actions = Vec::new();
    for v in violations {
        match v {
            SchemaViolation::UnknownTable { table } => {
                if let Some((name, d)) = nearest_unique(table, manifest.tables.iter().map(|t| t.name.as_str())) {
                    actions.push(RepairAction {
                        kind: RepairKind::IdentifierFix,
                        before: table.clone(),
                        after: name.to_owned(),
                        edit_distance: d,
                    });
                    ast.from = name.to_owned();
                }
            }
            SchemaViolation::UnknownColumn { column, table } => {
                let Some(schema) = manifest.table(table) else {
                    continue;
                };
                if let Some((name, d)) = nearest_unique(column, schema.column_names()) {
                    actions.push(RepairAction {
                        kind: RepairKind::IdentifierFix,
                        before: column.clone(),
                        after: name.to_owned(),
                        edit_distance: d,
                    });
                    for e in ast.expressions_mut() {
                        e.walk_mut(&mut |node| {
                            if let Expr::Column(c) = node {
                                if c == column {
                                    *c = name.to_owned();
                                }
                            }
                        });
                    }
                }
            }
            _ => {}
        }
    }
    actions
}
