use super::{ParseError, SyntaxErrorKind};

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    /// Identifier or keyword, as written.
    Word(String),
    /// Numeric literal text, unsigned.
    Number(String),
    /// Single-quoted string, unescaped.
    Str(String),
    LParen,
    RParen,
    Comma,
    Star,
    Plus,
    Minus,
    Slash,
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    Semicolon,
    Dot,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Byte offset of the first character.
    pub start: usize,
    /// Byte offset one past the last character.
    pub end: usize,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, TokenKind::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            TokenKind::Word(w) => w.clone(),
            TokenKind::Number(n) => n.clone(),
            TokenKind::Str(s) => format!("'{}'", s.replace('\'', "''")),
            TokenKind::Eof => "end of input".into(),
            other => symbol_text(other).to_owned(),
        }
    }
}

pub fn symbol_text(kind: &TokenKind) -> &'static str {
    match kind {
        TokenKind::LParen => "(",
        TokenKind::RParen => ")",
        TokenKind::Comma => ",",
        TokenKind::Star => "*",
        TokenKind::Plus => "+",
        TokenKind::Minus => "-",
        TokenKind::Slash => "/",
        TokenKind::Eq => "=",
        TokenKind::NotEq => "!=",
        TokenKind::Lt => "<",
        TokenKind::LtEq => "<=",
        TokenKind::Gt => ">",
        TokenKind::GtEq => ">=",
        TokenKind::Semicolon => ";",
        TokenKind::Dot => ".",
        _ => "",
    }
}

fn lex_error(kind: SyntaxErrorKind, position: usize, found: &str, message: String) -> ParseError {
    ParseError::Syntax {
        kind,
        position,
        expected: Vec::new(),
        found: found.to_owned(),
        message,
    }
}

/// Splits `text` into tokens, ending with a single `Eof`. Comment syntax,
/// double-quoted text and unknown characters are errors.
pub fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let single = |kind: TokenKind| Token {
            kind,
            start,
            end: start + 1,
        };
        match c {
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                return Err(lex_error(
                    SyntaxErrorKind::Comment,
                    i,
                    "--",
                    "comment syntax is not accepted".into(),
                ))
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                return Err(lex_error(
                    SyntaxErrorKind::Comment,
                    i,
                    "/*",
                    "comment syntax is not accepted".into(),
                ))
            }
            b'*' if bytes.get(i + 1) == Some(&b'/') => {
                return Err(lex_error(
                    SyntaxErrorKind::Comment,
                    i,
                    "*/",
                    "comment syntax is not accepted".into(),
                ))
            }
            b'(' => {
                tokens.push(single(TokenKind::LParen));
                i += 1;
            }
            b')' => {
                tokens.push(single(TokenKind::RParen));
                i += 1;
            }
            b',' => {
                tokens.push(single(TokenKind::Comma));
                i += 1;
            }
            b'*' => {
                tokens.push(single(TokenKind::Star));
                i += 1;
            }
            b'+' => {
                tokens.push(single(TokenKind::Plus));
                i += 1;
            }
            b'-' => {
                tokens.push(single(TokenKind::Minus));
                i += 1;
            }
            b'/' => {
                tokens.push(single(TokenKind::Slash));
                i += 1;
            }
            b';' => {
                tokens.push(single(TokenKind::Semicolon));
                i += 1;
            }
            b'=' => {
                // `==` is accepted as a spelling of `=`.
                let len = if bytes.get(i + 1) == Some(&b'=') { 2 } else { 1 };
                tokens.push(Token {
                    kind: TokenKind::Eq,
                    start,
                    end: start + len,
                });
                i += len;
            }
            b'!' if bytes.get(i + 1) == Some(&b'=') => {
                tokens.push(Token {
                    kind: TokenKind::NotEq,
                    start,
                    end: start + 2,
                });
                i += 2;
            }
            b'<' => {
                let (kind, len) = match bytes.get(i + 1) {
                    Some(b'=') => (TokenKind::LtEq, 2),
                    Some(b'>') => (TokenKind::NotEq, 2),
                    _ => (TokenKind::Lt, 1),
                };
                tokens.push(Token {
                    kind,
                    start,
                    end: start + len,
                });
                i += len;
            }
            b'>' => {
                let (kind, len) = match bytes.get(i + 1) {
                    Some(b'=') => (TokenKind::GtEq, 2),
                    _ => (TokenKind::Gt, 1),
                };
                tokens.push(Token {
                    kind,
                    start,
                    end: start + len,
                });
                i += len;
            }
            b'\'' => {
                let mut value = String::new();
                let mut j = i + 1;
                loop {
                    match text[j..].find('\'') {
                        None => {
                            return Err(lex_error(
                                SyntaxErrorKind::UnterminatedString,
                                start,
                                "'",
                                "unterminated string literal".into(),
                            ))
                        }
                        Some(off) => {
                            value.push_str(&text[j..j + off]);
                            j += off + 1;
                            if bytes.get(j) == Some(&b'\'') {
                                value.push('\'');
                                j += 1;
                            } else {
                                break;
                            }
                        }
                    }
                }
                tokens.push(Token {
                    kind: TokenKind::Str(value),
                    start,
                    end: j,
                });
                i = j;
            }
            b'"' => {
                return Err(lex_error(
                    SyntaxErrorKind::DoubleQuoted,
                    i,
                    "\"",
                    "double-quoted text is not a valid literal; use single quotes".into(),
                ))
            }
            b'.' if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                let end = scan_number(bytes, i);
                tokens.push(Token {
                    kind: TokenKind::Number(text[start..end].to_owned()),
                    start,
                    end,
                });
                i = end;
            }
            b'.' => {
                tokens.push(single(TokenKind::Dot));
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let end = scan_number(bytes, i);
                tokens.push(Token {
                    kind: TokenKind::Number(text[start..end].to_owned()),
                    start,
                    end,
                });
                i = end;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Word(text[start..j].to_owned()),
                    start,
                    end: j,
                });
                i = j;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(lex_error(
                    SyntaxErrorKind::InvalidCharacter,
                    i,
                    &ch.to_string(),
                    format!("unexpected character {ch:?}"),
                ));
            }
        }
    }
    tokens.push(Token {
        kind: TokenKind::Eof,
        start: text.len(),
        end: text.len(),
    });
    Ok(tokens)
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}
