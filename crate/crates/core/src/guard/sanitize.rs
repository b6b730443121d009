use super::{GuardRejection, GuardStage};
use crate::sql::FORBIDDEN_KEYWORDS;

/// Reduces raw agent output to a single candidate statement, or rejects it.
///
/// Markdown fences and surrounding prose are removed; comment tokens,
/// statement separators (other than one trailing `;`) and write/DDL
/// keywords anywhere outside string literals are rejected.
pub fn sanitize(text: &str) -> Result<String, GuardRejection> {
    let (base, candidate) = extract_candidate(text)?;
    screen(base, candidate)?;
    let trimmed = candidate.trim_end();
    let trimmed = trimmed.strip_suffix(';').unwrap_or(trimmed).trim_end();
    if trimmed.is_empty() {
        return Err(GuardRejection::new(GuardStage::Sanitize, "no SQL statement found", None));
    }
    Ok(trimmed.to_owned())
}

/// Returns the candidate slice together with its byte offset in `text`.
fn extract_candidate(text: &str) -> Result<(usize, &str), GuardRejection> {
    if let Some((base, body)) = first_fenced_block(text) {
        let lead = body.len() - body.trim_start().len();
        return Ok((base + lead, body.trim()));
    }
    let lead = text.len() - text.trim_start().len();
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(GuardRejection::new(GuardStage::Sanitize, "empty input", None));
    }
    if let Some((start, word)) = words(trimmed).next() {
        let upper = word.to_ascii_uppercase();
        if FORBIDDEN_KEYWORDS.contains(&upper.as_str()) {
            return Err(GuardRejection::new(
                GuardStage::Sanitize,
                format!("forbidden keyword {upper}"),
                Some(lead + start),
            ));
        }
    }
    // Leading prose: start at the first SELECT when the text does not already.
    let start = words(trimmed)
        .find(|(_, w)| w.eq_ignore_ascii_case("SELECT"))
        .map_or(0, |(i, _)| i);
    let rest = &trimmed[start..];
    // Trailing prose: anything after the first blank line.
    let end = blank_line(rest).unwrap_or(rest.len());
    Ok((lead + start, rest[..end].trim_end()))
}

fn first_fenced_block(text: &str) -> Option<(usize, &str)> {
    let mut offset = 0;
    let mut body_start = None;
    for line in text.split_inclusive('\n') {
        let is_fence = line.trim_start().starts_with("```");
        match (body_start, is_fence) {
            (None, true) => body_start = Some(offset + line.len()),
            (Some(start), true) => return Some((start, &text[start..offset])),
            _ => {}
        }
        offset += line.len();
    }
    body_start.map(|start| (start.min(text.len()), &text[start.min(text.len())..]))
}

fn blank_line(text: &str) -> Option<usize> {
    let mut offset = 0;
    let mut seen_content = false;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() && seen_content {
            return Some(offset);
        }
        seen_content |= !line.trim().is_empty();
        offset += line.len();
    }
    None
}

/// Alphabetic words outside quoted text, with byte offsets.
fn words(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            let c = bytes[i];
            if c == b'\'' || c == b'"' {
                i = skip_quoted(bytes, i);
            } else if c.is_ascii_alphabetic() || c == b'_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                return Some((start, &text[start..i]));
            } else if c.is_ascii_digit() {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        None
    })
}

/// Index just past the quoted run starting at `i` (doubled quotes escape).
fn skip_quoted(bytes: &[u8], i: usize) -> usize {
    let quote = bytes[i];
    let mut j = i + 1;
    while j < bytes.len() {
        if bytes[j] == quote {
            if bytes.get(j + 1) == Some(&quote) {
                j += 2;
                continue;
            }
            return j + 1;
        }
        j += 1;
    }
    bytes.len()
}

fn screen(base: usize, candidate: &str) -> Result<(), GuardRejection> {
    let bytes = candidate.as_bytes();
    let last_semicolon_ok = {
        let t = candidate.trim_end();
        t.ends_with(';').then(|| t.len() - 1)
    };
    let reject = |reason: String, at: usize| Err(GuardRejection::new(GuardStage::Sanitize, reason, Some(base + at)));
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' | b'"' => {
                i = skip_quoted(bytes, i);
                continue;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => return reject("comment token --".into(), i),
            b'/' if bytes.get(i + 1) == Some(&b'*') => return reject("comment token /*".into(), i),
            b'*' if bytes.get(i + 1) == Some(&b'/') => return reject("comment token */".into(), i),
            b'#' => return reject("comment token #".into(), i),
            b';' if Some(i) != last_semicolon_ok => return reject("statement separator ;".into(), i),
            _ => {}
        }
        i += 1;
    }
    for (at, word) in words(candidate) {
        let upper = word.to_ascii_uppercase();
        if FORBIDDEN_KEYWORDS.contains(&upper.as_str()) {
            return reject(format!("forbidden keyword {upper}"), at);
        }
    }
    Ok(())
}
