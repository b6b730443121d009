use std::collections::BTreeMap;
use std::path::Path;

use super::{KnowledgeError, RangeSource, ReferenceRange};
use crate::agents::{range_prompts, AgentSettings, AgentTask, BackendError, CompletionRequest, LlmBackend};
use crate::exec::compensated_sum;
use crate::store::{CaseBundle, Level, SchemaManifest};

pub const DEFAULT_QUANTILE: f64 = 0.05;

/// Fewest labelled cases an option needs before a range is derived.
pub const MIN_SUPPORT: usize = 3;

/// Linear-interpolation quantile of sorted data: position `(n - 1) p`
/// between the neighbouring order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The case-level value of `table.column`: the single value of a global
/// table, or the mean of the non-null values of a local one. `None` when
/// nothing non-null is available.
pub fn case_feature_value(bundle: &CaseBundle, manifest: &SchemaManifest, key: &str) -> Result<Option<f64>, KnowledgeError> {
    let (table, column) = manifest
        .resolve_feature(key)
        .filter(|(_, c)| c.dtype.is_numeric())
        .ok_or_else(|| KnowledgeError::UnknownFeature(key.to_owned()))?;
    let Some(data) = bundle.table(&table.name) else {
        return Ok(None);
    };
    let c = table.column_index(&column.name).expect("resolved column");
    let values: Vec<f64> = (0..data.row_count()).filter_map(|r| data.value(r, c).as_f64()).collect();
    Ok(match (table.level, values.len()) {
        (_, 0) => None,
        (Level::Global, _) => Some(values[0]),
        _ => Some(compensated_sum(values.iter().copied()) / values.len() as f64),
    })
}

/// Empirical `[q, 1 - q]` quantile ranges per (feature, option) over the
/// labelled training cases. Returns the ranges and data-quality notes.
pub fn compute_empirical_ranges(
    training: &[CaseBundle],
    manifest: &SchemaManifest,
    feature_keys: &[String],
    options: &[String],
    q: f64,
) -> Result<(Vec<ReferenceRange>, Vec<String>), KnowledgeError> {
    if !(q > 0.0 && q < 0.5) {
        return Err(KnowledgeError::InvalidQuantile(q));
    }
    for case in training {
        if case.ground_truth().is_none() {
            return Err(KnowledgeError::MissingLabel {
                case_id: case.case_id().to_owned(),
            });
        }
    }
    let mut ranges = Vec::new();
    let mut notes = Vec::new();
    for key in feature_keys {
        let unit = manifest
            .resolve_feature(key)
            .ok_or_else(|| KnowledgeError::UnknownFeature(key.clone()))?
            .1
            .unit
            .clone();
        for option in options {
            let mut values = Vec::new();
            for case in training.iter().filter(|c| c.ground_truth() == Some(option.as_str())) {
                match case_feature_value(case, manifest, key)? {
                    Some(v) => values.push(v),
                    None => notes.push(format!("{key}: case {} has no value", case.case_id())),
                }
            }
            if values.len() < MIN_SUPPORT {
                notes.push(format!(
                    "{key}/{option}: {} labelled case(s), fewer than {MIN_SUPPORT}; no empirical range",
                    values.len()
                ));
                continue;
            }
            values.sort_by(f64::total_cmp);
            ranges.push(ReferenceRange {
                feature_key: key.clone(),
                option_label: option.clone(),
                low: quantile(&values, q),
                high: quantile(&values, 1.0 - q),
                source: RangeSource::Empirical,
                unit: unit.clone(),
            });
        }
    }
    Ok((ranges, notes))
}

fn parse_range_reply(text: &str) -> Option<(f64, f64)> {
    let start = text.find('{')?;
    let end = start + text[start..].find('}')?;
    let v: serde_json::Value = serde_json::from_str(&text[start..=end]).ok()?;
    Some((v.get("low")?.as_f64()?, v.get("high")?.as_f64()?))
}

/// Asks the backend for one range per (feature, option). Unparseable or
/// inverted replies are dropped with a note; transport errors propagate.
pub fn fetch_llm_ranges(
    feature_keys: &[String],
    options: &[String],
    manifest: &SchemaManifest,
    backend: &dyn LlmBackend,
    settings: &AgentSettings,
) -> Result<(Vec<ReferenceRange>, Vec<String>), BackendError> {
    let mut ranges = Vec::new();
    let mut notes = Vec::new();
    if !backend.generates_ranges() {
        return Ok((ranges, notes));
    }
    for key in feature_keys {
        let unit = manifest.resolve_feature(key).and_then(|(_, c)| c.unit.clone());
        for option in options {
            let (system, user) = range_prompts(key, option, unit.as_deref());
            let reply = backend.complete(&CompletionRequest {
                system: &system,
                user: &user,
                temperature: settings.temperature,
                timeout: settings.timeout,
                task: AgentTask::ReferenceRange,
            })?;
            let range = parse_range_reply(&reply).map(|(low, high)| ReferenceRange {
                feature_key: key.clone(),
                option_label: option.clone(),
                low,
                high,
                source: RangeSource::LlmKnowledge,
                unit: unit.clone(),
            });
            match range {
                Some(r) if r.is_valid() => ranges.push(r),
                Some(r) => notes.push(format!(
                    "{key}/{option}: generated range [{}, {}] rejected (low > high or non-finite)",
                    r.low, r.high
                )),
                None => notes.push(format!("{key}/{option}: generated range not parseable")),
            }
        }
    }
    Ok((ranges, notes))
}

/// Range lookup by (feature, option); an empirical range shadows a
/// generated one for the same pair.
#[derive(Debug, Clone, Default)]
pub struct RangeBook {
    ranges: BTreeMap<(String, String), ReferenceRange>,
}

impl RangeBook {
    pub fn new(ranges: impl IntoIterator<Item = ReferenceRange>) -> Self {
        let mut book = RangeBook::default();
        book.extend(ranges);
        book
    }

    pub fn extend(&mut self, ranges: impl IntoIterator<Item = ReferenceRange>) {
        for r in ranges {
            let k = (r.feature_key.clone(), r.option_label.clone());
            let replace = match self.ranges.get(&k) {
                Some(existing) => !(existing.source == RangeSource::Empirical && r.source != RangeSource::Empirical),
                None => true,
            };
            if replace {
                self.ranges.insert(k, r);
            }
        }
    }

    pub fn get(&self, feature_key: &str, option: &str) -> Option<&ReferenceRange> {
        self.ranges.get(&(feature_key.to_owned(), option.to_owned()))
    }

    pub fn has_feature(&self, feature_key: &str) -> bool {
        self.ranges.keys().any(|(k, _)| k == feature_key)
    }

    pub fn ranges(&self) -> impl Iterator<Item = &ReferenceRange> {
        self.ranges.values()
    }
}

pub fn write_ranges(path: &Path, ranges: &[ReferenceRange]) -> std::io::Result<()> {
    let text = crate::canonical::to_canonical_json(ranges).map_err(std::io::Error::other)?;
    crate::report::write_atomic(path, text.as_bytes())
}

pub fn read_ranges(path: &Path) -> Result<Vec<ReferenceRange>, KnowledgeError> {
    let text = std::fs::read_to_string(path).map_err(|e| KnowledgeError::RangesFile(format!("{}: {e}", path.display())))?;
    let ranges: Vec<ReferenceRange> =
        serde_json::from_str(&text).map_err(|e| KnowledgeError::RangesFile(format!("{}: {e}", path.display())))?;
    for r in &ranges {
        if !r.is_valid() {
            return Err(KnowledgeError::InvalidRange {
                feature_key: r.feature_key.clone(),
                option_label: r.option_label.clone(),
                low: r.low,
                high: r.high,
            });
        }
    }
    Ok(ranges)
}
