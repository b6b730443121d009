//! Reference ranges, per-feature fit scoring, confidence calibration and
//! the hypothesis object that carries the SQL branch's conclusion.

mod findings;
mod ranges;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Question;
use crate::store::Value;

pub use findings::{feature_key, observations, score_observations, Observation};
pub use ranges::{
    case_feature_value, compute_empirical_ranges, fetch_llm_ranges, quantile, read_ranges, write_ranges, RangeBook,
    DEFAULT_QUANTILE, MIN_SUPPORT,
};

pub const HYPOTHESIS_SCHEMA_VERSION: &str = "hypothesis-1";

/// Width used in place of zero when a range is a single point.
pub const ZERO_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FitCategory {
    Excellent,
    Good,
    Fair,
    Poor,
    NoFit,
}

impl FitCategory {
    pub const ALL: [FitCategory; 5] = [
        FitCategory::Excellent,
        FitCategory::Good,
        FitCategory::Fair,
        FitCategory::Poor,
        FitCategory::NoFit,
    ];

    pub fn weight(self) -> f64 {
        match self {
            FitCategory::Excellent => 1.0,
            FitCategory::Good => 0.75,
            FitCategory::Fair => 0.5,
            FitCategory::Poor => 0.25,
            FitCategory::NoFit => 0.0,
        }
    }

    pub fn from_weight(w: f64) -> Option<FitCategory> {
        Self::ALL.into_iter().find(|c| c.weight() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitScore {
    pub category: FitCategory,
    pub weight: f64,
}

impl From<FitCategory> for FitScore {
    fn from(category: FitCategory) -> Self {
        FitScore {
            category,
            weight: category.weight(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    Empirical,
    LlmKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub feature_key: String,
    pub option_label: String,
    pub low: f64,
    pub high: f64,
    pub source: RangeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl ReferenceRange {
    pub fn is_valid(&self) -> bool {
        self.low.is_finite() && self.high.is_finite() && self.low <= self.high
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnowledgeError {
    #[error("observation is null or not finite")]
    NonFiniteObservation,
    #[error("no findings to calibrate")]
    NoEvidence,
    #[error("training case {case_id} has no ground-truth label")]
    MissingLabel { case_id: String },
    #[error("quantile {0} outside (0, 0.5)")]
    InvalidQuantile(f64),
    #[error("feature {0} is not a table.column of the manifest")]
    UnknownFeature(String),
    #[error("invalid range for {feature_key}/{option_label}: [{low}, {high}]")]
    InvalidRange {
        feature_key: String,
        option_label: String,
        low: f64,
        high: f64,
    },
    #[error("ranges file: {0}")]
    RangesFile(String),
}

/// Distance of `observed` outside the range, normalised by its width.
pub fn normalized_distance(observed: f64, range: &ReferenceRange) -> f64 {
    let d = if observed < range.low {
        range.low - observed
    } else if observed > range.high {
        observed - range.high
    } else {
        0.0
    };
    let w = range.high - range.low;
    d / if w > 0.0 { w } else { ZERO_WIDTH }
}

pub fn score_fit(observed: f64, range: &ReferenceRange) -> Result<FitScore, KnowledgeError> {
    if !observed.is_finite() {
        return Err(KnowledgeError::NonFiniteObservation);
    }
    let r = normalized_distance(observed, range);
    let category = if r == 0.0 {
        FitCategory::Excellent
    } else if r <= 0.25 {
        FitCategory::Good
    } else if r <= 0.75 {
        FitCategory::Fair
    } else if r <= 1.5 {
        FitCategory::Poor
    } else {
        FitCategory::NoFit
    };
    Ok(category.into())
}

/// `fits` maps every option to its category, or to null when that option
/// has no reference range for this feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFinding {
    pub feature_key: String,
    pub observed: Value,
    pub query_id: String,
    pub fits: BTreeMap<String, Option<FitCategory>>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_note: Option<String>,
}

impl FeatureFinding {
    /// Highest-weight scored option, earliest in `options` on ties.
    pub fn best_option<'a>(&self, options: &'a [String]) -> Option<(&'a str, FitCategory)> {
        let mut best: Option<(&str, FitCategory)> = None;
        for o in options {
            if let Some(Some(c)) = self.fits.get(o) {
                if best.is_none_or(|(_, b)| c.weight() > b.weight()) {
                    best = Some((o, *c));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Per option in question order.
    pub confidences: Vec<(String, f64)>,
    pub raw_scores: Vec<(String, f64)>,
    pub note: Option<String>,
}

/// Mean fit weight per option over the findings that score it, normalised
/// onto the simplex. All-zero raw scores give the uniform vector and a note.
pub fn calibrate_confidence(findings: &[FeatureFinding], options: &[String]) -> Result<Calibration, KnowledgeError> {
    if findings.is_empty() {
        return Err(KnowledgeError::NoEvidence);
    }
    let raw: Vec<(String, f64)> = options
        .iter()
        .map(|o| {
            let weights: Vec<f64> = findings
                .iter()
                .filter_map(|f| f.fits.get(o).copied().flatten())
                .map(FitCategory::weight)
                .collect();
            let mean = if weights.is_empty() {
                0.0
            } else {
                weights.iter().sum::<f64>() / weights.len() as f64
            };
            (o.clone(), mean)
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, s)| s).sum();
    let (confidences, note) = if total > 0.0 {
        (raw.iter().map(|(o, s)| (o.clone(), s / total)).collect(), None)
    } else {
        (
            uniform(options),
            Some("no option received a positive fit; confidence is uniform".to_owned()),
        )
    };
    Ok(Calibration {
        confidences,
        raw_scores: raw,
        note,
    })
}

pub fn uniform(options: &[String]) -> Vec<(String, f64)> {
    let p = 1.0 / options.len() as f64;
    options.iter().map(|o| (o.clone(), p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedOption {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub schema_version: String,
    pub case_id: String,
    pub ranked_options: Vec<RankedOption>,
    pub findings: Vec<FeatureFinding>,
    pub data_quality_notes: Vec<String>,
}

impl Hypothesis {
    pub fn confidence(&self, label: &str) -> Option<f64> {
        self.ranked_options
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.confidence)
    }

    pub fn top(&self) -> &str {
        &self.ranked_options[0].label
    }

    pub fn to_json(&self) -> String {
        crate::canonical::to_canonical_json(self).expect("hypothesis serializes")
    }

    pub fn from_json(text: &str) -> Result<Hypothesis, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Ranks by descending confidence; ties keep the question's option order.
/// `confidences` must name every option of the question.
pub fn build_hypothesis(
    question: &Question,
    findings: Vec<FeatureFinding>,
    confidences: &[(String, f64)],
    notes: Vec<String>,
) -> Hypothesis {
    let mut ranked: Vec<RankedOption> = question
        .options
        .iter()
        .map(|o| RankedOption {
            label: o.clone(),
            confidence: confidences
                .iter()
                .find(|(l, _)| l == o)
                .map(|(_, c)| *c)
                .expect("confidence for every option"),
        })
        .collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Hypothesis {
        schema_version: HYPOTHESIS_SCHEMA_VERSION.to_owned(),
        case_id: question.case_id.clone(),
        ranked_options: ranked,
        findings,
        data_quality_notes: notes,
    }
}
