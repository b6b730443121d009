//! Late fusion of CNN class probabilities with the SQL branch's calibrated
//! confidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::Hypothesis;

pub const DEFAULT_ALPHA: f64 = 0.7;

/// Tolerance on the CNN probability sum.
pub const CNN_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("option sets differ: expected {expected:?}, got {found:?}")]
    OptionMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid CNN output: {0}")]
    InvalidCnn(String),
}

/// CNN probabilities in question option order.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnOutput {
    probs: Vec<(String, f64)>,
}

impl CnnOutput {
    pub fn new(probs: &[(String, f64)], options: &[String]) -> Result<CnnOutput, FusionError> {
        check_same_set(options, probs.iter().map(|(l, _)| l))?;
        let mut ordered = Vec::with_capacity(options.len());
        for o in options {
            let p = probs.iter().find(|(l, _)| l == o).map(|(_, p)| *p).unwrap_or(f64::NAN);
            if !(0.0..=1.0).contains(&p) {
                return Err(FusionError::InvalidCnn(format!("probability {p} for {o}")));
            }
            ordered.push((o.clone(), p));
        }
        let total: f64 = ordered.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > CNN_SUM_TOLERANCE {
            return Err(FusionError::InvalidCnn(format!("probabilities sum to {total}")));
        }
        Ok(CnnOutput { probs: ordered })
    }

    pub fn probs(&self) -> &[(String, f64)] {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLabels {
    pub cnn: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDecision {
    pub label: String,
    pub fused: BTreeMap<String, f64>,
    pub alpha: f64,
    pub review_flag: bool,
    pub branch_labels: BranchLabels,
}

impl FusedDecision {
    pub fn confidence(&self) -> f64 {
        self.fused[&self.label]
    }
}

fn check_same_set<'a>(options: &[String], labels: impl Iterator<Item = &'a String>) -> Result<(), FusionError> {
    let mut found: Vec<String> = labels.cloned().collect();
    let mut expected = options.to_vec();
    found.sort();
    expected.sort();
    if found != expected {
        return Err(FusionError::OptionMismatch { expected, found });
    }
    Ok(())
}

/// Highest score; the earliest option wins ties.
pub fn argmax(scores: &[(String, f64)]) -> &str {
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    &best.0
}

fn sql_vector(hypothesis: &Hypothesis, options: &[String]) -> Result<Vec<(String, f64)>, FusionError> {
    check_same_set(options, hypothesis.ranked_options.iter().map(|r| &r.label))?;
    Ok(options
        .iter()
        .map(|o| (o.clone(), hypothesis.confidence(o).expect("checked above")))
        .collect())
}

fn decision(fused: Vec<(String, f64)>, alpha: f64, cnn: &str, sql: &str) -> FusedDecision {
    FusedDecision {
        label: argmax(&fused).to_owned(),
        alpha,
        review_flag: cnn != sql,
        branch_labels: BranchLabels {
            cnn: cnn.to_owned(),
            sql: sql.to_owned(),
        },
        fused: fused.into_iter().collect(),
    }
}

/// `alpha * cnn + (1 - alpha) * sql` per option. The review flag marks
/// disagreement between the two branches' top options.
pub fn fuse(cnn: &CnnOutput, hypothesis: &Hypothesis, options: &[String], alpha: f64) -> Result<FusedDecision, FusionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FusionError::InvalidAlpha(alpha));
    }
    check_same_set(options, cnn.probs.iter().map(|(l, _)| l))?;
    let sql = sql_vector(hypothesis, options)?;
    let fused: Vec<(String, f64)> = cnn
        .probs
        .iter()
        .zip(&sql)
        .map(|((o, c), (_, s))| (o.clone(), alpha * c + (1.0 - alpha) * s))
        .collect();
    Ok(decision(fused, alpha, argmax(&cnn.probs), argmax(&sql)))
}

/// The SQL branch alone; both branch labels are the SQL label.
pub fn fuse_sql_only(hypothesis: &Hypothesis, options: &[String]) -> Result<FusedDecision, FusionError> {
    let sql = sql_vector(hypothesis, options)?;
    let label = argmax(&sql).to_owned();
    Ok(decision(sql, 0.0, &label, &label))
}

/// The CNN branch alone; both branch labels are the CNN label.
pub fn fuse_cnn_only(cnn: &CnnOutput) -> FusedDecision {
    let label = argmax(&cnn.probs).to_owned();
    decision(cnn.probs.clone(), 1.0, &label, &label)
}
