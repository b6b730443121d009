use std::collections::HashSet;

use super::{finite, ExecError};
use crate::sql::AggFunc;
use crate::store::Value;

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

/// Sample standard deviation, `None` below two values. Values are shifted
/// by the first one before the two-pass computation, so a constant input
/// yields exactly zero.
pub fn sample_stddev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let shift = values[0];
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().map(|v| v - shift)) / n;
    let ss = compensated_sum(values.iter().map(|v| {
        let d = v - shift - mean;
        d * d
    }));
    Some((ss / (n - 1.0)).sqrt())
}

pub(super) fn apply(func: AggFunc, values: Vec<Value>, distinct: bool, row: usize) -> Result<Value, ExecError> {
    let mut present: Vec<Value> = values.into_iter().filter(|v| !v.is_null()).collect();
    if distinct {
        let mut seen = HashSet::new();
        present.retain(|v| seen.insert(v.group_key()));
    }
    if func == AggFunc::Count {
        return Ok(Value::Int(present.len() as i64));
    }
    if present.is_empty() {
        return Ok(Value::Null);
    }
    match func {
        AggFunc::Min | AggFunc::Max => {
            let mut best = present[0].clone();
            for v in &present[1..] {
                let ord = v.sql_cmp(&best);
                let better = match func {
                    AggFunc::Min => ord == Some(std::cmp::Ordering::Less),
                    _ => ord == Some(std::cmp::Ordering::Greater),
                };
                if better {
                    best = v.clone();
                }
            }
            Ok(best)
        }
        AggFunc::Sum if present.iter().all(|v| matches!(v, Value::Int(_))) => {
            let mut total: i64 = 0;
            for v in &present {
                if let Value::Int(i) = v {
                    total = total.checked_add(*i).ok_or(ExecError::IntegerOverflow { row })?;
                }
            }
            Ok(Value::Int(total))
        }
        _ => {
            let xs: Vec<f64> = present.iter().filter_map(Value::as_f64).collect();
            match func {
                AggFunc::Sum => finite(compensated_sum(xs.iter().copied()), row),
                AggFunc::Avg => finite(compensated_sum(xs.iter().copied()) / xs.len() as f64, row),
                _ => match sample_stddev(&xs) {
                    Some(s) => finite(s, row),
                    None => Ok(Value::Null),
                },
            }
        }
    }
}
