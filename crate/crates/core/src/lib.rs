//! Auditable evidence reasoning over per-case feature tables.
//!
//! A question with answer options is turned into SQL by two reasoning
//! agents, every query passes the guard pipeline before it may run, results
//! are scored against reference ranges into a calibrated hypothesis, and the
//! hypothesis is fused with external classifier probabilities into a report
//! whose SQL trace can be replayed.

pub mod canonical;
pub mod store;
pub mod sql;
pub mod guard;
pub mod exec;
pub mod agents;
pub mod knowledge;
pub mod fusion;
pub mod report;
pub mod pipeline;
