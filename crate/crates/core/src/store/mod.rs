//! Multi-scale feature tables: schema manifest, CSV ingestion and the
//! immutable per-case bundle the query engine reads from.

mod manifest;
mod table;
mod value;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

pub use manifest::{load_manifest, ColumnSchema, Dtype, Level, SchemaManifest, TableSchema};
pub use table::{ColumnData, FeatureTable};
pub use value::{KeyPart, Value};

/// File name of the optional per-case sidecar inside a case directory.
pub const SIDECAR_FILE: &str = "sidecar.json";

const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("type mismatch in {table} row {row} column {column:?}: {detail}")]
    TypeMismatch {
        table: String,
        row: usize,
        column: String,
        detail: String,
    },
    #[error("value {value:?} outside categorical domain of {table}.{column} (row {row})")]
    DomainViolation {
        table: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("global table {table} must hold exactly one row, found {rows}")]
    Cardinality { table: String, rows: usize },
    #[error("header of {table} does not match schema: expected {expected:?}, found {found:?}")]
    HeaderMismatch {
        table: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("table {0} is declared in the manifest but missing from the case")]
    MissingTable(String),
    #[error("table {0} is not declared in the manifest")]
    UnknownTable(String),
    #[error("invalid sidecar: {0}")]
    Sidecar(String),
    #[error("case {case_id}: {source}")]
    InCase {
        case_id: String,
        #[source]
        source: Box<StoreError>,
    },
}

impl StoreError {
    /// The case this error was annotated with, if any.
    pub fn case_id(&self) -> Option<&str> {
        match self {
            StoreError::InCase { case_id, .. } => Some(case_id),
            _ => None,
        }
    }
}

/// Everything known about one image patch. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    case_id: String,
    tables: BTreeMap<String, FeatureTable>,
    cnn_probs: Option<Vec<(String, f64)>>,
    ground_truth: Option<String>,
}

impl CaseBundle {
    /// Assembles a bundle and checks it against `manifest`: every declared
    /// table present, no extras, one row per global table, and CNN
    /// probabilities in `[0, 1]` summing to one.
    pub fn new(
        manifest: &SchemaManifest,
        case_id: impl Into<String>,
        tables: Vec<FeatureTable>,
        cnn_probs: Option<Vec<(String, f64)>>,
        ground_truth: Option<String>,
    ) -> Result<CaseBundle, StoreError> {
        let mut by_name = BTreeMap::new();
        for table in tables {
            let schema = manifest
                .table(table.name())
                .ok_or_else(|| StoreError::UnknownTable(table.name().to_owned()))?;
            if schema != table.schema() {
                return Err(StoreError::Manifest(format!(
                    "table {} was built against a different schema",
                    table.name()
                )));
            }
            by_name.insert(table.name().to_owned(), table);
        }
        for schema in &manifest.tables {
            let table = by_name
                .get(&schema.name)
                .ok_or_else(|| StoreError::MissingTable(schema.name.clone()))?;
            if schema.level == Level::Global && table.row_count() != 1 {
                return Err(StoreError::Cardinality {
                    table: schema.name.clone(),
                    rows: table.row_count(),
                });
            }
        }
        if let Some(probs) = &cnn_probs {
            check_probs(probs)?;
        }
        Ok(CaseBundle {
            case_id: case_id.into(),
            tables: by_name,
            cnn_probs,
            ground_truth,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn table(&self, name: &str) -> Option<&FeatureTable> {
        self.tables.get(name)
    }

    pub fn tables(&self) -> impl Iterator<Item = &FeatureTable> {
        self.tables.values()
    }

    /// CNN class probabilities, sorted by label.
    pub fn cnn_probs(&self) -> Option<&[(String, f64)]> {
        self.cnn_probs.as_deref()
    }

    pub fn ground_truth(&self) -> Option<&str> {
        self.ground_truth.as_deref()
    }
}

fn check_probs(probs: &[(String, f64)]) -> Result<(), StoreError> {
    if probs.is_empty() {
        return Err(StoreError::Sidecar("cnn_probs is empty".into()));
    }
    for (label, p) in probs {
        if !p.is_finite() || !(0.0..=1.0).contains(p) {
            return Err(StoreError::Sidecar(format!(
                "probability for {label:?} is {p}, outside [0, 1]"
            )));
        }
    }
    let total: f64 = probs.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(StoreError::Sidecar(format!(
            "cnn_probs sum to {total}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
struct Sidecar {
    #[serde(default)]
    cnn_probs: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    ground_truth: Option<String>,
}

fn open(path: &Path) -> Result<File, StoreError> {
    File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Ingests one case from explicit table files and an optional sidecar.
pub fn ingest_case(
    manifest: &SchemaManifest,
    case_id: &str,
    table_files: &BTreeMap<String, PathBuf>,
    sidecar: Option<&Path>,
) -> Result<CaseBundle, StoreError> {
    let mut tables = Vec::with_capacity(table_files.len());
    for (name, path) in table_files {
        let schema = manifest
            .table(name)
            .ok_or_else(|| StoreError::UnknownTable(name.clone()))?;
        tables.push(FeatureTable::from_csv_reader(schema.clone(), open(path)?)?);
    }
    let sidecar = match sidecar {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            serde_json::from_str::<Sidecar>(&text).map_err(|e| StoreError::Sidecar(e.to_string()))?
        }
        None => Sidecar::default(),
    };
    let cnn_probs = sidecar.cnn_probs.map(|m| m.into_iter().collect());
    CaseBundle::new(manifest, case_id, tables, cnn_probs, sidecar.ground_truth)
}

/// Ingests `dir/<table>.csv` for every manifest table plus `dir/sidecar.json`
/// when present. The case id is the directory name.
pub fn ingest_case_dir(manifest: &SchemaManifest, dir: &Path) -> Result<CaseBundle, StoreError> {
    let case_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut files = BTreeMap::new();
    for schema in &manifest.tables {
        let path = dir.join(format!("{}.csv", schema.name));
        if !path.is_file() {
            return Err(StoreError::MissingTable(schema.name.clone()));
        }
        files.insert(schema.name.clone(), path);
    }
    let sidecar = dir.join(SIDECAR_FILE);
    let sidecar = sidecar.is_file().then_some(sidecar);
    ingest_case(manifest, &case_id, &files, sidecar.as_deref())
}

/// Loads every case directory under `root`, sorted by case id. Errors carry
/// the failing case id.
pub fn load_training_split(manifest: &SchemaManifest, root: &Path) -> Result<Vec<CaseBundle>, StoreError> {
    let entries = std::fs::read_dir(root).map_err(|source| StoreError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| StoreError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        if entry.path().is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|(case_id, path)| {
            ingest_case_dir(manifest, &path).map_err(|e| StoreError::InCase {
                case_id,
                source: Box::new(e),
            })
        })
        .collect()
}
