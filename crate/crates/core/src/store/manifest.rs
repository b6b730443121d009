use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::sql::is_reserved_word;

const CANONICAL_MANIFEST: &str = include_str!("../../fixtures/canonical_manifest.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    LocalCellular,
    LocalArchitecture,
    Global,
}

impl Level {
    pub fn is_local(self) -> bool {
        !matches!(self, Level::Global)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Integer,
    Real,
    Text,
}

impl Dtype {
    pub fn is_numeric(self) -> bool {
        matches!(self, Dtype::Integer | Dtype::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub name: String,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical_domain: Option<Vec<String>>,
}

impl ColumnSchema {
    /// Key columns (`*_id`) may never hold nulls.
    pub fn is_key(&self) -> bool {
        self.name.ends_with("_id")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub name: String,
    pub level: Level,
    pub columns: Vec<ColumnSchema>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }
}

/// The typed table catalogue every case conforms to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaManifest {
    pub version: String,
    pub tables: Vec<TableSchema>,
}

impl SchemaManifest {
    /// The shipped three-table schema (`cells`, `structures`, `global_features`).
    pub fn canonical() -> SchemaManifest {
        SchemaManifest::from_json_str(CANONICAL_MANIFEST).expect("canonical manifest is valid")
    }

    pub fn from_json_str(text: &str) -> Result<SchemaManifest, StoreError> {
        let manifest: SchemaManifest =
            serde_json::from_str(text).map_err(|e| StoreError::Parse(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.tables.is_empty() {
            return Err(StoreError::Manifest("manifest declares no tables".into()));
        }
        let mut table_names = HashSet::new();
        for table in &self.tables {
            check_identifier(&table.name)?;
            if !table_names.insert(table.name.as_str()) {
                return Err(StoreError::Manifest(format!(
                    "duplicate table name {:?}",
                    table.name
                )));
            }
            if table.columns.is_empty() {
                return Err(StoreError::Manifest(format!(
                    "table {:?} declares no columns",
                    table.name
                )));
            }
            let mut column_names = HashSet::new();
            for column in &table.columns {
                check_identifier(&column.name)?;
                if !column_names.insert(column.name.as_str()) {
                    return Err(StoreError::Manifest(format!(
                        "duplicate column {:?} in table {:?}",
                        column.name, table.name
                    )));
                }
                if let Some(domain) = &column.categorical_domain {
                    if column.dtype != Dtype::Text {
                        return Err(StoreError::Manifest(format!(
                            "categorical_domain on non-text column {}.{}",
                            table.name, column.name
                        )));
                    }
                    let unique: HashSet<_> = domain.iter().collect();
                    if domain.is_empty() || unique.len() != domain.len() {
                        return Err(StoreError::Manifest(format!(
                            "categorical_domain of {}.{} must be non-empty and unique",
                            table.name, column.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn tables_at(&self, level: Level) -> impl Iterator<Item = &TableSchema> {
        self.tables.iter().filter(move |t| t.level == level)
    }

    /// `(table, column)` lookup for `table.column` feature keys.
    pub fn resolve_feature(&self, key: &str) -> Option<(&TableSchema, &ColumnSchema)> {
        let (table, column) = key.split_once('.')?;
        let table = self.table(table)?;
        Some((table, table.column(column)?))
    }
}

fn check_identifier(name: &str) -> Result<(), StoreError> {
    let mut chars = name.chars();
    let valid = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !valid {
        return Err(StoreError::Manifest(format!("invalid identifier {name:?}")));
    }
    if is_reserved_word(name) {
        return Err(StoreError::Manifest(format!(
            "identifier {name:?} collides with a query keyword"
        )));
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SchemaManifest, StoreError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    SchemaManifest::from_json_str(&text)
}
