use std::io::Read;

use super::manifest::{Dtype, TableSchema};
use super::value::Value;
use super::StoreError;

/// Typed column storage. `None` is a null cell.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Integer(Vec<Option<i64>>),
    Real(Vec<Option<f64>>),
    Text(Vec<Option<String>>),
}

impl ColumnData {
    fn with_capacity(dtype: Dtype, n: usize) -> ColumnData {
        match dtype {
            Dtype::Integer => ColumnData::Integer(Vec::with_capacity(n)),
            Dtype::Real => ColumnData::Real(Vec::with_capacity(n)),
            Dtype::Text => ColumnData::Text(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ColumnData::Integer(v) => v.len(),
            ColumnData::Real(v) => v.len(),
            ColumnData::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize) -> Value {
        match self {
            ColumnData::Integer(v) => v[row].map_or(Value::Null, Value::Int),
            ColumnData::Real(v) => v[row].map_or(Value::Null, Value::Real),
            ColumnData::Text(v) => v[row].clone().map_or(Value::Null, Value::Text),
        }
    }

    fn push(&mut self, value: Value) {
        match (self, value) {
            (ColumnData::Integer(v), Value::Int(i)) => v.push(Some(i)),
            (ColumnData::Integer(v), Value::Null) => v.push(None),
            (ColumnData::Real(v), Value::Real(r)) => v.push(Some(r)),
            (ColumnData::Real(v), Value::Int(i)) => v.push(Some(i as f64)),
            (ColumnData::Real(v), Value::Null) => v.push(None),
            (ColumnData::Text(v), Value::Text(s)) => v.push(Some(s)),
            (ColumnData::Text(v), Value::Null) => v.push(None),
            _ => unreachable!("value checked against dtype before push"),
        }
    }
}

/// One immutable per-case table. Construction validates every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    schema: TableSchema,
    columns: Vec<ColumnData>,
    row_count: usize,
}

impl FeatureTable {
    /// Builds a table from row-major values, checking dtype, domain and key
    /// constraints. Integer values are accepted in real columns.
    pub fn from_rows(schema: TableSchema, rows: Vec<Vec<Value>>) -> Result<FeatureTable, StoreError> {
        let mut columns: Vec<ColumnData> = schema
            .columns
            .iter()
            .map(|c| ColumnData::with_capacity(c.dtype, rows.len()))
            .collect();
        let row_count = rows.len();
        for (row_idx, row) in rows.into_iter().enumerate() {
            if row.len() != schema.columns.len() {
                return Err(StoreError::TypeMismatch {
                    table: schema.name.clone(),
                    row: row_idx,
                    column: String::new(),
                    detail: format!(
                        "row has {} values, schema has {} columns",
                        row.len(),
                        schema.columns.len()
                    ),
                });
            }
            for (col_idx, value) in row.into_iter().enumerate() {
                check_cell(&schema, row_idx, col_idx, &value)?;
                columns[col_idx].push(value);
            }
        }
        Ok(FeatureTable {
            schema,
            columns,
            row_count,
        })
    }

    /// Reads a CSV whose header must equal the schema's column names in order.
    /// Empty fields are nulls.
    pub fn from_csv_reader(schema: TableSchema, reader: impl Read) -> Result<FeatureTable, StoreError> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let header = csv
            .headers()
            .map_err(|e| StoreError::Parse(format!("table {}: {e}", schema.name)))?
            .clone();
        let expected: Vec<&str> = schema.column_names().collect();
        let found: Vec<&str> = header.iter().collect();
        if found != expected {
            return Err(StoreError::HeaderMismatch {
                table: schema.name.clone(),
                expected: expected.iter().map(|s| s.to_string()).collect(),
                found: found.iter().map(|s| s.to_string()).collect(),
            });
        }
        let mut rows = Vec::new();
        for (row_idx, record) in csv.records().enumerate() {
            let record = record.map_err(|e| StoreError::Parse(format!("table {}: {e}", schema.name)))?;
            let mut row = Vec::with_capacity(record.len());
            for (col_idx, field) in record.iter().enumerate() {
                row.push(parse_field(&schema, row_idx, col_idx, field)?);
            }
            rows.push(row);
        }
        FeatureTable::from_rows(schema, rows)
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn column(&self, name: &str) -> Option<&ColumnData> {
        self.schema.column_index(name).map(|i| &self.columns[i])
    }

    pub fn columns(&self) -> &[ColumnData] {
        &self.columns
    }

    pub fn value(&self, row: usize, column: usize) -> Value {
        self.columns[column].get(row)
    }

    pub fn row(&self, row: usize) -> Vec<Value> {
        self.columns.iter().map(|c| c.get(row)).collect()
    }

    /// Re-serializes the table in the ingestion CSV format. Reals use the
    /// shortest representation that parses back to the same bits.
    pub fn to_csv_string(&self) -> String {
        let mut out = csv::WriterBuilder::new().from_writer(Vec::new());
        out.write_record(self.schema.column_names()).expect("in-memory write");
        for r in 0..self.row_count {
            let fields: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c.get(r) {
                    Value::Null => String::new(),
                    v => v.to_string(),
                })
                .collect();
            out.write_record(&fields).expect("in-memory write");
        }
        String::from_utf8(out.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

fn parse_field(schema: &TableSchema, row: usize, col: usize, field: &str) -> Result<Value, StoreError> {
    let column = &schema.columns[col];
    if field.is_empty() {
        return Ok(Value::Null);
    }
    let mismatch = |detail: String| StoreError::TypeMismatch {
        table: schema.name.clone(),
        row,
        column: column.name.clone(),
        detail,
    };
    match column.dtype {
        Dtype::Integer => field
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| mismatch(format!("{field:?} is not an integer"))),
        Dtype::Real => field
            .parse::<f64>()
            .ok()
            .and_then(Value::real)
            .ok_or_else(|| mismatch(format!("{field:?} is not a finite real"))),
        Dtype::Text => Ok(Value::Text(field.to_owned())),
    }
}

fn check_cell(schema: &TableSchema, row: usize, col: usize, value: &Value) -> Result<(), StoreError> {
    let column = &schema.columns[col];
    let mismatch = |detail: String| StoreError::TypeMismatch {
        table: schema.name.clone(),
        row,
        column: column.name.clone(),
        detail,
    };
    match (column.dtype, value) {
        (_, Value::Null) if column.is_key() => Err(mismatch("null in key column".into())),
        (_, Value::Null) => Ok(()),
        (Dtype::Integer, Value::Int(_)) => Ok(()),
        (Dtype::Real, Value::Int(_)) => Ok(()),
        (Dtype::Real, Value::Real(r)) if r.is_finite() => Ok(()),
        (Dtype::Text, Value::Text(s)) => match &column.categorical_domain {
            Some(domain) if !domain.iter().any(|d| d == s) => Err(StoreError::DomainViolation {
                table: schema.name.clone(),
                row,
                column: column.name.clone(),
                value: s.clone(),
            }),
            _ => Ok(()),
        },
        (dtype, v) => Err(mismatch(format!("{v:?} does not match dtype {dtype:?}"))),
    }
}
