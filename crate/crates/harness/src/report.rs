//! Table emission and the per-run `manifest.json` index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// A header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &str) -> Self {
        Table {
            header: header.split(',').map(String::from).collect(),
            rows: vec![],
        }
    }

    /// Appends a comma-joined row as produced by the `csv_row` helpers.
    pub fn push_line(&mut self, line: &str) {
        self.rows.push(line.split(',').map(String::from).collect());
    }

    pub fn push(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Array of objects; cells that parse as numbers or booleans keep that type.
    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let obj: Map<String, Value> = self
                    .header
                    .iter()
                    .cloned()
                    .zip(r.iter().map(|c| cell_value(c)))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&rows).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

fn cell_value(c: &str) -> Value {
    if c.is_empty() {
        return Value::Null;
    }
    if let Ok(b) = c.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = c.parse::<i64>() {
        return Value::from(i);
    }
    match c.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::String(c.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub format: Format,
    pub artifacts: Vec<Artifact>,
    #[serde(default)]
    pub run_ids: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Collects artifacts under one output directory and writes the manifest
/// last. Paths in the manifest are relative to the directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    format: Format,
    pub manifest: Manifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, seed: u64, format: Format) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            format,
            manifest: Manifest {
                command: command.into(),
                seed,
                config_hash: None,
                format,
                artifacts: vec![],
                run_ids: vec![],
                warnings: vec![],
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn format(&self) -> Format {
        self.format
    }

    fn write(
        &mut self,
        rel: PathBuf,
        kind: &str,
        content: &[u8],
        rows: Option<usize>,
    ) -> Result<PathBuf> {
        let path = self.root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        fs::write(&path, content).map_err(|e| HarnessError::io(&path, e))?;
        self.manifest.artifacts.push(Artifact {
            path: rel.clone(),
            kind: kind.into(),
            rows,
        });
        Ok(rel)
    }

    /// Writes `table` as `<stem>.csv` or `<stem>.json`.
    pub fn table(&mut self, stem: &str, kind: &str, table: &Table) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("{stem}.{}", self.format.extension()));
        self.write(
            rel,
            kind,
            table.render(self.format).as_bytes(),
            Some(table.rows.len()),
        )
    }

    pub fn file(&mut self, rel: &str, kind: &str, content: &[u8]) -> Result<PathBuf> {
        self.write(PathBuf::from(rel), kind, content, None)
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.manifest.warnings.push(msg);
    }

    pub fn finish(self) -> Result<Manifest> {
        let path = self.root.join("manifest.json");
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
        Ok(self.manifest)
    }
}
