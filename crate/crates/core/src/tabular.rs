//! Table data model, cell typing, and corpus ingestion.
//!
//! Two on-disk table formats are supported:
//!
//! * `tabfact`: one file per table, `#`-delimited, first line holds the
//!   headers. The table id is the file name (e.g. `2-1859269-1.html.csv`).
//! * `native`: one JSON document per table, `{id, caption, headers, rows}`
//!   where `rows` is a list of lists of raw cell strings.
//!
//! Statements come either as the TABFACT map
//! `table_id -> [[texts], [labels], caption]` or as JSON lines
//! `{table_id, text, label}`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: row has {found} cells, expected {expected}")]
    RaggedRow {
        file: String,
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("{file}: table has no data rows or no columns")]
    EmptyTable { file: String },
    #[error("{file}: duplicate header {header:?} after normalization")]
    DuplicateHeader { file: String, header: String },
    #[error("{file}:{line}: unknown table id {table_id:?}")]
    UnknownTableId {
        file: String,
        line: usize,
        table_id: String,
    },
    #[error("{file}:{line}: label {label} is not 0 or 1")]
    LabelOutOfRange { file: String, line: usize, label: i64 },
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            out.extend(c.to_lowercase());
        }
    }
    out
}

const CURRENCY: &[char] = &['$', '€', '£', '¥', '₹', '₩'];

/// Parses a cell string as a number, tolerating thousands separators,
/// currency symbols and surrounding whitespace. Exponents, `inf` and `nan`
/// are rejected; only plain decimal notation counts as numeric.
pub fn parse_number(raw: &str) -> Option<f64> {
    let s = raw.trim().trim_matches(|c| CURRENCY.contains(&c)).trim();
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s.strip_prefix('+').unwrap_or(s)),
    };
    let body = body.trim_start_matches(|c| CURRENCY.contains(&c));
    if body.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let int_digits = strip_grouping(int_part)?;
    if let Some(frac) = frac_part {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if int_digits.is_empty() && frac.is_empty() {
            return None;
        }
    } else if int_digits.is_empty() {
        return None;
    }
    let mut text = String::with_capacity(body.len() + 2);
    text.push_str(sign);
    text.push_str(if int_digits.is_empty() { "0" } else { &int_digits });
    if let Some(frac) = frac_part {
        text.push('.');
        text.push_str(frac);
    }
    text.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Removes `,` thousands separators when they form valid 3-digit groups.
fn strip_grouping(int_part: &str) -> Option<String> {
    if !int_part.contains(',') {
        return int_part
            .bytes()
            .all(|b| b.is_ascii_digit())
            .then(|| int_part.to_string());
    }
    let mut groups = int_part.split(',');
    let head = groups.next()?;
    if head.is_empty() || head.len() > 3 || !head.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut out = head.to_string();
    for g in groups {
        if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        out.push_str(g);
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub raw: String,
    pub numeric: Option<f64>,
}

impl Cell {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let numeric = parse_number(&raw);
        Cell { raw, numeric }
    }

    pub fn normalized(&self) -> String {
        normalize(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub id: String,
    pub caption: String,
    pub headers: Vec<String>,
    normalized_headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Builds a table from raw strings, checking every table invariant.
    /// `origin` names the source in error messages.
    pub fn new(
        id: impl Into<String>,
        caption: impl Into<String>,
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
        origin: &str,
    ) -> Result<Self, DataError> {
        Self::with_line_numbers(id, caption, headers, rows, origin, |i| i + 1)
    }

    fn with_line_numbers(
        id: impl Into<String>,
        caption: impl Into<String>,
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
        origin: &str,
        line_of: impl Fn(usize) -> usize,
    ) -> Result<Self, DataError> {
        if headers.is_empty() || rows.is_empty() {
            return Err(DataError::EmptyTable {
                file: origin.to_string(),
            });
        }
        let mut seen = HashSet::new();
        let normalized_headers: Vec<String> = headers.iter().map(|h| normalize(h)).collect();
        for h in &normalized_headers {
            if !seen.insert(h.clone()) {
                return Err(DataError::DuplicateHeader {
                    file: origin.to_string(),
                    header: h.clone(),
                });
            }
        }
        let width = headers.len();
        let mut cells = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(DataError::RaggedRow {
                    file: origin.to_string(),
                    line: line_of(i),
                    found: row.len(),
                    expected: width,
                });
            }
            cells.push(row.into_iter().map(Cell::new).collect());
        }
        Ok(Table {
            id: id.into(),
            caption: caption.into(),
            headers,
            normalized_headers,
            rows: cells,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.headers.len()
    }

    pub fn normalized_headers(&self) -> &[String] {
        &self.normalized_headers
    }

    /// Column index for a header, matched after normalization.
    pub fn column_index(&self, header: &str) -> Option<usize> {
        let key = normalize(header);
        self.normalized_headers.iter().position(|h| *h == key)
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.rows[row][col]
    }

    /// Parses the TABFACT `#`-delimited layout.
    pub fn from_tabfact_csv(id: &str, text: &str, origin: &str) -> Result<Self, DataError> {
        let mut lines = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let headers: Vec<String> = match lines.next() {
            Some((_, l)) => l.split('#').map(str::to_string).collect(),
            None => {
                return Err(DataError::EmptyTable {
                    file: origin.to_string(),
                })
            }
        };
        let mut line_numbers = Vec::new();
        let mut rows = Vec::new();
        for (idx, line) in lines {
            line_numbers.push(idx + 1);
            rows.push(line.split('#').map(str::to_string).collect());
        }
        Self::with_line_numbers(id, "", headers, rows, origin, |i| line_numbers[i])
    }

    pub fn to_tabfact_csv(&self) -> String {
        let mut out = self.headers.join("#");
        out.push('\n');
        for row in &self.rows {
            let raw: Vec<&str> = row.iter().map(|c| c.raw.as_str()).collect();
            out.push_str(&raw.join("#"));
            out.push('\n');
        }
        out
    }

    pub fn from_native_json(text: &str, origin: &str) -> Result<Self, DataError> {
        let doc: NativeTable = serde_json::from_str(text).map_err(|e| DataError::Malformed {
            file: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(doc.id, doc.caption, doc.headers, doc.rows, origin)
    }

    pub fn to_native(&self) -> NativeTable {
        NativeTable {
            id: self.id.clone(),
            caption: self.caption.clone(),
            headers: self.headers.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|c| c.raw.clone()).collect())
                .collect(),
        }
    }

    pub fn to_native_json(&self) -> String {
        serde_json::to_string(&self.to_native()).expect("table serializes")
    }
}

/// Serialized form of the native table format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NativeTable {
    pub id: String,
    #[serde(default)]
    pub caption: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Tabfact,
    Native,
}

impl std::str::FromStr for TableFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabfact" => Ok(TableFormat::Tabfact),
            "native" => Ok(TableFormat::Native),
            other => Err(format!("unknown table format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementFormat {
    Tabfact,
    Jsonl,
}

impl std::str::FromStr for StatementFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabfact" => Ok(StatementFormat::Tabfact),
            "jsonl" => Ok(StatementFormat::Jsonl),
            other => Err(format!("unknown statement format {other:?}")),
        }
    }
}

pub type TableMap = BTreeMap<String, Table>;

/// Loads one table file or every table file in a directory (sorted by
/// name). Tabfact files are `*.csv`; native files are `*.json`.
pub fn load_tables(path: &Path, format: TableFormat) -> Result<TableMap, DataError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let ext = match format {
            TableFormat::Tabfact => "csv",
            TableFormat::Native => "json",
        };
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| DataError::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut tables = TableMap::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| DataError::io(&file, e))?;
        let origin = file.display().to_string();
        let table = match format {
            TableFormat::Tabfact => {
                let id = file
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Table::from_tabfact_csv(&id, &text, &origin)?
            }
            TableFormat::Native => Table::from_native_json(&text, &origin)?,
        };
        tables.insert(table.id.clone(), table);
    }
    Ok(tables)
}

/// Gold verification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Refuted = 0,
    Entailed = 1,
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Entailed
        } else {
            Label::Refuted
        }
    }

    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            0 => Some(Label::Refuted),
            1 => Some(Label::Entailed),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_int(v).ok_or_else(|| serde::de::Error::custom(format!("label {v} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    /// Stable identifier, `<table_id>#<index>` unless the source provides one.
    pub id: String,
    pub table_id: String,
    pub text: String,
    pub label: Label,
    /// Optional split tag (e.g. `simple` / `complex`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Deserialize)]
struct JsonlStatement {
    #[serde(default)]
    id: Option<String>,
    table_id: String,
    text: String,
    label: i64,
    #[serde(default)]
    tag: Option<String>,
}

/// Loads statements and checks each one against the loaded tables.
pub fn load_statements(
    path: &Path,
    format: StatementFormat,
    tables: &TableMap,
) -> Result<Vec<Statement>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let origin = path.display().to_string();
    match format {
        StatementFormat::Tabfact => parse_tabfact_statements(&text, &origin, tables),
        StatementFormat::Jsonl => parse_jsonl_statements(&text, &origin, tables),
    }
}

pub fn parse_tabfact_statements(
    text: &str,
    origin: &str,
    tables: &TableMap,
) -> Result<Vec<Statement>, DataError> {
    let malformed = |message: String| DataError::Malformed {
        file: origin.to_string(),
        line: 1,
        message,
    };
    // serde_json's map keeps keys sorted, giving a stable statement order
    let doc: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| DataError::Malformed {
            file: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (table_id, entry) in doc {
        if !tables.contains_key(&table_id) {
            return Err(DataError::UnknownTableId {
                file: origin.to_string(),
                line: 1,
                table_id,
            });
        }
        let parts = entry
            .as_array()
            .ok_or_else(|| malformed(format!("{table_id}: expected [texts, labels, caption]")))?;
        let texts = parts
            .first()
            .and_then(|v| v.as_array())
            .ok_or_else(|| malformed(format!("{table_id}: missing statement list")))?;
        let labels = parts
            .get(1)
            .and_then(|v| v.as_array())
            .ok_or_else(|| malformed(format!("{table_id}: missing label list")))?;
        if texts.len() != labels.len() {
            return Err(malformed(format!(
                "{table_id}: {} statements but {} labels",
                texts.len(),
                labels.len()
            )));
        }
        for (i, (t, l)) in texts.iter().zip(labels).enumerate() {
            let text = t
                .as_str()
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| malformed(format!("{table_id}: statement {i} is not a nonempty string")))?;
            let raw_label = l
                .as_i64()
                .ok_or_else(|| malformed(format!("{table_id}: label {i} is not an integer")))?;
            let label = Label::from_int(raw_label).ok_or(DataError::LabelOutOfRange {
                file: origin.to_string(),
                line: 1,
                label: raw_label,
            })?;
            out.push(Statement {
                id: format!("{table_id}#{i}"),
                table_id: table_id.clone(),
                text: text.to_string(),
                label,
                tag: None,
            });
        }
    }
    Ok(out)
}

pub fn parse_jsonl_statements(
    text: &str,
    origin: &str,
    tables: &TableMap,
) -> Result<Vec<Statement>, DataError> {
    let mut out = Vec::new();
    let mut per_table: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlStatement = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            file: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !tables.contains_key(&rec.table_id) {
            return Err(DataError::UnknownTableId {
                file: origin.to_string(),
                line: lineno,
                table_id: rec.table_id,
            });
        }
        let label = Label::from_int(rec.label).ok_or(DataError::LabelOutOfRange {
            file: origin.to_string(),
            line: lineno,
            label: rec.label,
        })?;
        if rec.text.trim().is_empty() {
            return Err(DataError::Malformed {
                file: origin.to_string(),
                line: lineno,
                message: "empty statement text".into(),
            });
        }
        let n = per_table.entry(rec.table_id.clone()).or_default();
        let id = rec.id.unwrap_or_else(|| format!("{}#{}", rec.table_id, n));
        *n += 1;
        out.push(Statement {
            id,
            table_id: rec.table_id,
            text: rec.text,
            label,
            tag: rec.tag,
        });
    }
    Ok(out)
}

pub fn statements_to_jsonl(statements: &[Statement]) -> String {
    let mut out = String::new();
    for s in statements {
        out.push_str(&serde_json::to_string(s).expect("statement serializes"));
        out.push('\n');
    }
    out
}
