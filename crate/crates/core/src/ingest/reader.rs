use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::schema::{DatasetSchema, SchemaName};

/// One raw row, cells aligned with the schema's columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub values: Vec<String>,
    /// 1-based line number in the source file.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Fraction of data rows that may be rejected before loading fails.
    pub max_reject_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_reject_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub schema: DatasetSchema,
    pub records: Vec<FlowRecord>,
    pub rejects: Vec<Reject>,
}

impl LoadedDataset {
    pub fn label_of<'a>(&self, record: &'a FlowRecord) -> &'a str {
        &record.values[self.schema.label_index()]
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: SchemaName) -> Result<LoadedDataset> {
    load_dataset_with(path, schema, &LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, schema: SchemaName, opts: &LoadOptions) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), schema, opts)
}

pub fn read_dataset<R: Read>(reader: R, schema: SchemaName, opts: &LoadOptions) -> Result<LoadedDataset> {
    let (schema, records, rejects, rows) = match DatasetSchema::fixed(schema) {
        Some(fixed) => read_plain(BufReader::new(reader), fixed)?,
        None => read_csv_with_header(reader)?,
    };
    if rows > 0 && rejects.len() as f64 > opts.max_reject_fraction * rows as f64 {
        let first = rejects
            .first()
            .map(|r| format!("line {}: {}", r.line, r.reason))
            .unwrap_or_default();
        return Err(Error::TooManyRejects {
            rejected: rejects.len(),
            total: rows,
            limit_pct: opts.max_reject_fraction * 100.0,
            first,
            report: rejects,
        });
    }
    Ok(LoadedDataset { schema, records, rejects })
}

type Parsed = (DatasetSchema, Vec<FlowRecord>, Vec<Reject>, usize);

fn check_cells(cells: &[String], schema: &DatasetSchema) -> std::result::Result<(), String> {
    if cells.len() != schema.width() {
        return Err(format!("expected {} cells, found {}", schema.width(), cells.len()));
    }
    if cells[schema.label_index()].is_empty() {
        return Err("empty label".into());
    }
    Ok(())
}

/// KDD family: comma separated, no quoting, no header.
fn read_plain<R: BufRead>(reader: R, schema: DatasetSchema) -> Result<Parsed> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let cells: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
        match check_cells(&cells, &schema) {
            Ok(()) => records.push(FlowRecord {
                values: cells,
                line: i + 1,
            }),
            Err(reason) => rejects.push(Reject { line: i + 1, reason }),
        }
    }
    Ok((schema, records, rejects, rows))
}

/// CICIDS2017: header row, quoted fields allowed.
fn read_csv_with_header<R: Read>(reader: R) -> Result<Parsed> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let schema = DatasetSchema::cicids2017_from_header(&header)?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut rows = 0;
    for result in rdr.records() {
        rows += 1;
        match result {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let cells: Vec<String> = rec.iter().map(|c| c.trim().to_string()).collect();
                match check_cells(&cells, &schema) {
                    Ok(()) => records.push(FlowRecord { values: cells, line }),
                    Err(reason) => rejects.push(Reject { line, reason }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                rejects.push(Reject {
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((schema, records, rejects, rows))
}

/// Writes the reject report as line-delimited JSON objects `{line, reason}`.
pub fn write_reject_report(rejects: &[Reject], mut out: impl Write) -> Result<()> {
    for r in rejects {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("reject report", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kdd_row(label: &str) -> String {
        let mut cells = vec!["0", "tcp", "http", "SF"];
        cells.extend(std::iter::repeat_n("1", 37));
        cells.push(label);
        cells.join(",")
    }

    #[test]
    fn three_good_kdd_rows() {
        let text = [kdd_row("normal."), kdd_row("smurf."), kdd_row("nmap.")].join("\n");
        let ds = read_dataset(text.as_bytes(), SchemaName::Kdd99, &LoadOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert!(ds.rejects.is_empty());
        assert_eq!(ds.label_of(&ds.records[1]), "smurf.");
        assert_eq!(ds.records[2].line, 3);
    }

    #[test]
    fn short_row_is_rejected_with_line_number() {
        let mut lines: Vec<String> = (0..150).map(|_| kdd_row("normal.")).collect();
        let mut short: Vec<&str> = kdd_row("normal.").split(',').map(|_| "0").collect();
        short.truncate(40);
        lines.insert(7, short.join(","));
        let ds = read_dataset(lines.join("\n").as_bytes(), SchemaName::Kdd99, &LoadOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 150);
        assert_eq!(ds.rejects.len(), 1);
        assert_eq!(ds.rejects[0].line, 8);
        assert!(ds.rejects[0].reason.contains("40"));
    }

    #[test]
    fn too_many_rejects_fail_loudly() {
        let text = [kdd_row("normal."), "1,2,3".to_string(), kdd_row("back.")].join("\n");
        match read_dataset(text.as_bytes(), SchemaName::Kdd99, &LoadOptions::default()) {
            Err(Error::TooManyRejects { rejected, total, report, .. }) => {
                assert_eq!((rejected, total), (1, 3));
                assert_eq!(report[0].line, 2);
            }
            other => panic!("expected TooManyRejects, got {other:?}"),
        }
    }

    #[test]
    fn nsl_difficulty_is_ignored() {
        let row = format!("{},21", kdd_row("neptune"));
        let ds = read_dataset(row.as_bytes(), SchemaName::NslKdd, &LoadOptions::default()).unwrap();
        assert_eq!(ds.label_of(&ds.records[0]), "neptune");
        assert_eq!(ds.schema.feature_columns().last().unwrap().name, "difficulty");
    }

    #[test]
    fn reading_is_deterministic() {
        let text = [kdd_row("normal."), "x".to_string(), kdd_row("back.")].join("\n");
        let opts = LoadOptions {
            max_reject_fraction: 0.5,
        };
        let a = read_dataset(text.as_bytes(), SchemaName::Kdd99, &opts).unwrap();
        let b = read_dataset(text.as_bytes(), SchemaName::Kdd99, &opts).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.rejects, b.rejects);
        let mut out = Vec::new();
        write_reject_report(&a.rejects, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"line\":2,\"reason\":\"expected 42 cells, found 1\"}\n"
        );
    }

    #[test]
    fn cicids_quoted_rows() {
        let mut header: Vec<String> = (0..78).map(|i| format!(" F{i}")).collect();
        header.push(" Label".into());
        let mut text = header.join(",") + "\n";
        let mut row: Vec<String> = (0..78).map(|i| i.to_string()).collect();
        row[3] = "\"1,5\"".into();
        row.push("\"Web Attack – XSS\"".into());
        text += &row.join(",");
        text += "\n";
        let ds = read_dataset(text.as_bytes(), SchemaName::Cicids2017, &LoadOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].values[3], "1,5");
        assert_eq!(ds.label_of(&ds.records[0]), "Web Attack – XSS");
        assert_eq!(ds.records[0].line, 2);
    }
}
