use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::ingest::ColumnKind;
use crate::preprocess::dataset::{one_hot, EncodedDataset, Provenance};
use crate::preprocess::table::RawTable;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;
const FORMAT_HEADER: &str = "idu-encoder v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnAction {
    OneHot { vocab: Vec<String> },
    Standardize { mean: f64, std: f64 },
    Passthrough,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub columns: Vec<(String, ColumnAction)>,
    pub fitted: bool,
}

/// Parses a numeric cell; empty, unparsable and non-finite cells are missing.
fn parse_numeric(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Learns vocabularies and standardization statistics from training rows.
pub fn fit_encoder(train: &RawTable) -> Result<EncoderSpec> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit an encoder on an empty training set".into()));
    }
    let mut columns = Vec::with_capacity(train.columns.len());
    for (j, col) in train.columns.iter().enumerate() {
        let action = match col.kind {
            ColumnKind::Ignored | ColumnKind::Label => ColumnAction::Drop,
            ColumnKind::Categorical => {
                let vocab: BTreeSet<&str> = train
                    .rows
                    .iter()
                    .map(|r| r[j].as_str())
                    .filter(|v| !v.is_empty())
                    .collect();
                if vocab.is_empty() {
                    log::warn!("column {} has no values; dropped", col.name);
                    ColumnAction::Drop
                } else {
                    ColumnAction::OneHot {
                        vocab: vocab.into_iter().map(str::to_string).collect(),
                    }
                }
            }
            ColumnKind::Numeric => {
                let mut n = 0usize;
                let mut sum = 0.0f64;
                for r in &train.rows {
                    if let Some(v) = parse_numeric(&r[j]) {
                        n += 1;
                        sum += v;
                    }
                }
                if n == 0 {
                    log::warn!("column {} is entirely missing; dropped", col.name);
                    ColumnAction::Drop
                } else {
                    let mean = sum / n as f64;
                    let mut ss = 0.0f64;
                    for r in &train.rows {
                        if let Some(v) = parse_numeric(&r[j]) {
                            ss += (v - mean) * (v - mean);
                        }
                    }
                    let std = (ss / n as f64).sqrt().max(STD_FLOOR);
                    ColumnAction::Standardize { mean, std }
                }
            }
        };
        columns.push((col.name.clone(), action));
    }
    Ok(EncoderSpec { columns, fitted: true })
}

impl EncoderSpec {
    /// A spec that names its columns but has learned nothing yet.
    pub fn unfitted(names: &[String]) -> Self {
        EncoderSpec {
            columns: names.iter().map(|n| (n.clone(), ColumnAction::Passthrough)).collect(),
            fitted: false,
        }
    }

    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|(_, a)| match a {
                ColumnAction::OneHot { vocab } => vocab.len(),
                ColumnAction::Standardize { .. } | ColumnAction::Passthrough => 1,
                ColumnAction::Drop => 0,
            })
            .sum()
    }

    pub fn output_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for (name, a) in &self.columns {
            match a {
                ColumnAction::OneHot { vocab } => out.extend(vocab.iter().map(|v| format!("{name}={v}"))),
                ColumnAction::Standardize { .. } | ColumnAction::Passthrough => out.push(name.clone()),
                ColumnAction::Drop => {}
            }
        }
        out
    }

    /// Encodes one row of raw cells. Unseen categories become an all-zero
    /// block; missing numeric cells become 0 (the training mean).
    pub fn encode_row(&self, cells: &[String], out: &mut Vec<f32>) -> Result<()> {
        if !self.fitted {
            return Err(Error::Usage("encoder spec is not fitted".into()));
        }
        if cells.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "row has {} cells, encoder expects {}",
                cells.len(),
                self.columns.len()
            )));
        }
        for ((_, action), cell) in self.columns.iter().zip(cells) {
            match action {
                ColumnAction::OneHot { vocab } => {
                    let hit = vocab.binary_search_by(|v| v.as_str().cmp(cell.as_str())).ok();
                    out.extend((0..vocab.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
                }
                ColumnAction::Standardize { mean, std } => {
                    let v = parse_numeric(cell).map_or(0.0, |v| (v - mean) / std);
                    out.push(v as f32);
                }
                ColumnAction::Passthrough => out.push(parse_numeric(cell).unwrap_or(0.0) as f32),
                ColumnAction::Drop => {}
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FORMAT_HEADER}").unwrap();
        writeln!(s, "fitted\t{}", self.fitted).unwrap();
        for (name, a) in &self.columns {
            match a {
                ColumnAction::OneHot { vocab } => {
                    write!(s, "onehot\t{name}").unwrap();
                    for v in vocab {
                        write!(s, "\t{v}").unwrap();
                    }
                    s.push('\n');
                }
                ColumnAction::Standardize { mean, std } => writeln!(s, "standardize\t{name}\t{mean:?}\t{std:?}").unwrap(),
                ColumnAction::Passthrough => writeln!(s, "passthrough\t{name}").unwrap(),
                ColumnAction::Drop => writeln!(s, "drop\t{name}").unwrap(),
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(Error::Data(format!("encoder spec must start with {FORMAT_HEADER:?}")));
        }
        let fitted = match lines.next().and_then(|l| l.strip_prefix("fitted\t")) {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(Error::Data("encoder spec: missing fitted flag".into())),
        };
        let bad = |l: &str| Error::Data(format!("encoder spec: malformed line {l:?}"));
        let mut columns = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() < 2 {
                return Err(bad(line));
            }
            let name = parts[1].to_string();
            let action = match parts[0] {
                "onehot" => ColumnAction::OneHot {
                    vocab: parts[2..].iter().map(|v| v.to_string()).collect(),
                },
                "standardize" if parts.len() == 4 => ColumnAction::Standardize {
                    mean: parts[2].parse().map_err(|_| bad(line))?,
                    std: parts[3].parse().map_err(|_| bad(line))?,
                },
                "passthrough" => ColumnAction::Passthrough,
                "drop" => ColumnAction::Drop,
                _ => return Err(bad(line)),
            };
            columns.push((name, action));
        }
        Ok(EncoderSpec { columns, fitted })
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_text())
    }
}

/// Encodes a labeled table with a fitted spec.
pub fn transform(table: &RawTable, spec: &EncoderSpec) -> Result<EncodedDataset> {
    if !spec.fitted {
        return Err(Error::Usage("transform called with an unfitted encoder spec".into()));
    }
    let d = spec.width();
    let mut x = Vec::with_capacity(table.len() * d);
    for row in &table.rows {
        spec.encode_row(row, &mut x)?;
    }
    let x = Tensor::new(vec![table.len(), d], x)?;
    x.ensure_finite("encoded features")?;
    let c = table.n_classes();
    Ok(EncodedDataset {
        x,
        y: one_hot(&table.labels, c)?,
        labels: table.labels.clone(),
        column_names: spec.output_names(),
        class_names: table.class_names.clone(),
        provenance: Provenance {
            sources: table.sources.clone(),
            encoder_digest: spec.digest(),
            seed: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Column;

    fn table(rows: &[(&str, &str)]) -> RawTable {
        RawTable {
            columns: vec![
                Column::new("proto", ColumnKind::Categorical),
                Column::new("bytes", ColumnKind::Numeric),
            ],
            rows: rows.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect(),
            labels: (0..rows.len()).map(|i| i % 2).collect(),
            class_names: vec!["a".into(), "b".into()],
            sources: vec!["test".into()],
        }
    }

    #[test]
    fn vocab_is_lexicographic() {
        let t = table(&[("udp", "1"), ("tcp", "2"), ("icmp", "3"), ("tcp", "4")]);
        let spec = fit_encoder(&t).unwrap();
        assert_eq!(spec.output_names(), vec!["proto=icmp", "proto=tcp", "proto=udp", "bytes"]);
        let ds = transform(&t, &spec).unwrap();
        assert_eq!(&ds.x.row(0)[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&ds.x.row(2)[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_numeric_column_encodes_to_zero() {
        let t = table(&[("tcp", "5"), ("udp", "5"), ("tcp", "5")]);
        let spec = fit_encoder(&t).unwrap();
        assert_eq!(spec.columns[1].1, ColumnAction::Standardize { mean: 5.0, std: STD_FLOOR });
        let ds = transform(&t, &spec).unwrap();
        assert!((0..3).all(|r| ds.x.at(r, 2) == 0.0));
    }

    #[test]
    fn unseen_category_is_all_zero() {
        let train = table(&[("tcp", "1"), ("udp", "3")]);
        let spec = fit_encoder(&train).unwrap();
        let digest = spec.digest();
        let test = table(&[("sctp", "2")]);
        let ds = transform(&test, &spec).unwrap();
        assert_eq!(ds.x.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(spec.digest(), digest, "transform must not touch the spec");
    }

    #[test]
    fn all_missing_column_is_dropped() {
        let t = table(&[("tcp", ""), ("udp", "NaN"), ("tcp", "Infinity")]);
        let spec = fit_encoder(&t).unwrap();
        assert_eq!(spec.columns[1].1, ColumnAction::Drop);
        assert_eq!(spec.width(), 2);
    }

    #[test]
    fn empty_and_unfitted() {
        let t = table(&[("tcp", "1"), ("udp", "2")]);
        let spec = fit_encoder(&t).unwrap();
        let empty = t.subset(&[]);
        let ds = transform(&empty, &spec).unwrap();
        assert_eq!(ds.x.dims(), &[0, 3]);
        assert!(fit_encoder(&empty).is_err());
        let unfitted = EncoderSpec::unfitted(&["proto".into(), "bytes".into()]);
        assert!(matches!(transform(&t, &unfitted), Err(Error::Usage(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let t = table(&[("tcp", "1.25"), ("udp", "3"), ("icmp", "-7.5")]);
        let spec = fit_encoder(&t).unwrap();
        let back = EncoderSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.digest(), spec.digest());
        assert!(EncoderSpec::from_text("idu-encoder v0\n").is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let t = table(&[("tcp", "1"), ("udp", "3"), ("icmp", "2")]);
        assert_eq!(fit_encoder(&t).unwrap().digest(), fit_encoder(&t).unwrap().digest());
    }
}
