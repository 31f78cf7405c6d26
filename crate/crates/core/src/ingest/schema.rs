use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaName {
    Kdd99,
    NslKdd,
    Cicids2017,
}

impl SchemaName {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaName::Kdd99 => "kdd99",
            SchemaName::NslKdd => "nslkdd",
            SchemaName::Cicids2017 => "cicids2017",
        }
    }

    /// KDD-family tags are lowercased and lose one trailing '.' before lookup.
    pub fn is_kdd_family(self) -> bool {
        matches!(self, SchemaName::Kdd99 | SchemaName::NslKdd)
    }
}

impl fmt::Display for SchemaName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemaName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "kdd99" | "kddcup99" => Ok(SchemaName::Kdd99),
            "nslkdd" => Ok(SchemaName::NslKdd),
            "cicids2017" => Ok(SchemaName::Cicids2017),
            other => Err(Error::Config(format!("unknown schema {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Label,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column {
            name: name.into(),
            kind,
        }
    }
}

pub const KDD_FEATURES: [&str; 41] = [
    "duration",
    "protocol_type",
    "service",
    "flag",
    "src_bytes",
    "dst_bytes",
    "land",
    "wrong_fragment",
    "urgent",
    "hot",
    "num_failed_logins",
    "logged_in",
    "num_compromised",
    "root_shell",
    "su_attempted",
    "num_root",
    "num_file_creations",
    "num_shells",
    "num_access_files",
    "num_outbound_cmds",
    "is_host_login",
    "is_guest_login",
    "count",
    "srv_count",
    "serror_rate",
    "srv_serror_rate",
    "rerror_rate",
    "srv_rerror_rate",
    "same_srv_rate",
    "diff_srv_rate",
    "srv_diff_host_rate",
    "dst_host_count",
    "dst_host_srv_count",
    "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate",
    "dst_host_srv_serror_rate",
    "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
];

const KDD_CATEGORICAL: [&str; 3] = ["protocol_type", "service", "flag"];

/// CICIDS2017 header cells that identify a flow rather than describe it.
const CIC_IDENTIFIERS: [&str; 6] = ["flow id", "source ip", "src ip", "destination ip", "dst ip", "timestamp"];

pub const CIC_MIN_COLUMNS: usize = 70;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: SchemaName,
    pub columns: Vec<Column>,
    pub has_header: bool,
}

impl DatasetSchema {
    /// 41 features followed by the label.
    pub fn kdd99() -> Self {
        let mut columns = kdd_columns();
        columns.push(Column::new("label", ColumnKind::Label));
        DatasetSchema {
            name: SchemaName::Kdd99,
            columns,
            has_header: false,
        }
    }

    /// 41 features, the label, then the (ignored) difficulty score.
    pub fn nslkdd() -> Self {
        let mut columns = kdd_columns();
        columns.push(Column::new("label", ColumnKind::Label));
        columns.push(Column::new("difficulty", ColumnKind::Ignored));
        DatasetSchema {
            name: SchemaName::NslKdd,
            columns,
            has_header: false,
        }
    }

    /// Builds the CICIDS2017 schema from a CSV header row.
    pub fn cicids2017_from_header(header: &[String]) -> Result<Self> {
        if header.len() < CIC_MIN_COLUMNS {
            return Err(Error::Data(format!(
                "CICIDS2017 header has {} columns, expected at least {CIC_MIN_COLUMNS}",
                header.len()
            )));
        }
        let mut seen = std::collections::HashMap::new();
        let columns = header
            .iter()
            .map(|raw| {
                let name = raw.trim();
                let lower = name.to_ascii_lowercase();
                let kind = if lower == "label" {
                    ColumnKind::Label
                } else if CIC_IDENTIFIERS.contains(&lower.as_str()) {
                    ColumnKind::Ignored
                } else {
                    ColumnKind::Numeric
                };
                // the public CSVs repeat "Fwd Header Length"
                let n = seen.entry(name.to_string()).or_insert(0usize);
                let unique = if *n == 0 { name.to_string() } else { format!("{name}.{n}") };
                *n += 1;
                Column::new(unique, kind)
            })
            .collect();
        let schema = DatasetSchema {
            name: SchemaName::Cicids2017,
            columns,
            has_header: true,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Fixed schemas; CICIDS2017 needs its header and is built by the reader.
    pub fn fixed(name: SchemaName) -> Option<Self> {
        match name {
            SchemaName::Kdd99 => Some(Self::kdd99()),
            SchemaName::NslKdd => Some(Self::nslkdd()),
            SchemaName::Cicids2017 => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.columns.iter().filter(|c| c.kind == ColumnKind::Label).count();
        if labels != 1 {
            return Err(Error::Data(format!(
                "schema {} has {labels} label columns, expected exactly one",
                self.name
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn label_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.kind == ColumnKind::Label)
            .expect("validated schema has a label column")
    }

    /// Every column except the label, in file order (ignored ones included).
    pub fn feature_columns(&self) -> Vec<Column> {
        self.columns.iter().filter(|c| c.kind != ColumnKind::Label).cloned().collect()
    }
}

fn kdd_columns() -> Vec<Column> {
    KDD_FEATURES
        .iter()
        .map(|&n| {
            let kind = if KDD_CATEGORICAL.contains(&n) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Numeric
            };
            Column::new(n, kind)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kdd_widths() {
        assert_eq!(DatasetSchema::kdd99().width(), 42);
        let nsl = DatasetSchema::nslkdd();
        assert_eq!(nsl.width(), 43);
        assert_eq!(nsl.label_index(), 41);
        assert_eq!(nsl.columns[42].kind, ColumnKind::Ignored);
        let cats: Vec<_> = nsl.columns.iter().filter(|c| c.kind == ColumnKind::Categorical).collect();
        assert_eq!(cats.len(), 3);
    }

    #[test]
    fn cicids_header_rules() {
        let mut header: Vec<String> = (0..77).map(|i| format!(" Feature {i}")).collect();
        header.insert(0, "Flow ID".into());
        header.push("Fwd Header Length".into());
        header.push("Fwd Header Length".into());
        header.push(" Label".into());
        let s = DatasetSchema::cicids2017_from_header(&header).unwrap();
        assert_eq!(s.columns[0].kind, ColumnKind::Ignored);
        assert_eq!(s.label_index(), header.len() - 1);
        assert_eq!(s.columns[s.width() - 2].name, "Fwd Header Length.1");

        let short: Vec<String> = (0..10).map(|i| i.to_string()).chain(["Label".to_string()]).collect();
        assert!(DatasetSchema::cicids2017_from_header(&short).is_err());
        let no_label: Vec<String> = (0..80).map(|i| i.to_string()).collect();
        assert!(DatasetSchema::cicids2017_from_header(&no_label).is_err());
    }

    #[test]
    fn schema_names_parse() {
        assert_eq!("NSL-KDD".parse::<SchemaName>().unwrap(), SchemaName::NslKdd);
        assert_eq!("kdd99".parse::<SchemaName>().unwrap(), SchemaName::Kdd99);
        assert!("unsw".parse::<SchemaName>().is_err());
    }
}
