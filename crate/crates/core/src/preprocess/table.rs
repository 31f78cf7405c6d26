use crate::error::{Error, Result};
use crate::ingest::{map_label, AttackClass, Column, ColumnKind, LabelMap, LoadedDataset};

/// Labeled raw cells, the input to encoder fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    /// Feature columns in order; the label column is not included.
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
    /// Class index per row, into `class_names`.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub sources: Vec<String>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> RawTable {
        RawTable {
            columns: self.columns.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            sources: self.sources.clone(),
        }
    }

    /// Drops classes with no rows from the label space, renumbering the rest.
    pub fn retain_present_classes(&self) -> RawTable {
        let counts = self.class_counts();
        let mut remap = vec![usize::MAX; counts.len()];
        let mut names = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                remap[c] = names.len();
                names.push(self.class_names[c].clone());
            } else {
                log::warn!("class {} has no rows and is left out of the label space", self.class_names[c]);
            }
        }
        RawTable {
            columns: self.columns.clone(),
            rows: self.rows.clone(),
            labels: self.labels.iter().map(|&l| remap[l]).collect(),
            class_names: names,
            sources: self.sources.clone(),
        }
    }

    /// Class-task table: every record labeled with its attack class.
    pub fn from_flows(ds: &LoadedDataset, map: &LabelMap, source: &str) -> Result<RawTable> {
        let classes = flow_classes(ds, map)?;
        let label_idx = ds.schema.label_index();
        Ok(RawTable {
            columns: ds.schema.feature_columns(),
            rows: ds
                .records
                .iter()
                .map(|r| without(&r.values, label_idx))
                .collect(),
            labels: classes.iter().map(|c| c.index()).collect(),
            class_names: AttackClass::ALL.iter().map(|c| c.to_string()).collect(),
            sources: vec![source.to_string()],
        })
    }

    /// Feature cells of a single raw record in this table's column layout.
    ///
    /// Accepts the full schema row (label and trailing columns included) or a
    /// row that omits the label.
    pub fn cells_for_prediction(&self, ds_columns: &[Column], cells: Vec<String>) -> Result<Vec<String>> {
        if cells.len() == self.columns.len() {
            return Ok(cells);
        }
        if cells.len() == ds_columns.len() {
            let label = ds_columns.iter().position(|c| c.kind == ColumnKind::Label);
            return Ok(match label {
                Some(i) => without(&cells, i),
                None => cells,
            });
        }
        Err(Error::Data(format!(
            "record has {} cells, expected {} (features) or {} (full row)",
            cells.len(),
            self.columns.len(),
            ds_columns.len()
        )))
    }
}

pub(crate) fn without(values: &[String], skip: usize) -> Vec<String> {
    values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, v)| v.clone())
        .collect()
}

/// Maps every record's tag; the first unknown tag aborts.
pub fn flow_classes(ds: &LoadedDataset, map: &LabelMap) -> Result<Vec<AttackClass>> {
    ds.records
        .iter()
        .map(|r| {
            map_label(ds.label_of(r), map).inspect_err(|_| log::error!("unmapped tag on line {}", r.line))
        })
        .collect()
}
