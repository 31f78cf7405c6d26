use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub encoder_digest: String,
    pub seed: Option<u64>,
}

/// Numeric features with one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    /// Class index per row; always agrees with `y`.
    pub labels: Vec<usize>,
    pub column_names: Vec<String>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut y = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        y[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], y)
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
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

    pub fn subset(&self, idx: &[usize]) -> EncodedDataset {
        EncodedDataset {
            x: self.x.select_rows(idx).reshape(&[idx.len(), self.width()]).expect("row subset keeps width"),
            y: self.y.select_rows(idx).reshape(&[idx.len(), self.n_classes()]).expect("row subset keeps classes"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            column_names: self.column_names.clone(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Checks the one-hot, width and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.x.dims() != [n, self.column_names.len()] || self.y.dims() != [n, self.n_classes()] {
            return Err(Error::Shape(format!(
                "dataset dims x {:?}, y {:?} for {n} rows, {} columns, {} classes",
                self.x.dims(),
                self.y.dims(),
                self.column_names.len(),
                self.n_classes()
            )));
        }
        if one_hot(&self.labels, self.n_classes())? != self.y {
            return Err(Error::Data("label rows are not one-hot".into()));
        }
        self.x.ensure_finite("dataset features")
    }

    pub fn to_text(&self, run_digest: &str) -> String {
        let mut s = String::new();
        writeln!(s, "# idu-dataset v1").unwrap();
        writeln!(s, "# run_config_digest={run_digest}").unwrap();
        writeln!(s, "# classes={}", self.class_names.join("|")).unwrap();
        writeln!(s, "# provenance={}", serde_json::to_string(&self.provenance).unwrap()).unwrap();
        let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
        header.push("label");
        writeln!(s, "{}", header.join(",")).unwrap();
        let d = self.width();
        for (i, &l) in self.labels.iter().enumerate() {
            for v in &self.x.data()[i * d..(i + 1) * d] {
                write!(s, "{v:?},").unwrap();
            }
            writeln!(s, "{}", self.class_names[l]).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>, run_digest: &str) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text(run_digest).as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset file; returns it with the embedded run-config digest.
    pub fn read(path: impl AsRef<Path>) -> Result<(EncodedDataset, String)> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Data(format!("{}: missing {what}", path.display())))?
                .map_err(|e| Error::io(path, e))
        };
        if next("format line")? != "# idu-dataset v1" {
            return Err(Error::Data(format!("{}: not an idu dataset file", path.display())));
        }
        let meta = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(&format!("# {key}="))
                .map(str::to_string)
                .ok_or_else(|| Error::Data(format!("{}: expected {key} header", path.display())))
        };
        let digest = meta(next("digest")?, "run_config_digest")?;
        let class_names: Vec<String> = meta(next("classes")?, "classes")?.split('|').map(str::to_string).collect();
        let provenance: Provenance = serde_json::from_str(&meta(next("provenance")?, "provenance")?)?;
        let header = next("column header")?;
        let mut column_names: Vec<String> = header.split(',').map(str::to_string).collect();
        if column_names.pop().as_deref() != Some("label") {
            return Err(Error::Data(format!("{}: last column must be label", path.display())));
        }
        let d = column_names.len();
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d + 1 {
                return Err(Error::Data(format!("{}: row {} has {} cells", path.display(), n + 1, cells.len())));
            }
            for c in &cells[..d] {
                x.push(c.parse::<f32>().map_err(|_| Error::Data(format!("{}: bad number {c:?}", path.display())))?);
            }
            let l = class_names
                .iter()
                .position(|c| c == cells[d])
                .ok_or_else(|| Error::Data(format!("{}: unknown class {:?}", path.display(), cells[d])))?;
            labels.push(l);
        }
        let ds = EncodedDataset {
            x: Tensor::new(vec![labels.len(), d], x)?,
            y: one_hot(&labels, class_names.len())?,
            labels,
            column_names,
            class_names,
            provenance,
        };
        ds.validate()?;
        Ok((ds, digest))
    }
}

/// Train/test row indices. Stratification splits every class separately.
pub fn split_indices(
    labels: &[usize],
    n_classes: usize,
    ratio: f64,
    stratified: bool,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if stratified {
        for c in 0..n_classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.len() == 1 {
                log::warn!("class {c} has a single sample; it goes to the training split");
                train.push(idx[0]);
                continue;
            }
            idx.shuffle(&mut rng);
            let n_train = (idx.len() as f64 * ratio).round() as usize;
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * ratio).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &EncodedDataset, ratio: f64, stratified: bool, seed: u64) -> Result<(EncodedDataset, EncodedDataset)> {
    let (tr, te) = split_indices(&ds.labels, ds.n_classes(), ratio, stratified, seed)?;
    Ok((ds.subset(&tr), ds.subset(&te)))
}

/// Random oversampling: every class is topped up with duplicates of its own
/// rows until it holds at least `ceil(floor_fraction * majority)` rows.
pub fn resample(train: &EncodedDataset, floor_fraction: f64, seed: u64) -> Result<EncodedDataset> {
    if !(floor_fraction > 0.0 && floor_fraction <= 1.0) {
        return Err(Error::Config(format!("resampling floor {floor_fraction} outside (0, 1]")));
    }
    let counts = train.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {} has no samples to resample",
            train.class_names[c]
        )));
    }
    let majority = counts.iter().copied().max().unwrap_or(0);
    let target = resample_target(majority, floor_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for (c, &n) in counts.iter().enumerate() {
        if n >= target {
            continue;
        }
        let members: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        idx.extend((0..target - n).map(|_| members[rng.random_range(0..members.len())]));
    }
    let mut out = train.subset(&idx);
    out.provenance.seed = Some(seed);
    Ok(out)
}

pub fn resample_target(majority: usize, floor_fraction: f64) -> usize {
    // the small slack keeps exact products such as 0.05 * 10000 from rounding up
    (floor_fraction * majority as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Stratified subsample keeping `fraction` of every class.
pub fn stratified_subsample(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let keep = (idx.len() as f64 * fraction).round() as usize;
        if keep == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves class {c} ({} rows) empty",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(counts: &[usize]) -> EncodedDataset {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let x: Vec<f32> = (0..labels.len()).flat_map(|i| [i as f32, labels[i] as f32 * 10.0]).collect();
        EncodedDataset {
            x: Tensor::new(vec![labels.len(), 2], x).unwrap(),
            y: one_hot(&labels, counts.len()).unwrap(),
            labels,
            column_names: vec!["id".into(), "tag".into()],
            class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn plain_split_sizes() {
        let ds = dataset(&[100]);
        let (tr, te) = split(&ds, 0.8, false, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
    }

    #[test]
    fn stratified_split_sizes() {
        let ds = dataset(&[50, 50]);
        let (tr, te) = split(&ds, 0.8, true, 1).unwrap();
        assert_eq!(tr.class_counts(), vec![40, 40]);
        assert_eq!(te.class_counts(), vec![10, 10]);
    }

    #[test]
    fn split_is_seeded() {
        let ds = dataset(&[30, 20, 7]);
        let a = split_indices(&ds.labels, 3, 0.7, true, 5).unwrap();
        let b = split_indices(&ds.labels, 3, 0.7, true, 5).unwrap();
        let c = split_indices(&ds.labels, 3, 0.7, true, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let ds = dataset(&[10, 1]);
        let (tr, te) = split(&ds, 0.5, true, 0).unwrap();
        assert_eq!(tr.class_counts()[1], 1);
        assert_eq!(te.class_counts()[1], 0);
        assert!(split_indices(&ds.labels, 2, 1.0, true, 0).is_err());
    }

    #[test]
    fn resample_floor_arithmetic() {
        let ds = dataset(&[1000, 10]);
        let out = resample(&ds, 0.1, 3).unwrap();
        assert_eq!(out.class_counts(), vec![1000, 100]);
        let ds = dataset(&[500, 500]);
        assert_eq!(resample(&ds, 1.0, 3).unwrap(), {
            let mut same = ds.clone();
            same.provenance.seed = Some(3);
            same
        });
    }

    #[test]
    fn resample_errors() {
        assert!(resample(&dataset(&[10, 0]), 0.1, 0).is_err());
        assert!(resample(&dataset(&[10, 5]), 0.0, 0).is_err());
        assert!(resample(&dataset(&[10, 5]), 1.5, 0).is_err());
    }

    #[test]
    fn subsample_fraction() {
        let ds = dataset(&[100, 40, 10]);
        let idx = stratified_subsample(&ds.labels, 3, 0.5, 1).unwrap();
        assert_eq!(ds.subset(&idx).class_counts(), vec![50, 20, 5]);
        assert!(stratified_subsample(&ds.labels, 3, 0.01, 1).is_err());
        assert_eq!(stratified_subsample(&ds.labels, 3, 1.0, 1).unwrap().len(), 150);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut ds = dataset(&[3, 2]);
        ds.x.data_mut()[1] = 0.1;
        ds.provenance.encoder_digest = "abc".into();
        ds.write(&p, "feedbeef").unwrap();
        let (back, digest) = EncodedDataset::read(&p).unwrap();
        assert_eq!(back, ds);
        assert_eq!(digest, "feedbeef");
    }

    proptest! {
        #[test]
        fn resample_contract(counts in proptest::collection::vec(1usize..60, 1..5), floor in 0.01f64..1.0, seed in 0u64..500) {
            let ds = dataset(&counts);
            let out = resample(&ds, floor, seed).unwrap();
            let after = out.class_counts();
            let target = resample_target(*counts.iter().max().unwrap(), floor);
            for (c, (&b, &a)) in counts.iter().zip(&after).enumerate() {
                prop_assert_eq!(a, b.max(target), "class {}", c);
            }
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] >= counts[j] {
                        prop_assert!(after[i] >= after[j]);
                    }
                }
            }
            // every row (original or duplicate) is a row of the input with the same label
            for r in 0..out.len() {
                let orig = out.x.at(r, 0) as usize;
                prop_assert_eq!(out.x.row(r), ds.x.row(orig));
                prop_assert_eq!(out.labels[r], ds.labels[orig]);
            }
            out.validate().unwrap();
        }

        #[test]
        fn stratified_split_is_a_partition(counts in proptest::collection::vec(2usize..40, 1..5), ratio in 0.1f64..0.9, seed in 0u64..100) {
            let ds = dataset(&counts);
            let (tr, te) = split_indices(&ds.labels, counts.len(), ratio, true, seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            let trc = ds.subset(&tr).class_counts();
            for (c, &n) in counts.iter().enumerate() {
                let ideal = n as f64 * ratio;
                prop_assert!((trc[c] as f64 - ideal).abs() <= 1.0);
            }
        }
    }
}
