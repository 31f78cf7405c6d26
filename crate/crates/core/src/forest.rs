//! Random forest used to rank features by mean decrease in Gini impurity.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{feature_digest, json_digest};
use crate::error::{Error, Result};
use crate::preprocess::EncodedDataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per node; `None` means `ceil(sqrt(d))`.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 5,
            mtry: None,
            seed: 0,
        }
    }
}

pub const DEFAULT_TOP_K: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        hist: Vec<u32>,
    },
}

/// Nodes stored in an arena; index 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_for(&self, row: &[f32]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if (row[*feature] as f64) <= *threshold { *left } else { *right },
                TreeNode::Leaf { hist } => return hist,
            }
        }
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        argmax_u32(self.leaf_for(row))
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

fn argmax_u32(h: &[u32]) -> usize {
    let mut best = 0;
    for (i, &v) in h.iter().enumerate() {
        if v > h[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub n_classes: usize,
    pub tree_seeds: Vec<u64>,
    /// Sums to 1, or all zero when no tree ever split.
    pub importances: Vec<f64>,
}

impl ForestModel {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(row)] += 1;
        }
        argmax_u32(&votes)
    }
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a Tensor<f32>,
    y: &'a [usize],
    classes: usize,
    cfg: &'a ForestConfig,
    mtry: usize,
    n_boot: f64,
    importance: Vec<f64>,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
    n_left: usize,
}

impl Builder<'_> {
    fn histogram(&self, idx: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.classes];
        for &i in idx {
            h[self.y[i]] += 1;
        }
        h
    }

    fn best_split(&self, idx: &[usize], hist: &[u32], rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let n = idx.len();
        let parent = gini(hist, n as u32);
        let d = self.x.cols();
        let features = index::sample(rng, d, self.mtry.min(d));
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f32, usize)> = Vec::with_capacity(n);
        for f in features.iter() {
            sorted.clear();
            sorted.extend(idx.iter().map(|&i| (self.x.at(i, f), self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            if sorted[0].0 == sorted[n - 1].0 {
                continue;
            }
            let mut left = vec![0u32; self.classes];
            let mut right = hist.to_vec();
            for k in 0..n - 1 {
                let (v, c) = sorted[k];
                left[c] += 1;
                right[c] -= 1;
                let nl = k + 1;
                let next = sorted[k + 1].0;
                if v == next || nl < self.cfg.min_leaf || n - nl < self.cfg.min_leaf {
                    continue;
                }
                let wl = nl as f64 / n as f64;
                let dec = parent - wl * gini(&left, nl as u32) - (1.0 - wl) * gini(&right, (n - nl) as u32);
                if dec > 1e-12 && best.as_ref().is_none_or(|b| dec > b.decrease) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: (v as f64 + next as f64) / 2.0,
                        decrease: dec,
                        n_left: nl,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let hist = self.histogram(&idx);
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { hist: hist.clone() });
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return slot;
        }
        let Some(split) = self.best_split(&idx, &hist, rng) else {
            return slot;
        };
        self.importance[split.feature] += idx.len() as f64 / self.n_boot * split.decrease;
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| (self.x.at(i, split.feature) as f64) <= split.threshold);
        debug_assert_eq!(l.len(), split.n_left);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[slot] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        slot
    }
}

fn fit_tree(x: &Tensor<f32>, y: &[usize], classes: usize, cfg: &ForestConfig, mtry: usize, seed: u64) -> (Tree, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = y.len();
    let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut b = Builder {
        x,
        y,
        classes,
        cfg,
        mtry,
        n_boot: n as f64,
        importance: vec![0.0; x.cols()],
        nodes: Vec::new(),
    };
    b.grow(boot, 0, &mut rng);
    (Tree { nodes: b.nodes }, b.importance)
}

/// Per-tree seeds derived from the master seed.
pub fn tree_seeds(seed: u64, n_trees: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_trees).map(|_| rng.random()).collect()
}

pub fn fit_forest(x: &Tensor<f32>, y: &[usize], classes: usize, cfg: &ForestConfig) -> Result<ForestModel> {
    let n = y.len();
    if n < 2 || x.rank() != 2 || x.rows() != n {
        return Err(Error::Data(format!("forest needs >= 2 rows with matching labels, got {n}")));
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::Config("forest needs n_trees >= 1 and min_leaf >= 1".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside {classes} classes")));
    }
    let d = x.cols();
    let mtry = cfg.mtry.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).max(1);
    let seeds = tree_seeds(cfg.seed, cfg.n_trees);
    let mut total = vec![0.0; d];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for &s in &seeds {
        let (t, imp) = fit_tree(x, y, classes, cfg, mtry, s);
        for (a, b) in total.iter_mut().zip(imp) {
            *a += b;
        }
        trees.push(t);
    }
    let sum: f64 = total.iter().sum();
    let importances = if sum > 0.0 {
        total.iter().map(|v| v / sum).collect()
    } else {
        log::warn!("no tree split on any feature; importances are all zero");
        vec![0.0; d]
    };
    Ok(ForestModel {
        trees,
        n_features: d,
        n_classes: classes,
        tree_seeds: seeds,
        importances,
    })
}

/// Indices of the `k` largest importances, ties to the lower index.
pub fn select_top_k(importances: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > importances.len() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", importances.len())));
    }
    let mut idx: Vec<usize> = (0..importances.len()).collect();
    idx.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Column subset of `ds` in the order of `indices`.
pub fn project(ds: &EncodedDataset, indices: &[usize]) -> Result<EncodedDataset> {
    let d = ds.width();
    if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
        return Err(Error::Shape(format!("feature index {bad} outside width {d}")));
    }
    let n = ds.len();
    let mut data = Vec::with_capacity(n * indices.len());
    for r in 0..n {
        let row = ds.x.row(r);
        data.extend(indices.iter().map(|&i| row[i]));
    }
    Ok(EncodedDataset {
        x: Tensor::new(vec![n, indices.len()], data)?,
        y: ds.y.clone(),
        labels: ds.labels.clone(),
        column_names: indices.iter().map(|&i| ds.column_names[i].clone()).collect(),
        class_names: ds.class_names.clone(),
        provenance: ds.provenance.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEntry {
    pub index: usize,
    pub name: String,
    pub importance: f64,
}

/// Selected features with their importances, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureManifest {
    pub entries: Vec<FeatureEntry>,
    /// Digest of the full encoded column list the indices refer to.
    pub source_digest: String,
    pub run_config_digest: String,
}

const MANIFEST_MAGIC: &str = "# idu-features v1";

impl FeatureManifest {
    pub fn from_selection(ds: &EncodedDataset, forest: &ForestModel, indices: &[usize], run_config_digest: &str) -> Self {
        FeatureManifest {
            entries: indices
                .iter()
                .map(|&i| FeatureEntry {
                    index: i,
                    name: ds.column_names[i].clone(),
                    importance: forest.importances[i],
                })
                .collect(),
            source_digest: feature_digest(&ds.column_names),
            run_config_digest: run_config_digest.to_string(),
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Digest of the selected column names; what checkpoints record.
    pub fn digest(&self) -> String {
        feature_digest(&self.names())
    }

    /// Projects `ds` after checking that it has the columns this manifest was built on.
    pub fn apply(&self, ds: &EncodedDataset) -> Result<EncodedDataset> {
        let found = feature_digest(&ds.column_names);
        if found != self.source_digest {
            return Err(Error::FeatureDigestMismatch {
                expected: self.source_digest.clone(),
                found,
            });
        }
        project(ds, &self.indices())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_MAGIC}").unwrap();
        writeln!(s, "# run_config_digest={}", self.run_config_digest).unwrap();
        writeln!(s, "# source_digest={}", self.source_digest).unwrap();
        writeln!(s, "index\tname\timportance").unwrap();
        for e in &self.entries {
            writeln!(s, "{}\t{}\t{:e}", e.index, e.name, e.importance).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("feature manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing header"));
        }
        let mut header = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(&format!("# {key}=")).map(str::to_string))
                .ok_or_else(|| bad(&format!("missing {key}")))
        };
        let run_config_digest = header("run_config_digest")?;
        let source_digest = header("source_digest")?;
        if lines.next() != Some("index\tname\timportance") {
            return Err(bad("missing column header"));
        }
        let mut entries = Vec::new();
        for l in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(&format!("row {l:?}")));
            }
            entries.push(FeatureEntry {
                index: parts[0].parse().map_err(|_| bad(&format!("index {:?}", parts[0])))?,
                name: parts[1].to_string(),
                importance: parts[2].parse().map_err(|_| bad(&format!("importance {:?}", parts[2])))?,
            });
        }
        Ok(FeatureManifest {
            entries,
            source_digest,
            run_config_digest,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Data where the label is a threshold of feature `informative`; the rest is noise.
pub fn single_feature_fixture(n: usize, d: usize, informative: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0f32; n * d];
    let mut y = vec![0; n];
    for r in 0..n {
        for c in 0..d {
            x[r * d + c] = rng.random_range(-1.0..1.0);
        }
        y[r] = usize::from(x[r * d + informative] > 0.0);
    }
    (Tensor::new(vec![n, d], x).unwrap(), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{one_hot, Provenance};

    fn small_cfg(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 20,
            max_depth: 6,
            seed,
            ..ForestConfig::default()
        }
    }

    /// Best single-threshold Gini decrease of one feature, searched exhaustively.
    fn exhaustive_best(x: &Tensor<f32>, y: &[usize], f: usize) -> f64 {
        let n = y.len();
        let mut vals: Vec<f32> = (0..n).map(|r| x.at(r, f)).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        let total = [y.iter().filter(|&&c| c == 0).count() as u32, y.iter().filter(|&&c| c == 1).count() as u32];
        let parent = gini(&total, n as u32);
        let mut best = 0.0f64;
        for w in vals.windows(2) {
            let t = (w[0] as f64 + w[1] as f64) / 2.0;
            let mut l = [0u32; 2];
            for r in 0..n {
                if (x.at(r, f) as f64) <= t {
                    l[y[r]] += 1;
                }
            }
            let nl = l[0] + l[1];
            let rr = [total[0] - l[0], total[1] - l[1]];
            let wl = nl as f64 / n as f64;
            best = best.max(parent - wl * gini(&l, nl) - (1.0 - wl) * gini(&rr, n as u32 - nl));
        }
        best
    }

    #[test]
    fn informative_feature_dominates() {
        let (x, y) = single_feature_fixture(400, 8, 3, 11);
        let oracle: Vec<f64> = (0..8).map(|f| exhaustive_best(&x, &y, f)).collect();
        assert_eq!(select_top_k(&oracle, 1).unwrap(), vec![3]);
        let m = fit_forest(&x, &y, 2, &small_cfg(1)).unwrap();
        assert!(m.importances[3] >= 0.9, "{:?}", m.importances);
        assert!((m.importances.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(select_top_k(&m.importances, 1).unwrap(), vec![3]);
    }

    #[test]
    fn constant_data_gives_zero_importance() {
        let x = Tensor::full(&[20, 3], 1.0f32);
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let m = fit_forest(&x, &y, 2, &small_cfg(0)).unwrap();
        assert!(m.importances.iter().all(|&v| v == 0.0));
        let y = vec![1; 20];
        let (x, _) = single_feature_fixture(20, 3, 0, 1);
        let m = fit_forest(&x, &y, 2, &small_cfg(0)).unwrap();
        assert!(m.importances.iter().all(|&v| v == 0.0));
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn seeded_digest() {
        let (x, y) = single_feature_fixture(100, 5, 1, 2);
        let a = fit_forest(&x, &y, 2, &small_cfg(4)).unwrap();
        let b = fit_forest(&x, &y, 2, &small_cfg(4)).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = fit_forest(&x, &y, 2, &small_cfg(5)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unbounded_tree_fits_its_bootstrap() {
        let (x, y) = single_feature_fixture(150, 4, 2, 9);
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: usize::MAX,
            min_leaf: 1,
            mtry: Some(4),
            seed: 3,
        };
        let m = fit_forest(&x, &y, 2, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(m.tree_seeds[0]);
        let boot: Vec<usize> = (0..150).map(|_| rng.random_range(0..150)).collect();
        for &i in &boot {
            assert_eq!(m.trees[0].predict(x.row(i)), y[i]);
        }
    }

    #[test]
    fn top_k_rules() {
        assert_eq!(select_top_k(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_top_k(&[0.4, 0.4, 0.2], 1).unwrap(), vec![0]);
        assert_eq!(select_top_k(&[0.2, 0.4, 0.4], 2).unwrap(), vec![1, 2]);
        assert!(matches!(select_top_k(&[0.5, 0.5], 3), Err(Error::Config(_))));
        assert!(select_top_k(&[0.5], 0).is_err());
    }

    fn ds() -> EncodedDataset {
        let x = Tensor::from_rows(&[vec![1.0f32, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        EncodedDataset {
            x,
            y: one_hot(&[0, 1], 2).unwrap(),
            labels: vec![0, 1],
            column_names: vec!["a".into(), "b".into(), "c".into()],
            class_names: vec!["n".into(), "p".into()],
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn projection() {
        let d = ds();
        let p = project(&d, &[2, 0]).unwrap();
        assert_eq!(p.width(), 2);
        assert_eq!(p.column_names, vec!["c", "a"]);
        assert_eq!(p.x.row(1), &[6.0, 4.0]);
        assert_eq!(project(&d, &[0, 1, 2]).unwrap().x, d.x);
        assert!(matches!(project(&d, &[3]), Err(Error::Shape(_))));
        assert_eq!(p.labels, d.labels);
    }

    #[test]
    fn manifest_round_trip_and_guard() {
        let d = ds();
        let forest = ForestModel {
            trees: vec![],
            n_features: 3,
            n_classes: 2,
            tree_seeds: vec![],
            importances: vec![0.2, 0.5, 0.3],
        };
        let idx = select_top_k(&forest.importances, 2).unwrap();
        let m = FeatureManifest::from_selection(&d, &forest, &idx, "cafe");
        let back = FeatureManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.apply(&d).unwrap().column_names, vec!["b", "c"]);
        let mut other = d.clone();
        other.column_names[0] = "z".into();
        assert!(matches!(back.apply(&other), Err(Error::FeatureDigestMismatch { .. })));
    }
}
