//! End-to-end run: split, encode, resample, select, train, evaluate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, EvalReport, ScaleStep};
use crate::forest::{fit_forest, select_top_k, FeatureManifest, ForestConfig, DEFAULT_TOP_K};
use crate::ingest::{LabelMap, LoadedDataset, RoleMap};
use crate::model::{ModelConfig, ModelParams, DEFAULT_WIDTHS};
use crate::preprocess::{
    fit_encoder, resample, split_indices, stratified_subsample, transform, EncoderSpec, RawTable,
    DEFAULT_FLOOR_FRACTION, DEFAULT_SPLIT_RATIO,
};
use crate::train::{train, EpochStats, TrainConfig};
use crate::ueba::{generate_users, join_synergistic, labeled_flows, role_table, sessionize, JoinPolicy, UebaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Class,
    Role,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Class => "class",
            Task::Role => "role",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Task::Class),
            "role" => Ok(Task::Role),
            _ => Err(Error::Config(format!("unknown task {s:?} (class|role)"))),
        }
    }
}

/// Architecture knobs; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub widths: Vec<usize>,
    pub d_k: usize,
    pub group: usize,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            widths: DEFAULT_WIDTHS.to_vec(),
            d_k: 16,
            group: 1,
            dropout: 0.2,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, input_dim: usize, classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim,
            widths: self.widths.clone(),
            d_k: self.d_k,
            group: self.group,
            dropout: self.dropout,
            classes,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: Task,
    pub split_ratio: f64,
    pub stratified: bool,
    pub floor_fraction: f64,
    pub forest: ForestConfig,
    pub top_k: usize,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub ueba: UebaConfig,
    pub join: JoinPolicy,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: Task::Class,
            split_ratio: DEFAULT_SPLIT_RATIO,
            stratified: true,
            floor_fraction: DEFAULT_FLOOR_FRACTION,
            forest: ForestConfig::default(),
            top_k: DEFAULT_TOP_K,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            ueba: UebaConfig::default(),
            join: JoinPolicy::default(),
            eval_batch: 1024,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Copy with every seeded stage re-seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.forest.seed = seed;
        c.train.seed = seed;
        c.ueba.seed = seed;
        c
    }
}

/// Labeled table for the configured task. The role task fuses the flows with
/// generated behaviour sessions.
pub fn build_table(
    ds: &LoadedDataset,
    labels: &LabelMap,
    roles: &RoleMap,
    cfg: &PipelineConfig,
    source: &str,
) -> Result<RawTable> {
    match cfg.task {
        Task::Class => RawTable::from_flows(ds, labels, source),
        Task::Role => {
            let flows = labeled_flows(ds, labels)?;
            let sessions = sessionize(&generate_users(&cfg.ueba)?);
            let joined = join_synergistic(&flows, &sessions, roles, &cfg.join, cfg.seed)?;
            role_table(
                &ds.schema.feature_columns(),
                &joined,
                vec![source.to_string(), format!("ueba-synth(seed={})", cfg.ueba.seed)],
            )
        }
    }
}

pub struct RunOutcome {
    pub report: EvalReport,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
    pub encoder: EncoderSpec,
    pub manifest: FeatureManifest,
    pub history: Vec<EpochStats>,
    pub train_samples: usize,
}

/// One full train + evaluate cycle on `table` with everything seeded by `cfg.seed`.
pub fn run_once(table: &RawTable, cfg: &PipelineConfig) -> Result<RunOutcome> {
    let seed = cfg.seed;
    let table = table.retain_present_classes();
    let (tr, te) = split_indices(&table.labels, table.n_classes(), cfg.split_ratio, cfg.stratified, seed)?;
    if te.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let (train_t, test_t) = (table.subset(&tr), table.subset(&te));
    let encoder = fit_encoder(&train_t)?;
    let train_enc = transform(&train_t, &encoder)?;
    let test_enc = transform(&test_t, &encoder)?;
    let train_rs = resample(&train_enc, cfg.floor_fraction, seed)?;

    let forest = fit_forest(&train_rs.x, &train_rs.labels, train_rs.n_classes(), &cfg.forest)?;
    let k = cfg.top_k.min(train_rs.width());
    let idx = select_top_k(&forest.importances, k)?;
    let run_digest = cfg.digest();
    let manifest = FeatureManifest::from_selection(&train_rs, &forest, &idx, &run_digest);
    let train_sel = manifest.apply(&train_rs)?;
    let test_sel = manifest.apply(&test_enc)?;

    let model_cfg = cfg.model.config(k, train_sel.n_classes(), seed);
    let mut params = ModelParams::init(&model_cfg)?;
    let start = Instant::now();
    let history = train(&mut params, &model_cfg, &train_sel, &cfg.train)?;
    let train_seconds = start.elapsed().as_secs_f64();

    let meta = CheckpointMeta {
        model: model_cfg,
        class_names: train_sel.class_names.clone(),
        feature_digest: manifest.digest(),
        task: cfg.task.as_str().to_string(),
        run_config_digest: run_digest,
    };
    let report = evaluate_model(&params, &meta, &test_sel, cfg.eval_batch, seed, train_seconds)?;
    Ok(RunOutcome {
        report,
        params,
        meta,
        encoder,
        manifest,
        history,
        train_samples: train_sel.len(),
    })
}

/// Scalability step: stratified subsample of `table`, then a normal run.
pub fn run_fraction(table: &RawTable, cfg: &PipelineConfig, fraction: f64) -> Result<ScaleStep> {
    let idx = stratified_subsample(&table.labels, table.n_classes(), fraction, cfg.seed)?;
    let out = run_once(&table.subset(&idx), cfg)?;
    Ok(ScaleStep {
        report: out.report,
        samples: out.train_samples,
    })
}
