use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use idu_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use idu_core::evaluate::{check_fractions, evaluate_model, runs_csv, scalability_run, stability_run};
use idu_core::forest::{fit_forest, select_top_k, FeatureManifest, ForestConfig};
use idu_core::ingest::{load_dataset_with, resolve_maps, write_reject_report, DatasetSchema, LoadOptions, Role};
use idu_core::model::{argmax_rows, predict_proba, ModelParams};
use idu_core::pipeline::{build_table, run_fraction, run_once, ModelSettings, PipelineConfig};
use idu_core::preprocess::{fit_encoder, resample, split_indices, transform, EncodedDataset, EncoderSpec, RawTable};
use idu_core::train::{train, TrainConfig};
use idu_core::ueba::UebaConfig;
use idu_core::{Error, Result, Tensor};
use serde_json::json;

use crate::args::*;
use crate::artifacts::{strip_digest_line, verify_dir, with_digest_line, write};

/// What a command left behind: file names relative to its output directory.
pub type Outputs = Vec<String>;

fn settings(m: &ModelArgs) -> ModelSettings {
    ModelSettings {
        widths: m.widths.clone(),
        d_k: m.dk,
        group: m.group,
        dropout: m.dropout,
    }
}

fn train_config(f: &FitArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch,
        learning_rate: f.lr,
        beta1: f.beta1,
        beta2: f.beta2,
        clip_norm: (f.clip_norm > 0.0).then_some(f.clip_norm),
        seed,
        deterministic: f.deterministic,
        ..TrainConfig::default()
    }
}

fn forest_config(f: &ForestArgs, seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: f.trees,
        max_depth: f.max_depth,
        min_leaf: f.min_leaf,
        mtry: f.mtry,
        seed,
    }
}

fn ueba_config(u: &UebaArgs, seed: u64) -> UebaConfig {
    let mut c = UebaConfig {
        n_users: u.users,
        sessions_per_user: u.sessions,
        anomaly_session_fraction: u.anomaly_fraction,
        seed,
        ..UebaConfig::default()
    };
    c.mix.malicious = u.malicious_fraction;
    c.mix.normal = 1.0 - u.malicious_fraction;
    c
}

fn pipeline_config(p: &PipelineArgs) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        task: p.data.task,
        split_ratio: p.prep.split,
        stratified: p.prep.stratified,
        floor_fraction: p.prep.floor,
        forest: forest_config(&p.forest, p.seed),
        top_k: p.forest.k,
        model: settings(&p.model),
        train: train_config(&p.fit, p.seed),
        ueba: ueba_config(&p.ueba, p.seed),
        eval_batch: p.eval_batch,
        seed: p.seed,
        ..PipelineConfig::default()
    };
    cfg.join.insider_fraction = p.ueba.insider_fraction;
    cfg
}

/// Loads the raw file and labels it for the configured task. Rejected rows
/// are reported to `out/rejects.txt`.
fn load_table(data: &DataArgs, cfg: &PipelineConfig, out: &Path, outputs: &mut Outputs, digest: &str) -> Result<RawTable> {
    let opts = LoadOptions {
        max_reject_fraction: data.max_reject,
    };
    let ds = load_dataset_with(&data.input, data.schema, &opts)?;
    let map_text = match &data.map_file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let (labels, roles) = resolve_maps(data.schema, map_text.as_deref())?;
    if !ds.rejects.is_empty() {
        log::warn!("{} malformed rows skipped", ds.rejects.len());
        let mut buf = Vec::new();
        write_reject_report(&ds.rejects, &mut buf)?;
        write(&out.join("rejects.txt"), &with_digest_line(digest, &String::from_utf8_lossy(&buf)))?;
        outputs.push("rejects.txt".into());
    }
    build_table(&ds, &labels, &roles, cfg, &data.input.display().to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn build_dataset(c: &BuildDatasetCmd, digest: &str) -> Result<Outputs> {
    ensure_dir(&c.out)?;
    let mut cfg = PipelineConfig {
        task: c.data.task,
        ueba: ueba_config(&c.ueba, c.seed),
        seed: c.seed,
        ..PipelineConfig::default()
    };
    cfg.join.insider_fraction = c.ueba.insider_fraction;
    let mut outputs = Outputs::new();
    let table = load_table(&c.data, &cfg, &c.out, &mut outputs, digest)?.retain_present_classes();
    let (tr, te) = split_indices(&table.labels, table.n_classes(), c.prep.split, c.prep.stratified, c.seed)?;
    if tr.is_empty() || te.is_empty() {
        return Err(Error::Data(format!("split left {} train and {} test rows", tr.len(), te.len())));
    }
    let (train_t, test_t) = (table.subset(&tr), table.subset(&te));
    let encoder = fit_encoder(&train_t)?;
    let train_enc = transform(&train_t, &encoder)?;
    let test_enc = transform(&test_t, &encoder)?;
    let train_rs = resample(&train_enc, c.prep.floor, c.seed)?;

    train_rs.write(c.out.join("train.csv"), digest)?;
    test_enc.write(c.out.join("test.csv"), digest)?;
    write(&c.out.join("encoder.txt"), &with_digest_line(digest, &encoder.to_text()))?;
    let manifest = json!({
        "run_config_digest": digest,
        "schema": c.data.schema,
        "task": c.data.task,
        "sources": table.sources,
        "class_names": table.class_names,
        "counts": {
            "train_before_resampling": train_enc.class_counts(),
            "train": train_rs.class_counts(),
            "test": test_enc.class_counts(),
        },
        "encoder_digest": encoder.digest(),
        "columns": train_rs.column_names,
    });
    write(&c.out.join("dataset.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "{} classes, {} train rows ({} after resampling), {} test rows, {} encoded columns",
        table.n_classes(),
        train_enc.len(),
        train_rs.len(),
        test_enc.len(),
        train_rs.width()
    );
    outputs.extend(["train.csv", "test.csv", "encoder.txt", "dataset.json"].map(String::from));
    Ok(outputs)
}

pub fn select(c: &SelectCmd, digest: &str) -> Result<Outputs> {
    ensure_dir(&c.out)?;
    let (ds, _) = EncodedDataset::read(&c.train)?;
    let forest = fit_forest(&ds.x, &ds.labels, ds.n_classes(), &forest_config(&c.forest, c.seed))?;
    let k = c.forest.k.min(ds.width());
    if k < c.forest.k {
        log::warn!("k={} exceeds the {} encoded columns; keeping all", c.forest.k, ds.width());
    }
    let idx = select_top_k(&forest.importances, k)?;
    let manifest = FeatureManifest::from_selection(&ds, &forest, &idx, digest);
    manifest.write(c.out.join("features.txt"))?;
    for e in manifest.entries.iter().take(10) {
        println!("{:>3} {:<40} {:.4}", e.index, e.name, e.importance);
    }
    println!("kept {k} of {} columns", ds.width());
    Ok(vec!["features.txt".into()])
}

fn task_of(class_names: &[String]) -> &'static str {
    if class_names.iter().all(|c| c.parse::<Role>().is_ok()) {
        "role"
    } else {
        "class"
    }
}

pub fn train_cmd(c: &TrainCmd, digest: &str) -> Result<Outputs> {
    let data = c.train.as_ref().map(EncodedDataset::read).transpose()?.map(|(d, _)| d);
    let manifest = c.features.as_ref().map(FeatureManifest::read).transpose()?;
    if c.dry_run {
        let d0 = manifest
            .as_ref()
            .map(|m| m.entries.len())
            .or(c.input_dim)
            .ok_or_else(|| Error::Config("dry run needs --features or --input-dim".into()))?;
        let classes = data
            .as_ref()
            .map(|d| d.n_classes())
            .or(c.classes)
            .ok_or_else(|| Error::Config("dry run needs --train or --classes".into()))?;
        let cfg = settings(&c.model).config(d0, classes, c.seed);
        let params = ModelParams::<f32>::init(&cfg)?;
        let counted: usize = params.learnable().iter().map(|t| t.len()).sum();
        debug_assert_eq!(counted, cfg.learnable_count());
        println!("parameters: {counted}");
        println!("tensors: {}", params.named().len());
        return Ok(Vec::new());
    }
    let (Some(data), Some(manifest), Some(out)) = (data, manifest, c.out.as_ref()) else {
        return Err(Error::Config("--train, --features and --out are required".into()));
    };
    ensure_dir(out)?;
    let sel = manifest.apply(&data)?;
    let cfg = settings(&c.model).config(sel.width(), sel.n_classes(), c.seed);
    let tcfg = train_config(&c.fit, c.seed);
    let mut params = ModelParams::init(&cfg)?;
    let meta = CheckpointMeta {
        model: cfg.clone(),
        class_names: sel.class_names.clone(),
        feature_digest: manifest.digest(),
        task: task_of(&sel.class_names).to_string(),
        run_config_digest: digest.to_string(),
    };
    let start = Instant::now();
    let (history, failure) = match train(&mut params, &cfg, &sel, &tcfg) {
        Ok(h) => (h, None),
        Err(Error::TrainingAborted {
            epoch,
            last_finite,
            history,
        }) => {
            params = *last_finite;
            (history, Some(epoch))
        }
        Err(e) => return Err(e),
    };
    let secs = start.elapsed().as_secs_f64();
    save_checkpoint(&params, &meta, out.join("model.ckpt"))?;
    let mut csv = String::from("epoch,loss,accuracy,batches\n");
    for h in &history {
        csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.loss, h.accuracy, h.batches));
    }
    write(&out.join("history.csv"), &with_digest_line(digest, &csv))?;
    if let Some(epoch) = failure {
        return Err(Error::Numeric(format!(
            "training aborted at epoch {epoch}; model.ckpt holds the last finite parameters"
        )));
    }
    if let Some(last) = history.last() {
        println!(
            "{} epochs in {secs:.1}s, final loss {:.4}, train accuracy {:.4}",
            history.len(),
            last.loss,
            last.accuracy
        );
    }
    Ok(vec!["model.ckpt".into(), "history.csv".into()])
}

pub fn eval(c: &EvalCmd, digest: &str) -> Result<Outputs> {
    ensure_dir(&c.out)?;
    let (params, meta) = load_checkpoint(&c.checkpoint)?;
    let (test, _) = EncodedDataset::read(&c.test)?;
    let manifest = FeatureManifest::read(&c.features)?;
    let sel = manifest.apply(&test)?;
    let mut report = evaluate_model(&params, &meta, &sel, c.eval_batch, c.seed, 0.0)?;
    report.config_digest = digest.to_string();
    write(&c.out.join("report.json"), &report.to_json()?)?;
    let mut cm = String::from("truth\\predicted");
    for n in &report.class_names {
        cm.push(',');
        cm.push_str(n);
    }
    cm.push('\n');
    for (n, row) in report.class_names.iter().zip(&report.confusion.counts) {
        cm.push_str(n);
        for v in row {
            cm.push_str(&format!(",{v}"));
        }
        cm.push('\n');
    }
    write(&c.out.join("confusion.csv"), &with_digest_line(digest, &cm))?;
    print_report_summary(&report);
    Ok(vec!["report.json".into(), "confusion.csv".into()])
}

fn print_report_summary(r: &idu_core::evaluate::EvalReport) {
    println!("{:<18} {:>9} {:>9} {:>9} {:>9} {:>9}", "class", "accuracy", "precision", "recall", "far", "f1");
    for c in &r.per_class {
        let m = &c.metrics;
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            c.class, m.accuracy, m.precision, m.recall, m.far, m.f1
        );
    }
    let a = &r.macro_avg;
    println!(
        "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        "macro", a.accuracy, a.precision, a.recall, a.far, a.f1
    );
    println!("micro accuracy {:.4}", r.micro_accuracy);
}

pub fn stability(c: &StabilityCmd, digest: &str) -> Result<Outputs> {
    let p = &c.pipeline;
    ensure_dir(&p.out)?;
    let cfg = pipeline_config(p);
    let mut outputs = Outputs::new();
    let table = load_table(&p.data, &cfg, &p.out, &mut outputs, digest)?;
    let (summary, reports) = stability_run(c.runs, p.seed, |seed| {
        log::info!("stability run with seed {seed}");
        run_once(&table, &cfg.with_seed(seed)).map(|o| o.report)
    })?;
    let v = json!({
        "run_config_digest": digest,
        "summary": summary,
        "reports": reports,
    });
    write(&p.out.join("stability.json"), &serde_json::to_string_pretty(&v)?)?;
    write(&p.out.join("runs.csv"), &with_digest_line(digest, &runs_csv(&reports)))?;
    for (name, b) in &summary.metrics {
        println!(
            "{name:<16} median {:.4} q1 {:.4} q3 {:.4} std {:.4} outliers {}",
            b.median,
            b.q1,
            b.q3,
            b.std_dev,
            b.outliers.len()
        );
    }
    if !summary.all_succeeded() {
        return Err(Error::Numeric(format!("{} of {} runs failed", summary.failed.len(), summary.runs)));
    }
    outputs.extend(["stability.json", "runs.csv"].map(String::from));
    Ok(outputs)
}

pub fn scale(c: &ScaleCmd, digest: &str) -> Result<Outputs> {
    let p = &c.pipeline;
    check_fractions(&c.fractions)?;
    ensure_dir(&p.out)?;
    let cfg = pipeline_config(p);
    let mut outputs = Outputs::new();
    let table = load_table(&p.data, &cfg, &p.out, &mut outputs, digest)?;
    let rep = scalability_run(&c.fractions, |f| {
        log::info!("fraction {f}");
        run_fraction(&table, &cfg, f)
    })?;
    write(&p.out.join("scale.csv"), &with_digest_line(digest, &rep.to_csv()))?;
    let v = json!({ "run_config_digest": digest, "report": rep });
    write(&p.out.join("scale.json"), &serde_json::to_string_pretty(&v)?)?;
    print!("{}", rep.to_csv());
    println!(
        "train seconds ~ {:.3e} * samples + {:.3} (R^2 {:.4})",
        rep.fit.slope, rep.fit.intercept, rep.fit.r_squared
    );
    outputs.extend(["scale.csv", "scale.json"].map(String::from));
    Ok(outputs)
}

fn read_encoder(path: &Path) -> Result<EncoderSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EncoderSpec::from_text(strip_digest_line(&text))
}

fn parse_record(line: &str) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(line.as_bytes());
    let rec = rdr
        .records()
        .next()
        .ok_or_else(|| Error::Data("empty record".into()))?
        .map_err(|e| Error::Data(format!("record: {e}")))?;
    Ok(rec.iter().map(str::to_string).collect())
}

pub fn predict(c: &PredictCmd, digest: &str) -> Result<Outputs> {
    let (params, meta) = load_checkpoint(&c.checkpoint)?;
    let encoder = read_encoder(&c.encoder)?;
    let manifest = FeatureManifest::read(&c.features)?;
    if manifest.digest() != meta.feature_digest {
        return Err(Error::FeatureDigestMismatch {
            expected: meta.feature_digest.clone(),
            found: manifest.digest(),
        });
    }
    let found = idu_core::digest::feature_digest(&encoder.output_names());
    if found != manifest.source_digest {
        return Err(Error::FeatureDigestMismatch {
            expected: manifest.source_digest.clone(),
            found,
        });
    }
    let line = match (&c.record, &c.record_file) {
        (Some(r), _) => r.clone(),
        (None, Some(p)) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Data(format!("{}: no record", p.display())))?
            .to_string(),
        (None, None) => return Err(Error::Config("--record or --record-file is required".into())),
    };
    let mut cells = parse_record(&line)?;
    if cells.len() != encoder.columns.len() {
        match DatasetSchema::fixed(c.schema) {
            Some(s) if cells.len() == s.width() => {
                cells.remove(s.label_index());
            }
            _ => {
                return Err(Error::Data(format!(
                    "record has {} cells; expected {} feature cells or a full {} row",
                    cells.len(),
                    encoder.columns.len(),
                    c.schema
                )))
            }
        }
    }
    let mut row = Vec::with_capacity(encoder.width());
    encoder.encode_row(&cells, &mut row)?;
    let x: Vec<f32> = manifest.indices().iter().map(|&i| row[i]).collect();
    let x = Tensor::new(vec![1, x.len()], x)?;
    let probs = predict_proba(&params, &meta.model, &x)?;
    let best = argmax_rows(&probs)[0];
    let probabilities: BTreeMap<&str, f32> = meta
        .class_names
        .iter()
        .map(String::as_str)
        .zip(probs.data().iter().copied())
        .collect();
    let key = if meta.task == "role" { "role" } else { "class" };
    let v = json!({
        key: meta.class_names[best],
        "probabilities": probabilities,
        "run_config_digest": digest,
    });
    let text = serde_json::to_string_pretty(&v)?;
    println!("{text}");
    match &c.out {
        Some(out) => {
            ensure_dir(out)?;
            write(&out.join("prediction.json"), &text)?;
            Ok(vec!["prediction.json".into()])
        }
        None => Ok(Vec::new()),
    }
}

/// Returns the number of problems found.
pub fn verify(c: &VerifyCmd) -> Result<usize> {
    let rep = verify_dir(&c.dir)?;
    for f in &rep.checked {
        println!("ok       {f}");
    }
    for p in &rep.problems {
        println!("MISMATCH {p}");
    }
    Ok(rep.problems.len())
}
