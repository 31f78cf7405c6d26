//! Confusion-matrix metrics, evaluation reports, and the repeated-run
//! stability and dataset-fraction scalability protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::digest::feature_digest;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, predict_proba, ModelParams};
use crate::preprocess::{EncodedDataset, Provenance};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!("class index outside {classes}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `(tp, fp, fn, tn)` for `class` against the rest.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let fp = (0..self.classes()).map(|r| self.counts[r][class]).sum::<u64>() - tp;
        let fn_ = self.counts[class].iter().sum::<u64>() - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }
}

/// `num / den`, or 0 when the denominator is zero.
fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub detection_rate: f64,
    pub far: f64,
    pub fnr: f64,
    pub tn_rate: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were set to 0.
    pub undefined: Vec<String>,
}

impl MetricSet {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let mut flags = Vec::new();
        let precision = ratio(tp, tp + fp, "precision", &mut flags);
        let recall = ratio(tp, tp + fn_, "recall", &mut flags);
        let far = ratio(fp, fp + tn, "far", &mut flags);
        let tn_rate = if fp + tn == 0 { 0.0 } else { 1.0 - far };
        let fnr = if tp + fn_ == 0 {
            flags.push("fnr".into());
            0.0
        } else {
            1.0 - recall
        };
        let accuracy = ratio(tp + tn, tp + fp + fn_ + tn, "accuracy", &mut flags);
        let f1 = if precision + recall == 0.0 {
            flags.push("f1".into());
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricSet {
            tp,
            fp,
            fn_,
            tn,
            accuracy,
            precision,
            recall,
            detection_rate: recall,
            far,
            fnr,
            tn_rate,
            f1,
            undefined: flags,
        }
    }
}

pub fn metrics(cm: &ConfusionMatrix, positive: usize) -> Result<MetricSet> {
    if positive >= cm.classes() {
        return Err(Error::Usage(format!("class {positive} outside {}", cm.classes())));
    }
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let (tp, fp, fn_, tn) = cm.one_vs_rest(positive);
    Ok(MetricSet::from_counts(tp, fp, fn_, tn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub far: f64,
    pub fnr: f64,
}

impl Aggregate {
    fn mean(sets: &[MetricSet]) -> Self {
        let n = sets.len() as f64;
        let m = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        Aggregate {
            accuracy: m(|s| s.accuracy),
            precision: m(|s| s.precision),
            recall: m(|s| s.recall),
            f1: m(|s| s.f1),
            far: m(|s| s.far),
            fnr: m(|s| s.fnr),
        }
    }

    fn pooled(sets: &[MetricSet]) -> Self {
        let s = |f: fn(&MetricSet) -> u64| sets.iter().map(f).sum::<u64>();
        let p = MetricSet::from_counts(s(|m| m.tp), s(|m| m.fp), s(|m| m.fn_), s(|m| m.tn));
        Aggregate {
            accuracy: p.accuracy,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            far: p.far,
            fnr: p.fnr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    /// Wall clock of the whole test pass.
    pub detection_seconds: f64,
    /// Mean wall clock per inference batch.
    pub latency_per_batch_seconds: f64,
    pub per_record_latency_seconds: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub micro_avg: Aggregate,
    /// `trace / total`.
    pub micro_accuracy: f64,
    pub timing: Timing,
    pub seed: u64,
    pub config_digest: String,
    pub provenance: Provenance,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(
        class_names: &[String],
        truth: &[usize],
        predictions: Vec<usize>,
        timing: Timing,
        seed: u64,
        config_digest: &str,
        provenance: Provenance,
    ) -> Result<Self> {
        let cm = ConfusionMatrix::from_predictions(truth, &predictions, class_names.len())?;
        let sets = (0..cm.classes()).map(|c| metrics(&cm, c)).collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            per_class: sets
                .iter()
                .zip(class_names)
                .enumerate()
                .map(|(i, (m, n))| ClassMetrics {
                    class: n.clone(),
                    support: cm.counts[i].iter().sum(),
                    metrics: m.clone(),
                })
                .collect(),
            macro_avg: Aggregate::mean(&sets),
            micro_avg: Aggregate::pooled(&sets),
            micro_accuracy: cm.trace() as f64 / cm.total() as f64,
            confusion: cm,
            timing,
            seed,
            config_digest: config_digest.to_string(),
            provenance,
            predictions,
        })
    }

    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Batched inference with the train/serve column guard.
pub fn evaluate_model(
    params: &ModelParams,
    meta: &CheckpointMeta,
    test: &EncodedDataset,
    batch_size: usize,
    seed: u64,
    train_seconds: f64,
) -> Result<EvalReport> {
    let found = feature_digest(&test.column_names);
    if found != meta.feature_digest {
        return Err(Error::FeatureDigestMismatch {
            expected: meta.feature_digest.clone(),
            found,
        });
    }
    if test.class_names != meta.class_names {
        return Err(Error::Data(format!(
            "test classes {:?} differ from checkpoint classes {:?}",
            test.class_names, meta.class_names
        )));
    }
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let batch_size = batch_size.max(1);
    let mut predictions = Vec::with_capacity(test.len());
    let mut batches = 0usize;
    let start = Instant::now();
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let x = test.x.select_rows(chunk);
        let p = predict_proba(params, &meta.model, &x)?;
        predictions.extend(argmax_rows(&p));
        batches += 1;
    }
    let detection = start.elapsed().as_secs_f64();
    let timing = Timing {
        train_seconds,
        detection_seconds: detection,
        latency_per_batch_seconds: detection / batches as f64,
        per_record_latency_seconds: detection / test.len() as f64,
        batch_size,
    };
    EvalReport::from_predictions(
        &test.class_names,
        &test.labels,
        predictions,
        timing,
        seed,
        &meta.run_config_digest,
        test.provenance.clone(),
    )
}

pub const QUARTILE_CONVENTION: &str = "linear interpolation between order statistics at (n-1)p";

/// Box-plot statistics with Tukey fences at 1.5 IQR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    /// Most extreme observations inside the fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub std_dev: f64,
}

pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("box statistics need finite values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lf, uf) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s.iter().copied().filter(|v| *v >= lf && *v <= uf).collect();
    Ok(BoxStats {
        n,
        mean,
        median,
        q1,
        q3,
        iqr,
        lower_fence: lf,
        upper_fence: uf,
        whisker_low: inside.first().copied().unwrap_or(median),
        whisker_high: inside.last().copied().unwrap_or(median),
        outliers: s.iter().copied().filter(|v| *v < lf || *v > uf).collect(),
        std_dev: var.sqrt(),
    })
}

/// Headline metrics tracked across repeated runs.
pub fn summary_metrics(r: &EvalReport) -> Vec<(&'static str, f64)> {
    vec![
        ("macro_accuracy", r.macro_avg.accuracy),
        ("micro_accuracy", r.micro_accuracy),
        ("macro_precision", r.macro_avg.precision),
        ("macro_recall", r.macro_avg.recall),
        ("macro_f1", r.macro_avg.f1),
        ("macro_far", r.macro_avg.far),
        ("train_seconds", r.timing.train_seconds),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub runs: usize,
    pub completed: usize,
    pub failed: Vec<FailedRun>,
    pub quartile_convention: String,
    pub metrics: BTreeMap<String, BoxStats>,
}

impl StabilitySummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Summary over completed reports; recomputable offline from saved reports.
pub fn summarize(reports: &[EvalReport], runs: usize, failed: Vec<FailedRun>) -> Result<StabilitySummary> {
    let mut metrics = BTreeMap::new();
    if !reports.is_empty() {
        for (i, (name, _)) in summary_metrics(&reports[0]).into_iter().enumerate() {
            let vals: Vec<f64> = reports.iter().map(|r| summary_metrics(r)[i].1).collect();
            metrics.insert(name.to_string(), box_stats(&vals)?);
        }
    }
    Ok(StabilitySummary {
        runs,
        completed: reports.len(),
        failed,
        quartile_convention: QUARTILE_CONVENTION.to_string(),
        metrics,
    })
}

/// Runs `runner` for seeds `base_seed..base_seed + runs`. Failed runs are
/// recorded and excluded from the statistics.
pub fn stability_run(
    runs: usize,
    base_seed: u64,
    mut runner: impl FnMut(u64) -> Result<EvalReport>,
) -> Result<(StabilitySummary, Vec<EvalReport>)> {
    if runs < 2 {
        return Err(Error::Config(format!("stability needs at least 2 runs, got {runs}")));
    }
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for seed in base_seed..base_seed + runs as u64 {
        match runner(seed) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::error!("run with seed {seed} failed: {e}");
                failed.push(FailedRun {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((summarize(&reports, runs, failed)?, reports))
}

/// Plot-ready rows: one per completed run.
pub fn runs_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("seed");
    if let Some(r) = reports.first() {
        for (n, _) in summary_metrics(r) {
            write!(s, ",{n}").unwrap();
        }
    }
    s.push('\n');
    for r in reports {
        write!(s, "{}", r.seed).unwrap();
        for (_, v) in summary_metrics(r) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("linear fit needs two or more paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("linear fit needs distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub fraction: f64,
    pub samples: usize,
    pub micro_accuracy: f64,
    pub macro_accuracy: f64,
    pub train_seconds: f64,
    pub per_record_latency_seconds: f64,
    pub peak_rss_bytes: Option<u64>,
    pub peak_rss_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub rows: Vec<ScaleRow>,
    /// Train seconds against training sample count.
    pub fit: LinearFit,
}

impl ScaleReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "fraction,samples,micro_accuracy,macro_accuracy,train_seconds,per_record_latency_seconds,peak_rss_bytes,peak_rss_percent\n",
        );
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.fraction,
                r.samples,
                r.micro_accuracy,
                r.macro_accuracy,
                r.train_seconds,
                r.per_record_latency_seconds,
                opt(r.peak_rss_bytes.map(|v| v.to_string())),
                opt(r.peak_rss_percent.map(|v| v.to_string()))
            )
            .unwrap();
        }
        s
    }
}

pub fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Config("no fractions given".into()));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("fractions {fractions:?} must ascend within (0, 1]")));
    }
    Ok(())
}

/// What one scalability step reports back: the evaluation and how many
/// training samples it used.
pub struct ScaleStep {
    pub report: EvalReport,
    pub samples: usize,
}

/// Runs `runner` once per fraction while sampling resident memory.
pub fn scalability_run(fractions: &[f64], mut runner: impl FnMut(f64) -> Result<ScaleStep>) -> Result<ScaleReport> {
    check_fractions(fractions)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let sampler = RssSampler::start(Duration::from_millis(100));
        let step = runner(f);
        let peak = sampler.stop();
        let step = step?;
        rows.push(ScaleRow {
            fraction: f,
            samples: step.samples,
            micro_accuracy: step.report.micro_accuracy,
            macro_accuracy: step.report.macro_avg.accuracy,
            train_seconds: step.report.timing.train_seconds,
            per_record_latency_seconds: step.report.timing.per_record_latency_seconds,
            peak_rss_bytes: peak,
            peak_rss_percent: peak.zip(mem_total_bytes()).map(|(p, t)| 100.0 * p as f64 / t as f64),
        });
    }
    let fit = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.samples as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.train_seconds).collect();
        linear_fit(&xs, &ys)?
    } else {
        LinearFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: f64::NAN,
        }
    };
    Ok(ScaleReport { rows, fit })
}

fn proc_kib(file: &str, key: &str) -> Option<u64> {
    let text = std::fs::read_to_string(file).ok()?;
    let line = text.lines().find(|l| l.starts_with(key))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

pub fn current_rss_bytes() -> Option<u64> {
    proc_kib("/proc/self/status", "VmRSS:")
}

pub fn mem_total_bytes() -> Option<u64> {
    proc_kib("/proc/meminfo", "MemTotal:")
}

/// Samples the process's resident set on a background thread.
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl RssSampler {
    pub fn start(period: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(current_rss_bytes().unwrap_or(0)));
        let (s, p) = (stop.clone(), peak.clone());
        let handle = std::thread::spawn(move || {
            while !s.load(Ordering::Relaxed) {
                if let Some(v) = current_rss_bytes() {
                    p.fetch_max(v, Ordering::Relaxed);
                }
                std::thread::sleep(period);
            }
        });
        RssSampler {
            stop,
            peak,
            handle: Some(handle),
        }
    }

    /// Peak sampled RSS, or `None` where the platform does not expose it.
    pub fn stop(mut self) -> Option<u64> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        if let Some(v) = current_rss_bytes() {
            self.peak.fetch_max(v, Ordering::Relaxed);
        }
        match self.peak.load(Ordering::Relaxed) {
            0 => None,
            v => Some(v),
        }
    }
}

impl Drop for RssSampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
