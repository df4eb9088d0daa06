//! Linear probing of frozen encoder embeddings: label rules per task,
//! affine heads trained with Adam, AU-ROC and MAE, and the benchmark grid
//! over tasks, inference signals and label fractions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::data::{channels_label, derive_seed, Channel, Labels, SignalSample};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{Model, ParamStore, Pooling};
use crate::training::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Current MAP below 65 mmHg.
    Hypotension,
    Sbp,
    Dbp,
    SvProxy,
    AgeProxy,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 5] = [
        ProbeTask::Hypotension,
        ProbeTask::Sbp,
        ProbeTask::Dbp,
        ProbeTask::SvProxy,
        ProbeTask::AgeProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Hypotension => "hypotension",
            ProbeTask::Sbp => "sbp",
            ProbeTask::Dbp => "dbp",
            ProbeTask::SvProxy => "sv_proxy",
            ProbeTask::AgeProxy => "age_proxy",
        }
    }

    /// Prediction horizon tag; synthetic records carry current-state labels.
    pub fn horizon(self) -> &'static str {
        match self {
            ProbeTask::Hypotension => "now",
            _ => "-",
        }
    }

    pub fn is_classification(self) -> bool {
        self == ProbeTask::Hypotension
    }

    /// Target value, or `None` when the record fails the task's label rule
    /// (SBP 90–200, DBP 50–120, SV 20–200, age at least 18).
    pub fn target(self, l: &Labels) -> Option<f64> {
        let within = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v).then_some(v);
        match self {
            ProbeTask::Hypotension => Some(if l.hypotensive { 1.0 } else { 0.0 }),
            ProbeTask::Sbp => within(l.sbp, 90.0, 200.0),
            ProbeTask::Dbp => within(l.dbp, 50.0, 120.0),
            ProbeTask::SvProxy => within(l.sv_proxy, 20.0, 200.0),
            ProbeTask::AgeProxy => (l.age_proxy >= 18.0).then_some(l.age_proxy),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        ProbeTask::ALL
            .into_iter()
            .find(|t| t.name() == s || (s == "sv" && *t == ProbeTask::SvProxy) || (s == "age" && *t == ProbeTask::AgeProxy))
            .ok_or_else(|| config_err!("unknown task '{s}'"))
    }
}

/// AU-ROC by the rank method: the Mann–Whitney U of the positive scores,
/// with tied scores sharing their average rank. `None` unless both classes
/// are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && scores[order[k + 1]] == scores[order[i]] {
            k += 1;
        }
        // ranks i+1 ..= k+1 share their mean
        let avg = (i + k + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=k].iter().filter(|&&o| labels[o]).count() as f64;
        i = k + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Mean absolute error and the standard deviation of the absolute errors.
pub fn mae(preds: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(shape_err!("mae of lengths {} and {}", preds.len(), labels.len()));
    }
    let abs: Vec<f64> = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).collect();
    let n = abs.len() as f64;
    let mean = abs.iter().sum::<f64>() / n;
    let var = abs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean-pooled encoder output of one record using only `signals`.
pub fn extract_embedding(model: &Model, sample: &SignalSample, signals: &[Channel]) -> Result<Vec<f64>> {
    Ok(extract_embeddings(model, &[sample], signals)?.remove(0))
}

/// Embeddings for many records, computed in chunks.
pub fn extract_embeddings(model: &Model, samples: &[&SignalSample], signals: &[Channel]) -> Result<Vec<Vec<f64>>> {
    extract_embeddings_with(model, samples, signals, Pooling::Mean)
}

pub fn extract_embeddings_with(
    model: &Model,
    samples: &[&SignalSample],
    signals: &[Channel],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>> {
    if signals.is_empty() {
        return Err(config_err!("inference signal subset is empty"));
    }
    let d = model.config().model_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let t = model.pooled_embedding_with(chunk, signals, pooling)?;
        out.extend(t.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pooling: Pooling,
    /// Independent label subsamples averaged at fractions below one.
    pub subsample_repeats: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 500,
            pooling: Pooling::Mean,
            subsample_repeats: 5,
            adam: AdamConfig::default(),
        }
    }
}

/// Affine head over standardised features. Regression targets are fitted
/// in standardised units and mapped back on prediction.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub task: ProbeTask,
    pub weights: Vec<f64>,
    pub bias: f64,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    target_mean: f64,
    target_scale: f64,
}

/// Per-feature centring and scaling applied before the affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    /// Mean and standard deviation of each column; constant columns get
    /// scale 1.
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        if x.is_empty() {
            return Err(shape_err!("feature scaler fitted on no rows"));
        }
        let (mean, scale) = standardizer(x);
        Ok(FeatureScaler { mean, scale })
    }
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for row in x {
        var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let scale = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

impl LinearProbe {
    fn features<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let it = x.iter().zip(&self.feature_mean).zip(&self.feature_scale);
        it.map(|((v, m), s)| (v - m) / s)
    }

    /// Raw head output: a logit for classification, standardised target
    /// otherwise.
    fn raw(&self, x: &[f64]) -> f64 {
        self.bias + self.features(x).zip(&self.weights).map(|(f, w)| f * w).sum::<f64>()
    }

    /// Classification logit or regression prediction in label units.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.raw(x);
        if self.task.is_classification() {
            z
        } else {
            self.target_mean + self.target_scale * z
        }
    }
}

/// Trains an affine head on `x` (one embedding per row) against targets `y`
/// with the task loss: binary cross-entropy for classification, mean squared
/// error otherwise.
pub fn fit_probe(x: &[Vec<f64>], y: &[f64], task: ProbeTask, cfg: &ProbeConfig, seed: u64) -> Result<LinearProbe> {
    if x.is_empty() || x.len() != y.len() {
        return Err(shape_err!("{} embeddings for {} labels", x.len(), y.len()));
    }
    fit_probe_scaled(x, y, task, cfg, seed, FeatureScaler::fit(x)?)
}

/// As [`fit_probe`] with feature statistics supplied by the caller, e.g.
/// fitted on a larger unlabelled pool.
pub fn fit_probe_scaled(
    x: &[Vec<f64>],
    y: &[f64],
    task: ProbeTask,
    cfg: &ProbeConfig,
    seed: u64,
    scaler: FeatureScaler,
) -> Result<LinearProbe> {
    if x.is_empty() || x.len() != y.len() {
        return Err(shape_err!("{} embeddings for {} labels", x.len(), y.len()));
    }
    if scaler.mean.len() != x[0].len() || scaler.scale.len() != x[0].len() {
        return Err(shape_err!("scaler of width {} for {}-wide embeddings", scaler.mean.len(), x[0].len()));
    }
    if task.is_classification() {
        let pos = y.iter().filter(|&&v| v > 0.5).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::Data(format!(
                "{task} probe needs both classes; got {pos} positive of {}",
                y.len()
            )));
        }
    }
    let d = x[0].len();
    let FeatureScaler {
        mean: feature_mean,
        scale: feature_scale,
    } = scaler;
    let (target_mean, target_scale) = if task.is_classification() {
        (0.0, 1.0)
    } else {
        let n = y.len() as f64;
        let m = y.iter().sum::<f64>() / n;
        let s = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        (m, if s > 1e-12 { s } else { 1.0 })
    };
    let mut probe = LinearProbe {
        task,
        weights: vec![0.0; d],
        bias: 0.0,
        feature_mean,
        feature_scale,
        target_mean,
        target_scale,
    };
    let feats: Vec<Vec<f64>> = x.iter().map(|r| probe.features(r).collect()).collect();
    let targets: Vec<f64> = y.iter().map(|v| (v - target_mean) / target_scale).collect();

    let mut store = ParamStore::new();
    store.push("weight", Tensor::zeros(&[d]));
    store.push("bias", Tensor::zeros(&[1]));
    let mut opt = Adam::new(&store, cfg.learning_rate, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (w, b) = (store.get(0).data().to_vec(), store.get(1).data()[0]);
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &i in batch {
                let z = b + feats[i].iter().zip(&w).map(|(f, w)| f * w).sum::<f64>();
                let r = if task.is_classification() {
                    1.0 / (1.0 + (-z).exp()) - targets[i]
                } else {
                    2.0 * (z - targets[i])
                };
                gw.iter_mut().zip(&feats[i]).for_each(|(g, f)| *g += r * f);
                gb += r;
            }
            let n = batch.len() as f64;
            gw.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut store, &[Some(gw), Some(vec![gb / n])])?;
        }
    }
    probe.weights = store.get(0).data().to_vec();
    probe.bias = store.get(1).data()[0];
    Ok(probe)
}

/// Indices of a random `ceil(fraction * n)` subset. For classification the
/// draw is repeated with a fresh stream until both classes appear.
pub fn subsample(y: &[f64], fraction: f64, classification: bool, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err!("label fraction {fraction} outside (0, 1]"));
    }
    let n = y.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    if k >= n {
        return Ok((0..n).collect());
    }
    for attempt in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        let pos = idx.iter().filter(|&&i| y[i] > 0.5).count();
        if !classification || (pos > 0 && pos < k) {
            return Ok(idx);
        }
    }
    Err(Error::Data(format!(
        "no {k}-record subsample with both classes after 1000 draws"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub horizon: String,
    /// `linear_probe` on frozen embeddings or `supervised` end to end.
    pub method: String,
    /// Inference signals, e.g. `ecg+ppg`.
    pub subset: String,
    pub fraction: f64,
    /// `auroc` or `mae`.
    pub metric: String,
    /// Mean over subsample repeats when `repeats > 1`.
    pub value: f64,
    /// With one repeat: standard deviation of absolute errors (MAE) or
    /// bootstrap standard deviation (AU-ROC). With several: standard
    /// deviation of the metric across repeats.
    pub dispersion: f64,
    /// Bootstrap 95% interval with one repeat, otherwise the range over
    /// repeats.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Test records.
    pub n: usize,
    pub n_train: usize,
    pub repeats: usize,
}

pub const REPORT_HEADER: &str =
    "task\tsubset\tfraction\tmetric\tvalue\tdispersion\tn\thorizon\tmethod\tci_low\tci_high\tn_train\trepeats";

impl ProbeReport {
    /// One tab-separated row matching [`REPORT_HEADER`].
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            self.task,
            self.subset,
            self.fraction,
            self.metric,
            self.value,
            self.dispersion,
            self.n,
            self.horizon,
            self.method,
            self.ci_low,
            self.ci_high,
            self.n_train,
            self.repeats
        )
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[ProbeReport]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.row())?;
    }
    Ok(())
}

const BOOTSTRAP_ROUNDS: usize = 200;

/// Percentile 95% interval and standard deviation of a statistic over
/// bootstrap resamples of the test set.
pub fn bootstrap<F>(n: usize, seed: u64, stat: F) -> (f64, f64, f64)
where
    F: Fn(&[usize]) -> Option<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(BOOTSTRAP_ROUNDS);
    let mut idx = vec![0usize; n];
    for _ in 0..BOOTSTRAP_ROUNDS {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        if let Some(v) = stat(&idx) {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    vals.sort_by(f64::total_cmp);
    let (_, sd) = mean_std(&vals);
    let q = |p: f64| vals[((p * (vals.len() - 1) as f64).round()) as usize];
    (sd, q(0.025), q(0.975))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Seed of the benchmark cell for `task` at `fraction`.
pub fn cell_seed(seed: u64, task: ProbeTask, fraction: f64) -> u64 {
    derive_seed(seed, task as u64 * 1000 + (fraction * 1000.0).round() as u64)
}

/// Seed of subsample repeat `r`; repeat 0 uses the cell seed itself.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        derive_seed(seed, 0x7265_7000 + r as u64)
    }
}

/// Number of subsample repeats used at `fraction`.
pub fn repeats_for(fraction: f64, repeats: usize) -> usize {
    if fraction < 1.0 {
        repeats.max(1)
    } else {
        1
    }
}

fn score(task: ProbeTask, preds: &[f64], targets: &[f64]) -> Result<f64> {
    if task.is_classification() {
        let labels: Vec<bool> = targets.iter().map(|&v| v > 0.5).collect();
        auroc(preds, &labels)?.ok_or_else(|| Error::Data(format!("{task} test set has a single class")))
    } else {
        Ok(mae(preds, targets)?.0)
    }
}

/// Scores a model family over label subsamples. `ty` and `vy` are the
/// filtered train and test targets; `fit(indices, seed)` trains on the
/// selected training records and returns predictions for every test record.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_subsampled<F>(
    task: ProbeTask,
    method: &str,
    subset: &[Channel],
    ty: &[f64],
    vy: &[f64],
    fraction: f64,
    repeats: usize,
    seed: u64,
    mut fit: F,
) -> Result<ProbeReport>
where
    F: FnMut(&[usize], u64) -> Result<Vec<f64>>,
{
    if ty.is_empty() || vy.is_empty() {
        return Err(Error::Data(format!("no records pass the {task} label rule")));
    }
    let reps = repeats_for(fraction, repeats);
    let mut values = Vec::with_capacity(reps);
    let mut first: Option<Vec<f64>> = None;
    let mut n_train = 0;
    for r in 0..reps {
        let s = repeat_seed(seed, r);
        let idx = subsample(ty, fraction, task.is_classification(), s)?;
        n_train = idx.len();
        let preds = fit(&idx, derive_seed(s, 7))?;
        if preds.len() != vy.len() {
            return Err(Error::Internal(format!("{} predictions for {} test records", preds.len(), vy.len())));
        }
        values.push(score(task, &preds, vy)?);
        first.get_or_insert(preds);
    }
    let preds = first.expect("at least one repeat");
    let metric = if task.is_classification() { "auroc" } else { "mae" };
    let (value, dispersion, ci_low, ci_high) = if reps > 1 {
        let (m, sd) = mean_std(&values);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (m, sd, lo, hi)
    } else {
        let boot_seed = derive_seed(seed, 11);
        let (sd, lo, hi) = bootstrap(preds.len(), boot_seed, |ix| {
            let p: Vec<f64> = ix.iter().map(|&i| preds[i]).collect();
            let l: Vec<f64> = ix.iter().map(|&i| vy[i]).collect();
            score(task, &p, &l).ok()
        });
        let dispersion = if task.is_classification() { sd } else { mae(&preds, vy)?.1 };
        (values[0], dispersion, lo, hi)
    };
    Ok(ProbeReport {
        task,
        horizon: task.horizon().to_string(),
        method: method.to_string(),
        subset: channels_label(subset),
        fraction,
        metric: metric.to_string(),
        value,
        dispersion,
        ci_low,
        ci_high,
        n: vy.len(),
        n_train,
        repeats: reps,
    })
}

/// Scores test embeddings with linear probes fitted on training subsamples.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    task: ProbeTask,
    subset: &[Channel],
    train_x: &[Vec<f64>],
    train_labels: &[Labels],
    test_x: &[Vec<f64>],
    test_labels: &[Labels],
    fraction: f64,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let pick = |x: &[Vec<f64>], l: &[Labels]| -> (Vec<Vec<f64>>, Vec<f64>) {
        x.iter()
            .zip(l)
            .filter_map(|(x, l)| task.target(l).map(|y| (x.clone(), y)))
            .unzip()
    };
    let (tx, ty) = pick(train_x, train_labels);
    let (vx, vy) = pick(test_x, test_labels);
    evaluate_subsampled(task, "linear_probe", subset, &ty, &vy, fraction, cfg.subsample_repeats, seed, |idx, s| {
        let sx: Vec<Vec<f64>> = idx.iter().map(|&i| tx[i].clone()).collect();
        let sy: Vec<f64> = idx.iter().map(|&i| ty[i]).collect();
        let probe = fit_probe(&sx, &sy, task, cfg, s)?;
        Ok(vx.iter().map(|x| probe.predict(x)).collect())
    })
}

/// Embedding source for [`run_benchmark`].
pub trait Embedder {
    fn embed(&self, samples: &[&SignalSample], subset: &[Channel], pooling: Pooling) -> Result<Vec<Vec<f64>>>;
}

impl Embedder for Model {
    fn embed(&self, samples: &[&SignalSample], subset: &[Channel], pooling: Pooling) -> Result<Vec<Vec<f64>>> {
        extract_embeddings_with(self, samples, subset, pooling)
    }
}

/// One report per task × subset × fraction, probing frozen embeddings of
/// `train` and scoring on `test`.
pub fn run_benchmark<E: Embedder + ?Sized>(
    model: &E,
    train: &[&SignalSample],
    test: &[&SignalSample],
    tasks: &[ProbeTask],
    subsets: &[Vec<Channel>],
    fractions: &[f64],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let train_labels: Vec<Labels> = train.iter().map(|s| s.labels).collect();
    let test_labels: Vec<Labels> = test.iter().map(|s| s.labels).collect();
    let mut out = Vec::new();
    for subset in subsets {
        let tx = model.embed(train, subset, cfg.pooling)?;
        let vx = model.embed(test, subset, cfg.pooling)?;
        for &task in tasks {
            for &f in fractions {
                let s = cell_seed(seed, task, f);
                out.push(evaluate_task(task, subset, &tx, &train_labels, &vx, &test_labels, f, cfg, s)?);
            }
        }
    }
    Ok(out)
}
