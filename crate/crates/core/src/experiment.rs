//! Desk-scale pipeline shared by the command line and the acceptance suite:
//! synthetic cohorts, pretraining, cross-signal reconstruction scoring, the
//! few-label comparison with a supervised encoder, and ablation sweeps.

use serde::{Deserialize, Serialize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::container::{save_checkpoint, RngState};
use crate::data::{derive_seed, Channel, Dataset, SignalSample};
use crate::error::{config_err, Error, Result};
use crate::masking::{sample_mask, MaskIndex, MaskSchedule, MaskStrategy};
use crate::model::{Model, ModelConfig};
use crate::preprocess::{preprocess_dataset, preprocess_dataset_with};
use crate::probe::{cell_seed, evaluate_subsampled, run_benchmark, ProbeConfig, ProbeReport, ProbeTask};
use crate::sigsynth::{cohort_clean, generate_cohort, LatentDistribution};
use crate::training::{init_model, pcc, pretrain, train_supervised, LossConfig, PretrainOutcome, SupervisedConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub distribution: LatentDistribution,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_samples: 2000,
            seed: 1,
            distribution: LatentDistribution::default(),
        }
    }
}

impl CohortConfig {
    pub fn generate(&self) -> Result<Dataset> {
        generate_cohort(self.n_samples, self.seed, &self.distribution)
    }

    /// Clean channels of record `sample_id` before noise and filtering.
    pub fn clean(&self, sample_id: u64) -> Result<[Vec<f64>; 3]> {
        cohort_clean(self.seed, sample_id, &self.distribution)
    }
}

/// Everything one desk run needs. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: MaskSchedule,
    /// Records used for self-supervised pretraining.
    pub pretrain_cohort: CohortConfig,
    /// Separate labelled cohort for probing; normalised with the
    /// pretraining statistics.
    pub downstream_cohort: CohortConfig,
    pub probe: ProbeConfig,
    pub supervised: SupervisedConfig,
    /// Inference signals for ablation and few-label scoring.
    pub signals: Vec<Channel>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            schedule: MaskSchedule::default(),
            pretrain_cohort: CohortConfig::default(),
            downstream_cohort: CohortConfig {
                n_samples: 4000,
                seed: 2,
                ..CohortConfig::default()
            },
            probe: ProbeConfig::default(),
            supervised: SupervisedConfig::default(),
            signals: vec![Channel::Ecg, Channel::Ppg],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.schedule)?;
        self.pretrain_cohort.distribution.validate()?;
        self.downstream_cohort.distribution.validate()?;
        if self.signals.is_empty() {
            return Err(config_err!("inference signal list is empty"));
        }
        Ok(())
    }
}

/// Switches that remove one ingredient of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// The full method: all masking strategies, both loss terms.
    All,
    NoTypeEmbed,
    NoCrossAttn,
    RmseOnly,
    Inter,
    Intra,
    Signal,
    InterIntra,
}

impl Ablation {
    pub const NAMES: [&'static str; 8] = [
        "all",
        "no-type-embed",
        "no-cross-attn",
        "rmse-only",
        "inter",
        "intra",
        "signal",
        "inter-intra",
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::All => "all",
            Ablation::NoTypeEmbed => "no-type-embed",
            Ablation::NoCrossAttn => "no-cross-attn",
            Ablation::RmseOnly => "rmse-only",
            Ablation::Inter => "inter",
            Ablation::Intra => "intra",
            Ablation::Signal => "signal",
            Ablation::InterIntra => "inter-intra",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        match self {
            Ablation::All => {}
            Ablation::NoTypeEmbed => cfg.model.type_embedding = false,
            Ablation::NoCrossAttn => cfg.model.cross_attention = false,
            Ablation::RmseOnly => cfg.train.loss = LossConfig::rmse_only(),
            Ablation::Inter | Ablation::Intra | Ablation::Signal | Ablation::InterIntra => {
                cfg.schedule = MaskSchedule::preset(self.name())?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "all" | "full" => Ablation::All,
            "no-type-embed" => Ablation::NoTypeEmbed,
            "no-cross-attn" => Ablation::NoCrossAttn,
            "rmse-only" => Ablation::RmseOnly,
            "inter" => Ablation::Inter,
            "intra" => Ablation::Intra,
            "signal" => Ablation::Signal,
            "inter-intra" => Ablation::InterIntra,
            other => {
                return Err(config_err!(
                    "unknown ablation '{other}' (expected one of {})",
                    Ablation::NAMES.join(", ")
                ))
            }
        })
    }
}

/// Preprocessed pretraining and downstream cohorts.
#[derive(Clone, Debug)]
pub struct Cohorts {
    pub pretrain: Dataset,
    pub downstream: Dataset,
}

pub fn prepare_cohorts(cfg: &ExperimentConfig) -> Result<Cohorts> {
    let (pretrain, _) = preprocess_dataset(&cfg.pretrain_cohort.generate()?)?;
    let (downstream, _) = preprocess_dataset_with(&cfg.downstream_cohort.generate()?, pretrain.normalization.as_ref())?;
    Ok(Cohorts { pretrain, downstream })
}

/// Fresh model trained on the train split of `data`.
pub fn pretrain_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<PretrainOutcome> {
    let train = data.train();
    let model = init_model(cfg.model.clone(), &train, cfg.train.seed)?;
    pretrain(&train, model, &cfg.train, &cfg.schedule)
}

/// Per-record PCC between the reconstruction of `target` with that signal
/// fully masked and the clean synthetic waveform of the same record.
pub fn cross_signal_pcc(model: &Model, samples: &[&SignalSample], cohort: &CohortConfig, target: Channel) -> Result<Vec<f64>> {
    let chs = model.channels().to_vec();
    let row = chs
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| config_err!("model does not reconstruct {target}"))?;
    let mask = MaskIndex {
        rows: chs.iter().map(|&c| vec![c == target; model.num_patches()]).collect(),
        channels: chs,
        strategy: MaskStrategy::signal(&[target]),
        ratio: 1.0,
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let masks = vec![mask.clone(); chunk.len()];
        let rec = model.reconstruct(chunk, &masks)?;
        for (s, r) in chunk.iter().zip(&rec[row]) {
            let clean = cohort.clean(s.sample_id)?;
            let p = pcc(&clean[target.index()], r)?
                .ok_or_else(|| Error::Numerical(format!("flat reconstruction of record {}", s.sample_id)))?;
            out.push(p);
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Supervised encoder trained from scratch on the same label subsamples the
/// linear probes see at `fraction`.
pub fn supervised_report(
    cfg: &ExperimentConfig,
    task: ProbeTask,
    train: &[&SignalSample],
    test: &[&SignalSample],
    fraction: f64,
    seed: u64,
) -> Result<ProbeReport> {
    fn pick<'a>(task: ProbeTask, s: &[&'a SignalSample]) -> (Vec<&'a SignalSample>, Vec<f64>) {
        s.iter().filter_map(|r| task.target(&r.labels).map(|y| (*r, y))).unzip()
    }
    let (tx, ty) = pick(task, train);
    let (vx, vy) = pick(task, test);
    let signals = &cfg.signals;
    evaluate_subsampled(
        task,
        "supervised",
        signals,
        &ty,
        &vy,
        fraction,
        cfg.probe.subsample_repeats,
        cell_seed(seed, task, fraction),
        |idx, s| {
            let few: Vec<&SignalSample> = idx.iter().map(|&i| tx[i]).collect();
            let model = init_model(cfg.model.clone(), &few, s)?;
            let sc = SupervisedConfig { seed: s, ..cfg.supervised };
            train_supervised(model, task, signals, &few, &sc)?.predict(&vx)
        },
    )
}

/// Linear probe and supervised reports for one task at one label fraction.
pub fn few_label_comparison(
    cfg: &ExperimentConfig,
    model: &Model,
    task: ProbeTask,
    train: &[&SignalSample],
    test: &[&SignalSample],
    fraction: f64,
    seed: u64,
) -> Result<(ProbeReport, ProbeReport)> {
    let probe = run_benchmark(model, train, test, &[task], &[cfg.signals.clone()], &[fraction], &cfg.probe, seed)?.remove(0);
    let sl = supervised_report(cfg, task, train, test, fraction, seed)?;
    Ok((probe, sl))
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    /// Hypotension probe on all downstream training labels.
    pub hypotension: ProbeReport,
}

pub const ABLATION_HEADER: &str = "ablation\tfirst_epoch_loss\tfinal_epoch_loss\tsubset\thypotension_auroc\tdispersion\tci_low\tci_high\tn";

impl AblationResult {
    pub fn row(&self) -> String {
        let h = &self.hypotension;
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.ablation, self.first_epoch_loss, self.final_epoch_loss, h.subset, h.value, h.dispersion, h.ci_low, h.ci_high, h.n
        )
    }
}

pub fn write_ablation_table<W: Write>(mut w: W, results: &[AblationResult]) -> Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in results {
        writeln!(w, "{}", r.row())?;
    }
    Ok(())
}

/// Pretrains one model per ablation from the same seed and scores each with
/// a hypotension probe. Checkpoints go to `checkpoints/<ablation>` when a
/// directory is given.
pub fn ablation_study(
    cfg: &ExperimentConfig,
    ablations: &[Ablation],
    cohorts: &Cohorts,
    checkpoints: Option<&Path>,
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let (dt, dv) = (cohorts.downstream.train(), cohorts.downstream.validation());
    let mut out = Vec::with_capacity(ablations.len());
    for &a in ablations {
        let mut arm = cfg.clone();
        a.apply(&mut arm)?;
        arm.validate()?;
        let trained = pretrain_on(&arm, &cohorts.pretrain)?;
        if let Some(dir) = checkpoints {
            let rng = RngState {
                seed: arm.train.seed,
                epoch: arm.train.epochs as u64,
                micro_batch: trained.history.len() as u64,
            };
            save_checkpoint(&trained.model, rng, trained.updates, &dir.join(a.name()))?;
        }
        let hypotension = run_benchmark(
            &trained.model,
            &dt,
            &dv,
            &[ProbeTask::Hypotension],
            &[arm.signals.clone()],
            &[1.0],
            &arm.probe,
            arm.train.seed,
        )?
        .remove(0);
        let result = AblationResult {
            ablation: a,
            first_epoch_loss: trained.epoch_losses[0],
            final_epoch_loss: *trained.epoch_losses.last().expect("at least one epoch"),
            hypotension,
        };
        progress(&result);
        out.push(result);
    }
    Ok(out)
}

/// Finite-difference check of every parameter gradient of a freshly
/// initialised model. The scalar under test is a fixed random weighting of
/// all reconstructions for a two-record batch, one inter- and one
/// intra-masked.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, tol: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let n = cfg.channels.len();
    let model = Model::new(cfg.clone(), &vec![0.5; n], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let (j, p) = (model.num_patches(), model.patch_len());
    let patches: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[2, j, p], 1.0, &mut rng)).collect();
    let mut masks = Vec::new();
    for s in [MaskStrategy::Inter, MaskStrategy::Intra] {
        masks.push(sample_mask(&s, model.channels(), j, 0.4, &mut rng)?);
    }
    let weights: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[2, j * p], 1.0, &mut rng)).collect();
    let opts = GradCheckOptions {
        // key-bias gradients are exactly zero, so only round-off is compared there
        floor: tol,
        ..GradCheckOptions::with_tol(tol)
    };
    Ok(grad_check(
        |g, vars| {
            let rec = model.forward(g, &vars.to_vec(), &patches, &masks)?;
            let mut total = None;
            for (s, w) in rec.signals.iter().zip(&weights) {
                let w = g.constant(w.clone());
                let t = g.mul(*s, w)?;
                let t = g.sum(t)?;
                total = Some(match total {
                    None => t,
                    Some(acc) => g.add(acc, t)?,
                });
            }
            total.ok_or_else(|| Error::Internal("model has no outputs".into()))
        },
        model.params().tensors(),
        opts,
    ))
}
