//! Reconstruction loss, Adam, masked pretraining with gradient accumulation
//! over the masking schedule, and the single-signal and supervised
//! baselines.

mod adam;
mod loss;
mod supervised;

pub use adam::{Adam, AdamConfig};
pub use loss::{pcc, rmse, sample_loss, total_loss, LossConfig, LossRegion, LossTerms, PccMode};
pub use supervised::{train_supervised, SupervisedConfig, SupervisedModel};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::autodiff::{Graph, Tensor};
use crate::data::{derive_seed, Channel, SignalSample};
use crate::error::{config_err, Error, Result};
use crate::masking::{next_strategy, sample_mask, MaskIndex, MaskSchedule, MaskStrategy};
use crate::model::{Model, ModelConfig};

const MASK_STREAM: u64 = 0x6d61_736b;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Records per micro-batch.
    pub batch_size: usize,
    /// Micro-batches whose gradients are summed into one update.
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            accumulation_steps: 10,
            epochs: 10,
            seed: 0,
            mask_ratio: 0.4,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &MaskSchedule) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!(
                "learning_rate, batch_size and epochs must be positive"
            ));
        }
        if self.accumulation_steps == 0 || self.accumulation_steps != schedule.len() {
            return Err(config_err!(
                "accumulation_steps {} must equal the masking schedule length {}",
                self.accumulation_steps,
                schedule.len()
            ));
        }
        self.loss.validate()
    }
}

/// One micro-batch of the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub micro_batch: usize,
    /// Optimizer updates applied before this micro-batch.
    pub update: u64,
    pub epoch: usize,
    pub strategy: MaskStrategy,
    pub loss: f64,
    /// Batch-mean RMSE per model signal.
    pub rmse: Vec<f64>,
    /// Batch-mean PCC per model signal.
    pub pcc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
    /// Mean micro-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub updates: u64,
}

impl PretrainOutcome {
    pub fn write_history<W: Write>(&self, mut w: W) -> Result<()> {
        let chs = self.model.channels();
        let mut header = vec!["step".to_string(), "update".into(), "epoch".into(), "strategy".into(), "loss".into()];
        header.extend(chs.iter().map(|c| format!("rmse_{}", c.name())));
        header.extend(chs.iter().map(|c| format!("pcc_{}", c.name())));
        writeln!(w, "{}", header.join("\t"))?;
        for r in &self.history {
            let mut row = vec![
                r.micro_batch.to_string(),
                r.update.to_string(),
                r.epoch.to_string(),
                r.strategy.to_string(),
                format!("{:.9}", r.loss),
            ];
            row.extend(r.rmse.iter().chain(&r.pcc).map(|v| format!("{v:.9}")));
            writeln!(w, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

/// Standard deviation of every value of each channel over `samples`.
pub fn signal_stds(samples: &[&SignalSample], channels: &[Channel]) -> Vec<f64> {
    channels
        .iter()
        .map(|&c| {
            let n = samples.iter().map(|s| s.channel(c).len()).sum::<usize>().max(1) as f64;
            let mean = samples.iter().flat_map(|s| s.channel(c)).sum::<f64>() / n;
            let var = samples
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect()
}

/// Fresh model whose type embeddings are scaled by the spread of `samples`.
pub fn init_model(config: ModelConfig, samples: &[&SignalSample], seed: u64) -> Result<Model> {
    let stds = signal_stds(samples, &config.channels);
    Model::new(config, &stds, seed)
}

/// Masks for one micro-batch, drawn from the micro-batch's own stream.
pub fn micro_batch_masks(
    strategy: &MaskStrategy,
    channels: &[Channel],
    j: usize,
    ratio: f64,
    n: usize,
    seed: u64,
    micro_batch: usize,
) -> Result<Vec<MaskIndex>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, MASK_STREAM), micro_batch as u64));
    (0..n).map(|_| sample_mask(strategy, channels, j, ratio, &mut rng)).collect()
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct MicroBatch {
    pub loss: f64,
    pub rmse: Vec<f64>,
    pub pcc: Vec<f64>,
    /// Per parameter tensor, `None` when it did not affect the loss.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Loss and gradients of `model` on `samples` under `masks`.
pub fn micro_batch_gradients(
    model: &Model,
    samples: &[&SignalSample],
    masks: &[MaskIndex],
    loss: &LossConfig,
) -> Result<MicroBatch> {
    let chs = model.channels().to_vec();
    let inputs = model.patch_inputs(samples, &chs)?;
    let patches: Vec<Tensor> = inputs.into_iter().map(|(_, t)| t).collect();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let rec = model.forward(&mut g, &vars, &patches, masks)?;
    let n = model.num_patches() * model.patch_len();
    let p = model.patch_len();
    let mut targets = Vec::with_capacity(chs.len());
    for &c in &chs {
        let data: Vec<f64> = samples.iter().flat_map(|s| s.channel(c).iter().copied()).collect();
        targets.push(g.constant(Tensor::new(vec![samples.len(), n], data)?));
    }
    let weights: Option<Vec<Vec<f64>>> = match loss.loss_region {
        LossRegion::FullSignal => None,
        LossRegion::MaskedOnly => Some(
            (0..chs.len())
                .map(|r| {
                    masks
                        .iter()
                        .flat_map(|m| m.rows[r].iter().flat_map(|&x| std::iter::repeat_n(f64::from(u8::from(x)), p)))
                        .collect()
                })
                .collect(),
        ),
    };
    let terms = total_loss(&mut g, &rec.signals, &targets, weights.as_deref(), loss)?;
    let value = g.value(terms.total).item();
    let grads = g.backward(terms.total)?;
    Ok(MicroBatch {
        loss: value,
        rmse: terms.rmse,
        pcc: terms.pcc,
        grads: vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec)).collect(),
    })
}

fn accumulate(acc: &mut [Option<Vec<f64>>], grads: Vec<Option<Vec<f64>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Masked pretraining. Micro-batches of `cfg.batch_size` records are drawn
/// from a per-epoch shuffle of `samples`; micro-batch `k` uses strategy
/// `k mod schedule.len()`. Gradients of `cfg.accumulation_steps`
/// consecutive micro-batches are summed before each Adam update; the
/// window runs across epoch boundaries and a final partial window is
/// applied at the end.
pub fn pretrain(
    samples: &[&SignalSample],
    mut model: Model,
    cfg: &TrainConfig,
    schedule: &MaskSchedule,
) -> Result<PretrainOutcome> {
    cfg.validate(schedule)?;
    if samples.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let chs = model.channels().to_vec();
    let j = model.num_patches();
    let mut opt = Adam::new(model.params(), cfg.learning_rate, cfg.adam);
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    let mut pending = 0usize;
    let mut history = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut k = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SignalSample> = chunk.iter().map(|&i| samples[i]).collect();
            let strategy = next_strategy(schedule, k);
            let masks = micro_batch_masks(strategy, &chs, j, cfg.mask_ratio, batch.len(), cfg.seed, k)?;
            let mb = micro_batch_gradients(&model, &batch, &masks, &cfg.loss)?;
            if !mb.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at micro-batch {k} (epoch {epoch}, strategy {strategy})"
                )));
            }
            history.push(StepRecord {
                micro_batch: k,
                update: opt.steps(),
                epoch,
                strategy: strategy.clone(),
                loss: mb.loss,
                rmse: mb.rmse,
                pcc: mb.pcc,
            });
            sum += mb.loss;
            count += 1;
            accumulate(&mut acc, mb.grads);
            pending += 1;
            k += 1;
            if pending == cfg.accumulation_steps {
                opt.step(model.params_mut(), &acc)?;
                acc.iter_mut().for_each(|a| *a = None);
                pending = 0;
            }
        }
        epoch_losses.push(sum / count as f64);
    }
    if pending > 0 {
        opt.step(model.params_mut(), &acc)?;
    }
    Ok(PretrainOutcome {
        model,
        history,
        epoch_losses,
        updates: opt.steps(),
    })
}

/// Baseline families trained for comparison with the joint model.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineKind {
    /// One-signal masked autoencoder with inter-masking only.
    SingleSsl(Channel),
    /// Encoder plus linear head trained end to end on labels.
    Supervised(crate::probe::ProbeTask, Vec<Channel>),
}

/// Trained baseline.
#[derive(Clone, Debug)]
pub enum Baseline {
    SingleSsl(PretrainOutcome),
    Supervised(SupervisedModel),
}

pub fn train_baseline(
    kind: &BaselineKind,
    samples: &[&SignalSample],
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Baseline> {
    match kind {
        BaselineKind::SingleSsl(c) => {
            let config = base.single_signal(*c);
            let model = init_model(config, samples, cfg.seed)?;
            let schedule = MaskSchedule::repeat(MaskStrategy::Inter, cfg.accumulation_steps);
            Ok(Baseline::SingleSsl(pretrain(samples, model, cfg, &schedule)?))
        }
        BaselineKind::Supervised(task, signals) => {
            let sc = SupervisedConfig {
                learning_rate: cfg.learning_rate,
                batch_size: cfg.batch_size,
                epochs: cfg.epochs,
                seed: cfg.seed,
                adam: cfg.adam,
                ..SupervisedConfig::default()
            };
            let model = init_model(base.clone(), samples, cfg.seed)?;
            Ok(Baseline::Supervised(train_supervised(model, *task, signals, samples, &sc)?))
        }
    }
}
