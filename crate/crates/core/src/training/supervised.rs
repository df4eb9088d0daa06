use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig};
use crate::autodiff::{Graph, Tensor};
use crate::data::{Channel, SignalSample};
use crate::error::{config_err, Error, Result};
use crate::model::params::glorot;
use crate::model::{Model, ParamStore};
use crate::probe::ProbeTask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs are extended until at least this many updates have run, so a
    /// small labelled subset still gets a trained model.
    pub min_updates: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            min_updates: 200,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Encoder with a linear head on the mean-pooled output, trained end to end.
#[derive(Clone, Debug)]
pub struct SupervisedModel {
    pub model: Model,
    pub task: ProbeTask,
    pub signals: Vec<Channel>,
    pub head: ParamStore,
    target_mean: f64,
    target_scale: f64,
    pub losses: Vec<f64>,
    /// Optimizer updates applied, one per batch.
    pub updates: u64,
}

impl SupervisedModel {
    /// Logits for classification, label-unit predictions otherwise.
    pub fn predict(&self, samples: &[&SignalSample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(128) {
            let inputs = self.model.patch_inputs(chunk, &self.signals)?;
            let mut g = Graph::new();
            let v = self.model.bind(&mut g, false);
            let h = self.head.bind(&mut g, false);
            let enc = self.model.encode_signals(&mut g, &v, &inputs)?;
            let pooled = g.mean_axis(enc, 1)?;
            let z = g.linear(pooled, h[0], Some(h[1]))?;
            out.extend(g.value(z).data().iter().map(|z| self.target_mean + self.target_scale * z));
        }
        Ok(out)
    }
}

pub fn train_supervised(
    mut model: Model,
    task: ProbeTask,
    signals: &[Channel],
    samples: &[&SignalSample],
    cfg: &SupervisedConfig,
) -> Result<SupervisedModel> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(config_err!("supervised batch size and learning rate must be positive"));
    }
    let labelled: Vec<(&SignalSample, f64)> =
        samples.iter().filter_map(|s| task.target(&s.labels).map(|y| (*s, y))).collect();
    if labelled.is_empty() {
        return Err(Error::Data(format!("no records pass the {task} label rule")));
    }
    let n = labelled.len() as f64;
    let (target_mean, target_scale) = if task.is_classification() {
        let pos = labelled.iter().filter(|(_, y)| *y > 0.5).count();
        if pos == 0 || pos == labelled.len() {
            return Err(Error::Data(format!("{task} training set has a single class")));
        }
        (0.0, 1.0)
    } else {
        let m = labelled.iter().map(|(_, y)| y).sum::<f64>() / n;
        let s = (labelled.iter().map(|(_, y)| (y - m) * (y - m)).sum::<f64>() / n).sqrt();
        (m, if s > 1e-12 { s } else { 1.0 })
    };

    let d = model.config().model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_4ead);
    let mut head = ParamStore::new();
    head.push("head.weight", glorot(d, 1, &mut rng));
    head.push("head.bias", Tensor::zeros(&[1]));
    let mut opt = Adam::new(model.params(), cfg.learning_rate, cfg.adam);
    let mut head_opt = Adam::new(&head, cfg.learning_rate, cfg.adam);
    let encoder = model.encoder_param_indices();

    let per_epoch = labelled.len().div_ceil(cfg.batch_size);
    let epochs = cfg.epochs.max(cfg.min_updates.div_ceil(per_epoch));
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&SignalSample> = batch.iter().map(|&i| labelled[i].0).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| (labelled[i].1 - target_mean) / target_scale).collect();
            let inputs = model.patch_inputs(&xs, signals)?;
            let mut g = Graph::new();
            let v = model.bind(&mut g, true);
            let h = head.bind(&mut g, true);
            let enc = model.encode_signals(&mut g, &v, &inputs)?;
            let pooled = g.mean_axis(enc, 1)?;
            let z = g.linear(pooled, h[0], Some(h[1]))?;
            let z = g.reshape(z, &[xs.len()])?;
            let loss = if task.is_classification() {
                g.bce_with_logits(z, &ys)?
            } else {
                let y = g.constant(Tensor::from_vec(ys));
                let r = g.sub(z, y)?;
                let sq = g.mul(r, r)?;
                g.mean(sq)?
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("supervised {task} loss became {value}")));
            }
            total += value * xs.len() as f64;
            let grads = g.backward(loss)?;
            let mut mg: Vec<Option<Vec<f64>>> = vec![None; v.len()];
            for &i in &encoder {
                mg[i] = grads.get(v[i]).map(<[f64]>::to_vec);
            }
            opt.step(model.params_mut(), &mg)?;
            let hg: Vec<Option<Vec<f64>>> = h.iter().map(|&x| grads.get(x).map(<[f64]>::to_vec)).collect();
            head_opt.step(&mut head, &hg)?;
        }
        losses.push(total / n);
    }
    Ok(SupervisedModel {
        model,
        task,
        signals: signals.to_vec(),
        head,
        target_mean,
        target_scale,
        losses,
        updates: head_opt.steps(),
    })
}
