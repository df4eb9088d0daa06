use physmae_core::autodiff::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use physmae_core::data::{Channel, Dataset, SignalSample};
use physmae_core::masking::{MaskSchedule, MaskStrategy};
use physmae_core::model::{Model, ModelConfig};
use physmae_core::preprocess::preprocess_dataset;
use physmae_core::probe::ProbeTask;
use physmae_core::sigsynth::{generate_cohort, LatentDistribution};
use physmae_core::training::*;
use physmae_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const ALL: [Channel; 3] = Channel::ALL;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-3.0..3.0)).collect()
}

/// Two-pass references written independently of the library.
fn rmse_ref(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
}

fn pcc_ref(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt())
}

/// Preprocessed records shared by the slower tests.
fn cohort() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let raw = generate_cohort(200, 5, &LatentDistribution::default()).unwrap();
        preprocess_dataset(&raw).unwrap().0
    })
}

fn records(n: usize) -> Vec<&'static SignalSample> {
    cohort().samples.iter().take(n).collect()
}

#[test]
fn rmse_examples_and_oracle() {
    let x = [1.0, -2.0, 0.5];
    assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), (25.0f64 / 2.0).sqrt());
    assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    let mut r = rng(1);
    for _ in 0..100 {
        let n = r.random_range(1..300);
        let (a, b) = (random_vec(n, &mut r), random_vec(n, &mut r));
        assert!((rmse(&a, &b).unwrap() - rmse_ref(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn pcc_examples_and_oracle() {
    let mut r = rng(2);
    let x = random_vec(1000, &mut r);
    let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pcc(&x, &affine).unwrap().unwrap() - 1.0).abs() < 1e-12);
    assert!((pcc(&x, &neg).unwrap().unwrap() + 1.0).abs() < 1e-12);
    let mut shuffled = x.clone();
    shuffled.shuffle(&mut r);
    assert!(pcc(&x, &shuffled).unwrap().unwrap().abs() < 0.1);
    assert_eq!(pcc(&x[..5], &[2.0; 5]).unwrap(), None);
    assert!(matches!(pcc(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    for _ in 0..100 {
        let n = r.random_range(2..300);
        let (a, b) = (random_vec(n, &mut r), random_vec(n, &mut r));
        assert!((pcc(&a, &b).unwrap().unwrap() - pcc_ref(&a, &b)).abs() < 1e-12);
    }
}

fn graph_loss(targets: &[Vec<f64>], recons: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let n = targets[0].len();
    let t: Vec<Var> = targets.iter().map(|x| g.constant(Tensor::new(vec![1, n], x.clone()).unwrap())).collect();
    let r: Vec<Var> = recons.iter().map(|x| g.constant(Tensor::new(vec![1, n], x.clone()).unwrap())).collect();
    let terms = total_loss(&mut g, &r, &t, None, cfg).unwrap();
    g.value(terms.total).item()
}

#[test]
fn loss_weights_are_exact() {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    // orthogonal zero-mean pair with RMSE 1 and PCC 0
    let s = vec![h, -h, h, -h];
    let r = vec![h, h, -h, -h];
    assert!((rmse(&s, &r).unwrap() - 1.0).abs() < 1e-15);
    assert!(pcc(&s, &r).unwrap().unwrap().abs() < 1e-15);
    let (t3, r3) = (vec![s.clone(); 3], vec![r.clone(); 3]);
    let cfg = LossConfig::default();
    assert_eq!((cfg.alpha, cfg.beta), (0.8, 0.2));
    assert!((graph_loss(&t3, &r3, &cfg) - 3.0).abs() < 1e-12);
    let tr: Vec<&[f64]> = t3.iter().map(Vec::as_slice).collect();
    let rr: Vec<&[f64]> = r3.iter().map(Vec::as_slice).collect();
    assert!((sample_loss(&tr, &rr, &cfg).unwrap() - 3.0).abs() < 1e-12);
    assert!((graph_loss(&t3, &r3, &LossConfig::rmse_only()) - 2.4).abs() < 1e-12);
    let neg = LossConfig {
        pcc_mode: PccMode::NegativePcc,
        ..cfg
    };
    assert!((graph_loss(&t3, &r3, &neg) - 2.4).abs() < 1e-12);
    assert!(graph_loss(&t3, &t3, &cfg).abs() < 1e-12);
}

#[test]
fn loss_config_rejects_negative_weights() {
    let bad = LossConfig {
        alpha: -0.1,
        ..LossConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn total_loss_gradient_check() {
    let mut r = rng(3);
    let targets: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 12], 1.0, &mut r)).collect();
    let recons: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 12], 1.0, &mut r)).collect();
    let mask: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..24).map(|i| f64::from(u8::from(i % 3 != 0))).collect())
        .collect();
    for (mode, weights) in [(PccMode::OneMinusPcc, None), (PccMode::LiteralPcc, Some(mask.clone()))] {
        let cfg = LossConfig {
            pcc_mode: mode,
            ..LossConfig::default()
        };
        let rep = grad_check(
            |g, v| {
                let t: Vec<Var> = targets.iter().map(|x| g.constant(x.clone())).collect();
                Ok(total_loss(g, v, &t, weights.as_deref(), &cfg)?.total)
            },
            &recons,
            GradCheckOptions::with_tol(1e-6),
        );
        assert!(rep.passed, "{mode:?}: {:.3e} {:?}", rep.max_rel_error, rep.diagnostic);
    }
}

proptest! {
    #[test]
    fn default_loss_is_non_negative(
        seed in 0u64..10_000,
        n in 3usize..40,
        exact in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let t: Vec<Vec<f64>> = (0..3).map(|_| random_vec(n, &mut r)).collect();
        let rec: Vec<Vec<f64>> = if exact { t.clone() } else { (0..3).map(|_| random_vec(n, &mut r)).collect() };
        let l = graph_loss(&t, &rec, &LossConfig::default());
        prop_assert!(l >= -1e-12);
        if exact {
            prop_assert!(l.abs() < 1e-12);
        } else {
            prop_assert!(l > 0.0);
        }
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder_depth: 1,
        decoder_depth: 1,
        ..ModelConfig::desk()
    }
}

#[test]
fn accumulated_gradient_is_sum_of_micro_batches() {
    let recs = records(8);
    let model = init_model(small_config(), &recs, 0).unwrap();
    let strategies = [MaskStrategy::Inter, MaskStrategy::signal(&[Channel::Ppg])];
    let batches = [&recs[..4], &recs[4..]];
    let cfg = LossConfig::default();
    let mut summed: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut masks_used = Vec::new();
    for (k, (s, b)) in strategies.iter().zip(batches).enumerate() {
        let masks = micro_batch_masks(s, &ALL, 20, 0.4, b.len(), 0, k).unwrap();
        let mb = micro_batch_gradients(&model, b, &masks, &cfg).unwrap();
        for (acc, g) in summed.iter_mut().zip(mb.grads) {
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        masks_used.push(masks);
    }

    // Joint graph: both micro-batches share one set of parameter handles and
    // their losses are added before a single backward pass.
    let mut g = Graph::new();
    let v = model.bind(&mut g, true);
    let mut total = None;
    for (b, masks) in batches.iter().zip(&masks_used) {
        let patches: Vec<Tensor> = model.patch_inputs(b, &ALL).unwrap().into_iter().map(|(_, t)| t).collect();
        let rec = model.forward(&mut g, &v, &patches, masks).unwrap();
        let targets: Vec<Var> = ALL
            .iter()
            .map(|&c| {
                let data: Vec<f64> = b.iter().flat_map(|s| s.channel(c).iter().copied()).collect();
                g.constant(Tensor::new(vec![b.len(), 1000], data).unwrap())
            })
            .collect();
        let l = total_loss(&mut g, &rec.signals, &targets, None, &cfg).unwrap().total;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let grads = g.backward(total.unwrap()).unwrap();
    for (i, &var) in v.iter().enumerate() {
        let joint = grads.wrt(var);
        for (a, b) in joint.data().iter().zip(&summed[i]) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "param {} differs: {a} vs {b}", model.params().name(i));
        }
    }
}

fn quick_train(samples: &[&SignalSample], seed: u64, epochs: usize) -> PretrainOutcome {
    let cfg = TrainConfig {
        batch_size: 4,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let model = init_model(small_config(), samples, seed).unwrap();
    pretrain(samples, model, &cfg, &MaskSchedule::default()).unwrap()
}

#[test]
fn schedule_consumes_ten_micro_batches_per_update() {
    let recs = records(48);
    let out = quick_train(&recs, 1, 2);
    let schedule = MaskSchedule::default();
    assert_eq!(schedule.len(), 10);
    assert_eq!(out.history.len(), 24);
    for (k, h) in out.history.iter().enumerate() {
        assert_eq!(h.micro_batch, k);
        assert_eq!(h.update, (k / 10) as u64);
        assert_eq!(&h.strategy, &schedule.strategies[k % 10]);
    }
    // two full windows plus the final partial one
    assert_eq!(out.updates, 3);
    assert_eq!(out.epoch_losses.len(), 2);
}

#[test]
fn pretraining_is_deterministic() {
    let recs = records(24);
    let a = quick_train(&recs, 7, 1);
    let b = quick_train(&recs, 7, 1);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params().checksum(), b.model.params().checksum());
    let c = quick_train(&recs, 8, 1);
    assert_ne!(a.history, c.history);
}

#[test]
fn schedule_length_must_match_accumulation() {
    let recs = records(4);
    let cfg = TrainConfig {
        accumulation_steps: 5,
        ..TrainConfig::default()
    };
    let model = init_model(small_config(), &recs, 0).unwrap();
    let r = pretrain(&recs, model, &cfg, &MaskSchedule::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_names_the_strategy() {
    let mut bad = records(4).into_iter().cloned().collect::<Vec<_>>();
    bad[0].channel_mut(Channel::Ecg)[3] = f64::NAN;
    let refs: Vec<&SignalSample> = bad.iter().collect();
    let model = Model::new(small_config(), &[0.1; 3], 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    match pretrain(&refs, model, &cfg, &MaskSchedule::default()) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("inter"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn toy_run_reduces_loss() {
    let recs = records(200);
    let cfg = TrainConfig {
        batch_size: 20,
        epochs: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = init_model(ModelConfig::desk(), &recs, 3).unwrap();
    let out = pretrain(&recs, model, &cfg, &MaskSchedule::default()).unwrap();
    assert!(out.updates >= 30, "{} updates", out.updates);
    let (first, last) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn single_signal_baseline_shape() {
    let recs = records(20);
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 1,
        ..TrainConfig::default()
    };
    let b = train_baseline(&BaselineKind::SingleSsl(Channel::Ppg), &recs, &small_config(), &cfg).unwrap();
    let Baseline::SingleSsl(out) = b else { panic!("wrong baseline kind") };
    let names = out.model.params().names();
    assert_eq!(out.model.channels(), [Channel::Ppg]);
    assert!(names.iter().all(|n| !n.ends_with(".type")));
    assert!(names.iter().all(|n| !n.contains(".cross.")));
    let decoders: std::collections::BTreeSet<&str> = names
        .iter()
        .filter_map(|n| n.strip_prefix("decoder.").and_then(|r| r.split('.').next()))
        .collect();
    assert_eq!(decoders.into_iter().collect::<Vec<_>>(), ["ppg"]);
    assert!(out.history.iter().all(|h| h.strategy == MaskStrategy::Inter));
}

#[test]
fn supervised_baseline_updates_every_batch() {
    let recs = records(60);
    let cfg = SupervisedConfig {
        batch_size: 16,
        epochs: 3,
        min_updates: 0,
        ..SupervisedConfig::default()
    };
    let model = init_model(small_config(), &recs, 0).unwrap();
    let labelled = recs.iter().filter(|s| ProbeTask::Sbp.target(&s.labels).is_some()).count();
    let sl = train_supervised(model.clone(), ProbeTask::Sbp, &ALL, &recs, &cfg).unwrap();
    assert_eq!(sl.updates as usize, 3 * labelled.div_ceil(16));
    assert_eq!(sl.losses.len(), 3);
    assert_ne!(sl.model.params().checksum(), model.params().checksum());
    let preds = sl.predict(&recs[..7]).unwrap();
    assert_eq!(preds.len(), 7);
    assert!(preds.iter().all(|p| p.is_finite()));
}

#[test]
fn supervised_hypotension_gives_one_logit_per_sample() {
    let recs = records(200);
    let pos = recs.iter().filter(|s| s.labels.hypotensive).count();
    assert!(pos > 0 && pos < recs.len(), "cohort needs both classes");
    let cfg = SupervisedConfig {
        epochs: 1,
        min_updates: 4,
        ..SupervisedConfig::default()
    };
    let model = init_model(small_config(), &recs, 0).unwrap();
    let sl = train_supervised(model, ProbeTask::Hypotension, &[Channel::Ecg, Channel::Ppg], &recs, &cfg).unwrap();
    assert_eq!(sl.predict(&recs[..5]).unwrap().len(), 5);
    let one_class: Vec<&SignalSample> = recs.iter().copied().filter(|s| !s.labels.hypotensive).collect();
    let model = init_model(small_config(), &recs, 0).unwrap();
    let r = train_supervised(model, ProbeTask::Hypotension, &ALL, &one_class, &cfg);
    assert!(matches!(r, Err(Error::Data(_))));
}
