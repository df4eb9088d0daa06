use physmae_core::autodiff::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use physmae_core::data::Channel;
use physmae_core::embedding::{positional_encoding, PatchConfig};
use physmae_core::masking::{sample_mask, MaskIndex, MaskStrategy};
use physmae_core::model::{Model, ModelConfig};
use physmae_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL: [Channel; 3] = Channel::ALL;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(cfg: ModelConfig, seed: u64) -> Model {
    let n = cfg.channels.len();
    Model::new(cfg, &vec![0.5; n], seed).unwrap()
}

fn patches(m: &Model, b: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let shape = [b, m.num_patches(), m.patch_len()];
    (0..m.channels().len()).map(|_| Tensor::randn(&shape, 1.0, &mut r)).collect()
}

fn mask_with(rows: Vec<Vec<bool>>) -> MaskIndex {
    MaskIndex {
        channels: ALL.to_vec(),
        rows,
        strategy: MaskStrategy::Inter,
        ratio: 0.0,
    }
}

fn run_forward(m: &Model, p: &[Tensor], masks: &[MaskIndex]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let rec = m.forward(&mut g, &v, p, masks).unwrap();
    rec.signals.iter().map(|&s| g.value(s).clone()).collect()
}

#[test]
fn paper_config_encoder_shapes() {
    let m = model(ModelConfig::paper(), 0);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    for n in [36, 40] {
        let x = g.constant(Tensor::randn(&[1, n, 256], 1.0, &mut rng(n as u64)));
        let y = m.encode(&mut g, &v, x).unwrap();
        assert_eq!(g.shape(y), [1, n, 256]);
        assert!(g.value(y).is_finite());
    }
    let empty = g.constant(Tensor::zeros(&[1, 0, 256]));
    assert!(matches!(m.encode(&mut g, &v, empty), Err(Error::Shape(_))));
}

#[test]
fn paper_config_intra_forward_token_count() {
    let m = model(ModelConfig::paper(), 1);
    let mask = sample_mask(&MaskStrategy::Intra, &ALL, 20, 0.4, &mut rng(3)).unwrap();
    assert_eq!(mask.total_visible(), 36);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let rec = m.forward(&mut g, &v, &patches(&m, 1, 4), &[mask]).unwrap();
    assert_eq!(g.shape(rec.latent), [1, 36, 128]);
    let parts = Model::split_latent(&mut g, rec.latent, &[12, 12, 12]).unwrap();
    for p in parts {
        assert_eq!(g.shape(p.unwrap()), [1, 12, 128]);
    }
    for s in rec.signals {
        assert_eq!(g.shape(s), [1, 1000]);
    }
}

#[test]
fn zero_depth_encoder_is_identity() {
    let cfg = ModelConfig {
        encoder_depth: 0,
        ..ModelConfig::toy()
    };
    let m = model(cfg, 0);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let t = Tensor::randn(&[2, 7, 8], 1.0, &mut rng(5));
    let x = g.constant(t.clone());
    let y = m.encode(&mut g, &v, x).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn split_latent_partitions_and_reassembles() {
    let mut g = Graph::new();
    let t = Tensor::randn(&[2, 9, 4], 1.0, &mut rng(6));
    let e = g.constant(t.clone());
    let parts = Model::split_latent(&mut g, e, &[0, 5, 4]).unwrap();
    assert!(parts[0].is_none());
    let vars: Vec<Var> = parts.into_iter().flatten().collect();
    let back = g.concat(&vars, 1).unwrap();
    assert_eq!(g.value(back), &t);
    assert!(matches!(Model::split_latent(&mut g, e, &[4, 4]), Err(Error::Internal(_))));
}

fn merged(m: &Model, row: usize, mask: &MaskIndex, e: Option<&Tensor>) -> Tensor {
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let ev = e.map(|t| g.constant(t.clone()));
    let out = m.merge_with_mask(&mut g, &v, row, ev, std::slice::from_ref(mask)).unwrap();
    g.value(out).clone()
}

#[test]
fn merge_places_latents_and_mask_tokens() {
    let m = model(ModelConfig::desk(), 2);
    let (j, dd) = (20, 32);
    let rho = positional_encoding(j, dd).unwrap();
    let mu = m.params().by_name("decoder.ppg.mask_token").unwrap().data().to_vec();

    let e = Tensor::randn(&[1, j, dd], 1.0, &mut rng(7));
    let out = merged(&m, 1, &MaskIndex::none(&ALL, j), Some(&e));
    for (k, &o) in out.data().iter().enumerate() {
        assert!((o - (e.data()[k] + rho.data()[k])).abs() < 1e-15);
    }

    let full = mask_with(vec![vec![false; j], vec![true; j], vec![false; j]]);
    let out = merged(&m, 1, &full, None);
    for pos in 0..j {
        for k in 0..dd {
            assert!((out.data()[pos * dd + k] - (mu[k] + rho.data()[pos * dd + k])).abs() < 1e-15);
        }
    }

    let intra = sample_mask(&MaskStrategy::Intra, &ALL, j, 0.4, &mut rng(8)).unwrap();
    let vis = intra.visible(1);
    let e = Tensor::randn(&[1, vis.len(), dd], 1.0, &mut rng(9));
    let out = merged(&m, 1, &intra, Some(&e));
    let is_mu = |pos: usize| (0..dd).all(|k| (out.data()[pos * dd + k] - mu[k] - rho.data()[pos * dd + k]).abs() < 1e-15);
    assert_eq!((0..j).filter(|&p| is_mu(p)).count(), 8);
    for (i, &pos) in vis.iter().enumerate() {
        for k in 0..dd {
            let want = e.data()[i * dd + k] + rho.data()[pos * dd + k];
            assert!((out.data()[pos * dd + k] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn merge_rejects_count_mismatch() {
    let m = model(ModelConfig::toy(), 0);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let e = g.constant(Tensor::zeros(&[1, 3, 4]));
    let r = m.merge_with_mask(&mut g, &v, 0, Some(e), &[MaskIndex::none(&ALL, 4)]);
    assert!(matches!(r, Err(Error::Internal(_))));
}

#[test]
fn decode_length_and_empty_latent() {
    let m = model(ModelConfig::desk(), 3);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let merged = g.constant(Tensor::randn(&[2, 20, 32], 1.0, &mut rng(10)));
    let e_all = g.constant(Tensor::randn(&[2, 11, 32], 1.0, &mut rng(11)));
    let s = m.decode_signal(&mut g, &v, 2, merged, e_all).unwrap();
    assert_eq!(g.shape(s), [2, 1000]);
    let empty = g.constant(Tensor::zeros(&[2, 0, 32]));
    assert!(matches!(m.decode_signal(&mut g, &v, 2, merged, empty), Err(Error::Config(_))));
}

#[test]
fn forward_is_deterministic_and_finite() {
    let m = model(ModelConfig::desk(), 4);
    let p = patches(&m, 2, 12);
    let masks: Vec<MaskIndex> = (0..2)
        .map(|i| sample_mask(&MaskStrategy::Inter, &ALL, 20, 0.4, &mut rng(20 + i)).unwrap())
        .collect();
    let a = run_forward(&m, &p, &masks);
    let b = run_forward(&model(ModelConfig::desk(), 4), &p, &masks);
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.shape(), [2, 1000]);
        assert!(x.is_finite());
        assert_eq!(x.data(), y.data());
    }
    let toy = model(ModelConfig::toy(), 0);
    for s in run_forward(&toy, &patches(&toy, 1, 1), &[MaskIndex::none(&ALL, 4)]) {
        assert_eq!(s.shape(), [1, 20]);
        assert!(s.is_finite());
    }
}

#[test]
fn fully_masked_input_is_rejected() {
    let m = model(ModelConfig::toy(), 0);
    let mut g = Graph::new();
    let v = m.bind(&mut g, false);
    let all = mask_with(vec![vec![true; 4]; 3]);
    let r = m.forward(&mut g, &v, &patches(&m, 1, 0), &[all]);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn signal_masked_abp_ignores_abp_input() {
    let m = model(ModelConfig::desk(), 5);
    let mask = sample_mask(&MaskStrategy::signal(&[Channel::Abp]), &ALL, 20, 0.4, &mut rng(0)).unwrap();
    let mut p = patches(&m, 1, 13);
    let a = run_forward(&m, &p, std::slice::from_ref(&mask));
    p[2] = Tensor::randn(p[2].shape(), 50.0, &mut rng(99));
    let b = run_forward(&m, &p, std::slice::from_ref(&mask));
    assert_eq!(a[2].data(), b[2].data());
    assert_eq!(a[2].shape(), [1, 1000]);
}

#[test]
fn type_embedding_changes_encoder_output() {
    let m = model(ModelConfig::desk(), 6);
    let mut zeroed = m.clone();
    for c in ALL {
        let i = zeroed.params().names().iter().position(|n| *n == format!("embed.{}.type", c.name())).unwrap();
        zeroed.params_mut().get_mut(i).data_mut().fill(0.0);
    }
    let p = patches(&m, 1, 14);
    let enc = |model: &Model| {
        let mut g = Graph::new();
        let v = model.bind(&mut g, false);
        let ins: Vec<(Channel, Tensor)> = ALL.iter().copied().zip(p.iter().cloned()).collect();
        let e = model.encode_signals(&mut g, &v, &ins).unwrap();
        g.value(e).clone()
    };
    let (a, b) = (enc(&m), enc(&zeroed));
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "type embedding had no effect ({diff})");
}

#[test]
fn without_cross_attention_keeps_shapes() {
    let cfg = ModelConfig {
        cross_attention: false,
        ..ModelConfig::desk()
    };
    let m = model(cfg, 7);
    assert!(m.params().names().iter().any(|n| n == "decoder.ecg.self.attn.query.weight"));
    assert!(!m.params().names().iter().any(|n| n.contains(".cross.")));
    let mask = sample_mask(&MaskStrategy::Intra, &ALL, 20, 0.4, &mut rng(1)).unwrap();
    for s in run_forward(&m, &patches(&m, 2, 15), &[mask.clone(), mask]) {
        assert_eq!(s.shape(), [2, 1000]);
    }
}

fn block_params(d: usize, hidden: usize) -> usize {
    4 * (d * d + d) + 2 * 2 * d + d * hidden + hidden + hidden * d + d
}

#[test]
fn parameter_count_matches_architecture() {
    for cfg in [ModelConfig::toy(), ModelConfig::desk(), ModelConfig::paper()] {
        let (j, p) = (cfg.num_patches().unwrap(), cfg.patch_len().unwrap());
        let (d, dd, f) = (cfg.model_dim, cfg.decoder_dim, cfg.ffn_mult);
        let embed = 3 * (p * d + j * d);
        let encoder = cfg.encoder_depth * block_params(d, f * d);
        let latent = d * dd + dd;
        let decoder = dd + 4 * (dd * dd + dd) + 2 * dd + cfg.decoder_depth * block_params(dd, f * dd) + dd * p + p;
        let want = embed + encoder + latent + 3 * decoder;
        let a = model(cfg.clone(), 0);
        let b = model(cfg, 1);
        assert_eq!(a.params().num_scalars(), want);
        assert_eq!(a.params().names(), b.params().names());
        assert_eq!(b.params().num_scalars(), want);
    }
}

#[test]
fn from_params_reproduces_the_model() {
    let m = model(ModelConfig::toy(), 8);
    let copy = Model::from_params(m.config().clone(), m.params()).unwrap();
    assert_eq!(copy.params().checksum(), m.params().checksum());
    let p = patches(&m, 1, 16);
    let mask = [MaskIndex::none(&ALL, 4)];
    assert_eq!(run_forward(&m, &p, &mask)[0].data(), run_forward(&copy, &p, &mask)[0].data());
}

#[test]
fn toy_model_full_gradient_check() {
    let m = model(ModelConfig::toy(), 9);
    let p = patches(&m, 2, 17);
    let masks = vec![
        mask_with(vec![
            vec![false, true, false, true],
            vec![true, false, false, true],
            vec![false, false, true, true],
        ]),
        mask_with(vec![
            vec![true, false, true, false],
            vec![false, true, true, false],
            vec![true, true, false, false],
        ]),
    ];
    let weights: Vec<Tensor> = (0..3).map(|i| Tensor::uniform(&[2, 20], 1.0, &mut rng(30 + i))).collect();
    let inputs: Vec<Tensor> = m.params().tensors().to_vec();
    let rep = grad_check(
        |g, vars| {
            let rec = m.forward(g, &vars.to_vec(), &p, &masks)?;
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
            Ok(total.unwrap())
        },
        &inputs,
        // Key biases shift every attention score of a query equally, so
        // their true gradient is zero and only round-off remains.
        GradCheckOptions { floor: 1e-4, ..GradCheckOptions::with_tol(1e-4) },
    );
    assert!(rep.passed, "max rel err {:.3e} at {:?} ({:?})", rep.max_rel_error, rep.worst, rep.diagnostic);
    assert_eq!(rep.checked, m.params().num_scalars());
}

fn strategy_from(k: usize) -> MaskStrategy {
    match k {
        0 => MaskStrategy::Inter,
        1 => MaskStrategy::Intra,
        2 => MaskStrategy::signal(&[Channel::Ecg]),
        3 => MaskStrategy::signal(&[Channel::Ppg, Channel::Abp]),
        _ => MaskStrategy::signal(&[Channel::Ecg, Channel::Abp]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shape_closure(
        patch_seconds in prop::sample::select(vec![0.02, 0.05, 0.1]),
        r in 0.1f64..0.9,
        k in 0usize..5,
        cross in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let cfg = ModelConfig {
            patch: PatchConfig { patch_seconds, ..ModelConfig::toy().patch },
            cross_attention: cross,
            ..ModelConfig::toy()
        };
        let m = model(cfg, seed);
        let j = m.num_patches();
        let mask = sample_mask(&strategy_from(k), &ALL, j, r, &mut rng(seed));
        // Ratios that round to zero or all patches on a short grid are rejected.
        prop_assume!(mask.is_ok());
        let mask = mask.unwrap();
        for s in run_forward(&m, &patches(&m, 1, seed), &[mask]) {
            prop_assert_eq!(s.shape(), &[1, 20][..]);
            prop_assert!(s.is_finite());
        }
    }

    /// Visible-position placement depends only on which patches are masked,
    /// so a mask rebuilt from a shuffled list of its visible positions gives
    /// the same reconstruction.
    #[test]
    fn reconstruction_depends_on_positions_not_order(seed in 0u64..1000) {
        let m = model(ModelConfig::toy(), 3);
        let mask = sample_mask(&MaskStrategy::Inter, &ALL, 4, 0.5, &mut rng(seed)).unwrap();
        let mut rebuilt = vec![vec![true; 4]; 3];
        for (r, row) in rebuilt.iter_mut().enumerate() {
            let mut vis = mask.visible(r);
            vis.reverse();
            for i in vis {
                row[i] = false;
            }
        }
        let rebuilt = MaskIndex { rows: rebuilt, ..mask.clone() };
        let p = patches(&m, 1, seed);
        let a = run_forward(&m, &p, &[mask]);
        let b = run_forward(&m, &p, &[rebuilt]);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.data(), y.data());
        }
    }
}
