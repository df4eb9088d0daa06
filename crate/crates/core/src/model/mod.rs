//! Joint transformer encoder over the visible tokens of every signal, a
//! latent projection, and one decoder per signal that merges mask tokens
//! back in and reconstructs the full record.

mod config;
pub(crate) mod params;

pub use config::ModelConfig;
pub use params::ParamStore;

/// Reduction of encoder tokens to one vector per record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Channel, SignalSample};
use crate::embedding::{embed_signal, init_type_embedding, patchify_batch, positional_encoding};
use crate::error::{config_err, shape_err, Error, Result};
use crate::masking::MaskIndex;
use params::glorot;

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    attn: AttnIdx,
    ln1: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2: (usize, usize),
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    mask_token: usize,
    first: AttnIdx,
    first_ln: (usize, usize),
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    proj: Vec<usize>,
    type_embed: Vec<Option<usize>>,
    encoder: Vec<BlockIdx>,
    latent_w: usize,
    latent_b: usize,
    decoders: Vec<DecoderIdx>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = glorot(rows, cols, self.rng);
        self.store.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, Tensor::zeros(shape))
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        let g = self.store.push(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
        let b = self.zeros(format!("{prefix}.bias"), &[dim]);
        (g, b)
    }

    fn attention(&mut self, prefix: &str, dim: usize) -> AttnIdx {
        let lin = |b: &mut Self, n: &str| {
            (
                b.weight(format!("{prefix}.{n}.weight"), dim, dim),
                b.zeros(format!("{prefix}.{n}.bias"), &[dim]),
            )
        };
        let (wq, bq) = lin(self, "query");
        let (wk, bk) = lin(self, "key");
        let (wv, bv) = lin(self, "value");
        let (wo, bo) = lin(self, "out");
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn block(&mut self, prefix: &str, dim: usize, hidden: usize) -> BlockIdx {
        let attn = self.attention(&format!("{prefix}.attn"), dim);
        let ln1 = self.layer_norm(&format!("{prefix}.norm1"), dim);
        let w1 = self.weight(format!("{prefix}.ffn1.weight"), dim, hidden);
        let b1 = self.zeros(format!("{prefix}.ffn1.bias"), &[hidden]);
        let w2 = self.weight(format!("{prefix}.ffn2.weight"), hidden, dim);
        let b2 = self.zeros(format!("{prefix}.ffn2.bias"), &[dim]);
        let ln2 = self.layer_norm(&format!("{prefix}.norm2"), dim);
        BlockIdx { attn, ln1, w1, b1, w2, b2, ln2 }
    }
}

fn build(cfg: &ModelConfig, type_std: &[f64], rng: &mut ChaCha8Rng) -> Result<(ParamStore, Layout)> {
    let (j, p) = (cfg.num_patches()?, cfg.patch_len()?);
    let (d, dd) = (cfg.model_dim, cfg.decoder_dim);
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let mut proj = Vec::new();
    let mut type_embed = Vec::new();
    for (i, c) in cfg.channels.iter().enumerate() {
        proj.push(b.weight(format!("embed.{}.projection", c.name()), p, d));
        type_embed.push(if cfg.type_embedding {
            let t = init_type_embedding(j, d, type_std[i], b.rng);
            Some(b.store.push(format!("embed.{}.type", c.name()), t))
        } else {
            None
        });
    }
    let encoder = (0..cfg.encoder_depth)
        .map(|l| b.block(&format!("encoder.{l}"), d, cfg.ffn_mult * d))
        .collect();
    let latent_w = b.weight("latent.weight".into(), d, dd);
    let latent_b = b.zeros("latent.bias".into(), &[dd]);
    let mut decoders = Vec::new();
    for c in &cfg.channels {
        let pre = format!("decoder.{}", c.name());
        let mt = Tensor::randn(&[1, dd], 0.02, b.rng);
        let mask_token = b.store.push(format!("{pre}.mask_token"), mt);
        let kind = if cfg.cross_attention { "cross" } else { "self" };
        let first = b.attention(&format!("{pre}.{kind}.attn"), dd);
        let first_ln = b.layer_norm(&format!("{pre}.{kind}.norm"), dd);
        let blocks = (0..cfg.decoder_depth)
            .map(|l| b.block(&format!("{pre}.block.{l}"), dd, cfg.ffn_mult * dd))
            .collect();
        let head_w = b.weight(format!("{pre}.head.weight"), dd, p);
        let head_b = b.zeros(format!("{pre}.head.bias"), &[p]);
        decoders.push(DecoderIdx {
            mask_token,
            first,
            first_ln,
            blocks,
            head_w,
            head_b,
        });
    }
    let layout = Layout {
        proj,
        type_embed,
        encoder,
        latent_w,
        latent_b,
        decoders,
    };
    Ok((b.store, layout))
}

/// Graph handles for every parameter, in [`ParamStore`] order.
pub type Bound = Vec<Var>;

/// Output of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Per model signal, `[B, J * patch_len]`.
    pub signals: Vec<Var>,
    /// Projected latent of the visible tokens, `[B, N, decoder_dim]`.
    pub latent: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    enc_rho: Tensor,
    dec_rho: Tensor,
}

impl Model {
    /// Fresh model. `type_std[i]` is the init std of signal `i`'s type
    /// embedding (ignored without type embedding).
    pub fn new(config: ModelConfig, type_std: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        if config.type_embedding && type_std.len() != config.channels.len() {
            return Err(config_err!(
                "{} type-embedding scales for {} signals",
                type_std.len(),
                config.channels.len()
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&config, type_std, &mut rng)?;
        Self::assemble(config, params, layout)
    }

    /// Model with the given parameter values; names and shapes must match
    /// the architecture of `config`.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let scales = vec![1.0; config.channels.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut store, layout) = build(&config, &scales, &mut rng)?;
        store.load_from(params)?;
        Self::assemble(config, store, layout)
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Result<Self> {
        let j = config.num_patches()?;
        let enc_rho = positional_encoding(j, config.model_dim)?;
        let dec_rho = positional_encoding(j, config.decoder_dim)?;
        Ok(Model {
            config,
            params,
            layout,
            enc_rho,
            dec_rho,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn channels(&self) -> &[Channel] {
        &self.config.channels
    }

    pub fn num_patches(&self) -> usize {
        self.enc_rho.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.config.patch_len().expect("validated")
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Indices of the encoder-side parameters (embedding and encoder).
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| {
                let n = self.params.name(i);
                n.starts_with("embed.") || n.starts_with("encoder.")
            })
            .collect()
    }

    fn row(&self, c: Channel) -> Result<usize> {
        self.config
            .channels
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| config_err!("model was not built for signal {c}"))
    }

    /// Tokens `[B, J, d]` for model signal `row` from patches `[B, J, p]`.
    pub fn embed_tokens(&self, g: &mut Graph, v: &Bound, row: usize, patches: Var) -> Result<Var> {
        let rho = g.constant(self.enc_rho.clone());
        let t = self.layout.type_embed[row].map(|i| v[i]);
        embed_signal(g, patches, v[self.layout.proj[row]], t, rho)
    }

    fn attention(&self, g: &mut Graph, v: &Bound, a: &AttnIdx, xq: Var, xkv: Var, heads: usize) -> Result<Var> {
        let (sq, sk) = (g.shape(xq).to_vec(), g.shape(xkv).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err!("attention between {:?} and {:?}", sq, sk));
        }
        let (b, tq, tk, dim) = (sq[0], sq[1], sk[1], sq[2]);
        let dh = dim / heads;
        let q = g.linear(xq, v[a.wq], Some(v[a.bq]))?;
        let k = g.linear(xkv, v[a.wk], Some(v[a.bk]))?;
        let val = g.linear(xkv, v[a.wv], Some(v[a.bv]))?;
        let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, t, heads, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, t, dh])
        };
        let q = split(g, q, tq)?;
        let k = split(g, k, tk)?;
        let val = split(g, val, tk)?;
        let s = g.batch_matmul(q, k, true)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let w = g.softmax(s, 2)?;
        let o = g.batch_matmul(w, val, false)?;
        let o = g.reshape(o, &[b, heads, tq, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, tq, dim])?;
        g.linear(o, v[a.wo], Some(v[a.bo]))
    }

    /// Post-norm transformer block.
    fn block(&self, g: &mut Graph, v: &Bound, blk: &BlockIdx, x: Var, heads: usize) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        let a = self.attention(g, v, &blk.attn, x, x, heads)?;
        let h = g.add(x, a)?;
        let h = g.layer_norm(h, v[blk.ln1.0], v[blk.ln1.1], eps)?;
        let f = g.linear(h, v[blk.w1], Some(v[blk.b1]))?;
        let f = g.gelu(f)?;
        let f = g.linear(f, v[blk.w2], Some(v[blk.b2]))?;
        let o = g.add(h, f)?;
        g.layer_norm(o, v[blk.ln2.0], v[blk.ln2.1], eps)
    }

    /// Encoder stack over tokens `[B, N, d]`; identity at depth zero.
    pub fn encode(&self, g: &mut Graph, v: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] == 0 || s[2] != self.config.model_dim {
            return Err(shape_err!(
                "encoder input {:?}, expected [B, N >= 1, {}]",
                s,
                self.config.model_dim
            ));
        }
        let mut h = x;
        for blk in &self.layout.encoder {
            h = self.block(g, v, blk, h, self.config.encoder_heads)?;
        }
        Ok(h)
    }

    /// Linear map of encoder outputs to the decoder width.
    pub fn project_latent(&self, g: &mut Graph, v: &Bound, enc: Var) -> Result<Var> {
        g.linear(enc, v[self.layout.latent_w], Some(v[self.layout.latent_b]))
    }

    /// Contiguous segments of `e` along the token axis with the given
    /// lengths; empty segments are `None`.
    pub fn split_latent(g: &mut Graph, e: Var, counts: &[usize]) -> Result<Vec<Option<Var>>> {
        let n = g.shape(e).get(1).copied().unwrap_or(0);
        if counts.iter().sum::<usize>() != n {
            return Err(Error::Internal(format!(
                "segment lengths {counts:?} do not cover {n} latent tokens"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(counts.len());
        for &c in counts {
            out.push(if c == 0 { None } else { Some(g.slice(e, 1, start, start + c)?) });
            start += c;
        }
        Ok(out)
    }

    /// Places each sample's visible latents at their patch positions and the
    /// mask token everywhere else, then adds the decoder positional encoding.
    /// Returns `[B, J, decoder_dim]`.
    pub fn merge_with_mask(
        &self,
        g: &mut Graph,
        v: &Bound,
        row: usize,
        e_i: Option<Var>,
        masks: &[MaskIndex],
    ) -> Result<Var> {
        let (j, dd, b) = (self.num_patches(), self.config.decoder_dim, masks.len());
        let visible = e_i.map_or(0, |e| g.shape(e)[1]);
        let mut index = Vec::with_capacity(b);
        for m in masks {
            let mut k = 0;
            let mut ix = Vec::with_capacity(j);
            for &masked in &m.rows[row] {
                if masked {
                    ix.push(visible);
                } else {
                    ix.push(k);
                    k += 1;
                }
            }
            if k != visible {
                return Err(Error::Internal(format!(
                    "mask leaves {k} visible patches but {visible} latents were given"
                )));
            }
            index.push(ix);
        }
        let mu = g.broadcast_to(v[self.layout.decoders[row].mask_token], &[b, 1, dd])?;
        let pool = match e_i {
            Some(e) => g.concat(&[e, mu], 1)?,
            None => mu,
        };
        let merged = g.gather_rows(pool, index)?;
        let rho = g.constant(self.dec_rho.clone());
        g.add_broadcast(merged, rho)
    }

    /// Reconstruction `[B, J * patch_len]` of model signal `row` from its
    /// merged sequence and the joint visible latent `e_all`.
    pub fn decode_signal(&self, g: &mut Graph, v: &Bound, row: usize, merged: Var, e_all: Var) -> Result<Var> {
        if g.shape(e_all).get(1).copied().unwrap_or(0) == 0 {
            return Err(config_err!("decoding needs at least one visible token"));
        }
        let dec = &self.layout.decoders[row];
        let heads = self.config.decoder_heads;
        let kv = if self.config.cross_attention { e_all } else { merged };
        let a = self.attention(g, v, &dec.first, merged, kv, heads)?;
        let h = g.add(merged, a)?;
        let mut h = g.layer_norm(h, v[dec.first_ln.0], v[dec.first_ln.1], self.config.layer_norm_eps)?;
        for blk in &dec.blocks {
            h = self.block(g, v, blk, h, heads)?;
        }
        let out = g.linear(h, v[dec.head_w], Some(v[dec.head_b]))?;
        let s = g.shape(out).to_vec();
        g.reshape(out, &[s[0], s[1] * s[2]])
    }

    fn check_inputs(&self, patches: &[Tensor], masks: &[MaskIndex]) -> Result<usize> {
        let (j, p) = (self.num_patches(), self.patch_len());
        if patches.len() != self.config.channels.len() {
            return Err(shape_err!(
                "{} patch tensors for {} model signals",
                patches.len(),
                self.config.channels.len()
            ));
        }
        let b = masks.len();
        for t in patches {
            if t.shape() != [b, j, p] {
                return Err(shape_err!("patches {:?}, expected {:?}", t.shape(), [b, j, p]));
            }
        }
        for m in masks {
            if m.channels != self.config.channels || m.num_patches() != j {
                return Err(shape_err!(
                    "mask over {:?} x {} does not match the model",
                    m.channels,
                    m.num_patches()
                ));
            }
        }
        Ok(b)
    }

    /// Full masked reconstruction for a batch. `patches[r]` is `[B, J, p]`
    /// for model signal `r`; `masks[b]` applies to sample `b`. Every mask in
    /// the batch must leave the same number of patches visible per signal.
    pub fn forward(&self, g: &mut Graph, v: &Bound, patches: &[Tensor], masks: &[MaskIndex]) -> Result<Reconstruction> {
        let b = self.check_inputs(patches, masks)?;
        if b == 0 {
            return Err(shape_err!("empty batch"));
        }
        let rows = self.config.channels.len();
        let mut counts = Vec::with_capacity(rows);
        let mut tokens = Vec::new();
        for r in 0..rows {
            let vis: Vec<Vec<usize>> = masks.iter().map(|m| m.visible(r)).collect();
            let n = vis[0].len();
            if vis.iter().any(|x| x.len() != n) {
                return Err(shape_err!("masks in a batch leave different patch counts visible"));
            }
            counts.push(n);
            if n == 0 {
                continue;
            }
            let p = g.constant(patches[r].clone());
            let z = self.embed_tokens(g, v, r, p)?;
            tokens.push(if n == self.num_patches() { z } else { g.gather_rows(z, vis)? });
        }
        if tokens.is_empty() {
            return Err(config_err!("every signal is fully masked; nothing to encode"));
        }
        let x = g.concat(&tokens, 1)?;
        let enc = self.encode(g, v, x)?;
        let latent = self.project_latent(g, v, enc)?;
        let parts = Self::split_latent(g, latent, &counts)?;
        let mut signals = Vec::with_capacity(rows);
        for (r, e_i) in parts.into_iter().enumerate() {
            let merged = self.merge_with_mask(g, v, r, e_i, masks)?;
            signals.push(self.decode_signal(g, v, r, merged, latent)?);
        }
        Ok(Reconstruction { signals, latent })
    }

    /// Encoder output `[B, N, d]` for unmasked inputs of the listed signals
    /// only; absent signals contribute no tokens.
    pub fn encode_signals(&self, g: &mut Graph, v: &Bound, inputs: &[(Channel, Tensor)]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(config_err!("no inference signals given"));
        }
        let mut tokens = Vec::with_capacity(inputs.len());
        for (c, t) in inputs {
            let r = self.row(*c)?;
            let p = g.constant(t.clone());
            tokens.push(self.embed_tokens(g, v, r, p)?);
        }
        let x = g.concat(&tokens, 1)?;
        self.encode(g, v, x)
    }

    /// Mean-pooled encoder output `[B, d]` for `samples` using `signals`.
    pub fn pooled_embedding(&self, samples: &[&SignalSample], signals: &[Channel]) -> Result<Tensor> {
        self.pooled_embedding_with(samples, signals, Pooling::Mean)
    }

    pub fn pooled_embedding_with(&self, samples: &[&SignalSample], signals: &[Channel], pooling: Pooling) -> Result<Tensor> {
        let inputs = self.patch_inputs(samples, signals)?;
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let enc = self.encode_signals(&mut g, &v, &inputs)?;
        let pooled = match pooling {
            Pooling::Mean => g.mean_axis(enc, 1)?,
            Pooling::FirstToken => {
                let first = g.slice(enc, 1, 0, 1)?;
                g.reshape(first, &[samples.len(), self.config.model_dim])?
            }
        };
        Ok(g.value(pooled).clone())
    }

    /// Patch tensors `[B, J, p]` of the listed signals.
    pub fn patch_inputs(&self, samples: &[&SignalSample], signals: &[Channel]) -> Result<Vec<(Channel, Tensor)>> {
        let p = self.patch_len();
        signals
            .iter()
            .map(|&c| {
                let rows: Vec<&[f64]> = samples.iter().map(|s| s.channel(c)).collect();
                let t = patchify_batch(&rows, p)?;
                if t.shape().get(1) != Some(&self.num_patches()) {
                    return Err(shape_err!("records of {} samples do not fit the model", rows.first().map_or(0, |r| r.len())));
                }
                Ok((c, t))
            })
            .collect()
    }

    /// Value-only reconstruction, one `Vec` per model signal per sample.
    pub fn reconstruct(&self, samples: &[&SignalSample], masks: &[MaskIndex]) -> Result<Vec<Vec<Vec<f64>>>> {
        let inputs = self.patch_inputs(samples, &self.config.channels)?;
        let patches: Vec<Tensor> = inputs.into_iter().map(|(_, t)| t).collect();
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let rec = self.forward(&mut g, &v, &patches, masks)?;
        let n = self.num_patches() * self.patch_len();
        Ok(rec
            .signals
            .iter()
            .map(|&s| g.value(s).data().chunks(n).map(<[f64]>::to_vec).collect())
            .collect())
    }
}
