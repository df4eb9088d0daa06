//! Patching, per-signal projection, signal-type embedding and sinusoidal
//! positional encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{FS_HZ, SAMPLE_SECONDS};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub fs_hz: f64,
    pub patch_seconds: f64,
    pub sample_seconds: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            fs_hz: FS_HZ,
            patch_seconds: 0.5,
            sample_seconds: SAMPLE_SECONDS,
        }
    }
}

fn whole(x: f64, what: &str) -> Result<usize> {
    let r = x.round();
    if r < 1.0 || (x - r).abs() > 1e-9 {
        return Err(config_err!("{what} = {x} is not a positive whole number of samples"));
    }
    Ok(r as usize)
}

impl PatchConfig {
    pub fn with_patch_seconds(patch_seconds: f64) -> Self {
        PatchConfig {
            patch_seconds,
            ..Self::default()
        }
    }

    pub fn sample_len(&self) -> Result<usize> {
        whole(self.fs_hz * self.sample_seconds, "sample length")
    }

    /// Samples per patch.
    pub fn patch_len(&self) -> Result<usize> {
        whole(self.fs_hz * self.patch_seconds, "patch length")
    }

    /// Patches per signal, `J`.
    pub fn num_patches(&self) -> Result<usize> {
        let (n, p) = (self.sample_len()?, self.patch_len()?);
        if n % p != 0 {
            return Err(config_err!(
                "sample length {n} is not divisible by patch length {p}"
            ));
        }
        Ok(n / p)
    }
}

/// Splits `signal` into consecutive non-overlapping patches, `[J, patch_len]`.
pub fn patchify(signal: &[f64], patch_len: usize) -> Result<Tensor> {
    if patch_len == 0 || signal.len() % patch_len != 0 {
        return Err(shape_err!(
            "signal of length {} cannot be split into patches of {}",
            signal.len(),
            patch_len
        ));
    }
    Tensor::new(vec![signal.len() / patch_len, patch_len], signal.to_vec())
}

/// Patches for a batch of equal-length signals, `[B, J, patch_len]`.
pub fn patchify_batch(signals: &[&[f64]], patch_len: usize) -> Result<Tensor> {
    let n = signals.first().map_or(0, |s| s.len());
    if signals.iter().any(|s| s.len() != n) {
        return Err(shape_err!("signals in a batch differ in length"));
    }
    if patch_len == 0 || n % patch_len != 0 {
        return Err(shape_err!("signal of length {n} cannot be split into patches of {patch_len}"));
    }
    let data = signals.iter().flat_map(|s| s.iter().copied()).collect();
    Tensor::new(vec![signals.len(), n / patch_len, patch_len], data)
}

/// `rho[pos, 2i] = sin(pos / 10000^(2i/d))`, `rho[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(j: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(config_err!("positional encoding needs an even width, got {d}"));
    }
    let mut data = vec![0.0; j * d];
    for pos in 0..j {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![j, d], data)
}

/// Type embedding `[J, d]` drawn from a zero-mean Gaussian with std `std`.
pub fn init_type_embedding<R: Rng + ?Sized>(j: usize, d: usize, std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[j, d], std, rng)
}

/// `Z = patches · W + t + rho` on the graph. `patches` is `[.., J, p]`, `w`
/// is `[p, d]`, `t` and `rho` are `[J, d]`. Passing `t = None` drops the
/// type embedding.
pub fn embed_signal(g: &mut Graph, patches: Var, w: Var, t: Option<Var>, rho: Var) -> Result<Var> {
    let ps = g.shape(patches).to_vec();
    let ws = g.shape(w).to_vec();
    if ps.len() < 2 || ws.len() != 2 || ps[ps.len() - 1] != ws[0] {
        return Err(shape_err!("patches {:?} do not match projection {:?}", ps, ws));
    }
    let grid = [ps[ps.len() - 2], ws[1]];
    if g.shape(rho) != grid {
        return Err(shape_err!("positional encoding {:?}, expected {:?}", g.shape(rho), grid));
    }
    let mut z = g.linear(patches, w, None)?;
    if let Some(t) = t {
        if g.shape(t) != grid {
            return Err(shape_err!("type embedding {:?}, expected {:?}", g.shape(t), grid));
        }
        z = g.add_broadcast(z, t)?;
    }
    g.add_broadcast(z, rho)
}

/// Value-only form of [`embed_signal`].
pub fn embed(patches: &Tensor, w: &Tensor, t: Option<&Tensor>, rho: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(patches.clone());
    let w = g.constant(w.clone());
    let t = t.map(|t| g.constant(t.clone()));
    let r = g.constant(rho.clone());
    let z = embed_signal(&mut g, p, w, t, r)?;
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let c = PatchConfig::default();
        assert_eq!((c.patch_len().unwrap(), c.num_patches().unwrap()), (50, 20));
        for (s, j) in [(1.0, 10), (2.0, 5), (2.5, 4)] {
            assert_eq!(PatchConfig::with_patch_seconds(s).num_patches().unwrap(), j);
        }
        assert!(PatchConfig::with_patch_seconds(3.0).num_patches().is_err());
        assert!(PatchConfig::with_patch_seconds(0.005).patch_len().is_err());
    }

    #[test]
    fn patchify_partitions() {
        let x: Vec<f64> = (0..1000).map(f64::from).collect();
        let p = patchify(&x, 50).unwrap();
        assert_eq!(p.shape(), &[20, 50]);
        assert_eq!(p.data()[50 * 3 + 7], x[157]);
        assert_eq!(p.data(), &x[..]);
        let err = patchify(&x[..999], 50).unwrap_err();
        assert_eq!(err.category(), "shape");
        let err = patchify(&[0.0; 1001], 50).unwrap_err();
        assert_eq!(err.category(), "shape");
    }

    #[test]
    fn positional_encoding_values() {
        let rho = positional_encoding(20, 16).unwrap();
        for i in 0..8 {
            assert_eq!(rho.data()[2 * i], 0.0);
            assert_eq!(rho.data()[2 * i + 1], 1.0);
        }
        assert!(rho.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(rho, positional_encoding(20, 16).unwrap());
        // second frequency at position 3
        let want = (3.0 / 10000f64.powf(2.0 / 16.0)).sin();
        assert_eq!(rho.data()[3 * 16 + 2], want);
        assert_eq!(positional_encoding(20, 15).unwrap_err().category(), "config");
    }
}
