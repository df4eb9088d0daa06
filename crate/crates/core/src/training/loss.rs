use serde::{Deserialize, Serialize};

use crate::autodiff::{pearson_stats, Graph, Tensor, Var};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccMode {
    /// `beta * (1 - PCC)` per signal.
    OneMinusPcc,
    /// `beta * (-PCC)`; same gradient as the default, offset by `beta`.
    NegativePcc,
    /// `beta * PCC`, which rewards anti-correlation when minimised.
    LiteralPcc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    FullSignal,
    /// Only samples inside masked patches count.
    MaskedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub pcc_mode: PccMode,
    pub loss_region: LossRegion,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.8,
            beta: 0.2,
            pcc_mode: PccMode::OneMinusPcc,
            loss_region: LossRegion::FullSignal,
        }
    }
}

impl LossConfig {
    /// Reconstruction loss without the correlation term.
    pub fn rmse_only() -> Self {
        LossConfig {
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) {
            return Err(config_err!(
                "loss weights alpha={} beta={} must be non-negative and not both zero",
                self.alpha,
                self.beta
            ));
        }
        Ok(())
    }

    /// Correlation term for one signal given its PCC.
    pub fn pcc_term(&self, pcc: f64) -> f64 {
        match self.pcc_mode {
            PccMode::OneMinusPcc => 1.0 - pcc,
            PccMode::NegativePcc => -pcc,
            PccMode::LiteralPcc => pcc,
        }
    }
}

/// Root-mean-square difference of two equal-length signals.
pub fn rmse(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() || s.is_empty() {
        return Err(shape_err!("rmse of lengths {} and {}", s.len(), s_hat.len()));
    }
    let ss: f64 = s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / s.len() as f64).sqrt())
}

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pcc(s: &[f64], s_hat: &[f64]) -> Result<Option<f64>> {
    if s.len() != s_hat.len() || s.is_empty() {
        return Err(shape_err!("pcc of lengths {} and {}", s.len(), s_hat.len()));
    }
    let st = pearson_stats(s, s_hat, None);
    Ok((!st.degenerate).then_some(st.rho))
}

/// Loss of one reconstruction over every signal, value only.
pub fn sample_loss(targets: &[&[f64]], recons: &[&[f64]], cfg: &LossConfig) -> Result<f64> {
    if targets.len() != recons.len() {
        return Err(shape_err!("{} targets for {} reconstructions", targets.len(), recons.len()));
    }
    let mut total = 0.0;
    for (s, r) in targets.iter().zip(recons) {
        total += cfg.alpha * rmse(s, r)? + cfg.beta * cfg.pcc_term(pcc(s, r)?.unwrap_or(0.0));
    }
    Ok(total)
}

/// Graph loss and its per-signal components (batch means).
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rmse: Vec<f64>,
    pub pcc: Vec<f64>,
}

/// `alpha * sum_i RMSE_i + beta * sum_i term(PCC_i)`, averaged over the
/// batch. `recons[i]` and `targets[i]` are `[B, N]`; `weights[i]`, when
/// given, restricts signal `i` to the samples with weight 1. A signal whose
/// weight row is empty for a record contributes nothing for that record.
pub fn total_loss(
    g: &mut Graph,
    recons: &[Var],
    targets: &[Var],
    weights: Option<&[Vec<f64>]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if recons.len() != targets.len() || recons.is_empty() {
        return Err(shape_err!("{} reconstructions for {} targets", recons.len(), targets.len()));
    }
    let mut parts = Vec::new();
    let (mut rmse_means, mut pcc_means) = (Vec::new(), Vec::new());
    for (i, (&r, &t)) in recons.iter().zip(targets).enumerate() {
        let shape = g.shape(r).to_vec();
        if shape.len() != 2 {
            return Err(shape_err!("reconstruction {:?}, expected [B, N]", shape));
        }
        let (b, n) = (shape[0], shape[1]);
        let w = weights.map(|w| w[i].clone());
        // rows with no weight are switched off entirely
        let active: Option<Vec<f64>> = w.as_ref().map(|w| {
            w.chunks(n)
                .map(|row| if row.iter().any(|&x| x > 0.0) { 1.0 } else { 0.0 })
                .collect()
        });
        let e = g.rmse_rows(t, r, w.clone())?;
        let p = g.pearson_rows(t, r, w)?;
        rmse_means.push(g.value(e).data().iter().sum::<f64>() / b as f64);
        pcc_means.push(g.value(p).data().iter().sum::<f64>() / b as f64);
        let term = match cfg.pcc_mode {
            PccMode::OneMinusPcc => {
                let neg = g.scale(p, -1.0)?;
                let one = g.constant(Tensor::full(&[b], 1.0));
                g.add(one, neg)?
            }
            PccMode::NegativePcc => g.scale(p, -1.0)?,
            PccMode::LiteralPcc => p,
        };
        let e = g.scale(e, cfg.alpha)?;
        let term = g.scale(term, cfg.beta)?;
        let mut row = g.add(e, term)?;
        if let Some(a) = active {
            let a = g.constant(Tensor::new(vec![b], a)?);
            row = g.mul(row, a)?;
        }
        parts.push(row);
    }
    let stacked = g.concat(&parts, 0)?;
    let sum = g.sum(stacked)?;
    let b = g.shape(recons[0])[0] as f64;
    let total = g.scale(sum, 1.0 / b)?;
    Ok(LossTerms {
        total,
        rmse: rmse_means,
        pcc: pcc_means,
    })
}
