//! Coupled synthetic ECG / PPG / ABP generator with exact labels.
//!
//! All three channels share one beat train. The ECG is a sum of Gaussian
//! P, Q, R, S and T deflections around each R peak; PPG and ABP are two-lobe
//! pulses (systolic wave plus dicrotic wave) whose feet trail the R peak by
//! fixed lags. The ABP trace is rescaled so its clean extrema equal the
//! latent diastolic and systolic pressures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Dataset, Labels, SignalSample, FS_HZ, SAMPLE_LEN};
use crate::error::{config_err, Result};

/// PPG foot delay after the R peak, seconds.
pub const PPG_LAG_S: f64 = 0.20;
/// ABP foot delay after the R peak, seconds.
pub const ABP_LAG_S: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HemodynamicLatent {
    /// Beats per minute.
    pub heart_rate: f64,
    /// Beat-to-beat standard deviation of the instantaneous rate, bpm.
    pub hr_variability: f64,
    pub sbp: f64,
    pub dbp: f64,
    /// Stroke-volume proxy, mL. Tied to pulse pressure through [`compliance`].
    pub sv_proxy: f64,
    pub age_proxy: f64,
    /// Noise standard deviation relative to each channel's pulse amplitude.
    pub noise_level: f64,
    /// Time of the first R peak within the first beat interval, seconds.
    pub beat_phase: f64,
}

/// Arterial compliance in mL/mmHg; stiffens with age.
pub fn compliance(age: f64) -> f64 {
    (2.0 - 0.015 * (age - 20.0)).max(0.6)
}

impl HemodynamicLatent {
    /// Latent with `sv_proxy` consistent with its pulse pressure.
    pub fn new(heart_rate: f64, sbp: f64, dbp: f64, age_proxy: f64) -> Self {
        HemodynamicLatent {
            heart_rate,
            hr_variability: 0.0,
            sbp,
            dbp,
            sv_proxy: (sbp - dbp) * compliance(age_proxy),
            age_proxy,
            noise_level: 0.0,
            beat_phase: 0.1,
        }
    }

    pub fn map(&self) -> f64 {
        crate::data::mean_arterial_pressure(self.sbp, self.dbp)
    }

    /// Replaces the stroke volume and re-derives systolic pressure from it
    /// (`sbp = dbp + sv / C(age)`), keeping every other latent fixed.
    pub fn with_stroke_volume(mut self, sv: f64) -> Self {
        self.sv_proxy = sv;
        self.sbp = self.dbp + sv / compliance(self.age_proxy);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(40.0..=220.0).contains(&self.heart_rate) {
            return Err(config_err!("heart rate {} outside [40, 220] bpm", self.heart_rate));
        }
        if self.sbp <= self.dbp {
            return Err(config_err!("sbp {} not above dbp {}", self.sbp, self.dbp));
        }
        if self.sbp - self.dbp < 20.0 {
            return Err(config_err!(
                "pulse pressure {} below 20 mmHg",
                self.sbp - self.dbp
            ));
        }
        if self.noise_level < 0.0 || self.hr_variability < 0.0 {
            return Err(config_err!("negative noise or variability"));
        }
        Ok(())
    }

    pub fn labels(&self) -> Labels {
        Labels::new(self.sbp, self.dbp, self.sv_proxy, self.age_proxy, self.heart_rate)
    }
}

/// R-peak times covering the record (including beats that start before it).
fn beat_times(latent: &HemodynamicLatent, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rr0 = 60.0 / latent.heart_rate;
    let mut t = latent.beat_phase.rem_euclid(rr0) - 3.0 * rr0;
    let end = SAMPLE_LEN as f64 / FS_HZ + 1.0;
    let mut out = Vec::new();
    while t < end {
        out.push(t);
        let jitter: f64 = rng.sample(StandardNormal);
        let rate = (latent.heart_rate + latent.hr_variability * jitter).max(30.0);
        t += 60.0 / rate;
    }
    out
}

fn gauss(t: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// One ECG beat centred on its R peak, `tau` seconds from the peak.
fn ecg_beat(tau: f64, rr: f64) -> f64 {
    let s = rr.sqrt();
    // (offset, width, amplitude) for P, Q, R, S, T
    let waves = [
        (-0.20 * s, 0.025 * s, 0.15),
        (-0.035, 0.010, -0.12),
        (0.0, 0.012, 1.0),
        (0.035, 0.012, -0.25),
        (0.22 * s, 0.05 * s, 0.30),
    ];
    waves
        .iter()
        .map(|&(mu, sd, a)| a * gauss(tau, mu, sd))
        .sum()
}

/// Gamma-shaped lobe: zero at the foot, peak 1 at `peak`.
fn lobe(tau: f64, peak: f64, order: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let u = tau / peak;
    (order * (u.ln() + 1.0 - u)).exp()
}

#[derive(Clone, Copy, Debug)]
struct PulseShape {
    peak: f64,
    order: f64,
    dicrotic_delay: f64,
    dicrotic_width: f64,
    dicrotic_ratio: f64,
}

impl PulseShape {
    fn eval(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        lobe(tau, self.peak, self.order)
            + self.dicrotic_ratio * gauss(tau, self.peak + self.dicrotic_delay, self.dicrotic_width)
    }

    fn ppg(latent: &HemodynamicLatent, rr: f64) -> Self {
        let s = rr.sqrt();
        let age = latent.age_proxy;
        // wider pulse and shallower dicrotic wave with age; earlier
        // reflection at higher systolic pressure
        PulseShape {
            peak: 0.16 * s * (1.0 + 0.004 * (age - 50.0)),
            order: 3.0,
            dicrotic_delay: (0.22 + 0.0012 * (120.0 - latent.sbp)).clamp(0.12, 0.32) * s,
            dicrotic_width: 0.06 * s,
            dicrotic_ratio: (0.6 - 0.006 * (age - 20.0)).clamp(0.1, 0.6),
        }
    }

    fn abp(latent: &HemodynamicLatent, rr: f64) -> Self {
        let s = rr.sqrt();
        PulseShape {
            peak: 0.12 * s,
            order: 4.0,
            dicrotic_delay: (0.18 + 0.0008 * (120.0 - latent.sbp)).clamp(0.10, 0.26) * s,
            dicrotic_width: 0.05 * s,
            dicrotic_ratio: (0.45 - 0.004 * (latent.age_proxy - 20.0)).clamp(0.15, 0.45),
        }
    }
}

/// Noise-free channels for `latent`; beat timing drawn from `seed`.
pub fn synth_clean(latent: &HemodynamicLatent, seed: u64) -> Result<[Vec<f64>; 3]> {
    latent.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let beats = beat_times(latent, &mut rng);
    let mut ecg = vec![0.0; SAMPLE_LEN];
    let mut ppg = vec![0.0; SAMPLE_LEN];
    let mut abp = vec![0.0; SAMPLE_LEN];
    for (k, &tb) in beats.iter().enumerate() {
        let rr = beats.get(k + 1).map_or(60.0 / latent.heart_rate, |n| n - tb);
        let ppg_shape = PulseShape::ppg(latent, rr);
        let abp_shape = PulseShape::abp(latent, rr);
        for i in 0..SAMPLE_LEN {
            let t = i as f64 / FS_HZ;
            let tau = t - tb;
            if !(-1.0..2.0).contains(&tau) {
                continue;
            }
            ecg[i] += ecg_beat(tau, rr);
            ppg[i] += ppg_shape.eval(tau - PPG_LAG_S);
            abp[i] += abp_shape.eval(tau - ABP_LAG_S);
        }
    }
    let (lo, hi) = abp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in &mut abp {
        *v = latent.dbp + (latent.sbp - latent.dbp) * (*v - lo) / span;
    }
    Ok([ecg, ppg, abp])
}

/// Noisy three-channel record with labels.
pub fn synth_sample(latent: &HemodynamicLatent, seed: u64, sample_id: u64) -> Result<SignalSample> {
    let mut channels = synth_clean(latent, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let scales = [1.0, 1.0, latent.sbp - latent.dbp];
    for (ch, scale) in channels.iter_mut().zip(scales) {
        let sd = latent.noise_level * scale;
        for v in ch.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sd * n;
        }
    }
    Ok(SignalSample {
        sample_id,
        channels,
        labels: latent.labels(),
    })
}

/// Inclusive uniform range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Span { lo, hi }
    }

    fn at(&self, u: f64) -> f64 {
        self.lo + (self.hi - self.lo) * u
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(config_err!("invalid {name} range [{}, {}]", self.lo, self.hi));
        }
        Ok(())
    }
}

/// Sampling ranges for cohort latents.
///
/// A shared hemodynamic state `z ~ U(0,1)` drives systolic and diastolic
/// pressure and age upward and heart rate downward; `coupling` sets how much
/// of each pressure and age draw comes from `z` rather than an independent
/// uniform, `hr_coupling` the same for heart rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentDistribution {
    pub heart_rate: Span,
    pub hr_variability: Span,
    pub sbp: Span,
    pub dbp: Span,
    pub age: Span,
    pub noise_level: Span,
    pub coupling: f64,
    pub hr_coupling: f64,
}

impl Default for LatentDistribution {
    fn default() -> Self {
        LatentDistribution {
            heart_rate: Span::new(62.0, 140.0),
            hr_variability: Span::new(0.5, 2.0),
            sbp: Span::new(75.0, 160.0),
            dbp: Span::new(40.0, 95.0),
            age: Span::new(20.0, 85.0),
            noise_level: Span::new(0.002, 0.02),
            coupling: 0.7,
            hr_coupling: 0.2,
        }
    }
}

impl LatentDistribution {
    pub fn validate(&self) -> Result<()> {
        self.heart_rate.validate("heart_rate")?;
        self.hr_variability.validate("hr_variability")?;
        self.sbp.validate("sbp")?;
        self.dbp.validate("dbp")?;
        self.age.validate("age")?;
        self.noise_level.validate("noise_level")?;
        if self.heart_rate.lo < 40.0 || self.heart_rate.hi > 220.0 {
            return Err(config_err!("heart_rate range must lie within [40, 220]"));
        }
        if self.sbp.hi - self.dbp.lo < 20.0 {
            return Err(config_err!(
                "sbp/dbp ranges cannot produce a pulse pressure of 20 mmHg"
            ));
        }
        if self.noise_level.lo < 0.0 || self.hr_variability.lo < 0.0 {
            return Err(config_err!("noise and variability must be non-negative"));
        }
        for (name, c) in [("coupling", self.coupling), ("hr_coupling", self.hr_coupling)] {
            if !(0.0..=1.0).contains(&c) {
                return Err(config_err!("{name} {c} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Deterministic latent for record `index`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<HemodynamicLatent> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index.wrapping_mul(3)));
        let z: f64 = rng.random();
        for _ in 0..200 {
            let mut mix = |c: f64, dir: f64| c * dir + (1.0 - c) * rng.random::<f64>();
            let sbp = self.sbp.at(mix(self.coupling, z));
            let dbp = self.dbp.at(mix(self.coupling, z));
            let heart_rate = self.heart_rate.at(mix(self.hr_coupling, 1.0 - z));
            let age = self.age.at(mix(self.coupling, z));
            if sbp - dbp < 20.0 {
                continue;
            }
            let mut latent = HemodynamicLatent::new(heart_rate, sbp, dbp, age);
            latent.hr_variability = self.hr_variability.at(rng.random());
            latent.noise_level = self.noise_level.at(rng.random());
            latent.beat_phase = rng.random::<f64>() * 60.0 / heart_rate;
            return Ok(latent);
        }
        Err(config_err!(
            "could not draw a latent with pulse pressure >= 20 mmHg from the configured ranges"
        ))
    }
}

/// `n` records; record `i` depends only on `(seed, i)`.
pub fn generate_cohort(n: usize, seed: u64, dist: &LatentDistribution) -> Result<Dataset> {
    if n == 0 {
        return Err(config_err!("cohort size must be at least 1"));
    }
    dist.validate()?;
    let samples = (0..n as u64)
        .map(|i| {
            let latent = dist.sample(seed, i)?;
            synth_sample(&latent, derive_seed(seed, i.wrapping_mul(3) + 1), i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

/// Latent used to regenerate the clean channels of cohort record `index`.
pub fn cohort_clean(seed: u64, index: u64, dist: &LatentDistribution) -> Result<[Vec<f64>; 3]> {
    let latent = dist.sample(seed, index)?;
    synth_clean(&latent, derive_seed(seed, index.wrapping_mul(3) + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Channel, HYPOTENSION_MAP_MMHG};

    #[test]
    fn abp_extrema_match_pressures() {
        let latent = HemodynamicLatent::new(72.0, 120.0, 80.0, 50.0);
        let [_, _, abp] = synth_clean(&latent, 3).unwrap();
        let max = abp.iter().cloned().fold(f64::MIN, f64::max);
        let min = abp.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 120.0).abs() < 1e-9 && (min - 80.0).abs() < 1e-9);

        let mut noisy = latent;
        noisy.noise_level = 0.02;
        let s = synth_sample(&noisy, 3, 0).unwrap();
        let sd = 0.02 * 40.0;
        let abp = s.channel(Channel::Abp);
        let max = abp.iter().cloned().fold(f64::MIN, f64::max);
        let min = abp.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 120.0).abs() < 4.0 * sd, "max {max}");
        assert!((min - 80.0).abs() < 4.0 * sd, "min {min}");
        assert!((s.labels.map - 93.333_333_333_333_33).abs() < 1e-9);
    }

    #[test]
    fn hypotension_label_threshold() {
        let l = HemodynamicLatent::new(72.0, 90.0, 50.0, 50.0).labels();
        assert!((l.map - 63.333_333_333_333_33).abs() < 1e-9);
        assert!(l.map < HYPOTENSION_MAP_MMHG && l.hypotensive);
        let l = HemodynamicLatent::new(72.0, 120.0, 80.0, 50.0).labels();
        assert!(!l.hypotensive);
    }

    #[test]
    fn stroke_volume_raises_abp_amplitude() {
        let base = HemodynamicLatent::new(80.0, 120.0, 75.0, 45.0);
        let mut prev = 0.0;
        for sv in [40.0, 55.0, 70.0, 85.0, 100.0] {
            let l = base.with_stroke_volume(sv);
            let [_, _, abp] = synth_clean(&l, 9).unwrap();
            let amp = abp.iter().cloned().fold(f64::MIN, f64::max)
                - abp.iter().cloned().fold(f64::MAX, f64::min);
            assert!(amp > prev, "sv {sv}: amplitude {amp} <= {prev}");
            prev = amp;
        }
    }

    #[test]
    fn invalid_latents_rejected() {
        assert!(HemodynamicLatent::new(230.0, 120.0, 80.0, 40.0).validate().is_err());
        assert!(HemodynamicLatent::new(70.0, 90.0, 80.0, 40.0).validate().is_err());
        assert!(HemodynamicLatent::new(70.0, 80.0, 90.0, 40.0).validate().is_err());
    }

    #[test]
    fn cohort_is_deterministic_and_rejects_empty() {
        let d = LatentDistribution::default();
        let a = generate_cohort(100, 7, &d).unwrap();
        let b = generate_cohort(100, 7, &d).unwrap();
        assert_eq!(a, b);
        assert!(generate_cohort(0, 7, &d).is_err());
        let bad = LatentDistribution {
            sbp: Span::new(60.0, 70.0),
            dbp: Span::new(55.0, 65.0),
            ..d
        };
        assert!(generate_cohort(10, 7, &bad).is_err());
    }

    #[test]
    fn cohort_labels_consistent_and_prevalence_matches() {
        let d = LatentDistribution {
            sbp: Span::new(85.0, 95.0),
            dbp: Span::new(50.0, 60.0),
            ..LatentDistribution::default()
        };
        let ds = generate_cohort(300, 11, &d).unwrap();
        let recomputed = ds
            .samples
            .iter()
            .filter(|s| s.labels.dbp + (s.labels.sbp - s.labels.dbp) / 3.0 < 65.0)
            .count();
        let stored = ds.samples.iter().filter(|s| s.labels.hypotensive).count();
        assert_eq!(recomputed, stored);
        assert!(stored > 0 && stored < 300);
        for s in &ds.samples {
            assert!((s.labels.map - (s.labels.dbp + (s.labels.sbp - s.labels.dbp) / 3.0)).abs() < 1e-9);
            assert_eq!(s.labels.hypotensive, s.labels.map < 65.0);
            assert!(s.channels.iter().all(|c| c.len() == SAMPLE_LEN));
        }
    }

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let d = LatentDistribution::default();
        let ds = generate_cohort(1000, 1, &d).unwrap();
        let v = ds.validation().len() as f64 / 1000.0;
        assert!((v - 0.2).abs() < 0.04, "validation fraction {v}");
    }
}
