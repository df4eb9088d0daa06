//! Signal conditioning and quality control: band-pass filtering, heart-rate
//! estimation, acceptance gates and min-max normalisation.

mod filter;
mod peaks;

pub use filter::{bandpass, butter_bandpass, sosfiltfilt, Section};
pub use peaks::{
    detect_beats, estimate_hr, find_peaks, interquartile_range, prominences, MIN_PEAK_DISTANCE_S,
    PROMINENCE_IQR_FACTOR,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

use crate::data::{Channel, Dataset, SignalSample, Split, FS_HZ};
use crate::error::{Error, Result};

pub const FILTER_ORDER: usize = 4;
pub const ECG_BAND_HZ: (f64, f64) = (0.5, 40.0);
pub const PPG_BAND_HZ: (f64, f64) = (0.5, 8.0);

pub const HR_RANGE_BPM: (f64, f64) = (60.0, 200.0);
pub const PULSE_PRESSURE_RANGE_MMHG: (f64, f64) = (20.0, 100.0);
pub const MAX_HR_DISAGREEMENT_BPM: f64 = 30.0;
pub const BEAT_CORRELATION_MIN: f64 = 0.9;
/// Fraction of beats that must reach [`BEAT_CORRELATION_MIN`]; the share
/// must be strictly greater than this.
pub const BEAT_CORRELATION_SHARE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcReason {
    Ok,
    HrOutOfRange,
    PulsePressureOutOfRange,
    HrDisagreement,
    BeatCorrelationFail,
}

impl QcReason {
    pub fn as_str(self) -> &'static str {
        match self {
            QcReason::Ok => "ok",
            QcReason::HrOutOfRange => "hr_out_of_range",
            QcReason::PulsePressureOutOfRange => "pulse_pressure_out_of_range",
            QcReason::HrDisagreement => "hr_disagreement",
            QcReason::BeatCorrelationFail => "beat_correlation_fail",
        }
    }
}

impl fmt::Display for QcReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcDecision {
    pub accepted: bool,
    pub reason: QcReason,
}

impl QcDecision {
    fn from_reason(reason: QcReason) -> Self {
        QcDecision {
            accepted: reason == QcReason::Ok,
            reason,
        }
    }
}

/// Measurements behind a QC decision.
#[derive(Clone, Debug, PartialEq)]
pub struct QcMeasurements {
    /// Per-channel heart rate in [`Channel`] order.
    pub heart_rate: [Option<f64>; 3],
    pub pulse_pressure: Option<f64>,
    /// Share of beats per channel that correlate with the channel's mean beat.
    pub beat_share: [f64; 3],
}

/// ECG and PPG pass through their bands; ABP is returned unchanged.
pub fn condition(sample: &SignalSample) -> Result<[Vec<f64>; 3]> {
    let ecg = bandpass(sample.channel(Channel::Ecg), ECG_BAND_HZ.0, ECG_BAND_HZ.1, FS_HZ, FILTER_ORDER)?;
    let ppg = bandpass(sample.channel(Channel::Ppg), PPG_BAND_HZ.0, PPG_BAND_HZ.1, FS_HZ, FILTER_ORDER)?;
    Ok([ecg, ppg, sample.channel(Channel::Abp).to_vec()])
}

/// Median systolic peak minus median diastolic trough between consecutive
/// peaks.
fn pulse_pressure(abp: &[f64], peaks: &[usize]) -> Option<f64> {
    if peaks.len() < 2 {
        return None;
    }
    let mut sys: Vec<f64> = peaks.iter().map(|&p| abp[p]).collect();
    let mut dia: Vec<f64> = peaks
        .windows(2)
        .map(|w| abp[w[0]..w[1]].iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    Some(peaks::median(&mut sys) - peaks::median(&mut dia))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Share of beats whose window, centred on the peak and one median beat
/// interval wide, correlates with the mean beat at
/// [`BEAT_CORRELATION_MIN`] or better. Windows crossing the record edge
/// are skipped.
pub fn beat_consistency(x: &[f64], peaks: &[usize]) -> f64 {
    if peaks.len() < 2 {
        return 0.0;
    }
    let mut rr: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let width = peaks::median(&mut rr).round() as usize;
    let half = width / 2;
    let beats: Vec<&[f64]> = peaks
        .iter()
        .filter(|&&p| p >= half && p - half + width <= x.len())
        .map(|&p| &x[p - half..p - half + width])
        .collect();
    if beats.is_empty() || width < 3 {
        return 0.0;
    }
    let mut template = vec![0.0; width];
    for b in &beats {
        for (t, v) in template.iter_mut().zip(b.iter()) {
            *t += v;
        }
    }
    for t in &mut template {
        *t /= beats.len() as f64;
    }
    let good = beats
        .iter()
        .filter(|b| correlation(b, &template) >= BEAT_CORRELATION_MIN)
        .count();
    good as f64 / beats.len() as f64
}

pub fn qc_measure(sample: &SignalSample) -> Result<QcMeasurements> {
    let conditioned = condition(sample)?;
    let mut heart_rate = [None; 3];
    let mut beat_share = [0.0; 3];
    let mut abp_peaks = Vec::new();
    for (c, x) in conditioned.iter().enumerate() {
        let p = detect_beats(x, FS_HZ);
        heart_rate[c] = peaks::hr_from_peaks(x, &p, FS_HZ);
        beat_share[c] = beat_consistency(x, &p);
        if c == Channel::Abp.index() {
            abp_peaks = p;
        }
    }
    Ok(QcMeasurements {
        heart_rate,
        pulse_pressure: pulse_pressure(&conditioned[Channel::Abp.index()], &abp_peaks),
        beat_share,
    })
}

/// Gate order: heart-rate range, pulse pressure, cross-channel heart-rate
/// agreement, beat-template correlation. The first failing gate names the
/// reason.
pub fn decide(m: &QcMeasurements) -> QcDecision {
    let in_range = |hr: &Option<f64>| hr.is_some_and(|h| (HR_RANGE_BPM.0..=HR_RANGE_BPM.1).contains(&h));
    if !m.heart_rate.iter().all(in_range) {
        return QcDecision::from_reason(QcReason::HrOutOfRange);
    }
    let pp_ok = m
        .pulse_pressure
        .is_some_and(|pp| (PULSE_PRESSURE_RANGE_MMHG.0..=PULSE_PRESSURE_RANGE_MMHG.1).contains(&pp));
    if !pp_ok {
        return QcDecision::from_reason(QcReason::PulsePressureOutOfRange);
    }
    let hrs: Vec<f64> = m.heart_rate.iter().flatten().copied().collect();
    let spread = hrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - hrs.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread > MAX_HR_DISAGREEMENT_BPM {
        return QcDecision::from_reason(QcReason::HrDisagreement);
    }
    if m.beat_share.iter().any(|&s| s <= BEAT_CORRELATION_SHARE) {
        return QcDecision::from_reason(QcReason::BeatCorrelationFail);
    }
    QcDecision::from_reason(QcReason::Ok)
}

/// Quality decision for one raw (unnormalised) record.
pub fn qc_sample(sample: &SignalSample) -> QcDecision {
    match qc_measure(sample) {
        Ok(m) => decide(&m),
        // only reachable for records too short to filter
        Err(_) => QcDecision::from_reason(QcReason::HrOutOfRange),
    }
}

/// Min-max statistics for ECG and ABP over the training split. PPG is
/// always scaled per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub ecg_min: f64,
    pub ecg_max: f64,
    pub abp_min: f64,
    pub abp_max: f64,
    pub ppg_per_sample: bool,
}

impl NormalizationStats {
    fn range(&self, c: Channel) -> Option<(f64, f64)> {
        match c {
            Channel::Ecg => Some((self.ecg_min, self.ecg_max)),
            Channel::Abp => Some((self.abp_min, self.abp_max)),
            Channel::Ppg => None,
        }
    }
}

fn extent(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
}

pub fn fit_normalization<'a, I>(train: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a SignalSample>,
{
    let mut ecg = (f64::INFINITY, f64::NEG_INFINITY);
    let mut abp = ecg;
    let mut n = 0usize;
    for s in train {
        let e = extent(s.channel(Channel::Ecg));
        let a = extent(s.channel(Channel::Abp));
        ecg = (ecg.0.min(e.0), ecg.1.max(e.1));
        abp = (abp.0.min(a.0), abp.1.max(a.1));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("cannot fit normalisation on an empty training split".into()));
    }
    if !(ecg.0 < ecg.1) || !(abp.0 < abp.1) {
        return Err(Error::Data("training split has a constant ECG or ABP channel".into()));
    }
    Ok(NormalizationStats {
        ecg_min: ecg.0,
        ecg_max: ecg.1,
        abp_min: abp.0,
        abp_max: abp.1,
        ppg_per_sample: true,
    })
}

/// Scales every channel; a constant PPG trace cannot be scaled and is a
/// data error naming the sample.
pub fn apply_normalization(sample: &SignalSample, stats: &NormalizationStats) -> Result<SignalSample> {
    let mut out = sample.clone();
    for c in Channel::ALL {
        let (lo, hi) = match stats.range(c) {
            Some(r) => r,
            None => extent(sample.channel(c)),
        };
        if !(lo < hi) {
            return Err(Error::Data(format!(
                "sample {}: {} channel is constant and cannot be normalised",
                sample.sample_id, c
            )));
        }
        for v in out.channel_mut(c).iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
    Ok(out)
}

/// Inverse of [`apply_normalization`] for ECG and ABP. PPG needs the
/// sample's own original range, passed as `ppg_range`.
pub fn denormalize(
    sample: &SignalSample,
    stats: &NormalizationStats,
    ppg_range: (f64, f64),
) -> SignalSample {
    let mut out = sample.clone();
    for c in Channel::ALL {
        let (lo, hi) = stats.range(c).unwrap_or(ppg_range);
        for v in out.channel_mut(c).iter_mut() {
            *v = lo + *v * (hi - lo);
        }
    }
    out
}

/// Maps normalised values of channel `c` back to physical units (PPG has
/// none and is returned as is).
pub fn denormalize_channel(x: &[f64], c: Channel, stats: &NormalizationStats) -> Vec<f64> {
    match stats.range(c) {
        Some((lo, hi)) => x.iter().map(|v| lo + v * (hi - lo)).collect(),
        None => x.to_vec(),
    }
}

/// Outcome of [`preprocess_dataset`].
#[derive(Clone, Debug)]
pub struct PreprocessReport {
    /// `(sample_id, reason)` for every input record, in input order.
    pub decisions: Vec<(u64, QcReason)>,
}

impl PreprocessReport {
    pub fn accepted(&self) -> usize {
        self.decisions.iter().filter(|d| d.1 == QcReason::Ok).count()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_id\treason")?;
        for (id, r) in &self.decisions {
            writeln!(w, "{id}\t{r}")?;
        }
        Ok(())
    }
}

/// QC-gates every record, fits normalisation on the accepted training
/// records, and normalises the accepted ones. Stored channels stay
/// unfiltered apart from the ECG and PPG band-pass.
pub fn preprocess_dataset(input: &Dataset) -> Result<(Dataset, PreprocessReport)> {
    preprocess_dataset_with(input, None)
}

/// As [`preprocess_dataset`], reusing `stats` (e.g. from a pretraining
/// cohort) instead of fitting new ones.
pub fn preprocess_dataset_with(input: &Dataset, stats: Option<&NormalizationStats>) -> Result<(Dataset, PreprocessReport)> {
    let mut decisions = Vec::with_capacity(input.len());
    let mut kept = Vec::new();
    for s in &input.samples {
        let reason = qc_sample(s).reason;
        if reason == QcReason::Ok {
            // accepted records have detected beats, so no channel is constant
            kept.push(SignalSample {
                channels: condition(s)?,
                ..s.clone()
            });
        }
        decisions.push((s.sample_id, reason));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => fit_normalization(kept.iter().filter(|s| s.split() == Split::Train))?,
    };
    let samples = kept
        .iter()
        .map(|s| apply_normalization(s, &stats))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            samples,
            normalization: Some(stats),
        },
        PreprocessReport { decisions },
    ))
}
