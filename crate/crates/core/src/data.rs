//! Signal records shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error};
use crate::preprocess::NormalizationStats;

/// Sampling rate of every stored record.
pub const FS_HZ: f64 = 100.0;
/// Record duration in seconds.
pub const SAMPLE_SECONDS: f64 = 10.0;
/// Samples per channel per record.
pub const SAMPLE_LEN: usize = 1000;
/// MAP threshold below which a record is labelled hypotensive.
pub const HYPOTENSION_MAP_MMHG: f64 = 65.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ecg,
    Ppg,
    Abp,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Ecg, Channel::Ppg, Channel::Abp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ecg => "ecg",
            Channel::Ppg => "ppg",
            Channel::Abp => "abp",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ecg" => Ok(Channel::Ecg),
            "ppg" => Ok(Channel::Ppg),
            "abp" => Ok(Channel::Abp),
            other => Err(config_err!("unknown signal '{other}' (expected ecg, ppg or abp)")),
        }
    }
}

/// Parses a comma-separated channel list such as `ecg,ppg`.
pub fn parse_channels(s: &str) -> Result<Vec<Channel>, Error> {
    let mut out: Vec<Channel> = s
        .split([',', '+'])
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(config_err!("empty signal list"));
    }
    Ok(out)
}

pub fn channels_label(chs: &[Channel]) -> String {
    chs.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
}

/// Ground-truth targets attached to a record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub sbp: f64,
    pub dbp: f64,
    pub map: f64,
    pub hypotensive: bool,
    pub sv_proxy: f64,
    pub age_proxy: f64,
    pub heart_rate: f64,
}

impl Labels {
    pub fn new(sbp: f64, dbp: f64, sv_proxy: f64, age_proxy: f64, heart_rate: f64) -> Self {
        let map = mean_arterial_pressure(sbp, dbp);
        Labels {
            sbp,
            dbp,
            map,
            hypotensive: map < HYPOTENSION_MAP_MMHG,
            sv_proxy,
            age_proxy,
            heart_rate,
        }
    }
}

pub fn mean_arterial_pressure(sbp: f64, dbp: f64) -> f64 {
    dbp + (sbp - dbp) / 3.0
}

/// One 10 s, three-channel record.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSample {
    pub sample_id: u64,
    /// ECG, PPG, ABP in [`Channel`] order.
    pub channels: [Vec<f64>; 3],
    pub labels: Labels,
}

impl SignalSample {
    pub fn channel(&self, c: Channel) -> &[f64] {
        &self.channels[c.index()]
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut Vec<f64> {
        &mut self.channels[c.index()]
    }

    pub fn split(&self) -> Split {
        Split::of(self.sample_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    /// 80/20 assignment from a hash of the sample id.
    pub fn of(sample_id: u64) -> Split {
        if splitmix64(sample_id) % 100 < 20 {
            Split::Validation
        } else {
            Split::Train
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Collection of records plus optional normalisation metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SignalSample>,
    pub normalization: Option<NormalizationStats>,
}

impl Dataset {
    pub fn new(samples: Vec<SignalSample>) -> Self {
        Dataset {
            samples,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&SignalSample> {
        self.samples.iter().filter(|s| s.split() == which).collect()
    }

    pub fn train(&self) -> Vec<&SignalSample> {
        self.split(Split::Train)
    }

    pub fn validation(&self) -> Vec<&SignalSample> {
        self.split(Split::Validation)
    }
}
