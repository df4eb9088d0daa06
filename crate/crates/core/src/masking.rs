//! Patch masks for inter-, intra- and signal-masking and the cyclic
//! strategy schedule used during gradient accumulation.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::data::{channels_label, parse_channels, Channel};
use crate::error::{config_err, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    /// Independent random patches per signal.
    Inter,
    /// One random patch set shared by every signal.
    Intra,
    /// Every patch of the listed signals.
    Signal(Vec<Channel>),
}

impl MaskStrategy {
    pub fn signal(chs: &[Channel]) -> Self {
        let mut v = chs.to_vec();
        v.sort();
        v.dedup();
        MaskStrategy::Signal(v)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::Inter => f.write_str("inter"),
            MaskStrategy::Intra => f.write_str("intra"),
            MaskStrategy::Signal(chs) => write!(f, "signal({})", channels_label(chs)),
        }
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    /// Accepts `inter`, `intra`, `signal(ecg)`, `sig(ecg+ppg)` and
    /// `sig(ECG,PPG)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "inter" => return Ok(MaskStrategy::Inter),
            "intra" => return Ok(MaskStrategy::Intra),
            _ => {}
        }
        let inner = s
            .strip_prefix("signal(")
            .or_else(|| s.strip_prefix("sig("))
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| config_err!("unknown masking strategy '{s}'"))?;
        Ok(MaskStrategy::Signal(parse_channels(inner)?))
    }
}

impl Serialize for MaskStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Boolean mask per signal row (`true` = masked), rows in the order of
/// `channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskIndex {
    pub channels: Vec<Channel>,
    pub rows: Vec<Vec<bool>>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl MaskIndex {
    /// Nothing masked.
    pub fn none(channels: &[Channel], j: usize) -> Self {
        MaskIndex {
            channels: channels.to_vec(),
            rows: vec![vec![false; j]; channels.len()],
            strategy: MaskStrategy::Inter,
            ratio: 0.0,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn masked_count(&self, row: usize) -> usize {
        self.rows[row].iter().filter(|&&m| m).count()
    }

    /// Unmasked patch positions of `row`, ascending.
    pub fn visible(&self, row: usize) -> Vec<usize> {
        self.rows[row]
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }

    pub fn total_visible(&self) -> usize {
        (0..self.rows.len()).map(|r| self.num_patches() - self.masked_count(r)).sum()
    }

    pub fn row_of(&self, c: Channel) -> Option<usize> {
        self.channels.iter().position(|&x| x == c)
    }
}

/// Number of masked patches for ratio `r` over `j` patches.
pub fn masked_count(j: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(config_err!("masking ratio {r} outside (0, 1)"));
    }
    let m = (r * j as f64).round() as usize;
    if m == 0 || m >= j {
        return Err(config_err!(
            "masking ratio {r} over {j} patches masks {m}; need between 1 and {}",
            j.saturating_sub(1)
        ));
    }
    Ok(m)
}

fn random_row<R: Rng + ?Sized>(j: usize, m: usize, rng: &mut R) -> Vec<bool> {
    let mut row = vec![false; j];
    for i in sample_indices(rng, j, m) {
        row[i] = true;
    }
    row
}

/// Draws a mask over `channels` with `j` patches per signal.
pub fn sample_mask<R: Rng + ?Sized>(
    strategy: &MaskStrategy,
    channels: &[Channel],
    j: usize,
    r: f64,
    rng: &mut R,
) -> Result<MaskIndex> {
    if channels.is_empty() || j == 0 {
        return Err(config_err!("mask needs at least one signal and one patch"));
    }
    let rows = match strategy {
        MaskStrategy::Inter => {
            let m = masked_count(j, r)?;
            channels.iter().map(|_| random_row(j, m, rng)).collect()
        }
        MaskStrategy::Intra => {
            let m = masked_count(j, r)?;
            vec![random_row(j, m, rng); channels.len()]
        }
        MaskStrategy::Signal(set) => {
            if let Some(c) = set.iter().find(|c| !channels.contains(c)) {
                return Err(config_err!("signal-masking of {c}, which the model does not use"));
            }
            if set.is_empty() || channels.iter().all(|c| set.contains(c)) {
                return Err(config_err!(
                    "signal-masking {} must leave at least one of {} visible",
                    strategy,
                    channels_label(channels)
                ));
            }
            channels.iter().map(|c| vec![set.contains(c); j]).collect()
        }
    };
    Ok(MaskIndex {
        channels: channels.to_vec(),
        rows,
        strategy: strategy.clone(),
        ratio: r,
    })
}

/// Visible tokens per signal, temporal order preserved. `grids[i]` is the
/// `[J, d]` token matrix of row `i`.
pub fn apply_mask(grids: &[Tensor], mask: &MaskIndex) -> Result<Vec<Tensor>> {
    if grids.len() != mask.rows.len() {
        return Err(shape_err!("{} token grids for a {}-row mask", grids.len(), mask.rows.len()));
    }
    grids
        .iter()
        .enumerate()
        .map(|(r, z)| {
            let s = z.shape();
            if s.len() != 2 || s[0] != mask.num_patches() {
                return Err(shape_err!("token grid {:?} for {} patches", s, mask.num_patches()));
            }
            let d = s[1];
            let vis = mask.visible(r);
            let data = vis
                .iter()
                .flat_map(|&j| z.data()[j * d..(j + 1) * d].iter().copied())
                .collect();
            Tensor::new(vec![vis.len(), d], data)
        })
        .collect()
}

/// Ordered strategies, one per accumulation micro-batch, cycled forever.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskSchedule {
    pub strategies: Vec<MaskStrategy>,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        use Channel::*;
        let s = MaskStrategy::signal;
        MaskSchedule {
            strategies: vec![
                MaskStrategy::Inter,
                MaskStrategy::Intra,
                s(&[Ecg]),
                s(&[Ppg]),
                s(&[Abp]),
                s(&[Ecg, Ppg]),
                s(&[Ppg, Abp]),
                s(&[Ecg, Abp]),
                MaskStrategy::Inter,
                MaskStrategy::Intra,
            ],
        }
    }
}

impl MaskSchedule {
    pub fn new(strategies: Vec<MaskStrategy>) -> Result<Self> {
        if strategies.is_empty() {
            return Err(config_err!("masking schedule is empty"));
        }
        Ok(MaskSchedule { strategies })
    }

    /// Schedule with a single strategy repeated `len` times.
    pub fn repeat(strategy: MaskStrategy, len: usize) -> Self {
        MaskSchedule {
            strategies: vec![strategy; len],
        }
    }

    /// Named schedules of length 10: `all` (the default), `inter`, `intra`,
    /// `signal` (the six single/pair signal masks, then the three single
    /// ones and ECG+PPG again) and `inter-intra` (alternating).
    pub fn preset(name: &str) -> Result<Self> {
        use MaskStrategy::*;
        let full = Self::default().strategies;
        let strategies = match name {
            "all" | "full" => full,
            "inter" => vec![Inter; 10],
            "intra" => vec![Intra; 10],
            "signal" => {
                let sig: Vec<MaskStrategy> = full[2..8].to_vec();
                sig.iter().chain(&sig[..4]).cloned().collect()
            }
            "inter-intra" => [Inter, Intra].iter().cycle().take(10).cloned().collect(),
            other => return Err(config_err!("unknown masking schedule preset '{other}'")),
        };
        Ok(MaskSchedule { strategies })
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    /// Strategies restricted to those usable with `channels`: signal masks
    /// naming absent signals or covering every present one are dropped.
    /// Falls back to inter-masking when nothing remains.
    pub fn restricted_to(&self, channels: &[Channel]) -> Self {
        let kept: Vec<MaskStrategy> = self
            .strategies
            .iter()
            .filter(|s| match s {
                MaskStrategy::Signal(set) => {
                    set.iter().all(|c| channels.contains(c)) && !channels.iter().all(|c| set.contains(c))
                }
                _ => true,
            })
            .cloned()
            .collect();
        if kept.is_empty() {
            Self::repeat(MaskStrategy::Inter, self.len().max(1))
        } else {
            MaskSchedule { strategies: kept }
        }
    }
}

impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.strategies.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for MaskSchedule {
    type Err = Error;

    /// A preset name or a comma-separated strategy list; commas inside
    /// parentheses belong to the strategy.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(p) = Self::preset(s.trim()) {
            return Ok(p);
        }
        let mut parts = Vec::new();
        let (mut depth, mut start) = (0i32, 0usize);
        for (i, ch) in s.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' | ';' if depth == 0 => {
                    parts.push(&s[start..i]);
                    start = i + 1;
                }
                _ => {}
            }
        }
        parts.push(&s[start..]);
        let strategies = parts
            .into_iter()
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(strategies)
    }
}

/// Strategy for micro-batch `step`, cycling through the schedule.
pub fn next_strategy(schedule: &MaskSchedule, step: usize) -> &MaskStrategy {
    &schedule.strategies[step % schedule.strategies.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strategy_text_round_trips() {
        for s in MaskSchedule::default().strategies {
            assert_eq!(s.to_string().parse::<MaskStrategy>().unwrap(), s);
        }
        assert_eq!(
            "sig(PPG,ECG)".parse::<MaskStrategy>().unwrap(),
            MaskStrategy::signal(&[Channel::Ecg, Channel::Ppg])
        );
        assert!("block".parse::<MaskStrategy>().is_err());
    }

    #[test]
    fn schedule_parses_lists_and_presets() {
        let d = MaskSchedule::default();
        assert_eq!(d.to_string().parse::<MaskSchedule>().unwrap(), d);
        assert_eq!("all".parse::<MaskSchedule>().unwrap(), d);
        let s: MaskSchedule = "inter, sig(ECG,ABP)".parse().unwrap();
        assert_eq!(s.len(), 2);
        for name in ["inter", "intra", "signal", "inter-intra"] {
            assert_eq!(MaskSchedule::preset(name).unwrap().len(), 10);
        }
        let sig = MaskSchedule::preset("signal").unwrap();
        assert!(sig.strategies.iter().all(|s| matches!(s, MaskStrategy::Signal(_))));
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ch = Channel::ALL;
        assert!(sample_mask(&MaskStrategy::Inter, &ch, 20, 0.01, &mut rng).is_err());
        assert!(sample_mask(&MaskStrategy::Intra, &ch, 20, 0.99, &mut rng).is_err());
        assert!(sample_mask(&MaskStrategy::Inter, &ch, 20, 1.0, &mut rng).is_err());
        let all = MaskStrategy::signal(&ch);
        assert!(sample_mask(&all, &ch, 20, 0.4, &mut rng).is_err());
        let abp = MaskStrategy::signal(&[Channel::Abp]);
        assert!(sample_mask(&abp, &[Channel::Ecg], 20, 0.4, &mut rng).is_err());
    }

    #[test]
    fn restricted_schedule_drops_unusable_signal_masks() {
        let s = MaskSchedule::default().restricted_to(&[Channel::Ecg]);
        assert!(s.strategies.iter().all(|s| !matches!(s, MaskStrategy::Signal(_))));
        let s = MaskSchedule::default().restricted_to(&[Channel::Ecg, Channel::Ppg]);
        assert!(s.strategies.contains(&MaskStrategy::signal(&[Channel::Ecg])));
        assert!(!s.strategies.contains(&MaskStrategy::signal(&[Channel::Abp])));
    }
}
