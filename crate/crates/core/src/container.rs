//! On-disk dataset and checkpoint directories.
//!
//! Both use a JSON descriptor next to a flat little-endian `f32` blob.
//! Values are rounded to `f32` on save; a save/load/save cycle is
//! byte-identical.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::{Channel, Dataset, Labels, SignalSample, FS_HZ, SAMPLE_LEN};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::preprocess::NormalizationStats;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const SIGNALS: &str = "signals.f32";
const LABELS: &str = "labels.json";
const DESCRIPTOR: &str = "checkpoint.json";
const WEIGHTS: &str = "weights.f32";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(format_err(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub fs_hz: f64,
    pub sample_seconds: f64,
    pub channels: Vec<String>,
    pub n_samples: usize,
    pub label_schema: Vec<String>,
    pub normalization: Option<NormalizationStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    sample_id: u64,
    sbp: f64,
    dbp: f64,
    map: f64,
    hypotensive: bool,
    sv_proxy: f64,
    age_proxy: f64,
    heart_rate: f64,
}

const LABEL_SCHEMA: [&str; 8] = [
    "sample_id",
    "sbp",
    "dbp",
    "map",
    "hypotensive",
    "sv_proxy",
    "age_proxy",
    "heart_rate",
];

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &ds.samples {
        if s.channels.iter().any(|c| c.len() != SAMPLE_LEN) {
            return Err(Error::Data(format!("record {} is not {SAMPLE_LEN} samples long", s.sample_id)));
        }
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        fs_hz: FS_HZ,
        sample_seconds: SAMPLE_LEN as f64 / FS_HZ,
        channels: Channel::ALL.iter().map(|c| c.to_string()).collect(),
        n_samples: ds.len(),
        label_schema: LABEL_SCHEMA.iter().map(|s| s.to_string()).collect(),
        normalization: ds.normalization.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_f32s(
        &dir.join(SIGNALS),
        ds.samples.iter().flat_map(|s| s.channels.iter().flatten().copied()),
    )?;
    let labels: Vec<LabelRecord> = ds
        .samples
        .iter()
        .map(|s| {
            let l = &s.labels;
            LabelRecord {
                sample_id: s.sample_id,
                sbp: l.sbp,
                dbp: l.dbp,
                map: l.map,
                hypotensive: l.hypotensive,
                sv_proxy: l.sv_proxy,
                age_proxy: l.age_proxy,
                heart_rate: l.heart_rate,
            }
        })
        .collect();
    write_json(&dir.join(LABELS), &labels)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if m.version != FORMAT_VERSION {
        return Err(format_err(format!("dataset version {} (expected {FORMAT_VERSION})", m.version)));
    }
    let expected: Vec<String> = Channel::ALL.iter().map(|c| c.to_string()).collect();
    if m.channels != expected || m.fs_hz != FS_HZ || m.sample_seconds * m.fs_hz != SAMPLE_LEN as f64 {
        return Err(format_err(format!(
            "dataset layout {:?} at {} Hz for {} s is not supported",
            m.channels, m.fs_hz, m.sample_seconds
        )));
    }
    let raw = read_f32s(&dir.join(SIGNALS))?;
    let per = Channel::ALL.len() * SAMPLE_LEN;
    if raw.len() != m.n_samples * per {
        return Err(format_err(format!(
            "signal file holds {} bytes, manifest implies {}",
            raw.len() * 4,
            m.n_samples * per * 4
        )));
    }
    let labels: Vec<LabelRecord> = read_json(&dir.join(LABELS))?;
    if labels.len() != m.n_samples {
        return Err(format_err(format!("{} label records for {} samples", labels.len(), m.n_samples)));
    }
    let samples = raw
        .chunks_exact(per)
        .zip(labels)
        .map(|(block, l)| {
            let mut it = block.chunks_exact(SAMPLE_LEN).map(<[f64]>::to_vec);
            let channels = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
            SignalSample {
                sample_id: l.sample_id,
                channels,
                labels: Labels {
                    sbp: l.sbp,
                    dbp: l.dbp,
                    map: l.map,
                    hypotensive: l.hypotensive,
                    sv_proxy: l.sv_proxy,
                    age_proxy: l.age_proxy,
                    heart_rate: l.heart_rate,
                },
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        normalization: m.normalization,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Position of the training streams; every random draw in pretraining is
/// derived from the seed and these counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub micro_batch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub rng: RngState,
    /// Optimizer updates applied.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub rng: RngState,
    pub step: u64,
}

pub fn save_checkpoint(model: &Model, rng: RngState, step: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let desc = CheckpointDescriptor {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        rng,
        step,
    };
    write_json(&dir.join(DESCRIPTOR), &desc)?;
    write_f32s(&dir.join(WEIGHTS), params.tensors().iter().flat_map(|t| t.data().iter().copied()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let desc: CheckpointDescriptor = read_json(&dir.join(DESCRIPTOR))?;
    if desc.version != FORMAT_VERSION {
        return Err(format_err(format!("checkpoint version {} (expected {FORMAT_VERSION})", desc.version)));
    }
    let flat = read_f32s(&dir.join(WEIGHTS))?;
    let total: usize = desc.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(format_err(format!("weights hold {} values, descriptor lists {total}", flat.len())));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for e in &desc.tensors {
        let n: usize = e.shape.iter().product();
        store.push(e.name.clone(), Tensor::new(e.shape.clone(), flat[at..at + n].to_vec())?);
        at += n;
    }
    let model = Model::from_params(desc.config, &store)?;
    Ok(Checkpoint {
        model,
        rng: desc.rng,
        step: desc.step,
    })
}
