//! Argument handling and subcommands behind the `physmae` binary.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use physmae_core::container::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, RngState};
use physmae_core::data::{channels_label, derive_seed, parse_channels, FS_HZ};
use physmae_core::experiment::{ablation_study, model_grad_check, prepare_cohorts, pretrain_on, write_ablation_table, Ablation, ExperimentConfig};
use physmae_core::masking::{sample_mask, MaskStrategy};
use physmae_core::model::ModelConfig;
use physmae_core::preprocess::{denormalize_channel, preprocess_dataset_with};
use physmae_core::probe::{run_benchmark, write_reports, ProbeTask};
use physmae_core::{Channel, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "physmae", version, about = "Multi-signal masked autoencoder for ECG, PPG and ABP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Filter, quality-check and normalise a raw dataset.
    Preprocess(PreprocessArgs),
    /// Self-supervised pretraining on a preprocessed dataset.
    Pretrain(PretrainArgs),
    /// Mask one record and write original vs reconstructed waveforms.
    Reconstruct(ReconstructArgs),
    /// Linear probes on frozen embeddings.
    Probe(ProbeArgs),
    /// Finite-difference check of every model gradient.
    Gradcheck(GradcheckArgs),
    /// Pretrain and probe one model per ablation switch.
    Ablate(AblateArgs),
    /// Print the effective configuration as JSON.
    Config(ConfigArgs),
}

/// Options that override the configuration file.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON configuration; missing fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model architecture preset: desk, paper or toy.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub patch_seconds: Option<f64>,
    /// Masking schedule preset (all, inter, intra, signal, inter-intra) or a
    /// comma list such as `inter,intra,sig(ecg)`. Accumulation steps follow
    /// its length.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Inference signals, e.g. `ecg+ppg`.
    #[arg(long)]
    pub signals: Option<String>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs of linear-probe training.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Generate the labelled downstream cohort instead of the pretraining one.
    #[arg(long)]
    pub downstream: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reuse the normalisation statistics of this preprocessed dataset.
    #[arg(long)]
    pub stats_from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; preprocessing draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `inter`, `intra` or `signal(abp)` style strategy.
    #[arg(long, default_value = "signal(abp)")]
    pub strategy: String,
    /// Record to reconstruct; defaults to the first held-out record.
    #[arg(long)]
    pub sample_id: Option<u64>,
    #[arg(long, default_value_t = 0.4)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving one `<signal>.tsv` per model signal.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed labelled dataset; its train split fits the probes and
    /// its validation split scores them.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma list of tasks; all five by default.
    #[arg(long)]
    pub tasks: Option<String>,
    /// Comma list of label fractions; 1,0.1,0.01 by default.
    #[arg(long)]
    pub fraction: Option<String>,
    /// Results table path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub patch_seconds: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma list of arms; overrides `--ablation`. Default
    /// all,inter,intra,rmse-only.
    #[arg(long)]
    pub arms: Option<String>,
    #[arg(long)]
    pub pretrain_samples: Option<usize>,
    #[arg(long)]
    pub downstream_samples: Option<usize>,
    /// Skip writing one checkpoint per arm.
    #[arg(long)]
    pub no_checkpoints: bool,
    /// Output directory: `ablation.tsv`, `config.json`, `checkpoints/`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Builds the effective configuration: flags override the file, which
/// overrides the built-in desk defaults.
pub fn resolve_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &a.preset {
        cfg.model = ModelConfig::preset(p)?;
    }
    if let Some(r) = a.mask_ratio {
        cfg.train.mask_ratio = r;
    }
    if let Some(p) = a.patch_seconds {
        cfg.model.patch.patch_seconds = p;
    }
    if let Some(s) = &a.schedule {
        cfg.schedule = s.parse()?;
        cfg.train.accumulation_steps = cfg.schedule.len();
    }
    if let Some(s) = &a.signals {
        cfg.signals = parse_channels(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(e) = a.probe_epochs {
        cfg.probe.epochs = e;
    }
    if let Some(ab) = &a.ablation {
        ab.parse::<Ablation>()?.apply(&mut cfg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
}

fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let f: f64 = p.trim().parse().map_err(|_| Error::Config(format!("bad fraction '{p}'")))?;
            if f > 0.0 && f <= 1.0 {
                Ok(f)
            } else {
                Err(Error::Config(format!("fraction {f} outside (0, 1]")))
            }
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Probe(a) => probe(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Config(a) => {
            let cfg = resolve_config(&a)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let mut cohort = if a.downstream { cfg.downstream_cohort } else { cfg.pretrain_cohort };
    if let Some(s) = a.seed {
        cohort.seed = s;
    }
    if let Some(n) = a.n {
        cohort.n_samples = n;
    }
    let ds = cohort.generate()?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let raw = load_dataset(&a.input)?;
    let stats = match &a.stats_from {
        Some(p) => Some(
            load_dataset(p)?
                .normalization
                .ok_or_else(|| Error::Data(format!("{} carries no normalisation statistics", p.display())))?,
        ),
        None => None,
    };
    let (ds, report) = preprocess_dataset_with(&raw, stats.as_ref())?;
    save_dataset(&ds, &a.out)?;
    report.write_tsv(create(&a.out.join("qc.tsv"))?)?;
    println!("accepted {} of {} records", report.accepted(), raw.len());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = load_dataset(&a.data)?;
    let out = pretrain_on(&cfg, &data)?;
    let rng = RngState {
        seed: cfg.train.seed,
        epoch: cfg.train.epochs as u64,
        micro_batch: out.history.len() as u64,
    };
    save_checkpoint(&out.model, rng, out.updates, &a.out)?;
    out.write_history(create(&a.out.join("loss_history.tsv"))?)?;
    let mut w = create(&a.out.join("epoch_losses.tsv"))?;
    writeln!(w, "epoch\tmean_loss")?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        writeln!(w, "{}\t{l:.9}", e + 1)?;
    }
    w.flush()?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "{} updates; mean loss {:.4} (epoch 1) -> {:.4} (epoch {})",
        out.updates,
        out.epoch_losses[0],
        out.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.epoch_losses.len()
    );
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model;
    let data = load_dataset(&a.data)?;
    let sample = match a.sample_id {
        Some(id) => data
            .samples
            .iter()
            .find(|s| s.sample_id == id)
            .ok_or_else(|| Error::Data(format!("no record with id {id}")))?,
        None => *data
            .validation()
            .first()
            .or(data.samples.first().as_ref())
            .ok_or_else(|| Error::Data("dataset is empty".into()))?,
    };
    let strategy: MaskStrategy = a.strategy.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, sample.sample_id));
    let mask = sample_mask(&strategy, model.channels(), model.num_patches(), a.mask_ratio, &mut rng)?;
    let rec = model.reconstruct(&[sample], std::slice::from_ref(&mask))?;
    fs::create_dir_all(&a.out)?;
    let p = model.patch_len();
    for (row, &c) in model.channels().iter().enumerate() {
        let (orig, recon) = match &data.normalization {
            Some(st) => (denormalize_channel(sample.channel(c), c, st), denormalize_channel(&rec[row][0], c, st)),
            None => (sample.channel(c).to_vec(), rec[row][0].clone()),
        };
        let mut w = create(&a.out.join(format!("{}.tsv", c.name())))?;
        writeln!(w, "time\toriginal\treconstructed\tmasked")?;
        for (t, (o, r)) in orig.iter().zip(&recon).enumerate() {
            let masked = mask.rows[row][t / p] as u8;
            writeln!(w, "{:.2}\t{o:.6}\t{r:.6}\t{masked}", t as f64 / FS_HZ)?;
        }
        w.flush()?;
    }
    println!(
        "record {} with {} written to {}",
        sample.sample_id,
        strategy,
        a.out.display()
    );
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let seed = a.seed.unwrap_or(0);
    let model = load_checkpoint(&a.checkpoint)?.model;
    let data = load_dataset(&a.data)?;
    let tasks: Vec<ProbeTask> = match &a.tasks {
        Some(t) => parse_list(t)?,
        None => ProbeTask::ALL.to_vec(),
    };
    let subsets: Vec<Vec<Channel>> = if a.cfg.signals.is_some() {
        vec![cfg.signals.clone()]
    } else {
        vec![vec![Channel::Ecg], vec![Channel::Ppg], vec![Channel::Ecg, Channel::Ppg]]
    };
    let fractions = match &a.fraction {
        Some(f) => parse_fractions(f)?,
        None => vec![1.0, 0.1, 0.01],
    };
    let reports = run_benchmark(&model, &data.train(), &data.validation(), &tasks, &subsets, &fractions, &cfg.probe, seed)?;
    let mut w = create(&a.out)?;
    write_reports(&mut w, &reports)?;
    w.flush()?;
    println!("{} reports written to {}", reports.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut model = match &a.config {
        Some(p) => resolve_config(&ConfigArgs {
            config: Some(p.clone()),
            ..ConfigArgs::default()
        })?
        .model,
        None => ModelConfig::preset(&a.preset)?,
    };
    if let Some(p) = a.patch_seconds {
        model.patch.patch_seconds = p;
    }
    let rep = model_grad_check(&model, a.seed, a.tol)?;
    let verdict = if rep.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict} checked {} scalars, max relative error {:.3e} (tolerance {:.0e})",
        rep.checked, rep.max_rel_error, a.tol
    );
    if rep.passed {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} at {:?}{}",
            rep.max_rel_error,
            rep.worst,
            rep.diagnostic.map(|d| format!(" ({d})")).unwrap_or_default()
        )))
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    // --ablation names the arm to run, so it is not applied to the base
    let mut cfg = resolve_config(&ConfigArgs {
        ablation: None,
        ..a.cfg.clone()
    })?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.pretrain_samples {
        cfg.pretrain_cohort.n_samples = n;
    }
    if let Some(n) = a.downstream_samples {
        cfg.downstream_cohort.n_samples = n;
    }
    let arms: Vec<Ablation> = match (&a.arms, &a.cfg.ablation) {
        (Some(list), _) => parse_list(list)?,
        (None, Some(one)) => vec![one.parse()?],
        (None, None) => vec![Ablation::All, Ablation::Inter, Ablation::Intra, Ablation::RmseOnly],
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let cohorts = prepare_cohorts(&cfg)?;
    let ck_dir = a.out.join("checkpoints");
    let results = ablation_study(
        &cfg,
        &arms,
        &cohorts,
        (!a.no_checkpoints).then_some(ck_dir.as_path()),
        |r| {
            eprintln!(
                "{}: loss {:.4} -> {:.4}, hypotension AU-ROC {:.4} ({})",
                r.ablation,
                r.first_epoch_loss,
                r.final_epoch_loss,
                r.hypotension.value,
                channels_label(&cfg.signals)
            )
        },
    )?;
    let mut w = create(&a.out.join("ablation.tsv"))?;
    write_ablation_table(&mut w, &results)?;
    w.flush()?;
    println!("{} arms written to {}", results.len(), a.out.join("ablation.tsv").display());
    Ok(())
}
