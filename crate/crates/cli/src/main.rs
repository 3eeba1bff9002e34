use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m3fas_core::channel::{build_dataset, DatasetConfig, DeviceResponse, FaceImage};
use m3fas_core::echo::preprocess;
use m3fas_core::harness::checkpoint::{Record, RecordData};
use m3fas_core::harness::{
    evaluate_at, infer, load_dataset, make_splits, select_thresholds, train::train_with_observer,
    Checkpoint, HarnessError, RunConfig,
};
use m3fas_core::model::Route;
use m3fas_core::signal::{assemble_probe_signal, read_wav, write_wav};

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Parser)]
#[command(
    name = "m3fas",
    version,
    about = "Multimodal (face image + acoustic echo) anti-spoofing toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the probe signal as 16-bit PCM WAV.
    GenSignal {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a labelled dataset of face images and recordings.
    Simulate {
        /// Total number of samples; split evenly over devices and both labels.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        devices: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the echo pipeline on one recording and store its spectrogram.
    Extract {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-head metrics for one split as TSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a single presentation.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        wav: Option<PathBuf>,
        /// v (vision), a (acoustic) or f (fusion).
        #[arg(long)]
        route: String,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::desk()),
    }
}

fn gen_signal(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let probe = assemble_probe_signal(&cfg.signal)?;
    write_wav(&probe, out)?;
    eprintln!(
        "wrote {} samples at {} Hz to {}",
        probe.len(),
        probe.sample_rate,
        out.display()
    );
    Ok(())
}

fn simulate(n: usize, devices: usize, out: &Path, seed: u64, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    if devices == 0 || n == 0 || !n.is_multiple_of(2 * devices) {
        return Err(HarnessError::InvalidInput(format!(
            "--n {n} must be a positive multiple of 2 x --devices ({devices})"
        )));
    }
    let devs: Vec<DeviceResponse> = (0..devices as u64).map(DeviceResponse::random).collect();
    let ds = DatasetConfig {
        probe: cfg.signal.clone(),
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(n / (2 * devices), &devs, &ds, seed, out)?;
    eprintln!("wrote {} samples to {}", manifest.rows.len(), out.display());
    Ok(())
}

fn extract(wav: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let rec = read_wav(wav)?;
    let spec = preprocess(&rec, &cfg.pipeline()?)?;
    let ck = Checkpoint {
        records: vec![Record {
            name: "spectrogram".into(),
            data: RecordData::F64 {
                dims: vec![spec.n_freq, spec.n_frames],
                values: spec.magnitudes,
            },
        }],
    };
    ck.save(out)?;
    eprintln!(
        "wrote {}x{} spectrogram to {}",
        spec.n_freq,
        spec.n_frames,
        out.display()
    );
    Ok(())
}

fn load_examples(cfg: &RunConfig, data: &Path) -> Result<m3fas_core::harness::Dataset> {
    let ds = load_dataset(data, cfg.image_size(), &cfg.pipeline()?)?;
    for (id, why) in &ds.dropped {
        eprintln!("dropped {id}: {why}");
    }
    Ok(ds)
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let ds = load_examples(&cfg, data)?;
    let splits = make_splits(&ds.examples, &cfg.train.split, cfg.train.seed)?;
    eprintln!(
        "{} examples: train {}, val {}, test {}",
        ds.examples.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let outcome = train_with_observer(&ds.examples, &splits, &cfg, |log| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val_hter {:.4}",
            log.epoch, log.train_loss, log.val_hter
        );
    })?;
    Checkpoint::from_model(
        &outcome.model,
        &cfg,
        outcome.best_epoch,
        outcome.best_val_hter,
    )
    .save(out)?;
    eprintln!(
        "best epoch {} (val HTER {:.4}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.best_val_hter,
        out.display()
    );
    Ok(())
}

fn restore(ckpt: &Path) -> Result<(RunConfig, m3fas_core::model::Model)> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = ck.config()?;
    let model = ck.restore(&cfg.model)?;
    Ok((cfg, model))
}

fn run_eval(ckpt: &Path, data: &Path, split: &str) -> Result<()> {
    let (cfg, model) = restore(ckpt)?;
    let ds = load_examples(&cfg, data)?;
    let splits = make_splits(&ds.examples, &cfg.train.split, cfg.train.seed)?;
    let thresholds = select_thresholds(&model, &ds.examples, &splits, cfg.train.threshold)?;
    let report = evaluate_at(&model, &ds.examples, splits.get(split)?, &thresholds)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn run_infer(ckpt: &Path, image: Option<&Path>, wav: Option<&Path>, route: &str) -> Result<()> {
    let route: Route = route.parse().map_err(HarnessError::InvalidInput)?;
    let (cfg, model) = restore(ckpt)?;
    let image = image.map(FaceImage::load_png).transpose()?;
    let rec = wav.map(read_wav).transpose()?;
    let scores = infer(
        &model,
        &cfg.pipeline()?,
        image.as_ref(),
        rec.as_ref(),
        route,
    )?;
    for (head, s) in [
        ("vision", scores.vision),
        ("acoustic", scores.acoustic),
        ("fusion", scores.fusion),
    ] {
        if let Some(s) = s {
            println!("{head}\t{}", s[0]);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSignal { config, out } => gen_signal(config.as_deref(), &out),
        Command::Simulate {
            n,
            devices,
            out,
            seed,
            config,
        } => simulate(n, devices, &out, seed, config.as_deref()),
        Command::Extract { wav, config, out } => extract(&wav, config.as_deref(), &out),
        Command::Train { config, data, out } => run_train(config.as_deref(), &data, &out),
        Command::Eval { ckpt, data, split } => run_eval(&ckpt, &data, &split),
        Command::Infer {
            ckpt,
            image,
            wav,
            route,
        } => run_infer(&ckpt, image.as_deref(), wav.as_deref(), &route),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
