use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use banet::config::{EvalSplit, RunConfig};
use banet::data::{load_dataset, load_image, save_mask, write_synth_dataset, Sample};
use banet::train::eval::evaluate_csv;
use banet::train::trainer::Trainer;
use banet::train::{load_model, predict_mask};
use banet::verify::{run_all, VerifyConfig};
use banet::{DataError, Error, TensorError};
use sha2::{Digest, Sha256};

use crate::{Cli, Command};

pub const RESOLVED_CONFIG: &str = "config.resolved.txt";

pub struct Failure {
    pub code: u8,
    pub source: anyhow::Error,
}

const CONFIG: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;
const VERIFY: u8 = 4;

fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Config(_) | Error::Invalid(_) | Error::CheckpointMismatch(_) | Error::DuplicateParam(_) => CONFIG,
        Error::Data(_) | Error::EmptyDataset | Error::Io { .. } => DATA,
        Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. }) | Error::MissingGradient(_) => NUMERIC,
        Error::Tensor(TensorError::Io(_) | TensorError::Format(_)) => DATA,
        Error::Tensor(_) => CONFIG,
    };
    Failure {
        code,
        source: e.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        classify(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        classify(Error::Data(e))
    }
}

impl From<banet::config::ConfigError> for Failure {
    fn from(e: banet::config::ConfigError) -> Self {
        classify(Error::Config(e))
    }
}

fn fail(code: u8, source: anyhow::Error) -> Failure {
    Failure { code, source }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    fail(DATA, anyhow::Error::new(e).context(path.display().to_string()))
}

/// `<root>/<first 12 hex of sha256(resolved config)>-<UTC timestamp>`.
fn run_dir(cli: &Cli, cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let digest = Sha256::digest(format!("{command}\n{}", cfg.dump()).as_bytes());
    let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    cli.runs_root.join(format!("{command}-{hash}-{stamp}"))
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.dump()).map_err(|e| io_fail(&path, e))
}

/// Train and test splits: the last `holdout` samples (ids sorted) are the test split.
fn split(cfg: &RunConfig, mut all: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    if cfg.data.holdout > all.len() {
        return Err(fail(
            CONFIG,
            anyhow!("data.holdout = {} exceeds the {} samples found", cfg.data.holdout, all.len()),
        ));
    }
    let test = all.split_off(all.len() - cfg.data.holdout);
    Ok((all, test))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train { resume: Some(dir) } => return resume(&cli, dir),
        Command::Verify { quick } => return verify(&cli, *quick),
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets)?;
    match &cli.command {
        Command::Synth => {
            let dir = run_dir(&cli, &cfg, "synth");
            prepare_dir(&dir, &cfg)?;
            let data = dir.join("dataset");
            let samples = write_synth_dataset(&cfg.synth, &data)?;
            println!("wrote {} samples to {}", samples.len(), data.display());
            Ok(())
        }
        Command::Train { resume: None } => {
            let dir = run_dir(&cli, &cfg, "train");
            prepare_dir(&dir, &cfg)?;
            let (train, _) = split(&cfg, load_dataset(&cfg.data.dir, cfg.data.edge_width)?)?;
            let mut trainer = Trainer::new(&cfg.model, &cfg.train, train.len())?;
            fit(&mut trainer, &train, &dir, &cfg)
        }
        Command::Eval { checkpoint } => {
            let dir = run_dir(&cli, &cfg, "eval");
            prepare_dir(&dir, &cfg)?;
            let (train, test) = split(&cfg, load_dataset(&cfg.data.dir, cfg.data.edge_width)?)?;
            let data = match cfg.eval.split {
                EvalSplit::Train => train,
                EvalSplit::Test if cfg.data.holdout > 0 => test,
                EvalSplit::Test | EvalSplit::All => [train, test].concat(),
            };
            let (net, store) = load_model(&cfg.model, checkpoint)?;
            let csv = evaluate_csv(&net, &store, &data, cfg.eval.threshold, cfg.train.augment.out_size)?;
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &csv).map_err(|e| io_fail(&path, e))?;
            if let Some(mean) = csv.lines().last() {
                println!("{mean}");
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Predict { checkpoint, image } => {
            let dir = run_dir(&cli, &cfg, "predict");
            prepare_dir(&dir, &cfg)?;
            let (net, store) = load_model(&cfg.model, checkpoint)?;
            let img = load_image(image)?;
            let mask = predict_mask(&net, &store, &img, cfg.eval.threshold, cfg.train.augment.out_size)?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let path = dir.join(format!("{stem}_mask.pgm"));
            save_mask(&mask, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train { resume: Some(_) } | Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn fit(trainer: &mut Trainer, train: &[Sample], dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let epochs = cfg.train.epochs;
    trainer.fit(train, dir, |r, secs| {
        println!(
            "epoch {}/{epochs} iter {} lr {:.3e} loss {:.5} (decoder {:.5}) {secs:.1}s",
            r.epoch, r.iter, r.lr, r.loss.total, r.loss.decoder
        );
    })?;
    println!("run directory {}", dir.display());
    Ok(())
}

/// Resume uses the configuration saved with the run, then any overrides.
fn resume(cli: &Cli, dir: &Path) -> Result<(), Failure> {
    let saved = dir.join(RESOLVED_CONFIG);
    if !saved.exists() {
        return Err(fail(CONFIG, anyhow!("{} has no {RESOLVED_CONFIG}", dir.display())));
    }
    let cfg = RunConfig::resolve(Some(&saved), &cli.sets)?;
    let (train, _) = split(&cfg, load_dataset(&cfg.data.dir, cfg.data.edge_width)?)?;
    let mut trainer = Trainer::resume(&cfg.model, &cfg.train, train.len(), dir)
        .map_err(classify)
        .map_err(|f| Failure {
            code: f.code,
            source: f.source.context(format!("resuming {}", dir.display())),
        })?;
    // Overrides such as a longer schedule become part of the run's record.
    prepare_dir(dir, &cfg)?;
    println!("resuming after epoch {}", trainer.epochs_done());
    fit(&mut trainer, &train, dir, &cfg)
}

fn verify(cli: &Cli, quick: bool) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets)?;
    let dir = run_dir(cli, &cfg, "verify");
    prepare_dir(&dir, &cfg)?;
    let vc = if quick {
        VerifyConfig {
            instances: 3,
            metric_pairs: 100,
            ..VerifyConfig::default()
        }
    } else {
        VerifyConfig::default()
    };
    let checks = run_all(&vc);
    let mut report = String::new();
    for c in &checks {
        let line = format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    let path = dir.join("verify.txt");
    std::fs::write(&path, report)
        .with_context(|| path.display().to_string())
        .map_err(|e| fail(DATA, e))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(fail(VERIFY, anyhow!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
