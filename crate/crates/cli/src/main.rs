use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;

use rgbx_depth::augment::{AugmentConfig, Augmenter};
use rgbx_depth::harness::{
    evaluate, infer_files, prepare_eval_set, train, EvalConfig, TrainConfig,
};
use rgbx_depth::io::{read_dataset, write_sample, Sample};
use rgbx_depth::seed::{rng_from, split_seed};
use rgbx_depth::synth::generate_split;
use rgbx_depth::{selftest, Error, Result, UNet};

#[derive(Parser)]
#[command(
    name = "rgbx",
    version,
    about = "Depth completion from RGB and raw depth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade GT depth into training triples (RGB, X, GT).
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON augmentation config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a split of synthetic scenes.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Train a network and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: `<out>.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at several sparsity levels.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01,0.1,1")]
        sparsity: Vec<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Depth unit assumed when an input has no valid pixel.
        #[arg(long, default_value_t = 1.0)]
        fallback_scale: f64,
    },
    /// Predict a depth map for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        x: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks and metric reference checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Augment {
            input,
            out,
            config,
            seed,
        } => {
            let mut config: AugmentConfig = read_json(config.as_deref())?;
            config.seed = seed;
            let augmenter = Augmenter::new(config)?;
            let samples = read_dataset(&input)?;
            for (i, s) in samples.iter().enumerate() {
                let t = augmenter.sample(&s.rgb, &s.gt, split_seed(seed, i as u64))?;
                write_sample(&out, &s.id, &t.rgb, &t.gt, Some(&t.x))?;
            }
            log::info!(
                "wrote {} training samples to {}",
                samples.len(),
                out.display()
            );
        }
        Command::Synth {
            n,
            out,
            seed,
            height,
            width,
        } => {
            let scenes = generate_split(n, seed, height, width)?;
            for (i, scene) in scenes.iter().enumerate() {
                let s = Sample::from_scene(format!("scene_{i:05}"), scene);
                write_sample(&out, &s.id, &s.rgb, &s.gt, None)?;
            }
            log::info!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            data,
            config,
            out,
            log,
        } => {
            let config: TrainConfig = read_json(config.as_deref())?;
            let mut samples = read_dataset(&data)?;
            samples.shuffle(&mut rng_from(config.seed, u64::MAX));
            let n_val = (samples.len() as f64 * config.val_fraction).round() as usize;
            let val = samples.split_off(samples.len() - n_val);
            let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
            let mut log_file = create(&log_path)?;
            let outcome = train(&samples, &val, &config, &mut log_file)?;
            log_file.flush().map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            outcome.best.save(&out)?;
            for r in &outcome.history {
                println!(
                    "epoch {:>3}  loss {:.5}  val_rmse {}",
                    r.epoch,
                    r.train_loss,
                    r.val_rmse.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
            println!(
                "saved {} (best epoch {:?})",
                out.display(),
                outcome.best_epoch
            );
        }
        Command::Eval {
            ckpt,
            data,
            sparsity,
            report,
            seed,
            height,
            fallback_scale,
        } => {
            let net = UNet::load(&ckpt)?;
            let set = prepare_eval_set(&read_dataset(&data)?, height)?;
            let config = EvalConfig {
                sparsity_levels: sparsity,
                seed,
                target_height: height,
                fallback_scale,
                ..EvalConfig::default()
            };
            let table = evaluate(&net, &set, &config)?;
            println!(
                "{:>9} {:>9} {:>9} {:>9} {:>9}",
                "sparsity", "OE", "SRMSE", "RMSE", "Abs"
            );
            for l in &table.levels {
                let m = &l.metrics;
                println!(
                    "{:>9} {:>9.5} {:>9.5} {:>9.5} {:>9.5}",
                    l.sparsity, m.oe, m.srmse, m.rmse, m.abs_rel
                );
            }
            if let Some(path) = report {
                let mut f = create(&path)?;
                serde_json::to_writer_pretty(&mut f, &table)?;
                writeln!(f).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Infer { ckpt, rgb, x, out } => infer_files(&ckpt, &rgb, x.as_deref(), &out)?,
        Command::Selftest { seed } => {
            let results = selftest::run_all(seed)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {:<36} {:.3e} (limit {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.value,
                    r.tolerance
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
