//! Command-line surface: dataset generation, training, evaluation,
//! hyperparameter sweeps, and embedding/correlation exports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use edrl_core::checkpoint::{load_checkpoint, save_checkpoint};
use edrl_core::config::{EdrlConfig, Regime};
use edrl_core::datagen::{self, SyntheticSpec};
use edrl_core::error::Error;
use edrl_core::metrics::MetricsReport;
use edrl_core::model::{EdrlModel, STREAM_EVAL};
use edrl_core::train::{correlation_on_split, evaluate_at_epoch, sweep, train, SweepParam};
use edrl_core::RngState;

#[derive(Parser)]
#[command(
    name = "edrl",
    about = "Essence-point and disentangled representation learning on synthetic two-modality data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenerateData {
        /// Generation spec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Print the effective spec JSON to stdout.
        #[arg(long)]
        print_spec: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Run configuration JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file from generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// complete | noise:<var>:<M1|M2> | missing:<M1|M2>
        #[arg(long)]
        regime: Option<String>,
        /// Pin every training step to the configured regime instead of
        /// sampling a corruption per step.
        #[arg(long)]
        fixed_regime: bool,
        /// Use distribution means for inference-time guiding tokens.
        #[arg(long)]
        deterministic_guiding: Option<bool>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint under a regime and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// complete | noise:<var>:<M1|M2> | missing:<M1|M2>; defaults to
        /// the checkpoint's configured regime.
        #[arg(long)]
        regime: Option<String>,
        /// Report JSON output path; stdout always gets a copy.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train across a parameter grid and emit a CSV of final metrics.
    Sweep {
        /// p | noise_var
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0.3,0.4,0.5,0.6,0.7
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-sample fused embeddings or the correlation matrix.
    Export {
        /// embeddings | correlation
        #[arg(long)]
        what: String,
        /// csv | png (png applies to correlation only)
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Domain { .. } | Error::NonFinite { .. } | Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Format(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // usage errors (unknown flag, missing argument) go to stderr
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{what} {}: {e}", path.display())))
}

fn load_config(path: &Option<PathBuf>) -> Result<EdrlConfig, Error> {
    match path {
        Some(p) => read_json(p, "config"),
        None => Ok(EdrlConfig::default()),
    }
}

fn report_json(config: &EdrlConfig, report: &MetricsReport) -> serde_json::Value {
    json!({
        "config": config,
        "regime": report.regime,
        "acc": report.accuracy,
        "auc": report.macro_auc,
        "f1": report.macro_f1,
        "per_class": report.per_class,
        "seed": config.seed,
        "epoch": report.epoch,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenerateData { spec, out, print_spec } => {
            let spec: SyntheticSpec = match &spec {
                Some(p) => read_json(p, "spec")?,
                None => SyntheticSpec::default(),
            };
            if print_spec {
                println!("{}", serde_json::to_string_pretty(&spec).unwrap());
            }
            let dataset = datagen::generate(&spec)?;
            datagen::save(&out, &dataset)?;
            println!(
                "wrote {} ({} train / {} test samples)",
                out.display(),
                dataset.train.len(),
                dataset.test.len()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            regime,
            fixed_regime,
            deterministic_guiding,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = regime {
                cfg.regime = r.parse()?;
            }
            if fixed_regime {
                cfg.fixed_regime = true;
            }
            if let Some(d) = deterministic_guiding {
                cfg.deterministic_guiding = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let dataset = datagen::load(&data)?;
            let result = train(&cfg, &dataset)?;
            for epoch in &result.history {
                let line: Vec<String> = epoch
                    .reports
                    .iter()
                    .map(|r| {
                        format!(
                            "{}: acc={:.4} auc={:.4} f1={:.4}",
                            r.regime, r.accuracy, r.macro_auc, r.macro_f1
                        )
                    })
                    .collect();
                println!(
                    "epoch {:>3}  loss={:<8.4} {}",
                    epoch.epoch,
                    epoch.mean_loss,
                    line.join("  ")
                );
            }
            save_checkpoint(&out, &result.model, &result.final_rng, cfg.epochs)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, regime, report } => {
            let (model, _rng, epoch) = load_checkpoint(&ckpt)?;
            let dataset = datagen::load(&data)?;
            let regime: Regime = match regime {
                Some(r) => r.parse()?,
                None => model.config.regime,
            };
            let metrics = evaluate_at_epoch(&model, &dataset.test, &regime, epoch)?;
            let payload = report_json(&model.config, &metrics);
            let text = serde_json::to_string_pretty(&payload).unwrap();
            if let Some(path) = report {
                fs::write(&path, &text)?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Sweep { param, values, seeds, config, data, out } => {
            let param: SweepParam = param.parse()?;
            let values = parse_list::<f64>(&values, "values")?;
            let cfg = load_config(&config)?;
            let seeds = match seeds {
                Some(s) => parse_list::<u64>(&s, "seeds")?,
                None => vec![cfg.seed],
            };
            let dataset = datagen::load(&data)?;
            let rows = sweep(&cfg, &dataset, param, &values, &seeds)?;
            let mut csv = String::from("param,value,seed,acc,auc,f1\n");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.param, row.value, row.seed, row.accuracy, row.macro_auc, row.macro_f1
                ));
            }
            match out {
                Some(path) => {
                    fs::write(&path, &csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Export { what, format, ckpt, data, out } => {
            let (model, _rng, _epoch) = load_checkpoint(&ckpt)?;
            let dataset = datagen::load(&data)?;
            match (what.as_str(), format.as_str()) {
                ("embeddings", "csv") => export_embeddings(&model, &dataset, &out),
                ("correlation", "csv") => {
                    let corr = correlation_on_split(&model, &dataset.test)?;
                    let d = corr.full.shape()[0];
                    let values = corr.full.to_vec();
                    let mut csv = String::new();
                    for row in 0..d {
                        let cells: Vec<String> = (0..d)
                            .map(|col| format!("{:.16e}", values[row * d + col]))
                            .collect();
                        csv.push_str(&cells.join(","));
                        csv.push('\n');
                    }
                    fs::write(&out, csv)?;
                    println!("wrote {}", out.display());
                    Ok(())
                }
                ("correlation", "png") => {
                    let corr = correlation_on_split(&model, &dataset.test)?;
                    write_heatmap(&corr.full.to_vec(), corr.full.shape()[0], &out)?;
                    println!("wrote {}", out.display());
                    Ok(())
                }
                ("embeddings", "png") => Err(Error::InvalidArgument(
                    "embeddings export is CSV-only; PNG applies to correlation".into(),
                )),
                (w, f) => Err(Error::InvalidArgument(format!(
                    "unknown export `{w}`/`{f}` (expected embeddings|correlation and csv|png)"
                ))),
            }
        }
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, Error> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry `{v}`")))
        })
        .collect()
}

/// Per-sample fused features of the test split with labels and
/// availability, for external projection tools.
fn export_embeddings(model: &EdrlModel, dataset: &datagen::Dataset, out: &Path) -> Result<(), Error> {
    let test = &dataset.test;
    let mut rng = RngState::with_stream(model.config.seed, STREAM_EVAL + 3);
    let fwd = model.forward(test, &mut rng, false, !model.config.deterministic_guiding)?;
    let fused = fwd.fused.to_vec();
    let width = fwd.fused.shape()[1];
    let mut csv = String::from("label,avail_m1,avail_m2");
    for i in 0..width {
        csv.push_str(&format!(",f{i}"));
    }
    csv.push('\n');
    for (i, (&label, avail)) in test.labels.iter().zip(&test.availability).enumerate() {
        csv.push_str(&format!(
            "{label},{},{}",
            u8::from(avail[0]),
            u8::from(avail[1])
        ));
        for v in &fused[i * width..(i + 1) * width] {
            csv.push_str(&format!(",{v:.16e}"));
        }
        csv.push('\n');
    }
    fs::write(out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Diverging blue-white-red heatmap of a [-1, 1] matrix, upscaled 8x.
fn write_heatmap(values: &[f64], d: usize, out: &Path) -> Result<(), Error> {
    const SCALE: u32 = 8;
    let side = d as u32 * SCALE;
    let mut img = image::RgbImage::new(side, side);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        let row = (y / SCALE) as usize;
        let col = (x / SCALE) as usize;
        let c = values[row * d + col].clamp(-1.0, 1.0);
        let fade = (255.0 * (1.0 - c.abs())) as u8;
        *pixel = if c >= 0.0 {
            image::Rgb([255, fade, fade])
        } else {
            image::Rgb([fade, fade, 255])
        };
    }
    img.save(out)
        .map_err(|e| Error::Io(format!("writing {}: {e}", out.display())))?;
    Ok(())
}
