//! `qmix`: generate synthetic radar data, train and evaluate the nowcasting
//! variants, audit parameter counts, tune the VQ bottleneck and explain
//! predictions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qmix_core::checkpoint;
use qmix_core::config::{SeedStream, RESOLVED_CONFIG_FILE};
use qmix_core::data::{generate, read_rseq, split_sequences, write_rseq, RadarSequence, Splits};
use qmix_core::explain::{export_embedding_inputs, gradcam_sweep, write_sweep, CamTarget};
use qmix_core::metrics::{evaluate, write_metrics_csv, Forecaster};
use qmix_core::train::{train_with, write_history_csv, Control};
use qmix_core::tune::{tune_vq, GRID_BETA, GRID_K};
use qmix_core::vq::write_codebook_csv;
use qmix_core::{Error, FormatError, Model, ModelConfig, RunConfig, Variant};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  invalid configuration or usage
  3  file system error
  4  malformed input file
  5  checkpoint does not match the configured variant
  6  training diverged";

#[derive(Parser)]
#[command(name = "qmix", version, about = "Radar precipitation nowcasting with compact attention UNets", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic `.rseq` sequences to `--out`.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant; writes the best checkpoint, history and test metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or the persistence baseline, on the test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to the `run.resolved.cfg` next to the checkpoint when
        /// `--config` is absent.
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["persistence"])]
        baseline: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable parameter counts.
    AuditParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Count all four variants and their reduction versus the baseline.
        #[arg(long)]
        all_variants: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search codebook size and commitment weight.
    TuneVq {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM maps for every encoder and decoder level of one test sample.
    Gradcam {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the codebook, and with `--data` the bottleneck vectors of the
    /// first test samples with their assignments.
    ExportCodebook {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Shape(_) => 2,
        Error::Io { .. } => 3,
        Error::Format(FormatError::RegistryMismatch { .. } | FormatError::ShapeMismatch { .. }) => 5,
        Error::Format(_) => 4,
        Error::Training(_) => 6,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Shape(_) => "shape",
        Error::Io { .. } => "io",
        Error::Format(FormatError::RegistryMismatch { .. } | FormatError::ShapeMismatch { .. }) => "variant-mismatch",
        Error::Format(_) => "format",
        Error::Training(_) => "training",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, so scripts can split on the first two colons
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", kind(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(args: &ConfigArgs, fallback: Option<&Path>) -> qmix_core::Result<RunConfig> {
    let mut cfg = match (&args.config, fallback) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(path)) if path.exists() => RunConfig::from_file(path)?,
        _ => RunConfig::default(),
    };
    cfg.apply_overrides(args.set.iter().map(String::as_str))?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> qmix_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> qmix_core::Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> qmix_core::Result<()> {
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(|e| Error::io(path, e))
}

fn sequence_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq_{i:04}.rseq"))
}

/// Every `.rseq` file in `dir`, in file-name order.
fn load_sequences(dir: &Path) -> qmix_core::Result<Vec<RadarSequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rseq"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Usage(format!("no .rseq files in {}", dir.display())));
    }
    paths.iter().map(|p| read_rseq(p)).collect()
}

fn load_splits(dir: &Path, cfg: &RunConfig) -> qmix_core::Result<Splits> {
    let seqs = load_sequences(dir)?;
    let size = cfg.model.input_size;
    if let Some(s) = seqs.iter().find(|s| s.height != size || s.width != size) {
        return Err(Error::Config(format!(
            "data frames are {}x{} but input_size is {size}",
            s.height, s.width
        )));
    }
    split_sequences(&seqs, &cfg.split)
}

fn load_model(cfg: &ModelConfig, path: &Path) -> qmix_core::Result<Model<f32>> {
    let mut model = Model::build(cfg, 0)?;
    checkpoint::load(&mut model, path)?;
    Ok(model)
}

fn checkpoint_config(path: &Path) -> Option<PathBuf> {
    path.parent().map(|dir| dir.join(RESOLVED_CONFIG_FILE))
}

fn run(command: Command) -> qmix_core::Result<()> {
    match command {
        Command::GenerateData { cfg, out } => {
            let cfg = resolve(&cfg, None)?;
            create_dir(&out)?;
            for i in 0..cfg.n_sequences {
                let seq = generate(&cfg.generator_for(i as u64))?;
                write_rseq(&sequence_path(&out, i), &seq)?;
            }
            cfg.write_resolved(&out)?;
            println!("wrote {} sequences to {}", cfg.n_sequences, out.display());
        }
        Command::Train { cfg, data, out } => {
            let cfg = resolve(&cfg, None)?;
            let splits = load_splits(&data, &cfg)?;
            create_dir(&out)?;
            cfg.write_resolved(&out)?;
            let mut model = Model::<f32>::build(&cfg.model, cfg.seed_for(SeedStream::Init))?;
            let outcome = train_with(&mut model, &splits.train, &splits.val, &cfg.train_config(), |_, r| {
                eprintln!("epoch {:>3}  train {:.6}  val {:.6}  lr {:.1e}", r.epoch, r.train_loss, r.val_loss, r.lr);
                Control::Continue
            })?;
            write_with(&out.join("history.csv"), |b| write_history_csv(b, &outcome.history))?;
            checkpoint::save(&model, &out.join("model.ckpt"))?;
            let report = evaluate(&Forecaster::Model(&model), &splits.test, cfg.split.rain_threshold, cfg.train.batch_size)?;
            let rows = [(cfg.model.variant.to_string(), report)];
            write_with(&out.join("metrics.csv"), |b| write_metrics_csv(b, &rows))?;
            println!(
                "best epoch {} (val loss {:.6}); test MSE {:.6}, F1 {:.4}",
                outcome.best_epoch, outcome.best_val_loss, report.mse, report.f1
            );
        }
        Command::Evaluate { cfg, checkpoint, baseline, data, out } => {
            let fallback = checkpoint.as_deref().and_then(checkpoint_config);
            let cfg = resolve(&cfg, fallback.as_deref())?;
            let splits = load_splits(&data, &cfg)?;
            create_dir(&out)?;
            cfg.write_resolved(&out)?;
            let mut rows = Vec::new();
            if let Some(path) = &checkpoint {
                let model = load_model(&cfg.model, path)?;
                let report = evaluate(&Forecaster::Model(&model), &splits.test, cfg.split.rain_threshold, cfg.train.batch_size)?;
                rows.push((cfg.model.variant.to_string(), report));
            }
            if baseline.is_some() {
                let report = evaluate(&Forecaster::<f32>::Persistence, &splits.test, cfg.split.rain_threshold, 1)?;
                rows.push(("persistence".to_string(), report));
            }
            write_with(&out.join("metrics.csv"), |b| write_metrics_csv(b, &rows))?;
            write_metrics_csv(&mut std::io::stdout(), &rows).map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::AuditParams { cfg, all_variants, out } => {
            let cfg = resolve(&cfg, None)?;
            let variants: Vec<Variant> = if all_variants { Variant::ALL.to_vec() } else { vec![cfg.model.variant] };
            let count = |v: Variant| -> qmix_core::Result<usize> {
                Ok(Model::<f32>::build(&cfg.model.clone().with_variant(v), 0)?.count_parameters().total)
            };
            let baseline = count(Variant::Baseline)?;
            let mut table = String::from("variant,params,reduction_vs_baseline_pct\n");
            for v in variants {
                let n = count(v)?;
                let pct = 100.0 * (1.0 - n as f64 / baseline as f64);
                table.push_str(&format!("{v},{n},{pct:.2}\n"));
            }
            print!("{table}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                cfg.write_resolved(&dir)?;
                let path = dir.join("param_audit.csv");
                fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::TuneVq { cfg, data, out } => {
            let cfg = resolve(&cfg, None)?;
            let splits = load_splits(&data, &cfg)?;
            create_dir(&out)?;
            cfg.write_resolved(&out)?;
            let grid = tune_vq(
                &cfg.model,
                cfg.seed_for(SeedStream::Init),
                &cfg.tune_train_config(),
                &GRID_K,
                &GRID_BETA,
                &splits.train,
                &splits.val,
                |k, beta, v| eprintln!("K={k:<3} beta={beta:<5} val MSE {v:.6}"),
            )?;
            write_with(&out.join("tune_vq_grid.csv"), |b| grid.write_csv(b))?;
            for (k, beta, msg) in &grid.failures {
                eprintln!("cell K={k} beta={beta} failed: {msg}");
            }
            match grid.argmin() {
                Some((k, beta, v)) => println!("argmin K={k} beta={beta} val MSE {v:.6}"),
                None => println!("no finite cell"),
            }
        }
        Command::Gradcam { cfg, checkpoint, data, sample, out } => {
            let cfg = resolve(&cfg, checkpoint_config(&checkpoint).as_deref())?;
            let splits = load_splits(&data, &cfg)?;
            let model = load_model(&cfg.model, &checkpoint)?;
            if sample >= splits.test.len() {
                return Err(Error::Usage(format!("sample {sample} out of range: test split has {}", splits.test.len())));
            }
            let (x, _) = splits.test.batch(&[sample])?;
            let maps = gradcam_sweep(&model, &x, &CamTarget::MeanPrediction)?;
            create_dir(&out)?;
            cfg.write_resolved(&out)?;
            let written = write_sweep(&model, &maps, &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
        Command::ExportCodebook { cfg, checkpoint, data, samples, out } => {
            let cfg = resolve(&cfg, checkpoint_config(&checkpoint).as_deref())?;
            let model = load_model(&cfg.model, &checkpoint)?;
            create_dir(&out)?;
            cfg.write_resolved(&out)?;
            let mut cb = Vec::new();
            let mut written = vec!["codebook.csv"];
            match &data {
                Some(dir) => {
                    let splits = load_splits(dir, &cfg)?;
                    let n = samples.min(splits.test.len());
                    let (batch, _) = splits.test.batch(&(0..n).collect::<Vec<_>>())?;
                    let mut asg = Vec::new();
                    export_embedding_inputs(&model, &batch, &mut cb, &mut asg)?;
                    write_bytes(&out.join("assignments.csv"), &asg)?;
                    written.push("assignments.csv");
                }
                None => {
                    let book = model
                        .codebook
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("variant {} has no codebook", model.variant())))?;
                    let usage = model.buffers.get(book.usage).data().to_vec();
                    write_codebook_csv(&mut cb, model.params.value(book.table), &usage).map_err(|e| Error::io(&out, e))?;
                }
            }
            write_bytes(&out.join("codebook.csv"), &cb)?;
            println!("wrote {} to {}", written.join(", "), out.display());
        }
    }
    Ok(())
}
