//! `drna` command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage error,
//! 3 configuration error, 4 data or checkpoint error, 5 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::synth::{generate_synthetic, SyntheticSpec};
use crate::data::{dataset_stats, load_image, load_manifest, load_samples, split_70_30, DatasetManifest, Split};
use crate::error::{DrnaError, Result};
use crate::eval::{accuracy_table, best_worst_classes, MetricsReport};
use crate::net::checkpoint;
use crate::net::model::ModelState;
use crate::overlay::render_region_overlays;
use crate::trainer::config::TrainConfig;
use crate::trainer::{train, Trainer};

pub const DATA_ROOT_ENV: &str = "DRNA_DATA_ROOT";
pub const CONFIG_ECHO: &str = "config.txt";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const OVERLAY_SCALE: u32 = 4;

#[derive(Debug, Parser)]
#[command(name = "drna", version, about = "Region-oriented logo classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset tree and write checkpoints, the epoch log and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint on the test split of a dataset tree.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checked against the checkpoint's own configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw navigator and crop boxes over images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        images: Vec<PathBuf>,
    },
    /// Generate a synthetic dataset tree.
    Synth {
        /// Synthetic spec file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Print per-category class and image counts.
    Stats {
        #[arg(long, env = DATA_ROOT_ENV)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &DrnaError) -> i32 {
    match err {
        DrnaError::Config(_) => 3,
        DrnaError::Data(_) | DrnaError::Image { .. } | DrnaError::Checkpoint(_) => 4,
        DrnaError::NonFinite { .. } => 5,
        DrnaError::Shape { .. } | DrnaError::Domain(_) | DrnaError::Io { .. } => 1,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| DrnaError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DrnaError::io(path, e))
}

fn prepare_out(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() && !overwrite {
        let mut entries = fs::read_dir(out).map_err(|e| DrnaError::io(out, e))?;
        if entries.next().is_some() {
            return Err(DrnaError::config(format!(
                "output directory {} is not empty; pass --overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| DrnaError::io(out, e))
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| DrnaError::Domain(e.to_string()))?;
    write(&out.join("metrics.json"), json)?;
    write(&out.join("roc.tsv"), report.roc_tsv())?;
    let bw = best_worst_classes(report, 5);
    let mut t = String::from("group\tclass\ttop1\n");
    for (group, rows) in [("best", &bw.best), ("worst", &bw.worst)] {
        for r in rows.iter() {
            t.push_str(&format!("{group}\t{}\t{}\n", r.name, r.top1));
        }
    }
    write(&out.join("best_worst.tsv"), t)
}

fn method_label(report: &MetricsReport) -> &'static str {
    match report.method.as_str() {
        "drna" => "DRNA-Net",
        _ => "Baseline",
    }
}

fn load_split(data: &Path, seed: u64) -> Result<DatasetManifest> {
    Ok(split_70_30(&load_manifest(data)?, seed))
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    overwrite: bool,
    stdout: &mut dyn Write,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = load_split(data, cfg.seed)?;
    let train_set = load_samples::<f32>(&manifest, Split::Train, cfg.input_size)?;
    let test_set = load_samples::<f32>(&manifest, Split::Test, cfg.input_size)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(DrnaError::config("training and test splits must both be non-empty"));
    }
    let names = manifest.class_names();
    prepare_out(out, overwrite)?;
    write(&out.join(CONFIG_ECHO), cfg.echo())?;
    write(&out.join("manifest.tsv"), manifest.to_tsv())?;
    let model = ModelState::<f32>::new(cfg.arch(names.len()), cfg.seed)?;
    checkpoint::save(&out.join("initial.drna"), &model, &cfg, &names)?;
    let log_path = out.join(EPOCH_LOG);
    write(&log_path, "")?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| DrnaError::io(&log_path, e))?;
    let best_path = out.join("best.drna");
    let outcome = train(model, &train_set, &test_set, &names, &cfg, &mut |rec, _, m, is_best| {
        let line = serde_json::to_string(rec).map_err(|e| DrnaError::Domain(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| DrnaError::io(&log_path, e))?;
        if is_best {
            checkpoint::save(&best_path, m, &cfg, &names)?;
        }
        Ok(())
    })?;
    if let Some(report) = outcome.reports.last() {
        checkpoint::save(&out.join("final.drna"), &outcome.model, &cfg, &names)?;
        write_report(out, report)?;
        let _ = write!(stdout, "{}", accuracy_table(&[(method_label(report), report.top1, report.top5)]));
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, config: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let c = checkpoint::load::<f32>(ckpt)?;
    if let Some(p) = config {
        let given = TrainConfig::parse(&read_text(p)?)?;
        if let Some(key) = given.model_mismatch(&c.config) {
            return Err(DrnaError::config(format!(
                "config key `{key}` does not match the checkpoint"
            )));
        }
    }
    let manifest = load_split(data, c.config.seed)?;
    if manifest.class_names() != c.class_names {
        return Err(DrnaError::data("dataset classes differ from the checkpoint's classes"));
    }
    let test_set = load_samples::<f32>(&manifest, Split::Test, c.config.input_size)?;
    if test_set.is_empty() {
        return Err(DrnaError::config("test split is empty"));
    }
    let trainer = Trainer::new(&c.model, &c.config)?;
    let report = trainer.evaluate(&c.model, &test_set, &c.class_names)?;
    fs::create_dir_all(out).map_err(|e| DrnaError::io(out, e))?;
    write(&out.join(CONFIG_ECHO), c.config.echo())?;
    write_report(out, &report)?;
    let _ = write!(stdout, "{}", accuracy_table(&[(method_label(&report), report.top1, report.top5)]));
    Ok(())
}

fn cmd_visualize(ckpt: &Path, out: &Path, images: &[PathBuf], stdout: &mut dyn Write) -> Result<()> {
    let c = checkpoint::load::<f32>(ckpt)?;
    if images.is_empty() {
        return Ok(());
    }
    let trainer = Trainer::new(&c.model, &c.config)?;
    let inputs = images
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((format!("{i:04}_{stem}"), load_image::<f32>(p, c.config.input_size)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let overlays = render_region_overlays(&c.model, &trainer.anchors, &trainer.settings, &inputs, out, OVERLAY_SCALE)?;
    write(&out.join(CONFIG_ECHO), c.config.echo())?;
    let _ = writeln!(stdout, "wrote {} overlays to {}", overlays.len(), out.display());
    Ok(())
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>, overwrite: bool, stdout: &mut dyn Write) -> Result<()> {
    let mut s = match spec {
        Some(p) => SyntheticSpec::parse(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = seed {
        s.seed = v;
    }
    let m = generate_synthetic(&s, out, overwrite)?;
    let _ = writeln!(stdout, "wrote {} images in {} classes to {}", m.image_count(), m.classes.len(), out.display());
    Ok(())
}

fn cmd_stats(data: &Path, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let stats = dataset_stats(&load_manifest(data)?);
    let _ = write!(stdout, "{}", stats.table());
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| DrnaError::io(o, e))?;
        let json = serde_json::to_string_pretty(&stats).map_err(|e| DrnaError::Domain(e.to_string()))?;
        write(&o.join("stats.json"), json)?;
    }
    Ok(())
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            overwrite,
        } => cmd_train(config.as_deref(), &data, &out, seed, overwrite, stdout),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
        } => cmd_eval(&checkpoint, &data, &out, config.as_deref(), stdout),
        Command::Visualize { checkpoint, out, images } => cmd_visualize(&checkpoint, &out, &images, stdout),
        Command::Synth {
            config,
            out,
            seed,
            overwrite,
        } => cmd_synth(config.as_deref(), &out, seed, overwrite, stdout),
        Command::Stats { data, out } => cmd_stats(&data, out.as_deref(), stdout),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, S>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
