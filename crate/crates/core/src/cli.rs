//! The `neuroclip` command line: gen-data, train, eval, export-sim, gradcheck.
//!
//! Any `--section.key value` (or `--section.key=value`) argument overrides
//! the loaded config before the subcommand runs.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autograd::GradFault;
use crate::checkpoint::Checkpoint;
use crate::checks::{check_component, Component};
use crate::config::{RunConfig, CONFIG_ENV};
use crate::data::{load_dataset, save_dataset, synthetic_zero_shot, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::metrics::{similarity_csv, RetrievalReport};
use crate::train::{evaluate_zero_shot, fit};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "neuroclip", version, about = "EEG-image contrastive alignment")]
struct Cli {
    /// TOML run config; defaults fill every omitted key.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset with a zero-shot split.
    GenData(GenDataArgs),
    /// Train and keep the checkpoint with the lowest validation loss.
    Train(TrainArgs),
    /// Zero-shot retrieval report as JSON.
    Eval(EvalArgs),
    /// Write the test similarity matrix as CSV, plus its report as JSON.
    ExportSim(ExportArgs),
    /// Compare analytic and finite-difference gradients per component.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    times: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Classes withheld for the test split.
    #[arg(long)]
    held_out: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// CSV path; the report goes next to it with a `.json` extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    components: Vec<String>,
    #[arg(long)]
    all: bool,
    /// A single seed; seeds 0..3 when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

/// Splits dotted `--a.b value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.to_str().and_then(|s| s.strip_prefix("--")).filter(|k| {
            let name = k.split('=').next().unwrap_or("");
            name.contains('.') && !name.starts_with('.') && !name.ends_with('.')
        });
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let k = k.to_string();
                    let v = it.next().ok_or_else(|| Error::Config(format!("--{k} needs a value")))?;
                    let v = v.into_string().map_err(|_| Error::Config(format!("--{k}: value is not UTF-8")))?;
                    overrides.push((k, v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Removes a claimed output path on drop unless committed.
struct Output {
    path: PathBuf,
    keep: bool,
}

impl Output {
    fn claim(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !force {
                return Err(Error::Config(format!("{} already exists; pass --force to replace it", path.display())));
            }
            remove(path)?;
        }
        Ok(Self { path: path.to_path_buf(), keep: false })
    }

    fn commit(mut self) {
        self.keep = true;
    }
}

impl Drop for Output {
    fn drop(&mut self) {
        if !self.keep && self.path.exists() {
            let _ = remove(&self.path);
        }
    }
}

fn remove(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path)?;
    } else {
        fs::remove_file(path)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// A closed pipe on stdout (`| head`) is not a failure.
fn print_stdout(s: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(s.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn base_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    cfg.with_overrides(overrides)
}

fn gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let out = Output::claim(&a.out, a.force)?;
    let d = &cfg.data;
    let sc = SyntheticConfig {
        seed: a.seed.unwrap_or(cfg.seed),
        classes: a.classes.unwrap_or(d.classes),
        per_class: a.per_class.unwrap_or(d.per_class),
        channels: a.channels.unwrap_or(d.channels),
        times: a.times.unwrap_or(d.times),
        image_size: a.image_size.unwrap_or(d.image_size),
        noise: a.noise.unwrap_or(d.noise),
        patch: cfg.backbone.patch,
    };
    let ds = synthetic_zero_shot(&sc, a.held_out.unwrap_or(d.held_out), a.val_samples.unwrap_or(d.val_samples))?;
    save_dataset(&ds, &a.out)?;
    out.commit();
    for (name, b) in &ds.splits {
        log::info!("{name}: {} pairs, {} classes", b.len(), b.classes().len());
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<RetrievalReport>,
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.repeats {
        cfg.trainer.repeats = r;
    }
    let ds = load_dataset(&a.data)?;
    // Geometry comes from the data; the config records it.
    let dims = &ds.manifest.dims;
    (cfg.data.channels, cfg.data.times, cfg.data.image_size) = (dims.channels, dims.times, dims.height);
    cfg.validate()?;
    let (tr, va) = (ds.split("train")?, ds.split("val")?);
    let test = ds.splits.get("test");

    let out = Output::claim(&a.out, a.force)?;
    fs::create_dir_all(&a.out)?;
    let repeats = cfg.trainer.repeats;
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed + r as u64;
        let dir = if repeats == 1 { a.out.clone() } else { a.out.join(format!("run-{r}")) };
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), run_cfg.to_toml_string())?;
        let mut log = BufWriter::new(File::create(dir.join("log.jsonl"))?);
        log::info!("run {r}: seed {}, {} epochs", run_cfg.seed, run_cfg.trainer.epochs);
        let fitted = fit(tr, va, &run_cfg, Some(&mut log))?;
        log.flush()?;
        fitted.best.save(&dir)?;
        let test = match test {
            Some(t) => Some(evaluate_zero_shot(&fitted.best, t, &run_cfg.eval.ks)?.report),
            None => None,
        };
        log::info!("run {r}: best epoch {} val loss {:.6}", fitted.best.epoch, fitted.best.val_loss);
        runs.push(RunSummary { seed: run_cfg.seed, best_epoch: fitted.best.epoch, val_loss: fitted.best.val_loss, test });
    }
    let mean = mean_report(runs.iter().filter_map(|r| r.test.as_ref()));
    write_json(&a.out.join("summary.json"), &serde_json::json!({ "runs": runs, "mean": mean }))?;
    out.commit();
    Ok(())
}

/// Averages Top-k and mAP across reports; `None` when there are none.
fn mean_report<'a>(reports: impl Iterator<Item = &'a RetrievalReport>) -> Option<serde_json::Value> {
    let reports: Vec<_> = reports.collect();
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mut obj = serde_json::Map::new();
    for k in first.top_k.keys() {
        let m = reports.iter().filter_map(|r| r.top_k.get(k)).sum::<f64>() / n;
        obj.insert(k.clone(), m.into());
    }
    obj.insert("mAP".into(), (reports.iter().map(|r| r.map).sum::<f64>() / n).into());
    Some(obj.into())
}

fn load_for_eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    ks: Option<&Vec<usize>>,
    overrides: &[(String, String)],
) -> Result<(Checkpoint, crate::data::PairedBatch, Vec<usize>)> {
    let mut c = Checkpoint::load(ckpt)?;
    if !overrides.is_empty() {
        c.config = c.config.with_overrides(overrides)?;
    }
    let ks = ks.cloned().unwrap_or_else(|| c.config.eval.ks.clone());
    let ds = load_dataset(data)?;
    let batch = ds.split(split)?.clone();
    Ok((c, batch, ks))
}

fn eval(a: &EvalArgs, overrides: &[(String, String)]) -> Result<()> {
    let (c, test, ks) = load_for_eval(&a.checkpoint, &a.data, &a.split, a.ks.as_ref(), overrides)?;
    let out = a.out.as_deref().map(|p| Output::claim(p, a.force)).transpose()?;
    let r = evaluate_zero_shot(&c, &test, &ks)?;
    print_stdout(&(serde_json::to_string_pretty(&r.report)? + "\n"))?;
    if let (Some(guard), Some(path)) = (out, &a.out) {
        write_json(path, &r.report)?;
        guard.commit();
    }
    Ok(())
}

fn export_sim(a: &ExportArgs, overrides: &[(String, String)]) -> Result<()> {
    let (c, test, ks) = load_for_eval(&a.checkpoint, &a.data, &a.split, None, overrides)?;
    let json_path = a.out.with_extension("json");
    let csv_out = Output::claim(&a.out, a.force)?;
    let json_out = Output::claim(&json_path, a.force)?;
    let r = evaluate_zero_shot(&c, &test, &ks)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, similarity_csv(&r.similarity)?)?;
    let mut report = r.report;
    report.similarity_path = Some(a.out.display().to_string());
    write_json(&json_path, &report)?;
    csv_out.commit();
    json_out.commit();
    Ok(())
}

fn parse_fault(s: &str) -> Result<GradFault> {
    Ok(match s {
        "sigmoid" => GradFault::Sigmoid,
        "gelu" => GradFault::Gelu,
        "softmax" => GradFault::Softmax,
        "matmul" => GradFault::MatMul,
        "layer-norm" => GradFault::LayerNorm,
        "im2col" => GradFault::Im2Col,
        "plane-conv" => GradFault::PlaneConv,
        _ => return Err(Error::Config(format!("unknown fault {s:?}"))),
    })
}

/// Returns whether every check passed.
fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let components: Vec<Component> = if a.all {
        Component::ALL.to_vec()
    } else if a.components.is_empty() {
        return Err(Error::Config("name at least one component or pass --all".into()));
    } else {
        a.components.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let seeds: Vec<u64> = match a.seed {
        Some(s) => vec![s],
        None => (0..3).collect(),
    };
    let opts = GradCheckOptions { tol: a.tol, fault: a.fault.as_deref().map(parse_fault).transpose()?, ..Default::default() };
    let mut ok = true;
    for c in components {
        for &seed in &seeds {
            let r = check_component(c, seed, &opts)?;
            ok &= r.passed;
            print_stdout(&(serde_json::to_string(&r)? + "\n"))?;
        }
    }
    Ok(ok)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (args, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = (|| -> Result<bool> {
        match &cli.command {
            Command::GenData(a) => gen_data(&base_config(cli.config.as_deref(), &overrides)?, a).map(|_| true),
            Command::Train(a) => train(base_config(cli.config.as_deref(), &overrides)?, a).map(|_| true),
            Command::Eval(a) => eval(a, &overrides).map(|_| true),
            Command::ExportSim(a) => export_sim(a, &overrides).map(|_| true),
            Command::Gradcheck(a) => gradcheck(a),
        }
    })();
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, o) =
            split_overrides(os(&["neuroclip", "train", "--loss.mu", "1", "--data", "d", "--trainer.epochs=3"])).unwrap();
        assert_eq!(rest, os(&["neuroclip", "train", "--data", "d"]));
        assert_eq!(o, vec![("loss.mu".into(), "1".into()), ("trainer.epochs".into(), "3".into())]);
        assert!(split_overrides(os(&["x", "--loss.mu"])).is_err());
    }

    #[test]
    fn bad_override_names_the_key() {
        let e = base_config(None, &[("loss.beta".into(), "2".into())]).unwrap_err();
        assert!(e.to_string().contains("loss.beta"), "{e}");
        let e = base_config(None, &[("loss.nope".into(), "2".into())]).unwrap_err();
        assert!(e.to_string().contains("nope"), "{e}");
    }

    #[test]
    fn output_guard_cleans_up_unless_committed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out");
        {
            let _g = Output::claim(&p, false).unwrap();
            fs::create_dir_all(p.join("x")).unwrap();
        }
        assert!(!p.exists());
        let g = Output::claim(&p, false).unwrap();
        fs::create_dir_all(&p).unwrap();
        g.commit();
        assert!(matches!(Output::claim(&p, false), Err(Error::Config(_))));
        assert!(Output::claim(&p, true).is_ok());
    }
}
