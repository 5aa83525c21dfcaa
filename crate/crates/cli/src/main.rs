//! `csr`: data generation, label corruption, training and analysis of runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use csr_core::config::{apply_override, parse_config};
use csr_core::data::{load_csv, make_gaussian_clusters, save_csv, ClusterSpec, Dataset, Split};
use csr_core::diagnostics::{lag_experiment, series_incoordination, spearman};
use csr_core::noise_synth::{idn_noise, symmetric_noise, DEFAULT_FLIP_STD};
use csr_core::rundir::{metrics_column, report, report_table, write_run};
use csr_core::selection::{joint_partition, select_low};
use csr_core::{train, Error, Method, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "csr", version, about = "Coordinated sparse recovery for noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-cluster dataset as train.csv and test.csv.
    GenData(GenData),
    /// Corrupt the labels of a dataset CSV.
    Corrupt(Corrupt),
    /// Train one run per seed and write run directories.
    Train(Train),
    /// Write plot-ready time series from a run directory.
    Diagnose(RunDir),
    /// Partition a finished run's training set into clean, hard and noisy.
    Select(Select),
    /// Delay the v trajectory of a baseline run and measure the effect.
    LagExp(LagExp),
    /// Aggregate run directories into a per-method table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 3.5)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    within_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Idn,
    Symmetric,
}

#[derive(Args)]
struct Corrupt {
    #[arg(long, value_parser = existing_file)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "idn")]
    kind: NoiseKind,
    #[arg(long, default_value_t = 0.4)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sidecar with `index,clean,noisy,flipped`; defaults to `<output>.record.csv`.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    #[arg(long = "train", value_parser = existing_file)]
    train_path: PathBuf,
    #[arg(long = "test", value_parser = existing_file)]
    test_path: PathBuf,
    /// Number of classes; inferred from the labels when omitted.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct Settings {
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// key=value file applied on top of the defaults.
    #[arg(long, value_parser = existing_file)]
    config: Option<PathBuf>,
    /// key=value override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    settings: Settings,
    /// Run directory, or parent of `seed<k>` directories when several seeds are given.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; overrides the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct RunDir {
    run: PathBuf,
}

#[derive(Args)]
struct Select {
    run: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct LagExp {
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 5, 10, 20])]
    shifts: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn existing_file(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve_config(s: &Settings) -> Result<TrainConfig> {
    let mut cfg = match &s.config {
        Some(p) => parse_config(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = s.method {
        cfg.method = m;
    }
    for o in &s.overrides {
        apply_override(&mut cfg, o)?;
    }
    Ok(cfg)
}

fn load_pair(d: &Data) -> Result<(Dataset, Dataset)> {
    let mut tr = load_csv(&d.train_path, d.classes, Split::Train)?;
    let mut te = load_csv(&d.test_path, d.classes, Split::Test)?;
    let k = tr.classes.max(te.classes);
    tr.classes = k;
    te.classes = k;
    if tr.dim != te.dim {
        return Err(Error::Dimension {
            expected: tr.dim,
            got: te.dim,
        });
    }
    Ok((tr, te))
}

fn gen_data(a: &GenData) -> Result<()> {
    let (tr, te) = make_gaussian_clusters(&ClusterSpec {
        samples: a.samples,
        classes: a.classes,
        dim: a.dim,
        separation: a.separation,
        within_std: a.within_std,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out)?;
    save_csv(&tr, &a.out.join("train.csv"))?;
    save_csv(&te, &a.out.join("test.csv"))?;
    println!("wrote {} train and {} test rows to {}", tr.len(), te.len(), a.out.display());
    Ok(())
}

fn corrupt(a: &Corrupt) -> Result<()> {
    let mut ds = load_csv(&a.input, None, Split::Train)?;
    let truth = ds.clean_labels.clone().unwrap_or_else(|| ds.labels.clone());
    let rec = match a.kind {
        NoiseKind::Idn => idn_noise(&ds.features, ds.dim, &truth, a.rate, ds.classes, a.seed, DEFAULT_FLIP_STD)?,
        NoiseKind::Symmetric => symmetric_noise(&truth, a.rate, ds.classes, a.seed)?,
    };
    ds.labels = rec.noisy.clone();
    ds.clean_labels = Some(truth);
    save_csv(&ds, &a.output)?;
    let record = a.record.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".record.csv");
        p.into()
    });
    fs::write(&record, rec.to_csv_string())?;
    println!(
        "target rate {} achieved {:.4} ({} of {} flipped)",
        a.rate,
        rec.achieved_rate,
        rec.mislabeled.len(),
        ds.len()
    );
    Ok(())
}

/// Returns whether any run diverged.
fn train_cmd(a: &Train) -> Result<bool> {
    let base = resolve_config(&a.settings)?;
    let (tr, te) = load_pair(&a.data)?;
    let runs: Vec<(u64, PathBuf)> = match a.seeds.as_slice() {
        [] => vec![(base.seed, a.out.clone())],
        [s] => vec![(*s, a.out.clone())],
        many => many.iter().map(|&s| (s, a.out.join(format!("seed{s}")))).collect(),
    };
    let mut diverged = false;
    for (seed, dir) in runs {
        let cfg = TrainConfig { seed, ..base.clone() };
        let out = train(&tr, &te, &cfg)?;
        write_run(&dir, &cfg, &out, &tr)?;
        for w in &out.log.warnings {
            eprintln!("warning: {w}");
        }
        match out.log.diverged_at {
            Some(e) => {
                diverged = true;
                eprintln!("{}: diverged at epoch {e}; last good state written", dir.display());
            }
            None => println!(
                "{}: {} seed {seed} test accuracy {:.4}",
                dir.display(),
                cfg.method,
                out.log.final_test_accuracy()
            ),
        }
    }
    Ok(diverged)
}

fn read_metrics(run: &Path) -> Result<String> {
    Ok(fs::read_to_string(run.join("metrics.csv"))?)
}

fn series_csv(header: &str, epochs: &[f64], columns: &[Vec<f64>]) -> String {
    let mut out = format!("{header}\n");
    for (t, e) in epochs.iter().enumerate() {
        let _ = write!(out, "{e}");
        for c in columns {
            let _ = write!(out, ",{}", c[t]);
        }
        out.push('\n');
    }
    out
}

fn diagnose(a: &RunDir) -> Result<()> {
    let text = read_metrics(&a.run)?;
    let col = |name: &str| metrics_column(&text, name);
    let epochs = col("epoch")?;
    let theta = col("grad_theta")?;
    let v = col("grad_v")?;

    // incoordination over the gradient history up to each epoch; undefined
    // (NaN) while the v gradients are still all zero
    let incoord: Vec<f64> = (0..epochs.len())
        .map(|t| series_incoordination(&theta[..=t], &v[..=t]).unwrap_or(f64::NAN))
        .collect();
    fs::write(
        a.run.join("incoordination.csv"),
        series_csv("epoch,incoordination", &epochs, &[incoord]),
    )?;
    fs::write(a.run.join("nfr.csv"), series_csv("epoch,nfr", &epochs, &[col("nfr")?]))?;
    fs::write(
        a.run.join("selection_pr.csv"),
        series_csv(
            "epoch,su_precision,su_recall,sl_precision,sl_recall",
            &epochs,
            &[col("su_precision")?, col("su_recall")?, col("sl_precision")?, col("sl_recall")?],
        ),
    )?;
    println!("wrote incoordination.csv, nfr.csv and selection_pr.csv to {}", a.run.display());
    Ok(())
}

fn select(a: &Select) -> Result<()> {
    let text = fs::read_to_string(a.run.join("samples.csv"))?;
    let loss = metrics_column(&text, "loss")?;
    let u = metrics_column(&text, "u_label_sq")?;
    let by_loss = select_low(&loss, a.threshold)?;
    let by_u = select_low(&u, a.threshold)?;
    let all: BTreeSet<usize> = (0..loss.len()).collect();
    let part = joint_partition(&by_loss.selected, &by_u.selected, &all)?;

    let mut csv = String::from("index,loss_posterior,u_posterior,set\n");
    for i in 0..loss.len() {
        let set = if part.clean.contains(&i) {
            "clean"
        } else if part.hard.contains(&i) {
            "hard"
        } else {
            "noisy"
        };
        let _ = writeln!(csv, "{i},{},{},{set}", by_loss.posteriors[i], by_u.posteriors[i]);
    }
    fs::write(a.run.join("selection.csv"), csv)?;
    for (name, set) in [("clean", &part.clean), ("hard", &part.hard), ("noisy", &part.noisy)] {
        let body: String = set.iter().map(|i| format!("{i}\n")).collect();
        fs::write(a.run.join(format!("{name}.idx")), body)?;
    }
    println!(
        "clean {} hard {} noisy {}",
        part.clean.len(),
        part.hard.len(),
        part.noisy.len()
    );
    Ok(())
}

fn lag_exp(a: &LagExp) -> Result<()> {
    let mut cfg = resolve_config(&a.settings)?;
    let (tr, te) = load_pair(&a.data)?;
    cfg.record_trajectory = true;
    let base = train(&tr, &te, &cfg)?;
    write_run(&a.out.join("baseline"), &cfg, &base, &tr)?;
    let traj = base
        .trajectory
        .ok_or_else(|| Error::Contract("baseline recorded no trajectory".into()))?;
    cfg.record_trajectory = false;
    let points = lag_experiment(&traj, &a.shifts, &cfg, &tr, &te)?;

    let mut csv = String::from("shift,incoordination,test_error\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", p.shift, p.incoordination, p.test_error);
    }
    fs::write(a.out.join("lag.csv"), csv)?;
    let i: Vec<f64> = points.iter().map(|p| p.incoordination).collect();
    let e: Vec<f64> = points.iter().map(|p| p.test_error).collect();
    let rho = spearman(&i, &e);
    fs::write(a.out.join("lag_summary.txt"), format!("spearman={rho}\n"))?;
    for p in &points {
        println!("shift {:>3}  I {:.4}  error {:.4}", p.shift, p.incoordination, p.test_error);
    }
    println!("spearman(I, error) = {rho:.4}");
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let dirs: Vec<&Path> = a.runs.iter().map(PathBuf::as_path).collect();
    let table = report_table(&report(&dirs)?);
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| false),
        Command::Corrupt(a) => corrupt(a).map(|_| false),
        Command::Train(a) => train_cmd(a),
        Command::Diagnose(a) => diagnose(a).map(|_| false),
        Command::Select(a) => select(a).map(|_| false),
        Command::LagExp(a) => lag_exp(a).map(|_| false),
        Command::Report(a) => report_cmd(a).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
