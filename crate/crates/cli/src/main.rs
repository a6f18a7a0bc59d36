mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixflow_core::datasets::{
    build_synthetic, lift_orthogonal, load_populations, save_dataset, Dataset, Population, Split,
    SyntheticConfig,
};
use mixflow_core::metrics::MetricReport;
use mixflow_core::rng::stream;
use mixflow_core::theory::{theory_report, ChecksSelection, TheoryInstance};
use mixflow_core::trainer::{evaluate, fit, Checkpoint, ModelKind, RunConfig};
use mixflow_core::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mixflow", version, about = "Mixture-conditioned flow matching workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the letter-rotation benchmark to disk.
    GenData(GenDataArgs),
    /// Train a model and keep the best checkpoint on validation W2.
    Train(TrainArgs),
    /// Draw samples from a checkpoint, optionally at intermediate times.
    Sample(SampleArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Run the mixture-Wasserstein checks on an instance.
    Theory(TheoryArgs),
    /// Scatter plots of 2-D point files as one SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "AEHLST")]
    letters: String,
    #[arg(long, default_value_t = 20)]
    rotations: usize,
    #[arg(long, default_value = "S")]
    val_letter: char,
    /// Independent draws per copy.
    #[arg(long, default_value_t = 250)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    copies: usize,
    /// Embed the 2-D points in this many dimensions by a random rotation.
    #[arg(long)]
    lift_dim: Option<usize>,
    #[arg(long, env = "MIXFLOW_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Dataset directory holding data.csv and manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MIXFLOW_SEED")]
    seed: Option<u64>,
    /// Split used for model selection.
    #[arg(long, default_value = "val")]
    val_split: Split,
    /// Config overrides as `key=value` with dotted keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Config overrides as `--section.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON vector, or a condition id resolved through `--data`.
    #[arg(long)]
    descriptor: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Integration steps; the checkpoint's setting when omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    t_snapshots: Vec<f64>,
    #[arg(long, env = "MIXFLOW_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory; one `t<time>.csv` per snapshot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Generated and reference points per condition.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, env = "MIXFLOW_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, conflicts_with = "random")]
    instance: Option<PathBuf>,
    #[arg(long)]
    random: bool,
    #[arg(long = "I", default_value_t = 2)]
    i: usize,
    #[arg(long = "J", default_value_t = 5)]
    j: usize,
    #[arg(long = "D", default_value_t = 3)]
    d: usize,
    /// Conditions drawn for a random instance.
    #[arg(long, default_value_t = 8)]
    conditions: usize,
    #[arg(long, env = "MIXFLOW_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "all")]
    checks: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    points: Vec<PathBuf>,
    /// Comma-separated panel titles; file names when omitted.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Infeasible(_) => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    load_populations(&dir.join("data.csv"), &dir.join("manifest.json"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let cfg = SyntheticConfig {
        letters: a.letters.chars().collect(),
        rotations: a.rotations,
        copies_per_condition: a.copies,
        samples_per_copy: a.samples,
        val_letter: a.val_letter,
    };
    let mut ds = build_synthetic(&cfg, a.seed)?;
    if let Some(d) = a.lift_dim {
        ds = lift_orthogonal(&ds, d, a.seed)?.0;
    }
    create_dir(&a.out)?;
    save_dataset(&ds, &a.out)?;
    for s in [Split::Train, Split::Val, Split::Holdout] {
        println!("{s}: {} conditions", ds.count(s));
    }
    println!("dimension {}, written to {}", ds.dim, a.out.display());
    Ok(())
}

/// Splits `--key value` / `--key=value` tokens into pairs.
fn parse_overrides(set: &[String], rest: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.to_string(), v.to_string()));
    }
    let mut it = rest.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidArgument(format!("unexpected argument `{tok}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("override `{tok}` needs a value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&parse_overrides(&a.set, &a.overrides)?)?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.checkpoint_dir = Some(a.out.display().to_string());
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let train = ds.split(Split::Train);
    let val = ds.split(a.val_split);
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no train conditions", a.data.display())));
    }
    create_dir(&a.out)?;
    write_json(&cfg, &a.out.join("config.json"))?;
    let out = fit(&cfg, &train, &val)?;
    out.write(&a.out)?;
    match (out.best_epoch, out.best_w2) {
        (Some(e), Some(w)) => println!("best validation W2 {w:.6} at epoch {e}"),
        _ => println!("no validation ran; best checkpoint is the last state"),
    }
    if let Some(msg) = out.aborted {
        return Err(Error::NonFinite {
            context: format!("{msg} (training stopped; last good state saved)"),
        });
    }
    Ok(())
}

fn resolve_descriptor(spec: &str, data: Option<&Path>) -> Result<Vec<f64>, Error> {
    if spec.trim_start().starts_with('[') {
        return serde_json::from_str(spec)
            .map_err(|e| Error::InvalidArgument(format!("--descriptor is not a JSON vector: {e}")));
    }
    let dir = data.ok_or_else(|| {
        Error::InvalidArgument(format!("--descriptor `{spec}` is a condition id and needs --data"))
    })?;
    let ds = load_dataset(dir)?;
    let p = ds
        .get(spec)
        .ok_or_else(|| Error::InvalidArgument(format!("condition `{spec}` not found in {}", dir.display())))?;
    Ok(p.descriptor.clone())
}

fn write_points(points: &ndarray::Array2<f64>, path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..points.ncols()).map(|k| format!("f{k}")))?;
    for r in points.rows() {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

fn sample(a: SampleArgs) -> Result<(), Error> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(s) = a.steps {
        if s == 0 {
            return Err(Error::InvalidArgument("--steps must be positive".into()));
        }
        ck.config.integrator.steps = s;
    }
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let y = resolve_descriptor(&a.descriptor, a.data.as_deref())?;
    let mut rng = stream(&[a.seed]);
    let snaps = ck.sample_snapshots(&y, a.n, &a.t_snapshots, &mut rng)?;
    create_dir(&a.out)?;
    for (t, x) in a.t_snapshots.iter().zip(&snaps) {
        let path = a.out.join(format!("t{t}.csv"));
        write_points(x, &path)?;
        println!("t = {t}: {} points -> {}", x.nrows(), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Serialize)]
struct EvalRow<'a> {
    condition_id: &'a str,
    mmd: f64,
    w1: f64,
    w2: f64,
    ed: f64,
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let pops: Vec<&Population> = ds.split(a.split);
    if pops.is_empty() {
        return Err(Error::Data(format!("split {} of {} is empty", a.split, a.data.display())));
    }
    if a.samples < 2 {
        return Err(Error::InvalidArgument("--samples must be at least 2".into()));
    }
    let reports: Vec<MetricReport<f64>> = evaluate(&ck, &pops, a.samples, ck.config.validation.subsample_cap, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("per_condition.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (p, r) in pops.iter().zip(&reports) {
        w.serialize(EvalRow {
            condition_id: &p.condition_id,
            mmd: r.mmd,
            w1: r.w1,
            w2: r.w2,
            ed: r.ed,
        })?;
    }
    w.flush().map_err(io_err(&path))?;
    let col = |f: fn(&MetricReport<f64>) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let mut agg = BTreeMap::new();
    agg.insert("mmd", col(|r| r.mmd));
    agg.insert("w1", col(|r| r.w1));
    agg.insert("w2", col(|r| r.w2));
    agg.insert("ed", col(|r| r.ed));
    write_json(&agg, &a.out.join("aggregate.json"))?;
    for (k, v) in &agg {
        println!("{k}: {:.6} ± {:.6}", v.mean, v.std);
    }
    Ok(())
}

fn theory(a: TheoryArgs) -> Result<(), Error> {
    let inst = match (&a.instance, a.random) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<TheoryInstance>(&text)?
        }
        (None, true) => TheoryInstance::random(a.i, a.j, a.d, a.conditions, a.seed)?,
        (None, false) => {
            return Err(Error::InvalidArgument("pass --instance <json> or --random".into()));
        }
    };
    let checks: ChecksSelection = a.checks.parse()?;
    let report = theory_report(&inst, checks)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).map_err(io_err(p))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_panel(path: &Path) -> Result<Vec<[f64; 2]>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !matches!(*h, "condition_id" | "t"))
        .map(|(k, _)| k)
        .collect();
    if cols.len() != 2 {
        return Err(Error::Shape(format!(
            "{} has {} coordinate columns; plotting needs 2-D points (reduce with pca_reduce first)",
            path.display(),
            cols.len()
        )));
    }
    let mut pts = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut p = [0.0; 2];
        for (slot, &c) in p.iter_mut().zip(&cols) {
            let field = rec.get(c).unwrap_or("");
            *slot = field.trim().parse().map_err(|_| {
                Error::Data(format!("{} row {}: `{field}` is not a number", path.display(), n + 2))
            })?;
        }
        pts.push(p);
    }
    Ok(pts)
}

fn plot(a: PlotArgs) -> Result<(), Error> {
    if !a.labels.is_empty() && a.labels.len() != a.points.len() {
        return Err(Error::InvalidArgument(format!(
            "--labels has {} entries for {} point files",
            a.labels.len(),
            a.points.len()
        )));
    }
    let mut panels = Vec::new();
    for (k, p) in a.points.iter().enumerate() {
        let label = a
            .labels
            .get(k)
            .cloned()
            .unwrap_or_else(|| p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()));
        panels.push(svg::Panel {
            label,
            points: read_panel(p)?,
        });
    }
    fs::write(&a.out, svg::render(&panels)).map_err(io_err(&a.out))?;
    println!("{} panels -> {}", panels.len(), a.out.display());
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("MIXFLOW_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("MIXFLOW_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Theory(a) => theory(a),
        Command::Plot(a) => plot(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
