//! Command-line front end: data generation, training, calibration, sweeps,
//! oracle bounds, analyses, trace export and simulation, and plotting.

pub mod config;
pub mod report;
pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use early_exit::analysis::{self, AnalysisInput};
use early_exit::calibration::{nll, Calibration};
use early_exit::checkpoint;
use early_exit::data::{self, Dataset, LoadOptions, Loaded, Splits, SplitRatios, Vocab, VocabSource};
use early_exit::multi_exit::MultiExitModel;
use early_exit::routing::{collect_exit_logits, exit_accuracies, oracle_eval, sweep, SweepOptions};
use early_exit::traces::{self, TraceFile};
use early_exit::training::{random_search, training_time_report, transpose, ModelSpec};
use early_exit::{Error, Execution};

use config::{parse_list, Settings};

#[derive(Debug, Parser)]
#[command(name = "early-exit", version, about = "Confidence-based early-exit inference for multi-exit classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key = value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset (TSV file or directory with train/val/test.tsv), trace file, or sweep table.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding model.ckpt and vocab.txt; defaults to --out.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Dev trace used to fit temperatures in `simulate`.
    #[arg(long, global = true)]
    dev: Option<PathBuf>,
    #[arg(long, global = true)]
    thresholds: Option<String>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    exit_blocks: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr_grid: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write the synthetic easy/hard dataset as train/val/test.tsv.
    GenData,
    /// Random search over learning rate and seed; saves the chosen model.
    Train,
    /// Fit per-exit temperatures on the validation split.
    Calibrate,
    /// Accuracy/cost/runtime over a threshold grid on the test split.
    Sweep,
    /// Oracle routing bound and per-exit accuracies on the test split.
    Oracle,
    /// Difficulty analyses on the test split.
    Analyze,
    /// Export raw per-exit logits of the val and test splits.
    DumpTraces,
    /// Route over a trace file.
    Simulate,
    /// Render a sweep table as an SVG tradeoff plot.
    Report,
}

type CmdResult = Result<(), String>;

/// Runs the tool on `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("early-exit: {msg}");
            1
        }
    }
}

fn execute(cli: &Cli) -> CmdResult {
    let settings = settings(cli)?;
    match cli.command {
        Command::GenData => gen_data(cli, &settings),
        Command::Train => train(cli, &settings),
        Command::Calibrate => calibrate(cli, &settings),
        Command::Sweep => run_sweep(cli, &settings),
        Command::Oracle => oracle(cli, &settings),
        Command::Analyze => analyze(cli, &settings),
        Command::DumpTraces => dump_traces(cli, &settings),
        Command::Simulate => simulate(cli, &settings),
        Command::Report => plot(cli),
    }
}

fn settings(cli: &Cli) -> Result<Settings, String> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.read_file(path)?;
    }
    if let Some(t) = &cli.thresholds {
        s.thresholds = parse_list(t)?;
    }
    if let Some(r) = cli.repeats {
        s.repeats = r;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(b) = &cli.exit_blocks {
        s.encoder.exit_blocks = parse_list(b)?;
    }
    if let Some(e) = cli.epochs {
        s.epochs = e;
    }
    if let Some(lr) = &cli.lr_grid {
        s.learning_rates = parse_list(lr)?;
    }
    if let Some(t) = cli.trials {
        s.trials = t;
    }
    Ok(s)
}

fn err(e: Error) -> String {
    e.to_string()
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, String> {
    p.as_deref().ok_or_else(|| format!("--{flag} is required"))
}

fn out_dir(cli: &Cli) -> Result<PathBuf, String> {
    let dir = required(&cli.out, "out")?;
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_data(cli: &Cli, s: &Settings, vocab: VocabSource, labels: Option<Vec<String>>) -> Result<Loaded, String> {
    let path = required(&cli.data, "data")?;
    let opts = LoadOptions {
        vocab,
        labels,
        ratios: SplitRatios::default(),
        seed: s.seed,
        max_seq_len: s.encoder.max_seq_len,
    };
    if path.is_dir() {
        data::load_tsv_splits(&path.join("train.tsv"), &path.join("val.tsv"), &path.join("test.tsv"), &opts)
    } else {
        data::load_tsv(path, &opts)
    }
    .map_err(err)
}

struct LoadedModel {
    model: MultiExitModel,
    calibration: Option<Calibration>,
    splits: Splits,
    dir: PathBuf,
}

fn load_model(cli: &Cli, s: &Settings) -> Result<LoadedModel, String> {
    let dir = cli.model.clone().or_else(|| cli.out.clone()).ok_or("--model or --out is required")?;
    let (model, calibration) = checkpoint::load(&dir.join("model.ckpt")).map_err(err)?;
    let vocab = Vocab::read(&dir.join("vocab.txt")).map_err(err)?;
    let mut s = s.clone();
    s.encoder.max_seq_len = model.config.max_seq_len;
    let loaded = load_data(cli, &s, VocabSource::Given(vocab), Some(model.labels.clone()))?;
    Ok(LoadedModel { model, calibration, splits: loaded.splits, dir })
}

fn calibration_or_identity(m: &LoadedModel) -> Calibration {
    m.calibration.clone().unwrap_or_else(|| Calibration::identity(m.model.num_exits()))
}

fn gen_data(cli: &Cli, s: &Settings) -> CmdResult {
    let out = out_dir(cli)?;
    let dataset = data::gen_synthetic(s.n_per_class, s.easy_fraction, s.seed).map_err(err)?;
    let splits = dataset.partition(SplitRatios::default(), s.seed).map_err(err)?;
    let vocab = Vocab::synthetic();
    for d in [&splits.train, &splits.val, &splits.test] {
        let path = out.join(format!("{}.tsv", d.split.name()));
        data::write_tsv(d, &vocab, &path).map_err(err)?;
        println!("wrote {} ({} rows)", path.display(), d.len());
    }
    Ok(())
}

fn train(cli: &Cli, s: &Settings) -> CmdResult {
    let out = out_dir(cli)?;
    let loaded = load_data(cli, s, VocabSource::Build { max_size: s.max_vocab }, None)?;
    let mut config = s.encoder.clone();
    config.vocab_size = loaded.vocab.len();
    let spec = ModelSpec { config, labels: loaded.splits.train.labels.clone() };
    let tc = s.train_config();
    let train_set = loaded.splits.train.examples();
    let val_set = loaded.splits.val.examples();
    let outcome = random_search(&spec, &train_set, &val_set, &tc).map_err(err)?;

    checkpoint::save(&out.join("model.ckpt"), &outcome.model, Some(&outcome.calibration)).map_err(err)?;
    loaded.vocab.write(&out.join("vocab.txt")).map_err(err)?;
    write(&out.join("train_report.csv"), &outcome.report.to_csv())?;
    let mut trials = String::from("trial,learning_rate,seed,score\n");
    for (i, t) in outcome.trials.iter().enumerate() {
        let score = t.score.map_or("diverged".to_string(), |v| v.to_string());
        let _ = writeln!(trials, "{i},{},{},{score}", t.learning_rate, t.seed);
    }
    write(&out.join("trials.csv"), &trials)?;
    let mut summary = outcome.report.summary();
    if s.baseline {
        let base = random_search(&spec.single_exit(), &train_set, &val_set, &tc).map_err(err)?;
        let cmp = training_time_report(Some(&outcome.report), Some(&base.report)).map_err(err)?;
        write(&out.join("training_time.csv"), &cmp.to_csv())?;
        let _ = write!(summary, " baseline_wall_time_s={} time_ratio={}", cmp.baseline_s, cmp.ratio);
    }
    summary.push('\n');
    write(&out.join("train_summary.txt"), &summary)?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn calibrate(cli: &Cli, s: &Settings) -> CmdResult {
    let m = load_model(cli, s)?;
    let val = &m.splits.val;
    let logits = collect_exit_logits(&val.examples(), &m.model, Execution::default()).map_err(err)?;
    let per_exit = transpose(&logits);
    let golds = val.golds();
    let calibration = Calibration::fit(&per_exit, &golds, Execution::default()).map_err(err)?;
    let mut csv = String::from("exit,attach_block,temperature,nll_t1,nll_fitted\n");
    for (e, z) in per_exit.iter().enumerate() {
        let t = calibration.temperature(e);
        let _ = writeln!(
            csv,
            "{e},{},{t},{},{}",
            m.model.exits[e].attach_block,
            nll(z, &golds, 1.0).map_err(err)?,
            nll(z, &golds, t).map_err(err)?
        );
    }
    let out = cli.out.clone().unwrap_or_else(|| m.dir.clone());
    fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    checkpoint::save(&m.dir.join("model.ckpt"), &m.model, Some(&calibration)).map_err(err)?;
    write(&out.join("calibration.csv"), &csv)
}

fn sweep_options(s: &Settings) -> SweepOptions {
    SweepOptions { repeats: s.repeats, exec: Execution::default() }
}

fn run_sweep(cli: &Cli, s: &Settings) -> CmdResult {
    let m = load_model(cli, s)?;
    let out = out_dir(cli)?;
    let test = m.splits.test.examples();
    let mut points = sweep(&test, &m.model, &calibration_or_identity(&m), &s.thresholds, sweep_options(s)).map_err(err)?;
    points.push(oracle_eval(&test, &m.model, sweep_options(s)).map_err(err)?);
    write(&out.join("sweep.csv"), &report::sweep_csv(&points, m.model.num_exits()))
}

fn oracle(cli: &Cli, s: &Settings) -> CmdResult {
    let m = load_model(cli, s)?;
    let out = out_dir(cli)?;
    let test = m.splits.test.examples();
    let point = oracle_eval(&test, &m.model, sweep_options(s)).map_err(err)?;
    let logits = collect_exit_logits(&test, &m.model, Execution::default()).map_err(err)?;
    let mut csv = String::from("exit,attach_block,accuracy\n");
    for (e, a) in exit_accuracies(&logits, &m.splits.test.golds()).into_iter().enumerate() {
        let _ = writeln!(csv, "{e},{},{a}", m.model.exits[e].attach_block);
    }
    let _ = writeln!(csv, "oracle,,{}", point.accuracy);
    write(&out.join("oracle.csv"), &csv)?;
    write(&out.join("oracle_point.csv"), &report::sweep_csv(&[point], m.model.num_exits()))
}

fn analyze(cli: &Cli, s: &Settings) -> CmdResult {
    let out = out_dir(cli)?;
    let input = match cli.data.as_deref() {
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => {
            let trace = TraceFile::load(p).map_err(err)?;
            let calibration = trace_calibration(cli, &trace)?;
            traces::analysis_input(&trace, &calibration).map_err(err)?
        }
        _ => {
            let m = load_model(cli, s)?;
            AnalysisInput::from_model(&m.model, &m.splits.test, &calibration_or_identity(&m), Execution::default())
                .map_err(err)?
        }
    };
    write(&out.join("analysis.csv"), &analysis::report(&input, s.tau))
}

fn dump_traces(cli: &Cli, s: &Settings) -> CmdResult {
    let m = load_model(cli, s)?;
    let out = out_dir(cli)?;
    for d in [&m.splits.val, &m.splits.test] {
        let path = out.join(format!("traces.{}.jsonl", d.split.name()));
        dump(&m.model, d, &path)?;
    }
    Ok(())
}

fn dump(model: &MultiExitModel, d: &Dataset, path: &Path) -> CmdResult {
    let t = traces::dump_traces(model, d, path, Execution::default()).map_err(err)?;
    println!("wrote {} ({} records)", path.display(), t.records.len());
    Ok(())
}

fn trace_calibration(cli: &Cli, trace: &TraceFile) -> Result<Calibration, String> {
    match &cli.dev {
        Some(dev) => {
            let dev = TraceFile::load(dev).map_err(err)?;
            if dev.header.num_exits != trace.header.num_exits || dev.header.num_classes != trace.header.num_classes {
                return Err("dev trace shape differs from the evaluated trace".into());
            }
            traces::fit_calibration(&dev, Execution::default()).map_err(err)
        }
        None => Ok(Calibration::identity(trace.header.num_exits)),
    }
}

fn simulate(cli: &Cli, s: &Settings) -> CmdResult {
    let path = required(&cli.data, "data")?;
    let out = out_dir(cli)?;
    let trace = TraceFile::load(path).map_err(err)?;
    let calibration = trace_calibration(cli, &trace)?;
    let sim = traces::simulate(&trace, &calibration, &s.thresholds, Execution::default()).map_err(err)?;
    let mut points = sim.points;
    points.push(traces::oracle_point(&trace).map_err(err)?);
    write(&out.join("simulate.csv"), &report::sweep_csv(&points, trace.header.num_exits))?;
    let mut routes = String::from("threshold,id,exit,prediction,confidence\n");
    for (t, rs) in s.thresholds.iter().zip(&sim.routes) {
        for r in rs {
            let _ = writeln!(routes, "{t},{},{},{},{}", r.id, r.exit_index, r.prediction, r.confidence);
        }
    }
    write(&out.join("simulate_routes.csv"), &routes)
}

fn plot(cli: &Cli) -> CmdResult {
    let path = required(&cli.data, "data")?;
    let out = out_dir(cli)?;
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let points = report::read_sweep_csv(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let name = path.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    write(&out.join(format!("{name}.svg")), &svg::tradeoff_svg(&points, &format!("accuracy vs cost ({name})")))
}
