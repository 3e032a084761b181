//! The `hdspace` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, format or runtime failure,
//! 3 verification failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::Value;

use hdspace_core::dataset::{self, write_atomic, Mode};
use hdspace_core::evaluator::{self, EvalConfig, NeuralPolicy};
use hdspace_core::hdspace::segment_task;
use hdspace_core::policy::MaskConfig;
use hdspace_core::sim::{self, TaskId, GRID_CHANNELS, GRID_SIZE};
use hdspace_core::trainer::{self, CheckpointHeader, TrainConfig};
use hdspace_core::verify::{self, Suite};
use hdspace_core::{Error, ErrorClass};
use hdspace_gateway::{Server, SessionConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const CHECKPOINT_FILE: &str = "policy.hdcp";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "train_config.json";
pub const FRAME_STATS_FILE: &str = "frame_stats.json";

#[derive(Debug, Parser)]
#[command(name = "hdspace", version, about = "HD-Space demonstration collection, behavior cloning and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record expert episodes into a corpus directory.
    Collect(CollectArgs),
    /// Train a chunked policy on a mix drawn from a corpus.
    Train(TrainArgs),
    /// Roll out a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Tabulate metrics and frame statistics files.
    Report(ReportArgs),
    /// Run the teleoperation gateway.
    Serve(ServeArgs),
    /// Run a property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON file keyed by flag name; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: TaskId,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Belt speed in m/s (belt tasks only): 0.08 or 0.16.
    #[arg(long)]
    pub belt_speed: Option<f64>,
    /// Hd space indices to rotate through, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Append)]
    pub spaces: Option<Vec<usize>>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Episode budget such as N25+H25.
    #[arg(long, value_parser = parse_mix)]
    pub mix: dataset::MixSpec,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Train without patch-mask augmentation.
    #[arg(long)]
    pub no_mask_aug: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a train output directory.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: TaskId,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 100_000)]
    pub seed: u64,
    #[arg(long)]
    pub belt_speed: Option<f64>,
    /// Write metrics JSON here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
    /// Occlude this fraction of the observation per query (0.25 when bare).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.25")]
    pub occlude: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics or frame statistics files, each optionally LABEL=PATH.
    #[arg(long, num_args = 1.., required = true, action = clap::ArgAction::Append)]
    pub inputs: Vec<String>,
    /// Output prefix; writes PREFIX.md and PREFIX.csv.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, value_parser = parse_task, default_value = "teacup")]
    pub task: TaskId,
    #[arg(long, value_name = "DIR", default_value = "teleop")]
    pub out: PathBuf,
    #[arg(long)]
    pub belt_speed: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// sampler, overlap, grad, format, determinism or all.
    #[arg(long, value_parser = parse_suite)]
    pub suite: SuiteSel,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy)]
pub enum SuiteSel {
    One(Suite),
    All,
}

fn parse_task(s: &str) -> Result<TaskId, String> {
    s.parse::<TaskId>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "naive" => Ok(Mode::Naive),
        "hd" => Ok(Mode::Hd),
        _ => Err(format!("unknown mode `{s}` (expected naive or hd)")),
    }
}

fn parse_mix(s: &str) -> Result<dataset::MixSpec, String> {
    dataset::parse_mix(s).map_err(|e| e.to_string())
}

fn parse_suite(s: &str) -> Result<SuiteSel, String> {
    if s == "all" {
        return Ok(SuiteSel::All);
    }
    Suite::parse(s).map(SuiteSel::One).ok_or_else(|| format!("unknown suite `{s}`"))
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => EXIT_USAGE,
            ErrorClass::Format | ErrorClass::Runtime => EXIT_IO,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

type Outcome = Result<(), Failure>;

pub fn command() -> clap::Command {
    Cli::command()
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Messages go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match overlay_config(argv) {
        Ok(a) => a,
        Err(f) => return report_failure(f),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => report_failure(f),
    }
}

fn report_failure(f: Failure) -> i32 {
    eprintln!("error: {}", f.message);
    f.code
}

/// Appends `--key value` for every config entry whose flag is absent from
/// `argv`.
fn overlay_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in text.iter().enumerate() {
        if a == "--config" {
            path = Some(text.get(i + 1).cloned().ok_or_else(|| usage("--config needs a file"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let path = PathBuf::from(path);
    let body = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let value: Value =
        serde_json::from_str(&body).map_err(|e| usage(format!("{}: config is not JSON: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(usage(format!("{}: config must be a JSON object", path.display())));
    };
    let given = |key: &str| text.iter().any(|a| a == &format!("--{key}") || a.starts_with(&format!("--{key}=")));
    for (key, v) in map {
        if key == "config" {
            return Err(usage("config files cannot nest --config"));
        }
        if given(&key) {
            continue;
        }
        let flag = OsString::from(format!("--{key}"));
        let scalar = |v: &Value| -> Result<OsString, Failure> {
            match v {
                Value::String(s) => Ok(s.into()),
                Value::Number(n) => Ok(n.to_string().into()),
                _ => Err(usage(format!("config key `{key}` has an unsupported value {v}"))),
            }
        };
        match &v {
            Value::Bool(true) => argv.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    argv.push(flag.clone());
                    argv.push(scalar(item)?);
                }
            }
            other => {
                argv.push(flag);
                argv.push(scalar(other)?);
            }
        }
    }
    Ok(argv)
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure>
where
    T: Send,
{
    match jobs {
        None => Ok(f()),
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure { code: EXIT_IO, message: e.to_string() })?;
            Ok(pool.install(f))
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn check_belt_speed(task: TaskId, belt_speed: Option<f64>) -> Outcome {
    sim::init_task(task, 0, belt_speed)?;
    Ok(())
}

fn collect(a: CollectArgs) -> Outcome {
    check_belt_speed(a.task, a.belt_speed)?;
    let count = segment_task(a.task).len();
    match (a.mode, &a.spaces) {
        (Mode::Naive, Some(_)) => return Err(usage("--spaces applies to hd collection only")),
        (Mode::Hd, Some(s)) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= count) {
                return Err(Error::SpaceOutOfRange { task: a.task, index: bad, count }.into());
            }
            if s.is_empty() {
                return Err(usage("--spaces is empty"));
            }
        }
        _ => {}
    }
    let speed = a.task.is_belt().then(|| a.belt_speed.unwrap_or(sim::BELT_SPEEDS[1]));
    let episodes =
        with_jobs(a.jobs, || dataset::collect_corpus(a.task, a.mode, a.episodes, a.seed, speed, a.spaces.as_deref()))??;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let paths: Vec<PathBuf> = episodes.iter().map(|e| a.out.join(e.header.file_name())).collect();
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(Failure { code: EXIT_IO, message: format!("{} already exists", p.display()) });
    }
    for (i, (ep, path)) in episodes.iter().zip(&paths).enumerate() {
        if let Err(e) = dataset::write_episode(ep, path) {
            for written in &paths[..i] {
                let _ = fs::remove_file(written);
            }
            return Err(e.into());
        }
    }
    let headers: Vec<_> = dataset::scan_corpus(&a.out)?.into_values().collect();
    let stats = dataset::frame_stats(&headers)?;
    let stats_path = a.out.join(FRAME_STATS_FILE);
    write_atomic(&stats_path, serde_json::to_string_pretty(&stats).expect("stats serialize").as_bytes())?;
    let frames: usize = episodes.iter().map(|e| e.frames.len()).sum();
    println!("wrote {} episodes ({frames} frames) to {}", episodes.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = TrainConfig { seed: a.seed, ..TrainConfig::default() };
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if a.no_mask_aug {
        cfg.mask = MaskConfig::disabled();
    }
    cfg.validate()?;
    if a.out.exists() {
        let empty = fs::read_dir(&a.out).map_err(|e| io_failure(&a.out, e))?.next().is_none();
        if !empty {
            return Err(Failure { code: EXIT_IO, message: format!("{} exists and is not empty", a.out.display()) });
        }
    }
    let data = dataset::build_mix(&a.data, a.mix, a.seed)?;
    let run = trainer::train(&data, &cfg)?;

    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| io_failure(&parent, e))?;
    let stage = tempfile::Builder::new()
        .prefix(".hdspace-train")
        .tempdir_in(&parent)
        .map_err(|e| io_failure(&parent, e))?;
    let header = CheckpointHeader::for_params(&run.params, Some(cfg.digest()), Some(data.manifest.digest()));
    trainer::save_checkpoint(&run.params, &header, &stage.path().join(CHECKPOINT_FILE))?;
    write_atomic(&stage.path().join(MANIFEST_FILE), data.manifest.to_json().as_bytes())?;
    write_atomic(&stage.path().join(LOSS_FILE), trainer::loss_log_csv(&run.log).as_bytes())?;
    let cfg_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_atomic(&stage.path().join(CONFIG_FILE), cfg_json.as_bytes())?;
    if a.out.exists() {
        fs::remove_dir(&a.out).map_err(|e| io_failure(&a.out, e))?;
    }
    let staged = stage.keep();
    fs::rename(&staged, &a.out).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        io_failure(&a.out, e)
    })?;
    let last = run.log.last().map_or(f64::NAN, |r| r.mean_loss);
    println!(
        "trained {} on {} episodes for {} steps, final loss {last:.4}; wrote {}",
        a.mix,
        data.episodes.len(),
        cfg.steps,
        a.out.display()
    );
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn eval(a: EvalArgs) -> Outcome {
    check_belt_speed(a.task, a.belt_speed)?;
    if a.episodes == 0 {
        return Err(Error::NoRollouts.into());
    }
    if let Some(f) = a.occlude {
        if !(0.0..=1.0).contains(&f) || f.is_nan() {
            return Err(usage(format!("--occlude {f} is not a fraction in [0, 1]")));
        }
    }
    let params = trainer::load_checkpoint_for(&checkpoint_path(&a.ckpt), [GRID_CHANNELS, GRID_SIZE, GRID_SIZE])?;
    let policy = NeuralPolicy { params };
    let cfg = EvalConfig { occlusion: a.occlude, ..EvalConfig::with_belt_speed(a.belt_speed) };
    let metrics = with_jobs(a.jobs, || evaluator::evaluate(&policy, a.task, a.episodes, a.seed, &cfg))??;
    let json = metrics.to_json();
    match &a.json {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!("sr {:.3} mean_completed {:.3} over {} rollouts; wrote {}", metrics.sr, metrics.mean_completed, metrics.n, path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let mut rows = Vec::new();
    for input in &a.inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) if !l.is_empty() => (l.to_string(), PathBuf::from(p)),
            _ => {
                let p = PathBuf::from(input);
                let stem = p.file_stem().map_or_else(|| input.clone(), |s| s.to_string_lossy().into_owned());
                (stem, p)
            }
        };
        let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
        rows.extend(evaluator::report_rows(&label, &text, &path)?);
    }
    let report = evaluator::compare_report(&rows)?;
    match &a.out {
        Some(prefix) => {
            let md = with_suffix(prefix, "md");
            let csv = with_suffix(prefix, "csv");
            write_atomic(&md, report.markdown.as_bytes())?;
            write_atomic(&csv, report.csv.as_bytes())?;
            println!("wrote {} and {}", md.display(), csv.display());
        }
        None => print!("{}", report.markdown),
    }
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn serve(a: ServeArgs) -> Outcome {
    check_belt_speed(a.task, a.belt_speed)?;
    let cfg = SessionConfig { default_task: a.task, default_belt_speed: a.belt_speed, out_dir: a.out.clone() };
    let addr = format!("127.0.0.1:{}", a.port);
    let server = Server::bind(&addr, cfg).map_err(|e| Failure { code: EXIT_IO, message: format!("{addr}: {e}") })?;
    let local = server.local_addr().map_err(|e| Failure { code: EXIT_IO, message: e.to_string() })?;
    eprintln!("serving {} on {local} (line JSON or WebSocket), saving to {}", a.task, a.out.display());
    server.run().map_err(|e| Failure { code: EXIT_IO, message: e.to_string() })
}

fn verify_cmd(a: VerifyArgs) -> Outcome {
    let suites: Vec<Suite> = match a.suite {
        SuiteSel::One(s) => vec![s],
        SuiteSel::All => Suite::ALL.to_vec(),
    };
    let mut reports = Vec::new();
    for s in suites {
        let r = verify::run(s)?;
        for c in &r.checks {
            println!("[{}] {c}", s.name());
        }
        reports.push(r);
    }
    if let Some(path) = &a.json {
        write_atomic(path, serde_json::to_string_pretty(&reports).expect("reports serialize").as_bytes())?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, message: format!("suite(s) failed: {}", failed.join(", ")) })
    }
}
