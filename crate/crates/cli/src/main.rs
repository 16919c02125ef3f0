use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spkd::config::{DataSource, RunConfig, Splits};
use spkd::export::{self, Matrix};
use spkd::trainer::{self, RunOutput};
use spkd::{checkpoint, Error, Float, Method, Network, Precision};

/// Similarity-preserving knowledge distillation for small conv nets.
#[derive(Parser)]
#[command(name = "spkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<Dataset>,
    /// Frozen teacher checkpoint.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Parallel runs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Cifar10,
    Synthetic,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher network with plain cross-entropy.
    TrainTeacher,
    /// Train the student under the frozen teacher.
    Distill,
    /// Test-set top-1 error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Normalized Gram matrix of one test batch as CSV and PGM.
    ExportGram {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        batch_index: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long)]
        sort_by_class: bool,
        #[arg(long, default_value = spkd::similarity::LAST_CONV)]
        layer: String,
    },
    /// Channel-wise average activations of every test image, rows sorted by class.
    ExportActivations {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = spkd::similarity::LAST_CONV)]
        layer: String,
    },
    /// One student per gamma value; picks the value with the lowest validation error.
    SweepGamma {
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
    },
    /// Final similarity loss and test error of each run directory.
    ExportLspError {
        runs: Vec<PathBuf>,
    },
}

/// Outcome classes mapped to process exit codes.
enum Failure {
    Lib(Error),
    Partial(String),
    NothingExported,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_CHECKPOINT: u8 = 6;
const EXIT_PARTIAL: u8 = 7;
const EXIT_NOTHING: u8 = 8;
const EXIT_INTERNAL: u8 = 1;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(e) => match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Format(_) => EXIT_DATA,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Io { .. } => EXIT_IO,
            Error::Version(_) | Error::Truncated(_) | Error::Checksum { .. } => EXIT_CHECKPOINT,
            Error::Shape(_) => EXIT_INTERNAL,
        },
        Failure::Partial(_) => EXIT_PARTIAL,
        Failure::NothingExported => EXIT_NOTHING,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Partial(msg) => eprintln!("error: {msg}"),
                Failure::NothingExported => eprintln!("error: nothing exported"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(d) = common.dataset {
        cfg.data.source = match d {
            Dataset::Cifar10 => DataSource::Cifar10,
            Dataset::Synthetic => DataSource::Synthetic,
        };
        if matches!(d, Dataset::Synthetic) && common.config.is_none() {
            let classes = cfg.data.synthetic.classes;
            cfg.teacher.num_classes = classes;
            cfg.student.num_classes = classes;
        }
    }
    if let Some(t) = &common.teacher {
        cfg.run.teacher_checkpoint = Some(t.clone());
    }
    let d = &mut cfg.distill;
    if let Some(m) = common.method {
        d.method = m;
    }
    d.gamma = common.gamma.unwrap_or(d.gamma);
    d.alpha = common.alpha.unwrap_or(d.alpha);
    d.temperature = common.temperature.unwrap_or(d.temperature);
    d.beta = common.beta.unwrap_or(d.beta);
    cfg.train.seed = common.seed.unwrap_or(cfg.train.seed);
    if let Some(e) = common.epochs {
        if e != cfg.train.epochs {
            cfg.train.epochs = e;
            // keep milestones meaningful for shortened runs
            let (old, new) = (cfg.train.schedule.milestones.clone(), e);
            if old.last().is_some_and(|&m| m >= new) {
                let scale = new as f64 / 200.0;
                let mut ms: Vec<usize> = old.iter().map(|&m| ((m as f64 * scale).round() as usize).max(1)).filter(|&m| m < new).collect();
                ms.dedup();
                cfg.train.schedule.milestones = ms;
            }
        }
    }
    match command {
        Command::Eval { checkpoint } | Command::ExportGram { checkpoint, .. } | Command::ExportActivations { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                cfg.run.checkpoint = Some(c.clone());
            }
        }
        _ => {}
    }
    if matches!(command, Command::TrainTeacher) {
        cfg.distill.method = Method::None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.common, &cli.command)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    match cfg.train.precision {
        Precision::F32 => execute::<f32>(cfg, &cli.command, &out, cli.common.jobs),
        Precision::F64 => execute::<f64>(cfg, &cli.command, &out, cli.common.jobs),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn load_teacher<T: Float>(cfg: &mut RunConfig) -> Result<Network<T>, Error> {
    let path = cfg
        .run
        .teacher_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("a teacher checkpoint is required (--teacher)".into()))?;
    let net: Network<T> = checkpoint::load(&path)?;
    if net.spec().num_classes != cfg.data.num_classes() {
        return Err(Error::Config(format!(
            "teacher predicts {} classes but the data has {}",
            net.spec().num_classes,
            cfg.data.num_classes()
        )));
    }
    cfg.teacher = net.spec().clone();
    Ok(net)
}

fn load_checkpoint<T: Float>(cfg: &RunConfig) -> Result<Network<T>, Error> {
    let path = cfg
        .run
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint)".into()))?;
    checkpoint::load(path)
}

fn notes(cfg: &RunConfig, splits: &Splits) -> Vec<String> {
    let n = &cfg.data.normalization;
    vec![
        format!("normalization mean={:?} std={:?}", n.mean, n.std),
        format!("data={:?} val_size={} train_subset={}", cfg.data.source, splits.val.len(), cfg.data.train_subset),
    ]
}

fn execute<T: Float>(mut cfg: RunConfig, command: &Command, out: &Path, jobs: usize) -> Result<(), Failure> {
    let teacher = match command {
        Command::Distill | Command::SweepGamma { .. } | Command::ExportLspError { .. } => Some(load_teacher::<T>(&mut cfg)?),
        _ => None,
    };
    if matches!(command, Command::Distill) && cfg.distill.method.needs_teacher() {
        let pairs = &cfg.distill.pairs;
        pairs.validate(&cfg.teacher.tap_ids(), &cfg.student.tap_ids())?;
    }
    write(&out.join("config.resolved"), cfg.to_toml())?;
    let splits = cfg.data.load()?;

    match command {
        Command::TrainTeacher => {
            let net = Network::<T>::build(&cfg.teacher, cfg.train.seed)?;
            let o = trainer::train_distilled(None, net, &cfg.train, &cfg.distill, &splits, Some(RunOutput { dir: out, notes: notes(&cfg, &splits) }))?;
            log::info!("best epoch {}", o.best_epoch);
        }
        Command::Distill => {
            let net = Network::<T>::build(&cfg.student, cfg.train.seed)?;
            let o = trainer::train_distilled(teacher.as_ref(), net, &cfg.train, &cfg.distill, &splits, Some(RunOutput { dir: out, notes: notes(&cfg, &splits) }))?;
            log::info!("best epoch {}", o.best_epoch);
        }
        Command::Eval { .. } => {
            let net = load_checkpoint::<T>(&cfg)?;
            let err = trainer::evaluate(&net, &splits.test, cfg.train.eval_batch_size)?;
            println!("test_error = {err}");
            write(&out.join("eval.txt"), format!("test_error = {err}\n"))?;
        }
        Command::ExportGram { batch_index, batch_size, sort_by_class, layer, .. } => {
            let net = load_checkpoint::<T>(&cfg)?;
            let idx = export::batch_indices(&splits.test, *batch_index, *batch_size, *sort_by_class)?;
            let (g, labels): (Matrix, Vec<usize>) = export::network_gram(&net, &splits.test, &idx, layer)?;
            let stem = format!("gram_{}_b{batch_index}{}", layer.replace('.', "_"), if *sort_by_class { "_sorted" } else { "" });
            let dir = out.join("exports");
            let e = export::write_gram(&g, &dir, &stem)?;
            let label_text: Vec<String> = labels.iter().map(usize::to_string).collect();
            write(&dir.join(format!("{stem}.labels.txt")), label_text.join("\n") + "\n")?;
            println!("{}", e.csv.display());
        }
        Command::ExportActivations { layer, .. } => {
            let net = load_checkpoint::<T>(&cfg)?;
            let (labels, rows) = export::activation_table(&net, &splits.test, layer, cfg.train.eval_batch_size)?;
            let path = out.join("exports").join(format!("activations_{}.csv", layer.replace('.', "_")));
            write(&path, export::activations_csv(&labels, &rows))?;
            println!("{}", path.display());
        }
        Command::SweepGamma { gammas } => {
            let teacher = teacher.expect("loaded above");
            let init = Network::<T>::build(&cfg.student, cfg.train.seed)?;
            let rows = trainer::gamma_sweep(gammas, &teacher, &init, &cfg.train, &cfg.distill, &splits, Some(out), jobs)?;
            match trainer::select_gamma(&rows) {
                Some(g) => println!("selected gamma = {g}"),
                None => println!("no validation split; gamma not selected"),
            }
        }
        Command::ExportLspError { runs } => {
            let teacher = teacher.expect("loaded above");
            let (rows, skipped) = export::lsp_error_rows(runs, &teacher, &splits.test, &cfg.distill.pairs, cfg.train.lsp_batches, cfg.train.lsp_batch_size);
            write(&out.join("exports").join("lsp_error.csv"), export::lsp_csv(&rows))?;
            for (dir, e) in &skipped {
                eprintln!("skipped {}: {e}", dir.display());
            }
            if rows.is_empty() {
                return Err(Failure::NothingExported);
            }
            if !skipped.is_empty() {
                return Err(Failure::Partial(format!("{} run directories skipped", skipped.len())));
            }
        }
    }
    Ok(())
}
