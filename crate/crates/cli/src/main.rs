use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};

use wmamba::ablation;
use wmamba::bench::{self, PatchTraining, ScanBenchConfig};
use wmamba::checkpoint::Checkpoint;
use wmamba::runconfig::RunConfig;
use wmamba::synthdata::{generate_corpus, Dataset};
use wmamba::train::{evaluate, load_model, Event, TrainConfig, Trainer};
use wmamba::verify;

#[derive(Parser)]
#[command(name = "wmamba", version, about = "Wavelet-guided state-space forgery detector on a synthetic corpus")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired real/fake corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the first 80% of a corpus, evaluating on the rest.
    Train {
        /// key=value file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory (or `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `latest.wmbk` in the run directory if present.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a corpus with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Scores CSV; defaults to scores.csv next to the checkpoint.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Verify {
        /// Only suites whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Timing experiments.
    Bench {
        #[arg(long, value_enum)]
        kind: BenchKind,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// patches: also train each patch count and report held-out AUC.
        #[arg(long)]
        train: bool,
        #[arg(long, requires = "train")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: u64,
    },
    /// Train the ten-variant ablation matrix and tabulate held-out AUC.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Heldout,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Scan,
    Patches,
}

/// `--gate-mode add` style flags for every config key.
#[derive(Clone, Debug, Default)]
struct Overrides(Vec<(&'static str, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Overrides(config_keys().filter_map(|k| m.get_one::<String>(k).map(|v| (k, v.clone()))).collect()))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        config_keys().fold(cmd, |c, k| {
            c.arg(Arg::new(k).long(k.replace('_', "-")).value_name("VALUE").help_heading("Config overrides"))
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn config_keys() -> impl Iterator<Item = &'static str> {
    RunConfig::keys().filter(|k| *k != "out")
}

enum Fail {
    Usage(String),
    Runtime(String),
}

impl From<wmamba::Error> for Fail {
    fn from(e: wmamba::Error) -> Self {
        match e {
            wmamba::Error::Config(m) => Fail::Usage(m),
            e => Fail::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<ExitCode, Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let out = match cli.cmd {
        Cmd::Synth { n, size, seed, out } => synth(n, size, seed, &out),
        Cmd::Train { config, data, out, resume, overrides } => train(config.as_deref(), &data, out, resume, &overrides),
        Cmd::Eval { ckpt, data, split, scores } => eval(&ckpt, &data, split, scores),
        Cmd::Verify { filter } => run_verify(filter.as_deref()),
        Cmd::Bench { kind, out, trials, train, data, steps } => run_bench(kind, out.as_deref(), trials, train.then_some(data).flatten(), steps, train),
        Cmd::Ablate { config, data, out, overrides } => ablate(config.as_deref(), &data, &out, &overrides),
    };
    match out {
        Ok(code) => code,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `wmamba help` for usage.");
            ExitCode::from(2)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::Runtime(format!("{}: {e}", path.display()))
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Outcome {
    if n == 0 || n % 2 != 0 {
        return Err(Fail::Usage(format!("--n must be even and positive (pairs of real and fake), got {n}")));
    }
    if size < 32 || size % 2 != 0 {
        return Err(Fail::Usage(format!("--size must be even and at least 32, got {size}")));
    }
    let m = generate_corpus(n, size, seed, out)?;
    println!("wrote {} samples to {}", m.entries.len(), out.display());
    println!("fingerprint {}", m.fingerprint);
    Ok(ExitCode::SUCCESS)
}

fn build_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in &overrides.0 {
        cfg.set(k, v).map_err(|e| Fail::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path) -> Result<(Dataset, Dataset), Fail> {
    let (ds, _) = Dataset::load(data)?;
    Ok(ds.split())
}

fn train(config: Option<&Path>, data: &Path, out: Option<PathBuf>, resume: bool, overrides: &Overrides) -> Outcome {
    let mut cfg = build_config(config, overrides)?;
    let out = out.or_else(|| cfg.out.clone()).ok_or_else(|| Fail::Usage("no run directory: pass --out or set out= in the config".into()))?;
    cfg.out = Some(out.clone());
    let (train_set, heldout) = load_split(data)?;
    fs::create_dir_all(&out).map_err(|e| io_fail(&out, e))?;
    let latest = out.join("latest.wmbk");
    let mut trainer = if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let t = Trainer::from_checkpoint(&ck)?;
        if t.model.cfg != cfg.model || t.cfg != cfg.train {
            return Err(Fail::Runtime(format!("{} was written with a different configuration", latest.display())));
        }
        println!("resuming from step {}", t.step);
        t
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    };
    cfg.write_echo(&out)?;
    let summary = trainer.run(&train_set, Some(&heldout), Some(&out), |e| match e {
        Event::Log { step, loss, auc } => {
            let a = auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!("step {step:>6}  loss {loss:.4}  train_auc {a}");
        }
        Event::Eval { step, auc, accuracy } => println!("step {step:>6}  heldout_auc {auc:.4}  accuracy {accuracy:.4}"),
        Event::Checkpoint { step } => println!("step {step:>6}  checkpoint"),
    })?;
    match summary.evals.last() {
        Some((step, auc, acc)) => println!("final step {step} heldout_auc {auc:.4} accuracy {acc:.4}"),
        None => println!("final step {}", summary.final_step),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(ckpt: &Path, data: &Path, split: Split, scores: Option<PathBuf>) -> Outcome {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = load_model(&ck)?;
    let (all, _) = Dataset::load(data)?;
    let ds = match split {
        Split::All => all,
        Split::Train => all.split().0,
        Split::Heldout => all.split().1,
    };
    let r = evaluate(&model, &store, &ds)?;
    let path = scores.unwrap_or_else(|| ckpt.with_file_name("scores.csv"));
    let mut csv = String::from("path,label,score\n");
    for ((p, l), s) in ds.paths.iter().zip(&ds.labels).zip(&r.scores) {
        let _ = writeln!(csv, "{p},{l},{s:.8}");
    }
    fs::write(&path, csv).map_err(|e| io_fail(&path, e))?;
    println!("auc {:.6}", r.auc);
    println!("accuracy {:.6}", r.accuracy);
    println!("scores {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_verify(filter: Option<&str>) -> Outcome {
    let reports = verify::run_suites(filter);
    if reports.is_empty() {
        let names: Vec<_> = verify::suites().iter().map(|s| s.name).collect();
        return Err(Fail::Usage(format!("no suite matches {:?}; suites: {}", filter.unwrap_or(""), names.join(", "))));
    }
    println!("{:<12} {:<6} {:>10} {:>10} {:>8} {:>8}  detail", "suite", "result", "max_err", "tol", "cases", "secs");
    for r in &reports {
        println!(
            "{:<12} {:<6} {:>10.3e} {:>10.1e} {:>8} {:>8.2}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_error,
            r.tol,
            r.cases,
            r.seconds,
            r.detail
        );
    }
    Ok(if reports.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn emit(csv: &str, out: Option<&Path>) -> Result<(), Fail> {
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, csv).map_err(|e| io_fail(path, e))?;
    }
    Ok(())
}

fn run_bench(kind: BenchKind, out: Option<&Path>, trials: usize, data: Option<PathBuf>, steps: u64, train: bool) -> Outcome {
    if trials == 0 {
        return Err(Fail::Usage("--trials must be positive".into()));
    }
    match kind {
        BenchKind::Scan => {
            if train {
                return Err(Fail::Usage("--train applies to --kind patches".into()));
            }
            let rows = bench::bench_scan(&ScanBenchConfig { trials, ..Default::default() })?;
            emit(&bench::scan_csv(&rows), out)?;
        }
        BenchKind::Patches => {
            let base = RunConfig::default().model;
            let split = match (train, data) {
                (true, Some(d)) => Some(load_split(&d)?),
                (true, None) => return Err(Fail::Usage("--train needs --data".into())),
                _ => None,
            };
            let training = split.as_ref().map(|(tr, ho)| PatchTraining {
                train: tr,
                heldout: ho,
                cfg: TrainConfig { steps, log_every: 0, eval_every: 0, checkpoint_every: 0, ..Default::default() },
            });
            let rows = bench::bench_patches(&base, &[8, 4, 2], trials, training.as_ref())?;
            emit(&bench::patches_csv(&rows), out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(config: Option<&Path>, data: &Path, out: &Path, overrides: &Overrides) -> Outcome {
    let mut cfg = build_config(config, overrides)?;
    cfg.out = Some(out.to_path_buf());
    cfg.train.eval_every = 0;
    let (train_set, heldout) = load_split(data)?;
    cfg.write_echo(out)?;
    let rows = ablation::run(&ablation::matrix(), &cfg.model, &cfg.train, &train_set, &heldout, Some(out), |r| {
        println!("{:<40} auc {:.4} accuracy {:.4} loss {:.4} ({:.0}s)", r.variant.name(), r.auc, r.accuracy, r.final_loss, r.seconds);
    })?;
    let path = out.join("ablation.csv");
    fs::write(&path, ablation::csv(&rows)).map_err(|e| io_fail(&path, e))?;
    println!("table {}", path.display());
    Ok(ExitCode::SUCCESS)
}
