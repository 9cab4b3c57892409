use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vssf::datastore::{read_checkpoint_for, read_dataset, write_atomic, write_checkpoint, write_dataset, Checkpoint};
use vssf::environments::{generate, Dataset, EnvDescriptor, IntegratorEnv, PendulumEnv};
use vssf::training::{evaluate_filter, initial_model, Supervision, TrainConfig, TrainEvent, Trainer, SUPERVISION_SENSOR};
use vssf::VssfError;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "vssf", version, about = "Variational state-space filters with linear latent dynamics")]
struct Cli {
    /// JSON file whose fields override the built-in defaults; flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VSSF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a filter on a dataset, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Evaluate image-only filtering against ground truth.
    Eval(EvalArgs),
    /// Write ground truth, posterior means and variances as text rows.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EnvName {
    Pendulum,
    Integrator,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SupervisionArg {
    None,
    Partial,
    Full,
}

impl From<SupervisionArg> for Supervision {
    fn from(s: SupervisionArg) -> Self {
        match s {
            SupervisionArg::None => Supervision::None,
            SupervisionArg::Partial => Supervision::Partial,
            SupervisionArg::Full => Supervision::Full,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    env: Option<EnvName>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Where the checkpoint is written; the loss trace goes next to it with a `.trace.txt` suffix.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    supervision: Option<SupervisionArg>,
    #[arg(long)]
    learn_dynamics: bool,
    /// Smoothing samples per trajectory in the training objective.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Filtering horizon T'.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Schema of the `--config` file; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    env: Option<EnvName>,
    n: Option<usize>,
    #[serde(rename = "T")]
    t: Option<usize>,
    horizon: Option<usize>,
    checkpoint_every: Option<usize>,
    pendulum: Option<PendulumEnv>,
    integrator: Option<IntegratorEnv>,
    train: Option<TrainConfig>,
}

#[derive(Debug, Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    threads: Option<usize>,
    #[serde(flatten)]
    settings: T,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<VssfError> for Failure {
    fn from(e: VssfError) -> Self {
        let code = match &e {
            VssfError::NotPositiveDefinite | VssfError::NotStable(_) | VssfError::NonFinite(_) | VssfError::Autodiff(_) => {
                EXIT_NUMERICAL
            }
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn load_file_config(path: Option<&Path>) -> Outcome<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn print_resolved<T: Serialize>(command: &str, threads: Option<usize>, settings: T) {
    let r = Resolved {
        command,
        threads,
        settings,
    };
    println!("config {}", serde_json::to_string(&r).expect("config serializes"));
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

#[derive(Serialize)]
struct GenSettings {
    env: EnvDescriptor,
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    seed: u64,
    out: PathBuf,
}

fn cmd_gen(args: GenArgs, file: FileConfig, threads: Option<usize>) -> Outcome<()> {
    let name = args.env.or(file.env).unwrap_or(EnvName::Pendulum);
    let env = match name {
        EnvName::Pendulum => EnvDescriptor::Pendulum(file.pendulum.unwrap_or_default()),
        EnvName::Integrator => EnvDescriptor::Integrator(file.integrator.unwrap_or_default()),
    };
    let default_len = if name == EnvName::Pendulum { 5 } else { 4 };
    let settings = GenSettings {
        env,
        n: args.n.or(file.n).unwrap_or(2000),
        t: args.t.or(file.t).unwrap_or(default_len),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args.out,
    };
    if settings.t == 0 {
        return Err(usage("--T must be at least 1"));
    }
    print_resolved("gen", threads, &settings);
    let d = generate(&settings.env, settings.n, settings.t, settings.seed)?;
    write_dataset(&d, &settings.out)?;
    let sensors: Vec<&str> = d.observations.iter().map(|(n, _)| n.as_str()).collect();
    println!(
        "wrote {} n={} T={} sensors={} seed={}",
        settings.out.display(),
        d.count(),
        d.len(),
        sensors.join(","),
        d.seed
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings {
    dataset: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    checkpoint_every: Option<usize>,
    train: TrainConfig,
}

fn trace_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".trace.txt");
    PathBuf::from(s)
}

fn render_trace(trainer: &Trainer) -> String {
    let mut out = String::from("# step elbo kl recon rho_A\n");
    for r in &trainer.trace {
        let _ = writeln!(out, "{} {} {} {} {}", r.step, r.elbo, r.kl, r.recon, r.rho_a);
    }
    out
}

fn save(trainer: &Trainer, path: &Path) -> Outcome<()> {
    let ck = Checkpoint {
        model: trainer.model.clone(),
        adam: trainer.adam.clone(),
        config: trainer.config.clone(),
        trace: trainer.trace.clone(),
    };
    write_checkpoint(&ck, path)?;
    write_text(&trace_path(path), &render_trace(trainer))
}

fn cmd_train(args: TrainArgs, file: FileConfig, threads: Option<usize>) -> Outcome<()> {
    let data = read_dataset(&args.dataset)?;
    let resumed = match &args.checkpoint {
        Some(p) => Some(read_checkpoint_for(p, data.env.state_dim(), data.env.input_dim())?),
        None => None,
    };
    let mut cfg = match &resumed {
        Some(ck) => ck.config.clone(),
        None => file.train.unwrap_or_default(),
    };
    if resumed.is_none() {
        if let Some(s) = file.seed {
            cfg.seed = s;
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.supervision {
        cfg.supervision = s.into();
    }
    if args.learn_dynamics {
        cfg.learn_dynamics = true;
    }
    if let Some(s) = args.samples {
        cfg.sample_count = s;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let settings = TrainSettings {
        dataset: args.dataset.clone(),
        out: args.out.clone(),
        resume: args.checkpoint.clone(),
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every),
        train: cfg.clone(),
    };
    print_resolved("train", threads, &settings);

    let mut trainer = match resumed {
        Some(ck) => {
            let old = &ck.config;
            let structural = old.supervision != cfg.supervision || old.learn_dynamics != cfg.learn_dynamics;
            if structural || old.seed != cfg.seed {
                return Err(Failure::from(VssfError::ConfigMismatch(
                    "supervision, learn_dynamics and seed must match the checkpoint".into(),
                )));
            }
            Trainer {
                model: ck.model,
                adam: ck.adam,
                config: cfg,
                trace: ck.trace,
            }
        }
        None => Trainer::new(initial_model(&data, &cfg)?, cfg)?,
    };
    if trainer.config.supervision != Supervision::None && trainer.model.sensor(SUPERVISION_SENSOR).is_err() {
        return Err(Failure::from(VssfError::ConfigMismatch("model lacks a supervision sensor".into())));
    }

    let every = settings.checkpoint_every.filter(|&k| k > 0);
    let target = trainer.config.steps;
    let mut outcome = Ok(());
    while (trainer.step() as usize) < target {
        let stop = match every {
            Some(k) => ((trainer.step() as usize / k + 1) * k).min(target),
            None => target,
        };
        trainer.config.steps = stop;
        let r = trainer.run(&data, |e| match e {
            TrainEvent::Step(row) => println!("{}", row.progress_line()),
            TrainEvent::Diagnostics(d) => {
                if d.collapsed() {
                    println!(
                        "warning: posterior collapse suspected at step={} rho_A={} mean_posterior_trace={} evidence_norm={}",
                        d.step, d.spectral_radius_a, d.mean_posterior_trace, d.evidence_norm
                    );
                }
            }
        });
        trainer.config.steps = target;
        if let Err(e) = r {
            outcome = Err(e);
            break;
        }
        if stop < target {
            save(&trainer, &args.out)?;
        }
    }
    // the last good state is saved even when a step failed
    save(&trainer, &args.out)?;
    outcome?;
    println!(
        "wrote {} and {} at step={}",
        args.out.display(),
        trace_path(&args.out).display(),
        trainer.step()
    );
    Ok(())
}

fn load_pair(checkpoint: &Path, dataset: &Path) -> Outcome<(Checkpoint, Dataset)> {
    let data = read_dataset(dataset)?;
    let ck = read_checkpoint_for(checkpoint, data.env.state_dim(), data.env.input_dim())?;
    Ok((ck, data))
}

#[derive(Serialize)]
struct EvalSettings {
    checkpoint: PathBuf,
    dataset: PathBuf,
    horizon: usize,
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs, file: FileConfig, threads: Option<usize>) -> Outcome<()> {
    let (ck, data) = load_pair(&args.checkpoint, &args.dataset)?;
    let settings = EvalSettings {
        checkpoint: args.checkpoint,
        dataset: args.dataset,
        horizon: args.horizon.or(file.horizon).unwrap_or(data.len()),
        out: args.out,
    };
    print_resolved("eval", threads, &settings);
    let scored = data.env.supervised_components();
    let report = evaluate_filter(&ck.model, &data, settings.horizon, &scored)?;
    let mut text = String::new();
    let scored_text: Vec<String> = scored.iter().map(usize::to_string).collect();
    let _ = writeln!(text, "# horizon={} scored={} n={}", report.horizon, scored_text.join(","), data.count());
    let _ = writeln!(text, "mse {}", report.mse);
    for (k, v) in report.component_mse.iter().enumerate() {
        let _ = writeln!(text, "mse_component_{k} {v}");
    }
    let _ = writeln!(text, "# t error");
    for (t, e) in report.step_error.iter().enumerate() {
        let _ = writeln!(text, "{} {e}", t + 1);
    }
    write_text(&settings.out, &text)?;
    println!("mse={} components={:?}", report.mse, report.component_mse);
    Ok(())
}

fn cmd_export(args: ExportArgs, threads: Option<usize>) -> Outcome<()> {
    let (ck, data) = load_pair(&args.checkpoint, &args.dataset)?;
    print_resolved(
        "export",
        threads,
        serde_json::json!({"checkpoint": args.checkpoint, "dataset": args.dataset, "out": args.out}),
    );
    let model = &ck.model;
    let names: Vec<&str> = model
        .sensors
        .iter()
        .map(|s| s.name.as_str())
        .filter(|&n| n != SUPERVISION_SENSOR)
        .collect();
    let m = model.state_dim();
    let mut text = String::from("# trajectory t");
    for prefix in ["true", "mean", "var"] {
        for k in 0..m {
            let _ = write!(text, " {prefix}_{k}");
        }
    }
    text.push('\n');
    let all: Vec<usize> = (0..data.count()).collect();
    for chunk in all.chunks(256) {
        let batch = data.batch(chunk, &names, None)?;
        let beliefs = model.filter_batch(&batch, &names)?;
        for (k, &i) in chunk.iter().enumerate() {
            for (t, b) in beliefs[k].iter().enumerate() {
                let _ = write!(text, "{i} {}", t + 1);
                for v in data.states.get(i, t) {
                    let _ = write!(text, " {v}");
                }
                for v in b.posterior.mean.iter() {
                    let _ = write!(text, " {v}");
                }
                for v in b.posterior.cov.diagonal().iter() {
                    let _ = write!(text, " {v}");
                }
                text.push('\n');
            }
        }
    }
    write_text(&args.out, &text)?;
    println!("wrote {} rows to {}", data.count() * data.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, file, cli.threads),
        Command::Train(a) => cmd_train(a, file, cli.threads),
        Command::Eval(a) => cmd_eval(a, file, cli.threads),
        Command::Export(a) => cmd_export(a, cli.threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
