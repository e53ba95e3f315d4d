use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reciperec_core::config::{PredictorKind, TrainConfig};
use reciperec_core::run::{eval_run, export_embeddings, train_run, TrainOptions};
use reciperec_core::selfcheck;
use reciperec_core::synth::{self, SyntheticSpec};
use reciperec_core::tensor::{fault, OpKind};
use reciperec_core::Error;

#[derive(Parser)]
#[command(name = "reciperec", version, about = "Heterogeneous graph recipe recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-cluster synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Split, train, evaluate; writes checkpoint, reports and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a split.
    Eval(EvalArgs),
    /// Gradient, attention, invariance and metric checks on toy fixtures.
    Selfcheck(SelfcheckArgs),
    /// Write final node embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    recipes: Option<usize>,
    #[arg(long)]
    ingredients: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    p_intra: Option<f64>,
    #[arg(long)]
    p_inter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    predictor: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Directory for report.json / report.txt / report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Test hook: corrupt the backward pass of this op (e.g. `matmul`).
    #[arg(long)]
    corrupt_op: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Selfcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn build_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c = match &args.config {
        Some(p) => TrainConfig::from_path(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read config {}: {io}", p.display())),
            other => other.into(),
        })?,
        None => TrainConfig::default(),
    };
    let o = &args.overrides;
    if let Some(v) = o.lr {
        c.lr = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.lambda {
        c.lambda = v;
    }
    if let Some(v) = o.tau {
        c.tau = v;
    }
    if let Some(v) = o.heads {
        c.heads = v;
    }
    if let Some(v) = o.hidden {
        c.hidden = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = &o.predictor {
        c.predictor = PredictorKind::parse(v)?;
    }
    c.validate()?;
    Ok(c)
}

fn build_spec(a: &GenSynthArgs) -> Result<SyntheticSpec, Failure> {
    let mut s = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("spec JSON: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { s.$f = v; } )* };
    }
    set!(users, recipes, ingredients, clusters, p_intra, p_inter, seed);
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenSynth(a) => {
            let spec = build_spec(&a)?;
            let g = synth::write(&spec, &a.out)?;
            println!(
                "wrote {} users, {} recipes, {} ingredients to {}",
                g.counts()[0],
                g.counts()[1],
                g.counts()[2],
                a.out.display()
            );
        }
        Command::Train(a) => {
            let config = build_config(&a)?;
            let opts = TrainOptions {
                resume: a.resume.clone(),
                split: a.split.clone(),
            };
            let m = train_run(&config, &a.data, &a.out, &opts)?;
            print!("{}", m.final_report.to_table());
        }
        Command::Eval(a) => {
            let report = eval_run(&a.checkpoint, &a.data, &a.split, a.out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Selfcheck(a) => {
            if let Some(name) = &a.corrupt_op {
                let op = OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown op `{name}`")))?;
                fault::corrupt(Some(op));
            }
            let report = selfcheck::run();
            print!("{report}");
            if !report.passed() {
                return Err(Failure::Selfcheck);
            }
        }
        Command::ExportEmbeddings(a) => {
            export_embeddings(&a.checkpoint, &a.data, a.split.as_deref(), &a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Selfcheck) => ExitCode::from(3),
    }
}
