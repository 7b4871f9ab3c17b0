use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moce_core::annealing::{schedule_csv, AnnealConfig, ScheduleKind};
use moce_core::data::{
    degrade, gen_corpus, read_corpus, write_corpus, Corpus, CorpusSpec, DegradationConfig,
};
use moce_core::model::{nsa_objective, Supervision, TermWeights};
use moce_core::numeric::{finite_diff_check, DenseMatrix, ProbVector};
use moce_core::roles::{RoleClassifierParams, NUM_ROLES};
use moce_core::routing::{
    forward, oracle_forward, prior_graph, routing_report, write_report_csv, ModelParams,
};
use moce_core::trainer::{evaluate, train_from_config, Checkpoint, TrainConfig};
use moce_core::{rng, Error, Result, TokenBatch};

#[derive(Parser)]
#[command(
    name = "moce",
    version,
    about = "Role-aware expert routing: data, training and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic role-labelled corpus.
    GenData(GenDataArgs),
    /// Apply token-level degradation to a corpus.
    Degrade(DegradeArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(ModelCorpusArgs),
    /// Write the per-token routing report as CSV.
    Route(RouteArgs),
    /// Dump the loss-annealing schedule as CSV.
    Schedule(ScheduleArgs),
    /// Compare the vectorized forward pass with the scalar reference.
    OracleCheck(OracleArgs),
    /// Finite-difference check of the training-loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Draw roles uniformly instead of from the skewed default prior.
    #[arg(long)]
    uniform_prior: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Use the curriculum mapping for this severity; the explicit rates below
    /// are then ignored.
    #[arg(long)]
    severity: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    mask: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train_corpus` from the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides `eval_corpus` from the config.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct ModelCorpusArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct RouteArgs {
    #[command(flatten)]
    io: ModelCorpusArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "sigmoid")]
    kind: ScheduleKind,
    /// Sigmoid midpoint; defaults to half the epochs.
    #[arg(long)]
    e: Option<f64>,
    /// Sigmoid slope; defaults to a tenth of the epochs.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    epochs: usize,
    /// Step schedule breaks as `epoch:value` pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    breaks: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    io: ModelCorpusArgs,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Check at these parameters instead of a fresh initialization.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    seq: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Without `--model`, role weights are redrawn at this scale. The
    /// training initialization keeps α near zero, where every gradient that
    /// flows through the routing weights is too small to compare reliably.
    #[arg(long, default_value_t = 0.5)]
    role_scale: f64,
}

/// Failure modes mapped to exit statuses.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let _ = io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn load_inputs(a: &ModelCorpusArgs) -> Result<(Checkpoint, Corpus, TokenBatch)> {
    let ckpt = Checkpoint::load(&a.model)?;
    let corpus = read_corpus(&a.corpus)?;
    if corpus.dim != ckpt.params.dim() {
        return Err(Error::Validation(format!(
            "corpus D={} but the model expects D={}",
            corpus.dim,
            ckpt.params.dim()
        )));
    }
    let x = corpus.batch(&corpus.all_indices())?;
    Ok((ckpt, corpus, x))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = CorpusSpec::toy(a.tokens, a.dim, a.seed)?;
    spec.cluster_separation = a.separation;
    if a.uniform_prior {
        spec.role_prior = ProbVector::uniform(NUM_ROLES);
    }
    let corpus = gen_corpus(&spec)?;
    write_corpus(&corpus, &a.out)?;
    eprintln!("wrote {} tokens to {}", corpus.len(), a.out.display());
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let cfg = match a.severity {
        Some(s) => DegradationConfig::at_severity(s, a.mask)?,
        None => DegradationConfig {
            label_mask_rate: a.mask,
            embedding_noise_sigma: a.noise,
            token_dropout_rate: a.dropout,
            role_label_flip_rate: a.flip,
            severity: 0.0,
        },
    };
    let corpus = read_corpus(&a.corpus)?;
    let out = degrade(&corpus, &cfg, a.seed)?;
    write_corpus(&out, &a.out)?;
    eprintln!("kept {} of {} tokens", out.len(), corpus.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> std::result::Result<(), Failure> {
    if !a.config.is_file() {
        return Err(Failure::Usage(format!(
            "config file not found: {}",
            a.config.display()
        )));
    }
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(p) = a.corpus {
        cfg.train_corpus = Some(p);
    }
    if let Some(p) = a.eval_corpus {
        cfg.eval_corpus = Some(p);
    }
    let (ckpt, log) = train_from_config(&cfg)?;
    ckpt.save(&a.out)?;
    if let Some(p) = a.metrics {
        log.write_csv(&p)?;
    }
    if let Some(m) = &ckpt.final_metrics {
        eprintln!("final eval task mse {}", m.task_mse);
    }
    Ok(())
}

fn eval_cmd(a: ModelCorpusArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let corpus = read_corpus(&a.corpus)?;
    let m = evaluate(&ckpt, &corpus)?;
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Validation(e.to_string()))?;
    emit(None, &format!("{text}\n"))
}

fn route_cmd(a: RouteArgs) -> Result<()> {
    let (ckpt, _, x) = load_inputs(&a.io)?;
    let out = forward(&x, &ckpt.params, &ckpt.route)?;
    let records = routing_report(&out.state, &out.roles)?;
    let mut buf = Vec::new();
    write_report_csv(&records, &mut buf).map_err(|e| Error::Validation(e.to_string()))?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf))
}

fn schedule_cmd(a: ScheduleArgs) -> Result<()> {
    let mut cfg = AnnealConfig::default_for(a.epochs);
    cfg.kind = a.kind;
    if let Some(e) = a.e {
        cfg.midpoint = e;
    }
    if let Some(s) = a.s {
        cfg.slope = s;
    }
    for b in &a.breaks {
        let parsed = b
            .split_once(':')
            .and_then(|(e, v)| Some((e.trim().parse().ok()?, v.trim().parse().ok()?)));
        match parsed {
            Some(pair) => cfg.step_breaks.push(pair),
            None => {
                return Err(Error::Config(format!(
                    "bad step break {b:?}, expected epoch:value"
                )))
            }
        }
    }
    emit(a.out.as_deref(), &schedule_csv(&cfg)?)
}

fn oracle_cmd(a: OracleArgs) -> std::result::Result<(), Failure> {
    let (ckpt, _, x) = load_inputs(&a.io)?;
    let fast = forward(&x, &ckpt.params, &ckpt.route)?;
    let slow = oracle_forward(&x, &ckpt.params, &ckpt.route)?;
    let diff = fast.fused.values.max_abs_diff(&slow.values)?;
    println!("tokens {}", x.len());
    println!("max_abs_diff {diff:e}");
    println!("tol {:e}", a.tol);
    if diff <= a.tol {
        println!("status ok");
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "max diff {diff:e} exceeds tolerance {:e}",
            a.tol
        )))
    }
}

fn grad_check_cmd(a: GradCheckArgs) -> std::result::Result<(), Failure> {
    let params = match &a.model {
        Some(p) => Checkpoint::load(p)?.params,
        None => {
            let mut p = ModelParams::init(a.seed, a.dim, 2 * a.dim, 0.05)?;
            let mut s = rng::stream(rng::derive_label(a.seed, "grad-check-roles"));
            p.role = RoleClassifierParams::gaussian(a.dim, NUM_ROLES, a.role_scale, &mut s);
            p
        }
    };
    let d = params.dim();
    let n = a.batch * a.seq;
    let mut s = rng::stream(rng::derive_label(a.seed, "grad-check"));
    let x = TokenBatch::from_matrix(a.batch, a.seq, DenseMatrix::gaussian(n, d, 1.0, &mut s))?;
    let targets = DenseMatrix::gaussian(n, d, 1.0, &mut s);
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_ROLES).collect();
    let mask = vec![true; n];
    let graph = prior_graph();
    let sup = Supervision {
        targets: &targets,
        labels: &labels,
        mask: &mask,
        compat_graph: &graph,
    };
    let opts = moce_core::routing::RouteOptions::with_beta(a.beta);
    let weights = TermWeights {
        task: 1.0 - a.lambda,
        role: a.lambda,
        struct_align: 0.5 * a.lambda,
    };
    let bundle: Vec<(String, DenseMatrix)> = ModelParams::tensor_names()
        .into_iter()
        .zip(params.tensors().into_iter().cloned())
        .collect();
    let report = finite_diff_check(
        |theta| {
            let p = params.with_tensors(theta)?;
            let (v, g) = nsa_objective(&p, &x, &sup, &opts, weights)?;
            Ok((v.total, g.tensors().into_iter().cloned().collect()))
        },
        &bundle,
        a.eps,
    )?;
    println!("param,entries,max_abs_error,max_rel_error");
    for p in &report.params {
        println!(
            "{},{},{:e},{:e}",
            p.name, p.entries, p.max_abs_error, p.max_rel_error
        );
    }
    println!("overall_max_rel_error {:e}", report.max_rel_error);
    if report.max_rel_error <= a.tol {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "max relative error {:e} exceeds tolerance {:e}",
            report.max_rel_error, a.tol
        )))
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Degrade(a) => degrade_cmd(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Route(a) => route_cmd(a)?,
        Command::Schedule(a) => schedule_cmd(a)?,
        Command::OracleCheck(a) => oracle_cmd(a)?,
        Command::GradCheck(a) => grad_check_cmd(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
