use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_tree::correlation::{compute_correlations_with, CorrelationMatrix, Smoothing};
use latent_tree::io::{matrix_to_csv, read_matrix_csv, read_samples_csv, samples_to_csv};
use latent_tree::parameters::{estimate, FitConfig, Stage2Config, Stage2Error};
use latent_tree::quartet::tree_quartet_error;
use latent_tree::synth::{exact_matrix, generate_model, perturb, sample_data, GeneratorConfig, GeneratorModel};
use latent_tree::topology::{decompose, Stage1Config, Stage1Error};
use latent_tree::{DecompTree, ErrorMode, SimplifyPolicy, TiePolicy};
use serde::Serialize;

mod evaluate;
mod output;

use output::{write_atomic, write_json};

#[derive(Debug)]
enum Failure {
    /// Exit status 2.
    Input(String),
    /// Exit status 3.
    Numeric(String),
}

impl Failure {
    fn input(msg: impl ToString) -> Self {
        Failure::Input(msg.to_string())
    }

    fn numeric(msg: impl ToString) -> Self {
        Failure::Numeric(msg.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "latent-tree", version, about = "Minimum-error tree decomposition of binary variables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover a tree and its parameters from samples or a correlation matrix.
    Decompose(DecomposeArgs),
    /// Draw a random tree model and write its matrix and samples.
    Simulate(SimulateArgs),
    /// Compare a recovered tree or parameter report against a generator model.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Max,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    Precedence,
    FinestQuad,
    Lexicographic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimplifyArg {
    FlattenAll,
    #[value(name = "suppress-degree-2")]
    SuppressDegree2,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct InputArgs {
    /// Matrix CSV: `n`, n matrix rows, one marginals row.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Sample CSV of 0/1 observations, optional header.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "max")]
    error_mode: ModeArg,
    #[arg(long, value_enum, default_value = "precedence")]
    tie_policy: TieArg,
    #[arg(long, default_value_t = 1e-12)]
    epsilon_tie: f64,
    /// Pseudo-counts added to every cell of each 2×2 table (samples only).
    #[arg(long, default_value_t = 0.0)]
    laplace: f64,
    /// Leaf pairs with smaller |rho| are left out of the edge system.
    #[arg(long, default_value_t = 1e-6)]
    rho_min: f64,
    /// Fail instead of leaving out small-correlation pairs.
    #[arg(long)]
    strict_rows: bool,
    #[arg(long, default_value_t = 1e-9)]
    edge_tol: f64,
    /// Clamp reported edge correlations into [-1, 1].
    #[arg(long)]
    clamp_edges: bool,
    #[arg(long, default_value_t = 1e-10)]
    min_condition_ratio: f64,
    /// Shape of `tree.simplified.json` and `tree.dot`.
    #[arg(long, value_enum, default_value = "suppress-degree-2")]
    simplify: SimplifyArg,
    #[arg(long, default_value_t = 9)]
    fit_starts: usize,
    #[arg(long, default_value_t = 5000)]
    fit_max_iter: usize,
    /// Also write the step-by-step `trace.json`.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    rho_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    rho_hi: f64,
    #[arg(long, default_value_t = 0.0)]
    negative_prob: f64,
    /// Uniform noise half-width added to the written matrix.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Sample rows to draw; 0 skips `samples.csv`.
    #[arg(long, default_value_t = 0)]
    rows: usize,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Generator model JSON written by `simulate`.
    #[arg(long)]
    model: PathBuf,
    /// Tree JSON or parameter report JSON written by `decompose`.
    #[arg(long)]
    recovered: PathBuf,
    /// Optional path for the machine-readable verdict.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("LT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::input(format!("LT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::input)
}

fn open(path: &PathBuf) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_input(args: &DecomposeArgs) -> Result<CorrelationMatrix, Failure> {
    let m = match (&args.input.matrix, &args.input.samples) {
        (Some(path), _) => read_matrix_csv(open(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?,
        (_, Some(path)) => {
            let table = read_samples_csv(open(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            compute_correlations_with(&table, Smoothing { laplace: args.laplace }).map_err(Failure::input)?
        }
        _ => unreachable!("clap requires one input"),
    };
    if m.n() < 3 {
        return Err(Failure::input(format!("need at least 3 variables, found {}", m.n())));
    }
    Ok(m)
}

#[derive(Serialize)]
struct DiagnosticsSummary {
    n: usize,
    max_quartet_error: f64,
    quad_evaluations: u64,
    residual_norm: f64,
    fit_residual: f64,
    max_reconstruction_error: f64,
    sign_violations: usize,
    excluded_rows: usize,
    out_of_range_edges: usize,
}

fn cmd_decompose(args: DecomposeArgs) -> Outcome {
    let m = load_input(&args)?;
    let s1 = Stage1Config {
        error_mode: match args.error_mode {
            ModeArg::Max => ErrorMode::Max,
            ModeArg::Mean => ErrorMode::Mean,
        },
        tie_policy: match args.tie_policy {
            TieArg::Precedence => TiePolicy::Precedence,
            TieArg::FinestQuad => TiePolicy::FinestQuad,
            TieArg::Lexicographic => TiePolicy::Lexicographic,
        },
        epsilon_tie: args.epsilon_tie,
    };
    let decomp = decompose(&m, &s1).map_err(|e| match e {
        Stage1Error::TooSmall(_) => Failure::input(e),
        _ => Failure::numeric(e),
    })?;
    let s2 = Stage2Config {
        rho_min: args.rho_min,
        strict_rows: args.strict_rows,
        min_condition_ratio: args.min_condition_ratio,
        edge_tol: args.edge_tol,
        clamp_edges: args.clamp_edges,
        fit: FitConfig {
            starts: args.fit_starts,
            max_iter: args.fit_max_iter,
            ..FitConfig::default()
        },
    };
    let stage2 = estimate(&decomp.tree, &m, &s2).map_err(|e| match e {
        Stage2Error::UnknownLeaf(_) => Failure::input(e),
        _ => Failure::numeric(e),
    })?;
    let report = stage2.report();
    if !stage2.excluded.is_empty() {
        eprintln!(
            "warning: {} leaf pair(s) with |rho| < {} left out of the edge system",
            stage2.excluded.len(),
            args.rho_min
        );
    }
    if stage2.edges.sign_violations > 0 {
        eprintln!(
            "warning: no edge sign assignment reproduces every pairwise sign ({} violated)",
            stage2.edges.sign_violations
        );
    }

    let policy = match args.simplify {
        SimplifyArg::FlattenAll => SimplifyPolicy::FlattenAll,
        SimplifyArg::SuppressDegree2 => SimplifyPolicy::SuppressDegree2,
    };
    let shaped: DecompTree = decomp.tree.simplify(policy);
    let summary = DiagnosticsSummary {
        n: m.n(),
        max_quartet_error: tree_quartet_error(&m, &decomp.tree),
        quad_evaluations: decomp.quad_evaluations,
        residual_norm: report.diagnostics.residual_norm,
        fit_residual: report.diagnostics.fit_residual,
        max_reconstruction_error: report.diagnostics.max_reconstruction_error,
        sign_violations: report.diagnostics.sign_violations,
        excluded_rows: report.diagnostics.excluded_rows.len(),
        out_of_range_edges: report.diagnostics.out_of_range_edges.len(),
    };

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join("tree.json"), &decomp.tree)?;
    write_json(&dir.join("tree.simplified.json"), &shaped)?;
    write_atomic(&dir.join("tree.dot"), shaped.to_dot().as_bytes())?;
    write_json(&dir.join("parameters.json"), &report)?;
    write_json(&dir.join("diagnostics.json"), &summary)?;
    if args.trace {
        write_json(&dir.join("trace.json"), &decomp.trace)?;
    }
    println!("variables                 {}", summary.n);
    println!("max quartet error         {:e}", summary.max_quartet_error);
    println!("edge residual norm        {:e}", summary.residual_norm);
    println!("fit residual              {:e}", summary.fit_residual);
    println!("max reconstruction error  {:e}", summary.max_reconstruction_error);
    println!("sign violations           {}", summary.sign_violations);
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Outcome {
    let cfg = GeneratorConfig::new(args.n)
        .with_rho_range(args.rho_lo, args.rho_hi)
        .with_negative_prob(args.negative_prob);
    let model: GeneratorModel = generate_model(&cfg, args.seed).map_err(Failure::input)?;
    let exact = exact_matrix(&model);
    // independent streams for noise and sampling
    let noisy = perturb(&exact, args.eps, args.seed.wrapping_add(1)).map_err(Failure::input)?;

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join("model.json"), &model)?;
    write_atomic(&dir.join("matrix.csv"), matrix_to_csv(&noisy).as_bytes())?;
    if args.rows > 0 {
        let table = sample_data(&model, args.rows, args.seed.wrapping_add(2));
        write_atomic(&dir.join("samples.csv"), samples_to_csv(&table).as_bytes())?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Outcome {
    let read = |path: &PathBuf| {
        std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    };
    let model: GeneratorModel = serde_json::from_str(&read(&args.model)?)
        .map_err(|e| Failure::input(format!("{}: not a model: {e}", args.model.display())))?;
    let recovered = evaluate::Recovered::parse(&read(&args.recovered)?)
        .map_err(|e| Failure::input(format!("{}: {e}", args.recovered.display())))?;
    let verdict = evaluate::evaluate(&model, &recovered).map_err(Failure::input)?;
    print!("{}", verdict.render());
    if let Some(path) = &args.out {
        write_json(path, &verdict)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = configure_threads().and_then(|()| match cli.command {
        Command::Decompose(a) => cmd_decompose(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
