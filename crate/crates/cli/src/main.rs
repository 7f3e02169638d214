//! Command-line surface for the estimation engine.
//!
//! Subcommands:
//! - `simulate`: draw an observed dataset from a structural spec (CSV out).
//! - `truth`: evaluate the spec's causal parameter and, in exact mode, the
//!   observed-data g-formula value alongside it — the identification gap.
//! - `analyze`: run the chosen estimators on a dataset; emits a results
//!   table, JSON, and forest-plot CSV.
//! - `benchmark`: replicated simulation study scored against the truth.
//!
//! Exit codes: 0 success, 2 validation failure, 3 estimation failure,
//! 4 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causalmiss::benchmark::{run_benchmark, BenchmarkConfig, Misspecify};
use causalmiss::data::{infer_schema, load_csv, validate, write_csv, Scenario};
use causalmiss::estimators::{
    estimate_rr, EstimatorKind, NuisanceFitter, RrResult, ScenarioSpec,
};
use causalmiss::learners::{LearnerKind, Loss, SuperLearnerConfig};
use causalmiss::sim::{
    gformula_exact, sample_observed, true_psi, NpsemSpec, TruthMethod, TruthReport,
};
use causalmiss::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "causalmiss",
    about = "Causal estimation with missing exposures, missing outcomes, and clustered data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an observed dataset from a structural spec and write CSV.
    Simulate(SimulateArgs),
    /// Evaluate the causal parameter (and the identification gap in exact
    /// mode) implied by a structural spec.
    Truth(TruthArgs),
    /// Estimate exposure effects on a dataset.
    Analyze(AnalyzeArgs),
    /// Replicated simulation study: bias, variance, MSE, CI coverage.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Structural spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TruthArgs {
    /// Structural spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// exact | mc
    #[arg(long, default_value = "exact")]
    method: String,
    /// Monte Carlo draws (mc method).
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    /// Write the report JSON here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input dataset (CSV with l0.* / l1.* covariate columns).
    #[arg(long)]
    data: PathBuf,
    /// Scenario tag: S1..S4.
    #[arg(long)]
    scenario: String,
    /// Comma-separated estimators: cc, ipw, gcomp, tmle.
    #[arg(long, default_value = "cc,ipw,gcomp,tmle")]
    estimators: String,
    /// Baseline adjustment features (default: all l0.* columns).
    #[arg(long)]
    l0: Option<String>,
    /// Time-varying adjustment features (default: all l1.* columns).
    #[arg(long)]
    l1: Option<String>,
    /// Super Learner library.
    #[arg(long, default_value = "mean,glm")]
    sl_library: String,
    /// Super Learner loss: nll | squared_error.
    #[arg(long, default_value = "nll")]
    loss: String,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Truncation bounds "lo,hi" for estimated probabilities.
    #[arg(long, default_value = "0.01,0.99")]
    truncate: String,
    /// Clustering unit column.
    #[arg(long, default_value = "cluster_id")]
    cluster_col: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix: writes <out>.json and <out>_forest.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Structural spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Replicate count.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Comma-separated estimators.
    #[arg(long, default_value = "cc,ipw,tmle")]
    estimators: String,
    /// Comma-separated cluster counts to sweep (default: the spec's count).
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long, default_value = "mean,glm")]
    sl_library: String,
    #[arg(long, default_value = "nll")]
    loss: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value = "0.01,0.99")]
    truncate: String,
    /// Drop all adjustment covariates from one nuisance side: g | q | both.
    #[arg(long)]
    misspecify: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the summary JSON here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::ValidationFailed(_) => EXIT_VALIDATION,
        Error::Io(_)
        | Error::Csv(_)
        | Error::MissingColumn(_)
        | Error::UnparseableCell { .. }
        | Error::UnknownLevel { .. }
        | Error::InvalidSpec(_)
        | Error::InvalidConfig(_)
        | Error::UnknownFeature(_)
        | Error::ExactRequiresDiscrete
        | Error::EnumerationTooLarge(_, _)
        | Error::InvalidSuperLearner(_)
        | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_ESTIMATION,
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Error> {
    let spec = NpsemSpec::from_path(&args.spec)?;
    let dataset = sample_observed(&spec, args.seed)?;
    let report = validate(&dataset);
    if !report.pass {
        return Err(Error::ValidationFailed(report.summary()));
    }
    write_csv(&dataset, &args.out)?;

    let n = dataset.n();
    let rate = |f: &dyn Fn(&causalmiss::data::ObservedRecord) -> bool| {
        dataset.records.iter().filter(|r| f(r)).count() as f64 / n.max(1) as f64
    };
    println!("wrote {} records in {} clusters to {}", n, dataset.n_clusters(), args.out.display());
    println!("missingness rates:");
    println!("  delta_a = 0:  {:.4}", rate(&|r| r.delta_a == 0));
    if spec.scenario.has_baseline_outcome() {
        println!("  delta_y0 = 0: {:.4}", rate(&|r| r.delta_y0 == Some(0)));
    }
    println!("  delta_y1 = 0: {:.4}", rate(&|r| r.delta_y1 == 0));
    Ok(0)
}

// ---------------------------------------------------------------------------
// truth
// ---------------------------------------------------------------------------

fn truth_block(report: &TruthReport) -> serde_json::Value {
    serde_json::json!({
        "exposure": report.exposure,
        "psi": report.psi,
        "numerator": report.numerator,
        "denominator": report.denominator,
        "mc_se": report.mc_se,
        "n_draws": report.n_draws,
    })
}

fn cmd_truth(args: TruthArgs) -> Result<u8, Error> {
    let spec = NpsemSpec::from_path(&args.spec)?;
    let method = match args.method.as_str() {
        "exact" => TruthMethod::Exact,
        "mc" | "monte_carlo" => TruthMethod::MonteCarlo,
        other => {
            return Err(Error::InvalidConfig(format!(
                "method must be exact or mc, got '{other}'"
            )))
        }
    };
    let t1 = true_psi(&spec, 1, method, args.draws)?;
    let t0 = true_psi(&spec, 0, method, args.draws)?;
    if t0.psi == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let mut doc = serde_json::json!({
        "scenario": spec.scenario,
        "method": method,
        "counterfactual": [truth_block(&t1), truth_block(&t0)],
        "rr": t1.psi / t0.psi,
    });
    if method == TruthMethod::Exact {
        let g1 = gformula_exact(&spec, 1)?;
        let g0 = gformula_exact(&spec, 0)?;
        doc["gformula"] = serde_json::json!([truth_block(&g1), truth_block(&g0)]);
        // identification gap: zero (to numerical precision) when the
        // missing-at-random structure holds
        doc["identification_gap"] = serde_json::json!([
            (t1.psi - g1.psi).abs(),
            (t0.psi - g0.psi).abs(),
        ]);
    }
    let text = serde_json::to_string_pretty(&doc)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>, Error> {
    let list: Vec<EstimatorKind> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(EstimatorKind::parse)
        .collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err(Error::InvalidConfig("estimator list is empty".into()));
    }
    Ok(list)
}

fn parse_library(s: &str) -> Result<Vec<LearnerKind>, Error> {
    let list: Vec<LearnerKind> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(LearnerKind::parse)
        .collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err(Error::InvalidConfig("learner library is empty".into()));
    }
    Ok(list)
}

fn parse_loss(s: &str) -> Result<Loss, Error> {
    match s.trim() {
        "nll" => Ok(Loss::NegLogLik),
        "squared_error" | "se" => Ok(Loss::SquaredError),
        other => Err(Error::InvalidConfig(format!(
            "loss must be nll or squared_error, got '{other}'"
        ))),
    }
}

fn parse_bounds(s: &str) -> Result<(f64, f64), Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "truncation bounds must be 'lo,hi', got '{s}'"
        )));
    }
    let lo: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad bound '{}'", parts[1])))?;
    Ok((lo, hi))
}

fn parse_feature_list(s: &Option<String>) -> Option<Vec<String>> {
    s.as_ref().map(|v| {
        v.split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect()
    })
}

fn fmt_ci(ci: Option<(f64, f64)>) -> String {
    match ci {
        Some((lo, hi)) => format!("({lo:.3}, {hi:.3})"),
        None => "--".to_string(),
    }
}

fn result_json(r: &RrResult) -> serde_json::Value {
    serde_json::json!({
        "estimator": r.estimator.name(),
        "rr": r.rr.to_json(),
        "psi_1": r.arm1.estimate.to_json(),
        "psi_0": r.arm0.estimate.to_json(),
        "numerator_1": r.arm1.numerator.as_ref().map(|e| e.to_json()),
        "denominator_1": r.arm1.denominator.as_ref().map(|e| e.to_json()),
        "numerator_0": r.arm0.numerator.as_ref().map(|e| e.to_json()),
        "denominator_0": r.arm0.denominator.as_ref().map(|e| e.to_json()),
        "tmle_fluctuations_1": r.arm1.fluctuations,
        "tmle_fluctuations_0": r.arm0.fluctuations,
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<u8, Error> {
    let scenario = Scenario::parse(&args.scenario)?;
    let schema = infer_schema(&args.data, scenario, &args.cluster_col)?;
    let dataset = load_csv(&args.data, scenario, &schema)?;
    let report = validate(&dataset);
    if !report.pass {
        eprintln!("validation failed: {}", report.summary());
        return Err(Error::ValidationFailed(report.summary()));
    }

    let estimators = parse_estimators(&args.estimators)?;
    let library = parse_library(&args.sl_library)?;
    let loss = parse_loss(&args.loss)?;
    let bounds = parse_bounds(&args.truncate)?;

    let l0 = parse_feature_list(&args.l0)
        .unwrap_or_else(|| dataset.schema.l0.iter().map(|f| f.name.clone()).collect());
    let l1 = parse_feature_list(&args.l1)
        .unwrap_or_else(|| dataset.schema.l1.iter().map(|f| f.name.clone()).collect());
    let mut spec = ScenarioSpec::new(scenario, 1, l0, l1);
    spec.g_bounds = bounds;

    let sl = SuperLearnerConfig {
        folds: args.folds,
        loss,
        library,
        seed: args.seed,
    };
    let fitter = NuisanceFitter::SuperLearner(sl);

    let mut rows: Vec<(EstimatorKind, Result<RrResult, Error>)> = Vec::new();
    for kind in estimators {
        // IPW's parametric comparator role: plain GLMs for the weights
        let result = if kind == EstimatorKind::Ipw {
            estimate_rr(&dataset, &spec, &NuisanceFitter::PlainGlm, kind)
        } else {
            estimate_rr(&dataset, &spec, &fitter, kind)
        };
        rows.push((kind, result));
    }

    // text table
    println!(
        "{:<8} {:>8} {:>18} {:>8} {:>18} {:>8} {:>18}",
        "est", "rr", "rr 95% CI", "psi_1", "psi_1 95% CI", "psi_0", "psi_0 95% CI"
    );
    for (kind, result) in &rows {
        match result {
            Ok(r) => println!(
                "{:<8} {:>8.4} {:>18} {:>8.4} {:>18} {:>8.4} {:>18}",
                kind.name(),
                r.rr.point,
                fmt_ci(r.rr.ci),
                r.arm1.estimate.point,
                fmt_ci(r.arm1.estimate.ci),
                r.arm0.estimate.point,
                fmt_ci(r.arm0.estimate.ci),
            ),
            Err(e) => println!("{:<8} failed: {e}", kind.name()),
        }
    }

    let any_failed = rows.iter().any(|(_, r)| r.is_err());
    if let Some(out) = &args.out {
        let blocks: Vec<serde_json::Value> = rows
            .iter()
            .map(|(kind, result)| match result {
                Ok(r) => result_json(r),
                Err(e) => serde_json::json!({
                    "estimator": kind.name(),
                    "error": e.to_string(),
                }),
            })
            .collect();
        let doc = serde_json::json!({
            "scenario": scenario,
            "n": dataset.n(),
            "m_clusters": dataset.n_clusters(),
            "results": blocks,
        });
        let json_path = out.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;

        // forest-plot data: label, rr, lo, hi
        let forest_path = {
            let mut p = out.clone();
            let stem = p
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "results".to_string());
            p.set_file_name(format!("{stem}_forest.csv"));
            p
        };
        let mut forest = String::from("label,rr,lo,hi\n");
        for (kind, result) in &rows {
            if let Ok(r) = result {
                let (lo, hi) = r.rr.ci.unwrap_or((f64::NAN, f64::NAN));
                forest.push_str(&format!("{},{},{},{}\n", kind.name(), r.rr.point, lo, hi));
            }
        }
        std::fs::write(&forest_path, forest)?;
        println!(
            "wrote {} and {}",
            json_path.display(),
            forest_path.display()
        );
    }

    Ok(if any_failed { EXIT_ESTIMATION } else { 0 })
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

fn cmd_benchmark(args: BenchmarkArgs) -> Result<u8, Error> {
    let spec = NpsemSpec::from_path(&args.spec)?;
    let estimators = parse_estimators(&args.estimators)?;
    let library = parse_library(&args.sl_library)?;
    let loss = parse_loss(&args.loss)?;
    let bounds = parse_bounds(&args.truncate)?;
    let misspecify = match &args.misspecify {
        Some(s) => Misspecify::parse(s)?,
        None => Misspecify::default(),
    };
    let schedule: Vec<usize> = match &args.clusters {
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad cluster count '{t}'")))
            })
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };

    let mut config = BenchmarkConfig::new(spec, args.reps, estimators, args.seed);
    config.cluster_schedule = schedule;
    config.sl = SuperLearnerConfig {
        folds: args.folds,
        loss,
        library,
        seed: args.seed,
    };
    config.g_bounds = bounds;
    config.misspecify = misspecify;

    let summary = run_benchmark(&config)?;

    println!(
        "truth: rr={:.4} psi_1={:.4} psi_0={:.4} ({:?})",
        summary.truth_rr, summary.truth_psi1, summary.truth_psi0, summary.truth_method
    );
    println!(
        "{:<8} {:>9} {:>10} {:>10} {:>10} {:>9} {:>9} {:>7}",
        "est", "clusters", "bias", "variance", "mse", "coverage", "width", "failed"
    );
    for row in &summary.rows {
        println!(
            "{:<8} {:>9} {:>10.5} {:>10.6} {:>10.6} {:>9} {:>9} {:>7}",
            row.estimator.name(),
            row.n_clusters,
            row.bias,
            row.variance,
            row.mse,
            row.coverage
                .map(|c| format!("{c:.3}"))
                .unwrap_or_else(|| "--".into()),
            row.mean_ci_width
                .map(|w| format!("{w:.4}"))
                .unwrap_or_else(|| "--".into()),
            row.failed_reps.len(),
        );
    }

    let text = serde_json::to_string_pretty(&summary)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(0)
}
