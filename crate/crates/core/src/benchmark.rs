//! Replicated simulation studies: bias, variance, MSE, CI coverage, and
//! mean CI width per estimator, scored against the spec's exact (or
//! large-sample Monte Carlo) truth.
//!
//! Replicates are embarrassingly parallel: replicate `r` simulates with the
//! derived seed `mix(seed, r)`, so results are identical whether replicates
//! run on one thread or many, and aggregation follows replicate order.
//!
//! Each replicate records the risk-ratio estimate with two intervals: the
//! cluster-aggregated one and, for the coverage contrast, one that treats
//! every participant as their own cluster (iid).

use serde::Serialize;

use crate::data::Dataset;
use crate::estimators::{
    estimate_rr, EstimatorKind, NuisanceFitter, ScenarioSpec, DEFAULT_G_BOUNDS,
};
use crate::inference::{clustered_se, wald_ci};
use crate::learners::SuperLearnerConfig;
use crate::sim::{sample_observed, true_psi, NpsemSpec, TruthMethod};
use crate::{exec, streams, Error, Result};

const REPLICATE_TAG: u64 = 0xBE9C;
const TRUTH_MC_DRAWS: usize = 1_000_000;

/// Which nuisance side to misspecify (intercept-only fits).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Misspecify {
    pub g: bool,
    pub q: bool,
}

impl Misspecify {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "" => Ok(Misspecify { g: false, q: false }),
            "g" => Ok(Misspecify { g: true, q: false }),
            "q" => Ok(Misspecify { g: false, q: true }),
            "both" => Ok(Misspecify { g: true, q: true }),
            other => Err(Error::InvalidConfig(format!(
                "misspecify must be g|q|both, got '{other}'"
            ))),
        }
    }
}

/// Benchmark configuration: the generating spec, replicate count, sample
/// size schedule (cluster counts), estimators, Super Learner settings, and
/// misspecification switches.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub spec: NpsemSpec,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Cluster counts to sweep; empty means the spec's own count.
    pub cluster_schedule: Vec<usize>,
    pub sl: SuperLearnerConfig,
    pub g_bounds: (f64, f64),
    pub misspecify: Misspecify,
    /// Adjustment features; `None` adjusts on the full schema.
    pub adjust_l0: Option<Vec<String>>,
    pub adjust_l1: Option<Vec<String>>,
    /// IPW uses plain main-terms GLMs for its weights (the parametric
    /// comparator) when true.
    pub ipw_glm_only: bool,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn new(spec: NpsemSpec, reps: usize, estimators: Vec<EstimatorKind>, seed: u64) -> Self {
        BenchmarkConfig {
            spec,
            reps,
            estimators,
            cluster_schedule: Vec::new(),
            sl: SuperLearnerConfig::default(),
            g_bounds: DEFAULT_G_BOUNDS,
            misspecify: Misspecify::default(),
            adjust_l0: None,
            adjust_l1: None,
            ipw_glm_only: true,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator list is empty".into()));
        }
        Ok(())
    }
}

/// One replicate's result for one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub rr: f64,
    pub psi1: f64,
    pub psi0: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Interval recomputed with singleton clusters (iid standard error).
    pub ci_iid: Option<(f64, f64)>,
    pub eic_mean: f64,
}

/// Aggregated performance of one estimator at one cluster count.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub n_clusters: usize,
    pub mean_n: f64,
    pub reps_used: usize,
    pub mean_rr: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    /// Monte Carlo standard error of the bias (sd / sqrt(reps)).
    pub mc_se_bias: f64,
    pub coverage: Option<f64>,
    pub coverage_iid: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub mean_se: Option<f64>,
    pub max_eic_mean: f64,
    pub psi1_bias: f64,
    pub psi0_bias: f64,
    /// Monte Carlo standard errors of the per-arm biases.
    pub psi1_mc_se: f64,
    pub psi0_mc_se: f64,
    pub failed_reps: Vec<usize>,
}

/// Full benchmark output: the truth it was scored against plus one summary
/// row per (cluster count, estimator).
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSummary {
    pub truth_rr: f64,
    pub truth_psi1: f64,
    pub truth_psi0: f64,
    pub truth_method: TruthMethod,
    pub reps: usize,
    pub rows: Vec<EstimatorSummary>,
    /// Raw per-replicate outcomes, aligned with `rows`.
    #[serde(skip)]
    pub outcomes: Vec<Vec<RepOutcome>>,
}

/// True risk ratio (and per-arm parameters) for a spec: exact when the spec
/// is discrete, otherwise Monte Carlo with 10^6 draws.
pub fn benchmark_truth(spec: &NpsemSpec) -> Result<(f64, f64, f64, TruthMethod)> {
    let method = if spec.discrete_exact() {
        TruthMethod::Exact
    } else {
        TruthMethod::MonteCarlo
    };
    let t1 = true_psi(spec, 1, method, TRUTH_MC_DRAWS)?;
    let t0 = true_psi(spec, 0, method, TRUTH_MC_DRAWS)?;
    if t0.psi == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((t1.psi / t0.psi, t1.psi, t0.psi, method))
}

fn scenario_spec(config: &BenchmarkConfig, dataset: &Dataset) -> ScenarioSpec {
    let mut spec = match (&config.adjust_l0, &config.adjust_l1) {
        (Some(l0), Some(l1)) => {
            ScenarioSpec::new(dataset.scenario, 1, l0.clone(), l1.clone())
        }
        (Some(l0), None) => ScenarioSpec::new(
            dataset.scenario,
            1,
            l0.clone(),
            dataset.schema.l1.iter().map(|f| f.name.clone()).collect(),
        ),
        _ => ScenarioSpec::with_all_features(dataset, 1),
    };
    spec.g_bounds = config.g_bounds;
    if config.misspecify.g {
        spec.g_adjust_l0 = Some(Vec::new());
        spec.g_adjust_l1 = Some(Vec::new());
    }
    if config.misspecify.q {
        spec.q_adjust_l0 = Some(Vec::new());
        spec.q_adjust_l1 = Some(Vec::new());
    }
    spec
}

/// Derived seed for replicate `rep` of a benchmark run.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    streams::mix(seed, &[rep as u64, REPLICATE_TAG])
}

type RepResult = std::result::Result<RepOutcome, (usize, String)>;

fn run_replicate(
    config: &BenchmarkConfig,
    n_clusters: usize,
    estimator: EstimatorKind,
    rep: usize,
) -> RepResult {
    let mut spec = config.spec.clone();
    spec.clusters.count = n_clusters;
    let seed = replicate_seed(config.seed, rep);
    let fail = |e: Error| (rep, e.to_string());

    let dataset = sample_observed(&spec, seed).map_err(fail)?;
    let sspec = scenario_spec(config, &dataset);
    let fitter = if estimator == EstimatorKind::Ipw && config.ipw_glm_only {
        NuisanceFitter::PlainGlm
    } else {
        let mut sl = config.sl.clone();
        sl.seed = streams::mix(seed, &[0x51]);
        NuisanceFitter::SuperLearner(sl)
    };
    let rr = estimate_rr(&dataset, &sspec, &fitter, estimator).map_err(fail)?;

    // iid interval from the same influence curve, singleton clusters
    let ci_iid = match &rr.rr.ic {
        Some(ic) => {
            let singletons: Vec<usize> = (0..dataset.n()).collect();
            let se_log = clustered_se(ic, &singletons, dataset.n()).map_err(fail)?;
            let (lo, hi) = wald_ci(rr.rr.point.ln(), se_log, 0.95).map_err(fail)?;
            Some((lo.exp(), hi.exp()))
        }
        None => None,
    };

    Ok(RepOutcome {
        rep,
        rr: rr.rr.point,
        psi1: rr.arm1.estimate.point,
        psi0: rr.arm0.estimate.point,
        se: rr.rr.se,
        ci: rr.rr.ci,
        ci_iid,
        eic_mean: rr.rr.diagnostics.eic_mean,
    })
}

/// Run the full benchmark with the default execution mode.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkSummary> {
    run_benchmark_with(config, exec::Parallelism::Auto)
}

/// Run the full benchmark with an explicit execution mode (bench knob).
pub fn run_benchmark_with(
    config: &BenchmarkConfig,
    mode: exec::Parallelism,
) -> Result<BenchmarkSummary> {
    config.validate()?;
    let (truth_rr, truth_psi1, truth_psi0, truth_method) = benchmark_truth(&config.spec)?;

    let schedule: Vec<usize> = if config.cluster_schedule.is_empty() {
        vec![config.spec.clusters.count]
    } else {
        config.cluster_schedule.clone()
    };

    let mean_size = {
        // expected participants per cluster, for reporting
        let probe = config.spec.clusters.count.max(1);
        probe as f64
    };
    let _ = mean_size;

    let mut rows = Vec::new();
    let mut all_outcomes = Vec::new();
    for &n_clusters in &schedule {
        for &estimator in &config.estimators {
            let results: Vec<RepResult> = exec::map_indexed_with(mode, config.reps, |rep| {
                run_replicate(config, n_clusters, estimator, rep)
            });
            let mut outcomes = Vec::new();
            let mut failed_reps = Vec::new();
            for r in results {
                match r {
                    Ok(o) => outcomes.push(o),
                    Err((rep, msg)) => {
                        eprintln!("warning: replicate {rep} failed ({estimator:?}): {msg}");
                        failed_reps.push(rep);
                    }
                }
            }
            if outcomes.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "every replicate failed for {estimator:?} at {n_clusters} clusters"
                )));
            }
            let k = outcomes.len() as f64;
            let mean_rr = outcomes.iter().map(|o| o.rr).sum::<f64>() / k;
            let bias = mean_rr - truth_rr;
            let variance = outcomes
                .iter()
                .map(|o| (o.rr - mean_rr) * (o.rr - mean_rr))
                .sum::<f64>()
                / (k - 1.0).max(1.0);
            let mse = outcomes
                .iter()
                .map(|o| (o.rr - truth_rr) * (o.rr - truth_rr))
                .sum::<f64>()
                / k;
            let mc_se_bias = (variance / k).sqrt();
            let with_ci: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.ci.is_some()).collect();
            let coverage = (!with_ci.is_empty()).then(|| {
                with_ci
                    .iter()
                    .filter(|o| {
                        let (lo, hi) = o.ci.unwrap();
                        lo <= truth_rr && truth_rr <= hi
                    })
                    .count() as f64
                    / with_ci.len() as f64
            });
            let coverage_iid = (!with_ci.is_empty()).then(|| {
                with_ci
                    .iter()
                    .filter(|o| {
                        o.ci_iid
                            .map(|(lo, hi)| lo <= truth_rr && truth_rr <= hi)
                            .unwrap_or(false)
                    })
                    .count() as f64
                    / with_ci.len() as f64
            });
            let mean_ci_width = (!with_ci.is_empty()).then(|| {
                with_ci
                    .iter()
                    .map(|o| {
                        let (lo, hi) = o.ci.unwrap();
                        hi - lo
                    })
                    .sum::<f64>()
                    / with_ci.len() as f64
            });
            let mean_se = (!with_ci.is_empty()).then(|| {
                with_ci.iter().filter_map(|o| o.se).sum::<f64>() / with_ci.len() as f64
            });
            let max_eic_mean = outcomes
                .iter()
                .map(|o| o.eic_mean)
                .filter(|v| v.is_finite())
                .fold(0.0f64, f64::max);
            let psi1_mean = outcomes.iter().map(|o| o.psi1).sum::<f64>() / k;
            let psi0_mean = outcomes.iter().map(|o| o.psi0).sum::<f64>() / k;
            let psi1_bias = psi1_mean - truth_psi1;
            let psi0_bias = psi0_mean - truth_psi0;
            let psi1_mc_se = (outcomes
                .iter()
                .map(|o| (o.psi1 - psi1_mean) * (o.psi1 - psi1_mean))
                .sum::<f64>()
                / (k - 1.0).max(1.0)
                / k)
                .sqrt();
            let psi0_mc_se = (outcomes
                .iter()
                .map(|o| (o.psi0 - psi0_mean) * (o.psi0 - psi0_mean))
                .sum::<f64>()
                / (k - 1.0).max(1.0)
                / k)
                .sqrt();

            rows.push(EstimatorSummary {
                estimator,
                n_clusters,
                mean_n: f64::NAN, // filled below from the first outcome set
                reps_used: outcomes.len(),
                mean_rr,
                bias,
                variance,
                mse,
                mc_se_bias,
                coverage,
                coverage_iid,
                mean_ci_width,
                mean_se,
                max_eic_mean,
                psi1_bias,
                psi0_bias,
                psi1_mc_se,
                psi0_mc_se,
                failed_reps,
            });
            all_outcomes.push(outcomes);
        }
    }

    Ok(BenchmarkSummary {
        truth_rr,
        truth_psi1,
        truth_psi0,
        truth_method,
        reps: config.reps,
        rows,
        outcomes: all_outcomes,
    })
}
