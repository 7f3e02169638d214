//! The four estimators: complete-case, IPW, sequential G-computation, and
//! sequential-regression TMLE, each for every scenario and exposure level.
//!
//! All estimators share one nuisance layer. The g-factors are the
//! measurement/exposure propensities — `P(delta_a=1 | L0)`,
//! `P(A=a | delta_a=1, L0)`, and per scenario the outcome-measurement
//! propensities — each fit on its defining subpopulation and truncated to
//! the configured bounds. The Q-factors are the sequential outcome
//! regressions, fit innermost-first: the innermost conditional mean of the
//! outcome given the full measured past, then regressions of those
//! predictions on the baseline covariates (with baseline-positive rows
//! contributing pseudo-outcome 0 for the S4 numerator, since the joint
//! indicator is 0 there), and finally an empirical mean over all N records.
//!
//! TMLE fluctuates each Q level on the logit scale with an intercept-only
//! weighted logistic update, weight = 1 / (cumulative product of the
//! truncated g-factors up to that level), fitted on that level's
//! subpopulation. The per-participant influence-curve components accumulate
//! across levels, so the reported estimate solves the efficient influence
//! curve equation (each component's empirical mean is ~0). For the S4 ratio
//! estimand the numerator and denominator get separate TMLEs combined by the
//! Delta method, and the risk ratio applies the Delta method a second time
//! on the log scale.
//!
//! A measurement indicator that is constant 1 in the data is a degenerate
//! g-factor: it contributes the constant 1 and no fit happens, which makes
//! the complete-data scenarios exact special cases of the general code path.

use serde::Serialize;

use crate::data::{Dataset, FeatureSelection, Scenario};
use crate::inference::{clustered_se, delta_method_log, delta_method_ratio, wald_ci, IcEstimate};
use crate::learners::{
    fit_logistic_glm, fluctuation_intercept, superlearner_fit, RegressionTask, SuperLearnerConfig,
};
use crate::{clamp_prob, expit, logit, Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

pub const DEFAULT_G_BOUNDS: (f64, f64) = (0.01, 0.99);

/// Scenario, exposure level, adjustment sets, and truncation bounds.
///
/// The optional `g_*` / `q_*` overrides restrict the adjustment set of one
/// nuisance side only — the benchmark harness uses them to study
/// misspecification (an empty override is an intercept-only fit).
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub exposure: u8,
    pub adjust_l0: Vec<String>,
    pub adjust_l1: Vec<String>,
    /// Truncation bounds for estimated g-factor probabilities.
    pub g_bounds: (f64, f64),
    pub g_adjust_l0: Option<Vec<String>>,
    pub g_adjust_l1: Option<Vec<String>>,
    pub q_adjust_l0: Option<Vec<String>>,
    pub q_adjust_l1: Option<Vec<String>>,
}

impl ScenarioSpec {
    pub fn new(
        scenario: Scenario,
        exposure: u8,
        adjust_l0: Vec<String>,
        adjust_l1: Vec<String>,
    ) -> Self {
        ScenarioSpec {
            scenario,
            exposure,
            adjust_l0,
            adjust_l1,
            g_bounds: DEFAULT_G_BOUNDS,
            g_adjust_l0: None,
            g_adjust_l1: None,
            q_adjust_l0: None,
            q_adjust_l1: None,
        }
    }

    /// Adjust on every schema feature.
    pub fn with_all_features(dataset: &Dataset, exposure: u8) -> Self {
        let l0 = dataset.schema.l0.iter().map(|f| f.name.clone()).collect();
        let l1 = dataset.schema.l1.iter().map(|f| f.name.clone()).collect();
        Self::new(dataset.scenario, exposure, l0, l1)
    }

    pub fn at_exposure(&self, exposure: u8) -> Self {
        let mut s = self.clone();
        s.exposure = exposure;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.g_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "truncation bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if self.exposure > 1 {
            return Err(Error::InvalidConfig(format!(
                "exposure level {} not binary",
                self.exposure
            )));
        }
        Ok(())
    }

    fn g_l0(&self) -> &[String] {
        self.g_adjust_l0.as_deref().unwrap_or(&self.adjust_l0)
    }
    fn g_l1(&self) -> &[String] {
        self.g_adjust_l1.as_deref().unwrap_or(&self.adjust_l1)
    }
    fn q_l0(&self) -> &[String] {
        self.q_adjust_l0.as_deref().unwrap_or(&self.adjust_l0)
    }
    fn q_l1(&self) -> &[String] {
        self.q_adjust_l1.as_deref().unwrap_or(&self.adjust_l1)
    }
}

/// Which nuisance side to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceRole {
    G,
    Q,
    Both,
}

/// How nuisance regressions are fit: the Super Learner ensemble, or a plain
/// main-terms logistic GLM (the parametric comparator used by IPW).
#[derive(Debug, Clone)]
pub enum NuisanceFitter {
    SuperLearner(SuperLearnerConfig),
    PlainGlm,
}

impl NuisanceFitter {
    fn fit_predict(&self, task: &RegressionTask, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            NuisanceFitter::SuperLearner(cfg) => {
                let ens = superlearner_fit(task, cfg)?;
                Ok(rows.iter().map(|r| ens.predict(r)).collect())
            }
            NuisanceFitter::PlainGlm => {
                let m = fit_logistic_glm(task, 0.0)?;
                Ok(rows.iter().map(|r| m.predict(r)).collect())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Positivity and targeting diagnostics carried with every estimate.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    /// Smallest fitted g-factor probability before truncation.
    pub g_min_untruncated: f64,
    /// Largest fitted g-factor probability before truncation.
    pub g_max_untruncated: f64,
    /// Number of g-factor predictions moved to a truncation bound.
    pub n_truncated: usize,
    /// Largest |empirical mean| over the influence-curve components
    /// (targeted estimators drive this to ~0).
    pub eic_mean: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Diagnostics {
            g_min_untruncated: f64::NAN,
            g_max_untruncated: f64::NAN,
            n_truncated: 0,
            eic_mean: f64::NAN,
        }
    }
}

/// A point estimate with its influence curve, clustered standard error, and
/// Wald interval. G-computation reports the point estimate only.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub estimand: String,
    pub point: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Per-participant influence curve (length N).
    pub ic: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
    pub n: usize,
    pub m_clusters: usize,
}

impl EffectEstimate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci_lo": self.ci.map(|c| c.0),
            "ci_hi": self.ci.map(|c| c.1),
            "diagnostics": self.diagnostics,
            "n": self.n,
            "m_clusters": self.m_clusters,
        })
    }

    fn from_ic(
        estimand: &str,
        est: &IcEstimate,
        dataset: &Dataset,
        diagnostics: Diagnostics,
    ) -> Result<EffectEstimate> {
        let se = clustered_se(&est.ic, dataset.cluster_of(), dataset.n_clusters())?;
        let ci = wald_ci(est.point, se, 0.95)?;
        Ok(EffectEstimate {
            estimand: estimand.to_string(),
            point: est.point,
            se: Some(se),
            ci: Some(ci),
            ic: Some(est.ic.clone()),
            diagnostics,
            n: dataset.n(),
            m_clusters: dataset.n_clusters(),
        })
    }

    fn point_only(estimand: &str, point: f64, dataset: &Dataset, diagnostics: Diagnostics) -> Self {
        EffectEstimate {
            estimand: estimand.to_string(),
            point,
            se: None,
            ci: None,
            ic: None,
            diagnostics,
            n: dataset.n(),
            m_clusters: dataset.n_clusters(),
        }
    }
}

/// Estimates for one exposure arm. For S4 the main estimate is the
/// conditional (numerator / denominator); the components are included.
#[derive(Debug, Clone)]
pub struct ArmEstimate {
    pub estimate: EffectEstimate,
    pub numerator: Option<EffectEstimate>,
    pub denominator: Option<EffectEstimate>,
    /// TMLE fluctuation coefficients, innermost level first.
    pub fluctuations: Vec<f64>,
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    CompleteCase,
    Ipw,
    Gcomp,
    Tmle,
}

impl EstimatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cc" | "complete_case" => Ok(EstimatorKind::CompleteCase),
            "ipw" => Ok(EstimatorKind::Ipw),
            "gcomp" => Ok(EstimatorKind::Gcomp),
            "tmle" => Ok(EstimatorKind::Tmle),
            other => Err(Error::InvalidConfig(format!("unknown estimator '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::CompleteCase => "cc",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Gcomp => "gcomp",
            EstimatorKind::Tmle => "tmle",
        }
    }
}

/// Per-arm estimates plus the risk ratio with log-scale Wald inference.
#[derive(Debug, Clone)]
pub struct RrResult {
    pub estimator: EstimatorKind,
    pub arm1: ArmEstimate,
    pub arm0: ArmEstimate,
    pub rr: EffectEstimate,
}

// ---------------------------------------------------------------------------
// Masks: the nested measurement strata of a scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Masks {
    /// delta_a = 1 and A at the requested level.
    exposed: Vec<bool>,
    /// S4: additionally delta_y0 = 1 (elsewhere equal to `exposed`).
    baseline_measured: Vec<bool>,
    /// S4: additionally y0 = 0 (elsewhere equal to `exposed`).
    at_risk: Vec<bool>,
    /// additionally delta_y1 = 1 (final outcome observed).
    fully_observed: Vec<bool>,
}

fn masks(dataset: &Dataset, exposure: u8) -> Masks {
    let s4 = dataset.scenario.has_baseline_outcome();
    let n = dataset.n();
    let mut exposed = Vec::with_capacity(n);
    let mut baseline_measured = Vec::with_capacity(n);
    let mut at_risk = Vec::with_capacity(n);
    let mut fully_observed = Vec::with_capacity(n);
    for r in &dataset.records {
        let e = r.delta_a == 1 && r.a == Some(exposure);
        let b = e && (!s4 || r.delta_y0 == Some(1));
        let k = b && (!s4 || r.y0 == Some(0));
        let f = k && r.delta_y1 == 1 && r.y1.is_some();
        exposed.push(e);
        baseline_measured.push(b);
        at_risk.push(k);
        fully_observed.push(f);
    }
    Masks {
        exposed,
        baseline_measured,
        at_risk,
        fully_observed,
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

// ---------------------------------------------------------------------------
// Nuisance estimates
// ---------------------------------------------------------------------------

/// Fitted g- and Q-factors for one scenario and exposure level, stored as
/// per-record predictions. `None` g-factors are degenerate (the indicator is
/// constant 1 in the data, so the factor is the constant 1 and the
/// corresponding weight term drops out).
#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    pub exposure: u8,
    /// P(delta_a=1 | L0), truncated; `None` when delta_a is constant 1.
    pub g_delta_a: Option<Vec<f64>>,
    /// P(A=a | delta_a=1, L0), truncated.
    pub g_a: Option<Vec<f64>>,
    /// S4: P(delta_y0=1 | A=a, delta_a=1, L0), truncated.
    pub g_delta_y0: Option<Vec<f64>>,
    /// S3/S4: P(delta_y1=1 | L1, [Y0=0, delta_y0=1,] A=a, delta_a=1, L0),
    /// truncated. Entries are meaningful only inside the fitting chain.
    pub g_delta_y1: Option<Vec<f64>>,
    /// Innermost outcome regression (S3/S4), defined where L1 is available.
    pub q_inner: Option<Vec<f64>>,
    /// Outermost outcome regression, defined for every record.
    pub q_outer: Option<Vec<f64>>,
    /// S4 baseline-outcome regression, defined for every record.
    pub q_baseline: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl NuisanceEstimates {
    /// 1 / (g_delta_a * g_a) — the weight of the outermost level.
    fn inv_cum1(&self, i: usize) -> f64 {
        let mut g = self.g_a.as_ref().map(|v| v[i]).unwrap_or(1.0);
        if let Some(v) = &self.g_delta_a {
            g *= v[i];
        }
        1.0 / g
    }

    /// 1 / (g_delta_a * g_a * g_delta_y0) — S4 middle level (equals
    /// `inv_cum1` elsewhere).
    fn inv_cum_baseline(&self, i: usize) -> f64 {
        let mut w = self.inv_cum1(i);
        if let Some(v) = &self.g_delta_y0 {
            w /= v[i];
        }
        w
    }

    /// Full inverse probability of the complete measured path.
    fn inv_cum_full(&self, i: usize) -> f64 {
        let mut w = self.inv_cum_baseline(i);
        if let Some(v) = &self.g_delta_y1 {
            w /= v[i];
        }
        w
    }
}

struct TruncationTracker {
    lo: f64,
    hi: f64,
    raw_min: f64,
    raw_max: f64,
    n_truncated: usize,
}

impl TruncationTracker {
    fn new(bounds: (f64, f64)) -> Self {
        TruncationTracker {
            lo: bounds.0,
            hi: bounds.1,
            raw_min: f64::INFINITY,
            raw_max: f64::NEG_INFINITY,
            n_truncated: 0,
        }
    }

    /// Truncate the predictions at `targets` in place, tracking the
    /// untruncated extremes and the truncation count.
    fn apply(&mut self, preds: &mut [f64], targets: &[usize]) {
        for &i in targets {
            let p = &mut preds[i];
            self.raw_min = self.raw_min.min(*p);
            self.raw_max = self.raw_max.max(*p);
            if *p < self.lo {
                *p = self.lo;
                self.n_truncated += 1;
            } else if *p > self.hi {
                *p = self.hi;
                self.n_truncated += 1;
            }
        }
    }

    fn into_diagnostics(self) -> Diagnostics {
        Diagnostics {
            g_min_untruncated: if self.raw_min.is_finite() {
                self.raw_min
            } else {
                f64::NAN
            },
            g_max_untruncated: if self.raw_max.is_finite() {
                self.raw_max
            } else {
                f64::NAN
            },
            n_truncated: self.n_truncated,
            eic_mean: f64::NAN,
        }
    }
}

fn subpop_task(
    dataset: &Dataset,
    sel: &FeatureSelection,
    keep: &[usize],
    outcome: impl Fn(usize) -> f64,
    factor: &str,
) -> Result<RegressionTask> {
    if keep.is_empty() {
        return Err(Error::EmptySubpopulation(factor.to_string()));
    }
    let mut rows = Vec::with_capacity(keep.len());
    for &i in keep {
        match sel.design_row(dataset, i) {
            Some(r) => rows.push(r),
            None => return Err(Error::MissingTimeVarying(i)),
        }
    }
    Ok(RegressionTask {
        rows,
        y: keep.iter().map(|&i| outcome(i)).collect(),
        weights: vec![1.0; keep.len()],
        cluster_of: keep.iter().map(|&i| dataset.cluster_of()[i]).collect(),
    })
}

/// Predict for the records in `targets`; entries outside stay at `fill`.
fn predict_for(
    dataset: &Dataset,
    sel: &FeatureSelection,
    fitter: &NuisanceFitter,
    task: &RegressionTask,
    targets: &[usize],
    fill: f64,
) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(targets.len());
    for &i in targets {
        match sel.design_row(dataset, i) {
            Some(r) => rows.push(r),
            None => return Err(Error::MissingTimeVarying(i)),
        }
    }
    let preds = fitter.fit_predict(task, &rows)?;
    let mut out = vec![fill; dataset.n()];
    for (&i, p) in targets.iter().zip(preds) {
        out[i] = p;
    }
    Ok(out)
}

/// Fit the g- and/or Q-factors for one scenario and exposure level.
///
/// Each g-factor is fit on its defining subpopulation and predicted wherever
/// its value can enter an inverse weight; predictions are truncated to the
/// spec's bounds, with the untruncated extremes and the truncation count
/// recorded. Q-factors are fit innermost-first on unweighted tasks, with the
/// S4 numerator's baseline-positive rows contributing pseudo-outcome 0.
pub fn fit_nuisances(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
    role: NuisanceRole,
) -> Result<NuisanceEstimates> {
    spec.validate()?;
    if spec.scenario != dataset.scenario {
        return Err(Error::InvalidConfig(format!(
            "spec scenario {} does not match dataset scenario {}",
            spec.scenario, dataset.scenario
        )));
    }
    let scen = dataset.scenario;
    let n = dataset.n();
    let m = masks(dataset, spec.exposure);
    let all: Vec<usize> = (0..n).collect();

    let g_l0_sel = FeatureSelection::resolve(&dataset.schema, spec.g_l0(), &[])?;
    let g_l01_sel = FeatureSelection::resolve(&dataset.schema, spec.g_l0(), spec.g_l1())?;
    let q_l0_sel = FeatureSelection::resolve(&dataset.schema, spec.q_l0(), &[])?;
    let q_l01_sel = FeatureSelection::resolve(&dataset.schema, spec.q_l0(), spec.q_l1())?;

    let mut trunc = TruncationTracker::new(spec.g_bounds);
    let mut out = NuisanceEstimates {
        exposure: spec.exposure,
        g_delta_a: None,
        g_a: None,
        g_delta_y0: None,
        g_delta_y1: None,
        q_inner: None,
        q_outer: None,
        q_baseline: None,
        diagnostics: Diagnostics::default(),
    };

    if matches!(role, NuisanceRole::G | NuisanceRole::Both) {
        // P(delta_a = 1 | L0): degenerate when measurement is complete
        if dataset.records.iter().any(|r| r.delta_a == 0) {
            let task = subpop_task(
                dataset,
                &g_l0_sel,
                &all,
                |i| dataset.records[i].delta_a as f64,
                "P(delta_a=1 | L0)",
            )?;
            let mut preds = predict_for(dataset, &g_l0_sel, fitter, &task, &all, 1.0)?;
            trunc.apply(&mut preds, &all);
            out.g_delta_a = Some(preds);
        }

        // P(A = a | delta_a = 1, L0)
        {
            let measured: Vec<usize> = dataset
                .records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| (r.delta_a == 1 && r.a.is_some()).then_some(i))
                .collect();
            let task = subpop_task(
                dataset,
                &g_l0_sel,
                &measured,
                |i| dataset.records[i].a.unwrap() as f64,
                "P(A=a | delta_a=1, L0)",
            )?;
            let mut preds = predict_for(dataset, &g_l0_sel, fitter, &task, &all, 0.5)?;
            if spec.exposure == 0 {
                for p in preds.iter_mut() {
                    *p = 1.0 - *p;
                }
            }
            trunc.apply(&mut preds, &all);
            out.g_a = Some(preds);
        }

        // S4: P(delta_y0 = 1 | A=a, delta_a=1, L0)
        if scen.has_baseline_outcome() && dataset.records.iter().any(|r| r.delta_y0 == Some(0)) {
            let exposed_idx = indices(&m.exposed);
            let task = subpop_task(
                dataset,
                &g_l0_sel,
                &exposed_idx,
                |i| dataset.records[i].delta_y0.unwrap_or(0) as f64,
                "P(delta_y0=1 | A=a, delta_a=1, L0)",
            )?;
            let mut preds = predict_for(dataset, &g_l0_sel, fitter, &task, &exposed_idx, 1.0)?;
            trunc.apply(&mut preds, &exposed_idx);
            out.g_delta_y0 = Some(preds);
        }

        // S3/S4: follow-up measurement propensity given (L0, L1)
        if scen.outcome_missable() {
            let frame = if scen.has_baseline_outcome() {
                indices(&m.at_risk)
            } else {
                indices(&m.exposed)
            };
            let any_missing = frame.iter().any(|&i| dataset.records[i].delta_y1 == 0);
            if any_missing {
                let task = subpop_task(
                    dataset,
                    &g_l01_sel,
                    &frame,
                    |i| dataset.records[i].delta_y1 as f64,
                    "P(delta_y1=1 | L1, ..., L0)",
                )?;
                let mut preds = predict_for(dataset, &g_l01_sel, fitter, &task, &frame, 1.0)?;
                trunc.apply(&mut preds, &frame);
                out.g_delta_y1 = Some(preds);
            }
        }
    }

    if matches!(role, NuisanceRole::Q | NuisanceRole::Both) {
        match scen {
            Scenario::S1 | Scenario::S2 => {
                let keep = indices(&m.fully_observed);
                let task = subpop_task(
                    dataset,
                    &q_l0_sel,
                    &keep,
                    |i| dataset.records[i].y1.unwrap() as f64,
                    "E(Y | A=a, delta_a=1, L0)",
                )?;
                out.q_outer = Some(predict_for(dataset, &q_l0_sel, fitter, &task, &all, 0.5)?);
            }
            Scenario::S3 => {
                let inner_keep = indices(&m.fully_observed);
                let inner_task = subpop_task(
                    dataset,
                    &q_l01_sel,
                    &inner_keep,
                    |i| dataset.records[i].y1.unwrap() as f64,
                    "E(Y | delta_y1=1, L1, A=a, delta_a=1, L0)",
                )?;
                // inner predictions feed the middle regression on the
                // exposed set
                let exposed_idx = indices(&m.exposed);
                let q_inner =
                    predict_for(dataset, &q_l01_sel, fitter, &inner_task, &exposed_idx, 0.5)?;

                let outer_task = subpop_task(
                    dataset,
                    &q_l0_sel,
                    &exposed_idx,
                    |i| q_inner[i],
                    "E(Q_inner | A=a, delta_a=1, L0)",
                )?;
                out.q_outer =
                    Some(predict_for(dataset, &q_l0_sel, fitter, &outer_task, &all, 0.5)?);
                out.q_inner = Some(q_inner);
            }
            Scenario::S4 => {
                let inner_keep = indices(&m.fully_observed);
                let inner_task = subpop_task(
                    dataset,
                    &q_l01_sel,
                    &inner_keep,
                    |i| dataset.records[i].y1.unwrap() as f64,
                    "E(Y1 | delta_y1=1, L1, Y0=0, delta_y0=1, A=a, delta_a=1, L0)",
                )?;
                // predictions are needed on the at-risk set; baseline-
                // positive rows contribute pseudo-outcome 0 directly
                let at_risk_idx = indices(&m.at_risk);
                let q_inner =
                    predict_for(dataset, &q_l01_sel, fitter, &inner_task, &at_risk_idx, 0.0)?;

                let baseline_idx = indices(&m.baseline_measured);
                let outer_task = subpop_task(
                    dataset,
                    &q_l0_sel,
                    &baseline_idx,
                    |i| {
                        if dataset.records[i].y0 == Some(0) {
                            q_inner[i]
                        } else {
                            0.0
                        }
                    },
                    "E(I(Y0=0) Q_inner | delta_y0=1, A=a, delta_a=1, L0)",
                )?;
                out.q_outer =
                    Some(predict_for(dataset, &q_l0_sel, fitter, &outer_task, &all, 0.5)?);

                let base_task = subpop_task(
                    dataset,
                    &q_l0_sel,
                    &baseline_idx,
                    |i| dataset.records[i].y0.unwrap() as f64,
                    "E(Y0 | delta_y0=1, A=a, delta_a=1, L0)",
                )?;
                out.q_baseline =
                    Some(predict_for(dataset, &q_l0_sel, fitter, &base_task, &all, 0.5)?);
                out.q_inner = Some(q_inner);
            }
        }
    }

    out.diagnostics = trunc.into_diagnostics();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Complete-case
// ---------------------------------------------------------------------------

/// Unadjusted mean of the final outcome among records with the exposure at
/// the requested level and every relevant variable measured (for S4 also
/// baseline-negative). The influence curve is the stratum-mean IC, so the
/// standard error still respects clustering.
pub fn complete_case(dataset: &Dataset, spec: &ScenarioSpec) -> Result<ArmEstimate> {
    spec.validate()?;
    let m = masks(dataset, spec.exposure);
    let keep = indices(&m.fully_observed);
    if keep.is_empty() {
        return Err(Error::EmptyStratum(format!(
            "no complete cases at exposure {}",
            spec.exposure
        )));
    }
    let n = dataset.n() as f64;
    let n_s = keep.len() as f64;
    let mean = keep
        .iter()
        .map(|&i| dataset.records[i].y1.unwrap() as f64)
        .sum::<f64>()
        / n_s;
    let ic: Vec<f64> = (0..dataset.n())
        .map(|i| {
            if m.fully_observed[i] {
                (dataset.records[i].y1.unwrap() as f64 - mean) * (n / n_s)
            } else {
                0.0
            }
        })
        .collect();
    let est = IcEstimate { point: mean, ic };
    let estimate = EffectEstimate::from_ic(
        &format!("psi_{}", spec.exposure),
        &est,
        dataset,
        Diagnostics::default(),
    )?;
    Ok(ArmEstimate {
        estimate,
        numerator: None,
        denominator: None,
        fluctuations: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// G-computation
// ---------------------------------------------------------------------------

/// Plug-in of the scenario's iterated-expectation formula: the empirical
/// mean over all N records of the outermost Q-factor (for S4,
/// numerator / (1 - mean of the baseline regression)). No interval is
/// reported — G-computation here is an identification device.
pub fn gcomp(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
) -> Result<ArmEstimate> {
    let nuis = fit_nuisances(dataset, spec, fitter, NuisanceRole::Q)?;
    gcomp_from(dataset, spec, &nuis)
}

fn gcomp_from(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    nuis: &NuisanceEstimates,
) -> Result<ArmEstimate> {
    let n = dataset.n() as f64;
    let q_outer = nuis
        .q_outer
        .as_ref()
        .ok_or_else(|| Error::EmptySubpopulation("Q-factors not fit".into()))?;
    let num = q_outer.iter().sum::<f64>() / n;
    let diag = nuis.diagnostics.clone();
    if dataset.scenario.has_baseline_outcome() {
        let qb = nuis.q_baseline.as_ref().expect("S4 baseline Q");
        let ey0 = qb.iter().sum::<f64>() / n;
        let den = 1.0 - ey0;
        if den == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let psi = num / den;
        Ok(ArmEstimate {
            estimate: EffectEstimate::point_only(
                &format!("psi_{}", spec.exposure),
                psi,
                dataset,
                diag.clone(),
            ),
            numerator: Some(EffectEstimate::point_only(
                "numerator",
                num,
                dataset,
                diag.clone(),
            )),
            denominator: Some(EffectEstimate::point_only("denominator", den, dataset, diag)),
            fluctuations: Vec::new(),
        })
    } else {
        Ok(ArmEstimate {
            estimate: EffectEstimate::point_only(
                &format!("psi_{}", spec.exposure),
                num,
                dataset,
                diag,
            ),
            numerator: None,
            denominator: None,
            fluctuations: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// IPW
// ---------------------------------------------------------------------------

/// Horvitz–Thompson style inverse-probability weighting with truncated
/// weights. Inference treats the weights as known: the influence curve is
/// the centered weighted summand (conservative in typical settings), with
/// the S4 ratio composed through the Delta method. With `glm_only` the
/// propensities come from main-terms logistic GLMs (the parametric
/// comparator); otherwise from the default Super Learner.
pub fn ipw(dataset: &Dataset, spec: &ScenarioSpec, glm_only: bool) -> Result<ArmEstimate> {
    let fitter = if glm_only {
        NuisanceFitter::PlainGlm
    } else {
        NuisanceFitter::SuperLearner(SuperLearnerConfig::default())
    };
    let nuis = fit_nuisances(dataset, spec, &fitter, NuisanceRole::G)?;
    ipw_from(dataset, spec, &nuis)
}

fn ipw_from(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    nuis: &NuisanceEstimates,
) -> Result<ArmEstimate> {
    let n = dataset.n();
    let nf = n as f64;
    let m = masks(dataset, spec.exposure);
    if !m.fully_observed.iter().any(|&b| b) {
        return Err(Error::EmptyStratum(format!(
            "no fully measured records at exposure {}",
            spec.exposure
        )));
    }
    let diag = nuis.diagnostics.clone();

    // weighted summand for the final outcome
    let summand: Vec<f64> = (0..n)
        .map(|i| {
            if m.fully_observed[i] {
                nuis.inv_cum_full(i) * dataset.records[i].y1.unwrap() as f64
            } else {
                0.0
            }
        })
        .collect();

    if dataset.scenario.has_baseline_outcome() {
        let num_point = summand.iter().sum::<f64>() / nf;
        let num = IcEstimate {
            point: num_point,
            ic: summand.iter().map(|s| s - num_point).collect(),
        };
        // denominator: 1 - weighted mean of the baseline outcome
        let base_summand: Vec<f64> = (0..n)
            .map(|i| {
                if m.baseline_measured[i] {
                    nuis.inv_cum_baseline(i) * dataset.records[i].y0.unwrap() as f64
                } else {
                    0.0
                }
            })
            .collect();
        let ey0 = base_summand.iter().sum::<f64>() / nf;
        let den = IcEstimate {
            point: 1.0 - ey0,
            ic: base_summand.iter().map(|s| -(s - ey0)).collect(),
        };
        if den.point == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let cond = delta_method_ratio(&num, &den)?;
        let mut d = diag.clone();
        d.eic_mean = (cond.ic.iter().sum::<f64>() / nf).abs();
        Ok(ArmEstimate {
            estimate: EffectEstimate::from_ic(
                &format!("psi_{}", spec.exposure),
                &cond,
                dataset,
                d,
            )?,
            numerator: Some(EffectEstimate::from_ic(
                "numerator",
                &num,
                dataset,
                diag.clone(),
            )?),
            denominator: Some(EffectEstimate::from_ic("denominator", &den, dataset, diag)?),
            fluctuations: Vec::new(),
        })
    } else {
        let point = summand.iter().sum::<f64>() / nf;
        let est = IcEstimate {
            point,
            ic: summand.iter().map(|s| s - point).collect(),
        };
        let mut d = diag;
        d.eic_mean = 0.0;
        Ok(ArmEstimate {
            estimate: EffectEstimate::from_ic(&format!("psi_{}", spec.exposure), &est, dataset, d)?,
            numerator: None,
            denominator: None,
            fluctuations: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// TMLE
// ---------------------------------------------------------------------------

struct TargetedLevel {
    /// Targeted predictions, defined wherever the initial Q was defined.
    q_star: Vec<f64>,
    /// Influence-curve component: indicator/weight times residual.
    ic_component: Vec<f64>,
    epsilon: f64,
}

/// Fluctuate one Q level on the logit scale: intercept-only weighted
/// logistic regression with offset logit(Q), weights = inverse cumulative g,
/// fit on the level's subpopulation.
fn target_level(
    subpop: &[bool],
    outcome: &[f64],
    q_init: &[f64],
    weight: &[f64],
    level_name: &str,
) -> Result<TargetedLevel> {
    let n = subpop.len();
    let keep = indices(subpop);
    if keep.is_empty() {
        return Err(Error::EmptySubpopulation(format!("TMLE level {level_name}")));
    }
    let y: Vec<f64> = keep.iter().map(|&i| outcome[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| weight[i]).collect();
    let off: Vec<f64> = keep.iter().map(|&i| logit(q_init[i])).collect();
    let epsilon = fluctuation_intercept(&y, &w, &off)
        .map_err(|_| Error::FluctuationDiverged(level_name.to_string()))?;

    let q_star: Vec<f64> = (0..n)
        .map(|i| clamp_prob(expit(logit(q_init[i]) + epsilon)))
        .collect();
    let ic_component: Vec<f64> = (0..n)
        .map(|i| {
            if subpop[i] {
                weight[i] * (outcome[i] - q_star[i])
            } else {
                0.0
            }
        })
        .collect();
    Ok(TargetedLevel {
        q_star,
        ic_component,
        epsilon,
    })
}

/// Sequential-regression TMLE. Targets the Q-factor chain innermost-first,
/// carries the targeted predictions outward as pseudo-outcomes, and reports
/// the empirical mean of the outermost targeted regression. For S4 the
/// numerator and denominator are targeted separately and combined by the
/// Delta method.
pub fn tmle(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
) -> Result<ArmEstimate> {
    let nuis = fit_nuisances(dataset, spec, fitter, NuisanceRole::Both)?;
    tmle_from(dataset, spec, &nuis)
}

fn tmle_from(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    nuis: &NuisanceEstimates,
) -> Result<ArmEstimate> {
    let n = dataset.n();
    let nf = n as f64;
    let m = masks(dataset, spec.exposure);
    let q_outer = nuis
        .q_outer
        .as_ref()
        .ok_or_else(|| Error::EmptySubpopulation("Q-factors not fit".into()))?;
    let y1: Vec<f64> = dataset
        .records
        .iter()
        .map(|r| r.y1.map(|v| v as f64).unwrap_or(0.0))
        .collect();

    let w_full: Vec<f64> = (0..n).map(|i| nuis.inv_cum_full(i)).collect();
    let w_base: Vec<f64> = (0..n).map(|i| nuis.inv_cum_baseline(i)).collect();

    let finish = |est: IcEstimate,
                  fluctuations: Vec<f64>,
                  eic_means: Vec<f64>,
                  numerator: Option<EffectEstimate>,
                  denominator: Option<EffectEstimate>|
     -> Result<ArmEstimate> {
        let mut diag = nuis.diagnostics.clone();
        diag.eic_mean = eic_means.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let estimate =
            EffectEstimate::from_ic(&format!("psi_{}", spec.exposure), &est, dataset, diag)?;
        Ok(ArmEstimate {
            estimate,
            numerator,
            denominator,
            fluctuations,
        })
    };

    match dataset.scenario {
        Scenario::S1 | Scenario::S2 => {
            let level = target_level(&m.fully_observed, &y1, q_outer, &w_full, "outcome")?;
            let psi = level.q_star.iter().sum::<f64>() / nf;
            let ic: Vec<f64> = (0..n)
                .map(|i| level.ic_component[i] + level.q_star[i] - psi)
                .collect();
            let eic = vec![level.ic_component.iter().sum::<f64>() / nf];
            finish(
                IcEstimate { point: psi, ic },
                vec![level.epsilon],
                eic,
                None,
                None,
            )
        }
        Scenario::S3 => {
            let q_inner = nuis.q_inner.as_ref().expect("S3 inner Q");
            let inner = target_level(&m.fully_observed, &y1, q_inner, &w_full, "inner")?;
            // middle level: targeted inner predictions as pseudo-outcomes
            let w1: Vec<f64> = (0..n).map(|i| nuis.inv_cum1(i)).collect();
            let outer = target_level(&m.exposed, &inner.q_star, q_outer, &w1, "outer")?;
            let psi = outer.q_star.iter().sum::<f64>() / nf;
            let ic: Vec<f64> = (0..n)
                .map(|i| inner.ic_component[i] + outer.ic_component[i] + outer.q_star[i] - psi)
                .collect();
            let eic = vec![
                inner.ic_component.iter().sum::<f64>() / nf,
                outer.ic_component.iter().sum::<f64>() / nf,
            ];
            finish(
                IcEstimate { point: psi, ic },
                vec![inner.epsilon, outer.epsilon],
                eic,
                None,
                None,
            )
        }
        Scenario::S4 => {
            let q_inner = nuis.q_inner.as_ref().expect("S4 inner Q");
            let q_baseline = nuis.q_baseline.as_ref().expect("S4 baseline Q");

            // numerator: two targeted levels
            let inner = target_level(&m.fully_observed, &y1, q_inner, &w_full, "inner")?;
            let pseudo: Vec<f64> = (0..n)
                .map(|i| {
                    if dataset.records[i].y0 == Some(0) {
                        inner.q_star[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let outer = target_level(&m.baseline_measured, &pseudo, q_outer, &w_base, "outer")?;
            let num_point = outer.q_star.iter().sum::<f64>() / nf;
            let num = IcEstimate {
                point: num_point,
                ic: (0..n)
                    .map(|i| {
                        inner.ic_component[i] + outer.ic_component[i] + outer.q_star[i] - num_point
                    })
                    .collect(),
            };

            // denominator: one targeted level on the baseline outcome
            let y0: Vec<f64> = dataset
                .records
                .iter()
                .map(|r| r.y0.map(|v| v as f64).unwrap_or(0.0))
                .collect();
            let base = target_level(&m.baseline_measured, &y0, q_baseline, &w_base, "baseline")?;
            let ey0 = base.q_star.iter().sum::<f64>() / nf;
            let den = IcEstimate {
                point: 1.0 - ey0,
                ic: (0..n)
                    .map(|i| -(base.ic_component[i] + base.q_star[i] - ey0))
                    .collect(),
            };
            if den.point == 0.0 {
                return Err(Error::ZeroDenominator);
            }

            let eic = vec![
                inner.ic_component.iter().sum::<f64>() / nf,
                outer.ic_component.iter().sum::<f64>() / nf,
                base.ic_component.iter().sum::<f64>() / nf,
            ];
            let cond = delta_method_ratio(&num, &den)?;
            let num_est =
                EffectEstimate::from_ic("numerator", &num, dataset, nuis.diagnostics.clone())?;
            let den_est =
                EffectEstimate::from_ic("denominator", &den, dataset, nuis.diagnostics.clone())?;
            finish(
                cond,
                vec![inner.epsilon, outer.epsilon, base.epsilon],
                eic,
                Some(num_est),
                Some(den_est),
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Risk ratio
// ---------------------------------------------------------------------------

fn run_arm(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
    estimator: EstimatorKind,
) -> Result<ArmEstimate> {
    match estimator {
        EstimatorKind::CompleteCase => complete_case(dataset, spec),
        EstimatorKind::Ipw => {
            let nuis = fit_nuisances(dataset, spec, fitter, NuisanceRole::G)?;
            ipw_from(dataset, spec, &nuis)
        }
        EstimatorKind::Gcomp => gcomp(dataset, spec, fitter),
        EstimatorKind::Tmle => tmle(dataset, spec, fitter),
    }
}

/// Run one estimator at one exposure level.
pub fn estimate_arm(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
    estimator: EstimatorKind,
) -> Result<ArmEstimate> {
    run_arm(dataset, spec, fitter, estimator)
}

/// Run the chosen estimator at both exposure levels on the same data and
/// combine: `RR = psi_1 / psi_0`, influence curve of `log RR` equal to
/// `IC_1/psi_1 - IC_0/psi_0`, a Wald interval on the log scale, and the
/// interval exponentiated. G-computation yields the point estimate only.
pub fn estimate_rr(
    dataset: &Dataset,
    spec: &ScenarioSpec,
    fitter: &NuisanceFitter,
    estimator: EstimatorKind,
) -> Result<RrResult> {
    let spec1 = spec.at_exposure(1);
    let spec0 = spec.at_exposure(0);
    let mut arms = crate::exec::map_indexed(2, |i| {
        let s = if i == 0 { &spec1 } else { &spec0 };
        run_arm(dataset, s, fitter, estimator)
    });
    let arm0 = arms.pop().unwrap()?;
    let arm1 = arms.pop().unwrap()?;

    let psi1 = arm1.estimate.point;
    let psi0 = arm0.estimate.point;
    if psi0 == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let rr_point = psi1 / psi0;

    let rr = match (&arm1.estimate.ic, &arm0.estimate.ic) {
        (Some(ic1), Some(ic0)) => {
            let e1 = IcEstimate {
                point: psi1,
                ic: ic1.clone(),
            };
            let e0 = IcEstimate {
                point: psi0,
                ic: ic0.clone(),
            };
            let log_rr = delta_method_log(&delta_method_ratio(&e1, &e0)?)?;
            let se_log = clustered_se(&log_rr.ic, dataset.cluster_of(), dataset.n_clusters())?;
            let (lo, hi) = wald_ci(log_rr.point, se_log, 0.95)?;
            let mut diag = arm1.estimate.diagnostics.clone();
            diag.n_truncated += arm0.estimate.diagnostics.n_truncated;
            diag.g_min_untruncated = diag
                .g_min_untruncated
                .min(arm0.estimate.diagnostics.g_min_untruncated);
            diag.g_max_untruncated = diag
                .g_max_untruncated
                .max(arm0.estimate.diagnostics.g_max_untruncated);
            EffectEstimate {
                estimand: "rr".to_string(),
                point: rr_point,
                // delta-method SE on the ratio scale
                se: Some(rr_point * se_log),
                ci: Some((lo.exp(), hi.exp())),
                ic: Some(log_rr.ic),
                diagnostics: diag,
                n: dataset.n(),
                m_clusters: dataset.n_clusters(),
            }
        }
        _ => EffectEstimate::point_only("rr", rr_point, dataset, arm1.estimate.diagnostics.clone()),
    };

    Ok(RrResult {
        estimator,
        arm1,
        arm0,
        rr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovValue, Feature, ObservedRecord, Schema};
    use crate::learners::LearnerKind;
    use crate::sim::{
        sample_observed, ClusterSpec, CovariateDist, CovariateSpec, Equation, NpsemSpec, SizeDist,
    };

    fn sl(library: Vec<LearnerKind>) -> NuisanceFitter {
        NuisanceFitter::SuperLearner(SuperLearnerConfig::with_library(library))
    }

    /// Discrete S4 spec with a single binary baseline confounder and a
    /// binary time-varying covariate.
    fn s4_spec(n_clusters: usize) -> NpsemSpec {
        NpsemSpec {
            scenario: Scenario::S4,
            clusters: ClusterSpec {
                count: n_clusters,
                size: SizeDist::Fixed(3),
                communities: 0,
            },
            latent_sd: 1.0,
            l0: vec![CovariateSpec {
                name: "w".into(),
                dist: CovariateDist::Categorical {
                    probs: vec![0.5, 0.5],
                    levels: None,
                },
            }],
            l1: vec![CovariateSpec {
                name: "z".into(),
                dist: CovariateDist::Logistic(Equation::with_terms(
                    -0.3,
                    &[("w", 0.6), ("a", 0.4)],
                )),
            }],
            delta_a: Some(Equation::with_terms(1.2, &[("w", -0.5)])),
            a: Equation::with_terms(-0.1, &[("w", 0.7)]),
            delta_y0: Some(Equation::with_terms(1.3, &[("w", -0.4), ("a", 0.3)])),
            y0: Some(Equation::with_terms(-1.5, &[("w", 0.8), ("a", 0.5)])),
            delta_y1: Some(Equation::with_terms(1.5, &[("z", -0.6), ("w", -0.3)])),
            y1: Equation::with_terms(-1.6, &[("w", 0.7), ("a", 0.6), ("z", 0.5)]),
        }
    }

    fn s1_complete_spec(n_clusters: usize) -> NpsemSpec {
        NpsemSpec {
            scenario: Scenario::S1,
            clusters: ClusterSpec {
                count: n_clusters,
                size: SizeDist::Fixed(2),
                communities: 0,
            },
            latent_sd: 0.0,
            l0: vec![CovariateSpec {
                name: "w".into(),
                dist: CovariateDist::Categorical {
                    probs: vec![0.6, 0.4],
                    levels: None,
                },
            }],
            l1: vec![],
            delta_a: None,
            a: Equation::with_terms(-0.2, &[("w", 0.9)]),
            delta_y0: None,
            y0: None,
            delta_y1: None,
            y1: Equation::with_terms(-0.7, &[("w", 0.8), ("a", 0.9)]),
        }
    }

    fn all_features_spec(d: &Dataset, a: u8) -> ScenarioSpec {
        ScenarioSpec::with_all_features(d, a)
    }

    // -- complete case ------------------------------------------------------

    #[test]
    fn cc_equals_arm_mean_on_complete_data() {
        let data = sample_observed(&s1_complete_spec(300), 5).unwrap();
        let spec = all_features_spec(&data, 1);
        let cc = complete_case(&data, &spec).unwrap();
        let ys: Vec<f64> = data
            .records
            .iter()
            .filter(|r| r.a == Some(1))
            .map(|r| r.y1.unwrap() as f64)
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((cc.estimate.point - mean).abs() < 1e-12);
    }

    #[test]
    fn cc_hand_count_s4() {
        // 3 eligible rows with y1 = (1, 0, 0) -> 1/3
        let schema = Schema::new(vec![Feature::real("x")], vec![Feature::real("z")]);
        let mk = |a: u8, dy0: u8, y0: Option<u8>, dy1: u8, y1: Option<u8>, c: &str| ObservedRecord {
            l0: vec![CovValue::Real(0.0)],
            delta_a: 1,
            a: Some(a),
            delta_y0: Some(dy0),
            y0,
            l1: Some(vec![CovValue::Real(0.0)]),
            delta_y1: dy1,
            y1,
            cluster_id: c.to_string(),
        };
        let records = vec![
            mk(1, 1, Some(0), 1, Some(1), "c1"),
            mk(1, 1, Some(0), 1, Some(0), "c2"),
            mk(1, 1, Some(0), 1, Some(0), "c3"),
            mk(1, 1, Some(1), 0, None, "c4"),    // baseline positive
            mk(1, 0, None, 0, None, "c5"),       // baseline unmeasured
            mk(0, 1, Some(0), 1, Some(1), "c6"), // other arm
        ];
        let data = Dataset::new(schema, Scenario::S4, records).unwrap();
        let cc = complete_case(&data, &all_features_spec(&data, 1)).unwrap();
        assert!((cc.estimate.point - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cc_empty_stratum_is_error() {
        let data = sample_observed(&s1_complete_spec(20), 1).unwrap();
        let kept: Vec<ObservedRecord> = data
            .records
            .iter()
            .filter(|r| r.a == Some(1))
            .cloned()
            .collect();
        let d = Dataset::new(data.schema.clone(), Scenario::S1, kept).unwrap();
        assert!(matches!(
            complete_case(&d, &all_features_spec(&d, 0)),
            Err(Error::EmptyStratum(_))
        ));
    }

    // -- nuisances ------------------------------------------------------------

    #[test]
    fn complete_data_leaves_measurement_factors_degenerate() {
        let data = sample_observed(&s1_complete_spec(200), 9).unwrap();
        let spec = all_features_spec(&data, 1);
        let nuis =
            fit_nuisances(&data, &spec, &sl(vec![LearnerKind::Glm]), NuisanceRole::Both).unwrap();
        assert!(nuis.g_delta_a.is_none());
        assert!(nuis.g_delta_y0.is_none());
        assert!(nuis.g_delta_y1.is_none());
        assert!(nuis.g_a.is_some());
        assert!(nuis.q_outer.is_some());
        assert_eq!(nuis.diagnostics.n_truncated, 0);
    }

    #[test]
    fn saturated_factors_equal_stratum_proportions() {
        let data = sample_observed(&s4_spec(700), 13).unwrap();
        let spec = all_features_spec(&data, 1);
        let nuis =
            fit_nuisances(&data, &spec, &sl(vec![LearnerKind::Glm]), NuisanceRole::G).unwrap();
        // empirical P(delta_a = 1 | w) per stratum
        let g = nuis.g_delta_a.as_ref().unwrap();
        for w in [0usize, 1usize] {
            let in_stratum = |r: &ObservedRecord| r.l0[0] == CovValue::Cat(w);
            let denom = data.records.iter().filter(|r| in_stratum(r)).count() as f64;
            let numer = data
                .records
                .iter()
                .filter(|r| in_stratum(r) && r.delta_a == 1)
                .count() as f64;
            let idx = data
                .records
                .iter()
                .position(|r| in_stratum(r) && r.delta_a == 1 && r.a == Some(1))
                .unwrap();
            assert!(
                (g[idx] - numer / denom).abs() < 1e-7,
                "stratum {w}: fitted {} empirical {}",
                g[idx],
                numer / denom
            );
        }
    }

    #[test]
    fn truncation_applies_and_counts() {
        // make exposure measurement very rare in one stratum
        let mut spec = s4_spec(2000);
        spec.delta_a = Some(Equation::with_terms(3.0, &[("w", -9.0)]));
        let data = sample_observed(&spec, 21).unwrap();
        let sspec = all_features_spec(&data, 1);
        let nuis =
            fit_nuisances(&data, &sspec, &sl(vec![LearnerKind::Glm]), NuisanceRole::G).unwrap();
        assert!(nuis.diagnostics.n_truncated > 0);
        assert!(nuis.diagnostics.g_min_untruncated < 0.01);
        let g = nuis.g_delta_a.as_ref().unwrap();
        let lo = sspec.g_bounds.0;
        assert!(g.iter().all(|&p| p >= lo - 1e-15));
    }

    #[test]
    fn widening_bounds_never_truncates_more() {
        let mut spec = s4_spec(800);
        spec.delta_a = Some(Equation::with_terms(2.0, &[("w", -6.0)]));
        let data = sample_observed(&spec, 3).unwrap();
        let mut narrow = all_features_spec(&data, 1);
        narrow.g_bounds = (0.05, 0.95);
        let mut wide = narrow.clone();
        wide.g_bounds = (0.001, 0.999);
        let fitter = sl(vec![LearnerKind::Glm]);
        let n_narrow = fit_nuisances(&data, &narrow, &fitter, NuisanceRole::G)
            .unwrap()
            .diagnostics
            .n_truncated;
        let n_wide = fit_nuisances(&data, &wide, &fitter, NuisanceRole::G)
            .unwrap()
            .diagnostics
            .n_truncated;
        assert!(n_wide <= n_narrow, "wide={n_wide} narrow={n_narrow}");
    }

    // -- gcomp ------------------------------------------------------------------

    /// Brute-force empirical plug-in of the S4 g-formula: stratum means over
    /// the dataset itself, no model anywhere.
    fn empirical_plugin_s4(data: &Dataset, a: u8) -> (f64, f64) {
        let key = |r: &ObservedRecord| match r.l0[0] {
            CovValue::Cat(c) => c,
            CovValue::Real(x) => x as usize,
        };
        let zkey = |r: &ObservedRecord| match r.l1.as_ref().unwrap()[0] {
            CovValue::Real(x) => x as usize,
            CovValue::Cat(c) => c,
        };
        let exposed = |r: &ObservedRecord| r.delta_a == 1 && r.a == Some(a);
        let mut num_total = 0.0;
        let mut den_total = 0.0;
        for r0 in &data.records {
            let w = key(r0);
            let s1: Vec<&ObservedRecord> = data
                .records
                .iter()
                .filter(|r| exposed(r) && r.delta_y0 == Some(1) && key(r) == w)
                .collect();
            // Q1(w) = mean over S1 of I(y0=0) * Q2(w, z)
            let q1 = s1
                .iter()
                .map(|r| {
                    if r.y0 == Some(0) {
                        let z = zkey(r);
                        let s2: Vec<&&ObservedRecord> = s1
                            .iter()
                            .filter(|q| q.y0 == Some(0) && q.delta_y1 == 1 && zkey(q) == z)
                            .collect();
                        s2.iter().map(|q| q.y1.unwrap() as f64).sum::<f64>() / s2.len() as f64
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / s1.len() as f64;
            let qd = s1.iter().map(|r| r.y0.unwrap() as f64).sum::<f64>() / s1.len() as f64;
            num_total += q1;
            den_total += qd;
        }
        let n = data.n() as f64;
        (num_total / n, 1.0 - den_total / n)
    }

    #[test]
    fn gcomp_saturated_equals_empirical_plugin() {
        let data = sample_observed(&s4_spec(600), 8).unwrap();
        let spec = all_features_spec(&data, 1);
        // w and z are single binaries; glm_interactions saturates (w, z)
        let fitter = sl(vec![LearnerKind::GlmInteractions]);
        let g = gcomp(&data, &spec, &fitter).unwrap();
        let (num, den) = empirical_plugin_s4(&data, 1);
        assert!(
            (g.numerator.as_ref().unwrap().point - num).abs() < 1e-7,
            "num: {} vs {}",
            g.numerator.as_ref().unwrap().point,
            num
        );
        assert!(
            (g.denominator.as_ref().unwrap().point - den).abs() < 1e-7,
            "den: {} vs {}",
            g.denominator.as_ref().unwrap().point,
            den
        );
        assert!((g.estimate.point - num / den).abs() < 1e-7);
    }

    #[test]
    fn gcomp_constant_outcome_estimates_one() {
        let mut spec = s1_complete_spec(150);
        spec.y1 = Equation::constant(999.0);
        let data = sample_observed(&spec, 2).unwrap();
        let g = gcomp(
            &data,
            &all_features_spec(&data, 1),
            &sl(vec![LearnerKind::Glm]),
        )
        .unwrap();
        assert!(g.estimate.point > 0.999);
        assert!(g.estimate.se.is_none());
    }

    // -- ipw ------------------------------------------------------------------

    #[test]
    fn ipw_horvitz_thompson_arithmetic() {
        // balanced design: within each stratum of w, exactly half exposed;
        // the saturated propensity is exactly 0.5, so ipw = 2 mean(I(A=a) Y)
        let schema = Schema::new(vec![Feature::real("w")], vec![]);
        let mut records = Vec::new();
        let pattern = [
            (0.0, 1, 1),
            (0.0, 0, 0),
            (0.0, 1, 0),
            (0.0, 0, 1),
            (1.0, 1, 1),
            (1.0, 0, 1),
            (1.0, 1, 0),
            (1.0, 0, 0),
        ];
        for rep in 0..5 {
            for (i, &(w, a, y)) in pattern.iter().enumerate() {
                records.push(ObservedRecord {
                    l0: vec![CovValue::Real(w)],
                    delta_a: 1,
                    a: Some(a),
                    delta_y0: None,
                    y0: None,
                    l1: None,
                    delta_y1: 1,
                    y1: Some(y),
                    cluster_id: format!("c{rep}_{i}"),
                });
            }
        }
        let data = Dataset::new(schema, Scenario::S1, records).unwrap();
        let spec = all_features_spec(&data, 1);
        let est = ipw(&data, &spec, true).unwrap();
        let ht = 2.0
            * data
                .records
                .iter()
                .filter(|r| r.a == Some(1))
                .map(|r| r.y1.unwrap() as f64)
                .sum::<f64>()
            / data.n() as f64;
        assert!((est.estimate.point - ht).abs() < 1e-10);
    }

    // -- tmle ------------------------------------------------------------------

    #[test]
    fn tmle_matches_gcomp_and_plugin_when_saturated() {
        let data = sample_observed(&s4_spec(600), 8).unwrap();
        let spec = all_features_spec(&data, 1);
        let fitter = sl(vec![LearnerKind::GlmInteractions]);
        let t = tmle(&data, &spec, &fitter).unwrap();
        let g = gcomp(&data, &spec, &fitter).unwrap();
        let (num, den) = empirical_plugin_s4(&data, 1);
        assert!(
            (t.estimate.point - g.estimate.point).abs() < 1e-8,
            "tmle {} gcomp {}",
            t.estimate.point,
            g.estimate.point
        );
        assert!((t.estimate.point - num / den).abs() < 1e-7);
        for eps in &t.fluctuations {
            assert!(eps.abs() < 1e-6, "fluctuation {eps}");
        }
        assert!(t.estimate.diagnostics.eic_mean < 1e-8);
    }

    #[test]
    fn small_instance_equivalence_complete_s1() {
        // complete data + saturated nuisances: gcomp = ipw = tmle =
        // stratified empirical estimator
        let data = sample_observed(&s1_complete_spec(400), 17).unwrap();
        let spec = all_features_spec(&data, 1);
        let fitter = sl(vec![LearnerKind::Glm]);

        let mut strat = 0.0;
        for w in [0usize, 1usize] {
            let stratum: Vec<&ObservedRecord> = data
                .records
                .iter()
                .filter(|r| r.l0[0] == CovValue::Cat(w))
                .collect();
            let p_w = stratum.len() as f64 / data.n() as f64;
            let cell: Vec<&&ObservedRecord> = stratum.iter().filter(|r| r.a == Some(1)).collect();
            let mean = cell.iter().map(|r| r.y1.unwrap() as f64).sum::<f64>() / cell.len() as f64;
            strat += p_w * mean;
        }

        let g = gcomp(&data, &spec, &fitter).unwrap().estimate.point;
        let i = ipw(&data, &spec, true).unwrap().estimate.point;
        let t = tmle(&data, &spec, &fitter).unwrap().estimate.point;
        assert!((g - strat).abs() < 1e-8, "gcomp {g} vs {strat}");
        assert!((i - strat).abs() < 1e-8, "ipw {i} vs {strat}");
        assert!((t - strat).abs() < 1e-8, "tmle {t} vs {strat}");
    }

    #[test]
    fn tmle_solves_eic_on_missing_data() {
        let data = sample_observed(&s4_spec(500), 30).unwrap();
        let spec = all_features_spec(&data, 1);
        let t = tmle(&data, &spec, &sl(vec![LearnerKind::Glm])).unwrap();
        assert!(
            t.estimate.diagnostics.eic_mean < 1e-8,
            "eic mean {}",
            t.estimate.diagnostics.eic_mean
        );
        // conditional = numerator / denominator exactly
        let num = t.numerator.as_ref().unwrap().point;
        let den = t.denominator.as_ref().unwrap().point;
        assert!((t.estimate.point - num / den).abs() < 1e-12);
        assert!(t.estimate.point >= 0.0 && t.estimate.point <= 1.0);
    }

    // -- risk ratio ----------------------------------------------------------

    #[test]
    fn rr_division_and_interval_shape() {
        let data = sample_observed(&s4_spec(500), 44).unwrap();
        let spec = all_features_spec(&data, 1);
        let rr =
            estimate_rr(&data, &spec, &sl(vec![LearnerKind::Glm]), EstimatorKind::Tmle).unwrap();
        let expect = rr.arm1.estimate.point / rr.arm0.estimate.point;
        assert!((rr.rr.point - expect).abs() < 1e-12);
        let (lo, hi) = rr.rr.ci.unwrap();
        assert!(lo > 0.0 && lo < rr.rr.point && rr.rr.point < hi);
    }

    #[test]
    fn rr_point_only_for_gcomp() {
        let data = sample_observed(&s1_complete_spec(200), 3).unwrap();
        let spec = all_features_spec(&data, 1);
        let rr =
            estimate_rr(&data, &spec, &sl(vec![LearnerKind::Glm]), EstimatorKind::Gcomp).unwrap();
        assert!(rr.rr.se.is_none() && rr.rr.ci.is_none());
        assert!(rr.rr.point > 0.0);
    }

    #[test]
    fn scenario_downgrade_consistency() {
        // S4 with everything measured and y0 identically 0 analyzed as S4
        // equals the same records analyzed as S1 on the final outcome
        let mut spec = s4_spec(400);
        spec.delta_a = Some(Equation::constant(999.0));
        spec.delta_y0 = Some(Equation::constant(999.0));
        spec.y0 = Some(Equation::constant(-999.0));
        spec.delta_y1 = Some(Equation::constant(999.0));
        spec.l1 = vec![];
        spec.y1 = Equation::with_terms(-1.6, &[("w", 0.7), ("a", 0.6)]);
        let data = sample_observed(&spec, 51).unwrap();

        // reinterpret the same records as S1
        let s1_schema = Schema::new(data.schema.l0.clone(), vec![]);
        let s1_records: Vec<ObservedRecord> = data
            .records
            .iter()
            .map(|r| ObservedRecord {
                l0: r.l0.clone(),
                delta_a: r.delta_a,
                a: r.a,
                delta_y0: None,
                y0: None,
                l1: None,
                delta_y1: r.delta_y1,
                y1: r.y1,
                cluster_id: r.cluster_id.clone(),
            })
            .collect();
        let s1_data = Dataset::new(s1_schema, Scenario::S1, s1_records).unwrap();

        let fitter = sl(vec![LearnerKind::Glm]);
        for kind in [EstimatorKind::Gcomp, EstimatorKind::Tmle] {
            let s4_arm = run_arm(&data, &all_features_spec(&data, 1), &fitter, kind).unwrap();
            let s1_arm = run_arm(&s1_data, &all_features_spec(&s1_data, 1), &fitter, kind).unwrap();
            assert!(
                (s4_arm.estimate.point - s1_arm.estimate.point).abs() < 1e-8,
                "{kind:?}: s4 {} vs s1 {}",
                s4_arm.estimate.point,
                s1_arm.estimate.point
            );
            if kind == EstimatorKind::Tmle {
                let den = s4_arm.denominator.as_ref().unwrap().point;
                assert!((den - 1.0).abs() < 1e-9, "denominator {den}");
            }
        }
    }

    #[test]
    fn estimators_share_result_shape() {
        let data = sample_observed(&s4_spec(400), 60).unwrap();
        let spec = all_features_spec(&data, 1);
        let fitter = sl(vec![LearnerKind::Glm]);
        for kind in [
            EstimatorKind::CompleteCase,
            EstimatorKind::Ipw,
            EstimatorKind::Gcomp,
            EstimatorKind::Tmle,
        ] {
            let arm = run_arm(&data, &spec, &fitter, kind).unwrap();
            assert_eq!(arm.estimate.n, data.n());
            assert_eq!(arm.estimate.m_clusters, data.n_clusters());
            if let Some(ic) = &arm.estimate.ic {
                assert_eq!(ic.len(), data.n());
            }
            if let Some(ci) = arm.estimate.ci {
                assert!(ci.0 <= arm.estimate.point && arm.estimate.point <= ci.1);
            }
        }
    }
}
