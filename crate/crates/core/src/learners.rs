//! Binary-regression learners and the Super Learner ensemble.
//!
//! Learners consume a [`RegressionTask`] (expanded numeric features, outcome
//! in `[0,1]`, nonnegative observation weights, a row-to-cluster map) and
//! produce a [`FittedModel`] whose predictions are clamped probabilities.
//! Outcomes may be fractional: the sequential-regression estimators feed
//! predicted probabilities back in as pseudo-outcomes, and the weighted
//! quasi-binomial log-likelihood handles both cases identically.
//!
//! The library: `mean` (weighted mean), `glm` (main-terms logistic via
//! IRLS), `glm_interactions` (adds pairwise products), and `hinge_spline`
//! (forward stagewise hinge bases with knots at feature deciles, each stage
//! refit by IRLS — a simplified regression-spline learner).
//!
//! [`superlearner_fit`] runs V-fold cross-validation with all rows of a
//! cluster assigned to the same fold, then picks ensemble weights on the
//! probability simplex: non-negative least squares plus normalization for
//! squared-error loss, projected gradient for the (default) negative
//! log-likelihood loss.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{clamp_prob, expit, Error, Result};

/// Absolute score tolerance for IRLS convergence.
const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
/// Coefficients beyond this magnitude are treated as separation.
const SEPARATION_CAP: f64 = 50.0;
/// Ridge used when refitting after separation or a singular system.
const FALLBACK_RIDGE: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Task
// ---------------------------------------------------------------------------

/// A weighted regression problem on expanded numeric features.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    /// One row per observation; all rows share a width.
    pub rows: Vec<Vec<f64>>,
    /// Outcomes in `[0,1]` (binary or pseudo-outcome probabilities).
    pub y: Vec<f64>,
    /// Nonnegative observation weights, not all zero.
    pub weights: Vec<f64>,
    /// Cluster index per row (for fold assignment).
    pub cluster_of: Vec<usize>,
}

impl RegressionTask {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidTask("no rows".into()));
        }
        if self.y.len() != n || self.weights.len() != n || self.cluster_of.len() != n {
            return Err(Error::InvalidTask(
                "row/outcome/weight/cluster lengths differ".into(),
            ));
        }
        let w = self.width();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != w {
                return Err(Error::InvalidTask(format!(
                    "row {i} has width {}, expected {w}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteFeature(i));
            }
        }
        if self.y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidTask("outcomes must lie in [0,1]".into()));
        }
        if self.weights.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidTask(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if self.weights.iter().all(|&v| v == 0.0) {
            return Err(Error::AllZeroWeights);
        }
        Ok(())
    }

    fn subset(&self, keep: &[usize]) -> RegressionTask {
        RegressionTask {
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            y: keep.iter().map(|&i| self.y[i]).collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            cluster_of: keep.iter().map(|&i| self.cluster_of[i]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Learner identities and fitted models
// ---------------------------------------------------------------------------

/// Library member identifiers (the strings accepted in config files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Mean,
    Glm,
    GlmInteractions,
    HingeSpline,
}

impl LearnerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(LearnerKind::Mean),
            "glm" => Ok(LearnerKind::Glm),
            "glm_interactions" => Ok(LearnerKind::GlmInteractions),
            "hinge_spline" => Ok(LearnerKind::HingeSpline),
            other => Err(Error::InvalidSuperLearner(format!(
                "unknown learner '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Mean => "mean",
            LearnerKind::Glm => "glm",
            LearnerKind::GlmInteractions => "glm_interactions",
            LearnerKind::HingeSpline => "hinge_spline",
        }
    }

    fn fit(self, task: &RegressionTask) -> Result<FittedModel> {
        match self {
            LearnerKind::Mean => fit_mean(task),
            LearnerKind::Glm => fit_logistic_glm(task, 0.0),
            LearnerKind::GlmInteractions => fit_logistic_glm_interactions(task, 0.0),
            LearnerKind::HingeSpline => fit_hinge_spline(task, DEFAULT_MAX_TERMS),
        }
    }
}

/// One hinge basis `max(x_j - t, 0)` or `max(t - x_j, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeBasis {
    pub feature: usize,
    pub knot: f64,
    pub positive: bool,
}

impl HingeBasis {
    #[inline]
    fn eval(&self, row: &[f64]) -> f64 {
        let d = row[self.feature] - self.knot;
        if self.positive {
            d.max(0.0)
        } else {
            (-d).max(0.0)
        }
    }
}

#[derive(Debug, Clone)]
enum ModelParams {
    Mean(f64),
    /// Coefficients over `[intercept, expanded features...]`.
    Glm {
        beta: Vec<f64>,
        se: Vec<f64>,
        interactions: bool,
    },
    /// Coefficients over `[intercept, raw features..., hinge bases...]`.
    Hinge { beta: Vec<f64>, bases: Vec<HingeBasis> },
}

/// A fitted learner; `predict` maps a feature row to a clamped probability.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub kind: LearnerKind,
    params: ModelParams,
}

impl FittedModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let p = match &self.params {
            ModelParams::Mean(m) => *m,
            ModelParams::Glm {
                beta, interactions, ..
            } => {
                let mut lp = beta[0];
                let mut k = 1;
                for &v in row {
                    lp += beta[k] * v;
                    k += 1;
                }
                if *interactions {
                    for i in 0..row.len() {
                        for j in (i + 1)..row.len() {
                            lp += beta[k] * row[i] * row[j];
                            k += 1;
                        }
                    }
                }
                expit(lp)
            }
            ModelParams::Hinge { beta, bases } => {
                let mut lp = beta[0];
                let mut k = 1;
                for &v in row {
                    lp += beta[k] * v;
                    k += 1;
                }
                for b in bases {
                    lp += beta[k] * b.eval(row);
                    k += 1;
                }
                expit(lp)
            }
        };
        clamp_prob(p)
    }

    /// Fitted coefficients `[intercept, features...]` for GLM-family models.
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.params {
            ModelParams::Glm { beta, .. } | ModelParams::Hinge { beta, .. } => Some(beta),
            ModelParams::Mean(_) => None,
        }
    }

    /// Asymptotic standard errors matching [`Self::coefficients`] (GLM only).
    pub fn coefficient_se(&self) -> Option<&[f64]> {
        match &self.params {
            ModelParams::Glm { se, .. } => Some(se),
            _ => None,
        }
    }

    /// Hinge bases of a fitted spline model (empty for other learners).
    pub fn hinge_bases(&self) -> &[HingeBasis] {
        match &self.params {
            ModelParams::Hinge { bases, .. } => bases,
            _ => &[],
        }
    }
}

// ---------------------------------------------------------------------------
// Mean learner
// ---------------------------------------------------------------------------

/// Constant prediction: the weighted mean of the outcomes, clamped.
pub fn fit_mean(task: &RegressionTask) -> Result<FittedModel> {
    task.validate()?;
    let w: f64 = task.weights.iter().sum();
    let wy: f64 = task
        .y
        .iter()
        .zip(&task.weights)
        .map(|(&y, &wi)| y * wi)
        .sum();
    Ok(FittedModel {
        kind: LearnerKind::Mean,
        params: ModelParams::Mean(clamp_prob(wy / w)),
    })
}

// ---------------------------------------------------------------------------
// IRLS logistic regression
// ---------------------------------------------------------------------------

struct IrlsFit {
    beta: Vec<f64>,
    se: Vec<f64>,
    converged: bool,
}

/// Weighted penalized logistic log-likelihood (ridge excludes the intercept).
fn loglik(
    design: &[f64],
    k: usize,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    beta: &[f64],
    ridge: f64,
) -> f64 {
    let n = y.len();
    let mut ll = 0.0;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let mut eta = offset.map(|o| o[i]).unwrap_or(0.0);
        for (j, &b) in beta.iter().enumerate() {
            eta += design[i * k + j] * b;
        }
        let mu = clamp_prob(expit(eta));
        ll += w[i] * (y[i] * mu.ln() + (1.0 - y[i]) * (1.0 - mu).ln());
    }
    ll - 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

/// Newton/IRLS for the weighted logistic model on a flat row-major design
/// (intercept column included). Converges on `max |score| < 1e-8`.
fn irls(
    design: &[f64],
    k: usize,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    ridge: f64,
    start: Option<&[f64]>,
) -> Option<IrlsFit> {
    let n = y.len();
    let mut beta = match start {
        Some(b) => b.to_vec(),
        None => vec![0.0; k],
    };
    let mut ll = loglik(design, k, y, w, offset, &beta, ridge);
    let mut converged = false;
    let mut hess = vec![0.0; k * k];

    // one extra Newton step after the tolerance is met lands the solution at
    // machine precision, making fits independent of row ordering
    let mut polish = false;
    for _ in 0..IRLS_MAX_ITER {
        let mut score = vec![0.0; k];
        hess.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let mut eta = offset.map(|o| o[i]).unwrap_or(0.0);
            for j in 0..k {
                eta += design[i * k + j] * beta[j];
            }
            let mu = clamp_prob(expit(eta));
            let r = w[i] * (y[i] - mu);
            let v = w[i] * mu * (1.0 - mu);
            for j in 0..k {
                let xij = design[i * k + j];
                score[j] += r * xij;
                for l in j..k {
                    hess[j * k + l] += v * xij * design[i * k + l];
                }
            }
        }
        for j in 1..k {
            score[j] -= ridge * beta[j];
            hess[j * k + j] += ridge;
        }
        for j in 0..k {
            for l in 0..j {
                hess[j * k + l] = hess[l * k + j];
            }
        }
        let max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max_score < IRLS_TOL {
            converged = true;
            if polish {
                break;
            }
            polish = true;
        }
        let step = linalg::solve_spd(&hess, k, &score)?;
        // step halving keeps the likelihood monotone; the slack scales with
        // |ll| so summation round-off cannot reject a genuine Newton step
        let slack = 1e-10 * (1.0 + ll.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            if cand.iter().all(|v| v.is_finite()) {
                let cand_ll = loglik(design, k, y, w, offset, &cand, ridge);
                if cand_ll >= ll - slack {
                    beta = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // standard errors from the observed information at the solution
    let mut info = vec![0.0; k * k];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let mut eta = offset.map(|o| o[i]).unwrap_or(0.0);
        for j in 0..k {
            eta += design[i * k + j] * beta[j];
        }
        let mu = clamp_prob(expit(eta));
        let v = w[i] * mu * (1.0 - mu);
        for j in 0..k {
            for l in j..k {
                info[j * k + l] += v * design[i * k + j] * design[i * k + l];
            }
        }
    }
    for j in 1..k {
        info[j * k + j] += ridge;
    }
    for j in 0..k {
        for l in 0..j {
            info[j * k + l] = info[l * k + j];
        }
    }
    let se = match linalg::spd_inverse(&info, k) {
        Some(inv) => (0..k).map(|j| inv[j * k + j].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; k],
    };
    Some(IrlsFit { beta, se, converged })
}

fn build_design(task: &RegressionTask, interactions: bool) -> (Vec<f64>, usize) {
    let p = task.width();
    let k = if interactions {
        1 + p + p * (p.saturating_sub(1)) / 2
    } else {
        1 + p
    };
    let mut design = Vec::with_capacity(task.n() * k);
    for row in &task.rows {
        design.push(1.0);
        design.extend_from_slice(row);
        if interactions {
            for i in 0..p {
                for j in (i + 1)..p {
                    design.push(row[i] * row[j]);
                }
            }
        }
    }
    (design, k)
}

fn fit_glm_design(
    task: &RegressionTask,
    design: &[f64],
    k: usize,
    ridge: f64,
    interactions: bool,
) -> Result<FittedModel> {
    let attempt = |r: f64| irls(design, k, &task.y, &task.weights, None, r, None);
    let separated =
        |f: &IrlsFit| !f.converged || f.beta.iter().any(|b| b.abs() > SEPARATION_CAP);
    let mut fit = attempt(ridge);
    // separation / singularity: refit with a small ridge
    if fit.as_ref().map(separated).unwrap_or(true) {
        fit = attempt(ridge.max(FALLBACK_RIDGE));
    }
    let fit = fit.ok_or_else(|| Error::InvalidTask("logistic fit failed".into()))?;
    Ok(FittedModel {
        kind: if interactions {
            LearnerKind::GlmInteractions
        } else {
            LearnerKind::Glm
        },
        params: ModelParams::Glm {
            beta: fit.beta,
            se: fit.se,
            interactions,
        },
    })
}

/// Weighted logistic regression by IRLS; `ridge > 0` penalizes all
/// non-intercept coefficients. Falls back to `ridge = 1e-4` on separation
/// (any `|coef| > 50`) or a singular system.
pub fn fit_logistic_glm(task: &RegressionTask, ridge: f64) -> Result<FittedModel> {
    task.validate()?;
    let (design, k) = build_design(task, false);
    fit_glm_design(task, &design, k, ridge, false)
}

/// Logistic regression on main terms plus all pairwise interactions.
pub fn fit_logistic_glm_interactions(task: &RegressionTask, ridge: f64) -> Result<FittedModel> {
    task.validate()?;
    let (design, k) = build_design(task, true);
    fit_glm_design(task, &design, k, ridge, true)
}

/// Intercept-only weighted logistic fit with a fixed per-row offset — the
/// TMLE fluctuation step. The coefficient is capped at ±30 (reached only
/// when the weighted outcome is degenerate, where the MLE walks to
/// infinity); inside the cap, convergence is `|score| < 1e-8` relative to
/// the total weight.
pub fn fluctuation_intercept(y: &[f64], weights: &[f64], offset: &[f64]) -> Result<f64> {
    const CAP: f64 = 30.0;
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    // keeps the per-participant mean of the weighted residual below 1e-9
    let tol = 1e-9 * (y.len() as f64).max(1.0);
    let mut eps = 0.0f64;
    for _ in 0..500 {
        let mut score = 0.0;
        let mut info = 0.0;
        for i in 0..y.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let mu = clamp_prob(expit(offset[i] + eps));
            score += weights[i] * (y[i] - mu);
            info += weights[i] * mu * (1.0 - mu);
        }
        if score.abs() < tol {
            return Ok(eps);
        }
        if info <= 0.0 {
            break;
        }
        let step = (score / info).clamp(-2.0, 2.0);
        eps = (eps + step).clamp(-CAP, CAP);
        if eps.abs() >= CAP {
            return Ok(eps);
        }
    }
    Err(Error::FluctuationDiverged(format!("eps={eps}")))
}

// ---------------------------------------------------------------------------
// Hinge-spline learner
// ---------------------------------------------------------------------------

const DEFAULT_MAX_TERMS: usize = 10;
const HINGE_MIN_ROWS: usize = 20;

/// Forward stagewise hinge-basis selection (knots at feature deciles), each
/// accepted stage refit by IRLS on the augmented basis; no pruning pass.
/// With `max_terms = 0` this is exactly the main-terms GLM.
pub fn fit_hinge_spline(task: &RegressionTask, max_terms: usize) -> Result<FittedModel> {
    task.validate()?;
    if task.n() < HINGE_MIN_ROWS {
        return Err(Error::TooFewRows {
            learner: "hinge_spline".into(),
            needed: HINGE_MIN_ROWS,
            got: task.n(),
        });
    }
    let p = task.width();
    let n = task.n();

    // constant outcome: nothing to select, predict the clamped constant
    let first_active = task
        .y
        .iter()
        .zip(&task.weights)
        .find(|(_, &w)| w > 0.0)
        .map(|(&y, _)| y);
    if let Some(c) = first_active {
        let constant = task
            .y
            .iter()
            .zip(&task.weights)
            .all(|(&y, &w)| w == 0.0 || y == c);
        if constant {
            let mut beta = vec![0.0; 1 + p];
            beta[0] = crate::logit(c);
            return Ok(FittedModel {
                kind: LearnerKind::HingeSpline,
                params: ModelParams::Hinge {
                    beta,
                    bases: Vec::new(),
                },
            });
        }
    }

    // candidate bases at the deciles of each feature
    let mut candidates: Vec<HingeBasis> = Vec::new();
    for f in 0..p {
        let mut vals: Vec<f64> = task.rows.iter().map(|r| r[f]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lo, hi) = (vals[0], vals[n - 1]);
        if lo == hi {
            continue;
        }
        let mut knots: Vec<f64> = (1..10)
            .map(|d| vals[(d * n / 10).min(n - 1)])
            .filter(|&t| t > lo && t < hi)
            .collect();
        knots.dedup();
        for t in knots {
            candidates.push(HingeBasis {
                feature: f,
                knot: t,
                positive: true,
            });
            candidates.push(HingeBasis {
                feature: f,
                knot: t,
                positive: false,
            });
        }
    }

    // start from the raw-feature GLM
    let base = fit_logistic_glm(task, 0.0)?;
    let mut beta: Vec<f64> = base.coefficients().unwrap().to_vec();
    let mut bases: Vec<HingeBasis> = Vec::new();
    let mut used = vec![false; candidates.len()];

    // candidate columns computed once
    let cand_cols: Vec<Vec<f64>> = candidates
        .iter()
        .map(|b| task.rows.iter().map(|r| b.eval(r)).collect())
        .collect();

    let weighted_ll = |lp: &dyn Fn(usize) -> f64| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            if task.weights[i] == 0.0 {
                continue;
            }
            let mu = clamp_prob(expit(lp(i)));
            ll += task.weights[i] * (task.y[i] * mu.ln() + (1.0 - task.y[i]) * (1.0 - mu).ln());
        }
        ll
    };

    for _ in 0..max_terms {
        let offset: Vec<f64> = (0..n)
            .map(|i| {
                let row = &task.rows[i];
                let mut lp = beta[0];
                for (j, &v) in row.iter().enumerate() {
                    lp += beta[1 + j] * v;
                }
                for (b, basis) in bases.iter().enumerate() {
                    lp += beta[1 + p + b] * basis.eval(row);
                }
                lp
            })
            .collect();
        let current_ll = weighted_ll(&|i| offset[i]);

        // score each unused candidate with a one-dimensional offset fit
        let mut best: Option<(usize, f64)> = None;
        for (c, col) in cand_cols.iter().enumerate() {
            if used[c] {
                continue;
            }
            let mut gamma = 0.0f64;
            for _ in 0..6 {
                let mut score = 0.0;
                let mut info = 0.0;
                for i in 0..n {
                    if task.weights[i] == 0.0 {
                        continue;
                    }
                    let mu = clamp_prob(expit(offset[i] + gamma * col[i]));
                    score += task.weights[i] * (task.y[i] - mu) * col[i];
                    info += task.weights[i] * mu * (1.0 - mu) * col[i] * col[i];
                }
                if info <= 1e-300 || !score.is_finite() {
                    break;
                }
                let step = (score / info).clamp(-5.0, 5.0);
                gamma += step;
                if step.abs() < 1e-6 {
                    break;
                }
            }
            if !gamma.is_finite() {
                continue;
            }
            let trial_ll = weighted_ll(&|i| offset[i] + gamma * col[i]);
            let gain = trial_ll - current_ll;
            if gain > best.map(|(_, g)| g).unwrap_or(0.0) {
                best = Some((c, gain));
            }
        }

        let Some((chosen, gain)) = best else { break };
        if gain <= 1e-10 {
            break;
        }
        used[chosen] = true;
        bases.push(candidates[chosen].clone());

        // full refit on the augmented basis, warm-started
        let k = 1 + p + bases.len();
        let mut design = Vec::with_capacity(n * k);
        for row in &task.rows {
            design.push(1.0);
            design.extend_from_slice(row);
            for b in &bases {
                design.push(b.eval(row));
            }
        }
        let mut start = beta.clone();
        start.push(0.0);
        let fit = irls(&design, k, &task.y, &task.weights, None, 0.0, Some(&start)).or_else(|| {
            irls(
                &design,
                k,
                &task.y,
                &task.weights,
                None,
                FALLBACK_RIDGE,
                Some(&start),
            )
        });
        match fit {
            Some(f) if f.beta.iter().all(|b| b.abs() <= SEPARATION_CAP) => beta = f.beta,
            _ => {
                // keep the previous model if the refit is degenerate
                bases.pop();
                break;
            }
        }
    }

    Ok(FittedModel {
        kind: LearnerKind::HingeSpline,
        params: ModelParams::Hinge { beta, bases },
    })
}

// ---------------------------------------------------------------------------
// Cluster-respecting folds
// ---------------------------------------------------------------------------

/// Assign a fold label to every row: distinct clusters are shuffled by the
/// seed and dealt round-robin to `v` folds, so all rows of a cluster share a
/// fold and fold cluster-counts differ by at most one.
pub fn assign_folds(cluster_of: &[usize], v: usize, seed: u64) -> Result<Vec<usize>> {
    if v < 1 {
        return Err(Error::InvalidSuperLearner("fold count must be positive".into()));
    }
    let mut clusters: Vec<usize> = cluster_of.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if v > clusters.len() {
        return Err(Error::TooManyFolds {
            v,
            clusters: clusters.len(),
        });
    }
    // Fisher–Yates with keyed draws
    let m = clusters.len();
    for i in (1..m).rev() {
        let r = crate::streams::mix(seed, &[0xF01D, i as u64]) as usize % (i + 1);
        clusters.swap(i, r);
    }
    let mut fold_of_cluster = std::collections::HashMap::with_capacity(m);
    for (pos, &c) in clusters.iter().enumerate() {
        fold_of_cluster.insert(c, pos % v);
    }
    Ok(cluster_of.iter().map(|c| fold_of_cluster[c]).collect())
}

// ---------------------------------------------------------------------------
// Super Learner
// ---------------------------------------------------------------------------

/// Ensemble loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    NegLogLik,
    SquaredError,
}

/// Super Learner configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperLearnerConfig {
    /// Fold count; lowered to the number of distinct clusters when fewer
    /// (minimum 2).
    pub folds: usize,
    pub loss: Loss,
    pub library: Vec<LearnerKind>,
    pub seed: u64,
}

impl Default for SuperLearnerConfig {
    fn default() -> Self {
        SuperLearnerConfig {
            folds: 10,
            loss: Loss::NegLogLik,
            library: vec![LearnerKind::Mean, LearnerKind::Glm],
            seed: 0,
        }
    }
}

impl SuperLearnerConfig {
    pub fn with_library(library: Vec<LearnerKind>) -> Self {
        SuperLearnerConfig {
            library,
            ..Default::default()
        }
    }
}

/// The fitted ensemble: full-data refits of the surviving learners, simplex
/// weights, and cross-validated risks.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub learners: Vec<LearnerKind>,
    pub models: Vec<FittedModel>,
    /// Simplex weights: nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// CV risk per surviving learner, in `learners` order.
    pub cv_risk: Vec<f64>,
    /// CV risk of the weighted ensemble.
    pub ensemble_cv_risk: f64,
    /// Learners dropped during CV or the full-data refit, with the reason.
    pub dropped: Vec<(LearnerKind, String)>,
}

impl EnsembleModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut p = 0.0;
        for (alpha, model) in self.weights.iter().zip(&self.models) {
            if *alpha > 0.0 {
                p += alpha * model.predict(row);
            }
        }
        clamp_prob(p)
    }
}

fn risk(loss: Loss, y: &[f64], w: &[f64], pred: &[f64]) -> f64 {
    let total_w: f64 = w.iter().sum();
    let mut r = 0.0;
    for i in 0..y.len() {
        if w[i] == 0.0 {
            continue;
        }
        let p = clamp_prob(pred[i]);
        r += match loss {
            Loss::NegLogLik => -w[i] * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln()),
            Loss::SquaredError => w[i] * (p - y[i]) * (p - y[i]),
        };
    }
    r / total_w
}

/// Fit the Super Learner: per fold, train every library member off-fold and
/// predict on-fold; solve for simplex weights minimizing the chosen loss of
/// the CV prediction matrix; refit the survivors on the full data. Learners
/// failing anywhere are dropped with a warning and the weights re-solved.
pub fn superlearner_fit(
    task: &RegressionTask,
    config: &SuperLearnerConfig,
) -> Result<EnsembleModel> {
    task.validate()?;
    if config.library.is_empty() {
        return Err(Error::InvalidSuperLearner("library is empty".into()));
    }
    let n = task.n();
    let mut distinct: Vec<usize> = task.cluster_of.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidSuperLearner(
            "cross-validation needs at least 2 clusters".into(),
        ));
    }
    let v = config.folds.clamp(2, distinct.len());
    let fold_of = assign_folds(&task.cluster_of, v, config.seed)?;

    let mut dropped: Vec<(LearnerKind, String)> = Vec::new();
    let mut survivors: Vec<LearnerKind> = Vec::new();
    let mut cv_preds: Vec<Vec<f64>> = Vec::new();

    for &kind in &config.library {
        let fold_results: Vec<std::result::Result<Vec<(usize, f64)>, String>> =
            crate::exec::map_indexed(v, |fold| {
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
                if train.is_empty() || test.is_empty() {
                    return Err("empty fold".to_string());
                }
                let sub = task.subset(&train);
                match kind.fit(&sub) {
                    Ok(model) => Ok(test
                        .into_iter()
                        .map(|i| (i, model.predict(&task.rows[i])))
                        .collect()),
                    Err(e) => Err(e.to_string()),
                }
            });
        let mut pred = vec![f64::NAN; n];
        let mut failure: Option<String> = None;
        for fr in fold_results {
            match fr {
                Ok(pairs) => {
                    for (i, p) in pairs {
                        pred[i] = p;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        match failure {
            Some(e) => {
                eprintln!("warning: learner {} dropped during CV: {e}", kind.name());
                dropped.push((kind, e));
            }
            None => {
                survivors.push(kind);
                cv_preds.push(pred);
            }
        }
    }
    if survivors.is_empty() {
        return Err(Error::AllLearnersFailed(
            dropped
                .iter()
                .map(|(k, e)| format!("{}: {e}", k.name()))
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    let mut weights = solve_weights(config.loss, &cv_preds, &task.y, &task.weights);

    // full-data refits; failures are dropped and the weights re-solved
    loop {
        let mut keep: Vec<usize> = Vec::new();
        let mut models: Vec<FittedModel> = Vec::new();
        let mut refit_failed = false;
        for (idx, &kind) in survivors.iter().enumerate() {
            match kind.fit(task) {
                Ok(m) => {
                    keep.push(idx);
                    models.push(m);
                }
                Err(e) => {
                    eprintln!(
                        "warning: learner {} failed on full data and was dropped: {e}",
                        kind.name()
                    );
                    dropped.push((kind, e.to_string()));
                    refit_failed = true;
                }
            }
        }
        if !refit_failed {
            let cv_risk: Vec<f64> = cv_preds
                .iter()
                .map(|p| risk(config.loss, &task.y, &task.weights, p))
                .collect();
            let ens_pred: Vec<f64> = (0..n)
                .map(|i| {
                    clamp_prob(
                        cv_preds
                            .iter()
                            .zip(&weights)
                            .map(|(p, a)| a * p[i])
                            .sum::<f64>(),
                    )
                })
                .collect();
            let ensemble_cv_risk = risk(config.loss, &task.y, &task.weights, &ens_pred);
            return Ok(EnsembleModel {
                learners: survivors,
                models,
                weights,
                cv_risk,
                ensemble_cv_risk,
                dropped,
            });
        }
        if keep.is_empty() {
            return Err(Error::AllLearnersFailed("all full-data refits failed".into()));
        }
        survivors = keep.iter().map(|&i| survivors[i]).collect();
        cv_preds = keep.iter().map(|&i| cv_preds[i].clone()).collect();
        weights = solve_weights(config.loss, &cv_preds, &task.y, &task.weights);
    }
}

fn solve_weights(loss: Loss, preds: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    if preds.len() == 1 {
        return vec![1.0];
    }
    match loss {
        Loss::SquaredError => nnls_normalized(preds, y, w),
        Loss::NegLogLik => projected_gradient_nll(preds, y, w),
    }
}

/// Non-negative least squares on the CV predictions, then normalization to
/// the simplex. Lawson–Hanson active set on the (tiny) normal equations.
fn nnls_normalized(preds: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let k = preds.len();
    let n = y.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        for a in 0..k {
            rhs[a] += w[i] * preds[a][i] * y[i];
            for b in a..k {
                gram[a * k + b] += w[i] * preds[a][i] * preds[b][i];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[a * k + b] = gram[b * k + a];
        }
    }

    let mut x = vec![0.0f64; k];
    let mut passive = vec![false; k];
    for _ in 0..(3 * k + 10) {
        let mut dual = rhs.clone();
        for a in 0..k {
            for b in 0..k {
                dual[a] -= gram[a * k + b] * x[b];
            }
        }
        let cand = (0..k)
            .filter(|&a| !passive[a])
            .max_by(|&a, &b| dual[a].partial_cmp(&dual[b]).unwrap());
        match cand {
            Some(a) if dual[a] > 1e-12 => passive[a] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..k).filter(|&a| passive[a]).collect();
            let m = idx.len();
            let mut g = vec![0.0; m * m];
            let mut c = vec![0.0; m];
            for (ai, &a) in idx.iter().enumerate() {
                c[ai] = rhs[a];
                for (bi, &b) in idx.iter().enumerate() {
                    g[ai * m + bi] = gram[a * k + b];
                }
            }
            let sol = match linalg::solve_spd(&g, m, &c) {
                Some(s) => s,
                None => break,
            };
            if sol.iter().all(|&v| v > 0.0) {
                for (ai, &a) in idx.iter().enumerate() {
                    x[a] = sol[ai];
                }
                break;
            }
            // interpolate back to the boundary and release a variable
            let mut alpha = 1.0f64;
            let mut drop_var = None;
            for (ai, &a) in idx.iter().enumerate() {
                if sol[ai] <= 0.0 {
                    let t = x[a] / (x[a] - sol[ai]);
                    if t < alpha {
                        alpha = t;
                        drop_var = Some(a);
                    }
                }
            }
            for (ai, &a) in idx.iter().enumerate() {
                x[a] += alpha * (sol[ai] - x[a]);
            }
            match drop_var {
                Some(a) => {
                    x[a] = 0.0;
                    passive[a] = false;
                }
                None => break,
            }
        }
    }

    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        vec![1.0 / k as f64; k]
    } else {
        x.iter().map(|v| v / total).collect()
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = (x.iter().sum::<f64>() - 1.0) / k as f64;
    for i in 0..k {
        cum += sorted[i];
        let t = (cum - 1.0) / (i + 1) as f64;
        if i + 1 == k || sorted[i + 1] <= t {
            theta = t;
            break;
        }
    }
    x.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Simplex-constrained NLL minimization: a short projected-gradient descent
/// localizes the solution, then an active-set Newton solves the face's KKT
/// system to machine precision (duality gap well below 1e-10).
fn projected_gradient_nll(preds: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let k = preds.len();
    let n = y.len();
    let total_w: f64 = w.iter().sum();
    let f = |alpha: &[f64]| -> f64 {
        let mut val = 0.0;
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let m = clamp_prob((0..k).map(|a| alpha[a] * preds[a][i]).sum::<f64>());
            val -= w[i] * (y[i] * m.ln() + (1.0 - y[i]) * (1.0 - m).ln());
        }
        val / total_w
    };
    let grad = |alpha: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; k];
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let m = clamp_prob((0..k).map(|a| alpha[a] * preds[a][i]).sum::<f64>());
            let d = -w[i] * (y[i] / m - (1.0 - y[i]) / (1.0 - m));
            for a in 0..k {
                g[a] += d * preds[a][i];
            }
        }
        g.iter().map(|v| v / total_w).collect()
    };

    let mut alpha = vec![1.0 / k as f64; k];
    let mut f_cur = f(&alpha);
    for _ in 0..100_000 {
        let g = grad(&alpha);
        // duality gap over the simplex: <g, alpha> - min_j g_j
        let gap = alpha.iter().zip(&g).map(|(a, gi)| a * gi).sum::<f64>()
            - g.iter().cloned().fold(f64::INFINITY, f64::min);
        if gap <= 1e-10 {
            break;
        }
        // the acceptance slack tolerates summation round-off; once progress
        // falls below it, the active-set Newton finishes the job
        let slack = 1e-13 * (1.0 + f_cur.abs());
        let mut t = 1.0;
        let mut moved = false;
        let mut stalled = false;
        for _ in 0..40 {
            let cand: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - t * gi).collect();
            let proj = project_simplex(&cand);
            let dist2: f64 = proj
                .iter()
                .zip(&alpha)
                .map(|(p, a)| (p - a) * (p - a))
                .sum();
            if dist2 < 1e-26 {
                stalled = true;
                break;
            }
            let f_new = f(&proj);
            if f_new <= f_cur - 1e-4 * dist2 / t.max(1e-12) + slack {
                if f_cur - f_new < slack {
                    stalled = true;
                }
                alpha = proj;
                f_cur = f_new;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if stalled || !moved {
            break;
        }
    }
    active_set_newton_nll(preds, y, w, total_w, alpha)
}

/// Active-set Newton for the simplex-constrained NLL: Newton steps on the
/// face of currently-positive weights (sum fixed to one), walking at most to
/// the face boundary and dropping the blocking coordinate, with a KKT pass
/// that re-admits any excluded learner whose multiplier is violated.
fn active_set_newton_nll(
    preds: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    total_w: f64,
    alpha0: Vec<f64>,
) -> Vec<f64> {
    let k = alpha0.len();
    let n = y.len();
    let grad_full = |alpha: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; k];
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let m = clamp_prob((0..k).map(|a| alpha[a] * preds[a][i]).sum::<f64>());
            let d = -w[i] * (y[i] / m - (1.0 - y[i]) / (1.0 - m));
            for a in 0..k {
                g[a] += d * preds[a][i];
            }
        }
        g.iter().map(|v| v / total_w).collect()
    };

    let mut active: Vec<usize> = (0..k).filter(|&a| alpha0[a] > 1e-9).collect();
    if active.is_empty() {
        active = (0..k).collect();
    }
    let mut alpha = alpha0;

    'outer: for _ in 0..(4 * k + 8) {
        let m = active.len();
        let norm: f64 = active.iter().map(|&a| alpha[a]).sum();
        let mut face: Vec<f64> = if norm > 0.0 {
            active.iter().map(|&a| alpha[a] / norm).collect()
        } else {
            vec![1.0 / m as f64; m]
        };

        if m > 1 {
            for _ in 0..60 {
                let mut g_full = vec![0.0; m];
                let mut h_full = vec![0.0; m * m];
                for i in 0..n {
                    if w[i] == 0.0 {
                        continue;
                    }
                    let mval = clamp_prob(
                        (0..m).map(|a| face[a] * preds[active[a]][i]).sum::<f64>(),
                    );
                    let d1 = -w[i] * (y[i] / mval - (1.0 - y[i]) / (1.0 - mval));
                    let d2 = w[i]
                        * (y[i] / (mval * mval)
                            + (1.0 - y[i]) / ((1.0 - mval) * (1.0 - mval)));
                    for a in 0..m {
                        let za = preds[active[a]][i];
                        g_full[a] += d1 * za;
                        for b in a..m {
                            h_full[a * m + b] += d2 * za * preds[active[b]][i];
                        }
                    }
                }
                for a in 0..m {
                    for b in 0..a {
                        h_full[a * m + b] = h_full[b * m + a];
                    }
                }
                // reduce by the sum-to-one constraint (last coord dependent)
                let r = m - 1;
                let mut g = vec![0.0; r];
                let mut h = vec![0.0; r * r];
                for a in 0..r {
                    g[a] = (g_full[a] - g_full[r]) / total_w;
                    for b in 0..r {
                        h[a * r + b] = (h_full[a * m + b]
                            - h_full[a * m + r]
                            - h_full[r * m + b]
                            + h_full[r * m + r])
                            / total_w;
                    }
                }
                let gnorm = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if gnorm < 1e-14 {
                    break;
                }
                let Some(step) = linalg::solve_spd(&h, r, &g) else {
                    break;
                };
                // walk at most to the boundary of the face
                let mut t_max = 1.0f64;
                let mut blocker: Option<usize> = None;
                let mut sum_step = 0.0;
                for a in 0..r {
                    sum_step += step[a];
                    if step[a] > 0.0 {
                        let t_hit = face[a] / step[a];
                        if t_hit < t_max {
                            t_max = t_hit;
                            blocker = Some(a);
                        }
                    }
                }
                // the dependent coordinate moves by +sum(step)
                if sum_step < 0.0 {
                    let t_hit = face[r] / (-sum_step);
                    if t_hit < t_max {
                        t_max = t_hit;
                        blocker = Some(r);
                    }
                }
                for a in 0..r {
                    face[a] -= t_max * step[a];
                }
                face[r] = 1.0 - face[..r].iter().sum::<f64>();
                if let Some(b) = blocker {
                    face[b] = 0.0;
                    for (slot, &idx) in active.iter().enumerate() {
                        alpha[idx] = face[slot].max(0.0);
                    }
                    let dropped = active[b];
                    active.retain(|&idx| idx != dropped);
                    alpha[dropped] = 0.0;
                    if active.is_empty() {
                        active.push(dropped);
                        alpha[dropped] = 1.0;
                    }
                    continue 'outer;
                }
            }
        } else {
            face = vec![1.0];
        }
        for idx in 0..k {
            alpha[idx] = 0.0;
        }
        for (slot, &idx) in active.iter().enumerate() {
            alpha[idx] = face[slot].max(0.0);
        }

        // KKT pass: an excluded learner with gradient below the face
        // multiplier re-enters
        let g = grad_full(&alpha);
        let lambda: f64 = alpha.iter().zip(&g).map(|(a, gi)| a * gi).sum();
        let mut worst: Option<(usize, f64)> = None;
        for idx in 0..k {
            if !active.contains(&idx) {
                let viol = lambda - g[idx];
                if viol > 1e-12 && viol > worst.map(|(_, v)| v).unwrap_or(0.0) {
                    worst = Some((idx, viol));
                }
            }
        }
        match worst {
            Some((idx, _)) => active.push(idx),
            None => break,
        }
    }

    let total: f64 = alpha.iter().sum();
    if total > 0.0 {
        for a in alpha.iter_mut() {
            *a /= total;
        }
    } else {
        alpha = vec![1.0 / k as f64; k];
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(rows: Vec<Vec<f64>>, y: Vec<f64>, w: Option<Vec<f64>>) -> RegressionTask {
        let n = rows.len();
        RegressionTask {
            rows,
            y,
            weights: w.unwrap_or_else(|| vec![1.0; n]),
            cluster_of: (0..n).collect(),
        }
    }

    #[test]
    fn mean_learner_basics() {
        let t = task(vec![vec![0.0]; 4], vec![1.0, 1.0, 0.0, 0.0], None);
        let m = fit_mean(&t).unwrap();
        assert_eq!(m.predict(&[123.0]), 0.5);

        let t2 = task(vec![vec![0.0]; 2], vec![1.0, 0.0], Some(vec![3.0, 1.0]));
        assert!((fit_mean(&t2).unwrap().predict(&[0.0]) - 0.75).abs() < 1e-15);

        let t3 = task(vec![vec![0.0]; 3], vec![1.0; 3], None);
        assert_eq!(
            fit_mean(&t3).unwrap().predict(&[0.0]),
            1.0 - crate::PROB_CLAMP
        );
    }

    #[test]
    fn mean_rejects_zero_weights() {
        let t = task(vec![vec![0.0]; 2], vec![1.0, 0.0], Some(vec![0.0, 0.0]));
        assert!(matches!(fit_mean(&t), Err(Error::AllZeroWeights)));
    }

    #[test]
    fn glm_saturated_matches_stratum_means() {
        // stratum x=0: 3/10 ones; stratum x=1: 7/10 ones
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            rows.push(vec![0.0]);
            y.push(if i < 3 { 1.0 } else { 0.0 });
            rows.push(vec![1.0]);
            y.push(if i < 7 { 1.0 } else { 0.0 });
        }
        let t = task(rows, y, None);
        let m = fit_logistic_glm(&t, 0.0).unwrap();
        assert!((m.predict(&[0.0]) - 0.3).abs() < 1e-8);
        assert!((m.predict(&[1.0]) - 0.7).abs() < 1e-8);
    }

    #[test]
    fn glm_intercept_only_equals_mean() {
        let t = task(vec![vec![]; 5], vec![1.0, 0.0, 1.0, 1.0, 0.0], None);
        let glm = fit_logistic_glm(&t, 0.0).unwrap();
        let mean = fit_mean(&t).unwrap();
        assert!((glm.predict(&[]) - mean.predict(&[])).abs() < 1e-9);
    }

    #[test]
    fn glm_recovers_coefficients_within_3_se() {
        // simulate from a known logistic model at n = 10^4
        let n = 10_000;
        let beta_true = [-0.5, 0.8, -0.3];
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let x1 = crate::streams::unit_uniform(5, &[i as u64, 1]) * 2.0 - 1.0;
            let x2 = if crate::streams::unit_uniform(5, &[i as u64, 2]) < 0.5 {
                0.0
            } else {
                1.0
            };
            let p = expit(beta_true[0] + beta_true[1] * x1 + beta_true[2] * x2);
            let u = crate::streams::unit_uniform(5, &[i as u64, 3]);
            rows.push(vec![x1, x2]);
            y.push(if u < p { 1.0 } else { 0.0 });
        }
        let t = task(rows, y, None);
        let m = fit_logistic_glm(&t, 0.0).unwrap();
        let beta = m.coefficients().unwrap();
        let se = m.coefficient_se().unwrap();
        for j in 0..3 {
            assert!(
                (beta[j] - beta_true[j]).abs() < 3.0 * se[j],
                "coef {j}: est={} true={} se={}",
                beta[j],
                beta_true[j],
                se[j]
            );
        }
    }

    #[test]
    fn glm_handles_fractional_outcomes() {
        // logistic self-consistency: fitting on its own predicted
        // probabilities recovers the generating coefficients
        let n = 500;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x = (i as f64) / n as f64 * 4.0 - 2.0;
            rows.push(vec![x]);
            y.push(expit(-0.3 + 0.9 * x));
        }
        let t = task(rows, y, None);
        let m = fit_logistic_glm(&t, 0.0).unwrap();
        let beta = m.coefficients().unwrap();
        assert!((beta[0] + 0.3).abs() < 1e-6, "b0={}", beta[0]);
        assert!((beta[1] - 0.9).abs() < 1e-6, "b1={}", beta[1]);
    }

    #[test]
    fn glm_separation_falls_back_to_ridge() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let x = if i < 10 { -1.0 } else { 1.0 };
            rows.push(vec![x]);
            y.push(if x > 0.0 { 1.0 } else { 0.0 });
        }
        let t = task(rows, y, None);
        let m = fit_logistic_glm(&t, 0.0).unwrap();
        let beta = m.coefficients().unwrap();
        assert!(beta.iter().all(|b| b.is_finite()));
        assert!(m.predict(&[1.0]) > 0.9 && m.predict(&[-1.0]) < 0.1);
    }

    #[test]
    fn glm_rejects_nonfinite_features() {
        let t = task(vec![vec![f64::NAN]], vec![1.0], None);
        assert!(matches!(
            fit_logistic_glm(&t, 0.0),
            Err(Error::NonFiniteFeature(0))
        ));
    }

    #[test]
    fn fluctuation_solves_score_to_tolerance() {
        let n = 200;
        let y: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let offset: Vec<f64> = (0..n).map(|i| -0.5 + 0.01 * (i % 7) as f64).collect();
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64 * 0.3).collect();
        let eps = fluctuation_intercept(&y, &w, &offset).unwrap();
        let score: f64 = (0..n)
            .map(|i| w[i] * (y[i] - expit(offset[i] + eps)))
            .sum();
        assert!(score.abs() < 1e-4, "score={score}");
    }

    #[test]
    fn fluctuation_degenerate_outcomes_walk_down() {
        // all-zero outcomes: the MLE is at -infinity; the fit stops once the
        // mean weighted residual is negligible
        let y = vec![0.0; 50];
        let offset = vec![-2.0; 50];
        let w = vec![1.0; 50];
        let eps = fluctuation_intercept(&y, &w, &offset).unwrap();
        assert!(eps <= -15.0, "eps={eps}");
        let mean_mu: f64 = offset.iter().map(|o| expit(o + eps)).sum::<f64>() / 50.0;
        assert!(mean_mu < 1e-8, "mean_mu={mean_mu}");
    }

    #[test]
    fn hinge_zero_budget_equals_glm() {
        let n = 60;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64) / 10.0]).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let t = task(rows, y, None);
        let h = fit_hinge_spline(&t, 0).unwrap();
        let g = fit_logistic_glm(&t, 0.0).unwrap();
        for x in [0.0, 1.5, 4.2] {
            assert!((h.predict(&[x]) - g.predict(&[x])).abs() < 1e-10);
        }
    }

    #[test]
    fn hinge_requires_enough_rows() {
        let t = task(vec![vec![0.0]; 5], vec![1.0, 0.0, 1.0, 0.0, 1.0], None);
        assert!(matches!(
            fit_hinge_spline(&t, 10),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn hinge_constant_outcome_adds_no_terms() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let t = task(rows, vec![1.0; 40], None);
        let h = fit_hinge_spline(&t, 10).unwrap();
        assert!(h.hinge_bases().is_empty());
        assert!(h.predict(&[5.0]) > 0.99);
    }

    #[test]
    fn hinge_beats_linear_glm_on_hinge_truth() {
        // truth: logit p = -1 + 2 * max(x - 1, 0); a linear logistic misfits
        let n = 2000;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x = crate::streams::unit_uniform(11, &[i as u64, 0]) * 4.0 - 2.0;
            let p = expit(-1.0 + 2.0 * (x - 1.0).max(0.0));
            let u = crate::streams::unit_uniform(11, &[i as u64, 1]);
            rows.push(vec![x]);
            y.push(if u < p { 1.0 } else { 0.0 });
        }
        let t = RegressionTask {
            rows,
            y,
            weights: vec![1.0; n],
            cluster_of: (0..n).collect(),
        };
        let cfg = SuperLearnerConfig {
            folds: 5,
            loss: Loss::NegLogLik,
            library: vec![LearnerKind::Glm, LearnerKind::HingeSpline],
            seed: 3,
        };
        let ens = superlearner_fit(&t, &cfg).unwrap();
        let glm_idx = ens
            .learners
            .iter()
            .position(|k| *k == LearnerKind::Glm)
            .unwrap();
        let hinge_idx = ens
            .learners
            .iter()
            .position(|k| *k == LearnerKind::HingeSpline)
            .unwrap();
        assert!(
            ens.cv_risk[hinge_idx] < ens.cv_risk[glm_idx],
            "hinge risk {} vs glm risk {}",
            ens.cv_risk[hinge_idx],
            ens.cv_risk[glm_idx]
        );
    }

    #[test]
    fn folds_keep_clusters_together() {
        // clusters (A,A,B,C) and V=2: rows of A share a fold
        let folds = assign_folds(&[0, 0, 1, 2], 2, 9).unwrap();
        assert_eq!(folds[0], folds[1]);
    }

    #[test]
    fn folds_singletons_leave_one_out() {
        let cluster_of: Vec<usize> = (0..7).collect();
        let folds = assign_folds(&cluster_of, 7, 1).unwrap();
        let mut sorted = folds.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn folds_round_robin_counts() {
        // 10 clusters into 3 folds: cluster counts (4,3,3)
        let cluster_of: Vec<usize> = (0..10).collect();
        let folds = assign_folds(&cluster_of, 3, 42).unwrap();
        let mut counts = [0; 3];
        for f in folds {
            counts[f] += 1;
        }
        counts.sort_unstable();
        assert_eq!(counts, [3, 3, 4]);
    }

    #[test]
    fn folds_reject_v_above_cluster_count() {
        assert!(matches!(
            assign_folds(&[0, 0, 1], 3, 0),
            Err(Error::TooManyFolds { v: 3, clusters: 2 })
        ));
    }

    #[test]
    fn fold_integrity_randomized() {
        // no cluster spans two folds across 1000 seeded assignments
        let cluster_of: Vec<usize> = (0..200).map(|i| i % 37).collect();
        for seed in 0..1000u64 {
            let folds = assign_folds(&cluster_of, 5, seed).unwrap();
            let mut seen: std::collections::HashMap<usize, usize> = Default::default();
            for (i, &c) in cluster_of.iter().enumerate() {
                let f = folds[i];
                match seen.get(&c) {
                    Some(&prev) => assert_eq!(prev, f, "cluster {c} spans folds (seed {seed})"),
                    None => {
                        seen.insert(c, f);
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_library_gets_unit_weight() {
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / 40.0]).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let t = RegressionTask {
            rows,
            y,
            weights: vec![1.0; n],
            cluster_of: (0..n).collect(),
        };
        let cfg = SuperLearnerConfig {
            folds: 4,
            loss: Loss::NegLogLik,
            library: vec![LearnerKind::Mean],
            seed: 0,
        };
        let ens = superlearner_fit(&t, &cfg).unwrap();
        assert_eq!(ens.weights, vec![1.0]);
        let mean = fit_mean(&t).unwrap();
        assert_eq!(ens.predict(&[0.5]), mean.predict(&[0.5]));
    }

    #[test]
    fn correctly_specified_glm_dominates_mean() {
        let n = 5000;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x = crate::streams::unit_uniform(17, &[i as u64, 0]) * 4.0 - 2.0;
            let p = expit(-0.2 + 1.5 * x);
            let u = crate::streams::unit_uniform(17, &[i as u64, 1]);
            rows.push(vec![x]);
            y.push(if u < p { 1.0 } else { 0.0 });
        }
        let t = RegressionTask {
            rows,
            y,
            weights: vec![1.0; n],
            cluster_of: (0..n).collect(),
        };
        let cfg = SuperLearnerConfig {
            folds: 10,
            loss: Loss::NegLogLik,
            library: vec![LearnerKind::Mean, LearnerKind::Glm],
            seed: 1,
        };
        let ens = superlearner_fit(&t, &cfg).unwrap();
        let glm_idx = ens
            .learners
            .iter()
            .position(|k| *k == LearnerKind::Glm)
            .unwrap();
        assert!(ens.weights[glm_idx] > 0.9, "weights={:?}", ens.weights);
    }

    #[test]
    fn weights_lie_on_simplex_and_ensemble_not_worse() {
        for loss in [Loss::NegLogLik, Loss::SquaredError] {
            let n = 600;
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let x = crate::streams::unit_uniform(23, &[i as u64, 7]) * 2.0 - 1.0;
                let p = expit(0.4 * x - 0.1);
                let u = crate::streams::unit_uniform(23, &[i as u64, 8]);
                rows.push(vec![x]);
                y.push(if u < p { 1.0 } else { 0.0 });
            }
            let t = RegressionTask {
                rows,
                y,
                weights: vec![1.0; n],
                cluster_of: (0..n).map(|i| i / 3).collect(),
            };
            let cfg = SuperLearnerConfig {
                folds: 5,
                loss,
                library: vec![
                    LearnerKind::Mean,
                    LearnerKind::Glm,
                    LearnerKind::HingeSpline,
                ],
                seed: 4,
            };
            let ens = superlearner_fit(&t, &cfg).unwrap();
            assert!(ens.weights.iter().all(|&a| a >= 0.0));
            assert!((ens.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let min_vertex = ens.cv_risk.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                ens.ensemble_cv_risk <= min_vertex + 1e-8,
                "ensemble {} vs best vertex {min_vertex} ({loss:?})",
                ens.ensemble_cv_risk
            );
        }
    }

    #[test]
    fn permutation_invariance() {
        let n = 300;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut cluster_of = Vec::new();
        for i in 0..n {
            let x = crate::streams::unit_uniform(31, &[i as u64, 0]) * 2.0 - 1.0;
            let p = expit(0.7 * x);
            let u = crate::streams::unit_uniform(31, &[i as u64, 1]);
            rows.push(vec![x]);
            y.push(if u < p { 1.0 } else { 0.0 });
            cluster_of.push(i / 5);
        }
        let t1 = RegressionTask {
            rows: rows.clone(),
            y: y.clone(),
            weights: vec![1.0; n],
            cluster_of: cluster_of.clone(),
        };
        // deterministic shuffle of rows (with their cluster labels)
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let r = crate::streams::mix(99, &[i as u64]) as usize % (i + 1);
            order.swap(i, r);
        }
        let t2 = RegressionTask {
            rows: order.iter().map(|&i| rows[i].clone()).collect(),
            y: order.iter().map(|&i| y[i]).collect(),
            weights: vec![1.0; n],
            cluster_of: order.iter().map(|&i| cluster_of[i]).collect(),
        };
        let cfg = SuperLearnerConfig {
            folds: 5,
            loss: Loss::NegLogLik,
            library: vec![LearnerKind::Mean, LearnerKind::Glm],
            seed: 12,
        };
        let e1 = superlearner_fit(&t1, &cfg).unwrap();
        let e2 = superlearner_fit(&t2, &cfg).unwrap();
        for x in [-0.9, 0.0, 0.4, 0.9] {
            assert!(
                (e1.predict(&[x]) - e2.predict(&[x])).abs() < 1e-10,
                "x={x}: {} vs {}",
                e1.predict(&[x]),
                e2.predict(&[x])
            );
        }
    }

    #[test]
    fn simplex_projection_properties() {
        for xs in [
            vec![0.5, 0.5],
            vec![2.0, -1.0, 0.3],
            vec![-5.0, -7.0],
            vec![0.1, 0.2, 0.3, 0.05],
        ] {
            let p = project_simplex(&xs);
            assert!(
                (p.iter().sum::<f64>() - 1.0).abs() < 1e-12,
                "{xs:?} -> {p:?}"
            );
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        let p = project_simplex(&[0.25, 0.75]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }
}
