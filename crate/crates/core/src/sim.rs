//! Parametric structural-equation simulators with counterfactual ground truth.
//!
//! A [`NpsemSpec`] fixes one of the four study scenarios and gives every node
//! a structural equation: covariates are categorical (fixed level
//! probabilities), logistic-binary (may depend on earlier nodes), or
//! gaussian; measurement indicators, the exposure, and the outcomes are
//! logistic-binary. Cluster dependence enters through a per-cluster gaussian
//! latent shared by all members, with a per-node loading (zero loadings give
//! iid data), and optionally through a community indicator added to the
//! baseline covariates.
//!
//! Three evaluation modes share one node-evaluation core:
//!
//! - [`sample_observed`] draws finite datasets from the observed-data law.
//! - [`sample_counterfactual`] draws the post-intervention world — exposure
//!   measurement ensured, exposure set, outcome measurement ensured (at
//!   follow-up dynamically for S4: measured iff the baseline outcome is
//!   counterfactually negative). The same keyed noise streams feed both
//!   worlds, so factual and counterfactual draws are coupled.
//! - [`true_psi`] / [`gformula_exact`] evaluate, for discrete specs, the
//!   causal parameter and the observed-data iterated-expectation estimand by
//!   exact summation. Their agreement (or the size of their gap, for specs
//!   with a hidden common cause) is the executable identification check.
//!
//! The cluster latent is integrated by 9-point Gauss–Hermite quadrature in
//! the exact routines. Logistic probabilities are clamped to
//! `[1e-12, 1 - 1e-12]` everywhere so downstream likelihoods stay finite.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CovValue, Dataset, Feature, FeatureKind, ObservedRecord, Scenario, Schema};
use crate::streams;
use crate::{clamp_prob, expit, Error, Result};

// ---------------------------------------------------------------------------
// Spec types (serde-mapped to the JSON spec files)
// ---------------------------------------------------------------------------

/// One linear-predictor term: `coef * value(on)` for binary/real parents, or
/// `coef * I(on == level)` for categorical parents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub on: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    pub coef: f64,
}

/// Logistic structural equation: `expit(intercept + terms + latent * U_m)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Equation {
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
    /// Loading on the cluster latent; 0 for iid behavior.
    #[serde(default)]
    pub latent: f64,
}

impl Equation {
    pub fn constant(intercept: f64) -> Self {
        Equation {
            intercept,
            terms: Vec::new(),
            latent: 0.0,
        }
    }

    pub fn with_terms(intercept: f64, terms: &[(&str, f64)]) -> Self {
        Equation {
            intercept,
            terms: terms
                .iter()
                .map(|(on, coef)| Term {
                    on: on.to_string(),
                    level: None,
                    coef: *coef,
                })
                .collect(),
            latent: 0.0,
        }
    }
}

/// Distribution of a covariate node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDist {
    /// Finitely many levels with fixed probabilities (exogenous).
    Categorical {
        probs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
    /// Binary with a logistic equation on earlier nodes.
    Logistic(Equation),
    /// Exogenous gaussian; disables exact evaluation.
    Gaussian { mean: f64, sd: f64 },
}

/// A named covariate node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub dist: CovariateDist,
}

/// Cluster-size distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDist {
    Fixed(usize),
    Choices { sizes: Vec<usize>, probs: Vec<f64> },
}

impl SizeDist {
    fn mean(&self) -> f64 {
        match self {
            SizeDist::Fixed(k) => *k as f64,
            SizeDist::Choices { sizes, probs } => {
                sizes.iter().zip(probs).map(|(&s, &p)| s as f64 * p).sum()
            }
        }
    }
}

/// Cluster structure: number of clusters, member-count distribution, and the
/// number of communities (0 = no community indicator). When communities are
/// used, clusters are dealt round-robin, so the community marginal is exactly
/// uniform; `count` must be a multiple of `communities`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub count: usize,
    pub size: SizeDist,
    #[serde(default)]
    pub communities: usize,
}

/// Full structural specification for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NpsemSpec {
    pub scenario: Scenario,
    pub clusters: ClusterSpec,
    /// Standard deviation of the per-cluster latent (default 1).
    #[serde(default = "default_latent_sd")]
    pub latent_sd: f64,
    #[serde(default)]
    pub l0: Vec<CovariateSpec>,
    #[serde(default)]
    pub l1: Vec<CovariateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_a: Option<Equation>,
    pub a: Equation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_y0: Option<Equation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Equation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_y1: Option<Equation>,
    pub y1: Equation,
}

fn default_latent_sd() -> f64 {
    1.0
}

impl NpsemSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: NpsemSpec = serde_json::from_str(&text)?;
        Ok(spec)
    }

    /// Exact enumeration possible: every covariate categorical or
    /// logistic-binary.
    pub fn discrete_exact(&self) -> bool {
        self.l0
            .iter()
            .chain(self.l1.iter())
            .all(|c| !matches!(c.dist, CovariateDist::Gaussian { .. }))
    }
}

/// Intervention for the scenario's estimand: ensure exposure measurement,
/// set the exposure, ensure baseline-outcome measurement (S4), and ensure
/// follow-up measurement — statically for S3, dynamically for S4 ("measure
/// at follow-up iff baseline-negative").
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub exposure: u8,
}

/// One counterfactual draw.
#[derive(Debug, Clone, Copy)]
pub struct CounterfactualDraw {
    /// Counterfactual baseline outcome (S4 only).
    pub y0: Option<u8>,
    /// Counterfactual final outcome. For S4 this is only meaningful when
    /// `at_risk` is true; the numerator uses the joint indicator
    /// `Z* = I(y1 = 1, y0 = 0)`.
    pub y1: u8,
    /// S4: baseline-negative under intervention (`y0 = 0`).
    pub at_risk: Option<bool>,
}

/// How a truth value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    Exact,
    MonteCarlo,
}

/// Which quantity a [`TruthReport`] carries: the counterfactual parameter or
/// the observed-data g-formula value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Counterfactual,
    GFormula,
}

/// True parameter value at one exposure level. For S4, `psi` is the
/// conditional `numerator / denominator`; for S1–S3 the numerator and
/// denominator are absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthReport {
    pub scenario: Scenario,
    pub kind: TruthKind,
    pub method: TruthMethod,
    pub exposure: u8,
    pub psi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numerator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denominator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_draws: Option<usize>,
}

// ---------------------------------------------------------------------------
// Compilation: resolve names, check orderings, lay out value slots
// ---------------------------------------------------------------------------

const TAG_LATENT: u64 = 0x9001;
const TAG_SIZE: u64 = 0x9002;
const TAG_L0: u64 = 0x1000;
const TAG_L1: u64 = 0x2000;
const TAG_DELTA_A: u64 = 0x01;
const TAG_A: u64 = 0x02;
const TAG_DELTA_Y0: u64 = 0x03;
const TAG_Y0: u64 = 0x04;
const TAG_DELTA_Y1: u64 = 0x05;
const TAG_Y1: u64 = 0x06;

const MC_SEED_SALT: u64 = 0xC0DE;

#[derive(Debug, Clone)]
struct CompiledTerm {
    slot: usize,
    level: Option<usize>,
    coef: f64,
}

#[derive(Debug, Clone)]
struct CompiledEquation {
    intercept: f64,
    terms: Vec<CompiledTerm>,
    latent: f64,
}

impl CompiledEquation {
    fn prob(&self, values: &[f64], u: f64) -> f64 {
        let mut lp = self.intercept + self.latent * u;
        for t in &self.terms {
            let v = values[t.slot];
            lp += match t.level {
                Some(l) => {
                    if v == l as f64 {
                        t.coef
                    } else {
                        0.0
                    }
                }
                None => t.coef * v,
            };
        }
        clamp_prob(expit(lp))
    }
}

#[derive(Debug, Clone)]
enum SlotKind {
    /// Community indicator, uniform over `0..c` (constant 0 when c == 0).
    Community(usize),
    Categorical { probs: Vec<f64> },
    Logistic(CompiledEquation),
    Gaussian { mean: f64, sd: f64 },
    /// Structural node that is identically 1 in this scenario (complete
    /// measurement).
    ConstantOne,
}

#[derive(Debug, Clone)]
struct Slot {
    kind: SlotKind,
    tag: u64,
}

/// Canonical slot order: community, l0 features, delta_a, a, delta_y0, y0,
/// l1 features, delta_y1, y1. Nodes absent from the scenario hold inert
/// constants and may not be referenced by any equation.
#[derive(Debug, Clone)]
struct Compiled {
    scenario: Scenario,
    slots: Vec<Slot>,
    idx_community: usize,
    idx_l0: Vec<usize>,
    idx_delta_a: usize,
    idx_a: usize,
    idx_delta_y0: usize,
    idx_y0: usize,
    idx_l1: Vec<usize>,
    idx_delta_y1: usize,
    idx_y1: usize,
    schema: Schema,
    any_latent: bool,
}

fn check_probs(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty()
        || probs
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite())
    {
        return Err(Error::InvalidSpec(format!(
            "{what}: probabilities must be in [0,1]"
        )));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!(
            "{what}: probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

fn check_equation(eq: &Equation, what: &str) -> Result<()> {
    if !eq.intercept.is_finite() || !eq.latent.is_finite() {
        return Err(Error::InvalidSpec(format!("{what}: non-finite coefficient")));
    }
    for t in &eq.terms {
        if !t.coef.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "{what}: non-finite coefficient on '{}'",
                t.on
            )));
        }
    }
    Ok(())
}

impl Compiled {
    fn build(spec: &NpsemSpec) -> Result<Compiled> {
        let scen = spec.scenario;
        let c = spec.clusters.communities;
        if spec.clusters.count == 0 {
            return Err(Error::InvalidSpec("cluster count must be positive".into()));
        }
        if c > 0 && spec.clusters.count % c != 0 {
            return Err(Error::InvalidSpec(format!(
                "cluster count {} must be a multiple of the {} communities",
                spec.clusters.count, c
            )));
        }
        if let SizeDist::Choices { sizes, probs } = &spec.clusters.size {
            if sizes.len() != probs.len() || sizes.iter().any(|&s| s == 0) {
                return Err(Error::InvalidSpec("cluster size distribution malformed".into()));
            }
            check_probs(probs, "cluster sizes")?;
        }
        if let SizeDist::Fixed(0) = spec.clusters.size {
            return Err(Error::InvalidSpec("cluster size must be positive".into()));
        }
        if !(spec.latent_sd.is_finite() && spec.latent_sd >= 0.0) {
            return Err(Error::InvalidSpec(
                "latent_sd must be finite and nonnegative".into(),
            ));
        }

        // Scenario-required node set ("one equation per node").
        let need = |node: &Option<Equation>, name: &str, required: bool| -> Result<()> {
            match (node.is_some(), required) {
                (false, true) => Err(Error::InvalidSpec(format!(
                    "scenario {scen} requires an equation for '{name}'"
                ))),
                (true, false) => Err(Error::InvalidSpec(format!(
                    "scenario {scen} does not have a node '{name}'"
                ))),
                _ => Ok(()),
            }
        };
        need(&spec.delta_a, "delta_a", scen.exposure_missable())?;
        need(&spec.delta_y0, "delta_y0", scen.has_baseline_outcome())?;
        need(&spec.y0, "y0", scen.has_baseline_outcome())?;
        need(&spec.delta_y1, "delta_y1", scen.outcome_missable())?;
        if !scen.has_time_varying() && !spec.l1.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "scenario {scen} does not have time-varying covariates"
            )));
        }

        // Name table in structural order; each equation may only reference
        // strictly earlier entries.
        let mut names: Vec<String> = Vec::new();
        let mut slot_of: HashMap<String, usize> = HashMap::new();
        let register = |name: &str,
                            names: &mut Vec<String>,
                            slot_of: &mut HashMap<String, usize>|
         -> Result<usize> {
            if slot_of.contains_key(name) {
                return Err(Error::InvalidSpec(format!("duplicate node name '{name}'")));
            }
            let idx = names.len();
            names.push(name.to_string());
            slot_of.insert(name.to_string(), idx);
            Ok(idx)
        };

        let idx_community = register("community", &mut names, &mut slot_of)?;
        let mut idx_l0 = Vec::new();
        for cov in &spec.l0 {
            idx_l0.push(register(&cov.name, &mut names, &mut slot_of)?);
        }
        let idx_delta_a = register("delta_a", &mut names, &mut slot_of)?;
        let idx_a = register("a", &mut names, &mut slot_of)?;
        let idx_delta_y0 = register("delta_y0", &mut names, &mut slot_of)?;
        let idx_y0 = register("y0", &mut names, &mut slot_of)?;
        let mut idx_l1 = Vec::new();
        for cov in &spec.l1 {
            idx_l1.push(register(&cov.name, &mut names, &mut slot_of)?);
        }
        let idx_delta_y1 = register("delta_y1", &mut names, &mut slot_of)?;
        let idx_y1 = register("y1", &mut names, &mut slot_of)?;

        let mut referencable = vec![true; names.len()];
        if c == 0 {
            referencable[idx_community] = false;
        }
        if !scen.exposure_missable() {
            referencable[idx_delta_a] = false;
        }
        if !scen.has_baseline_outcome() {
            referencable[idx_delta_y0] = false;
            referencable[idx_y0] = false;
        }
        if !scen.outcome_missable() {
            referencable[idx_delta_y1] = false;
        }

        let compile_eq = |eq: &Equation, own_slot: usize, what: &str| -> Result<CompiledEquation> {
            check_equation(eq, what)?;
            let mut terms = Vec::with_capacity(eq.terms.len());
            for t in &eq.terms {
                let slot = *slot_of
                    .get(&t.on)
                    .ok_or_else(|| Error::InvalidSpec(format!("{what}: unknown parent '{}'", t.on)))?;
                if slot >= own_slot {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: parent '{}' does not precede the node",
                        t.on
                    )));
                }
                if !referencable[slot] {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: parent '{}' is not a node of scenario {scen}",
                        t.on
                    )));
                }
                terms.push(CompiledTerm {
                    slot,
                    level: t.level,
                    coef: t.coef,
                });
            }
            Ok(CompiledEquation {
                intercept: eq.intercept,
                terms,
                latent: eq.latent,
            })
        };

        let mut slots: Vec<Slot> = Vec::with_capacity(names.len());
        slots.push(Slot {
            kind: SlotKind::Community(c),
            tag: 0x999, // deterministic round-robin, never drawn
        });
        for (i, cov) in spec.l0.iter().enumerate() {
            let kind = match &cov.dist {
                CovariateDist::Categorical { probs, .. } => {
                    check_probs(probs, &format!("l0.{}", cov.name))?;
                    SlotKind::Categorical { probs: probs.clone() }
                }
                CovariateDist::Logistic(eq) => {
                    SlotKind::Logistic(compile_eq(eq, idx_l0[i], &format!("l0.{}", cov.name))?)
                }
                CovariateDist::Gaussian { mean, sd } => {
                    if !mean.is_finite() || !sd.is_finite() || *sd < 0.0 {
                        return Err(Error::InvalidSpec(format!("l0.{}: bad gaussian", cov.name)));
                    }
                    SlotKind::Gaussian { mean: *mean, sd: *sd }
                }
            };
            slots.push(Slot {
                kind,
                tag: TAG_L0 + i as u64,
            });
        }
        let structural = |eq: &Option<Equation>, own: usize, tag: u64, what: &str| -> Result<Slot> {
            Ok(match eq {
                Some(e) => Slot {
                    kind: SlotKind::Logistic(compile_eq(e, own, what)?),
                    tag,
                },
                None => Slot {
                    kind: SlotKind::ConstantOne,
                    tag,
                },
            })
        };
        slots.push(structural(&spec.delta_a, idx_delta_a, TAG_DELTA_A, "delta_a")?);
        slots.push(Slot {
            kind: SlotKind::Logistic(compile_eq(&spec.a, idx_a, "a")?),
            tag: TAG_A,
        });
        slots.push(structural(&spec.delta_y0, idx_delta_y0, TAG_DELTA_Y0, "delta_y0")?);
        slots.push(structural(&spec.y0, idx_y0, TAG_Y0, "y0")?);
        for (i, cov) in spec.l1.iter().enumerate() {
            let kind = match &cov.dist {
                CovariateDist::Categorical { probs, .. } => {
                    check_probs(probs, &format!("l1.{}", cov.name))?;
                    SlotKind::Categorical { probs: probs.clone() }
                }
                CovariateDist::Logistic(eq) => {
                    SlotKind::Logistic(compile_eq(eq, idx_l1[i], &format!("l1.{}", cov.name))?)
                }
                CovariateDist::Gaussian { mean, sd } => {
                    if !mean.is_finite() || !sd.is_finite() || *sd < 0.0 {
                        return Err(Error::InvalidSpec(format!("l1.{}: bad gaussian", cov.name)));
                    }
                    SlotKind::Gaussian { mean: *mean, sd: *sd }
                }
            };
            slots.push(Slot {
                kind,
                tag: TAG_L1 + i as u64,
            });
        }
        slots.push(structural(&spec.delta_y1, idx_delta_y1, TAG_DELTA_Y1, "delta_y1")?);
        slots.push(Slot {
            kind: SlotKind::Logistic(compile_eq(&spec.y1, idx_y1, "y1")?),
            tag: TAG_Y1,
        });

        let any_latent = spec.latent_sd > 0.0
            && slots.iter().any(|s| match &s.kind {
                SlotKind::Logistic(eq) => eq.latent != 0.0,
                _ => false,
            });

        // Dataset schema implied by the spec.
        let feature = |cov: &CovariateSpec| -> Feature {
            match &cov.dist {
                CovariateDist::Categorical { probs, levels } => Feature {
                    name: cov.name.clone(),
                    kind: FeatureKind::Categorical(match levels {
                        Some(ls) => ls.clone(),
                        None => (0..probs.len()).map(|i| i.to_string()).collect(),
                    }),
                },
                CovariateDist::Logistic(_) | CovariateDist::Gaussian { .. } => Feature {
                    name: cov.name.clone(),
                    kind: FeatureKind::Real,
                },
            }
        };
        let mut l0_features: Vec<Feature> = Vec::new();
        if c > 0 {
            l0_features.push(Feature {
                name: "community".to_string(),
                kind: FeatureKind::Categorical((0..c).map(|i| i.to_string()).collect()),
            });
        }
        l0_features.extend(spec.l0.iter().map(feature));
        let l1_features: Vec<Feature> = spec.l1.iter().map(feature).collect();
        let schema = Schema::new(l0_features, l1_features);

        Ok(Compiled {
            scenario: scen,
            slots,
            idx_community,
            idx_l0,
            idx_delta_a,
            idx_a,
            idx_delta_y0,
            idx_y0,
            idx_l1,
            idx_delta_y1,
            idx_y1,
            schema,
            any_latent,
        })
    }

    fn n_slots(&self) -> usize {
        self.slots.len()
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum World {
    Observed,
    Intervened { exposure: u8 },
}

fn draw_size(spec: &NpsemSpec, seed: u64, m: u64) -> usize {
    match &spec.clusters.size {
        SizeDist::Fixed(k) => *k,
        SizeDist::Choices { sizes, probs } => {
            let u = streams::unit_uniform(seed, &[m, TAG_SIZE]);
            let mut acc = 0.0;
            for (s, p) in sizes.iter().zip(probs) {
                acc += p;
                if u < acc {
                    return *s;
                }
            }
            *sizes.last().unwrap()
        }
    }
}

fn draw_latent(spec: &NpsemSpec, seed: u64, m: u64) -> f64 {
    if spec.latent_sd == 0.0 {
        0.0
    } else {
        spec.latent_sd * streams::standard_normal(seed, &[m, TAG_LATENT])
    }
}

/// Evaluate all node values for member `j` of cluster `m`. Every stochastic
/// slot consumes one keyed uniform, so the factual and counterfactual worlds
/// share their exogenous noise.
fn eval_member(
    compiled: &Compiled,
    seed: u64,
    m: u64,
    j: u64,
    u_latent: f64,
    community: usize,
    world: World,
) -> Vec<f64> {
    let scen = compiled.scenario;
    let mut values = vec![0.0; compiled.n_slots()];
    for (slot_idx, slot) in compiled.slots.iter().enumerate() {
        // Intervened nodes are set, not drawn.
        if let World::Intervened { exposure } = world {
            if slot_idx == compiled.idx_delta_a || slot_idx == compiled.idx_delta_y0 {
                values[slot_idx] = 1.0;
                continue;
            }
            if slot_idx == compiled.idx_a {
                values[slot_idx] = exposure as f64;
                continue;
            }
            if slot_idx == compiled.idx_delta_y1 {
                values[slot_idx] = match scen {
                    // dynamic rule: measure at follow-up iff baseline-negative
                    Scenario::S4 => {
                        if values[compiled.idx_y0] == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 1.0,
                };
                continue;
            }
        }
        // Observed world: follow-up testing is structurally restricted to
        // known baseline-negatives.
        if matches!(world, World::Observed)
            && scen == Scenario::S4
            && slot_idx == compiled.idx_delta_y1
            && (values[compiled.idx_delta_y0] == 0.0 || values[compiled.idx_y0] == 1.0)
        {
            values[slot_idx] = 0.0;
            continue;
        }

        values[slot_idx] = match &slot.kind {
            SlotKind::Community(_) => community as f64,
            SlotKind::ConstantOne => 1.0,
            SlotKind::Categorical { probs } => {
                let u = streams::unit_uniform(seed, &[m, j, slot.tag]);
                let mut acc = 0.0;
                let mut level = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = i;
                        break;
                    }
                }
                level as f64
            }
            SlotKind::Logistic(eq) => {
                let p = eq.prob(&values, u_latent);
                let u = streams::unit_uniform(seed, &[m, j, slot.tag]);
                if u < p {
                    1.0
                } else {
                    0.0
                }
            }
            SlotKind::Gaussian { mean, sd } => {
                mean + sd * streams::standard_normal(seed, &[m, j, slot.tag])
            }
        };
    }
    values
}

fn record_from_values(compiled: &Compiled, values: &[f64], cluster_id: String) -> ObservedRecord {
    let scen = compiled.scenario;
    let has_community = compiled
        .schema
        .l0
        .first()
        .map(|f| f.name == "community")
        .unwrap_or(false);
    let mut l0: Vec<CovValue> = Vec::with_capacity(compiled.schema.l0.len());
    let mut feature_iter = compiled.schema.l0.iter();
    if has_community {
        feature_iter.next();
        l0.push(CovValue::Cat(values[compiled.idx_community] as usize));
    }
    for (f, &slot) in feature_iter.zip(&compiled.idx_l0) {
        l0.push(match f.kind {
            FeatureKind::Real => CovValue::Real(values[slot]),
            FeatureKind::Categorical(_) => CovValue::Cat(values[slot] as usize),
        });
    }
    let l1 = if scen.has_time_varying() {
        Some(
            compiled
                .schema
                .l1
                .iter()
                .zip(&compiled.idx_l1)
                .map(|(f, &slot)| match f.kind {
                    FeatureKind::Real => CovValue::Real(values[slot]),
                    FeatureKind::Categorical(_) => CovValue::Cat(values[slot] as usize),
                })
                .collect(),
        )
    } else {
        None
    };

    let delta_a = values[compiled.idx_delta_a] as u8;
    let a = (delta_a == 1).then(|| values[compiled.idx_a] as u8);
    let (delta_y0, y0) = if scen.has_baseline_outcome() {
        let d = values[compiled.idx_delta_y0] as u8;
        (Some(d), (d == 1).then(|| values[compiled.idx_y0] as u8))
    } else {
        (None, None)
    };
    let delta_y1 = values[compiled.idx_delta_y1] as u8;
    let y1 = (delta_y1 == 1).then(|| values[compiled.idx_y1] as u8);

    ObservedRecord {
        l0,
        delta_a,
        a,
        delta_y0,
        y0,
        l1,
        delta_y1,
        y1,
        cluster_id,
    }
}

fn community_of(spec: &NpsemSpec, m: usize) -> usize {
    if spec.clusters.communities == 0 {
        0
    } else {
        m % spec.clusters.communities
    }
}

/// Sample a full observed dataset. Deterministic given `(spec, seed)`;
/// cluster-parallel and sequential runs produce identical records.
pub fn sample_observed(spec: &NpsemSpec, seed: u64) -> Result<Dataset> {
    sample_observed_with(spec, seed, crate::exec::Parallelism::Auto)
}

/// [`sample_observed`] with an explicit execution mode (bench knob).
pub fn sample_observed_with(
    spec: &NpsemSpec,
    seed: u64,
    mode: crate::exec::Parallelism,
) -> Result<Dataset> {
    let compiled = Compiled::build(spec)?;
    let m_clusters = spec.clusters.count;
    let width = (m_clusters.max(2) as f64).log10().ceil() as usize + 1;
    let per_cluster: Vec<Vec<ObservedRecord>> = crate::exec::map_indexed_with(mode, m_clusters, |m| {
        let size = draw_size(spec, seed, m as u64);
        let u = draw_latent(spec, seed, m as u64);
        let community = community_of(spec, m);
        let cluster_id = format!("c{m:0width$}");
        (0..size)
            .map(|j| {
                let values = eval_member(
                    &compiled,
                    seed,
                    m as u64,
                    j as u64,
                    u,
                    community,
                    World::Observed,
                );
                record_from_values(&compiled, &values, cluster_id.clone())
            })
            .collect()
    });
    let records: Vec<ObservedRecord> = per_cluster.into_iter().flatten().collect();
    Dataset::new(compiled.schema.clone(), spec.scenario, records)
}

/// Sample counterfactual outcomes under the scenario's intervention. The
/// cluster structure (sizes, latents, noise streams) mirrors
/// [`sample_observed`], so with matched seeds the draws are coupled with the
/// factual world record-by-record. Whole clusters are generated until at
/// least `n_draws` participants exist (rounded up to a full community
/// cycle); all generated draws are returned.
pub fn sample_counterfactual(
    spec: &NpsemSpec,
    intervention: InterventionSpec,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<CounterfactualDraw>> {
    if intervention.exposure > 1 {
        return Err(Error::InterventionMismatch(format!(
            "exposure level {} not binary",
            intervention.exposure
        )));
    }
    let compiled = Compiled::build(spec)?;
    let scen = spec.scenario;
    let communities = spec.clusters.communities.max(1);
    let mean_size = spec.clusters.size.mean().max(1.0);
    let mut m_clusters = ((n_draws as f64 / mean_size).ceil() as usize).max(1);
    m_clusters = m_clusters.div_ceil(communities) * communities;

    let per_cluster: Vec<Vec<CounterfactualDraw>> = crate::exec::map_indexed(m_clusters, |m| {
        let size = draw_size(spec, seed, m as u64);
        let u = draw_latent(spec, seed, m as u64);
        let community = community_of(spec, m);
        (0..size)
            .map(|j| {
                let values = eval_member(
                    &compiled,
                    seed,
                    m as u64,
                    j as u64,
                    u,
                    community,
                    World::Intervened {
                        exposure: intervention.exposure,
                    },
                );
                let y1 = values[compiled.idx_y1] as u8;
                if scen.has_baseline_outcome() {
                    let y0 = values[compiled.idx_y0] as u8;
                    CounterfactualDraw {
                        y0: Some(y0),
                        y1,
                        at_risk: Some(y0 == 0),
                    }
                } else {
                    CounterfactualDraw {
                        y0: None,
                        y1,
                        at_risk: None,
                    }
                }
            })
            .collect()
    });
    Ok(per_cluster.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Exact enumeration
// ---------------------------------------------------------------------------

/// 9-point Gauss–Hermite rule for integrals against the standard normal:
/// nodes `u_i` and probabilities `p_i` with `sum p_i = 1`.
pub fn gauss_hermite_9() -> Vec<(f64, f64)> {
    // Physicists' nodes for H_9, refined by Newton to machine precision.
    let approx = [
        0.0,
        0.723551018752838,
        1.468553289216668,
        2.266580584531843,
        3.190993201781528,
    ];
    // returns (H_9(x), H_8(x))
    let hermite = |x: f64| -> (f64, f64) {
        let mut hm = 1.0; // H_0
        let mut h = 2.0 * x; // H_1
        for k in 1..9 {
            let next = 2.0 * x * h - 2.0 * k as f64 * hm;
            hm = h;
            h = next;
        }
        (h, hm)
    };
    let mut nodes = Vec::with_capacity(9);
    // 2^{n-1} n! sqrt(pi) / n^2 with n = 9
    let weight_scale = 256.0 * 362_880.0 * std::f64::consts::PI.sqrt() / 81.0;
    for &x0 in &approx {
        let mut x = x0;
        for _ in 0..30 {
            let (h9, h8) = hermite(x);
            let step = h9 / (18.0 * h8); // H_n' = 2 n H_{n-1}
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, h8) = hermite(x);
        let w = weight_scale / (h8 * h8);
        nodes.push((x, w));
        if x != 0.0 {
            nodes.push((-x, w));
        }
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut out: Vec<(f64, f64)> = nodes
        .into_iter()
        .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
        .collect();
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

const MAX_CONFIGS: u128 = 20_000_000;

fn recurse_enum(
    compiled: &Compiled,
    world: World,
    u: f64,
    slot_idx: usize,
    prob: f64,
    values: &mut [f64],
    visit: &mut dyn FnMut(&[f64], f64),
) {
    let scen = compiled.scenario;
    if prob == 0.0 {
        return;
    }
    if slot_idx == compiled.n_slots() {
        visit(values, prob);
        return;
    }
    let slot = &compiled.slots[slot_idx];

    if let World::Intervened { exposure } = world {
        let forced = if slot_idx == compiled.idx_delta_a || slot_idx == compiled.idx_delta_y0 {
            Some(1.0)
        } else if slot_idx == compiled.idx_a {
            Some(exposure as f64)
        } else if slot_idx == compiled.idx_delta_y1 {
            Some(match scen {
                Scenario::S4 => {
                    if values[compiled.idx_y0] == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 1.0,
            })
        } else {
            None
        };
        if let Some(v) = forced {
            values[slot_idx] = v;
            recurse_enum(compiled, world, u, slot_idx + 1, prob, values, visit);
            return;
        }
    }
    if matches!(world, World::Observed)
        && scen == Scenario::S4
        && slot_idx == compiled.idx_delta_y1
        && (values[compiled.idx_delta_y0] == 0.0 || values[compiled.idx_y0] == 1.0)
    {
        values[slot_idx] = 0.0;
        recurse_enum(compiled, world, u, slot_idx + 1, prob, values, visit);
        return;
    }

    match &slot.kind {
        SlotKind::Community(c) => {
            let c = (*c).max(1);
            for level in 0..c {
                values[slot_idx] = level as f64;
                recurse_enum(
                    compiled,
                    world,
                    u,
                    slot_idx + 1,
                    prob / c as f64,
                    values,
                    visit,
                );
            }
        }
        SlotKind::ConstantOne => {
            values[slot_idx] = 1.0;
            recurse_enum(compiled, world, u, slot_idx + 1, prob, values, visit);
        }
        SlotKind::Categorical { probs } => {
            for (level, &p) in probs.iter().enumerate() {
                values[slot_idx] = level as f64;
                recurse_enum(compiled, world, u, slot_idx + 1, prob * p, values, visit);
            }
        }
        SlotKind::Logistic(eq) => {
            let p = eq.prob(values, u);
            values[slot_idx] = 1.0;
            recurse_enum(compiled, world, u, slot_idx + 1, prob * p, values, visit);
            values[slot_idx] = 0.0;
            recurse_enum(compiled, world, u, slot_idx + 1, prob * (1.0 - p), values, visit);
        }
        SlotKind::Gaussian { .. } => unreachable!("guarded by discrete_exact"),
    }
}

/// Visit every joint configuration of a discrete spec with its probability.
/// The latent is discretized by Gauss–Hermite quadrature when any loading is
/// nonzero; community levels are uniform.
fn enumerate_world(
    spec: &NpsemSpec,
    compiled: &Compiled,
    world: World,
    visit: &mut dyn FnMut(&[f64], f64),
) -> Result<()> {
    if !spec.discrete_exact() {
        return Err(Error::ExactRequiresDiscrete);
    }
    let mut count: u128 = if compiled.any_latent { 9 } else { 1 };
    for slot in &compiled.slots {
        let levels: u128 = match &slot.kind {
            SlotKind::Community(c) => (*c).max(1) as u128,
            SlotKind::Categorical { probs } => probs.len() as u128,
            SlotKind::Logistic(_) => 2,
            SlotKind::ConstantOne => 1,
            SlotKind::Gaussian { .. } => return Err(Error::ExactRequiresDiscrete),
        };
        count = count.saturating_mul(levels);
        if count > MAX_CONFIGS {
            return Err(Error::EnumerationTooLarge(count, MAX_CONFIGS));
        }
    }

    let latent_points: Vec<(f64, f64)> = if compiled.any_latent {
        gauss_hermite_9()
            .into_iter()
            .map(|(u, p)| (spec.latent_sd * u, p))
            .collect()
    } else {
        vec![(0.0, 1.0)]
    };

    let mut values = vec![0.0; compiled.n_slots()];
    for &(u, pu) in &latent_points {
        recurse_enum(compiled, world, u, 0, pu, &mut values, visit);
    }
    Ok(())
}

/// Counterfactual parameter at exposure level `a`.
///
/// `Exact` enumerates all joint levels (latent by quadrature) and requires a
/// discrete spec; `MonteCarlo` uses [`sample_counterfactual`] with the
/// binomial standard error `sqrt(p(1-p)/n)`.
pub fn true_psi(spec: &NpsemSpec, a: u8, method: TruthMethod, n_draws: usize) -> Result<TruthReport> {
    match method {
        TruthMethod::Exact => true_psi_exact(spec, a),
        TruthMethod::MonteCarlo => true_psi_mc(spec, a, n_draws),
    }
}

fn true_psi_exact(spec: &NpsemSpec, a: u8) -> Result<TruthReport> {
    if a > 1 {
        return Err(Error::InterventionMismatch(format!("exposure level {a} not binary")));
    }
    let compiled = Compiled::build(spec)?;
    let scen = spec.scenario;
    let world = World::Intervened { exposure: a };
    let mut num = 0.0; // S4: P(Y1*=1, Y0*=0); else P(Y*=1)
    let mut den = 0.0; // S4: P(Y0*=0)
    let idx_y0 = compiled.idx_y0;
    let idx_y1 = compiled.idx_y1;
    enumerate_world(spec, &compiled, world, &mut |values, prob| {
        if scen.has_baseline_outcome() {
            if values[idx_y0] == 0.0 {
                den += prob;
                if values[idx_y1] == 1.0 {
                    num += prob;
                }
            }
        } else if values[idx_y1] == 1.0 {
            num += prob;
        }
    })?;
    let (psi, numerator, denominator) = if scen.has_baseline_outcome() {
        if den == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        (num / den, Some(num), Some(den))
    } else {
        (num, None, None)
    };
    Ok(TruthReport {
        scenario: scen,
        kind: TruthKind::Counterfactual,
        method: TruthMethod::Exact,
        exposure: a,
        psi,
        numerator,
        denominator,
        mc_se: None,
        n_draws: None,
    })
}

fn true_psi_mc(spec: &NpsemSpec, a: u8, n_draws: usize) -> Result<TruthReport> {
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be positive".into()));
    }
    let draws = sample_counterfactual(spec, InterventionSpec { exposure: a }, n_draws, MC_SEED_SALT)?;
    let n = draws.len();
    if spec.scenario.has_baseline_outcome() {
        let at_risk = draws.iter().filter(|d| d.at_risk == Some(true)).count();
        let events = draws
            .iter()
            .filter(|d| d.at_risk == Some(true) && d.y1 == 1)
            .count();
        if at_risk == 0 {
            return Err(Error::ZeroDenominator);
        }
        let psi = events as f64 / at_risk as f64;
        let se = (psi * (1.0 - psi) / at_risk as f64).sqrt();
        Ok(TruthReport {
            scenario: spec.scenario,
            kind: TruthKind::Counterfactual,
            method: TruthMethod::MonteCarlo,
            exposure: a,
            psi,
            numerator: Some(events as f64 / n as f64),
            denominator: Some(at_risk as f64 / n as f64),
            mc_se: Some(se),
            n_draws: Some(n),
        })
    } else {
        let events = draws.iter().filter(|d| d.y1 == 1).count();
        let psi = events as f64 / n as f64;
        let se = (psi * (1.0 - psi) / n as f64).sqrt();
        Ok(TruthReport {
            scenario: spec.scenario,
            kind: TruthKind::Counterfactual,
            method: TruthMethod::MonteCarlo,
            exposure: a,
            psi,
            numerator: None,
            denominator: None,
            mc_se: Some(se),
            n_draws: Some(n),
        })
    }
}

type StratumKey = Vec<u64>;

fn key_of(values: &[f64], slots: &[usize]) -> StratumKey {
    slots.iter().map(|&s| values[s].to_bits()).collect()
}

#[derive(Default)]
struct WeightedMean {
    w: f64,
    wy: f64,
}

impl WeightedMean {
    fn add(&mut self, w: f64, y: f64) {
        self.w += w;
        self.wy += w * y;
    }
    fn mean(&self) -> f64 {
        self.wy / self.w
    }
}

/// Evaluate the scenario's observed-data statistical estimand (the iterated
/// conditional expectations) by exact summation under the distribution the
/// spec implies — no estimation involved.
pub fn gformula_exact(spec: &NpsemSpec, a: u8) -> Result<TruthReport> {
    if a > 1 {
        return Err(Error::InterventionMismatch(format!("exposure level {a} not binary")));
    }
    let compiled = Compiled::build(spec)?;
    let scen = spec.scenario;
    let af = a as f64;

    // L0 strata are keyed on the community plus every baseline covariate.
    let mut l0_slots: Vec<usize> = vec![compiled.idx_community];
    l0_slots.extend(&compiled.idx_l0);
    let l1_slots: Vec<usize> = compiled.idx_l1.clone();

    let idx_delta_a = compiled.idx_delta_a;
    let idx_a = compiled.idx_a;
    let idx_delta_y0 = compiled.idx_delta_y0;
    let idx_y0 = compiled.idx_y0;
    let idx_delta_y1 = compiled.idx_delta_y1;
    let idx_y1 = compiled.idx_y1;

    // Pass 1: marginal P(l0), innermost conditional means, the middle
    // conditioning stratum's mass, and (S4) the baseline-outcome regression.
    let mut p_l0: HashMap<StratumKey, f64> = HashMap::new();
    let mut inner: HashMap<(StratumKey, StratumKey), WeightedMean> = HashMap::new();
    let mut mid_w: HashMap<StratumKey, f64> = HashMap::new();
    let mut baseline: HashMap<StratumKey, WeightedMean> = HashMap::new();

    enumerate_world(spec, &compiled, World::Observed, &mut |values, prob| {
        let kl0 = key_of(values, &l0_slots);
        *p_l0.entry(kl0.clone()).or_insert(0.0) += prob;
        let exposed = values[idx_delta_a] == 1.0 && values[idx_a] == af;
        if !exposed {
            return;
        }
        match scen {
            Scenario::S1 | Scenario::S2 => {
                // E(Y | A=a, Delta_A=1, L0)
                inner
                    .entry((kl0, Vec::new()))
                    .or_default()
                    .add(prob, values[idx_y1]);
            }
            Scenario::S3 => {
                *mid_w.entry(kl0.clone()).or_insert(0.0) += prob;
                if values[idx_delta_y1] == 1.0 {
                    let kl1 = key_of(values, &l1_slots);
                    inner.entry((kl0, kl1)).or_default().add(prob, values[idx_y1]);
                }
            }
            Scenario::S4 => {
                if values[idx_delta_y0] == 1.0 {
                    *mid_w.entry(kl0.clone()).or_insert(0.0) += prob;
                    baseline
                        .entry(kl0.clone())
                        .or_default()
                        .add(prob, values[idx_y0]);
                    if values[idx_y0] == 0.0 && values[idx_delta_y1] == 1.0 {
                        let kl1 = key_of(values, &l1_slots);
                        inner.entry((kl0, kl1)).or_default().add(prob, values[idx_y1]);
                    }
                }
            }
        }
    })?;

    match scen {
        Scenario::S1 | Scenario::S2 => {
            let mut psi = 0.0;
            for (kl0, &p) in &p_l0 {
                let cell = inner.get(&(kl0.clone(), Vec::new())).ok_or_else(|| {
                    Error::EmptyStratum("positivity: P(A=a, measured | L0) = 0".into())
                })?;
                psi += p * cell.mean();
            }
            Ok(TruthReport {
                scenario: scen,
                kind: TruthKind::GFormula,
                method: TruthMethod::Exact,
                exposure: a,
                psi,
                numerator: None,
                denominator: None,
                mc_se: None,
                n_draws: None,
            })
        }
        Scenario::S3 | Scenario::S4 => {
            // Pass 2: middle expectation of the innermost conditional mean
            // over P(L1[, Y0] | stratum, L0).
            let mut outer: HashMap<StratumKey, f64> = HashMap::new();
            enumerate_world(spec, &compiled, World::Observed, &mut |values, prob| {
                let exposed = values[idx_delta_a] == 1.0 && values[idx_a] == af;
                if !exposed {
                    return;
                }
                let kl0 = key_of(values, &l0_slots);
                match scen {
                    Scenario::S3 => {
                        let kl1 = key_of(values, &l1_slots);
                        if let Some(cell) = inner.get(&(kl0.clone(), kl1)) {
                            *outer.entry(kl0).or_insert(0.0) += prob * cell.mean();
                        }
                    }
                    Scenario::S4 => {
                        if values[idx_delta_y0] == 1.0 {
                            // the joint indicator is 0 on baseline-positive rows
                            if values[idx_y0] == 0.0 {
                                let kl1 = key_of(values, &l1_slots);
                                if let Some(cell) = inner.get(&(kl0.clone(), kl1)) {
                                    *outer.entry(kl0).or_insert(0.0) += prob * cell.mean();
                                }
                            } else {
                                outer.entry(kl0).or_insert(0.0);
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            })?;

            let mut num = 0.0;
            for (kl0, &p) in &p_l0 {
                let w = mid_w
                    .get(kl0)
                    .copied()
                    .filter(|&w| w > 0.0)
                    .ok_or_else(|| Error::EmptyStratum("positivity: middle stratum mass 0".into()))?;
                let q1 = outer.get(kl0).copied().unwrap_or(0.0) / w;
                num += p * q1;
            }

            if scen == Scenario::S3 {
                return Ok(TruthReport {
                    scenario: scen,
                    kind: TruthKind::GFormula,
                    method: TruthMethod::Exact,
                    exposure: a,
                    psi: num,
                    numerator: None,
                    denominator: None,
                    mc_se: None,
                    n_draws: None,
                });
            }

            // denominator: 1 - E[ E(Y0 | measured, A=a, L0) ]
            let mut ey0 = 0.0;
            for (kl0, &p) in &p_l0 {
                let cell = baseline.get(kl0).ok_or_else(|| {
                    Error::EmptyStratum("positivity: baseline stratum mass 0".into())
                })?;
                ey0 += p * cell.mean();
            }
            let den = 1.0 - ey0;
            if den == 0.0 {
                return Err(Error::ZeroDenominator);
            }
            Ok(TruthReport {
                scenario: scen,
                kind: TruthKind::GFormula,
                method: TruthMethod::Exact,
                exposure: a,
                psi: num / den,
                numerator: Some(num),
                denominator: Some(den),
                mc_se: None,
                n_draws: None,
            })
        }
    }
}

/// Exact marginal probability that a structural node equals `value` in the
/// observed world (e.g. the implied missingness rate of `delta_a`).
pub fn observed_marginal(spec: &NpsemSpec, node: &str, value: f64) -> Result<f64> {
    let compiled = Compiled::build(spec)?;
    let slot = match node {
        "delta_a" => compiled.idx_delta_a,
        "a" => compiled.idx_a,
        "delta_y0" => compiled.idx_delta_y0,
        "y0" => compiled.idx_y0,
        "delta_y1" => compiled.idx_delta_y1,
        "y1" => compiled.idx_y1,
        other => {
            return Err(Error::InvalidSpec(format!(
                "observed_marginal supports structural nodes, not '{other}'"
            )))
        }
    };
    let mut total = 0.0;
    enumerate_world(spec, &compiled, World::Observed, &mut |values, prob| {
        if values[slot] == value {
            total += prob;
        }
    })?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    /// Minimal S1 spec: binary confounder w, exposure, outcome.
    fn s1_spec() -> NpsemSpec {
        NpsemSpec {
            scenario: Scenario::S1,
            clusters: ClusterSpec {
                count: 500,
                size: SizeDist::Fixed(2),
                communities: 0,
            },
            latent_sd: 1.0,
            l0: vec![CovariateSpec {
                name: "w".into(),
                dist: CovariateDist::Categorical {
                    probs: vec![0.7, 0.3],
                    levels: None,
                },
            }],
            l1: vec![],
            delta_a: None,
            a: Equation {
                intercept: -0.2,
                terms: vec![Term {
                    on: "w".into(),
                    level: Some(1),
                    coef: 0.8,
                }],
                latent: 0.0,
            },
            delta_y0: None,
            y0: None,
            delta_y1: None,
            y1: Equation {
                intercept: -0.4,
                terms: vec![
                    Term {
                        on: "a".into(),
                        level: None,
                        coef: 0.8,
                    },
                    Term {
                        on: "w".into(),
                        level: Some(1),
                        coef: 0.5,
                    },
                ],
                latent: 0.0,
            },
        }
    }

    // `with_terms` uses `level: None`; for a 2-level categorical parent
    // coded 0/1 the linear term and the level-1 indicator coincide.
    fn s4_spec() -> NpsemSpec {
        NpsemSpec {
            scenario: Scenario::S4,
            clusters: ClusterSpec {
                count: 400,
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
            delta_y0: Some(Equation::with_terms(1.0, &[("w", -0.4), ("a", 0.3)])),
            y0: Some(Equation::with_terms(-1.5, &[("w", 0.8), ("a", 0.5)])),
            delta_y1: Some(Equation::with_terms(1.4, &[("z", -0.6), ("w", -0.3)])),
            y1: Equation::with_terms(-1.8, &[("w", 0.7), ("a", 0.6), ("z", 0.5)]),
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let pts = gauss_hermite_9();
        assert_eq!(pts.len(), 9);
        let m0: f64 = pts.iter().map(|(_, p)| p).sum();
        let m2: f64 = pts.iter().map(|(u, p)| p * u * u).sum();
        let m4: f64 = pts.iter().map(|(u, p)| p * u.powi(4)).sum();
        let m6: f64 = pts.iter().map(|(u, p)| p * u.powi(6)).sum();
        assert!((m0 - 1.0).abs() < 1e-12, "m0={m0}");
        assert!((m2 - 1.0).abs() < 1e-12, "m2={m2}");
        assert!((m4 - 3.0).abs() < 1e-11, "m4={m4}");
        assert!((m6 - 15.0).abs() < 1e-10, "m6={m6}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = s4_spec();
        let d1 = sample_observed(&spec, 11).unwrap();
        let d2 = sample_observed(&spec, 11).unwrap();
        assert_eq!(d1.records, d2.records);
        let d3 = sample_observed(&spec, 12).unwrap();
        assert_ne!(d1.records, d3.records);
    }

    #[test]
    fn parallel_and_sequential_sampling_agree() {
        let spec = s4_spec();
        let par = sample_observed_with(&spec, 5, crate::exec::Parallelism::Auto).unwrap();
        let seq = sample_observed_with(&spec, 5, crate::exec::Parallelism::Sequential).unwrap();
        assert_eq!(par.records, seq.records);
    }

    #[test]
    fn simulated_datasets_validate() {
        for seed in [1, 2, 3] {
            let d = sample_observed(&s4_spec(), seed).unwrap();
            assert!(validate(&d).pass, "{}", validate(&d).summary());
            let d1 = sample_observed(&s1_spec(), seed).unwrap();
            assert!(validate(&d1).pass);
        }
    }

    #[test]
    fn forced_measurement_leaves_no_missing() {
        let mut spec = s4_spec();
        spec.clusters.count = 2000;
        spec.delta_a = Some(Equation::constant(999.0));
        spec.delta_y0 = Some(Equation::constant(999.0));
        spec.delta_y1 = Some(Equation::constant(999.0));
        let d = sample_observed(&spec, 3).unwrap();
        assert!(d.records.iter().all(|r| r.delta_a == 1 && r.a.is_some()));
        assert!(d
            .records
            .iter()
            .all(|r| r.delta_y0 == Some(1) && r.y0.is_some()));
        // follow-up still restricted to baseline-negatives
        assert!(d
            .records
            .iter()
            .all(|r| (r.delta_y1 == 1) == (r.y0 == Some(0))));
    }

    #[test]
    fn s4_dynamic_rule_in_counterfactual() {
        let spec = s4_spec();
        let draws = sample_counterfactual(&spec, InterventionSpec { exposure: 1 }, 2000, 9).unwrap();
        for d in &draws {
            assert!(d.y0.is_some());
            assert_eq!(d.at_risk, Some(d.y0 == Some(0)));
        }
        assert!(draws.iter().any(|d| d.at_risk == Some(true)));
        assert!(draws.iter().any(|d| d.at_risk == Some(false)));
    }

    #[test]
    fn null_effect_spec_probability_half() {
        // all coefficients and intercepts zero -> P(Y*) = expit(0) = 0.5
        let mut spec = s1_spec();
        spec.a = Equation::constant(0.0);
        spec.y1 = Equation::constant(0.0);
        let t = true_psi(&spec, 1, TruthMethod::Exact, 0).unwrap();
        assert!((t.psi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn null_effect_exposure_levels_identical() {
        // no equation depends on `a`: counterfactual draws coincide exactly
        let mut spec = s4_spec();
        spec.y0 = Some(Equation::with_terms(-1.0, &[("w", 0.8)]));
        spec.l1 = vec![CovariateSpec {
            name: "z".into(),
            dist: CovariateDist::Logistic(Equation::with_terms(-0.3, &[("w", 0.6)])),
        }];
        spec.delta_y1 = Some(Equation::with_terms(1.4, &[("z", -0.6)]));
        spec.y1 = Equation::with_terms(-1.8, &[("w", 0.7), ("z", 0.5)]);
        let d1 = sample_counterfactual(&spec, InterventionSpec { exposure: 1 }, 3000, 7).unwrap();
        let d0 = sample_counterfactual(&spec, InterventionSpec { exposure: 0 }, 3000, 7).unwrap();
        assert_eq!(d1.len(), d0.len());
        for (x, y) in d1.iter().zip(&d0) {
            assert_eq!(x.y0, y.y0);
            assert_eq!(x.y1, y.y1);
        }
        let t1 = true_psi(&spec, 1, TruthMethod::Exact, 0).unwrap();
        let t0 = true_psi(&spec, 0, TruthMethod::Exact, 0).unwrap();
        assert_eq!(t1.psi, t0.psi);
    }

    #[test]
    fn s1_truth_matches_hand_enumeration() {
        // psi(1) = P(w=0) expit(-0.4+0.8) + P(w=1) expit(-0.4+0.8+0.5)
        let spec = s1_spec();
        let t = true_psi(&spec, 1, TruthMethod::Exact, 0).unwrap();
        let by_hand = 0.7 * expit(0.4) + 0.3 * expit(0.9);
        assert!((t.psi - by_hand).abs() < 1e-12, "psi={} hand={by_hand}", t.psi);
        let t0 = true_psi(&spec, 0, TruthMethod::Exact, 0).unwrap();
        let by_hand0 = 0.7 * expit(-0.4) + 0.3 * expit(0.1);
        assert!((t0.psi - by_hand0).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let spec = s4_spec();
        let exact = true_psi(&spec, 1, TruthMethod::Exact, 0).unwrap();
        let mc = true_psi(&spec, 1, TruthMethod::MonteCarlo, 200_000).unwrap();
        let se = mc.mc_se.unwrap();
        assert!(
            (mc.psi - exact.psi).abs() < 3.0 * se,
            "mc={} exact={} se={se}",
            mc.psi,
            exact.psi
        );
    }

    #[test]
    fn coupled_worlds_agree_where_factual_matches_intervention() {
        let spec = s4_spec();
        let seed = 21;
        let observed = sample_observed(&spec, seed).unwrap();
        let cf =
            sample_counterfactual(&spec, InterventionSpec { exposure: 1 }, observed.n(), seed)
                .unwrap();
        assert!(cf.len() >= observed.n());
        let mut checked = 0;
        for (r, d) in observed.records.iter().zip(&cf) {
            // consistency: records whose factual intervention-node values
            // coincide with the intervened values keep their outcomes
            if r.delta_a == 1 && r.a == Some(1) && r.delta_y0 == Some(1) {
                assert_eq!(r.y0, d.y0, "baseline outcome must be shared");
                if r.y0 == Some(0) && r.delta_y1 == 1 {
                    assert_eq!(r.y1, Some(d.y1));
                }
                checked += 1;
            }
        }
        assert!(checked > 50, "coupling exercised only {checked} records");
    }

    #[test]
    fn identification_holds_under_mar() {
        // all dependence flows through included covariates
        for (name, spec) in [("s1", s1_spec()), ("s4", s4_spec())] {
            for a in [0u8, 1u8] {
                let truth = true_psi(&spec, a, TruthMethod::Exact, 0).unwrap();
                let gf = gformula_exact(&spec, a).unwrap();
                assert!(
                    (truth.psi - gf.psi).abs() < 1e-12,
                    "{name} a={a}: truth={} gformula={}",
                    truth.psi,
                    gf.psi
                );
            }
        }
    }

    #[test]
    fn hidden_common_cause_breaks_identification() {
        // latent loading on both exposure measurement and the outcome
        let mut spec = s4_spec();
        if let Some(eq) = spec.delta_a.as_mut() {
            eq.latent = 1.5;
        }
        spec.y1.latent = 1.5;
        let truth = true_psi(&spec, 1, TruthMethod::Exact, 0).unwrap();
        let gf = gformula_exact(&spec, 1).unwrap();
        assert!(
            (truth.psi - gf.psi).abs() > 0.01,
            "expected identification gap, truth={} gf={}",
            truth.psi,
            gf.psi
        );
    }

    #[test]
    fn no_confounding_collapses_to_conditional_mean() {
        // A independent of L: g-formula equals E(Y | A=a)
        let mut spec = s1_spec();
        spec.a = Equation::constant(0.3);
        let gf = gformula_exact(&spec, 1).unwrap();
        let compiled = Compiled::build(&spec).unwrap();
        let mut w = 0.0;
        let mut wy = 0.0;
        enumerate_world(&spec, &compiled, World::Observed, &mut |values, prob| {
            if values[compiled.idx_a] == 1.0 {
                w += prob;
                wy += prob * values[compiled.idx_y1];
            }
        })
        .unwrap();
        assert!((gf.psi - wy / w).abs() < 1e-14);
    }

    #[test]
    fn s4_conditional_is_ratio() {
        let t = true_psi(&s4_spec(), 1, TruthMethod::Exact, 0).unwrap();
        let (n, d) = (t.numerator.unwrap(), t.denominator.unwrap());
        assert!((t.psi - n / d).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&n) && d > 0.0 && d <= 1.0);
    }

    #[test]
    fn exact_rejects_gaussian_covariates() {
        let mut spec = s1_spec();
        spec.l0.push(CovariateSpec {
            name: "x".into(),
            dist: CovariateDist::Gaussian { mean: 0.0, sd: 1.0 },
        });
        spec.y1.terms.push(Term {
            on: "x".into(),
            level: None,
            coef: 0.2,
        });
        assert!(matches!(
            true_psi(&spec, 1, TruthMethod::Exact, 0),
            Err(Error::ExactRequiresDiscrete)
        ));
        // Monte Carlo still works
        let mc = true_psi(&spec, 1, TruthMethod::MonteCarlo, 5000).unwrap();
        assert!(mc.psi > 0.0 && mc.psi < 1.0);
    }

    #[test]
    fn spec_validation_catches_ordering_violations() {
        let mut spec = s1_spec();
        spec.a.terms.push(Term {
            on: "y1".into(),
            level: None,
            coef: 0.1,
        });
        assert!(matches!(sample_observed(&spec, 1), Err(Error::InvalidSpec(_))));

        // delta_a is not a node of S1
        let mut spec2 = s1_spec();
        spec2.y1.terms.push(Term {
            on: "delta_a".into(),
            level: None,
            coef: 0.1,
        });
        assert!(matches!(sample_observed(&spec2, 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn intraclass_correlation_responds_to_latent_loading() {
        // households of 4; outcome loading 2.0 gives ICC well above 0.1,
        // loading 0 gives ICC near 0
        let mut spec = s1_spec();
        spec.clusters = ClusterSpec {
            count: 20_000,
            size: SizeDist::Fixed(4),
            communities: 0,
        };
        spec.y1.latent = 2.0;
        let d = sample_observed(&spec, 77).unwrap();
        let icc = anova_icc(&d);
        assert!(icc > 0.1, "icc={icc}");

        spec.y1.latent = 0.0;
        let d0 = sample_observed(&spec, 78).unwrap();
        let icc0 = anova_icc(&d0);
        assert!(icc0.abs() < 0.08, "icc0={icc0}");
    }

    /// One-way ANOVA intraclass correlation for equal-size clusters.
    fn anova_icc(d: &Dataset) -> f64 {
        let index = d.cluster_index();
        let k = index.values().next().unwrap().len() as f64;
        let m = index.len() as f64;
        let y = |i: usize| d.records[i].y1.unwrap() as f64;
        let grand: f64 = (0..d.n()).map(y).sum::<f64>() / d.n() as f64;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for rows in index.values() {
            let mean = rows.iter().map(|&i| y(i)).sum::<f64>() / k;
            ssb += k * (mean - grand).powi(2);
            ssw += rows.iter().map(|&i| (y(i) - mean).powi(2)).sum::<f64>();
        }
        let msb = ssb / (m - 1.0);
        let msw = ssw / (m * (k - 1.0));
        (msb - msw) / (msb + (k - 1.0) * msw)
    }

    #[test]
    fn observed_marginal_matches_sampled_rate() {
        let spec = s4_spec();
        let implied = observed_marginal(&spec, "delta_a", 0.0).unwrap();
        let d = sample_observed(&spec, 31).unwrap();
        let rate = d.records.iter().filter(|r| r.delta_a == 0).count() as f64 / d.n() as f64;
        let se = (implied * (1.0 - implied) / d.n() as f64).sqrt();
        assert!((rate - implied).abs() < 3.0 * se, "rate={rate} implied={implied}");
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = s4_spec();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: NpsemSpec = serde_json::from_str(&text).unwrap();
        let d1 = sample_observed(&spec, 4).unwrap();
        let d2 = sample_observed(&back, 4).unwrap();
        assert_eq!(d1.records, d2.records);
    }
}
