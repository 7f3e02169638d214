//! Influence-curve inference with cluster aggregation.
//!
//! Asymptotically linear estimators satisfy `psi_hat - psi ~ (1/N) sum_i D_i`
//! with `D_i` the participant-level influence curve. When participants are
//! dependent within clusters, the independent unit is the cluster: with
//! `m = 1..M` indexing clusters, the cluster-level influence curve is
//!
//! ```text
//! X_m = (M/N) * sum_{j in Z_m} D_{m,j}
//! ```
//!
//! and the standard error is `sd(X_m) / sqrt(M)`. With singleton clusters
//! (`M = N`) this reduces exactly to the classical iid IC standard error.
//!
//! Ratio and log functionals are handled by the Delta method on the influence
//! curves, so a two-stage transform (ratio of counterfactual probabilities,
//! then log for the risk-ratio CI) composes mechanically.

use crate::{Error, Result};

/// A point estimate together with its participant-level influence curve.
#[derive(Debug, Clone)]
pub struct IcEstimate {
    pub point: f64,
    /// One value per participant; mean approximately 0 for targeted
    /// estimators.
    pub ic: Vec<f64>,
}

/// Participant-level influence curve plus the participant-to-cluster map.
#[derive(Debug, Clone)]
pub struct InfluenceCurve {
    /// `D_i`, one per participant.
    pub values: Vec<f64>,
    /// Cluster index (`0..n_clusters`) per participant.
    pub cluster_of: Vec<usize>,
    pub n_clusters: usize,
}

/// Cluster-level influence curve `X_m`.
#[derive(Debug, Clone)]
pub struct ClusterIc {
    pub values: Vec<f64>,
}

/// Aggregate participant-level ICs into cluster-level ICs:
/// `X_m = (M/N) * sum_{j in Z_m} D_{m,j}`.
pub fn aggregate_clusters(ic: &InfluenceCurve) -> Result<ClusterIc> {
    let n = ic.values.len();
    if ic.cluster_of.len() != n {
        return Err(Error::UnmappedParticipant(ic.cluster_of.len().min(n)));
    }
    let m = ic.n_clusters;
    let mut sums = vec![0.0; m];
    for (i, (&d, &c)) in ic.values.iter().zip(&ic.cluster_of).enumerate() {
        if c >= m {
            return Err(Error::UnmappedParticipant(i));
        }
        sums[c] += d;
    }
    let scale = m as f64 / n as f64;
    for s in &mut sums {
        *s *= scale;
    }
    Ok(ClusterIc { values: sums })
}

/// Standard error from the cluster-level IC: `sd(X_m) / sqrt(M)` with the
/// sample (M-1) variance.
pub fn ic_se(cluster_ic: &ClusterIc) -> Result<f64> {
    let m = cluster_ic.values.len();
    if m < 2 {
        return Err(Error::TooFewClusters(m));
    }
    let mf = m as f64;
    let mean = cluster_ic.values.iter().sum::<f64>() / mf;
    let var = cluster_ic
        .values
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (mf - 1.0);
    Ok((var / mf).sqrt())
}

/// Convenience: participant ICs straight to a clustered standard error.
pub fn clustered_se(values: &[f64], cluster_of: &[usize], n_clusters: usize) -> Result<f64> {
    let ic = InfluenceCurve {
        values: values.to_vec(),
        cluster_of: cluster_of.to_vec(),
        n_clusters,
    };
    ic_se(&aggregate_clusters(&ic)?)
}

/// Delta method for a ratio: point `num/den`,
/// `IC_i = IC_num_i / den - num * IC_den_i / den^2`.
pub fn delta_method_ratio(num: &IcEstimate, den: &IcEstimate) -> Result<IcEstimate> {
    if den.point == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    debug_assert_eq!(num.ic.len(), den.ic.len());
    let ratio = num.point / den.point;
    let ic = num
        .ic
        .iter()
        .zip(&den.ic)
        .map(|(&dn, &dd)| dn / den.point - num.point / (den.point * den.point) * dd)
        .collect();
    Ok(IcEstimate { point: ratio, ic })
}

/// Delta method for a log transform: point `ln(est)`, `IC_i = IC_i / est`.
pub fn delta_method_log(est: &IcEstimate) -> Result<IcEstimate> {
    if est.point <= 0.0 {
        return Err(Error::NonPositiveEstimate(est.point));
    }
    Ok(IcEstimate {
        point: est.point.ln(),
        ic: est.ic.iter().map(|d| d / est.point).collect(),
    })
}

/// Two-sided Wald interval `point ± z_{(1+level)/2} * se`. The `se` is
/// expected to already include its `1/sqrt(M)` factor (see [`ic_se`]).
pub fn wald_ci(point: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::BadConfidenceLevel(level));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok((point - z * se, point + z * se))
}

/// Standard normal quantile function (inverse CDF).
///
/// Rational approximation after Wichura (Algorithm AS 241, PPND16),
/// accurate to well below 1e-9 over (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_9)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
