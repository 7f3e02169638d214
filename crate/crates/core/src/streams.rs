//! Counter-based random streams.
//!
//! Every random quantity in the simulator is drawn from a stream keyed by
//! `(seed, component tags...)` rather than from a sequential generator. Keyed
//! draws make output independent of evaluation order, so cluster-parallel and
//! sequential sampling produce bit-identical datasets, and matched seeds give
//! coupled factual/counterfactual worlds (the same exogenous noise feeds
//! both).
//!
//! The mixer is splitmix64 applied over the key components; its avalanche is
//! good enough that adjacent keys give statistically independent draws.

/// splitmix64 finalizer.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with key components into a single well-distributed u64.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6A09_E667_F3BC_C909);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    h
}

/// Uniform draw in [0, 1) with 53 bits of precision.
#[inline]
pub fn unit_uniform(seed: u64, tags: &[u64]) -> f64 {
    (mix(seed, tags) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw via the inverse CDF.
#[inline]
pub fn standard_normal(seed: u64, tags: &[u64]) -> f64 {
    // unit_uniform is in [0,1); shift to (0,1) for the quantile function.
    let u = unit_uniform(seed, tags).max(1e-300);
    crate::inference::normal_quantile(u)
}
