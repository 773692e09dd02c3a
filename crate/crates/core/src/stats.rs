//! Order statistics and empirical Wasserstein distances.
//!
//! `wasserstein_1d` evaluates `∫₀¹ |F_a⁻¹(z) − F_b⁻¹(z)| dz` exactly for two
//! empirical distributions. Both quantile functions are step functions with
//! breakpoints at `i/|a|` and `j/|b|`; walking the merged breakpoints gives
//! the integral as a finite sum. Breakpoints are compared as integers
//! (`i·|b|` vs `j·|a|`) so segment lengths carry no rounding.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng;

/// Default number of random directions for sliced Wasserstein.
pub const DEFAULT_PROJECTIONS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("non-finite sample value")]
    NonFinite,
    #[error("rank {m} out of range for {len} values")]
    RankOutOfRange { m: usize, len: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample rows have inconsistent width")]
    RaggedRows,
    #[error("num_projections must be positive")]
    NoProjections,
}

/// Vector-valued samples stored row-major (`rows × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNd {
    dim: usize,
    data: Vec<f64>,
}

impl SampleNd {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, StatsError> {
        if dim == 0 || data.is_empty() {
            return Err(StatsError::Empty);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(StatsError::RaggedRows);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(SampleNd { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, StatsError> {
        let dim = rows.first().ok_or(StatsError::Empty)?.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(StatsError::RaggedRows);
        }
        SampleNd::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Projection of every row onto `direction`.
    pub fn project(&self, direction: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().zip(direction).map(|(x, t)| x * t).sum())
            .collect()
    }
}

/// The `m`-th smallest value (1-based, duplicates kept); `m = 0` yields −∞.
pub fn quantile(values: &[f64], m: usize) -> Result<f64, StatsError> {
    if m > values.len() {
        return Err(StatsError::RankOutOfRange {
            m,
            len: values.len(),
        });
    }
    if m == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = values.to_vec();
    sort_values(&mut sorted);
    Ok(sorted[m - 1])
}

pub(crate) fn sort_values(v: &mut [f64]) {
    v.sort_by(f64::total_cmp);
}

fn check_sample(v: &[f64]) -> Result<(), StatsError> {
    if v.is_empty() {
        return Err(StatsError::Empty);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Exact W₁ between the empirical distributions of `a` and `b`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_sample(a)?;
    check_sample(b)?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    sort_values(&mut a);
    sort_values(&mut b);
    Ok(wasserstein_sorted(&a, &b))
}

/// W₁ for already sorted, nonempty inputs.
pub(crate) fn wasserstein_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as u64, b.len() as u64);
    // Positions on [0, 1] scaled by na·nb: a's i-th step ends at (i+1)·nb,
    // b's j-th step ends at (j+1)·na.
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0u64;
    let mut acc = 0.0f64;
    while i < a.len() && j < b.len() {
        let end_a = (i as u64 + 1) * nb;
        let end_b = (j as u64 + 1) * na;
        let end = end_a.min(end_b);
        acc += (a[i] - b[j]).abs() * (end - pos) as f64;
        pos = end;
        if end_a == end {
            i += 1;
        }
        if end_b == end {
            j += 1;
        }
    }
    acc / (na * nb) as f64
}

/// Seeded isotropic unit directions in `dim` dimensions.
pub fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::rng_from(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A zero draw has probability zero; skip it rather than divide by 0.
        if norm > 0.0 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Mean over `num_projections` seeded random directions θ of W₁(a·θ, b·θ).
pub fn sliced_wasserstein(
    a: &SampleNd,
    b: &SampleNd,
    num_projections: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if a.dim() != b.dim() {
        return Err(StatsError::DimensionMismatch(a.dim(), b.dim()));
    }
    if num_projections == 0 {
        return Err(StatsError::NoProjections);
    }
    let dirs = random_directions(a.dim(), num_projections, seed);
    let total: f64 = dirs
        .iter()
        .map(|t| {
            let mut pa = a.project(t);
            let mut pb = b.project(t);
            sort_values(&mut pa);
            sort_values(&mut pb);
            wasserstein_sorted(&pa, &pb)
        })
        .sum();
    Ok(total / num_projections as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Midpoint-rule integral of |F_a⁻¹ − F_b⁻¹| on a uniform grid of `n` cells.
    fn grid_oracle(a: &[f64], b: &[f64], n: usize) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let inv = |s: &[f64], z: f64| s[((z * s.len() as f64) as usize).min(s.len() - 1)];
        (0..n)
            .map(|k| {
                let z = (k as f64 + 0.5) / n as f64;
                (inv(&a, z) - inv(&b, z)).abs()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn quantile_convention() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 2), Ok(2.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 3), Ok(3.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0), Ok(f64::NEG_INFINITY));
        assert_eq!(
            quantile(&[3.0, 1.0, 2.0], 4),
            Err(StatsError::RankOutOfRange { m: 4, len: 3 })
        );
        assert_eq!(quantile(&[2.0, 2.0, 1.0], 3), Ok(2.0));
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(
            wasserstein_1d(&[5.0, 1.0, 5.0, 1.0], &[1.0, 5.0, 1.0, 5.0]),
            Ok(0.0)
        );
        assert_eq!(wasserstein_1d(&[0.0, 0.0, 0.0], &[2.0, 2.0]), Ok(2.0));
        // Frozen from the 10⁶-cell grid oracle below.
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0]), Ok(1.0));
        assert_eq!(wasserstein_1d(&[0.0], &[0.0, 2.0]), Ok(1.0));
        assert_eq!(wasserstein_1d(&[], &[1.0]), Err(StatsError::Empty));
        assert_eq!(
            wasserstein_1d(&[f64::NAN], &[1.0]),
            Err(StatsError::NonFinite)
        );
    }

    #[test]
    fn grid_oracle_reproduces_examples() {
        assert!((grid_oracle(&[0.0, 1.0], &[1.0, 2.0], 1_000_000) - 1.0).abs() < 1e-9);
        assert!((grid_oracle(&[0.0], &[0.0, 2.0], 1_000_000) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unequal_lengths_match_grid() {
        // 3 and 7 share no factor with each other; use a grid aligned to both.
        let a = [0.3, -1.2, 4.0];
        let b = [2.0, 2.5, -3.0, 0.0, 1.0, 9.0, -0.5];
        let oracle = grid_oracle(&a, &b, 21 * 50_000);
        assert!((wasserstein_1d(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn sliced_reduces_to_1d() {
        let a = [0.5, -2.0, 3.0, 1.0];
        let b = [1.0, 7.0, -1.0];
        let sa = SampleNd::new(1, a.to_vec()).unwrap();
        let sb = SampleNd::new(1, b.to_vec()).unwrap();
        let w = wasserstein_1d(&a, &b).unwrap();
        for seed in [0u64, 1, 99, 12345] {
            let s = sliced_wasserstein(&sa, &sb, 7, seed).unwrap();
            assert!((s - w).abs() < 1e-12, "seed {seed}: {s} vs {w}");
        }
    }

    #[test]
    fn sliced_identical_is_zero() {
        let s = SampleNd::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]).unwrap();
        for seed in 0..5 {
            assert_eq!(sliced_wasserstein(&s, &s, 16, seed), Ok(0.0));
        }
    }

    #[test]
    fn sliced_errors() {
        let a = SampleNd::new(2, vec![0.0, 1.0]).unwrap();
        let b = SampleNd::new(3, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(
            sliced_wasserstein(&a, &b, 4, 0),
            Err(StatsError::DimensionMismatch(2, 3))
        );
        assert_eq!(
            sliced_wasserstein(&a, &a, 0, 0),
            Err(StatsError::NoProjections)
        );
        assert_eq!(SampleNd::new(2, vec![1.0]), Err(StatsError::RaggedRows));
    }

    #[test]
    fn sliced_gaussian_clouds_match_monte_carlo() {
        let mut rng = rng::rng_from(7);
        let mut cloud = |shift: f64| {
            let data: Vec<f64> = (0..200)
                .flat_map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let y: f64 = StandardNormal.sample(&mut rng);
                    [x + shift, y]
                })
                .collect();
            SampleNd::new(2, data).unwrap()
        };
        let a = cloud(0.0);
        let b = cloud(3.0);
        let est = sliced_wasserstein(&a, &b, 4096, 11).unwrap();

        // Independent oracle: 10⁵ directions drawn as uniform angles.
        let mut orng = rng::rng_from(12345);
        let k = 100_000;
        let mut total = 0.0;
        for _ in 0..k {
            let phi: f64 = orng.random_range(0.0..std::f64::consts::TAU);
            let t = [phi.cos(), phi.sin()];
            total += grid_free_w1(&a.project(&t), &b.project(&t));
        }
        let oracle = total / k as f64;
        assert!(
            ((est - oracle) / oracle).abs() < 0.05,
            "est {est} oracle {oracle}"
        );
    }

    // Equal-length W₁ as the mean absolute difference of order statistics.
    fn grid_free_w1(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn sliced_is_reproducible() {
        let a = SampleNd::new(3, (0..30).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = SampleNd::new(3, (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        let x = sliced_wasserstein(&a, &b, 32, 5).unwrap();
        let y = sliced_wasserstein(&a, &b, 32, 5).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
        assert_ne!(x, sliced_wasserstein(&a, &b, 32, 6).unwrap());
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..40)
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(a in sample(), b in sample()) {
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
        }

        #[test]
        fn zero_iff_same_multiset(a in sample(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut b = a.clone();
            b.shuffle(&mut rng::rng_from(perm_seed));
            prop_assert_eq!(wasserstein_1d(&a, &b).unwrap(), 0.0);
            let mut c = a.clone();
            c[0] += 0.5;
            prop_assert!(wasserstein_1d(&a, &c).unwrap() > 0.0);
        }

        #[test]
        fn triangle_inequality(a in sample(), b in sample(), c in sample()) {
            let ab = wasserstein_1d(&a, &b).unwrap();
            let bc = wasserstein_1d(&b, &c).unwrap();
            let ac = wasserstein_1d(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn translation_invariant(a in sample(), b in sample(), c in -10.0f64..10.0) {
            let w = wasserstein_1d(&a, &b).unwrap();
            let ac: Vec<f64> = a.iter().map(|x| x + c).collect();
            let bc: Vec<f64> = b.iter().map(|x| x + c).collect();
            prop_assert!((wasserstein_1d(&ac, &bc).unwrap() - w).abs() <= 1e-12);
        }

        #[test]
        fn scales_linearly(a in sample(), b in sample(), s in 0.01f64..100.0) {
            let w = wasserstein_1d(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * s).collect();
            let ws = wasserstein_1d(&sa, &sb).unwrap();
            prop_assert!((ws - s * w).abs() <= 1e-12 * (s * w).max(1e-300));
        }

        #[test]
        fn equal_length_shortcut((a, b) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        ))) {
            let w = wasserstein_1d(&a, &b).unwrap();
            prop_assert!((w - grid_free_w1(&a, &b)).abs() <= 1e-12);
        }

        #[test]
        fn quantile_enumerates_sorted(v in sample()) {
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            for m in 1..=v.len() {
                prop_assert_eq!(quantile(&v, m).unwrap(), sorted[m - 1]);
            }
        }
    }
}
