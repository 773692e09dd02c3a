//! Benchmark fixtures shared by the criterion targets.

use fairprune::convergence::gaussian_units;
use fairprune::{ActivationDump, LayerDiagnostics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded uniform values in [-10, 10).
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-10.0..10.0)).collect()
}

/// Two-class activations: `units` units, `per_class` samples per class.
pub fn activations(units: usize, per_class: usize) -> ActivationDump {
    let shifts: Vec<f64> = (0..units).map(|j| j as f64 / units as f64).collect();
    gaussian_units(&shifts, per_class, 1).expect("valid pool")
}

pub fn diagnostics(layers: usize, units: usize) -> Vec<LayerDiagnostics> {
    (0..layers)
        .map(|l| {
            let d = values(units, 2 * l as u64 + 1)
                .into_iter()
                .map(f64::abs)
                .collect();
            let e = values(units, 2 * l as u64 + 2);
            LayerDiagnostics::new(l as u32 + 1, d, e)
        })
        .collect()
}
