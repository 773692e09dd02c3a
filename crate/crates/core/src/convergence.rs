//! Stability of utilization scores as the pruning-set size grows: stratified
//! resamples of an activation pool, dispersion per size, and scoring time.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::mean_sd;
use crate::diagnostics::{utilization_scores, DiagnosticsError, SwConfig};
use crate::dumpio::{ActivationDump, DumpError};
use crate::rng;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("sizes must be non-empty and strictly increasing")]
    BadSizes,
    #[error("need at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("size {n} exceeds the pool of {pool} samples")]
    SizeTooLarge { n: usize, pool: usize },
    #[error("size {n} cannot give each of {classes} classes 2 samples")]
    SizeTooSmall { n: usize, classes: usize },
    #[error("class {class} has only {count} samples in the pool")]
    SparseClass { class: u32, count: usize },
    #[error("unit {0} out of range")]
    BadUnit(usize),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub sizes: Vec<usize>,
    pub resamples: usize,
    pub seed: u64,
    pub sw: SwConfig,
    /// Units to report; all units when `None`.
    pub units: Option<Vec<usize>>,
    /// Run resamples one at a time with single-threaded scoring so timings
    /// are comparable across sizes.
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Median scoring wall time of one resample.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    pub resamples: usize,
    pub units: Vec<usize>,
    pub per_size: Vec<SizeStats>,
}

impl ConvergenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ConvergenceError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| ConvergenceError::Io(e.to_string());
        w.write_record(["n", "unit", "mean", "sd", "seconds"])
            .map_err(io)?;
        for s in &self.per_size {
            for (i, &unit) in self.units.iter().enumerate() {
                w.write_record([
                    s.n.to_string(),
                    unit.to_string(),
                    s.mean[i].to_string(),
                    s.sd[i].to_string(),
                    s.seconds.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| ConvergenceError::Io(e.to_string()))
    }
}

/// Per-class sample counts for a stratified draw of `n` rows: proportional
/// allocation by largest remainder, with a floor of 2 per class.
pub fn stratified_counts(class_sizes: &[usize], n: usize) -> Result<Vec<usize>, ConvergenceError> {
    let present: Vec<usize> = (0..class_sizes.len())
        .filter(|&c| class_sizes[c] > 0)
        .collect();
    let pool: usize = class_sizes.iter().sum();
    if n > pool {
        return Err(ConvergenceError::SizeTooLarge { n, pool });
    }
    if let Some(&c) = present.iter().find(|&&c| class_sizes[c] < 2) {
        return Err(ConvergenceError::SparseClass {
            class: c as u32,
            count: class_sizes[c],
        });
    }
    if n < 2 * present.len() {
        return Err(ConvergenceError::SizeTooSmall {
            n,
            classes: present.len(),
        });
    }
    let mut counts = vec![0usize; class_sizes.len()];
    let mut rema = Vec::new();
    for &c in &present {
        let exact = n as f64 * class_sizes[c] as f64 / pool as f64;
        counts[c] = (exact.floor() as usize).clamp(2, class_sizes[c]);
        rema.push((exact - exact.floor(), c));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut total: usize = counts.iter().sum();
    // Raising to the floor can overshoot; take back from the largest classes.
    while total > n {
        let c = *present
            .iter()
            .filter(|&&c| counts[c] > 2)
            .max_by_key(|&&c| (counts[c], std::cmp::Reverse(c)))
            .expect("n ≥ 2·classes");
        counts[c] -= 1;
        total -= 1;
    }
    let mut i = 0;
    while total < n {
        let c = rema[i % rema.len()].1;
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
            total += 1;
        }
        i += 1;
    }
    Ok(counts)
}

/// Row indices of a stratified draw without replacement.
pub fn stratified_sample(
    labels: &[u32],
    n: usize,
    r: &mut rng::Rng,
) -> Result<Vec<usize>, ConvergenceError> {
    let k = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, n)?;
    let mut rows = Vec::with_capacity(n);
    for (members, &count) in by_class.iter_mut().zip(&counts) {
        let (chosen, _) = members.partial_shuffle(r, count);
        rows.extend_from_slice(chosen);
    }
    rows.sort_unstable();
    Ok(rows)
}

/// Two-class pool of 1-D units: class 0 ~ N(0,1), class 1 ~ N(shifts[j],1).
/// The population utilization score of unit `j` is `|shifts[j]|`.
pub fn gaussian_units(
    shifts: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<ActivationDump, DumpError> {
    let mut r = rng::stream(seed, "convergence/gaussian");
    let units = shifts.len();
    let mut data = Vec::with_capacity(2 * per_class * units);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let class = (i % 2) as u32;
        for &s in shifts {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push((z + if class == 1 { s } else { 0.0 }) as f32);
        }
        labels.push(class);
    }
    ActivationDump::new(0, units, 1, data, labels)
}

pub fn run_convergence(
    pool: &ActivationDump,
    config: &ConvergenceConfig,
) -> Result<ConvergenceReport, ConvergenceError> {
    if config.sizes.is_empty() || config.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConvergenceError::BadSizes);
    }
    if config.resamples < 2 {
        return Err(ConvergenceError::TooFewResamples(config.resamples));
    }
    let units = config
        .units
        .clone()
        .unwrap_or_else(|| (0..pool.units).collect());
    if let Some(&u) = units.iter().find(|&&u| u >= pool.units) {
        return Err(ConvergenceError::BadUnit(u));
    }
    // Fail before any scoring if a size cannot be stratified.
    let k = pool.labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut class_sizes = vec![0; k];
    pool.labels
        .iter()
        .for_each(|&l| class_sizes[l as usize] += 1);
    for &n in &config.sizes {
        stratified_counts(&class_sizes, n)?;
    }

    let base = rng::stream_seed(config.seed, "convergence/resamples");
    let mut per_size = Vec::with_capacity(config.sizes.len());
    for (si, &n) in config.sizes.iter().enumerate() {
        let size_seed = rng::substream_seed(base, si as u64);
        let one = |rep: usize, parallel: bool| -> Result<(Vec<f64>, f64), ConvergenceError> {
            let mut r = rng::rng_from(rng::substream_seed(size_seed, rep as u64));
            let rows = stratified_sample(&pool.labels, n, &mut r)?;
            let sub = pool.select_samples(&rows);
            let start = Instant::now();
            let scores = utilization_scores(&sub, &config.sw, parallel)?;
            let secs = start.elapsed().as_secs_f64();
            Ok((units.iter().map(|&u| scores[u]).collect(), secs))
        };
        let runs: Vec<(Vec<f64>, f64)> = if config.sequential {
            (0..config.resamples)
                .map(|rep| one(rep, false))
                .collect::<Result<_, _>>()?
        } else {
            (0..config.resamples)
                .into_par_iter()
                .map(|rep| one(rep, false))
                .collect::<Result<_, _>>()?
        };
        let (mut mean, mut sd) = (Vec::new(), Vec::new());
        for i in 0..units.len() {
            let col: Vec<f64> = runs.iter().map(|(s, _)| s[i]).collect();
            let (m, s) = mean_sd(&col);
            mean.push(m);
            sd.push(s);
        }
        let mut times: Vec<f64> = runs.iter().map(|r| r.1).collect();
        times.sort_by(f64::total_cmp);
        per_size.push(SizeStats {
            n,
            mean,
            sd,
            seconds: times[times.len() / 2],
        });
    }
    Ok(ConvergenceReport {
        sizes: config.sizes.clone(),
        resamples: config.resamples,
        units,
        per_size,
    })
}
