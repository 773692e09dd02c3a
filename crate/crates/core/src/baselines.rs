//! Comparator pruning strategies and a seeded experiment runner reporting
//! one-shot and fine-tuned accuracy per trial.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::ScoreReport;
use crate::mininet::{evaluate, finetune, Dataset, MiniNet, NetError};
use crate::planner::{build_plan, LayerPlan, ParamLayout, PlanError, PruningPlan};
use crate::rng;
use crate::surgery::{apply, layout_of, SurgeryError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("rate must be in [0, 1), got {0}")]
    RateOutOfRange(f64),
    #[error("layer {layer}: removing {remove} of {units} units leaves no survivor")]
    NoSurvivor {
        layer: u32,
        units: usize,
        remove: usize,
    },
    #[error("{method} needs {field}")]
    MissingField { method: Method, field: &'static str },
    #[error("{method} does not take {field}")]
    ExtraField { method: Method, field: &'static str },
    #[error("trials must be positive")]
    NoTrials,
    #[error("{0} requires a score report")]
    NeedsReport(Method),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fair,
    L1,
    RandomUniform,
    RandomTod,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fair => "fair",
            Method::L1 => "l1",
            Method::RandomUniform => "random_uniform",
            Method::RandomTod => "random_tod",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, Method::RandomUniform | Method::RandomTod)
    }

    fn uses_rate(self) -> bool {
        matches!(self, Method::L1 | Method::RandomUniform)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fair" => Ok(Method::Fair),
            "l1" => Ok(Method::L1),
            "random_uniform" => Ok(Method::RandomUniform),
            "random_tod" => Ok(Method::RandomTod),
            _ => Err(format!("unknown method {s:?}")),
        }
    }
}

/// `rate` for `l1`/`random_uniform`, `alpha` for `fair`/`random_tod`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: Method,
    pub rate: Option<f64>,
    pub alpha: Option<f64>,
}

impl BaselineSpec {
    pub fn with_rate(method: Method, rate: f64) -> Self {
        BaselineSpec {
            method,
            rate: Some(rate),
            alpha: None,
        }
    }

    pub fn with_alpha(method: Method, alpha: f64) -> Self {
        BaselineSpec {
            method,
            rate: None,
            alpha: Some(alpha),
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let m = self.method;
        let (need, extra, value) = if m.uses_rate() {
            ("rate", "alpha", self.rate.zip(self.alpha.map(|_| ())))
        } else {
            ("alpha", "rate", self.alpha.zip(self.rate.map(|_| ())))
        };
        if value.is_some() {
            return Err(BaselineError::ExtraField {
                method: m,
                field: extra,
            });
        }
        match (m.uses_rate(), self.rate, self.alpha) {
            (true, Some(r), _) => check_rate(r),
            (false, _, Some(a)) => Ok(crate::planner::check_level(a)?),
            _ => Err(BaselineError::MissingField {
                method: m,
                field: need,
            }),
        }
    }

    pub fn rate_or_alpha(&self) -> f64 {
        self.rate.or(self.alpha).unwrap_or(f64::NAN)
    }
}

fn check_rate(rate: f64) -> Result<(), BaselineError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(BaselineError::RateOutOfRange(rate))
    }
}

/// `⌊rate·J⌋`, tolerant of representation error such as `0.3 · 10`.
pub fn uniform_count(rate: f64, units: usize) -> usize {
    (rate * units as f64 + 1e-9).floor() as usize
}

fn counted_plan(
    layout: &ParamLayout,
    tod_level: Option<f64>,
    removals: Vec<(u32, usize, Vec<usize>)>,
) -> Result<PruningPlan, BaselineError> {
    let mut layers = Vec::with_capacity(removals.len());
    for (layer, units, remove) in removals {
        if remove.len() >= units {
            return Err(BaselineError::NoSurvivor {
                layer,
                units,
                remove: remove.len(),
            });
        }
        layers.push(LayerPlan {
            layer,
            units,
            m_hat: remove.len(),
            remove,
            achieved_tod: None,
        });
    }
    Ok(PruningPlan::from_removals(layout, tod_level, layers)?)
}

/// Per hidden layer, removes the `⌊rate·J⌋` units with the smallest ℓ1 row norm
/// (bias excluded), ties going to the lower index.
pub fn l1_plan(net: &MiniNet, rate: f64) -> Result<PruningPlan, BaselineError> {
    check_rate(rate)?;
    let removals = net.layers[..net.hidden_layers()]
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let norms: Vec<f64> = (0..layer.units)
                .map(|u| layer.row(u).iter().map(|w| w.abs()).sum())
                .collect();
            let mut order: Vec<usize> = (0..layer.units).collect();
            order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
            order.truncate(uniform_count(rate, layer.units));
            (l as u32 + 1, layer.units, order)
        })
        .collect();
    counted_plan(&layout_of(net), None, removals)
}

fn sample_units(r: &mut rng::Rng, units: usize, count: usize) -> Vec<usize> {
    index::sample(r, units, count).into_vec()
}

/// `⌊rate·J⌋` distinct units per hidden layer, drawn uniformly.
pub fn random_uniform_plan(
    net: &MiniNet,
    rate: f64,
    seed: u64,
) -> Result<PruningPlan, BaselineError> {
    check_rate(rate)?;
    let mut r = rng::rng_from(seed);
    let removals = net.layers[..net.hidden_layers()]
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let k = uniform_count(rate, layer.units);
            (
                l as u32 + 1,
                layer.units,
                sample_units(&mut r, layer.units, k),
            )
        })
        .collect();
    counted_plan(&layout_of(net), None, removals)
}

/// Same per-layer removal counts as the FAIR plan at `alpha`, random membership.
pub fn random_tod_plan(
    report: &ScoreReport,
    alpha: f64,
    layout: &ParamLayout,
    seed: u64,
) -> Result<PruningPlan, BaselineError> {
    let fair = build_plan(report, alpha, layout)?;
    let mut r = rng::rng_from(seed);
    let removals = fair
        .layers
        .iter()
        .map(|l| {
            (
                l.layer,
                l.units,
                sample_units(&mut r, l.units, l.remove.len()),
            )
        })
        .collect();
    counted_plan(layout, Some(alpha), removals)
}

/// Uniform rates whose realized PRs bracket a target PR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrBracket {
    pub lo_rate: f64,
    pub lo_pr: f64,
    pub hi_rate: f64,
    pub hi_pr: f64,
}

impl PrBracket {
    /// Linear interpolation in PR of a per-rate quantity to `target`.
    pub fn interpolate(&self, lo_value: f64, hi_value: f64, target: f64) -> f64 {
        if self.hi_pr == self.lo_pr {
            return lo_value;
        }
        let t = ((target - self.lo_pr) / (self.hi_pr - self.lo_pr)).clamp(0.0, 1.0);
        lo_value + t * (hi_value - lo_value)
    }
}

fn uniform_pr(layout: &ParamLayout, rate: f64) -> f64 {
    let hidden = &layout.layers[..layout.layers.len() - 1];
    let removed = hidden
        .iter()
        .map(|l| (l.layer, uniform_count(rate, l.units)))
        .collect();
    layout.pruning_rate(&removed)
}

fn uniform_breakpoints(layout: &ParamLayout) -> Vec<f64> {
    let mut rates = vec![0.0];
    for l in &layout.layers[..layout.layers.len() - 1] {
        rates.extend((1..l.units).map(|k| k as f64 / l.units as f64));
    }
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    rates
}

/// The uniform rate whose realized PR is closest to `target` (lower rate on ties).
/// Candidates are the breakpoints `k/J` of every hidden layer.
pub fn matched_uniform_rate(layout: &ParamLayout, target: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for c in uniform_breakpoints(layout) {
        let gap = (uniform_pr(layout, c) - target).abs();
        if gap < best.0 {
            best = (gap, c);
        }
    }
    best.1
}

/// The largest breakpoint rate with PR ≤ `target` and the smallest with
/// PR ≥ `target`; both ends coincide when a rate hits the target exactly or
/// the target lies beyond the reachable range.
pub fn bracket_uniform_rate(layout: &ParamLayout, target: f64) -> PrBracket {
    let points: Vec<(f64, f64)> = uniform_breakpoints(layout)
        .into_iter()
        .map(|r| (r, uniform_pr(layout, r)))
        .collect();
    let lo = points
        .iter()
        .rev()
        .find(|p| p.1 <= target)
        .copied()
        .unwrap_or(points[0]);
    let hi = points
        .iter()
        .find(|p| p.1 >= target)
        .copied()
        .unwrap_or(*points.last().unwrap());
    PrBracket {
        lo_rate: lo.0,
        lo_pr: lo.1,
        hi_rate: hi.0,
        hi_pr: hi.1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub trials: usize,
    pub seed: u64,
    pub ft_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub method: Method,
    pub rate_or_alpha: f64,
    pub trial: usize,
    #[serde(rename = "PR")]
    pub pr: f64,
    pub os_acc: f64,
    pub ft10_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub rate_or_alpha: f64,
    pub trials: usize,
    pub pr_mean: f64,
    pub os_mean: f64,
    pub os_sd: f64,
    pub ft_mean: f64,
    pub ft_sd: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn plan_for_trial(
    net: &MiniNet,
    report: Option<&ScoreReport>,
    spec: &BaselineSpec,
    trial_seed: u64,
) -> Result<PruningPlan, BaselineError> {
    spec.validate()?;
    let layout = layout_of(net);
    let need_report = || report.ok_or(BaselineError::NeedsReport(spec.method));
    match spec.method {
        Method::Fair => Ok(build_plan(need_report()?, spec.alpha.unwrap(), &layout)?),
        Method::L1 => l1_plan(net, spec.rate.unwrap()),
        Method::RandomUniform => random_uniform_plan(net, spec.rate.unwrap(), trial_seed),
        Method::RandomTod => {
            random_tod_plan(need_report()?, spec.alpha.unwrap(), &layout, trial_seed)
        }
    }
}

/// Seed of trial `trial`; identical whether trials run in parallel or not.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    rng::substream_seed(rng::stream_seed(seed, "baselines"), trial as u64)
}

fn run_trial(
    net: &MiniNet,
    data: &Dataset,
    report: Option<&ScoreReport>,
    spec: &BaselineSpec,
    config: &CompareConfig,
    trial: usize,
) -> Result<TrialRow, BaselineError> {
    let plan = plan_for_trial(net, report, spec, trial_seed(config.seed, trial))?;
    let (pruned, surgery) = apply(net, &plan)?;
    let os_acc = evaluate(&pruned, &data.test)?.accuracy;
    let ft10_acc = if config.ft_epochs == 0 {
        os_acc
    } else {
        let tuned = finetune(
            &pruned,
            &data.train,
            config.ft_epochs,
            config.lr,
            config.batch_size,
        )?;
        evaluate(&tuned, &data.test)?.accuracy
    };
    Ok(TrialRow {
        method: spec.method,
        rate_or_alpha: spec.rate_or_alpha(),
        trial,
        pr: surgery.pruning_rate,
        os_acc,
        ft10_acc,
    })
}

/// Runs every spec for `config.trials` trials. Deterministic methods are
/// evaluated once and repeated across trial rows.
pub fn run_comparison(
    net: &MiniNet,
    data: &Dataset,
    report: Option<&ScoreReport>,
    specs: &[BaselineSpec],
    config: &CompareConfig,
) -> Result<Vec<TrialRow>, BaselineError> {
    if config.trials == 0 {
        return Err(BaselineError::NoTrials);
    }
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let runs = if s.method.is_random() {
                config.trials
            } else {
                1
            };
            (0..runs).map(move |t| (i, t))
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, t)| run_trial(net, data, report, &specs[i], config, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(specs.len() * config.trials);
    let mut it = results.into_iter();
    for s in specs {
        if s.method.is_random() {
            rows.extend(it.by_ref().take(config.trials));
        } else {
            let row = it.next().expect("one result per deterministic spec");
            rows.extend((0..config.trials).map(|trial| TrialRow {
                trial,
                ..row.clone()
            }));
        }
    }
    Ok(rows)
}

/// One summary per spec, in spec order.
pub fn summarize(rows: &[TrialRow]) -> Vec<Summary> {
    let mut keys: Vec<(Method, u64)> = Vec::new();
    for r in rows {
        let k = (r.method, r.rate_or_alpha.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, bits)| {
            let group: Vec<&TrialRow> = rows
                .iter()
                .filter(|r| r.method == method && r.rate_or_alpha.to_bits() == bits)
                .collect();
            let col = |f: fn(&TrialRow) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (os_mean, os_sd) = mean_sd(&col(|r| r.os_acc));
            let (ft_mean, ft_sd) = mean_sd(&col(|r| r.ft10_acc));
            Summary {
                method,
                rate_or_alpha: f64::from_bits(bits),
                trials: group.len(),
                pr_mean: mean_sd(&col(|r| r.pr)).0,
                os_mean,
                os_sd,
                ft_mean,
                ft_sd,
            }
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[TrialRow], out: W) -> Result<(), BaselineError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| BaselineError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| BaselineError::Io(e.to_string()))
}
