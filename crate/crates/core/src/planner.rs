//! Tolerance-of-Difference (ToD) statistic and layer-wise prune-count selection.
//!
//! For a layer with utilization scores `D` and reconstruction errors `I`:
//!
//! * `D_idx(m) = {k : d_k ≤ m-th smallest of D}` (empty for `m = 0`),
//! * `I_idx(m) = {k : e_k ≥ m-th largest of I}` (empty for `m = 0`),
//! * `ToD(m) = |D_idx(m) ∩ I_idx(m)| / max(|D_idx(m)|, 1)`.
//!
//! Membership is by value comparison, so tied scores can make either set larger
//! than `m`. The selected count is the largest `m` with `ToD(m) ≤ α`, found by
//! a full scan because ToD is not monotone in `m`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{DiagnosticsError, LayerDiagnostics, ScoreReport};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("prune count {m} out of range for a layer of {units} units")]
    CountOutOfRange { m: usize, units: usize },
    #[error("ToD level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("no ToD levels given")]
    NoLevels,
    #[error("report has no layers")]
    EmptyReport,
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

pub fn check_level(alpha: f64) -> Result<(), PlanError> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PlanError::InvalidLevel(alpha))
    }
}

/// Indices of the `m` lowest utilization scores (by value, ties included).
pub fn low_utilization_set(utilization: &[f64], m: usize) -> Result<Vec<usize>, PlanError> {
    let q = stats::quantile(utilization, m).map_err(|_| PlanError::CountOutOfRange {
        m,
        units: utilization.len(),
    })?;
    Ok((0..utilization.len())
        .filter(|&k| utilization[k] <= q)
        .collect())
}

/// Indices of the `m` highest reconstruction errors (by value, ties included).
pub fn high_error_set(reconstruction: &[f64], m: usize) -> Result<Vec<usize>, PlanError> {
    let units = reconstruction.len();
    if m > units {
        return Err(PlanError::CountOutOfRange { m, units });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    // m-th largest is the (J − m + 1)-th smallest.
    let q = stats::quantile(reconstruction, units - m + 1).expect("rank within range");
    Ok((0..units).filter(|&k| reconstruction[k] >= q).collect())
}

fn tod_of_sets(d_idx: &[usize], i_idx: &[usize]) -> f64 {
    let common = d_idx
        .iter()
        .filter(|k| i_idx.binary_search(k).is_ok())
        .count();
    common as f64 / d_idx.len().max(1) as f64
}

pub fn tod(diag: &LayerDiagnostics, m: usize) -> Result<f64, PlanError> {
    let d_idx = low_utilization_set(&diag.utilization, m)?;
    let i_idx = high_error_set(&diag.reconstruction, m)?;
    Ok(tod_of_sets(&d_idx, &i_idx))
}

/// ToD(m) for m = 0..=J, plus |D_idx(m)|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TodCurve {
    pub layer: u32,
    pub values: Vec<f64>,
    pub removal_sizes: Vec<usize>,
}

impl TodCurve {
    pub fn compute(diag: &LayerDiagnostics) -> TodCurve {
        let units = diag.utilization.len();
        let mut d_sorted = diag.utilization.clone();
        let mut e_sorted = diag.reconstruction.clone();
        stats::sort_values(&mut d_sorted);
        stats::sort_values(&mut e_sorted);
        let mut values = Vec::with_capacity(units + 1);
        let mut removal_sizes = Vec::with_capacity(units + 1);
        values.push(0.0);
        removal_sizes.push(0);
        for m in 1..=units {
            let d_cut = d_sorted[m - 1];
            let e_cut = e_sorted[units - m];
            let mut size = 0usize;
            let mut common = 0usize;
            for (d, e) in diag.utilization.iter().zip(&diag.reconstruction) {
                if *d <= d_cut {
                    size += 1;
                    if *e >= e_cut {
                        common += 1;
                    }
                }
            }
            values.push(common as f64 / size.max(1) as f64);
            removal_sizes.push(size);
        }
        TodCurve {
            layer: diag.layer_id,
            values,
            removal_sizes,
        }
    }

    pub fn units(&self) -> usize {
        self.values.len() - 1
    }

    /// Largest m in 1..=J with ToD(m) ≤ α that leaves at least one unit; 0 if none.
    pub fn select(&self, alpha: f64) -> usize {
        let units = self.units();
        (1..=units)
            .rev()
            .find(|&m| self.values[m] <= alpha && self.removal_sizes[m] < units)
            .unwrap_or(0)
    }
}

pub fn select_m(diag: &LayerDiagnostics, alpha: f64) -> Result<usize, PlanError> {
    check_level(alpha)?;
    diag.validate()?;
    Ok(TodCurve::compute(diag).select(alpha))
}

/// Shape of one layer for parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: u32,
    pub units: usize,
    /// Weights per (unit, input unit) pair: 1 for dense rows, k·k for conv filters.
    #[serde(default = "one")]
    pub weights_per_input: usize,
}

fn one() -> usize {
    1
}

/// A feed-forward chain of layers. The last layer is the output layer and is
/// never pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub input_dim: usize,
    pub layers: Vec<LayerShape>,
}

impl ParamLayout {
    /// Dense chain `[p, h₁, …, h_L, K]` with hidden layer ids `1..=L`.
    pub fn dense(sizes: &[usize]) -> ParamLayout {
        ParamLayout {
            input_dim: sizes[0],
            layers: sizes[1..]
                .iter()
                .enumerate()
                .map(|(i, &units)| LayerShape {
                    layer: i as u32 + 1,
                    units,
                    weights_per_input: 1,
                })
                .collect(),
        }
    }

    fn position(&self, layer: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.layer == layer)
    }

    pub fn is_output(&self, layer: u32) -> bool {
        self.layers.last().is_some_and(|l| l.layer == layer)
    }

    pub fn total_params(&self) -> usize {
        self.params_after(&BTreeMap::new())
    }

    /// Parameter count after removing `removed[layer]` units from each layer.
    pub fn params_after(&self, removed: &BTreeMap<u32, usize>) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for l in &self.layers {
            let units = l.units - removed.get(&l.layer).copied().unwrap_or(0);
            total += units * (fan_in * l.weights_per_input + 1);
            fan_in = units;
        }
        total
    }

    /// Fraction of parameters removed, counting rows, biases and the fan-in
    /// columns they feed in the next layer.
    pub fn pruning_rate(&self, removed: &BTreeMap<u32, usize>) -> f64 {
        let before = self.total_params();
        let after = self.params_after(removed);
        (before - after) as f64 / before as f64
    }

    fn check_prunable(&self, layer: u32, units: usize, remove: usize) -> Result<(), PlanError> {
        let pos = self
            .position(layer)
            .ok_or_else(|| PlanError::Layout(format!("layer {layer} not in layout")))?;
        if pos + 1 == self.layers.len() {
            return Err(PlanError::Layout(format!(
                "layer {layer} is the output layer"
            )));
        }
        if self.layers[pos].units != units {
            return Err(PlanError::Layout(format!(
                "layer {layer}: layout has {} units, scores have {units}",
                self.layers[pos].units
            )));
        }
        if remove >= units {
            return Err(PlanError::Layout(format!(
                "layer {layer}: removing {remove} of {units} units leaves none"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: u32,
    #[serde(rename = "J")]
    pub units: usize,
    pub m_hat: usize,
    pub remove: Vec<usize>,
    pub achieved_tod: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub tod_level: Option<f64>,
    pub layers: Vec<LayerPlan>,
    pub pruning_rate: f64,
}

impl PruningPlan {
    /// Assembles a plan from per-layer removal sets (original unit indices).
    pub fn from_removals(
        layout: &ParamLayout,
        tod_level: Option<f64>,
        mut layers: Vec<LayerPlan>,
    ) -> Result<PruningPlan, PlanError> {
        layers.sort_by_key(|l| l.layer);
        let mut removed = BTreeMap::new();
        for l in &mut layers {
            l.remove.sort_unstable();
            l.remove.dedup();
            if let Some(&bad) = l.remove.iter().find(|&&k| k >= l.units) {
                return Err(PlanError::Layout(format!(
                    "layer {}: unit {bad} out of range",
                    l.layer
                )));
            }
            layout.check_prunable(l.layer, l.units, l.remove.len())?;
            if removed.insert(l.layer, l.remove.len()).is_some() {
                return Err(PlanError::Layout(format!("layer {} listed twice", l.layer)));
            }
        }
        Ok(PruningPlan {
            tod_level,
            pruning_rate: layout.pruning_rate(&removed),
            layers,
        })
    }

    pub fn removed_counts(&self) -> BTreeMap<u32, usize> {
        self.layers
            .iter()
            .map(|l| (l.layer, l.remove.len()))
            .collect()
    }

    pub fn layer(&self, id: u32) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.remove.is_empty())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn plan_layer(diag: &LayerDiagnostics, alpha: f64) -> LayerPlan {
    let curve = TodCurve::compute(diag);
    let m_hat = curve.select(alpha);
    let remove = low_utilization_set(&diag.utilization, m_hat).expect("m_hat ≤ J");
    LayerPlan {
        layer: diag.layer_id,
        units: diag.units,
        m_hat,
        remove,
        achieved_tod: Some(curve.values[m_hat]),
    }
}

pub fn build_plan(
    report: &ScoreReport,
    alpha: f64,
    layout: &ParamLayout,
) -> Result<PruningPlan, PlanError> {
    check_level(alpha)?;
    if report.layers.is_empty() {
        return Err(PlanError::EmptyReport);
    }
    report.validate()?;
    let layers = report.layers.iter().map(|d| plan_layer(d, alpha)).collect();
    PruningPlan::from_removals(layout, Some(alpha), layers)
}

/// One plan per level, reusing the same scores.
pub fn sweep(
    report: &ScoreReport,
    alphas: &[f64],
    layout: &ParamLayout,
) -> Result<Vec<PruningPlan>, PlanError> {
    if alphas.is_empty() {
        return Err(PlanError::NoLevels);
    }
    for &a in alphas {
        check_level(a)?;
    }
    if report.layers.is_empty() {
        return Err(PlanError::EmptyReport);
    }
    report.validate()?;
    let curves: Vec<TodCurve> = report.layers.iter().map(TodCurve::compute).collect();
    alphas
        .iter()
        .map(|&alpha| {
            let layers = report
                .layers
                .iter()
                .zip(&curves)
                .map(|(diag, curve)| {
                    let m_hat = curve.select(alpha);
                    LayerPlan {
                        layer: diag.layer_id,
                        units: diag.units,
                        m_hat,
                        remove: low_utilization_set(&diag.utilization, m_hat).expect("m_hat ≤ J"),
                        achieved_tod: Some(curve.values[m_hat]),
                    }
                })
                .collect();
            PruningPlan::from_removals(layout, Some(alpha), layers)
        })
        .collect()
}
