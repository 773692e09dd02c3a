//! Structured removal of hidden units from a [`MiniNet`]: rows and biases of
//! the pruned layer, and the matching fan-in columns of the layer above.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mininet::{Dense, MiniNet};
use crate::planner::{ParamLayout, PruningPlan};

#[derive(Debug, Error, PartialEq)]
pub enum SurgeryError {
    #[error("plan layer {layer} does not exist in a network with {hidden} hidden layers")]
    UnknownLayer { layer: u32, hidden: usize },
    #[error("plan targets layer {0}, the output layer")]
    OutputLayer(u32),
    #[error("plan layer {layer} has {plan} units, network has {net}")]
    ShapeMismatch { layer: u32, plan: usize, net: usize },
    #[error("layer {layer}: unit index {unit} out of range")]
    BadIndex { layer: u32, unit: usize },
    #[error("layer {0} would have no units left")]
    EmptyLayer(u32),
    #[error("layer {0} listed twice")]
    DuplicateLayer(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRemoval {
    pub layer: u32,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub layers: Vec<LayerRemoval>,
    pub params_before: usize,
    pub params_after: usize,
    pub pruning_rate: f64,
    pub flops_before: usize,
    pub flops_after: usize,
}

/// `Σ units·fan_in + units` over all layers.
pub fn count_params(net: &MiniNet) -> usize {
    net.param_count()
}

/// Dense multiply-adds of one forward pass, counted as 2 FLOPs each.
pub fn count_flops(net: &MiniNet) -> usize {
    net.layers.iter().map(|l| 2 * l.units * l.fan_in).sum()
}

pub fn layout_of(net: &MiniNet) -> ParamLayout {
    ParamLayout::dense(&net.sizes())
}

fn keep_mask(units: usize, remove: &[usize]) -> Vec<bool> {
    let mut keep = vec![true; units];
    for &r in remove {
        keep[r] = false;
    }
    keep
}

fn drop_rows(layer: &mut Dense, keep: &[bool]) {
    let fan_in = layer.fan_in;
    let mut weights = Vec::with_capacity(layer.weights.len());
    let mut bias = Vec::with_capacity(layer.bias.len());
    for (u, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        weights.extend_from_slice(&layer.weights[u * fan_in..(u + 1) * fan_in]);
        bias.push(layer.bias[u]);
    }
    layer.units = bias.len();
    layer.weights = weights;
    layer.bias = bias;
}

fn drop_columns(layer: &mut Dense, keep: &[bool]) {
    let fan_in = layer.fan_in;
    let new_fan_in = keep.iter().filter(|&&k| k).count();
    let mut weights = Vec::with_capacity(layer.units * new_fan_in);
    for u in 0..layer.units {
        let row = &layer.weights[u * fan_in..(u + 1) * fan_in];
        weights.extend(row.iter().zip(keep).filter(|(_, &k)| k).map(|(w, _)| *w));
    }
    layer.fan_in = new_fan_in;
    layer.weights = weights;
}

/// Removes the plan's units. Indices in the plan refer to the original network.
pub fn apply(net: &MiniNet, plan: &PruningPlan) -> Result<(MiniNet, SurgeryReport), SurgeryError> {
    let hidden = net.hidden_layers();
    let mut masks: Vec<Option<Vec<bool>>> = vec![None; hidden];
    for lp in &plan.layers {
        let id = lp.layer;
        if id as usize == hidden + 1 {
            return Err(SurgeryError::OutputLayer(id));
        }
        if id == 0 || id as usize > hidden {
            return Err(SurgeryError::UnknownLayer { layer: id, hidden });
        }
        let idx = id as usize - 1;
        let units = net.layers[idx].units;
        if lp.units != units {
            return Err(SurgeryError::ShapeMismatch {
                layer: id,
                plan: lp.units,
                net: units,
            });
        }
        if let Some(&unit) = lp.remove.iter().find(|&&u| u >= units) {
            return Err(SurgeryError::BadIndex { layer: id, unit });
        }
        if masks[idx].is_some() {
            return Err(SurgeryError::DuplicateLayer(id));
        }
        let keep = keep_mask(units, &lp.remove);
        if !keep.contains(&true) {
            return Err(SurgeryError::EmptyLayer(id));
        }
        masks[idx] = Some(keep);
    }

    let mut out = net.clone();
    let mut layers = Vec::new();
    for (idx, keep) in masks.iter().enumerate() {
        let Some(keep) = keep else { continue };
        let removed = keep.iter().filter(|&&k| !k).count();
        layers.push(LayerRemoval {
            layer: idx as u32 + 1,
            removed,
        });
        if removed == 0 {
            continue;
        }
        drop_rows(&mut out.layers[idx], keep);
        drop_columns(&mut out.layers[idx + 1], keep);
    }

    let params_before = count_params(net);
    let params_after = count_params(&out);
    let report = SurgeryReport {
        layers,
        params_before,
        params_after,
        pruning_rate: (params_before - params_after) as f64 / params_before as f64,
        flops_before: count_flops(net),
        flops_after: count_flops(&out),
    };
    Ok((out, report))
}
