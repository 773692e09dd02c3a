//! Per-layer unit diagnostics: utilization scores and reconstruction errors.
//!
//! A unit's utilization score is the largest Wasserstein distance between its
//! class-conditional output distributions over all unordered class pairs. Its
//! reconstruction error is the first-order Taylor estimate of the loss change
//! when the unit's weights and bias are removed:
//! `e_j = (G_w[j]·w_j + G_b[j]·b_j) / n`, with `G` the gradient sums over the
//! pruning set.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dumpio::{
    dump_file_name, read_dump, write_dump, ActivationDump, Dump, DumpError, DumpKind, GradientDump,
    ParamDump,
};
use crate::stats::{self, DEFAULT_PROJECTIONS};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("class {class} has {count} sample(s); at least 2 are required")]
    SparseClass { class: u32, count: usize },
    #[error("at least 2 classes are required, found {0}")]
    TooFewClasses(usize),
    #[error("layer id mismatch: expected {expected}, {kind:?} dump has {found}")]
    LayerMismatch {
        expected: u32,
        found: u32,
        kind: DumpKind,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gradient dump records zero samples")]
    NoSamples,
    #[error("non-finite score for unit {0}")]
    NonFinite(usize),
    #[error("duplicate layer id {0} in report")]
    DuplicateLayer(u32),
}

/// Sliced-Wasserstein settings for vector-valued units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwConfig {
    pub projections: usize,
    pub seed: u64,
}

impl Default for SwConfig {
    fn default() -> Self {
        SwConfig {
            projections: DEFAULT_PROJECTIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    /// Signed first-order estimate, as defined.
    #[default]
    Signed,
    /// `|e_j|`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreConfig {
    pub sw: SwConfig,
    pub error_mode: ErrorMode,
    /// Evaluate units on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    #[serde(rename = "layer")]
    pub layer_id: u32,
    #[serde(rename = "J")]
    pub units: usize,
    pub utilization: Vec<f64>,
    pub reconstruction: Vec<f64>,
    #[serde(rename = "n", default)]
    pub sample_count: usize,
    #[serde(rename = "K", default)]
    pub class_count: usize,
}

impl LayerDiagnostics {
    pub fn new(layer_id: u32, utilization: Vec<f64>, reconstruction: Vec<f64>) -> Self {
        LayerDiagnostics {
            layer_id,
            units: utilization.len(),
            utilization,
            reconstruction,
            sample_count: 0,
            class_count: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.utilization.len() != self.units || self.reconstruction.len() != self.units {
            return Err(DiagnosticsError::Shape(format!(
                "layer {}: J = {} but {} utilization / {} reconstruction scores",
                self.layer_id,
                self.units,
                self.utilization.len(),
                self.reconstruction.len()
            )));
        }
        for (j, (&u, &e)) in self
            .utilization
            .iter()
            .zip(&self.reconstruction)
            .enumerate()
        {
            if !u.is_finite() || !e.is_finite() || u < 0.0 {
                return Err(DiagnosticsError::NonFinite(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    #[serde(default)]
    pub dumps: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub num_projections: usize,
    #[serde(default)]
    pub error_mode: ErrorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    /// Parameter layout of the network the dumps came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<crate::planner::ParamLayout>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub layers: Vec<LayerDiagnostics>,
    #[serde(default)]
    pub meta: ReportMeta,
}

impl ScoreReport {
    pub fn new(
        mut layers: Vec<LayerDiagnostics>,
        meta: ReportMeta,
    ) -> Result<Self, DiagnosticsError> {
        layers.sort_by_key(|l| l.layer_id);
        let report = ScoreReport { layers, meta };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.layer_id) {
                return Err(DiagnosticsError::DuplicateLayer(l.layer_id));
            }
            l.validate()?;
        }
        Ok(())
    }

    pub fn layer(&self, id: u32) -> Option<&LayerDiagnostics> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Sample indices grouped by class, only for classes that occur.
fn class_groups(acts: &ActivationDump) -> Result<Vec<Vec<usize>>, DiagnosticsError> {
    let k = acts.class_count();
    let mut groups = vec![Vec::new(); k];
    for (i, &label) in acts.labels.iter().enumerate() {
        groups[label as usize].push(i);
    }
    for (class, g) in groups.iter().enumerate() {
        if g.len() == 1 {
            return Err(DiagnosticsError::SparseClass {
                class: class as u32,
                count: 1,
            });
        }
    }
    groups.retain(|g| !g.is_empty());
    if groups.len() < 2 {
        return Err(DiagnosticsError::TooFewClasses(groups.len()));
    }
    Ok(groups)
}

/// Max over unordered pairs of W₁ between pre-sorted per-class samples.
fn max_pairwise(sorted: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for k1 in 1..sorted.len() {
        for k2 in 0..k1 {
            best = best.max(stats::wasserstein_sorted(&sorted[k1], &sorted[k2]));
        }
    }
    best
}

fn unit_score(acts: &ActivationDump, groups: &[Vec<usize>], unit: usize, sw: &SwConfig) -> f64 {
    if acts.dim == 1 {
        let sorted: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| {
                let mut v: Vec<f64> = g
                    .iter()
                    .map(|&s| acts.unit_output(s, unit)[0] as f64)
                    .collect();
                stats::sort_values(&mut v);
                v
            })
            .collect();
        return max_pairwise(&sorted);
    }
    // Vector outputs: per-pair mean over shared directions, then max over pairs.
    let dirs = stats::random_directions(acts.dim, sw.projections, sw.seed);
    let pairs = groups.len() * (groups.len() - 1) / 2;
    let mut sums = vec![0.0f64; pairs];
    for t in &dirs {
        let projected: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| {
                let mut v: Vec<f64> = g
                    .iter()
                    .map(|&s| {
                        acts.unit_output(s, unit)
                            .iter()
                            .zip(t)
                            .map(|(&x, &w)| x as f64 * w)
                            .sum()
                    })
                    .collect();
                stats::sort_values(&mut v);
                v
            })
            .collect();
        let mut p = 0;
        for k1 in 1..projected.len() {
            for k2 in 0..k1 {
                sums[p] += stats::wasserstein_sorted(&projected[k1], &projected[k2]);
                p += 1;
            }
        }
    }
    sums.into_iter()
        .map(|s| s / sw.projections as f64)
        .fold(0.0, f64::max)
}

/// Utilization score of every unit in `acts`.
pub fn utilization_scores(
    acts: &ActivationDump,
    sw: &SwConfig,
    parallel: bool,
) -> Result<Vec<f64>, DiagnosticsError> {
    acts.validate()
        .map_err(|e| DiagnosticsError::Shape(e.to_string()))?;
    if acts.dim > 1 && sw.projections == 0 {
        return Err(DiagnosticsError::Shape(
            "sliced Wasserstein needs at least one projection".into(),
        ));
    }
    let groups = class_groups(acts)?;
    let scores = if parallel {
        (0..acts.units)
            .into_par_iter()
            .map(|j| unit_score(acts, &groups, j, sw))
            .collect()
    } else {
        (0..acts.units)
            .map(|j| unit_score(acts, &groups, j, sw))
            .collect()
    };
    Ok(scores)
}

/// Reconstruction error of every unit from summed gradients and parameters.
pub fn reconstruction_errors(
    wgrad: &GradientDump,
    bgrad: &GradientDump,
    w: &ParamDump,
    b: &ParamDump,
) -> Result<Vec<f64>, DiagnosticsError> {
    let expect_kind = |found: DumpKind, want: DumpKind| {
        if found == want {
            Ok(())
        } else {
            Err(DiagnosticsError::Shape(format!(
                "expected a {want:?} dump, got {found:?}"
            )))
        }
    };
    expect_kind(wgrad.kind, DumpKind::WeightGradient)?;
    expect_kind(bgrad.kind, DumpKind::BiasGradient)?;
    expect_kind(w.kind, DumpKind::Weights)?;
    expect_kind(b.kind, DumpKind::Biases)?;
    for (kind, r) in [
        (wgrad.kind, wgrad.validate()),
        (bgrad.kind, bgrad.validate()),
        (w.kind, w.validate()),
        (b.kind, b.validate()),
    ] {
        r.map_err(|e| DiagnosticsError::Shape(format!("{kind:?}: {e}")))?;
    }
    let units = w.units;
    if wgrad.units != units || bgrad.units != units || b.units != units {
        return Err(DiagnosticsError::Shape(format!(
            "unit counts differ: wgrad {}, bgrad {}, weights {}, biases {}",
            wgrad.units, bgrad.units, units, b.units
        )));
    }
    if wgrad.dim != w.dim {
        return Err(DiagnosticsError::Shape(format!(
            "weight-gradient rows have {} entries, weight rows have {}",
            wgrad.dim, w.dim
        )));
    }
    if wgrad.sample_count == 0 || bgrad.sample_count == 0 {
        return Err(DiagnosticsError::NoSamples);
    }
    if wgrad.sample_count != bgrad.sample_count {
        return Err(DiagnosticsError::Shape(format!(
            "gradient sample counts differ: {} vs {}",
            wgrad.sample_count, bgrad.sample_count
        )));
    }
    let n = wgrad.sample_count as f64;
    Ok((0..units)
        .map(|j| {
            let dot: f64 = wgrad
                .row(j)
                .iter()
                .zip(w.row(j))
                .map(|(&g, &x)| g as f64 * x as f64)
                .sum();
            (dot + bgrad.data[j] as f64 * b.data[j] as f64) / n
        })
        .collect())
}

/// Full dump set for one layer.
#[derive(Debug, Clone)]
pub struct LayerDumps {
    pub acts: ActivationDump,
    pub wgrad: GradientDump,
    pub bgrad: GradientDump,
    pub weights: ParamDump,
    pub biases: ParamDump,
}

impl LayerDumps {
    pub fn layer_id(&self) -> u32 {
        self.acts.layer_id
    }

    /// Writes the five dumps under their canonical names in `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DumpError> {
        let id = self.layer_id();
        let dumps = [
            Dump::Activations(self.acts.clone()),
            Dump::Gradient(self.wgrad.clone()),
            Dump::Gradient(self.bgrad.clone()),
            Dump::Param(self.weights.clone()),
            Dump::Param(self.biases.clone()),
        ];
        for d in &dumps {
            write_dump(dir.join(dump_file_name(id, d.kind())), d)?;
        }
        Ok(())
    }

    /// Reads all five dumps of `layer` from `dir`; a missing file is reported
    /// with its layer and kind.
    pub fn read(dir: &Path, layer: u32) -> Result<LayerDumps, DumpError> {
        for kind in DumpKind::ALL {
            let path = dir.join(dump_file_name(layer, kind));
            if !path.is_file() {
                return Err(DumpError::Missing {
                    layer,
                    kind,
                    path: path.display().to_string(),
                });
            }
        }
        let load = |kind: DumpKind| -> Result<Dump, DumpError> {
            let path = dir.join(dump_file_name(layer, kind));
            let d = read_dump(&path)?;
            if d.kind() != kind || d.layer_id() != layer {
                return Err(DumpError::WrongDump {
                    path: path.display().to_string(),
                    layer,
                    expected: kind,
                    found: d.kind(),
                    found_layer: d.layer_id(),
                });
            }
            Ok(d)
        };
        let acts = load(DumpKind::Activations)?.into_activations().unwrap();
        let wgrad = load(DumpKind::WeightGradient)?.into_gradient().unwrap();
        let bgrad = load(DumpKind::BiasGradient)?.into_gradient().unwrap();
        let weights = load(DumpKind::Weights)?.into_param().unwrap();
        let biases = load(DumpKind::Biases)?.into_param().unwrap();
        Ok(LayerDumps {
            acts,
            wgrad,
            bgrad,
            weights,
            biases,
        })
    }
}

/// Layer ids that have an activation dump in `dir`, ascending.
pub fn discover_layers(dir: &Path) -> Result<Vec<u32>, DumpError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DumpError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut ids = Vec::new();
    for e in entries.flatten() {
        let name = e.file_name();
        let Some(name) = name.to_str() else { continue };
        // Any dump kind marks a layer, so a lone gradient file still surfaces
        // as a layer with missing dumps.
        let Some(rest) = name.strip_prefix("layer") else {
            continue;
        };
        let Some((id, tag)) = rest.split_once('_') else {
            continue;
        };
        let known = DumpKind::ALL
            .iter()
            .any(|k| tag == format!("{}.fpd", k.file_tag()));
        if let (Ok(id), true) = (id.parse::<u32>(), known) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

pub fn diagnose_layer(
    dumps: &LayerDumps,
    config: &ScoreConfig,
) -> Result<LayerDiagnostics, DiagnosticsError> {
    let id = dumps.acts.layer_id;
    for (kind, found) in [
        (dumps.wgrad.kind, dumps.wgrad.layer_id),
        (dumps.bgrad.kind, dumps.bgrad.layer_id),
        (dumps.weights.kind, dumps.weights.layer_id),
        (dumps.biases.kind, dumps.biases.layer_id),
    ] {
        if found != id {
            return Err(DiagnosticsError::LayerMismatch {
                expected: id,
                found,
                kind,
            });
        }
    }
    if dumps.weights.units != dumps.acts.units {
        return Err(DiagnosticsError::Shape(format!(
            "layer {id}: activations have {} units, weights have {}",
            dumps.acts.units, dumps.weights.units
        )));
    }
    let utilization = utilization_scores(&dumps.acts, &config.sw, config.parallel)?;
    let mut reconstruction =
        reconstruction_errors(&dumps.wgrad, &dumps.bgrad, &dumps.weights, &dumps.biases)?;
    if config.error_mode == ErrorMode::Absolute {
        reconstruction.iter_mut().for_each(|e| *e = e.abs());
    }
    let diag = LayerDiagnostics {
        layer_id: id,
        units: utilization.len(),
        utilization,
        reconstruction,
        sample_count: dumps.acts.samples(),
        class_count: dumps.acts.class_count(),
    };
    diag.validate()?;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dumps(layer: u32) -> LayerDumps {
        LayerDumps {
            acts: ActivationDump::new(
                layer,
                2,
                1,
                vec![0.0, 1.0, 0.5, 2.0, 1.0, 0.0, 1.5, 3.0],
                vec![0, 0, 1, 1],
            )
            .unwrap(),
            wgrad: GradientDump::weight(layer, 2, 3, 4, vec![0.1; 6]).unwrap(),
            bgrad: GradientDump::bias(layer, 4, vec![0.2, 0.3]).unwrap(),
            weights: ParamDump::weights(layer, 2, 3, vec![1.0; 6]).unwrap(),
            biases: ParamDump::biases(layer, vec![0.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn layer_dump_set_roundtrip_and_missing_kind() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny_dumps(3);
        d.write(dir.path()).unwrap();
        tiny_dumps(1).write(dir.path()).unwrap();
        assert_eq!(discover_layers(dir.path()).unwrap(), vec![1, 3]);
        let back = LayerDumps::read(dir.path(), 3).unwrap();
        assert_eq!(back.acts, d.acts);
        assert_eq!(back.bgrad, d.bgrad);

        std::fs::remove_file(dir.path().join("layer3_bgrad.fpd")).unwrap();
        let err = LayerDumps::read(dir.path(), 3).unwrap_err();
        assert!(matches!(
            err,
            DumpError::Missing {
                layer: 3,
                kind: DumpKind::BiasGradient,
                ..
            }
        ));
        assert!(err.to_string().contains("kind 2"), "{err}");

        // A file holding the wrong kind is rejected even under the right name.
        std::fs::copy(
            dir.path().join("layer3_wgrad.fpd"),
            dir.path().join("layer3_bgrad.fpd"),
        )
        .unwrap();
        assert!(matches!(
            LayerDumps::read(dir.path(), 3),
            Err(DumpError::WrongDump { .. })
        ));
    }
    use rand::seq::SliceRandom;

    fn acts_1d(per_sample: &[(u32, Vec<f32>)]) -> ActivationDump {
        let units = per_sample[0].1.len();
        let data = per_sample.iter().flat_map(|(_, v)| v.clone()).collect();
        let labels = per_sample.iter().map(|(l, _)| *l).collect();
        ActivationDump::new(1, units, 1, data, labels).unwrap()
    }

    fn sw() -> SwConfig {
        SwConfig::default()
    }

    #[test]
    fn dead_unit_scores_zero() {
        let a = acts_1d(&[
            (0, vec![0.0, 1.0]),
            (0, vec![0.0, 2.0]),
            (1, vec![0.0, 5.0]),
            (1, vec![0.0, 3.0]),
        ]);
        let s = utilization_scores(&a, &sw(), false).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
    }

    #[test]
    fn three_class_max_pair() {
        let a = acts_1d(&[
            (0, vec![0.0]),
            (0, vec![0.0]),
            (1, vec![1.0]),
            (1, vec![1.0]),
            (2, vec![3.0]),
            (2, vec![3.0]),
        ]);
        assert_eq!(utilization_scores(&a, &sw(), false).unwrap(), vec![3.0]);
    }

    #[test]
    fn same_multiset_scores_zero() {
        let a = acts_1d(&[
            (0, vec![1.0]),
            (0, vec![4.0]),
            (1, vec![4.0]),
            (1, vec![1.0]),
        ]);
        assert_eq!(utilization_scores(&a, &sw(), false).unwrap(), vec![0.0]);
    }

    #[test]
    fn class_requirements() {
        let one = acts_1d(&[(0, vec![1.0]), (1, vec![2.0]), (1, vec![3.0])]);
        assert_eq!(
            utilization_scores(&one, &sw(), false),
            Err(DiagnosticsError::SparseClass { class: 0, count: 1 })
        );
        let single = acts_1d(&[(2, vec![1.0]), (2, vec![2.0])]);
        assert_eq!(
            utilization_scores(&single, &sw(), false),
            Err(DiagnosticsError::TooFewClasses(1))
        );
        // Absent classes are skipped.
        let gap = acts_1d(&[
            (0, vec![1.0]),
            (0, vec![1.0]),
            (3, vec![2.0]),
            (3, vec![2.0]),
        ]);
        assert_eq!(utilization_scores(&gap, &sw(), false).unwrap(), vec![1.0]);
    }

    #[test]
    fn vector_units_match_pairwise_sliced() {
        // 2 units of dim 3, 3 classes with 4 samples each.
        let mut rng = crate::rng::rng_from(3);
        let labels: Vec<u32> = (0..12).map(|i| i / 4).collect();
        let data: Vec<f32> = (0..12 * 2 * 3)
            .map(|_| rand::Rng::random_range(&mut rng, -2.0f32..2.0))
            .collect();
        let acts = ActivationDump::new(5, 2, 3, data, labels.clone()).unwrap();
        let cfg = SwConfig {
            projections: 9,
            seed: 77,
        };
        let scores = utilization_scores(&acts, &cfg, false).unwrap();
        for (unit, &score) in scores.iter().enumerate() {
            let class_sample = |k: u32| {
                let rows: Vec<Vec<f64>> = (0..12)
                    .filter(|&s| labels[s] == k)
                    .map(|s| {
                        acts.unit_output(s, unit)
                            .iter()
                            .map(|&x| x as f64)
                            .collect()
                    })
                    .collect();
                stats::SampleNd::from_rows(&rows).unwrap()
            };
            let mut best = 0.0f64;
            for k1 in 0..3 {
                for k2 in 0..k1 {
                    let d = stats::sliced_wasserstein(&class_sample(k1), &class_sample(k2), 9, 77)
                        .unwrap();
                    best = best.max(d);
                }
            }
            assert!((score - best).abs() < 1e-12, "{score} vs {best}");
        }
    }

    #[test]
    fn reconstruction_hand_example() {
        let wg = GradientDump::weight(1, 1, 2, 1, vec![0.5, -0.5]).unwrap();
        let bg = GradientDump::bias(1, 1, vec![0.25]).unwrap();
        let w = ParamDump::weights(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = ParamDump::biases(1, vec![1.0]).unwrap();
        assert_eq!(
            reconstruction_errors(&wg, &bg, &w, &b).unwrap(),
            vec![-0.25]
        );
    }

    #[test]
    fn reconstruction_zero_gradients() {
        let wg = GradientDump::weight(1, 3, 2, 5, vec![0.0; 6]).unwrap();
        let bg = GradientDump::bias(1, 5, vec![0.0; 3]).unwrap();
        let w = ParamDump::weights(1, 3, 2, vec![1.0, -2.0, 3.0, 0.5, 7.0, 1.0]).unwrap();
        let b = ParamDump::biases(1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            reconstruction_errors(&wg, &bg, &w, &b).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn summed_gradients_equal_mean_of_per_sample() {
        let g1 = [0.5f32, -1.25, 2.0];
        let g2 = [-0.75f32, 0.5, 1.5];
        let gb = [0.125f32, -0.375];
        let w = [1.5f32, -2.0, 0.25];
        let b = 0.5f32;
        let per_sample = |g: &[f32], gb: f32| -> f64 {
            g.iter()
                .zip(&w)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum::<f64>()
                + gb as f64 * b as f64
        };
        let oracle = (per_sample(&g1, gb[0]) + per_sample(&g2, gb[1])) / 2.0;
        let sum: Vec<f32> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let e = reconstruction_errors(
            &GradientDump::weight(1, 1, 3, 2, sum).unwrap(),
            &GradientDump::bias(1, 2, vec![gb[0] + gb[1]]).unwrap(),
            &ParamDump::weights(1, 1, 3, w.to_vec()).unwrap(),
            &ParamDump::biases(1, vec![b]).unwrap(),
        )
        .unwrap();
        assert_eq!(e[0], oracle);
    }

    #[test]
    fn reconstruction_errors_reject_bad_inputs() {
        let wg = GradientDump::weight(1, 2, 2, 0, vec![0.0; 4]).unwrap();
        let bg = GradientDump::bias(1, 0, vec![0.0; 2]).unwrap();
        let w = ParamDump::weights(1, 2, 2, vec![1.0; 4]).unwrap();
        let b = ParamDump::biases(1, vec![1.0; 2]).unwrap();
        assert_eq!(
            reconstruction_errors(&wg, &bg, &w, &b),
            Err(DiagnosticsError::NoSamples)
        );
        let w3 = ParamDump::weights(1, 2, 3, vec![1.0; 6]).unwrap();
        let wg1 = GradientDump::weight(1, 2, 2, 4, vec![0.0; 4]).unwrap();
        let bg1 = GradientDump::bias(1, 4, vec![0.0; 2]).unwrap();
        assert!(matches!(
            reconstruction_errors(&wg1, &bg1, &w3, &b),
            Err(DiagnosticsError::Shape(_))
        ));
        let mut bad = wg1.clone();
        bad.data[1] = f32::NAN;
        assert!(reconstruction_errors(&bad, &bg1, &w, &b).is_err());
    }

    fn layer_dumps(id: u32) -> LayerDumps {
        let acts = ActivationDump::new(
            id,
            4,
            1,
            (0..16).map(|i| (i % 5) as f32).collect(),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        LayerDumps {
            acts,
            wgrad: GradientDump::weight(id, 4, 3, 4, vec![0.1; 12]).unwrap(),
            bgrad: GradientDump::bias(id, 4, vec![0.2; 4]).unwrap(),
            weights: ParamDump::weights(id, 4, 3, vec![1.0; 12]).unwrap(),
            biases: ParamDump::biases(id, vec![-1.0; 4]).unwrap(),
        }
    }

    #[test]
    fn diagnose_shapes_and_layer_mismatch() {
        let d = diagnose_layer(&layer_dumps(2), &ScoreConfig::default()).unwrap();
        assert_eq!(d.units, 4);
        assert_eq!(d.utilization.len(), 4);
        assert_eq!(d.reconstruction.len(), 4);
        assert_eq!((d.sample_count, d.class_count), (4, 2));

        let mut bad = layer_dumps(2);
        bad.bgrad.layer_id = 3;
        assert_eq!(
            diagnose_layer(&bad, &ScoreConfig::default()),
            Err(DiagnosticsError::LayerMismatch {
                expected: 2,
                found: 3,
                kind: DumpKind::BiasGradient
            })
        );
    }

    #[test]
    fn absolute_mode() {
        let mut dumps = layer_dumps(1);
        dumps.wgrad.data = vec![-0.5; 12];
        let signed = diagnose_layer(&dumps, &ScoreConfig::default()).unwrap();
        let abs = diagnose_layer(
            &dumps,
            &ScoreConfig {
                error_mode: ErrorMode::Absolute,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(signed.reconstruction.iter().all(|&e| e < 0.0));
        for (s, a) in signed.reconstruction.iter().zip(&abs.reconstruction) {
            assert_eq!(s.abs(), *a);
        }
    }

    #[test]
    fn report_json_schema() {
        let d = LayerDiagnostics::new(1, vec![0.1, 0.30000000000000004], vec![-1e-17, 2.5]);
        let report = ScoreReport::new(vec![d], ReportMeta::default()).unwrap();
        let json = report.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["layers"][0]["layer"], 1);
        assert_eq!(v["layers"][0]["J"], 2);
        assert!(v["meta"].is_object());
        let back = ScoreReport::from_json(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(
            back.layers[0].utilization[1].to_bits(),
            0.30000000000000004f64.to_bits()
        );

        let minimal =
            r#"{"layers":[{"layer":4,"J":1,"utilization":[0.5],"reconstruction":[0.0]}]}"#;
        assert_eq!(
            ScoreReport::from_json(minimal).unwrap().layers[0].layer_id,
            4
        );

        let dup = vec![
            LayerDiagnostics::new(1, vec![0.0], vec![0.0]),
            LayerDiagnostics::new(1, vec![0.0], vec![0.0]),
        ];
        assert_eq!(
            ScoreReport::new(dup, ReportMeta::default()),
            Err(DiagnosticsError::DuplicateLayer(1))
        );
    }

    fn random_acts() -> impl Strategy<Value = ActivationDump> {
        (2usize..5, 1usize..4, 2usize..6).prop_flat_map(|(k, units, per_class)| {
            let n = k * per_class;
            prop::collection::vec(-5.0f32..5.0, n * units).prop_map(move |data| {
                let labels = (0..n).map(|i| (i % k) as u32).collect();
                ActivationDump::new(1, units, 1, data, labels).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn invariant_under_sample_and_class_permutation(acts in random_acts(), seed in any::<u64>()) {
            let base = utilization_scores(&acts, &sw(), false).unwrap();
            let mut rng = crate::rng::rng_from(seed);
            let mut order: Vec<usize> = (0..acts.samples()).collect();
            order.shuffle(&mut rng);
            let shuffled = acts.select_samples(&order);
            prop_assert_eq!(&utilization_scores(&shuffled, &sw(), false).unwrap(), &base);

            let k = acts.class_count() as u32;
            let mut relabel: Vec<u32> = (0..k).collect();
            relabel.shuffle(&mut rng);
            let mut renamed = acts.clone();
            renamed.labels.iter_mut().for_each(|l| *l = relabel[*l as usize]);
            prop_assert_eq!(&utilization_scores(&renamed, &sw(), false).unwrap(), &base);
        }

        #[test]
        fn scaling_activations_scales_scores(acts in random_acts(), s in prop::sample::select(vec![0.25f32, 0.5, 2.0, 4.0, 8.0])) {
            // Powers of two keep the scaled f32 samples exact.
            let base = utilization_scores(&acts, &sw(), false).unwrap();
            let mut scaled = acts.clone();
            scaled.data.iter_mut().for_each(|x| *x *= s);
            let got = utilization_scores(&scaled, &sw(), false).unwrap();
            for (g, b) in got.iter().zip(&base) {
                prop_assert!((g - s as f64 * b).abs() <= 1e-12 * (s as f64 * b).max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn parallel_matches_sequential(acts in random_acts()) {
            prop_assert_eq!(
                utilization_scores(&acts, &sw(), true).unwrap(),
                utilization_scores(&acts, &sw(), false).unwrap()
            );
        }

        #[test]
        fn reconstruction_is_linear(g in prop::collection::vec(-4.0f32..4.0, 6), bg in prop::collection::vec(-4.0f32..4.0, 2)) {
            let w = ParamDump::weights(1, 2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -3.0]).unwrap();
            let b = ParamDump::biases(1, vec![0.75, -0.5]).unwrap();
            let e1 = reconstruction_errors(
                &GradientDump::weight(1, 2, 3, 7, g.clone()).unwrap(),
                &GradientDump::bias(1, 7, bg.clone()).unwrap(), &w, &b).unwrap();
            let e2 = reconstruction_errors(
                &GradientDump::weight(1, 2, 3, 7, g.iter().map(|x| 2.0 * x).collect()).unwrap(),
                &GradientDump::bias(1, 7, bg.iter().map(|x| 2.0 * x).collect()).unwrap(), &w, &b).unwrap();
            for (a, b) in e1.iter().zip(&e2) {
                prop_assert_eq!(2.0 * a, *b);
            }
        }
    }
}
