use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::grad::{compute_gradients, minibatch_loss, LossConfig, Minibatch, TrainStage};
use crate::detector::Model;
use crate::error::{param, Result};
use crate::rng::{stream_rng, streams};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Checks every trainable coordinate, or a seeded random subset of
/// `subset.0` coordinates, against central differences with step `eps`.
/// The relative error uses `max(1, |analytic|, |numeric|)` as denominator.
pub fn finite_difference_check(
    model: &Model,
    mb: &Minibatch,
    stage: TrainStage,
    cfg: &LossConfig,
    eps: f64,
    subset: Option<(usize, u64)>,
) -> Result<FdReport> {
    if !(1e-8..=1e-4).contains(&eps) {
        return param(format!("finite-difference step must lie in [1e-8, 1e-4], got {eps}"));
    }
    let (_, grads) = compute_gradients(model, mb, stage, cfg)?;
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, p) in model.params.iter() {
        if p.trainable {
            coords.extend((0..p.value.len()).map(|i| (name.to_string(), i)));
        }
    }
    if let Some((n, seed)) = subset {
        if n < coords.len() {
            let mut rng = stream_rng(seed, streams::FD_SUBSET, 0);
            let mut picked = sample(&mut rng, coords.len(), n).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i].clone()).collect();
        }
    }
    let mut probe = model.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        coords_checked: coords.len(),
    };
    for (name, i) in coords {
        let orig = probe.params.get(&name).expect("listed").value.data()[i];
        let at = |v: f64, probe: &mut Model| -> Result<f64> {
            probe.params.get_mut(&name).expect("listed").value.data_mut()[i] = v;
            Ok(minibatch_loss(probe, mb, stage, cfg)?.total)
        };
        let plus = at(orig + eps, &mut probe)?;
        let minus = at(orig - eps, &mut probe)?;
        at(orig, &mut probe)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if rel > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_coordinate = Some((name.clone(), i));
        }
    }
    Ok(report)
}
