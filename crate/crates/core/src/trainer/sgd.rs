use std::collections::BTreeMap;

use crate::detector::ParamSet;
use crate::error::{param, Result};
use crate::losses::GradientSet;
use crate::tensor::Tensor;

/// Momentum buffers keyed by array name.
pub type Velocity = BTreeMap<String, Tensor>;

/// One momentum SGD step: `v ← μv − lr·g`, `w ← w + v`. Arrays without a
/// gradient are left untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &GradientSet, lr: f64, momentum: f64, velocity: &mut Velocity) -> Result<()> {
    for (name, g) in &grads.grads {
        let Some(p) = params.get(name) else {
            return param(format!("gradient for unknown array `{name}`"));
        };
        if !p.trainable {
            return param(format!("gradient for frozen array `{name}`"));
        }
        if p.value.shape() != g.shape() {
            return param(format!("gradient shape {:?} does not match `{name}` {:?}", g.shape(), p.value.shape()));
        }
    }
    for (name, g) in &grads.grads {
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        if v.shape() != g.shape() {
            return param(format!("velocity shape mismatch for `{name}`"));
        }
        let w = &mut params.get_mut(name).expect("checked above").value;
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
    Ok(())
}
