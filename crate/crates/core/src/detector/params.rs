use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer names. Each layer owns a `<name>.weight` array and optionally a
/// `<name>.bias` array.
pub mod layers {
    pub const RPN_SHARED: &str = "rpn_shared";
    pub const RPN_OBJ_B: &str = "rpn_obj_b";
    pub const RPN_OBJ_N: &str = "rpn_obj_n";
    pub const RPN_BOX: &str = "rpn_box";
    pub const BOXHEAD_PROJ: &str = "boxhead_proj";
    pub const CLS_B: &str = "cls_b";
    pub const REG_B: &str = "reg_b";
    pub const CLS_N: &str = "cls_n";
    pub const REG_N: &str = "reg_n";

    /// Layers of a pretrained base detector.
    pub const BASE: [&str; 6] = [RPN_SHARED, RPN_OBJ_B, RPN_BOX, BOXHEAD_PROJ, CLS_B, REG_B];
    pub const PRETRAIN_TRAINABLE: [&str; 4] = [RPN_OBJ_B, RPN_BOX, CLS_B, REG_B];
    pub const FINETUNE_TRAINABLE: [&str; 3] = [RPN_OBJ_N, CLS_N, REG_N];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter arrays with per-array trainable flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    arrays: BTreeMap<String, Param>,
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Layer that owns an array name (`cls_n.weight` -> `cls_n`).
/// Elementwise output scale of a frozen feature layer.
pub fn scale_name(layer: &str) -> String {
    format!("{layer}.scale")
}

/// Elementwise output shift of a frozen feature layer.
pub fn shift_name(layer: &str) -> String {
    format!("{layer}.shift")
}

pub fn layer_of(array: &str) -> &str {
    array.rsplit_once('.').map_or(array, |(l, _)| l)
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.arrays.insert(name.into(), Param { value, trainable });
    }

    pub fn remove_layer(&mut self, layer: &str) {
        self.arrays.retain(|k, _| layer_of(k) != layer);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn has_layer(&self, layer: &str) -> bool {
        self.arrays.contains_key(&weight_name(layer))
    }

    pub fn weight(&self, layer: &str) -> Result<&Tensor> {
        self.arrays
            .get(&weight_name(layer))
            .map(|p| &p.value)
            .ok_or_else(|| Error::State(format!("model has no layer `{layer}`")))
    }

    pub fn bias(&self, layer: &str) -> Option<&Tensor> {
        self.arrays.get(&bias_name(layer)).map(|p| &p.value)
    }

    /// Marks exactly the listed layers trainable.
    pub fn set_trainable_layers(&mut self, trainable: &[&str]) {
        for (k, p) in self.arrays.iter_mut() {
            p.trainable = trainable.contains(&layer_of(k));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.arrays
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// SHA-256 over (name, shape, data) of the arrays belonging to `layers`,
    /// or of every array when `layers` is `None`.
    pub fn digest(&self, layers: Option<&[&str]>) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.arrays {
            if layers.is_some_and(|ls| !ls.contains(&layer_of(k))) {
                continue;
            }
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}
