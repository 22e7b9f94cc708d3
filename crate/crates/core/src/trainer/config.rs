use serde::{Deserialize, Serialize};

use crate::detector::{NovelHeadSpec, ProposalConfig, RpnStrategy};
use crate::error::{Error, Result};
use crate::losses::{ConsistencyVariant, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSampling {
    pub per_image: usize,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnSampling {
    pub anchors: usize,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IouThresholds {
    pub rpn_pos: f64,
    pub rpn_neg: f64,
    pub roi_pos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Convergence {
    /// Iterations per averaging window.
    pub window: usize,
    /// Training stops once consecutive window means differ by less than this
    /// fraction.
    pub rel_tol: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self {
            per_image: 32,
            positive_fraction: 0.25,
        }
    }
}

impl Default for RpnSampling {
    fn default() -> Self {
        Self {
            anchors: 64,
            positive_fraction: 0.5,
        }
    }
}

impl Default for IouThresholds {
    fn default() -> Self {
        Self {
            rpn_pos: 0.7,
            rpn_neg: 0.3,
            roi_pos: 0.5,
        }
    }
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            window: 50,
            rel_tol: 1e-4,
        }
    }
}

/// Hyperparameters of both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub images_per_batch: usize,
    pub roi_sample: RoiSampling,
    pub rpn_sample: RpnSampling,
    pub iou: IouThresholds,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub convergence: Convergence,
    pub seed: u64,
    #[serde(with = "crate::losses::consistency::setting_serde")]
    pub consistency: Option<ConsistencyVariant>,
    /// Objectness ensemble used for finetuning proposals.
    pub rpn_strategy: RpnStrategy,
    pub novel_head: NovelHeadSpec,
    /// Start the finetuned objectness layer from a Gaussian instead of a
    /// copy of the pretrained one.
    pub random_rpn_init: bool,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lambda: 0.1,
            momentum: 0.9,
            images_per_batch: 2,
            roi_sample: RoiSampling::default(),
            rpn_sample: RpnSampling::default(),
            iou: IouThresholds::default(),
            pretrain_iters: 3000,
            finetune_iters: 800,
            convergence: Convergence::default(),
            seed: 0,
            consistency: Some(ConsistencyVariant::Kldiv),
            rpn_strategy: RpnStrategy::Max,
            novel_head: NovelHeadSpec::default(),
            random_rpn_init: false,
            proposals: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("iou.rpn_pos", self.iou.rpn_pos),
            ("iou.rpn_neg", self.iou.rpn_neg),
            ("iou.roi_pos", self.iou.roi_pos),
            ("roi_sample.positive_fraction", self.roi_sample.positive_fraction),
            ("rpn_sample.positive_fraction", self.rpn_sample.positive_fraction),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if self.iou.rpn_neg > self.iou.rpn_pos {
            return Err(Error::Config("iou.rpn_neg must not exceed iou.rpn_pos".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.images_per_batch == 0 || self.convergence.window == 0 {
            return Err(Error::Config("images_per_batch and convergence.window must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            consistency: self.consistency,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_parse_from_partial_toml() {
        TrainConfig::default().validate().unwrap();
        let c: TrainConfig = toml::from_str("lr = 0.01\nconsistency = \"off\"\n[iou]\nrpn_neg = 0.2\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.consistency, None);
        assert_eq!(c.iou.rpn_neg, 0.2);
        assert_eq!(c.iou.rpn_pos, 0.7);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<TrainConfig>("consistency = \"js\"").is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut c = TrainConfig::default();
        c.iou.rpn_neg = 0.8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.roi_sample.positive_fraction = 1.5;
        assert!(c.validate().is_err());
    }
}
