use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{ArchConfig, ClassifierKind, DetectConfig, HeadDomain, NovelHeadSpec, RpnStrategy};
use crate::error::{Error, Result};
use crate::losses::ConsistencyVariant;
use crate::synthgen::DataConfig;
use crate::trainer::TrainConfig;

/// Everything a run depends on besides the seed. Read from TOML with
/// `[data]`, `[arch]`, `[train]` and `[detect]` tables; missing keys keep
/// their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

pub(crate) fn json_digest<T: Serialize>(v: &T) -> String {
    let canonical: serde_json::Value = serde_json::to_value(v).expect("config serialises");
    hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("value serialises")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Param(m) => Error::Config(m),
            e => e,
        };
        self.data.validate().map_err(cfg_err)?;
        self.arch.validate().map_err(cfg_err)?;
        self.train.validate()?;
        if self.data.side != self.arch.image_side {
            return Err(Error::Config(format!(
                "data.side {} differs from arch.image_side {}",
                self.data.side, self.arch.image_side
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// The part of the configuration pretraining depends on: finetune-only
    /// settings are reset to their defaults.
    pub fn pretrain_view(&self) -> Self {
        let d = TrainConfig::default();
        let train = TrainConfig {
            lambda: d.lambda,
            finetune_iters: d.finetune_iters,
            consistency: d.consistency,
            rpn_strategy: d.rpn_strategy,
            novel_head: d.novel_head,
            random_rpn_init: d.random_rpn_init,
            ..self.train.clone()
        };
        Self {
            data: self.data.clone(),
            arch: self.arch.clone(),
            train,
            detect: DetectConfig::default(),
        }
    }
}

/// One point of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub rpn_strategy: RpnStrategy,
    #[serde(with = "crate::losses::consistency::setting_serde")]
    pub consistency: Option<ConsistencyVariant>,
    pub classifier: ClassifierKind,
    pub head_domain: HeadDomain,
}

impl Ablation {
    /// The setting a configuration already describes.
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            rpn_strategy: cfg.train.rpn_strategy,
            consistency: cfg.train.consistency,
            classifier: cfg.train.novel_head.classifier,
            head_domain: cfg.train.novel_head.domain,
        }
    }

    /// Copies the setting into training and inference. A novel-only head
    /// has no base-class marginals, so its consistency term is off.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut out = cfg.clone();
        out.train.rpn_strategy = self.rpn_strategy;
        out.detect.rpn_strategy = self.rpn_strategy;
        out.train.consistency = match self.head_domain {
            HeadDomain::All => self.consistency,
            HeadDomain::NovelOnly => None,
        };
        out.train.novel_head = NovelHeadSpec {
            classifier: self.classifier,
            domain: self.head_domain,
        };
        out
    }

    pub fn effective(&self) -> Self {
        match self.head_domain {
            HeadDomain::All => *self,
            HeadDomain::NovelOnly => Self { consistency: None, ..*self },
        }
    }

    /// Directory-safe name, e.g. `rpn-max_con-kldiv_cls-cos_dom-all`.
    pub fn tag(&self) -> String {
        let e = self.effective();
        format!(
            "rpn-{}_con-{}_cls-{}_dom-{}",
            e.rpn_strategy,
            ConsistencyVariant::setting_name(e.consistency),
            e.classifier,
            e.head_domain
        )
    }

    pub fn settings(&self) -> BTreeMap<String, String> {
        let e = self.effective();
        BTreeMap::from([
            ("rpn_strategy".to_string(), e.rpn_strategy.to_string()),
            ("consistency".to_string(), ConsistencyVariant::setting_name(e.consistency)),
            ("classifier".to_string(), e.classifier.to_string()),
            ("head_domain".to_string(), e.head_domain.to_string()),
        ])
    }
}

/// Axis values of an ablation; the grid is their cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rpn_strategy: Vec<RpnStrategy>,
    #[serde(with = "setting_list")]
    pub consistency: Vec<Option<ConsistencyVariant>>,
    pub classifier: Vec<ClassifierKind>,
    pub head_domain: Vec<HeadDomain>,
}

mod setting_list {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::losses::ConsistencyVariant;

    pub fn serialize<S: Serializer>(v: &[Option<ConsistencyVariant>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|c| ConsistencyVariant::setting_name(*c)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<ConsistencyVariant>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| ConsistencyVariant::parse_setting(s).map_err(D::Error::custom))
            .collect()
    }
}

impl AblationGrid {
    pub fn single(a: Ablation) -> Self {
        Self {
            rpn_strategy: vec![a.rpn_strategy],
            consistency: vec![a.consistency],
            classifier: vec![a.classifier],
            head_domain: vec![a.head_domain],
        }
    }

    pub fn len(&self) -> usize {
        self.rpn_strategy.len() * self.consistency.len() * self.classifier.len() * self.head_domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lazily enumerates the cross product. Points that collapse to the same
    /// effective setting (any consistency value with a novel-only head) are
    /// yielded once.
    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        let mut seen = Vec::new();
        self.rpn_strategy
            .iter()
            .flat_map(move |&r| {
                self.consistency.iter().flat_map(move |&c| {
                    self.classifier.iter().flat_map(move |&k| {
                        self.head_domain.iter().map(move |&d| Ablation {
                            rpn_strategy: r,
                            consistency: c,
                            classifier: k,
                            head_domain: d,
                        })
                    })
                })
            })
            .filter(move |a| {
                let e = a.effective();
                if seen.contains(&e) {
                    false
                } else {
                    seen.push(e);
                    true
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = ExperimentConfig::from_toml("[train]\nlr = 0.02\n[data]\nbase_images = 40\n").unwrap();
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.data.base_images, 40);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(ExperimentConfig::from_toml("[train]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[data]\nside = 32\n"), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_view_ignores_finetune_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.lambda = 0.0;
        b.train.rpn_strategy = RpnStrategy::GeoAvg;
        b.detect.max_dets = 5;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.pretrain_view().digest(), b.pretrain_view().digest());
        b.train.pretrain_iters = 5;
        assert_ne!(a.pretrain_view().digest(), b.pretrain_view().digest());
    }

    #[test]
    fn grid_is_a_deduplicated_cross_product() {
        let g = AblationGrid {
            rpn_strategy: RpnStrategy::ALL.to_vec(),
            consistency: vec![Some(ConsistencyVariant::Kldiv), None],
            classifier: vec![ClassifierKind::Cos, ClassifierKind::Fc],
            head_domain: vec![HeadDomain::All, HeadDomain::NovelOnly],
        };
        assert_eq!(g.len(), 32);
        let pts: Vec<Ablation> = g.iter().collect();
        assert_eq!(pts.len(), 4 * (2 * 2 + 2));
        let tags: std::collections::BTreeSet<String> = pts.iter().map(|a| a.tag()).collect();
        assert_eq!(tags.len(), pts.len());
        let a = pts[0];
        assert_eq!(a.tag(), "rpn-max_con-kldiv_cls-cos_dom-all");
        let cfg = a.apply(&ExperimentConfig::default());
        assert_eq!(Ablation::of(&cfg), a);
    }
}
