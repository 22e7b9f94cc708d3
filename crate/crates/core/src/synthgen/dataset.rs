use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_scene, ClassId, ClassSplit, GroundTruth, InstanceSpec, SceneImage, SceneSpec};
use crate::error::{param, Error, Result};
use crate::rng::{stream_rng, streams};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    BaseTrain,
    Kshot,
    Test,
}

/// Generator knobs shared by the three dataset builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub side: usize,
    pub num_classes: usize,
    pub num_novel: usize,
    pub base_images: usize,
    pub test_images: usize,
    pub shots: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability that a base-train instance is drawn from the novel classes.
    pub novel_fraction: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub min_intensity: f64,
    pub max_iou: f64,
    pub max_retries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            side: 64,
            num_classes: 12,
            num_novel: 4,
            base_images: 500,
            test_images: 100,
            shots: 5,
            min_instances: 2,
            max_instances: 5,
            novel_fraction: 0.3,
            min_size: 12,
            max_size: 28,
            min_intensity: 0.6,
            max_iou: 0.3,
            max_retries: 200,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes > super::GLYPHS.len() {
            return param(format!("at most {} classes are drawable", super::GLYPHS.len()));
        }
        if self.min_instances > self.max_instances || self.max_instances == 0 {
            return param("need 0 < max_instances and min_instances <= max_instances");
        }
        if self.min_size < 8 || self.min_size > self.max_size || self.max_size > self.side {
            return param("instance sizes must satisfy 8 <= min_size <= max_size <= side");
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) || !(0.0..=1.0).contains(&self.min_intensity) {
            return param("novel_fraction and min_intensity must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub seed: u64,
    pub spec: SceneSpec,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: ClassSplit,
    pub mode: DatasetMode,
    pub k: Option<usize>,
    pub seed: u64,
    pub side: usize,
    pub items: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("manifest serialises")
    }

    /// Annotated instance count per class in canonical class order.
    pub fn annotated_histogram(&self) -> Vec<(ClassId, usize)> {
        self.split
            .canonical_ids()
            .map(|c| {
                let n = self
                    .items
                    .iter()
                    .flat_map(|r| r.gt.labels.iter().zip(&r.gt.annotated))
                    .filter(|(l, a)| **l == c && **a)
                    .count();
                (c, n)
            })
            .collect()
    }
}

/// A manifest together with its rendered images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<SceneImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self) -> &ClassSplit {
        &self.manifest.split
    }

    pub fn gt(&self, i: usize) -> &GroundTruth {
        &self.manifest.items[i].gt
    }

    /// SHA-256 over the canonical manifest and the raw pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.canonical_bytes());
        for img in &self.images {
            for p in &img.pixels {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn random_instance(rng: &mut impl Rng, cfg: &DataConfig, class: ClassId, annotated: bool) -> InstanceSpec {
    InstanceSpec {
        class,
        size: rng.random_range(cfg.min_size..=cfg.max_size),
        origin: None,
        intensity: rng.random_range(cfg.min_intensity..=1.0),
        annotated,
    }
}

fn scene(cfg: &DataConfig, instances: Vec<InstanceSpec>) -> SceneSpec {
    SceneSpec {
        side: cfg.side,
        instances,
        max_iou: cfg.max_iou,
        max_retries: cfg.max_retries,
    }
}

/// Renders with fresh placement seeds until the layout fits.
fn render_with_retries(
    index: usize,
    spec: SceneSpec,
    rng: &mut impl Rng,
) -> Result<(ImageRecord, SceneImage)> {
    let mut last = None;
    for _ in 0..16 {
        let seed: u64 = rng.random();
        match render_scene(&spec, seed) {
            Ok((img, gt)) => return Ok((ImageRecord { index, seed, spec, gt }, img)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation("no attempts".into())))
}

fn assemble(
    split: &ClassSplit,
    mode: DatasetMode,
    k: Option<usize>,
    seed: u64,
    cfg: &DataConfig,
    rendered: Vec<(ImageRecord, SceneImage)>,
) -> Dataset {
    let (items, images) = rendered.into_iter().unzip();
    Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            split: split.clone(),
            mode,
            k,
            seed,
            side: cfg.side,
            items,
        },
        images,
    }
}

/// Abundant base-class data. Novel-class instances are drawn into the images
/// but left unannotated, so training treats them as background.
pub fn build_base_dataset(split: &ClassSplit, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let rendered = (0..cfg.base_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::BASE_IMAGES, i as u64);
            let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let instances = (0..n)
                .map(|_| {
                    if rng.random_bool(cfg.novel_fraction) {
                        let c = *split.novel_ids().choose(&mut rng).expect("non-empty novel set");
                        random_instance(&mut rng, cfg, c, false)
                    } else {
                        let c = *split.base_ids().choose(&mut rng).expect("non-empty base set");
                        random_instance(&mut rng, cfg, c, true)
                    }
                })
                .collect();
            render_with_retries(i, scene(cfg, instances), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(split, DatasetMode::BaseTrain, None, seed, cfg, rendered))
}

/// Fully annotated evaluation scenes with classes drawn uniformly from the
/// base and novel sets.
pub fn build_test_dataset(split: &ClassSplit, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let classes: Vec<ClassId> = split.canonical_ids().collect();
    let rendered = (0..cfg.test_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::TEST_IMAGES, i as u64);
            let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let instances = (0..n)
                .map(|_| {
                    let c = *classes.choose(&mut rng).expect("non-empty class set");
                    random_instance(&mut rng, cfg, c, true)
                })
                .collect();
            render_with_retries(i, scene(cfg, instances), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(split, DatasetMode::Test, None, seed, cfg, rendered))
}

/// Balanced finetuning set with exactly `k` annotated instances of every
/// foreground class.
pub fn build_kshot_dataset(split: &ClassSplit, k: usize, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if k == 0 {
        return param("k-shot set needs k >= 1");
    }
    let mut rng = stream_rng(seed, streams::KSHOT_LAYOUT, 0);
    let mut pool: Vec<ClassId> = split
        .canonical_ids()
        .flat_map(|c| std::iter::repeat_n(c, k))
        .collect();
    pool.shuffle(&mut rng);
    let lo = cfg.min_instances.max(1);
    let mut groups = Vec::new();
    let mut rest = &pool[..];
    while !rest.is_empty() {
        let n = rng.random_range(lo..=cfg.max_instances).min(rest.len());
        groups.push(rest[..n].to_vec());
        rest = &rest[n..];
    }
    let rendered = groups
        .into_par_iter()
        .enumerate()
        .map(|(i, classes)| {
            let mut rng = stream_rng(seed, streams::KSHOT_IMAGES, i as u64);
            let instances = classes
                .into_iter()
                .map(|c| random_instance(&mut rng, cfg, c, true))
                .collect();
            render_with_retries(i, scene(cfg, instances), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(split, DatasetMode::Kshot, Some(k), seed, cfg, rendered))
}
