//! Seeded micro detection benchmark: rasterised glyph classes, a base/novel
//! split, abundant base-train data, balanced k-shot sets and a test set.

mod dataset;
mod glyphs;
mod io;
mod scene;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::rng::{stream_rng, streams};

pub use dataset::{
    build_base_dataset, build_kshot_dataset, build_test_dataset, DataConfig, Dataset,
    DatasetManifest, DatasetMode, ImageRecord,
};
pub use glyphs::{Glyph, GLYPHS};
pub use io::{load_dataset, save_dataset, IMAGE_BLOB_MAGIC, IMAGE_BLOB_VERSION};
pub use scene::{render_scene, GroundTruth, InstanceSpec, SceneImage, SceneSpec};

/// Foreground class identifier. Class `c` is drawn with glyph `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Disjoint base and novel class sets.
///
/// The canonical logit ordering is `[base..., novel..., background]`; heads
/// restricted to the base classes use `[base..., background]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    num_classes: usize,
    base_ids: Vec<ClassId>,
    novel_ids: Vec<ClassId>,
}

impl ClassSplit {
    pub fn new(num_classes: usize, base_ids: Vec<ClassId>, novel_ids: Vec<ClassId>) -> Result<Self> {
        let base: BTreeSet<_> = base_ids.iter().collect();
        let novel: BTreeSet<_> = novel_ids.iter().collect();
        if base.len() != base_ids.len() || novel.len() != novel_ids.len() {
            return param("class split contains duplicate ids");
        }
        if base.intersection(&novel).next().is_some() {
            return param("base and novel classes overlap");
        }
        let all: BTreeSet<usize> = base.iter().chain(&novel).map(|c| c.0).collect();
        if all != (0..num_classes).collect() {
            return param(format!("split does not cover classes 0..{num_classes}"));
        }
        Ok(Self {
            num_classes,
            base_ids,
            novel_ids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn base_ids(&self) -> &[ClassId] {
        &self.base_ids
    }

    pub fn novel_ids(&self) -> &[ClassId] {
        &self.novel_ids
    }

    pub fn num_base(&self) -> usize {
        self.base_ids.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_ids.len()
    }

    pub fn is_base(&self, c: ClassId) -> bool {
        self.base_ids.contains(&c)
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel_ids.contains(&c)
    }

    /// Foreground ids in canonical logit order.
    pub fn canonical_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.base_ids.iter().chain(&self.novel_ids).copied()
    }

    /// Position of `c` in `[base..., novel..., background]`.
    pub fn canonical_index(&self, c: ClassId) -> Option<usize> {
        self.canonical_ids().position(|x| x == c)
    }

    pub fn base_index(&self, c: ClassId) -> Option<usize> {
        self.base_ids.iter().position(|&x| x == c)
    }

    pub fn novel_index(&self, c: ClassId) -> Option<usize> {
        self.novel_ids.iter().position(|&x| x == c)
    }

    /// Background slot in the canonical ordering.
    pub fn background_index(&self) -> usize {
        self.num_classes
    }
}

/// Seeded split of `0..num_classes` into base and novel ids (each sorted).
pub fn split_classes(num_classes: usize, num_novel: usize, seed: u64) -> Result<ClassSplit> {
    if num_novel == 0 || num_novel >= num_classes {
        return param(format!(
            "need 0 < num_novel < num_classes, got {num_novel} of {num_classes}"
        ));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut stream_rng(seed, streams::SPLIT, 0));
    let mut novel: Vec<ClassId> = ids[..num_novel].iter().map(|&c| ClassId(c)).collect();
    let mut base: Vec<ClassId> = ids[num_novel..].iter().map(|&c| ClassId(c)).collect();
    novel.sort();
    base.sort();
    ClassSplit::new(num_classes, base, novel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_cardinality_and_disjointness() {
        let s = split_classes(12, 4, 7).unwrap();
        assert_eq!((s.num_base(), s.num_novel()), (8, 4));
        assert!(s.base_ids().iter().all(|c| !s.is_novel(*c)));
        let s = split_classes(2, 1, 0).unwrap();
        assert_eq!((s.num_base(), s.num_novel()), (1, 1));
        assert_eq!(split_classes(12, 4, 7).unwrap(), split_classes(12, 4, 7).unwrap());
    }

    #[test]
    fn split_rejects_bad_counts() {
        assert!(split_classes(12, 0, 1).is_err());
        assert!(split_classes(12, 12, 1).is_err());
        assert!(split_classes(3, 5, 1).is_err());
    }

    #[test]
    fn canonical_ordering() {
        let s = ClassSplit::new(4, vec![ClassId(1), ClassId(3)], vec![ClassId(0), ClassId(2)]).unwrap();
        let order: Vec<_> = s.canonical_ids().collect();
        assert_eq!(order, vec![ClassId(1), ClassId(3), ClassId(0), ClassId(2)]);
        assert_eq!(s.canonical_index(ClassId(0)), Some(2));
        assert_eq!(s.background_index(), 4);
        assert!(ClassSplit::new(3, vec![ClassId(0)], vec![ClassId(0), ClassId(1)]).is_err());
        assert!(ClassSplit::new(3, vec![ClassId(0)], vec![ClassId(1)]).is_err());
    }
}
