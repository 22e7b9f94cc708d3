use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub hidden_channels: usize,
    pub out_channels: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            out_channels: 32,
        }
    }
}

/// Frozen two-stage convolutional featurizer.
///
/// Each stage is a bias-free 3x3 convolution (zero padding), a ReLU and a 2x2
/// max pool, so the total stride is 4. Weights depend only on the seed.
#[derive(Debug, Clone)]
pub struct Featurizer {
    cfg: FeaturizerConfig,
    conv1: Vec<f64>,
    conv2: Vec<f64>,
}

pub const FEATURE_STRIDE: usize = 4;

impl Featurizer {
    pub fn new(seed: u64, cfg: FeaturizerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = |cin: usize, cout: usize| -> Vec<f64> {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let n = Normal::new(0.0, std).expect("positive std");
            (0..cout * cin * 9).map(|_| n.sample(&mut rng)).collect()
        };
        let conv1 = bank(1, cfg.hidden_channels);
        let conv2 = bank(cfg.hidden_channels, cfg.out_channels);
        Self { cfg, conv1, conv2 }
    }

    pub fn config(&self) -> FeaturizerConfig {
        self.cfg
    }

    /// Maps a `side x side` intensity image to a `D x side/4 x side/4` map.
    pub fn apply(&self, pixels: &[f64], side: usize) -> Result<Tensor> {
        if side == 0 || side % FEATURE_STRIDE != 0 || pixels.len() != side * side {
            return param(format!(
                "featurizer needs a square image with side divisible by {FEATURE_STRIDE}, got {} pixels for side {side}",
                pixels.len()
            ));
        }
        let c1 = self.cfg.hidden_channels;
        let c2 = self.cfg.out_channels;
        let a = conv3x3_relu(pixels, 1, side, &self.conv1, c1);
        let a = maxpool2(&a, c1, side);
        let half = side / 2;
        let b = conv3x3_relu(&a, c1, half, &self.conv2, c2);
        let b = maxpool2(&b, c2, half);
        let t = Tensor::new(vec![c2, half / 2, half / 2], b)?;
        t.debug_check_finite();
        Ok(t)
    }
}

/// Convenience wrapper building the featurizer from its seed on every call.
pub fn fixed_featurizer(pixels: &[f64], side: usize, feat_seed: u64) -> Result<Tensor> {
    Featurizer::new(feat_seed, FeaturizerConfig::default()).apply(pixels, side)
}

fn conv3x3_relu(input: &[f64], cin: usize, n: usize, weights: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * n * n];
    for o in 0..cout {
        let plane = &mut out[o * n * n..(o + 1) * n * n];
        for i in 0..cin {
            let src = &input[i * n * n..(i + 1) * n * n];
            let k = &weights[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for y in 0..n {
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= n as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * n..(sy as usize + 1) * n];
                    let drow = &mut plane[y * n..(y + 1) * n];
                    for dx in 0..3 {
                        let kv = k[dy * 3 + dx];
                        let off = dx as isize - 1;
                        let (x0, x1) = (usize::from(off < 0), n - usize::from(off > 0));
                        for x in x0..x1 {
                            drow[x] += kv * srow[(x as isize + off) as usize];
                        }
                    }
                }
            }
        }
        for v in plane.iter_mut() {
            *v = v.max(0.0);
        }
    }
    out
}

fn maxpool2(input: &[f64], c: usize, n: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = Vec::with_capacity(c * m * m);
    for ch in 0..c {
        let p = &input[ch * n * n..(ch + 1) * n * n];
        for y in 0..m {
            for x in 0..m {
                let i = 2 * y * n + 2 * x;
                out.push(p[i].max(p[i + 1]).max(p[i + n]).max(p[i + n + 1]));
            }
        }
    }
    out
}
