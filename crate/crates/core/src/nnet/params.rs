use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            dim: 64,
            blocks: 2,
            heads: 4,
            ffn_hidden: 128,
            num_classes: 6,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub const CHANNELS: usize = 3;

    pub fn grid_height(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * Self::CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size", "must be positive"));
        }
        if self.image_height == 0 || !self.image_height.is_multiple_of(self.patch_size) {
            return Err(Error::config("image_height", "must be a positive multiple of patch_size"));
        }
        if self.image_width == 0 || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::config("image_width", "must be a positive multiple of patch_size"));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "dim must be a positive multiple of heads"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    fn gaussian(shape: &[usize], std: f64, rng: &mut seed::Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

/// Parameters of the patch transformer `f = D o E`.
///
/// Linear weights are stored `in x out` so a layer computes `x W + b` on
/// row-major token matrices. The decoder is `head_w`/`head_b`; everything else
/// belongs to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const DECODER_TENSORS: [&str; 2] = ["head_w", "head_b"];

impl ModelParams {
    /// Gaussian(0, 0.02) weights and position embeddings, zero biases, unit
    /// normalization scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "init"));
        let d = config.dim;
        let f = config.ffn_hidden;
        let out = config.patch_size * config.patch_size * config.num_classes;
        let g = |shape: &[usize], rng: &mut seed::Rng| Tensor::gaussian(shape, INIT_STD, rng);
        let patch_w = g(&[config.patch_dim(), d], &mut rng);
        let pos = g(&[config.num_tokens(), d], &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: g(&[d, 3 * d], &mut rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: g(&[d, d], &mut rng),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                ff1_w: g(&[d, f], &mut rng),
                ff1_b: Tensor::zeros(&[f]),
                ff2_w: g(&[f, d], &mut rng),
                ff2_b: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = g(&[d, out], &mut rng);
        Ok(ModelParams {
            config,
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos,
            blocks,
            norm_g: Tensor::ones(&[d]),
            norm_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[out]),
        })
    }

    /// Same shapes, every entry zero. Used as a gradient/velocity buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Keeps this encoder and replaces the decoder with a fresh random one.
    pub fn with_fresh_decoder(&self, seed: u64) -> Result<Self> {
        let fresh = ModelParams::init(self.config, seed)?;
        let mut out = self.clone();
        out.head_w = fresh.head_w;
        out.head_b = fresh.head_b;
        Ok(out)
    }

    pub fn is_decoder_tensor(name: &str) -> bool {
        DECODER_TENSORS.contains(&name)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend([
                (format!("block{i}.ln1_g"), &b.ln1_g),
                (format!("block{i}.ln1_b"), &b.ln1_b),
                (format!("block{i}.qkv_w"), &b.qkv_w),
                (format!("block{i}.qkv_b"), &b.qkv_b),
                (format!("block{i}.proj_w"), &b.proj_w),
                (format!("block{i}.proj_b"), &b.proj_b),
                (format!("block{i}.ln2_g"), &b.ln2_g),
                (format!("block{i}.ln2_b"), &b.ln2_b),
                (format!("block{i}.ff1_w"), &b.ff1_w),
                (format!("block{i}.ff1_b"), &b.ff1_b),
                (format!("block{i}.ff2_w"), &b.ff2_w),
                (format!("block{i}.ff2_b"), &b.ff2_b),
            ]);
        }
        v.extend([
            ("norm_g".into(), &self.norm_g),
            ("norm_b".into(), &self.norm_b),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let ModelParams {
            patch_w,
            patch_b,
            pos,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
            ..
        } = self;
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("patch_w".into(), patch_w),
            ("patch_b".into(), patch_b),
            ("pos".into(), pos),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            let BlockParams {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
            } = b;
            v.extend([
                (format!("block{i}.ln1_g"), ln1_g),
                (format!("block{i}.ln1_b"), ln1_b),
                (format!("block{i}.qkv_w"), qkv_w),
                (format!("block{i}.qkv_b"), qkv_b),
                (format!("block{i}.proj_w"), proj_w),
                (format!("block{i}.proj_b"), proj_b),
                (format!("block{i}.ln2_g"), ln2_g),
                (format!("block{i}.ln2_b"), ln2_b),
                (format!("block{i}.ff1_w"), ff1_w),
                (format!("block{i}.ff1_b"), ff1_b),
                (format!("block{i}.ff2_w"), ff2_w),
                (format!("block{i}.ff2_b"), ff2_b),
            ]);
        }
        v.extend([
            ("norm_g".into(), norm_g),
            ("norm_b".into(), norm_b),
            ("head_w".into(), head_w),
            ("head_b".into(), head_b),
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flattened copy of every parameter, in [`Self::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    /// Mutable access to the `index`-th scalar in [`Self::flatten`] order.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += alpha * other` over every tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(cfg, 3).unwrap();
        let b = ModelParams::init(cfg, 3).unwrap();
        let c = ModelParams::init(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.patch_w.shape, vec![192, 64]);
        assert_eq!(a.pos.shape, vec![64, 64]);
        assert_eq!(a.head_w.shape, vec![64, 8 * 8 * 6]);
        assert!(a.patch_b.data.iter().all(|&v| v == 0.0));
        let names: Vec<String> = a.tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    #[test]
    fn fresh_decoder_keeps_encoder() {
        let a = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let b = a.with_fresh_decoder(2).unwrap();
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.patch_w, b.patch_w);
        assert_ne!(a.head_w, b.head_w);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(ModelParams::init(cfg, 0).is_err());
        let cfg = ModelConfig {
            image_width: 60,
            ..ModelConfig::default()
        };
        assert!(ModelParams::init(cfg, 0).is_err());
    }

    #[test]
    fn scalar_mut_walks_flatten_order() {
        let mut p = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let flat = p.flatten();
        let idx = flat.len() - 3;
        assert_eq!(*p.scalar_mut(idx), flat[idx]);
    }
}
