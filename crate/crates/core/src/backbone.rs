//! Frozen multi-level feature extraction, fusion to a 14×14 grid and tokenization.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{ImageSample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::nn::{ops, resize, Linear, ParamStore};
use crate::rng::SeedTree;

pub const GRID: usize = 14;
pub const N_TOKENS: usize = GRID * GRID;
pub const FUSED_CHANNELS: usize = 272;
pub const D_MODEL: usize = 256;
pub const STANDIN_CHANNELS: [usize; 3] = [24, 56, 192];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Pretrained,
    Standin,
}

/// Per-level features for a batch; level `l` is `(B, C_l, H_l, W_l)`.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub levels: Vec<Tensor>,
    pub source: ExtractorKind,
}

impl FeatureStack {
    pub fn channel_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims()[1]).collect()
    }
}

/// One patchify stage: convolution with `stride = kernel`, followed by ReLU except on the last level.
#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

/// Frozen convolutional pyramid. Weights are plain tensors, never `Var`s, so no
/// gradient can reach them and no optimizer can see them.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    weights_ref: String,
    stages: Vec<Stage>,
}

impl FeatureExtractor {
    /// Deterministic stand-in with levels (24, 56, 192) at 56, 28 and 14 pixels.
    pub fn standin(seed: u64) -> Result<Self> {
        Self::standin_inner(seed, true)
    }

    /// Same weights as [`Self::standin`] but with every bias set to zero.
    pub fn standin_zero_bias(seed: u64) -> Result<Self> {
        Self::standin_inner(seed, false)
    }

    fn standin_inner(seed: u64, with_bias: bool) -> Result<Self> {
        let seeds = SeedTree::new(seed);
        let plan = [(3, STANDIN_CHANNELS[0], 4), (STANDIN_CHANNELS[0], STANDIN_CHANNELS[1], 2), (STANDIN_CHANNELS[1], STANDIN_CHANNELS[2], 2)];
        let mut stages = Vec::new();
        for (i, &(cin, cout, k)) in plan.iter().enumerate() {
            let mut rng = seeds.stream("backbone", &[i as u64]);
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let w: Vec<f32> = (0..cout * cin * k * k).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
            let b: Vec<f32> = (0..cout)
                .map(|_| if with_bias { rng.random_range(-0.05f32..0.05) } else { 0.0 })
                .collect();
            stages.push(Stage {
                weight: Tensor::from_vec(w, (cout, cin, k, k), &Device::Cpu)?,
                bias: Tensor::from_vec(b, cout, &Device::Cpu)?,
                kernel: k,
            });
        }
        Ok(Self {
            kind: ExtractorKind::Standin,
            weights_ref: format!("standin:{seed}{}", if with_bias { "" } else { ":zero-bias" }),
            stages,
        })
    }

    /// Adapter for an externally trained pyramid stored as safetensors with
    /// tensors `levels.{i}.weight` `(C_out, C_in, k, k)` and optional `levels.{i}.bias`.
    /// Each level is a stride-`k` convolution; channel counts must sum to 272.
    pub fn pretrained(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Config(format!("cannot read backbone weights {}: {e}", path.display())))?;
        let mut stages = Vec::new();
        let mut cin = 3;
        while let Some(w) = tensors.get(&format!("levels.{}.weight", stages.len())) {
            let w = w.to_dtype(DType::F32)?;
            let (cout, win, k, k2) = w.dims4()?;
            if win != cin || k != k2 {
                return Err(Error::Config(format!("backbone level {} has shape {:?}", stages.len(), w.dims())));
            }
            let bias = match tensors.get(&format!("levels.{}.bias", stages.len())) {
                Some(b) => b.to_dtype(DType::F32)?,
                None => Tensor::zeros(cout, DType::F32, &Device::Cpu)?,
            };
            stages.push(Stage { weight: w, bias, kernel: k });
            cin = cout;
        }
        let ex = Self {
            kind: ExtractorKind::Pretrained,
            weights_ref: path.display().to_string(),
            stages,
        };
        let total: usize = ex.level_channel_counts().iter().sum();
        if ex.stages.len() < 2 || total != FUSED_CHANNELS {
            return Err(Error::Config(format!(
                "pretrained backbone must have at least 2 levels summing to {FUSED_CHANNELS} channels, got {:?}",
                ex.level_channel_counts()
            )));
        }
        Ok(ex)
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn weights_ref(&self) -> &str {
        &self.weights_ref
    }

    pub fn level_channel_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.weight.dims()[0]).collect()
    }

    /// Hash of every weight; equal before and after training for a frozen extractor.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.stages {
            for t in [&s.weight, &s.bias] {
                for v in t.flatten_all()?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// `images` is `(B, 3, 224, 224)`.
    pub fn extract(&self, images: &Tensor) -> Result<FeatureStack> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != IMAGE_SIZE || dims[3] != IMAGE_SIZE {
            return Err(Error::shape(format!("backbone expects (B, 3, 224, 224), got {dims:?}")));
        }
        let mut x = images.to_dtype(DType::F32)?.detach();
        let mut levels = Vec::with_capacity(self.stages.len());
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            let c = s.bias.dims()[0];
            x = ops::conv2d(&x, &s.weight, s.kernel, 0)?.broadcast_add(&s.bias.reshape((1, c, 1, 1))?)?;
            if i != last {
                x = x.relu()?;
            }
            levels.push(x.clone());
        }
        Ok(FeatureStack { levels, source: self.kind })
    }

    pub fn extract_samples(&self, samples: &[&ImageSample]) -> Result<FeatureStack> {
        self.extract(&images_to_tensor(samples)?)
    }
}

/// Stack planar sample pixels into `(B, 3, 224, 224)` f32.
pub fn images_to_tensor(samples: &[&ImageSample]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for s in samples {
        s.check()?;
        data.extend_from_slice(&s.pixels);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?)
}

/// Resize every level to 14×14 and concatenate along channels: `(B, 272, 14, 14)`.
pub fn fuse_levels(stack: &FeatureStack) -> Result<Tensor> {
    let total: usize = stack.channel_counts().iter().sum();
    if total != FUSED_CHANNELS {
        return Err(Error::Config(format!("feature levels sum to {total} channels, expected {FUSED_CHANNELS}")));
    }
    let resized = stack
        .levels
        .iter()
        .map(|l| resize::resize_bilinear(l, GRID, GRID))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&resized, 1)?)
}

/// `(B, C, 14, 14)` → `(B, 196, C)` with token `i·14 + j` at grid position `(i, j)`.
pub fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Learned 272→256 projection plus learned positional embeddings.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub projector: Linear,
    pub positions: candle_core::Var,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            projector: Linear::new(store, &format!("{name}.proj"), FUSED_CHANNELS, D_MODEL)?,
            positions: store.normal(&format!("{name}.pos"), &[N_TOKENS, D_MODEL], 0.02)?,
        })
    }

    /// `(B, 272, 14, 14)` → `(B, 196, 256)`.
    pub fn tokenize(&self, fused: &Tensor) -> Result<Tensor> {
        let dims = fused.dims();
        if dims.len() != 4 || dims[1..] != [FUSED_CHANNELS, GRID, GRID] {
            return Err(Error::shape(format!("tokenize expects (B, 272, 14, 14), got {dims:?}")));
        }
        let seq = grid_to_tokens(&fused.to_dtype(self.positions.dtype())?)?;
        Ok(self.projector.forward(&seq)?.broadcast_add(self.positions.as_tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn batch(v: f32) -> Tensor {
        Tensor::full(v, (1, 3, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu).unwrap()
    }

    #[test]
    fn standin_levels_sum_to_272_and_are_deterministic() -> Result<()> {
        let ex = FeatureExtractor::standin(3)?;
        assert_eq!(ex.level_channel_counts().iter().sum::<usize>(), 272);
        let img = Tensor::rand(0f32, 1.0, (2, 3, 224, 224), &Device::Cpu)?;
        let a = ex.extract(&img)?;
        let b = FeatureExtractor::standin(3)?.extract(&img)?;
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(to_f64_vec(x)?, to_f64_vec(y)?);
        }
        let sizes: Vec<_> = a.levels.iter().map(|l| l.dims()[2]).collect();
        assert_eq!(sizes, vec![56, 28, 14]);
        assert!(ex.extract(&Tensor::zeros((1, 3, 100, 100), DType::F32, &Device::Cpu)?).is_err());
        Ok(())
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() -> Result<()> {
        let s = FeatureExtractor::standin_zero_bias(1)?.extract(&batch(0.0))?;
        for l in &s.levels {
            assert!(to_f64_vec(l)?.iter().all(|&v| v == 0.0));
        }
        Ok(())
    }

    #[test]
    fn fuse_of_constant_levels_is_constant_per_block() -> Result<()> {
        let dev = Device::Cpu;
        let stack = FeatureStack {
            levels: vec![
                Tensor::full(1.5f32, (1, 24, 56, 56), &dev)?,
                Tensor::full(-2.0f32, (1, 248, 28, 28), &dev)?,
            ],
            source: ExtractorKind::Standin,
        };
        let f = fuse_levels(&stack)?;
        assert_eq!(f.dims(), &[1, 272, 14, 14]);
        let v = to_f64_vec(&f)?;
        assert!(v[..24 * 196].iter().all(|&x| x == 1.5));
        assert!(v[24 * 196..].iter().all(|&x| x == -2.0));
        let bad = FeatureStack { levels: vec![stack.levels[0].clone()], source: ExtractorKind::Standin };
        assert!(matches!(fuse_levels(&bad), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn fuse_matches_direct_bilinear_oracle_on_2x2() -> Result<()> {
        let dev = Device::Cpu;
        let small = Tensor::new(&[[1.0f32, 2.0], [3.0, 4.0]], &dev)?.reshape((1, 1, 2, 2))?;
        let stack = FeatureStack {
            levels: vec![small, Tensor::zeros((1, 271, 14, 14), DType::F32, &dev)?],
            source: ExtractorKind::Standin,
        };
        let f = to_f64_vec(&fuse_levels(&stack)?.narrow(1, 0, 1)?)?;
        // half-pixel centres, clamped: src = (i + 0.5) * 2 / 14 - 0.5
        let coord = |i: usize| ((i as f64 + 0.5) / 7.0 - 0.5).clamp(0.0, 1.0);
        for i in 0..14 {
            for j in 0..14 {
                let (y, x) = (coord(i), coord(j));
                let expect = 1.0 * (1.0 - y) * (1.0 - x) + 2.0 * (1.0 - y) * x + 3.0 * y * (1.0 - x) + 4.0 * y * x;
                assert!((f[i * 14 + j] - expect).abs() < 1e-6, "({i},{j})");
            }
        }
        Ok(())
    }

    #[test]
    fn tokenize_shapes_positions_and_layout() -> Result<()> {
        let mut store = ParamStore::new(0, DType::F64);
        let tok = Tokenizer::new(&mut store, "tok")?;
        let zero = Tensor::zeros((1, 272, 14, 14), DType::F64, &Device::Cpu)?;
        let t = tok.tokenize(&zero)?;
        assert_eq!(t.dims(), &[1, 196, 256]);
        assert_eq!(to_f64_vec(&t)?, to_f64_vec(tok.positions.as_tensor())?);

        // an impulse at grid (i, j) only moves token row i*14 + j
        let (i, j) = (5, 11);
        let mut v = vec![0f64; 272 * 196];
        v[i * 14 + j] = 1.0;
        let imp = Tensor::from_vec(v, (1, 272, 14, 14), &Device::Cpu)?;
        let diff = (tok.tokenize(&imp)? - &t)?.abs()?.sum(2)?.flatten_all()?.to_vec1::<f64>()?;
        let moved: Vec<usize> = diff.iter().enumerate().filter(|(_, &d)| d > 0.0).map(|(k, _)| k).collect();
        assert_eq!(moved, vec![i * 14 + j]);
        Ok(())
    }
}
