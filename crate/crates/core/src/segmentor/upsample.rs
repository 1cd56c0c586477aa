//! U-Net style decoder from a 28 px map to full-resolution 224 px scores.
//!
//! Each stage doubles the resolution, concatenates the map itself (resized), a
//! skip tensor and the previous stage's activations, and applies a convolution.

use candle_core::Tensor;

use crate::dataio::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::nn::{ops, resize, Conv2d, ParamStore};

#[derive(Debug, Clone)]
pub struct Upsampler {
    /// 56 px: map + CNN stem features.
    pub stage56: Conv2d,
    /// 112 px: previous + map + image.
    pub stage112: Conv2d,
    /// 224 px: previous + map + image, 1×1.
    pub stage224: Conv2d,
    pub out: Conv2d,
    width: usize,
}

/// Full-resolution scores in `[0, 1]` and the logits they came from, both `(B, 224, 224)`.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub scores: Tensor,
    pub raw: Tensor,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, name: &str, skip56: usize, width: usize) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            stage56: Conv2d::new(store, &n("stage56"), 1 + skip56, width, 3, 1, 1, true)?,
            stage112: Conv2d::new(store, &n("stage112"), width + 1 + 3, width, 3, 1, 1, true)?,
            stage224: Conv2d::new(store, &n("stage224"), width + 1 + 3, width, 1, 1, 0, true)?,
            out: Conv2d::new(store, &n("out"), width, 1, 1, 1, 0, true)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `map` is `(B, 1, h, w)`, `skip56` `(B, C, 56, 56)`, `image` `(B, 3, 224, 224)`.
    pub fn forward(&self, map: &Tensor, skip56: &Tensor, image: &Tensor) -> Result<AnomalyMap> {
        let (b, c, _, _) = map.dims4()?;
        if c != 1 || image.dims() != [b, 3, IMAGE_SIZE, IMAGE_SIZE] || skip56.dims()[2..] != [56, 56] {
            return Err(Error::shape(format!(
                "upsample_map got map {:?}, skip {:?}, image {:?}",
                map.dims(),
                skip56.dims(),
                image.dims()
            )));
        }
        let dt = map.dtype();
        let image = image.to_dtype(dt)?;
        let image112 = resize::resize_bilinear(&image, 112, 112)?;

        let m56 = resize::resize_bilinear(map, 56, 56)?;
        let h = self.stage56.forward(&Tensor::cat(&[&m56, skip56], 1)?)?.relu()?;

        let h = resize::resize_bilinear(&h, 112, 112)?;
        let m112 = resize::resize_bilinear(map, 112, 112)?;
        let h = self.stage112.forward(&Tensor::cat(&[&h, &m112, &image112], 1)?)?.relu()?;

        let h = resize::resize_bilinear(&h, IMAGE_SIZE, IMAGE_SIZE)?;
        let m224 = resize::resize_bilinear(map, IMAGE_SIZE, IMAGE_SIZE)?;
        let h = self.stage224.forward(&Tensor::cat(&[&h, &m224, &image], 1)?)?.relu()?;

        let raw = self.out.forward(&h)?.squeeze(1)?;
        Ok(AnomalyMap { scores: ops::sigmoid(&raw)?, raw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::{DType, Device};

    #[test]
    fn output_is_full_resolution_probabilities() -> Result<()> {
        let mut store = ParamStore::new(0, DType::F64);
        let up = Upsampler::new(&mut store, "up", 16, 8)?;
        let dev = Device::Cpu;
        let map = Tensor::rand(0f64, 1.0, (2, 1, 28, 28), &dev)?;
        let skip = Tensor::randn(0f64, 1.0, (2, 16, 56, 56), &dev)?;
        let img = Tensor::rand(0f64, 1.0, (2, 3, 224, 224), &dev)?;
        let out = up.forward(&map, &skip, &img)?;
        assert_eq!(out.scores.dims(), &[2, 224, 224]);
        assert!(to_f64_vec(&out.scores)?.iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    }

    /// Weights that copy the map channel through every stage turn a constant map into a constant output.
    #[test]
    fn copy_parameterization_keeps_constants() -> Result<()> {
        let mut store = ParamStore::new(0, DType::F64);
        let up = Upsampler::new(&mut store, "up", 16, 8)?;
        let dev = Device::Cpu;
        let copy = |conv: &Conv2d, src_channel: usize| -> Result<()> {
            let (o, i, k, _) = conv.weight.dims4()?;
            let mut w = vec![0f64; o * i * k * k];
            // only the centre tap of output 0 reads the map channel
            w[src_channel * k * k + (k / 2) * k + k / 2] = 1.0;
            conv.weight.set(&Tensor::from_vec(w, (o, i, k, k), &dev)?)?;
            if let Some(b) = &conv.bias {
                b.set(&b.as_tensor().zeros_like()?)?;
            }
            Ok(())
        };
        copy(&up.stage56, 0)?;
        copy(&up.stage112, 0)?;
        copy(&up.stage224, 0)?;
        copy(&up.out, 0)?;
        let map = Tensor::full(0.4f64, (1, 1, 28, 28), &dev)?;
        let skip = Tensor::zeros((1, 16, 56, 56), DType::F64, &dev)?;
        let img = Tensor::zeros((1, 3, 224, 224), DType::F64, &dev)?;
        let out = up.forward(&map, &skip, &img)?;
        let expect = 1.0 / (1.0 + (-0.4f64).exp());
        for v in to_f64_vec(&out.scores)? {
            assert!((v - expect).abs() < 1e-12);
        }
        Ok(())
    }
}
