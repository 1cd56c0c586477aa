//! Multi-scale residual CNN over the error map and shallow image features,
//! spatial self-attention at the coarsest scale and the coarse map head.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{resize, Attended, BatchNorm2d, Conv2d, LayerNorm, MultiHeadAttention, ParamStore};

/// Conv, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, true)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    /// Conv and batch norm without the ReLU.
    pub fn preactivation(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.preactivation(x, train)?.relu()?)
    }
}

/// `x + branch(x)` with a BN-ReLU-conv branch applied twice.
#[derive(Debug, Clone)]
pub struct ResBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), ch)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, true)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, true)?,
        })
    }

    pub fn branch(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&self.bn1.forward(x, train)?.relu()?)?;
        self.conv2.forward(&self.bn2.forward(&h, train)?.relu()?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok((x + self.branch(x, train)?)?)
    }
}

/// Features at the three working scales.
#[derive(Debug, Clone)]
pub struct MultiScale {
    /// `(B, stem, 56, 56)`
    pub s56: Tensor,
    /// `(B, width, 28, 28)`
    pub s28: Tensor,
    /// `(B, width, 14, 14)`
    pub s14: Tensor,
}

/// Stem at 56 px, then two stride-2 stages; the deep variant adds a residual block per stage.
#[derive(Debug, Clone)]
pub struct CnnRefiner {
    pub stem: ConvBnRelu,
    pub down1: ConvBnRelu,
    pub down2: ConvBnRelu,
    pub res1: Option<ResBlock>,
    pub res2: Option<ResBlock>,
    in_features: usize,
}

impl CnnRefiner {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, stem: usize, width: usize, deep: bool) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            stem: ConvBnRelu::new(store, &n("stem"), in_features + 1, stem, 1)?,
            down1: ConvBnRelu::new(store, &n("down1"), stem, width, 2)?,
            down2: ConvBnRelu::new(store, &n("down2"), width, width, 2)?,
            res1: if deep { Some(ResBlock::new(store, &n("res1"), width)?) } else { None },
            res2: if deep { Some(ResBlock::new(store, &n("res2"), width)?) } else { None },
            in_features,
        })
    }

    /// `error_grid` is `(B, 14, 14)`; `features` is `(B, C, 56, 56)` from the first backbone level.
    pub fn forward(&self, error_grid: &Tensor, features: &Tensor, train: bool) -> Result<MultiScale> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.in_features || error_grid.dims() != [b, 14, 14] {
            return Err(Error::shape(format!(
                "cnn_refine got error grid {:?} and features {:?}",
                error_grid.dims(),
                features.dims()
            )));
        }
        let err = resize::resize_bilinear(&error_grid.unsqueeze(1)?, h, w)?;
        let x = Tensor::cat(&[&err, &features.to_dtype(err.dtype())?], 1)?;
        let s56 = self.stem.forward(&x, train)?;
        let mut s28 = self.down1.forward(&s56, train)?;
        if let Some(r) = &self.res1 {
            s28 = r.forward(&s28, train)?;
        }
        let mut s14 = self.down2.forward(&s28, train)?;
        if let Some(r) = &self.res2 {
            s14 = r.forward(&s14, train)?;
        }
        Ok(MultiScale { s56, s28, s14 })
    }
}

/// `LN(x + MHA(x))` over the `H·W` positions of a feature map.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub mha: MultiHeadAttention,
    pub ln: LayerNorm,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), ch, heads)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), ch)?,
        })
    }

    /// `(B, C, H, W)` in and out, plus the attention probabilities.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Attended)> {
        let (b, c, h, w) = x.dims4()?;
        let seq = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let att = self.mha.forward(&seq, &seq)?;
        let y = self.ln.forward(&(&seq + &att.output)?)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((y, att))
    }
}

/// Fuses the attended coarse scale, the 28 px scale and the error map into coarse logits at 28 px.
#[derive(Debug, Clone)]
pub struct CoarseHead {
    pub fuse: ConvBnRelu,
    pub out: Conv2d,
}

impl CoarseHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            fuse: ConvBnRelu::new(store, &format!("{name}.fuse"), 2 * width + 1, width, 1)?,
            out: Conv2d::new(store, &format!("{name}.out"), width, 1, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, s14: &Tensor, s28: &Tensor, error_grid: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = s28.dims4()?;
        let up = resize::resize_bilinear(s14, h, w)?;
        let err = resize::resize_bilinear(&error_grid.unsqueeze(1)?, h, w)?;
        let x = Tensor::cat(&[&up, s28, &err], 1)?;
        self.out.forward(&self.fuse.forward(&x, train)?)
    }
}

/// Row sums of attention probabilities, accumulated in f64 and flattened.
pub fn attention_row_sums(weights: &Tensor) -> Result<Vec<f64>> {
    crate::nn::to_f64_vec(&weights.to_dtype(candle_core::DType::F64)?.sum(D::Minus1)?)
}
