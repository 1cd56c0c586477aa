use candle_core::{Tensor, Var, D};

use super::{ops, ParamStore};
use crate::error::{Error, Result};

/// Affine map on the last axis. Weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound)?,
            bias: store.constant(&format!("{name}.bias"), &[out_dim], 0.0)?,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if last != self.in_dim {
            return Err(Error::shape(format!("linear expects width {}, got {last}", self.in_dim)));
        }
        let rows = x.elem_count() / last;
        let y = x.contiguous()?.reshape((rows, last))?.matmul(self.weight.as_tensor())?;
        let y = ops::channel_bias(&y, self.bias.as_tensor(), 1)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(ops::channel_affine(&normed, self.gamma.as_tensor(), self.beta.as_tensor(), x.rank() - 1)?)
    }
}

/// Square-kernel 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt())?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad })
    }

    /// Same shape as [`Conv2d::new`] with all-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, pad: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 0.0)?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?);
        Ok(Self { weight, bias, stride: 1, pad })
    }

    /// Convolution with externally supplied (frozen) weights.
    pub fn from_parts(weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Self {
        Self { weight, bias, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), self.stride, self.pad)?;
        match &self.bias {
            Some(b) => Ok(ops::channel_bias(&y, b.as_tensor(), 1)?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over `(B, H, W)` per channel with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[ch], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[ch], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[ch], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[ch], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let n = b * h * w;
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, n))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let m = self.momentum;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.flatten_all()?, var.flatten_all()?)
        } else {
            (self.running_mean.as_tensor().clone(), self.running_var.as_tensor().clone())
        };
        // fold the normalisation into one per-channel scale and shift
        let scale = (self.gamma.as_tensor() / (var + self.eps)?.sqrt()?)?;
        let shift = (self.beta.as_tensor() - (mean * &scale)?)?;
        Ok(ops::channel_affine(x, &scale, &shift, 1)?)
    }
}

/// Output of an attention call; `weights` is `(B, heads, Nq, Nk)`.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.dim / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Project keys and values once; reusable across queries sharing a memory.
    pub fn project_memory(&self, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.split(&self.k.forward(memory)?)?, self.split(&self.v.forward(memory)?)?))
    }

    pub fn attend(&self, query: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Attended> {
        let (b, n, d) = query.dims3()?;
        if d != self.dim {
            return Err(Error::shape(format!("attention width {} but query has {d}", self.dim)));
        }
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let q = (self.split(&self.q.forward(query)?)? * scale)?;
        let scores = q.matmul(&keys.t()?)?;
        let weights = ops::softmax_last_dim(&scores)?;
        let ctx = weights.matmul(values)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        Ok(Attended { output: self.o.forward(&ctx)?, weights })
    }

    pub fn forward(&self, query: &Tensor, memory: &Tensor) -> Result<Attended> {
        let (k, v) = self.project_memory(memory)?;
        self.attend(query, &k, &v)
    }
}
