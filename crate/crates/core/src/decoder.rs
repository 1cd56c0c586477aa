//! Prompt-guided transformer decoder, reconstruction error map and restoration targets.
//!
//! Each layer is post-norm: self-attention over target tokens, cross-attention
//! into the fused prompt tokens, then a feed-forward block, each wrapped in a
//! residual connection and layer normalisation. A linear head maps the decoded
//! tokens back into the frozen 272-channel feature space, and reconstruction is
//! judged there.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{D_MODEL, FUSED_CHANNELS, GRID};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::rng::{SeedTree, DROPOUT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Also restore the prompt from the target with the same weights (training only).
    pub bidirectional: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: D_MODEL,
            ff_dim: 1024,
            dropout: 0.0,
            bidirectional: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != D_MODEL {
            return Err(Error::Config(format!("decoder.d_model must be {D_MODEL}")));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("decoder needs at least one layer and a nonzero ff_dim".into()));
        }
        Ok(())
    }
}

/// Per-sample cross-attention memory: prompt tokens for each distinct class,
/// plus the class slot of every batch item.
#[derive(Debug, Clone)]
pub struct PromptMemory {
    /// `(U, N, 256)` fused prompt tokens, one row per distinct class.
    pub tokens: Tensor,
    /// `(B,)` u32 index into `tokens` for each batch item.
    pub slots: Tensor,
}

impl PromptMemory {
    /// One prompt per batch item.
    pub fn per_item(tokens: Tensor) -> Result<Self> {
        let b = tokens.dims()[0] as u32;
        let slots = Tensor::arange(0u32, b, tokens.device())?;
        Ok(Self { tokens, slots })
    }
}

/// Seeded inverted dropout; `None` or `p = 0` is the identity.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub p: f64,
    pub seeds: SeedTree,
}

fn dropout(x: &Tensor, ctx: Option<DropoutCtx>, site: &[u64]) -> Result<Tensor> {
    let Some(ctx) = ctx.filter(|c| c.p > 0.0) else {
        return Ok(x.clone());
    };
    let mut rng = ctx.seeds.stream(DROPOUT, site);
    let keep = 1.0 - ctx.p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let m = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * m)?)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Attention probabilities of one layer, `(B, heads, N, N)` each.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub self_weights: Tensor,
    pub cross_weights: Tensor,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.n_heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ff_dim)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, d)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        drop: Option<DropoutCtx>,
        site: u64,
    ) -> Result<(Tensor, LayerAttention)> {
        let sa = self.self_attn.forward(x, x)?;
        let x = self.ln1.forward(&(x + dropout(&sa.output, drop, &[site, 0])?)?)?;
        let ca = self.cross_attn.attend(&x, keys, values)?;
        let x = self.ln2.forward(&(&x + dropout(&ca.output, drop, &[site, 1])?)?)?;
        let h = self.ff2.forward(&self.ff1.forward(&x)?.relu()?)?;
        let x = self.ln3.forward(&(&x + dropout(&h, drop, &[site, 2])?)?)?;
        Ok((
            x,
            LayerAttention {
                self_weights: sa.weights,
                cross_weights: ca.weights,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Decoded tokens back to the 272-channel fused feature space.
    pub head: Linear,
    cfg: DecoderConfig,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// `(B, N, 256)`
    pub tokens: Tensor,
    pub attention: Vec<LayerAttention>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, &format!("{name}.head"), cfg.d_model, FUSED_CHANNELS)?;
        Ok(Self { layers, head, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Decode `target` `(B, N, 256)` against the prompt memory.
    pub fn reconstruct(&self, target: &Tensor, prompt: &PromptMemory, drop: Option<DropoutCtx>) -> Result<Decoded> {
        let d = target.dims3()?.2;
        if d != self.cfg.d_model || prompt.tokens.dims3()?.2 != d {
            return Err(Error::shape(format!(
                "decoder width {} but target has {d} and prompt {:?}",
                self.cfg.d_model,
                prompt.tokens.dims()
            )));
        }
        let mut x = target.clone();
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            // project the prompt once per distinct class, then gather per item
            let (k, v) = layer.cross_attn.project_memory(&prompt.tokens)?;
            let k = k.index_select(&prompt.slots, 0)?;
            let v = v.index_select(&prompt.slots, 0)?;
            let (y, att) = layer.forward(&x, &k, &v, drop, i as u64)?;
            x = y;
            attention.push(att);
        }
        Ok(Decoded { tokens: x, attention })
    }

    /// Decoded tokens mapped to `(B, N, 272)`.
    pub fn to_features(&self, tokens: &Tensor) -> Result<Tensor> {
        self.head.forward(tokens)
    }
}

/// Channel-mean absolute difference per token, reshaped to `(B, 14, 14)`.
pub fn error_map(reconstructed: &Tensor, query: &Tensor) -> Result<Tensor> {
    if reconstructed.dims() != query.dims() {
        return Err(Error::shape(format!("error map of {:?} vs {:?}", reconstructed.dims(), query.dims())));
    }
    let (b, n, _) = query.dims3()?;
    if n != GRID * GRID {
        return Err(Error::shape(format!("error map needs {} tokens, got {n}", GRID * GRID)));
    }
    Ok((reconstructed - query)?.abs()?.mean(D::Minus1)?.reshape((b, GRID, GRID))?)
}

/// Supervision target for the reconstruction: the clean counterpart's features
/// for pseudo-anomalous inputs, otherwise the input's own features.
pub fn restoration_target<'a>(input: &'a Tensor, clean: Option<&'a Tensor>) -> &'a Tensor {
    clean.unwrap_or(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::{DType, Device};

    fn small_cfg() -> DecoderConfig {
        DecoderConfig { n_layers: 2, n_heads: 4, ff_dim: 64, ..DecoderConfig::default() }
    }

    fn rand(shape: (usize, usize, usize), seed: u64) -> Tensor {
        let mut r = SeedTree::new(seed).stream("t", &[]);
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes_rows_and_determinism() -> Result<()> {
        let mut store = ParamStore::new(2, DType::F64);
        let dec = Decoder::new(&mut store, "dec", &small_cfg())?;
        let t = rand((2, 196, 256), 1);
        let p = PromptMemory::per_item(rand((2, 196, 256), 2))?;
        let a = dec.reconstruct(&t, &p, None)?;
        assert_eq!(a.tokens.dims(), &[2, 196, 256]);
        for att in &a.attention {
            for w in [&att.self_weights, &att.cross_weights] {
                for s in to_f64_vec(&w.sum(D::Minus1)?)? {
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        let b = dec.reconstruct(&t, &p, None)?;
        assert_eq!(to_f64_vec(&a.tokens)?, to_f64_vec(&b.tokens)?);
        assert_eq!(dec.to_features(&a.tokens)?.dims(), &[2, 196, 272]);
        assert!(dec.reconstruct(&rand((1, 196, 128), 3), &p, None).is_err());
        Ok(())
    }

    #[test]
    fn shared_prompt_slots_match_per_item_prompts() -> Result<()> {
        let mut store = ParamStore::new(5, DType::F64);
        let dec = Decoder::new(&mut store, "dec", &small_cfg())?;
        let t = rand((3, 196, 256), 1);
        let uniq = rand((2, 196, 256), 9);
        let slots = Tensor::new(&[1u32, 0, 1], &Device::Cpu)?;
        let shared = PromptMemory { tokens: uniq.clone(), slots: slots.clone() };
        let per = PromptMemory::per_item(uniq.index_select(&slots, 0)?)?;
        let a = to_f64_vec(&dec.reconstruct(&t, &shared, None)?.tokens)?;
        let b = to_f64_vec(&dec.reconstruct(&t, &per, None)?.tokens)?;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn uniform_prompt_tokens_make_output_permutation_invariant() -> Result<()> {
        let mut store = ParamStore::new(3, DType::F64);
        let dec = Decoder::new(&mut store, "dec", &small_cfg())?;
        let t = rand((1, 196, 256), 4);
        let row = rand((1, 1, 256), 5);
        let uniform = row.broadcast_as((1, 196, 256))?.contiguous()?;
        let perm: Vec<u32> = (0..196u32).rev().collect();
        let permuted = uniform.index_select(&Tensor::new(perm.as_slice(), &Device::Cpu)?, 1)?;
        let a = to_f64_vec(&dec.reconstruct(&t, &PromptMemory::per_item(uniform)?, None)?.tokens)?;
        let b = to_f64_vec(&dec.reconstruct(&t, &PromptMemory::per_item(permuted)?, None)?.tokens)?;
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn error_map_cases() -> Result<()> {
        let q = rand((2, 196, 256), 7);
        assert!(to_f64_vec(&error_map(&q, &q)?)?.iter().all(|&v| v == 0.0));
        let shifted = (&q + 1.0)?;
        for v in to_f64_vec(&error_map(&shifted, &q)?)? {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let r = rand((2, 196, 256), 8);
        let m = to_f64_vec(&error_map(&r, &q)?)?;
        let (rv, qv) = (to_f64_vec(&r)?, to_f64_vec(&q)?);
        for (k, got) in m.iter().enumerate() {
            let oracle: f64 = (0..256).map(|c| (rv[k * 256 + c] - qv[k * 256 + c]).abs()).sum::<f64>() / 256.0;
            assert!((got - oracle).abs() < 1e-6);
        }
        assert!(error_map(&r, &rand((2, 196, 255), 1)).is_err());
        Ok(())
    }

    #[test]
    fn dropout_is_seeded() -> Result<()> {
        let x = Tensor::ones((4, 64), DType::F64, &Device::Cpu)?;
        let ctx = Some(DropoutCtx { p: 0.5, seeds: SeedTree::new(1) });
        let a = to_f64_vec(&dropout(&x, ctx, &[0])?)?;
        assert_eq!(a, to_f64_vec(&dropout(&x, ctx, &[0])?)?);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(to_f64_vec(&dropout(&x, None, &[0])?)?, vec![1.0; 256]);
        Ok(())
    }

    #[test]
    fn repeated_steps_do_not_increase_reconstruction_loss() -> Result<()> {
        let mut store = ParamStore::new(11, DType::F64);
        let dec = Decoder::new(&mut store, "dec", &DecoderConfig { n_layers: 1, n_heads: 4, ff_dim: 32, ..DecoderConfig::default() })?;
        let t = rand((1, 196, 256), 1);
        let p = PromptMemory::per_item(rand((1, 196, 256), 2))?;
        let target = rand((1, 196, 272), 3);
        let vars: Vec<_> = store.params().values().cloned().collect();
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let out = dec.to_features(&dec.reconstruct(&t, &p, None)?.tokens)?;
            let loss = (out - &target)?.sqr()?.mean_all()?;
            let l = loss.to_scalar::<f64>()?;
            assert!(l <= last + 1e-12, "{l} > {last}");
            last = l;
            let grads = loss.backward()?;
            for v in &vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    v.set(&(v.as_tensor() - (g * 1e-3)?)?)?;
                }
            }
        }
        Ok(())
    }
}
