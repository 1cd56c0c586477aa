//! Text-guided segmentor: residual CNN and spatial attention produce a coarse
//! map at 28 px, a conditional diffusion process refines it, and a U-Net style
//! upsampler lifts it to 224 px.
//!
//! The shallow variant (baseline) keeps only the stem, the two stride-2 stages,
//! the coarse head and the upsampler.

pub mod cnn;
pub mod diffusion;
pub mod upsample;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use cnn::{CnnRefiner, CoarseHead, MultiScale, ResBlock, SpatialAttention};
pub use diffusion::{
    diffusion_refine, make_beta_schedule, timestep_embed, BetaSchedule, CountingDenoiser, Denoise, RefineInit,
    TimestepMlp, UNetDenoiser,
};
pub use upsample::{AnomalyMap, Upsampler};

use crate::backbone::{D_MODEL, STANDIN_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{ops, resize, ParamStore};
use crate::rng::SeedTree;

/// Resolution at which the coarse map and the diffusion process live.
pub const COARSE: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentorConfig {
    pub diffusion_steps: usize,
    pub heads: usize,
    pub d_t: usize,
    pub init: RefineInit,
    /// Channels of the 28 and 14 px stages and of the denoiser.
    pub width: usize,
    /// Channels of the 56 px stem.
    pub stem_width: usize,
    /// Channels of the upsampling stages.
    pub up_width: usize,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 10,
            heads: 4,
            d_t: 64,
            init: RefineInit::NoisedMap,
            width: 32,
            stem_width: 16,
            up_width: 8,
        }
    }
}

/// Everything the segmentor reads for one batch.
#[derive(Debug, Clone)]
pub struct SegInputs<'a> {
    /// `(B, 14, 14)`
    pub error_grid: &'a Tensor,
    /// `(B, 24, 56, 56)` first backbone level.
    pub features: &'a Tensor,
    /// `(B, 3, 224, 224)`
    pub image: &'a Tensor,
    /// `(B, 256)`; zeros when text prompting is off.
    pub text: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct SegOutputs {
    /// `(B, 1, 28, 28)` coarse probabilities before refinement.
    pub coarse: Tensor,
    /// The map handed to the upsampler (coarse when training, refined at inference).
    pub upsampled_from: Tensor,
    pub map: AnomalyMap,
}

#[derive(Debug, Clone)]
pub struct Segmentor {
    pub cnn: CnnRefiner,
    pub attention: Option<SpatialAttention>,
    pub head: CoarseHead,
    pub denoiser: Option<UNetDenoiser>,
    pub upsampler: Upsampler,
    schedule: BetaSchedule,
    cfg: SegmentorConfig,
}

impl Segmentor {
    /// `full` selects the text-guided variant; otherwise the shallow baseline refiner.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SegmentorConfig, full: bool) -> Result<Self> {
        let schedule = make_beta_schedule(cfg.diffusion_steps)?;
        if cfg.width % cfg.heads.max(1) != 0 || cfg.heads == 0 {
            return Err(Error::Config(format!("segmentor width {} not divisible by {} heads", cfg.width, cfg.heads)));
        }
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            cnn: CnnRefiner::new(store, &n("cnn"), STANDIN_CHANNELS[0], cfg.stem_width, cfg.width, full)?,
            attention: if full { Some(SpatialAttention::new(store, &n("attn"), cfg.width, cfg.heads)?) } else { None },
            head: CoarseHead::new(store, &n("head"), cfg.width)?,
            denoiser: if full { Some(UNetDenoiser::new(store, &n("denoiser"), cfg.width, cfg.d_t, D_MODEL)?) } else { None },
            upsampler: Upsampler::new(store, &n("up"), cfg.stem_width, cfg.up_width)?,
            schedule,
            cfg: cfg.clone(),
        })
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &SegmentorConfig {
        &self.cfg
    }

    /// Coarse probabilities at 28 px plus the multi-scale features.
    pub fn coarse(&self, inp: &SegInputs, train: bool) -> Result<(Tensor, MultiScale)> {
        let ms = self.cnn.forward(inp.error_grid, inp.features, train)?;
        let s14 = match &self.attention {
            Some(a) => a.forward(&ms.s14)?.0,
            None => ms.s14.clone(),
        };
        let logits = self.head.forward(&s14, &ms.s28, inp.error_grid, train)?;
        Ok((ops::sigmoid(&logits)?, ms))
    }

    /// Training pass: the upsampler sees the coarse map so gradients reach the CNN.
    pub fn forward_train(&self, inp: &SegInputs) -> Result<SegOutputs> {
        let (coarse, ms) = self.coarse(inp, true)?;
        let map = self.upsampler.forward(&coarse, &ms.s56, inp.image)?;
        Ok(SegOutputs { upsampled_from: coarse.clone(), coarse, map })
    }

    /// ε-prediction loss of the denoiser on ground-truth masks at 28 px.
    /// `t` and `eps` are drawn by the caller from the diffusion stream.
    pub fn diffusion_loss(&self, coarse: &Tensor, mask28: &Tensor, text: &Tensor, t: &[usize], eps: &Tensor) -> Result<Option<Tensor>> {
        match &self.denoiser {
            Some(d) => Ok(Some(diffusion::denoising_loss(d, mask28, coarse, text, &self.schedule, t, eps)?)),
            None => Ok(None),
        }
    }

    /// Inference pass. `keys[i]` seeds the diffusion noise of item `i`.
    pub fn infer(&self, inp: &SegInputs, seeds: &SeedTree, keys: &[u64]) -> Result<SegOutputs> {
        let (coarse, ms) = self.coarse(inp, false)?;
        let refined = match &self.denoiser {
            Some(d) => diffusion_refine(d, &coarse, inp.text, &self.schedule, seeds, keys, self.cfg.init)?,
            None => coarse.clone(),
        };
        let map = self.upsampler.forward(&refined, &ms.s56, inp.image)?;
        Ok(SegOutputs { coarse, upsampled_from: refined, map })
    }
}

/// Binary masks `(B, 224, 224)` → area-averaged `(B, 1, 28, 28)`.
pub fn masks_to_coarse(masks: &[Vec<f32>], dtype: candle_core::DType) -> Result<Tensor> {
    let f = crate::dataio::IMAGE_SIZE / COARSE;
    let mut data = Vec::with_capacity(masks.len() * COARSE * COARSE);
    for m in masks {
        data.extend(resize::area_downsample(m, crate::dataio::IMAGE_SIZE, crate::dataio::IMAGE_SIZE, f));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, COARSE, COARSE), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
