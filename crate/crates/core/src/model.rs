//! The assembled detector: frozen backbone and text encoder, tokenizer, prompt
//! fusion, reconstruction decoder and segmentor, with the component toggles.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::backbone::{
    fuse_levels, grid_to_tokens, images_to_tensor, ExtractorKind, FeatureExtractor, Tokenizer, D_MODEL,
};
use crate::config::{Config, Toggles};
use crate::dataio::{select_prompt_image, CorpusIndex, ImageSample, IMAGE_SIZE, PIXELS};
use crate::decoder::{error_map, restoration_target, Decoder, DropoutCtx, PromptMemory};
use crate::error::{Error, Result};
use crate::losses::{composite_objective, LossBreakdown, ObjectiveInputs};
use crate::metrics::AnomalyModel;
use crate::nn::{to_f32_vec, ParamStore};
use crate::prompts::{
    build_prompt_texts, fuse_prompts, pool_texts, EncoderKind, PrecomputedEncoder, PromptRegistry, StubEncoder,
    TextEncoder, TextProjector,
};
use crate::rng::{seed_from_str, SeedTree};
use crate::segmentor::{masks_to_coarse, SegInputs, Segmentor};

/// Frozen per-class prompt material: the reference image and its pooled text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompt {
    pub image: Vec<f32>,
    pub pooled_text: Vec<f32>,
}

pub fn build_text_encoder(cfg: &Config) -> Result<Box<dyn TextEncoder>> {
    Ok(match cfg.prompts.encoder {
        EncoderKind::Stub => Box::new(StubEncoder::new(cfg.prompts.stub_seed)),
        EncoderKind::ClipFrozen => {
            let p = cfg.prompts.embeddings_path.as_ref().ok_or_else(|| Error::Config("missing prompts.embeddings_path".into()))?;
            Box::new(PrecomputedEncoder::from_file(p)?)
        }
    })
}

pub fn build_backbone(cfg: &Config) -> Result<FeatureExtractor> {
    match cfg.backbone.kind {
        ExtractorKind::Standin => FeatureExtractor::standin(cfg.backbone.standin_seed),
        ExtractorKind::Pretrained => {
            let p = cfg.backbone.weights_path.as_ref().ok_or_else(|| Error::Config("missing backbone.weights_path".into()))?;
            FeatureExtractor::pretrained(p)
        }
    }
}

/// Reference image and pooled text for every class of the corpus.
pub fn corpus_prompts(cfg: &Config, corpus: &CorpusIndex) -> Result<BTreeMap<String, ClassPrompt>> {
    let registry = match &cfg.prompts.registry_path {
        Some(p) => PromptRegistry::from_file(p)?,
        None => PromptRegistry::builtin(),
    };
    let encoder = build_text_encoder(cfg)?;
    let mut out = BTreeMap::new();
    for class in corpus.classes() {
        let image = select_prompt_image(corpus, class)?.pixels.clone();
        let pooled_text = pool_texts(&build_prompt_texts(class, &registry), encoder.as_ref(), cfg.prompts.pooling)?;
        out.insert(class.clone(), ClassPrompt { image, pooled_text });
    }
    Ok(out)
}

/// Noise draws for the denoiser's training loss.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    pub t: Vec<usize>,
    /// `(B, 1, 28, 28)`
    pub eps: Tensor,
}

/// One training batch. `inputs[i]` is `clean[i]` or a pseudo-anomalous copy of it.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: Vec<ImageSample>,
    pub clean: Vec<ImageSample>,
    pub diffusion: Option<DiffusionDraw>,
}

/// Inference outputs for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, 224, 224)` scores in `[0, 1]`.
    pub maps: Tensor,
    /// `(B, 14, 14)` reconstruction error.
    pub error_grid: Tensor,
    /// `(B, 1, 28, 28)` map before refinement.
    pub coarse: Tensor,
}

pub struct PromptMad {
    cfg: Config,
    store: ParamStore,
    backbone: FeatureExtractor,
    pub tokenizer: Tokenizer,
    pub projector: Option<TextProjector>,
    pub decoder: Decoder,
    pub segmentor: Segmentor,
    prompts: BTreeMap<String, ClassPrompt>,
}

impl PromptMad {
    /// Parameters are initialised from `cfg.train.seed`; each parameter has its
    /// own stream keyed by name, so toggles never shift another component's init.
    pub fn new(cfg: &Config, prompts: BTreeMap<String, ClassPrompt>, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if prompts.is_empty() {
            return Err(Error::InvalidInput("model needs at least one class prompt".into()));
        }
        let backbone = build_backbone(cfg)?;
        let mut store = ParamStore::new(cfg.train.seed, dtype);
        let tokenizer = Tokenizer::new(&mut store, "tokenizer")?;
        let pooled_dim = prompts.values().next().map(|p| p.pooled_text.len()).unwrap_or(0);
        if prompts.values().any(|p| p.pooled_text.len() != pooled_dim || p.image.len() != 3 * PIXELS) {
            return Err(Error::InvalidInput("class prompts disagree in size".into()));
        }
        let projector = if cfg.train.toggles.use_vlm {
            Some(TextProjector::new(&mut store, "text_proj", pooled_dim)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, "decoder", &cfg.decoder)?;
        let segmentor = Segmentor::new(&mut store, "segmentor", &cfg.segmentor, cfg.train.toggles.use_segmentor)?;
        Ok(Self { cfg: cfg.clone(), store, backbone, tokenizer, projector, decoder, segmentor, prompts })
    }

    pub fn for_corpus(cfg: &Config, corpus: &CorpusIndex, dtype: DType) -> Result<Self> {
        Self::new(cfg, corpus_prompts(cfg, corpus)?, dtype)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn toggles(&self) -> Toggles {
        self.cfg.train.toggles
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &FeatureExtractor {
        &self.backbone
    }

    pub fn prompts(&self) -> &BTreeMap<String, ClassPrompt> {
        &self.prompts
    }

    /// Digest of everything that must stay frozen: backbone weights and the
    /// encoded prompt texts.
    pub fn frozen_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.backbone.digest()?.as_bytes());
        for (c, p) in &self.prompts {
            h.update(c.as_bytes());
            for v in p.pooled_text.iter().chain(&p.image) {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Prompt memory for a list of class ids, plus the projected text `(B, 256)`
    /// per item (zeros when text prompting is off) and the prompts' fused features
    /// `(B, 196, 272)`.
    fn prompt_memory(&self, classes: &[&str]) -> Result<(PromptMemory, Tensor, Tensor)> {
        let distinct: Vec<&str> = classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut images = Vec::with_capacity(distinct.len() * 3 * PIXELS);
        let mut pooled = Vec::new();
        for c in &distinct {
            let p = self.prompts.get(*c).ok_or_else(|| Error::UnknownClass(c.to_string()))?;
            images.extend_from_slice(&p.image);
            pooled.extend_from_slice(&p.pooled_text);
        }
        let u = distinct.len();
        let slots: Vec<u32> = classes.iter().map(|c| distinct.binary_search(c).unwrap() as u32).collect();
        let slots = Tensor::from_vec(slots, classes.len(), &Device::Cpu)?;
        let img = Tensor::from_vec(images, (u, 3, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?;
        let fused = fuse_levels(&self.backbone.extract(&img)?)?;
        let visual = self.tokenizer.tokenize(&fused)?;
        let prompt_feats = grid_to_tokens(&fused.to_dtype(self.dtype())?)?.index_select(&slots, 0)?;
        let (tokens, text) = match &self.projector {
            Some(proj) => {
                let dim = pooled.len() / u;
                let x = Tensor::from_vec(pooled, (u, dim), &Device::Cpu)?.to_dtype(self.dtype())?;
                let text = proj.project_batch(&x)?;
                (fuse_prompts(&visual, &text, self.cfg.prompts.fusion)?, text.index_select(&slots, 0)?)
            }
            None => (visual, Tensor::zeros((classes.len(), D_MODEL), self.dtype(), &Device::Cpu)?),
        };
        Ok((PromptMemory { tokens, slots }, text, prompt_feats))
    }

    /// Composite objective of one batch. Gradients reach the tokenizer, text
    /// projection, decoder and segmentor.
    pub fn training_loss(&self, batch: &TrainBatch, dropout: Option<DropoutCtx>) -> Result<LossBreakdown> {
        let b = batch.inputs.len();
        if b == 0 || batch.clean.len() != b {
            return Err(Error::InvalidInput(format!("batch of {b} inputs and {} clean images", batch.clean.len())));
        }
        let dt = self.dtype();
        let inputs: Vec<&ImageSample> = batch.inputs.iter().collect();
        let stack = self.backbone.extract_samples(&inputs)?;
        let fused = fuse_levels(&stack)?;
        let clean_fused = if batch.inputs.iter().any(|s| s.is_anomalous) {
            let clean: Vec<&ImageSample> = batch.clean.iter().collect();
            Some(fuse_levels(&self.backbone.extract_samples(&clean)?)?)
        } else {
            None
        };
        let query = grid_to_tokens(&fused.to_dtype(dt)?)?;
        let clean_query = clean_fused.map(|f| grid_to_tokens(&f.to_dtype(dt)?)).transpose()?;
        let target = restoration_target(&query, clean_query.as_ref());

        let classes: Vec<&str> = batch.inputs.iter().map(|s| s.class_id.as_str()).collect();
        let (memory, text, prompt_feats) = self.prompt_memory(&classes)?;
        let tokens = self.tokenizer.tokenize(&fused)?;
        let recon = self.decoder.to_features(&self.decoder.reconstruct(&tokens, &memory, dropout)?.tokens)?;

        // reverse direction: restore the prompt from the target, shared weights
        let reverse = if self.cfg.decoder.bidirectional {
            let prompt_tokens = memory.tokens.index_select(&memory.slots, 0)?;
            let back = self.decoder.reconstruct(&prompt_tokens, &PromptMemory::per_item(tokens.clone())?, dropout)?;
            Some(self.decoder.to_features(&back.tokens)?)
        } else {
            None
        };

        let err = error_map(&recon.detach(), &query)?;
        let image = images_to_tensor(&inputs)?.to_dtype(dt)?;
        let features = stack.levels[0].to_dtype(dt)?;
        let seg = self.segmentor.forward_train(&SegInputs { error_grid: &err, features: &features, image: &image, text: &text })?;

        let masks: Vec<Vec<f32>> = batch.inputs.iter().map(|s| s.mask_or_zeros()).collect();
        let flat: Vec<f32> = masks.iter().flatten().copied().collect();
        let mask_t = Tensor::from_vec(flat, (b, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?.to_dtype(dt)?;

        let diffusion = match (&batch.diffusion, self.segmentor.denoiser.is_some()) {
            (Some(d), true) => {
                let m28 = masks_to_coarse(&masks, dt)?;
                self.segmentor.diffusion_loss(&seg.coarse, &m28, &text, &d.t, &d.eps.to_dtype(dt)?)?
            }
            _ => None,
        };

        let mut recon_pairs = vec![(&recon, target)];
        if let Some(r) = &reverse {
            recon_pairs.push((r, &prompt_feats));
        }
        let inp = ObjectiveInputs { recon: recon_pairs, seg: Some((&seg.map.scores, &mask_t)), diffusion: diffusion.as_ref() };
        let mut weights = self.cfg.losses.weights();
        if !self.cfg.train.toggles.use_focal {
            weights.w_focal = 0.0;
        }
        composite_objective(&inp, &weights, &self.cfg.losses.focal(), self.cfg.losses.dice_smooth)
    }

    /// Noise key of a sample: depends only on the seed and the sample id.
    pub fn noise_key(&self, sample: &ImageSample) -> u64 {
        seed_from_str(self.cfg.train.seed, &sample.id)
    }

    pub fn predict_batch(&self, samples: &[&ImageSample]) -> Result<Prediction> {
        let dt = self.dtype();
        let stack = self.backbone.extract_samples(samples)?;
        let fused = fuse_levels(&stack)?;
        let query = grid_to_tokens(&fused.to_dtype(dt)?)?;
        let classes: Vec<&str> = samples.iter().map(|s| s.class_id.as_str()).collect();
        let (memory, text, _) = self.prompt_memory(&classes)?;
        let tokens = self.tokenizer.tokenize(&fused)?;
        let recon = self.decoder.to_features(&self.decoder.reconstruct(&tokens, &memory, None)?.tokens)?;
        let err = error_map(&recon, &query)?;
        let image = images_to_tensor(samples)?.to_dtype(dt)?;
        let features = stack.levels[0].to_dtype(dt)?;
        let keys: Vec<u64> = samples.iter().map(|s| self.noise_key(s)).collect();
        let seeds = SeedTree::new(self.cfg.train.seed);
        let out = self
            .segmentor
            .infer(&SegInputs { error_grid: &err, features: &features, image: &image, text: &text }, &seeds, &keys)?;
        Ok(Prediction { maps: out.map.scores.detach(), error_grid: err.detach(), coarse: out.coarse.detach() })
    }

    /// Replaces parameter and buffer values by name; every name must exist with the same shape.
    pub fn load_tensors(&self, params: &BTreeMap<String, Tensor>, buffers: &BTreeMap<String, Tensor>) -> Result<()> {
        for (kind, own, given) in [("parameter", self.store.params(), params), ("buffer", self.store.buffers(), buffers)] {
            if own.len() != given.len() || own.keys().any(|k| !given.contains_key(k)) {
                return Err(Error::CheckpointIncompatible(format!("{kind} names differ from the configured model")));
            }
            for (name, var) in own {
                let t = &given[name];
                if t.dims() != var.dims() {
                    return Err(Error::CheckpointIncompatible(format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }
}

impl AnomalyModel for PromptMad {
    fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>> {
        let p = self.predict_batch(samples)?;
        let flat = to_f32_vec(&p.maps)?;
        Ok(flat.chunks(PIXELS).map(<[f32]>::to_vec).collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::generate_synthetic_corpus;
    use crate::decoder::DecoderConfig;
    use crate::exec::Execution;
    use crate::nn::to_f64_vec;
    use crate::segmentor::SegmentorConfig;

    /// A small but complete configuration for fast tests.
    pub(crate) fn tiny_config() -> Config {
        let mut c = Config::default();
        c.decoder = DecoderConfig { n_layers: 1, n_heads: 4, ff_dim: 64, ..Default::default() };
        c.segmentor = SegmentorConfig { width: 8, stem_width: 4, up_width: 4, d_t: 8, heads: 2, ..Default::default() };
        c.train.batch_size = 2;
        c
    }

    pub(crate) fn tiny_corpus() -> CorpusIndex {
        generate_synthetic_corpus(2, 2, 2, 5, Execution::default()).unwrap()
    }

    #[test]
    fn prediction_shapes_and_determinism() -> Result<()> {
        let corpus = tiny_corpus();
        let m = PromptMad::for_corpus(&tiny_config(), &corpus, DType::F32)?;
        let test = corpus.test();
        let refs: Vec<&ImageSample> = test.iter().map(|s| s.as_ref()).collect();
        let p = m.predict_batch(&refs)?;
        assert_eq!(p.maps.dims(), &[refs.len(), 224, 224]);
        assert_eq!(p.error_grid.dims(), &[refs.len(), 14, 14]);
        assert!(to_f64_vec(&p.maps)?.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(to_f64_vec(&p.error_grid)?.iter().all(|&v| v >= 0.0));
        // batching must not change any item's map
        let single = m.predict(&refs[1..2])?;
        let all = m.predict(&refs)?;
        assert_eq!(single[0], all[1]);
        Ok(())
    }

    #[test]
    fn toggles_shape_the_parameter_set() -> Result<()> {
        let corpus = tiny_corpus();
        let full = PromptMad::for_corpus(&tiny_config(), &corpus, DType::F32)?;
        let mut cfg = tiny_config();
        cfg.train.toggles = Toggles { use_vlm: false, use_focal: false, use_segmentor: false };
        let base = PromptMad::for_corpus(&cfg, &corpus, DType::F32)?;
        assert!(base.store().count_with_prefix("text_proj") == 0 && full.store().count_with_prefix("text_proj") > 0);
        assert!(base.store().count_with_prefix("segmentor.denoiser") == 0);
        // shared parameters start identical
        for (name, v) in base.store().params() {
            let w = &full.store().params()[name];
            assert_eq!(to_f64_vec(v.as_tensor())?, to_f64_vec(w.as_tensor())?, "{name}");
        }
        Ok(())
    }

    #[test]
    fn training_loss_terms_and_focal_toggle() -> Result<()> {
        let corpus = tiny_corpus();
        let clean: Vec<ImageSample> = corpus.train().iter().map(|s| (**s).clone()).collect();
        let spec = crate::dataio::PseudoAnomalySpec::new(0.02, 0.05, crate::dataio::PatchSource::SelfImage, 1);
        let mut inputs = clean.clone();
        inputs[0] = crate::dataio::synthesize_pseudo_anomaly(&clean[0], &spec, None)?.0;
        let eps = Tensor::randn(0f32, 1.0, (inputs.len(), 1, 28, 28), &Device::Cpu)?;
        let batch = TrainBatch { inputs, clean, diffusion: Some(DiffusionDraw { t: vec![3; 4], eps }) };
        let m = PromptMad::for_corpus(&tiny_config(), &corpus, DType::F32)?;
        let l = m.training_loss(&batch, None)?;
        assert!(l.mse > 0.0 && l.dice > 0.0 && l.focal > 0.0 && l.diffusion > 0.0);
        let sum = l.mse + l.dice + l.focal + l.diffusion;
        assert!((l.total_value()? - sum).abs() < 1e-4 * sum);

        let mut cfg = tiny_config();
        cfg.train.toggles.use_focal = false;
        let m2 = PromptMad::for_corpus(&cfg, &corpus, DType::F32)?;
        let l2 = m2.training_loss(&batch, None)?;
        assert_eq!(l2.focal, 0.0);
        assert_eq!(l2.mse, l.mse);
        Ok(())
    }
}
