//! Class text prompts, frozen text encoders, the trainable 256-d projection and
//! fusion of the projected text embedding with visual prompt tokens.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::D_MODEL;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::rng::SeedTree;

const BUILTIN_REGISTRY: &str = include_str!("../assets/prompts.toml");
pub const STUB_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPromptSet {
    pub class_id: String,
    pub normal_texts: Vec<String>,
    pub anomaly_texts: Vec<String>,
}

impl ClassPromptSet {
    pub fn template(class_id: &str) -> Self {
        Self {
            class_id: class_id.to_string(),
            normal_texts: vec![format!("a photo of a normal {class_id}")],
            anomaly_texts: vec![format!("a photo of a {class_id} with a defect")],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryRecord {
    normal: Vec<String>,
    anomalies: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct PromptRegistry {
    sets: BTreeMap<String, ClassPromptSet>,
}

impl PromptRegistry {
    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_REGISTRY).expect("bundled prompt registry parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, RegistryRecord> =
            toml::from_str(text).map_err(|e| Error::Config(format!("prompt registry: {e}")))?;
        let mut sets = BTreeMap::new();
        for (class_id, rec) in raw {
            if rec.normal.is_empty() || rec.anomalies.is_empty() {
                return Err(Error::Config(format!("prompt registry entry `{class_id}` has an empty list")));
            }
            let set = ClassPromptSet {
                class_id: class_id.clone(),
                normal_texts: rec.normal,
                anomaly_texts: rec.anomalies,
            };
            sets.insert(class_id, set);
        }
        Ok(Self { sets })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassPromptSet> {
        self.sets.get(class_id)
    }
}

/// Registered prompts for a class, or the generic template.
pub fn build_prompt_texts(class_id: &str, registry: &PromptRegistry) -> ClassPromptSet {
    registry.get(class_id).cloned().unwrap_or_else(|| ClassPromptSet::template(class_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ClipFrozen,
    Stub,
}

/// A frozen text encoder. Implementations hold no trainable state.
pub trait TextEncoder: Send + Sync {
    fn kind(&self) -> EncoderKind;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>>;
}

/// Hash-seeded Gaussian vector per string, normalised to unit length.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    seeds: SeedTree,
    dim: usize,
}

impl StubEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seeds: SeedTree::new(seed), dim: STUB_DIM }
    }
}

impl TextEncoder for StubEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Stub
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        let mut rng = self.seeds.stream(&format!("text:{text}"), &[]);
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Embeddings produced offline by a frozen vision-language text tower, loaded
/// from a JSON object mapping each prompt string to its vector.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

impl PrecomputedEncoder {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let table: BTreeMap<String, Vec<f32>> = serde_json::from_str(text)?;
        let dim = table.values().next().map(Vec::len).unwrap_or(0);
        if dim == 0 || table.values().any(|v| v.len() != dim) {
            return Err(Error::Config("precomputed text embeddings must be nonempty and share one width".into()));
        }
        Ok(Self { dim, table })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::ClipFrozen
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no precomputed embedding for prompt `{text}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every normal and anomaly text.
    #[default]
    Mean,
    /// Mean of normal texts and mean of anomaly texts, concatenated; the projection sees both.
    ConcatProject,
}

impl Pooling {
    pub fn pooled_dim(self, source_dim: usize) -> usize {
        match self {
            Pooling::Mean => source_dim,
            Pooling::ConcatProject => 2 * source_dim,
        }
    }
}

fn mean_of(encoder: &dyn TextEncoder, texts: &[String]) -> Result<Vec<f32>> {
    let mut acc = vec![0f64; encoder.dim()];
    for t in texts {
        for (a, v) in acc.iter_mut().zip(encoder.encode(t)?) {
            *a += v as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / texts.len() as f64) as f32).collect())
}

/// Frozen encoding plus pooling, before the trainable projection.
pub fn pool_texts(set: &ClassPromptSet, encoder: &dyn TextEncoder, pooling: Pooling) -> Result<Vec<f32>> {
    if set.normal_texts.is_empty() && set.anomaly_texts.is_empty() {
        return Err(Error::InvalidInput(format!("empty prompt set for `{}`", set.class_id)));
    }
    match pooling {
        Pooling::Mean => {
            let all: Vec<String> = set.normal_texts.iter().chain(&set.anomaly_texts).cloned().collect();
            mean_of(encoder, &all)
        }
        Pooling::ConcatProject => {
            if set.normal_texts.is_empty() || set.anomaly_texts.is_empty() {
                return Err(Error::InvalidInput(format!("concat pooling needs both text lists for `{}`", set.class_id)));
            }
            let mut v = mean_of(encoder, &set.normal_texts)?;
            v.extend(mean_of(encoder, &set.anomaly_texts)?);
            Ok(v)
        }
    }
}

/// Projected text embedding, `(256,)`.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vector: Tensor,
    pub source_dim: usize,
    pub encoder_kind: EncoderKind,
}

/// The only trainable part of the prompt path.
#[derive(Debug, Clone)]
pub struct TextProjector {
    pub linear: Linear,
}

impl TextProjector {
    pub fn new(store: &mut ParamStore, name: &str, pooled_dim: usize) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, name, pooled_dim, D_MODEL)? })
    }

    /// Projects a batch of pooled vectors `(B, pooled_dim)` to `(B, 256)`.
    pub fn project_batch(&self, pooled: &Tensor) -> Result<Tensor> {
        self.linear.forward(pooled)
    }
}

pub fn encode_texts(
    set: &ClassPromptSet,
    encoder: &dyn TextEncoder,
    pooling: Pooling,
    projector: &TextProjector,
) -> Result<TextEmbedding> {
    let pooled = pool_texts(set, encoder, pooling)?;
    let n = pooled.len();
    let dt = projector.linear.weight.dtype();
    let x = Tensor::from_vec(pooled, (1, n), &Device::Cpu)?.to_dtype(dt)?;
    Ok(TextEmbedding {
        vector: projector.project_batch(&x)?.reshape(D_MODEL)?,
        source_dim: encoder.dim(),
        encoder_kind: encoder.kind(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Add,
    /// `t ⊙ (1 + e)`, a multiplicative modulation that is the identity at `e = 0`.
    Mul,
}

/// Fuse `(B, N, 256)` visual tokens with a text embedding of shape `(256,)` or `(B, 256)`.
pub fn fuse_prompts(visual: &Tensor, text: &Tensor, fusion: Fusion) -> Result<Tensor> {
    let (b, _, d) = visual.dims3()?;
    let e = match text.dims() {
        [n] if *n == d => text.reshape((1, 1, d))?,
        [bb, n] if *bb == b && *n == d => text.reshape((b, 1, d))?,
        other => return Err(Error::shape(format!("text embedding {other:?} does not fit tokens of width {d}"))),
    };
    Ok(match fusion {
        Fusion::Add => visual.broadcast_add(&e)?,
        Fusion::Mul => visual.broadcast_mul(&(e + 1.0)?)?,
    })
}

/// Visual prompt tokens of a class's reference image plus its text embedding.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub class_id: String,
    pub visual_tokens: Tensor,
    pub text_embedding: TextEmbedding,
}

/// A zero embedding, used when text prompting is switched off.
pub fn zero_text(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros(D_MODEL, dtype, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    #[test]
    fn registry_carries_shipped_defect_lists() {
        let reg = PromptRegistry::builtin();
        let t = build_prompt_texts("transistor", &reg);
        for d in ["bent lead", "cut lead", "damaged case", "misplaced"] {
            assert!(t.anomaly_texts.iter().any(|s| s == d), "{d}");
        }
        assert!(!t.normal_texts.is_empty());
        let p = build_prompt_texts("pill", &reg);
        for d in ["color anomalies", "combined defects", "contamination", "crack", "scratch", "faulty imprint"] {
            assert!(p.anomaly_texts.iter().any(|s| s == d), "{d}");
        }
    }

    #[test]
    fn unregistered_class_uses_template() {
        let s = build_prompt_texts("widget", &PromptRegistry::builtin());
        assert_eq!(s.normal_texts, vec!["a photo of a normal widget"]);
        assert_eq!(s.anomaly_texts, vec!["a photo of a widget with a defect"]);
    }

    #[test]
    fn stub_is_deterministic_unit_norm_and_spreads_texts() -> Result<()> {
        let enc = StubEncoder::new(0);
        let a = enc.encode("bent lead")?;
        assert_eq!(a, enc.encode("bent lead")?);
        let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let b = enc.encode("cut lead")?;
        let cos: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!(cos.abs() < 0.5, "{cos}");
        Ok(())
    }

    #[test]
    fn empty_set_is_rejected() {
        let set = ClassPromptSet { class_id: "x".into(), normal_texts: vec![], anomaly_texts: vec![] };
        assert!(matches!(pool_texts(&set, &StubEncoder::new(0), Pooling::Mean), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn projection_gives_256_dims_and_pooling_widths() -> Result<()> {
        let mut store = ParamStore::new(1, DType::F64);
        let enc = StubEncoder::new(0);
        let set = build_prompt_texts("pill", &PromptRegistry::builtin());
        for pooling in [Pooling::Mean, Pooling::ConcatProject] {
            let proj = TextProjector::new(&mut store, &format!("p{pooling:?}"), pooling.pooled_dim(STUB_DIM))?;
            let e = encode_texts(&set, &enc, pooling, &proj)?;
            assert_eq!(e.vector.dims(), &[256]);
            assert_eq!(e.source_dim, 512);
            assert!(to_f64_vec(&e.vector)?.iter().all(|v| v.is_finite()));
        }
        Ok(())
    }

    #[test]
    fn additive_fusion_differs_by_exactly_the_embedding() -> Result<()> {
        let dev = Device::Cpu;
        let v = Tensor::randn(0f64, 1.0, (2, 196, 256), &dev)?;
        let e = Tensor::randn(0f64, 1.0, 256, &dev)?;
        let z = Tensor::zeros(256, DType::F64, &dev)?;
        assert_eq!(to_f64_vec(&fuse_prompts(&v, &z, Fusion::Add)?)?, to_f64_vec(&v)?);
        assert_eq!(to_f64_vec(&fuse_prompts(&v, &z, Fusion::Mul)?)?, to_f64_vec(&v)?);
        let f = fuse_prompts(&v, &e, Fusion::Add)?;
        let fused = to_f64_vec(&f)?;
        let orig = to_f64_vec(&v)?;
        let ev = to_f64_vec(&e)?;
        for (k, (a, b)) in fused.iter().zip(&orig).enumerate() {
            // recompute in the same order so the comparison is exact
            assert_eq!(*a, b + ev[k % 256]);
        }
        assert!(fuse_prompts(&v, &Tensor::zeros(128, DType::F64, &dev)?, Fusion::Add).is_err());
        Ok(())
    }
}
