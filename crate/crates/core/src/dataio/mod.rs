//! Corpus ingestion, the synthetic defect corpus, pseudo-anomaly synthesis and
//! prompt-image selection.
//!
//! Pixels are stored planar (`3 × 224 × 224`, channel-major) as `f32` in `[0, 1]`;
//! masks are `224 × 224` with values in `{0, 1}`.

mod cutpaste;
mod load;
mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cutpaste::{synthesize_pseudo_anomaly, PatchSource, PseudoAnomalySpec};
pub use load::{load_corpus, load_image_file, write_corpus, Layout};
pub use synthetic::{generate_synthetic_corpus, DefectKind, SYNTHETIC_FAMILIES};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Path relative to the corpus root, e.g. `bottle/test/broken/003.png`.
    pub id: String,
    pub pixels: Vec<f32>,
    pub mask: Option<Vec<f32>>,
    pub class_id: String,
    pub split: Split,
    pub is_anomalous: bool,
    pub defect_type: String,
}

impl ImageSample {
    /// A train-split normal sample with a constant colour; handy for tests.
    pub fn constant(class_id: &str, rgb: [f32; 3]) -> Self {
        let mut pixels = vec![0.0; 3 * PIXELS];
        for (c, v) in rgb.iter().enumerate() {
            pixels[c * PIXELS..(c + 1) * PIXELS].fill(*v);
        }
        Self {
            id: format!("{class_id}/train/good/const.png"),
            pixels,
            mask: None,
            class_id: class_id.to_string(),
            split: Split::Train,
            is_anomalous: false,
            defect_type: "good".into(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.pixels.len() != 3 * PIXELS {
            return Err(Error::shape(format!(
                "sample {} has {} values, expected 3x{IMAGE_SIZE}x{IMAGE_SIZE}",
                self.id,
                self.pixels.len()
            )));
        }
        if let Some(m) = &self.mask {
            if m.len() != PIXELS {
                return Err(Error::shape(format!("mask of {} has {} values", self.id, m.len())));
            }
        }
        Ok(())
    }

    /// Mask, or an all-zero mask when none is attached.
    pub fn mask_or_zeros(&self) -> Vec<f32> {
        self.mask.clone().unwrap_or_else(|| vec![0.0; PIXELS])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub test_anomalous: usize,
}

/// Ordered, immutable view of a corpus. Cheap to clone and share across threads.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    samples: Vec<Arc<ImageSample>>,
    classes: Vec<String>,
}

impl CorpusIndex {
    /// Builds an index, sorting samples by id and validating the unsupervised contract.
    pub fn new(mut samples: Vec<ImageSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for s in &samples {
            s.check()?;
            if s.split == Split::Train && s.is_anomalous {
                return Err(Error::InvalidInput(format!("train sample {} is anomalous", s.id)));
            }
        }
        let mut classes: Vec<String> = samples.iter().map(|s| s.class_id.clone()).collect();
        classes.sort();
        classes.dedup();
        Ok(Self {
            samples: samples.into_iter().map(Arc::new).collect(),
            classes,
        })
    }

    pub fn samples(&self) -> &[Arc<ImageSample>] {
        &self.samples
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn train(&self) -> Vec<Arc<ImageSample>> {
        self.filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> Vec<Arc<ImageSample>> {
        self.filter(|s| s.split == Split::Test)
    }

    pub fn class_split(&self, class_id: &str, split: Split) -> Vec<Arc<ImageSample>> {
        self.filter(|s| s.class_id == class_id && s.split == split)
    }

    fn filter(&self, f: impl Fn(&ImageSample) -> bool) -> Vec<Arc<ImageSample>> {
        self.samples.iter().filter(|s| f(s)).cloned().collect()
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in &self.samples {
            match s.split {
                Split::Train => c.train += 1,
                Split::Test => {
                    c.test += 1;
                    c.test_anomalous += s.is_anomalous as usize;
                }
            }
        }
        c
    }

    pub fn counts_by_class(&self) -> BTreeMap<String, SplitCounts> {
        let mut out: BTreeMap<String, SplitCounts> = BTreeMap::new();
        for s in &self.samples {
            let c = out.entry(s.class_id.clone()).or_default();
            match s.split {
                Split::Train => c.train += 1,
                Split::Test => {
                    c.test += 1;
                    c.test_anomalous += s.is_anomalous as usize;
                }
            }
        }
        out
    }

    /// Content hash of the train split (ids and pixel bytes).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.samples.iter().filter(|s| s.split == Split::Train) {
            h.update(s.id.as_bytes());
            h.update([0u8]);
            for v in &s.pixels {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The normal reference image for a class: the first train sample in sorted order.
pub fn select_prompt_image(corpus: &CorpusIndex, class_id: &str) -> Result<Arc<ImageSample>> {
    corpus
        .samples()
        .iter()
        .find(|s| s.class_id == class_id && s.split == Split::Train)
        .cloned()
        .ok_or_else(|| Error::UnknownClass(class_id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, class: &str, split: Split, anomalous: bool) -> ImageSample {
        let mut s = ImageSample::constant(class, [0.5; 3]);
        s.id = id.into();
        s.split = split;
        s.is_anomalous = anomalous;
        s
    }

    #[test]
    fn index_sorts_and_counts() -> Result<()> {
        let c = CorpusIndex::new(vec![
            sample("b/train/good/1.png", "b", Split::Train, false),
            sample("a/train/good/2.png", "a", Split::Train, false),
            sample("a/train/good/1.png", "a", Split::Train, false),
            sample("a/test/crack/0.png", "a", Split::Test, true),
        ])?;
        assert_eq!(c.classes(), &["a".to_string(), "b".to_string()]);
        assert_eq!(c.samples()[0].id, "a/test/crack/0.png");
        assert_eq!(c.counts(), SplitCounts { train: 3, test: 1, test_anomalous: 1 });
        assert_eq!(select_prompt_image(&c, "a")?.id, "a/train/good/1.png");
        assert!(matches!(select_prompt_image(&c, "zzz"), Err(Error::UnknownClass(_))));
        Ok(())
    }

    #[test]
    fn anomalous_train_samples_are_rejected() {
        let r = CorpusIndex::new(vec![sample("a/train/good/1.png", "a", Split::Train, true)]);
        assert!(r.is_err());
    }

    #[test]
    fn single_train_image_is_the_prompt() -> Result<()> {
        let c = CorpusIndex::new(vec![sample("x/train/good/only.png", "x", Split::Train, false)])?;
        assert_eq!(select_prompt_image(&c, "x")?.id, "x/train/good/only.png");
        Ok(())
    }
}
