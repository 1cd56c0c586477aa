//! Image- and pixel-level ROC AUC and average precision, and per-class reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{CorpusIndex, ImageSample, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Image score: the maximum of the anomaly map.
pub fn image_score(scores: &[f32]) -> f32 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

fn counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

/// Indices sorted by ascending score, with ties kept adjacent.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (p, n) = counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative".into()));
    }
    let idx = order(scores);
    // twice the rank sum of positives, so tied groups stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        // ranks i+1..=j+1 average to (i + j + 2) / 2
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (p as u128, n as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Step-wise precision–recall integration over descending thresholds; tied scores form one step.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (p, _) = counts(labels);
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut idx = order(scores);
    idx.reverse();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += pos;
        seen += j - i + 1;
        if pos > 0 {
            ap += (pos as f64 / p as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

/// Separable Gaussian blur of a 224×224 map; `sigma <= 0` leaves it unchanged.
pub fn gaussian_smooth(map: &[f32], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return map.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let n = IMAGE_SIZE as isize;
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; PIXELS];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (ki, d) in (-r..=r).enumerate() {
                    let (sy, sx) = if horizontal { (y, (x + d).clamp(0, n - 1)) } else { ((y + d).clamp(0, n - 1), x) };
                    acc += k[ki] * src[(sy * n + sx) as usize] as f64;
                }
                out[(y * n + x) as usize] = (acc / norm) as f32;
            }
        }
        out
    };
    pass(&pass(map, true), false)
}

/// Something that maps test images to 224×224 anomaly maps in `[0, 1]`.
pub trait AnomalyModel: Sync {
    fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>>;
}

/// Returns each sample's ground-truth mask as its map.
pub struct OracleModel;

impl AnomalyModel for OracleModel {
    fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>> {
        Ok(samples.iter().map(|s| s.mask_or_zeros()).collect())
    }
}

/// Returns the same value everywhere.
pub struct ConstantModel(pub f32);

impl AnomalyModel for ConstantModel {
    fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>> {
        Ok(samples.iter().map(|_| vec![self.0; PIXELS]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub i_auc: f64,
    pub i_ap: f64,
    pub p_auc: f64,
    pub p_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub mean: ClassMetrics,
    /// Classes whose metrics are undefined (no anomalous or no normal test image).
    pub undefined: Vec<String>,
}

impl MetricsReport {
    /// Table with columns Class, AUC, AP, P-AUC, P-AP in percent and a closing Mean row.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Class | AUC | AP | P-AUC | P-AP |\n|---|---|---|---|---|\n");
        let row = |s: &mut String, name: &str, m: &ClassMetrics| {
            let _ = writeln!(
                s,
                "| {name} | {:.2} | {:.2} | {:.2} | {:.2} |",
                100.0 * m.i_auc,
                100.0 * m.i_ap,
                100.0 * m.p_auc,
                100.0 * m.p_ap
            );
        };
        for (c, m) in &self.per_class {
            row(&mut s, c, m);
        }
        for c in &self.undefined {
            let _ = writeln!(s, "| {c} | n/a | n/a | n/a | n/a |");
        }
        row(&mut s, "Mean", &self.mean);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Gaussian smoothing of maps before scoring; 0 disables it.
    pub smoothing_sigma: f64,
    pub batch_size: usize,
}

fn class_metrics(maps: &[Vec<f32>], samples: &[&ImageSample]) -> Result<ClassMetrics> {
    let img_scores: Vec<f64> = maps.iter().map(|m| image_score(m) as f64).collect();
    let img_labels: Vec<bool> = samples.iter().map(|s| s.is_anomalous).collect();
    let mut px_scores = Vec::with_capacity(maps.len() * PIXELS);
    let mut px_labels = Vec::with_capacity(maps.len() * PIXELS);
    for (m, s) in maps.iter().zip(samples) {
        px_scores.extend(m.iter().map(|&v| v as f64));
        match &s.mask {
            Some(mask) => px_labels.extend(mask.iter().map(|&v| v > 0.5)),
            None => px_labels.extend(std::iter::repeat(false).take(PIXELS)),
        }
    }
    Ok(ClassMetrics {
        i_auc: roc_auc(&img_scores, &img_labels)?,
        i_ap: average_precision(&img_scores, &img_labels)?,
        p_auc: roc_auc(&px_scores, &px_labels)?,
        p_ap: average_precision(&px_scores, &px_labels)?,
    })
}

/// Scores every test image and reports per-class and mean metrics. Pixel
/// scores are pooled per class. Classes without both normal and anomalous
/// test images are reported as undefined and left out of the mean.
pub fn evaluate(model: &dyn AnomalyModel, corpus: &CorpusIndex, opts: &EvalOptions, exec: Execution) -> Result<MetricsReport> {
    let missing: Vec<String> = corpus
        .classes()
        .iter()
        .filter(|c| corpus.test().iter().any(|s| &s.class_id == *c && s.is_anomalous && s.mask.is_none()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMasks(missing));
    }
    let bs = opts.batch_size.max(1);
    let mut per_class = BTreeMap::new();
    let mut undefined = Vec::new();
    for class in corpus.classes() {
        let tests = corpus.class_split(class, crate::dataio::Split::Test);
        let refs: Vec<&ImageSample> = tests.iter().map(|s| s.as_ref()).collect();
        if refs.is_empty() {
            continue;
        }
        let chunks: Vec<&[&ImageSample]> = refs.chunks(bs).collect();
        let maps: Vec<Vec<f32>> = exec
            .try_map(&chunks, |c| model.predict(c))?
            .into_iter()
            .flatten()
            .map(|m| gaussian_smooth(&m, opts.smoothing_sigma))
            .collect();
        match class_metrics(&maps, &refs) {
            Ok(m) => {
                per_class.insert(class.clone(), m);
            }
            Err(Error::UndefinedMetric(why)) => {
                log::warn!("metrics for class `{class}` are undefined ({why}); excluded from the mean");
                undefined.push(class.clone());
            }
            Err(e) => return Err(e),
        }
    }
    let n = per_class.len().max(1) as f64;
    let sum = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / n;
    let mean = ClassMetrics {
        i_auc: sum(|m| m.i_auc),
        i_ap: sum(|m| m.i_ap),
        p_auc: sum(|m| m.p_auc),
        p_ap: sum(|m| m.p_ap),
    };
    Ok(MetricsReport { per_class, mean, undefined })
}
