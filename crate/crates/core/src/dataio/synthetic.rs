//! Desk-scale stand-in for an industrial inspection corpus: each class is a
//! parametric texture family with per-sample jitter, and anomalous test images
//! carry planted defects (intensity blobs, scratches, rotated patch swaps) whose
//! masks are exactly the set of pixels the defect changed.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CorpusIndex, ImageSample, Split, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::SeedTree;

pub const SYNTHETIC_FAMILIES: [&str; 6] = ["stripes", "checker", "rings", "weave", "dots", "waves"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Blob,
    Scratch,
    PatchSwap,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::PatchSwap => "patch_swap",
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn class_name(idx: usize) -> String {
    let base = SYNTHETIC_FAMILIES[idx % SYNTHETIC_FAMILIES.len()];
    match idx / SYNTHETIC_FAMILIES.len() {
        0 => base.to_string(),
        k => format!("{base}{}", k + 1),
    }
}

/// Fixed per-class palette: two colours, chosen from the class index.
fn palette(idx: usize) -> ([f32; 3], [f32; 3]) {
    const P: [([f32; 3], [f32; 3]); 6] = [
        ([0.20, 0.25, 0.55], [0.80, 0.78, 0.60]),
        ([0.15, 0.15, 0.15], [0.85, 0.85, 0.80]),
        ([0.55, 0.30, 0.15], [0.90, 0.70, 0.45]),
        ([0.25, 0.45, 0.25], [0.70, 0.85, 0.60]),
        ([0.70, 0.70, 0.72], [0.25, 0.20, 0.35]),
        ([0.35, 0.50, 0.70], [0.85, 0.90, 0.95]),
    ];
    let (a, b) = P[idx % P.len()];
    let shift = (idx / P.len()) as f32 * 0.07;
    (a.map(|v| (v + shift).min(1.0)), b.map(|v| (v - shift).max(0.0)))
}

/// Render a normal texture sample for class `idx`.
fn render_texture(idx: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let family = idx % SYNTHETIC_FAMILIES.len();
    let (c0, c1) = palette(idx);
    let jitter_col = Normal::new(0.0f32, 0.015).unwrap();
    let c0 = c0.map(|v| v + jitter_col.sample(rng));
    let c1 = c1.map(|v| v + jitter_col.sample(rng));
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let ox: f32 = rng.random_range(0.0..40.0);
    let oy: f32 = rng.random_range(0.0..40.0);
    let angle: f32 = (30.0 + rng.random_range(-3.0f32..3.0)).to_radians();
    let period: f32 = 18.0 + rng.random_range(-1.0f32..1.0);
    let cx: f32 = 112.0 + rng.random_range(-6.0f32..6.0);
    let cy: f32 = 112.0 + rng.random_range(-6.0f32..6.0);
    let noise = Normal::new(0.0f32, 0.02).unwrap();

    let mut out = vec![0f32; 3 * PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (xf, yf) = (x as f32, y as f32);
            let t = match family {
                0 => 0.5 + 0.5 * (2.0 * PI * (xf * angle.cos() + yf * angle.sin()) / period + phase).sin(),
                1 => {
                    let cell = 20.0;
                    (((xf + ox) / cell).floor() as i64 + ((yf + oy) / cell).floor() as i64).rem_euclid(2) as f32
                }
                2 => {
                    let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                    0.5 + 0.5 * (2.0 * PI * r / 22.0 + phase).cos()
                }
                3 => {
                    0.5 + 0.25 * ((2.0 * PI * (xf + ox) / 14.0).sin() + (2.0 * PI * (yf + oy) / 14.0).sin())
                }
                4 => {
                    let s = 24.0;
                    let dx = (xf + ox).rem_euclid(s) - s / 2.0;
                    let dy = (yf + oy).rem_euclid(s) - s / 2.0;
                    if dx * dx + dy * dy <= 25.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.5 + 0.5 * (2.0 * PI * xf / 26.0 + 1.5 * (2.0 * PI * yf / 60.0 + phase).sin()).sin(),
            };
            let i = y * IMAGE_SIZE + x;
            let n = noise.sample(rng);
            for c in 0..3 {
                out[c * PIXELS + i] = quantize(c0[c] * (1.0 - t) + c1[c] * t + n);
            }
        }
    }
    out
}

fn blend(px: &mut [f32], i: usize, color: [f32; 3], strength: f32) {
    for c in 0..3 {
        let v = &mut px[c * PIXELS + i];
        *v = quantize(*v * (1.0 - strength) + color[c] * strength);
    }
}

fn apply_defect(clean: &[f32], kind: DefectKind, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut px = clean.to_vec();
    let n = IMAGE_SIZE as f32;
    match kind {
        DefectKind::Blob => {
            let (cx, cy) = (rng.random_range(24.0..n - 24.0), rng.random_range(24.0..n - 24.0));
            let (a, b): (f32, f32) = (rng.random_range(8.0..22.0), rng.random_range(8.0..22.0));
            let rot: f32 = rng.random_range(0.0..PI);
            let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                    let u = dx * rot.cos() + dy * rot.sin();
                    let v = -dx * rot.sin() + dy * rot.cos();
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        blend(&mut px, y * IMAGE_SIZE + x, color, 0.7);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let (x0, y0) = (rng.random_range(20.0..n - 20.0), rng.random_range(20.0..n - 20.0));
            let len: f32 = rng.random_range(50.0..140.0);
            let dir: f32 = rng.random_range(0.0..2.0 * PI);
            let (x1, y1) = ((x0 + len * dir.cos()).clamp(0.0, n - 1.0), (y0 + len * dir.sin()).clamp(0.0, n - 1.0));
            let width: f32 = rng.random_range(1.2..2.5);
            let color = if rng.random_bool(0.5) { [0.03; 3] } else { [0.97; 3] };
            let (vx, vy) = (x1 - x0, y1 - y0);
            let l2 = (vx * vx + vy * vy).max(1e-6);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let (px_, py_) = (x as f32 - x0, y as f32 - y0);
                    let t = ((px_ * vx + py_ * vy) / l2).clamp(0.0, 1.0);
                    let (ex, ey) = (px_ - t * vx, py_ - t * vy);
                    if (ex * ex + ey * ey).sqrt() <= width {
                        blend(&mut px, y * IMAGE_SIZE + x, color, 0.9);
                    }
                }
            }
        }
        DefectKind::PatchSwap => {
            let size = rng.random_range(28..44usize);
            let max = IMAGE_SIZE - size;
            let (sx, sy) = (rng.random_range(0..max), rng.random_range(0..max));
            let (dx, dy) = (rng.random_range(0..max), rng.random_range(0..max));
            for j in 0..size {
                for i in 0..size {
                    // transposed copy: a 90° reflection of the source patch
                    let src = (sy + i) * IMAGE_SIZE + sx + j;
                    let dst = (dy + j) * IMAGE_SIZE + dx + i;
                    for c in 0..3 {
                        px[c * PIXELS + dst] = clean[c * PIXELS + src];
                    }
                }
            }
        }
    }
    px
}

/// Planted defect on a clean image: returns the defected pixels and a mask that is
/// 1 exactly where any channel changed. Redraws until the defect changes something.
pub(crate) fn plant_defect(clean: &[f32], kind: DefectKind, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    loop {
        let px = apply_defect(clean, kind, rng);
        let mask: Vec<f32> = (0..PIXELS)
            .map(|i| (0..3).any(|c| px[c * PIXELS + i] != clean[c * PIXELS + i]) as u8 as f32)
            .collect();
        if mask.iter().any(|&m| m > 0.0) {
            return (px, mask);
        }
    }
}

struct Job {
    class_idx: usize,
    split: Split,
    index: usize,
    anomalous: bool,
}

/// Deterministic synthetic corpus. Half of each class's test split (rounded down) is defective.
pub fn generate_synthetic_corpus(
    n_classes: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    exec: Execution,
) -> Result<CorpusIndex> {
    if n_classes == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput("synthetic corpus counts must all be at least 1".into()));
    }
    let seeds = SeedTree::new(seed);
    let mut jobs = Vec::new();
    for class_idx in 0..n_classes {
        for index in 0..n_train {
            jobs.push(Job { class_idx, split: Split::Train, index, anomalous: false });
        }
        for index in 0..n_test {
            jobs.push(Job { class_idx, split: Split::Test, index, anomalous: index % 2 == 1 });
        }
    }
    let samples = exec.map(&jobs, |job| {
        let split_tag = match job.split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let mut rng = seeds.stream("synthetic", &[job.class_idx as u64, split_tag, job.index as u64]);
        let class_id = class_name(job.class_idx);
        let clean = render_texture(job.class_idx, &mut rng);
        let (pixels, mask, defect) = if job.anomalous {
            let kind = match rng.random_range(0..3) {
                0 => DefectKind::Blob,
                1 => DefectKind::Scratch,
                _ => DefectKind::PatchSwap,
            };
            let (px, m) = plant_defect(&clean, kind, &mut rng);
            (px, Some(m), kind.name().to_string())
        } else if job.split == Split::Test {
            (clean, Some(vec![0.0; PIXELS]), "good".to_string())
        } else {
            (clean, None, "good".to_string())
        };
        let id = match job.split {
            Split::Train => format!("{class_id}/train/good/{:03}.png", job.index),
            Split::Test => format!("{class_id}/test/{defect}/{:03}.png", job.index),
        };
        ImageSample {
            id,
            pixels,
            mask,
            class_id,
            split: job.split,
            is_anomalous: job.anomalous,
            defect_type: defect,
        }
    });
    CorpusIndex::new(samples)
}
