//! CutPaste-style pseudo-anomalies: a rectangle cut from a source image is
//! pasted, optionally rotated, somewhere else on a normal image.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSample, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    /// Cut from the image being modified.
    #[serde(rename = "self")]
    SelfImage,
    /// Cut from a donor image supplied by the caller.
    OtherSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnomalySpec {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub patch_source: PatchSource,
    pub seed: u64,
    /// Rotate the pasted patch by a random angle in [-45°, 45°].
    pub rotate: bool,
}

impl PseudoAnomalySpec {
    pub fn new(min_area_fraction: f64, max_area_fraction: f64, patch_source: PatchSource, seed: u64) -> Self {
        Self {
            min_area_fraction,
            max_area_fraction,
            patch_source,
            seed,
            rotate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.min_area_fraction, self.max_area_fraction);
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidSpec(format!("need 0 < min ≤ max < 1, got [{lo}, {hi}]")));
        }
        if lo * (PIXELS as f64) < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "min area fraction {lo} is below one pixel on a {IMAGE_SIZE}x{IMAGE_SIZE} image"
            )));
        }
        Ok(())
    }
}

/// Returns the modified copy (mask attached, `is_anomalous = true`) and the mask itself.
/// `donor` is required when the spec asks for [`PatchSource::OtherSample`] and ignored otherwise.
pub fn synthesize_pseudo_anomaly(
    sample: &ImageSample,
    spec: &PseudoAnomalySpec,
    donor: Option<&ImageSample>,
) -> Result<(ImageSample, Vec<f32>)> {
    spec.validate()?;
    sample.check()?;
    if sample.is_anomalous {
        return Err(Error::InvalidInput(format!("{} is already anomalous", sample.id)));
    }
    let source = match spec.patch_source {
        PatchSource::SelfImage => &sample.pixels,
        PatchSource::OtherSample => {
            let d = donor.ok_or_else(|| Error::InvalidInput("patch source other_sample needs a donor image".into()))?;
            d.check()?;
            &d.pixels
        }
    };

    let mut rng = rng_from_seed(spec.seed);
    let n = IMAGE_SIZE as f64;
    let area = rng.random_range(spec.min_area_fraction..=spec.max_area_fraction) * PIXELS as f64;
    // aspect ratio log-uniform in [1/2, 2], narrowed so both sides fit
    let lim = (n * n / area).min(4.0).ln() / 2.0;
    let aspect = rng.random_range(-lim..=lim).exp();
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, IMAGE_SIZE);
    let h = ((area / aspect).sqrt().round() as usize).clamp(1, IMAGE_SIZE);

    let sx = rng.random_range(0..=IMAGE_SIZE - w);
    let sy = rng.random_range(0..=IMAGE_SIZE - h);

    let mut angle = if spec.rotate { rng.random_range(-FRAC_PI_4..=FRAC_PI_4) } else { 0.0 };
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    let extent = |a: f64| (hw * a.cos().abs() + hh * a.sin().abs(), hw * a.sin().abs() + hh * a.cos().abs());
    let (mut ex, mut ey) = extent(angle);
    if 2.0 * ex > n || 2.0 * ey > n {
        angle = 0.0;
        (ex, ey) = extent(0.0);
    }
    let cx = rng.random_range(ex..=n - ex);
    let cy = rng.random_range(ey..=n - ey);

    let mut pixels = sample.pixels.clone();
    let mut mask = vec![0f32; PIXELS];
    let (cos, sin) = (angle.cos(), angle.sin());
    let y0 = (cy - ey).floor().max(0.0) as usize;
    let y1 = ((cy + ey).ceil() as usize).min(IMAGE_SIZE);
    let x0 = (cx - ex).floor().max(0.0) as usize;
    let x1 = ((cx + ex).ceil() as usize).min(IMAGE_SIZE);
    for y in y0..y1 {
        for x in x0..x1 {
            // inverse map of the destination pixel centre into patch coordinates
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = cos * dx + sin * dy + hw;
            let v = -sin * dx + cos * dy + hh;
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let src = (sy + v as usize) * IMAGE_SIZE + sx + u as usize;
            let dst = y * IMAGE_SIZE + x;
            for c in 0..3 {
                pixels[c * PIXELS + dst] = source[c * PIXELS + src];
            }
            mask[dst] = 1.0;
        }
    }

    let out = ImageSample {
        id: sample.id.clone(),
        pixels,
        mask: Some(mask.clone()),
        class_id: sample.class_id.clone(),
        split: sample.split,
        is_anomalous: true,
        defect_type: "pseudo".into(),
    };
    Ok((out, mask))
}
