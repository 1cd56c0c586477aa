use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{CorpusIndex, ImageSample, Split, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::resize::{resize_bilinear_planar, resize_nearest};

/// On-disk corpus layouts. The synthetic layout mirrors the MVTec tree:
/// `<root>/<class>/train/good/*.png`, `<root>/<class>/test/<defect>/*.png`,
/// `<root>/<class>/ground_truth/<defect>/*_mask.png`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Synthetic,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::Config(format!("unknown corpus layout `{other}`"))),
        }
    }
}

struct Entry {
    id: String,
    image: PathBuf,
    mask: Option<PathBuf>,
    class_id: String,
    split: Split,
    defect_type: String,
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|x| x.to_str()).map(|x| x.eq_ignore_ascii_case("png")) == Some(true) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn scan(root: &Path) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for class_dir in sorted_dirs(root)? {
        let train_dir = class_dir.join("train").join("good");
        if !train_dir.is_dir() {
            continue;
        }
        let class_id = name_of(&class_dir);
        for img in sorted_pngs(&train_dir)? {
            entries.push(Entry {
                id: format!("{class_id}/train/good/{}", name_of(&img)),
                image: img,
                mask: None,
                class_id: class_id.clone(),
                split: Split::Train,
                defect_type: "good".into(),
            });
        }
        let test_dir = class_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        for defect_dir in sorted_dirs(&test_dir)? {
            let defect = name_of(&defect_dir);
            for img in sorted_pngs(&defect_dir)? {
                let mask = (defect != "good").then(|| {
                    let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    class_dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"))
                });
                entries.push(Entry {
                    id: format!("{class_id}/test/{defect}/{}", name_of(&img)),
                    image: img,
                    mask,
                    class_id: class_id.clone(),
                    split: Split::Test,
                    defect_type: defect.clone(),
                });
            }
        }
    }
    Ok(entries)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Decode an RGB file, resized bilinearly to 224×224, planar in `[0, 1]`.
/// Returns the pixels and the original `(height, width)`.
pub fn load_image_file(path: &Path) -> Result<(Vec<f32>, (u32, u32))> {
    let rgb = open_image(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w_us, h_us) = (w as usize, h as usize);
    let mut planar = vec![0f32; 3 * w_us * h_us];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            planar[(c * h_us + y as usize) * w_us + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Ok((resize_bilinear_planar(&planar, 3, h_us, w_us, IMAGE_SIZE, IMAGE_SIZE), (h, w)))
}

fn load_mask_file(path: &Path) -> Result<(Vec<f32>, (u32, u32))> {
    let g = open_image(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let raw: Vec<f32> = g.pixels().map(|p| if p.0[0] > 0 { 1.0 } else { 0.0 }).collect();
    Ok((resize_nearest(&raw, h as usize, w as usize, IMAGE_SIZE, IMAGE_SIZE), (h, w)))
}

fn load_entry(e: &Entry) -> Result<ImageSample> {
    let (pixels, dims) = load_image_file(&e.image)?;
    let is_anomalous = e.split == Split::Test && e.defect_type != "good";
    let mask = match (&e.split, &e.mask) {
        (Split::Train, _) => None,
        (Split::Test, None) => Some(vec![0.0; PIXELS]),
        (Split::Test, Some(mp)) if mp.is_file() => {
            let (m, mdims) = load_mask_file(mp)?;
            if mdims != dims {
                return Err(Error::CorruptSample {
                    path: e.image.clone(),
                    reason: format!("image is {}x{} but mask {} is {}x{}", dims.1, dims.0, mp.display(), mdims.1, mdims.0),
                });
            }
            Some(m)
        }
        // Missing mask: surfaced by evaluation, which lists the affected classes.
        (Split::Test, Some(_)) => None,
    };
    Ok(ImageSample {
        id: e.id.clone(),
        pixels,
        mask,
        class_id: e.class_id.clone(),
        split: e.split,
        is_anomalous,
        defect_type: e.defect_type.clone(),
    })
}

/// Load a corpus tree. Sample order is lexicographic by relative path.
pub fn load_corpus(root: &Path, layout: Layout, exec: Execution) -> Result<CorpusIndex> {
    if !root.is_dir() {
        return Err(Error::CorpusNotFound(root.to_path_buf()));
    }
    // synthetic corpora are written in the MVTec tree, so one scanner serves both
    let entries = match layout {
        Layout::Mvtec | Layout::Synthetic => scan(root)?,
    };
    if entries.is_empty() {
        return Err(Error::CorpusNotFound(root.to_path_buf()));
    }
    let samples = exec.try_map(&entries, load_entry)?;
    CorpusIndex::new(samples)
}

fn to_rgb(pixels: &[f32]) -> RgbImage {
    let n = IMAGE_SIZE as u32;
    RgbImage::from_fn(n, n, |x, y| {
        let i = y as usize * IMAGE_SIZE + x as usize;
        let q = |c: usize| (pixels[c * PIXELS + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Write a corpus to disk in the MVTec layout (masks for anomalous test images only).
pub fn write_corpus(corpus: &CorpusIndex, root: &Path, exec: Execution) -> Result<()> {
    exec.try_map(corpus.samples(), |s| -> Result<()> {
        let path = root.join(&s.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        to_rgb(&s.pixels).save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        if s.is_anomalous {
            let stem = Path::new(&s.id).file_stem().unwrap().to_string_lossy().into_owned();
            let mdir = root.join(&s.class_id).join("ground_truth").join(&s.defect_type);
            fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            let mask = s.mask_or_zeros();
            let n = IMAGE_SIZE as u32;
            let g = GrayImage::from_fn(n, n, |x, y| {
                image::Luma([if mask[y as usize * IMAGE_SIZE + x as usize] > 0.5 { 255 } else { 0 }])
            });
            let mp = mdir.join(format!("{stem}_mask.png"));
            g.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;
        }
        Ok(())
    })?;
    Ok(())
}
