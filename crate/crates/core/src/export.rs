//! Anomaly map export: `.npy` float arrays and 8-bit viridis heatmaps whose
//! PNG text chunks carry the raw score range, so they can be inverted.

use std::collections::HashMap;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const KEY_MIN: &str = "score_min";
pub const KEY_MAX: &str = "score_max";

/// Writes `maps` (each `h · w`) as one `(N, h, w)` float32 array.
pub fn write_maps_npy(path: &Path, maps: &[Vec<f32>], h: usize, w: usize) -> Result<()> {
    let flat: Vec<f32> = maps.iter().flatten().copied().collect();
    let arr = Array3::from_shape_vec((maps.len(), h, w), flat).map_err(|e| Error::shape(e.to_string()))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

pub fn read_maps_npy(path: &Path) -> Result<Array3<f32>> {
    ndarray_npy::read_npy(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

/// Viridis sampled at 256 levels. Interpolation repeats a few 8-bit colors;
/// each repeat is moved one level in its first free channel so decoding is exact.
fn viridis_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let mut seen = std::collections::HashSet::new();
    for (i, c) in lut.iter_mut().enumerate() {
        let col = colorous::VIRIDIS.eval_rational(i, 256);
        let mut rgb = [col.r, col.g, col.b];
        'nudge: for ch in [2, 1, 0] {
            for delta in [1i16, -1] {
                if seen.contains(&rgb) {
                    let mut alt = rgb;
                    alt[ch] = (alt[ch] as i16 + delta).clamp(0, 255) as u8;
                    if !seen.contains(&alt) {
                        rgb = alt;
                        break 'nudge;
                    }
                }
            }
        }
        seen.insert(rgb);
        *c = rgb;
    }
    lut
}

/// Encodes one map as an RGB PNG. Scores are scaled by their own min/max.
pub fn heatmap_png(map: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if map.len() != h * w {
        return Err(Error::shape(format!("heatmap of {} values for {h}x{w}", map.len())));
    }
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let lut = viridis_lut();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for &v in map {
        let idx = if span > 0.0 { (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as usize } else { 0 };
        rgb.extend_from_slice(&lut[idx]);
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let text_err = |e: png::EncodingError| Error::InvalidInput(format!("png encoding: {e}"));
        enc.add_text_chunk(KEY_MIN.into(), format!("{lo:e}")).map_err(text_err)?;
        enc.add_text_chunk(KEY_MAX.into(), format!("{hi:e}")).map_err(text_err)?;
        let mut wr = enc.write_header().map_err(text_err)?;
        wr.write_image_data(&rgb).map_err(text_err)?;
    }
    Ok(out)
}

pub fn write_heatmap_png(path: &Path, map: &[f32], h: usize, w: usize) -> Result<()> {
    std::fs::write(path, heatmap_png(map, h, w)?).map_err(|e| Error::io(path, e))
}

/// Decodes a heatmap back to scores, exact up to the 8-bit quantization step.
pub fn decode_heatmap_png(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let bad = |m: String| Error::InvalidInput(format!("heatmap png: {m}"));
    let mut reader = png::Decoder::new(bytes).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if frame.color_type != png::ColorType::Rgb || frame.bit_depth != png::BitDepth::Eight {
        return Err(bad("expected 8-bit RGB".into()));
    }
    let info = reader.info();
    let text = |k: &str| -> Result<f32> {
        info.uncompressed_latin1_text
            .iter()
            .find(|c| c.keyword == k)
            .ok_or_else(|| bad(format!("missing `{k}` text chunk")))?
            .text
            .parse()
            .map_err(|_| bad(format!("`{k}` is not a number")))
    };
    let (lo, hi) = (text(KEY_MIN)?, text(KEY_MAX)?);
    let index: HashMap<[u8; 3], usize> = viridis_lut().iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut out = Vec::with_capacity((frame.width * frame.height) as usize);
    for px in buf[..frame.buffer_size()].chunks_exact(3) {
        let i = *index.get(&[px[0], px[1], px[2]]).ok_or_else(|| bad("pixel outside the colormap".into()))?;
        out.push(lo + (hi - lo) * i as f32 / 255.0);
    }
    Ok((out, frame.height as usize, frame.width as usize))
}
