//! Bilinear and nearest-neighbour resampling with half-pixel centres
//! (source coordinate `(i + 0.5) * in / out - 0.5`, clamped at the borders).

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;
use crate::exec::Execution;

/// Row-major `out × inp` matrix applying 1-D linear interpolation.
pub fn interp_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        m[i * inp + i1] += frac;
    }
    m
}

/// Two source taps and the weight of the second, per output index.
fn taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(inp - 1);
            (i0, (i0 + 1).min(inp - 1), s - i0 as f64)
        })
        .collect()
}

type Tap<T> = (usize, usize, T, T);

fn typed_taps<T: WithDType>(inp: usize, out: usize) -> Vec<Tap<T>> {
    taps(inp, out).into_iter().map(|(a, b, f)| (a, b, T::from_f64(1.0 - f), T::from_f64(f))).collect()
}

/// Separable resize of one plane: rows first, then columns.
fn resample_plane<T: WithDType>(src: &[T], w: usize, ty: &[Tap<T>], tx: &[Tap<T>], tmp: &mut [T], dst: &mut [T]) {
    let ow = tx.len();
    for (y, row) in src.chunks_exact(w).enumerate() {
        let line = &mut tmp[y * ow..(y + 1) * ow];
        for (v, &(x0, x1, a, b)) in line.iter_mut().zip(tx) {
            *v = row[x0] * a + row[x1] * b;
        }
    }
    for (oy, &(y0, y1, a, b)) in ty.iter().enumerate() {
        let (r0, r1) = (&tmp[y0 * ow..(y0 + 1) * ow], &tmp[y1 * ow..(y1 + 1) * ow]);
        for ((v, &p), &q) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(r0).zip(r1) {
            *v = p * a + q * b;
        }
    }
}

/// Adjoint of [`resample_plane`]: spreads output gradients back onto the taps.
fn spread_plane<T: WithDType>(g: &[T], w: usize, ty: &[Tap<T>], tx: &[Tap<T>], tmp: &mut [T], dst: &mut [T]) {
    let ow = tx.len();
    tmp.fill(T::zero());
    dst.fill(T::zero());
    for (oy, &(y0, y1, a, b)) in ty.iter().enumerate() {
        for (ox, &gv) in g[oy * ow..(oy + 1) * ow].iter().enumerate() {
            tmp[y0 * ow + ox] += gv * a;
            tmp[y1 * ow + ox] += gv * b;
        }
    }
    for (y, line) in tmp.chunks_exact(ow).enumerate() {
        let row = &mut dst[y * w..(y + 1) * w];
        for (&gv, &(x0, x1, a, b)) in line.iter().zip(tx) {
            row[x0] += gv * a;
            row[x1] += gv * b;
        }
    }
}

/// Bilinear resize as a graph op; `adjoint` runs the transpose map from `(oh, ow)` back to `(h, w)`.
struct Bilinear {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    adjoint: bool,
}

impl Bilinear {
    fn run<T: WithDType>(&self, x: &[T], planes: usize) -> Vec<T> {
        let ty = typed_taps::<T>(self.h, self.oh);
        let tx = typed_taps::<T>(self.w, self.ow);
        let (inp, out) = if self.adjoint { (self.oh * self.ow, self.h * self.w) } else { (self.h * self.w, self.oh * self.ow) };
        let chunks = Execution::default().map_range(planes, |p| {
            let mut tmp = vec![T::zero(); self.h * self.ow];
            let mut dst = vec![T::zero(); out];
            let src = &x[p * inp..(p + 1) * inp];
            if self.adjoint {
                spread_plane(src, self.w, &ty, &tx, &mut tmp, &mut dst);
            } else {
                resample_plane(src, self.w, &ty, &tx, &mut tmp, &mut dst);
            }
            dst
        });
        chunks.concat()
    }
}

impl CustomOp1 for Bilinear {
    fn name(&self) -> &'static str {
        "resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, ..) = l.shape().dims4()?;
        let shape = if self.adjoint { (b, c, self.h, self.w) } else { (b, c, self.oh, self.ow) };
        let Some((lo, hi)) = l.contiguous_offsets() else {
            candle_core::bail!("resize expects a contiguous input");
        };
        let v = match s {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(&d[lo..hi], b * c)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(&d[lo..hi], b * c)),
            other => candle_core::bail!("resize: unsupported dtype {:?}", other.dtype()),
        };
        Ok((v, Shape::from(shape)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        if !arg.track_op() {
            return Ok(None);
        }
        let adj = Bilinear { adjoint: !self.adjoint, ..*self };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&adj)?))
    }
}

/// Bilinear resize of a `(B, C, H, W)` tensor; differentiable.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(Bilinear { h, w, oh, ow, adjoint: false })?)
}

/// Bilinear resize of a planar `c × h × w` buffer.
pub fn resize_bilinear_planar(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0f32; c * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ci * oh + oy) * ow + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a single-channel `h × w` buffer (keeps binary masks binary).
pub fn resize_nearest(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let pick = |i: usize, inp: usize, out: usize| (((i as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut out = vec![0f32; oh * ow];
    for oy in 0..oh {
        let sy = pick(oy, h, oh);
        for ox in 0..ow {
            out[oy * ow + ox] = src[sy * w + pick(ox, w, ow)];
        }
    }
    out
}

/// Average pooling of a single-channel map by an integer factor.
pub fn area_downsample(src: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    let mut out = vec![0f32; oh * ow];
    for y in 0..oh * factor {
        for x in 0..ow * factor {
            out[(y / factor) * ow + x / factor] += src[y * w + x];
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}
