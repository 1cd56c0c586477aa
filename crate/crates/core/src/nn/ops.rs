//! CPU kernels that the generic tensor graph handles too slowly: strided 2-D
//! convolution (im2col + gemm), last-axis softmax and a saturating sigmoid.
//! Each one carries its own backward rule so it composes with autograd.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor,
    WithDType,
};

use crate::exec::Execution;

type CResult<T> = candle_core::Result<T>;

trait Real: WithDType + Send + Sync {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
    fn exp(self) -> Self;
    /// Exponential on `(-inf, 0]`; may trade the last bits for speed.
    fn exp_nonpositive(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn exp_nonpositive(self) -> f32 {
        exp_nonpositive_f32(self)
    }
}

/// `e^x` for `x ≤ 0` from a degree-6 polynomial on the reduced argument
/// (Cephes `expf` coefficients), branch-free so softmax rows vectorise.
/// Relative error stays below 3e-7; results under `e^-87` flush to zero.
pub(crate) fn exp_nonpositive_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let under = x < -87.0;
    let x = x.max(-87.0);
    // round to nearest through the 1.5·2^23 shifter; `f32::round` is a libm call on baseline x86-64
    const SHIFT: f32 = 12_582_912.0;
    let n = (x * LOG2E + SHIFT) - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 0.166_666_65;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits((((n as i32) + 127) as u32) << 23);
    if under {
        0.0
    } else {
        y * scale
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom kernel requires a contiguous input"),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> CResult<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            candle_core::bail!("conv2d: kernel {k} does not fit {h}x{w} with padding {pad}");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` that read inside the row for kernel column `kj`.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        // largest ox with ox*s + kj - p <= w - 1
        let hi = if self.w + p > kj { ((self.w + p - kj - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// True when the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (hw, cols) = (self.h * self.w, self.cols());
        for ci in 0..self.c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let (hw, cols) = (self.h * self.w, self.cols());
        x.fill(T::zero());
        for ci in 0..self.c {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let first = lo * self.stride + kj - self.pad;
                        let from = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, v) in line[first..first + from.len()].iter_mut().zip(from) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in line[first..].iter_mut().step_by(self.stride).zip(from) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: (B,C,H,W) x (O,C,K,K) -> (B,O,Ho,Wo).
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Conv2dOp {
    fn run<T: Real>(&self, x: &[T], xl: &Layout, w: &[T], wl: &Layout) -> CResult<(Vec<T>, Shape)> {
        let (b, c, h, wd) = xl.shape().dims4()?;
        let (o, wc, k, k2) = wl.shape().dims4()?;
        if wc != c || k != k2 {
            candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", wl.shape(), xl.shape());
        }
        let g = ConvGeom::new(c, h, wd, k, self.stride, self.pad)?;
        let (rows, cols) = (g.rows(), g.cols());
        let per = c * h * wd;
        let outs = Execution::default().map_range(b, |bi| {
            let xb = &x[bi * per..(bi + 1) * per];
            let col = if g.is_pointwise() {
                std::borrow::Cow::Borrowed(xb)
            } else {
                let mut col = vec![T::zero(); rows * cols];
                g.im2col(xb, &mut col);
                std::borrow::Cow::Owned(col)
            };
            let mut out = vec![T::zero(); o * cols];
            unsafe {
                T::gemm(
                    o, rows, cols, w.as_ptr(), rows as isize, 1, col.as_ptr(), cols as isize, 1,
                    T::zero(), out.as_mut_ptr(), cols as isize,
                );
            }
            out
        });
        Ok((outs.concat(), Shape::from((b, o, g.ho, g.wo))))
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => {
                let (v, s) = self.run(contiguous::<f32>(s1, l1)?, l1, contiguous::<f32>(s2, l2)?, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            DType::F64 => {
                let (v, s) = self.run(contiguous::<f64>(s1, l1)?, l1, contiguous::<f64>(s2, l2)?, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &ConvInputGrad { stride: self.stride, pad: self.pad, h, w: wd })?)
        } else {
            None
        };
        let gw = if w.track_op() {
            let k = w.dim(2)?;
            Some(x.apply_op2_no_bwd(&grad, &ConvWeightGrad { stride: self.stride, pad: self.pad, k })?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

/// d(loss)/d(input): (B,O,Ho,Wo) x (O,C,K,K) -> (B,C,H,W).
struct ConvInputGrad {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl ConvInputGrad {
    fn run<T: Real>(&self, g: &[T], gl: &Layout, w: &[T], wl: &Layout) -> CResult<(Vec<T>, Shape)> {
        let (b, o, _, _) = gl.shape().dims4()?;
        let (_, c, k, _) = wl.shape().dims4()?;
        let geom = ConvGeom::new(c, self.h, self.w, k, self.stride, self.pad)?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let per_out = o * cols;
        let outs = Execution::default().map_range(b, |bi| {
            let mut col = vec![T::zero(); rows * cols];
            // col = W^T (rows x o) * g_b (o x cols)
            unsafe {
                T::gemm(
                    rows, o, cols, w.as_ptr(), 1, rows as isize, g[bi * per_out..].as_ptr(),
                    cols as isize, 1, T::zero(), col.as_mut_ptr(), cols as isize,
                );
            }
            if geom.is_pointwise() {
                return col;
            }
            let mut xg = vec![T::zero(); c * self.h * self.w];
            geom.col2im(&col, &mut xg);
            xg
        });
        Ok((outs.concat(), Shape::from((b, c, self.h, self.w))))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => {
                let (v, s) = self.run(contiguous::<f32>(s1, l1)?, l1, contiguous::<f32>(s2, l2)?, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            DType::F64 => {
                let (v, s) = self.run(contiguous::<f64>(s1, l1)?, l1, contiguous::<f64>(s2, l2)?, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        }
    }
}

/// d(loss)/d(weight): (B,C,H,W) x (B,O,Ho,Wo) -> (O,C,K,K).
struct ConvWeightGrad {
    stride: usize,
    pad: usize,
    k: usize,
}

impl ConvWeightGrad {
    fn run<T: Real>(&self, x: &[T], xl: &Layout, g: &[T], gl: &Layout) -> CResult<(Vec<T>, Shape)> {
        let (b, c, h, wd) = xl.shape().dims4()?;
        let (_, o, _, _) = gl.shape().dims4()?;
        let geom = ConvGeom::new(c, h, wd, self.k, self.stride, self.pad)?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let (per_in, per_out) = (c * h * wd, o * cols);
        let partials = Execution::default().map_range(b, |bi| {
            let xb = &x[bi * per_in..(bi + 1) * per_in];
            let col = if geom.is_pointwise() {
                std::borrow::Cow::Borrowed(xb)
            } else {
                let mut col = vec![T::zero(); rows * cols];
                geom.im2col(xb, &mut col);
                std::borrow::Cow::Owned(col)
            };
            let mut gw = vec![T::zero(); o * rows];
            // gw = g_b (o x cols) * col^T (cols x rows)
            unsafe {
                T::gemm(
                    o, cols, rows, g[bi * per_out..].as_ptr(), cols as isize, 1, col.as_ptr(), 1,
                    cols as isize, T::zero(), gw.as_mut_ptr(), rows as isize,
                );
            }
            gw
        });
        let mut acc = vec![T::zero(); o * rows];
        for p in partials {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        Ok((acc, Shape::from((o, c, self.k, self.k))))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => {
                let (v, s) = self.run(contiguous::<f32>(s1, l1)?, l1, contiguous::<f32>(s2, l2)?, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            DType::F64 => {
                let (v, s) = self.run(contiguous::<f64>(s1, l1)?, l1, contiguous::<f64>(s2, l2)?, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        }
    }
}

/// 2-D convolution without bias, square kernel.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}

struct SoftmaxLastDim;

impl SoftmaxLastDim {
    fn run<T: Real + PartialOrd>(x: &[T], n: usize) -> Vec<T> {
        let mut out = x.to_vec();
        for row in out.chunks_mut(n) {
            let mut m = row[0];
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            for v in row.iter_mut() {
                *v = (*v - m).exp_nonpositive();
            }
            // normalize in f64 so f32 rows still sum to 1 within a few ulps
            let s: f64 = row.iter().map(|v| v.to_f64()).sum();
            for v in row.iter_mut() {
                *v = T::from_f64(v.to_f64() / s);
            }
        }
        out
    }
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = *l.shape().dims().last().unwrap_or(&1);
        match s.dtype() {
            DType::F32 => Ok((CpuStorage::F32(Self::run(contiguous::<f32>(s, l)?, n)), l.shape().clone())),
            DType::F64 => Ok((CpuStorage::F64(Self::run(contiguous::<f64>(s, l)?, n)), l.shape().clone())),
            dt => candle_core::bail!("softmax: unsupported dtype {dt:?}"),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(res, &SoftmaxGrad)?))
    }
}

/// `y ⊙ (g − Σ g⊙y)` row by row, from the softmax output `y`.
struct SoftmaxGrad;

impl SoftmaxGrad {
    fn run<T: Real>(g: &[T], y: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); g.len()];
        for ((o, gr), yr) in out.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
            let mut dot = T::zero();
            for (a, b) in gr.iter().zip(yr) {
                dot += *a * *b;
            }
            for ((o, a), b) in o.iter_mut().zip(gr).zip(yr) {
                *o = *b * (*a - dot);
            }
        }
        out
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = *l1.shape().dims().last().unwrap_or(&1);
        match s1.dtype() {
            DType::F32 => Ok((
                CpuStorage::F32(Self::run(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, n)),
                l1.shape().clone(),
            )),
            DType::F64 => Ok((
                CpuStorage::F64(Self::run(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, n)),
                l1.shape().clone(),
            )),
            dt => candle_core::bail!("softmax: unsupported dtype {dt:?}"),
        }
    }
}

/// Splits a shape around `axis` into (outer, channels, inner) extents.
fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (dims[..axis].iter().product(), dims[axis], dims[axis + 1..].iter().product())
}

/// `y = x · scale[c] + shift[c]`, `c` indexing `axis`.
struct ChannelAffine {
    axis: usize,
}

impl ChannelAffine {
    fn run<T: Real>(&self, x: &[T], dims: &[usize], scale: &[T], shift: &[T]) -> Vec<T> {
        let (outer, c, inner) = around(dims, self.axis);
        let mut out = Vec::with_capacity(x.len());
        for o in 0..outer {
            for ch in 0..c {
                let (s, b) = (scale[ch], shift[ch]);
                let base = (o * c + ch) * inner;
                out.extend(x[base..base + inner].iter().map(|&v| v * s + b));
            }
        }
        out
    }
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        if self.axis >= dims.len() || l2.shape().elem_count() != dims[self.axis] || l3.shape().elem_count() != dims[self.axis] {
            candle_core::bail!("channel affine: {:?} against {:?} / {:?}", l1.shape(), l2.shape(), l3.shape());
        }
        let v = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.run(
                contiguous::<f32>(s1, l1)?,
                dims,
                contiguous::<f32>(s2, l2)?,
                contiguous::<f32>(s3, l3)?,
            )),
            DType::F64 => CpuStorage::F64(self.run(
                contiguous::<f64>(s1, l1)?,
                dims,
                contiguous::<f64>(s2, l2)?,
                contiguous::<f64>(s3, l3)?,
            )),
            dt => candle_core::bail!("channel affine: unsupported dtype {dt:?}"),
        };
        Ok((v, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op3_no_bwd(scale, &shift.zeros_like()?, &ChannelAffine { axis: self.axis })?)
        } else {
            None
        };
        let gs = if scale.track_op() {
            Some(grad.apply_op2_no_bwd(x, &ChannelReduce { axis: self.axis, weighted: true })?.reshape(scale.shape())?)
        } else {
            None
        };
        let gb = if shift.track_op() {
            Some(grad.apply_op2_no_bwd(&grad, &ChannelReduce { axis: self.axis, weighted: false })?.reshape(shift.shape())?)
        } else {
            None
        };
        Ok((gx, gs, gb))
    }
}

/// Per-channel `Σ g·x` (weighted) or `Σ g`.
struct ChannelReduce {
    axis: usize,
    weighted: bool,
}

impl ChannelReduce {
    fn run<T: Real>(&self, g: &[T], x: &[T], dims: &[usize]) -> Vec<T> {
        let (outer, c, inner) = around(dims, self.axis);
        let mut acc = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, a) in acc.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                let gs = &g[base..base + inner];
                if self.weighted {
                    for (gv, xv) in gs.iter().zip(&x[base..base + inner]) {
                        *a += *gv * *xv;
                    }
                } else {
                    for gv in gs {
                        *a += *gv;
                    }
                }
            }
        }
        acc
    }
}

impl CustomOp2 for ChannelReduce {
    fn name(&self) -> &'static str {
        "channel-reduce"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let c = dims[self.axis];
        let v = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.run(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, dims)),
            DType::F64 => CpuStorage::F64(self.run(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, dims)),
            dt => candle_core::bail!("channel reduce: unsupported dtype {dt:?}"),
        };
        Ok((v, Shape::from(c)))
    }
}

/// `x · scale[c] + shift[c]` along `axis`; `scale` and `shift` hold one value per channel.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor, axis: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine { axis })
}

/// `x + shift[c]` along `axis`.
pub fn channel_bias(x: &Tensor, shift: &Tensor, axis: usize) -> CResult<Tensor> {
    let dims = x.dims();
    if axis >= dims.len() {
        candle_core::bail!("channel bias: axis {axis} out of range for {:?}", dims);
    }
    let ones = Tensor::ones(dims[axis], x.dtype(), x.device())?;
    channel_affine(x, &ones, shift, axis)
}

pub fn softmax_last_dim(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLastDim)
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn f<T: Real + PartialOrd>(x: &[T]) -> Vec<T> {
            x.iter()
                .map(|&v| {
                    if v >= T::zero() {
                        T::one() / (T::one() + (T::zero() - v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    }
                })
                .collect()
        }
        match s.dtype() {
            DType::F32 => Ok((CpuStorage::F32(f(contiguous::<f32>(s, l)?)), l.shape().clone())),
            DType::F64 => Ok((CpuStorage::F64(f(contiguous::<f64>(s, l)?)), l.shape().clone())),
            dt => candle_core::bail!("sigmoid: unsupported dtype {dt:?}"),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let d = (res * (res.ones_like()? - res)?)?;
        Ok(Some((grad * d)?))
    }
}

pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    /// Direct-summation convolution used as an oracle.
    fn conv_naive(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), k: &[f64], (o, kk): (usize, usize), s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - kk) / s + 1;
        let wo = (w + 2 * p - kk) / s + 1;
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kk {
                                for kj in 0..kk {
                                    let iy = (y * s + ki) as isize - p as isize;
                                    let ix = (xo * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k[((oi * c + ci) * kk + ki) * kk + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_summation() -> CResult<()> {
        let dev = Device::Cpu;
        for &(s, p, kk) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 0, 2), (4, 0, 4), (1, 0, 1), (1, 2, 3), (3, 1, 3)] {
            let (b, c, h, w, o) = (2, 3, 9, 8, 4);
            let xv = lcg(b * c * h * w, 1);
            let kv = lcg(o * c * kk * kk, 2);
            let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &dev)?;
            let k = Tensor::from_vec(kv.clone(), (o, c, kk, kk), &dev)?;
            let got = conv2d(&x, &k, s, p)?.flatten_all()?.to_vec1::<f64>()?;
            let want = conv_naive(&xv, (b, c, h, w), &kv, (o, kk), s, p);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
        Ok(())
    }

    #[test]
    fn conv_gradients_match_finite_differences() -> CResult<()> {
        for (kk, s, p) in [(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            check_conv_grads(kk, s, p)?;
        }
        Ok(())
    }

    fn check_conv_grads(kk: usize, s: usize, p: usize) -> CResult<()> {
        let dev = Device::Cpu;
        let (b, c, h, w, o) = (2, 2, 6, 5, 3);
        let x = Var::from_vec(lcg(b * c * h * w, 3), (b, c, h, w), &dev)?;
        let k = Var::from_vec(lcg(o * c * kk * kk, 4), (o, c, kk, kk), &dev)?;
        let loss = |x: &Tensor, k: &Tensor| -> CResult<f64> {
            conv2d(x, k, s, p)?.sqr()?.sum_all()?.to_scalar::<f64>()
        };
        let l = conv2d(x.as_tensor(), k.as_tensor(), s, p)?.sqr()?.sum_all()?;
        let grads = l.backward()?;
        let gx = grads.get(x.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
        let gk = grads.get(k.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
        let eps = 1e-6;
        let xv = x.flatten_all()?.to_vec1::<f64>()?;
        for i in [0usize, 7, 31, 59] {
            let mut plus = xv.clone();
            plus[i] += eps;
            let mut minus = xv.clone();
            minus[i] -= eps;
            let fd = (loss(&Tensor::from_vec(plus, (b, c, h, w), &dev)?, k.as_tensor())?
                - loss(&Tensor::from_vec(minus, (b, c, h, w), &dev)?, k.as_tensor())?)
                / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "x[{i}]: {fd} vs {}", gx[i]);
        }
        let kv = k.flatten_all()?.to_vec1::<f64>()?;
        for i in [0usize, 5, 17, 53].map(|i| i % (o * c * kk * kk)) {
            let mut plus = kv.clone();
            plus[i] += eps;
            let mut minus = kv.clone();
            minus[i] -= eps;
            let fd = (loss(x.as_tensor(), &Tensor::from_vec(plus, (o, c, kk, kk), &dev)?)?
                - loss(x.as_tensor(), &Tensor::from_vec(minus, (o, c, kk, kk), &dev)?)?)
                / (2.0 * eps);
            assert!((fd - gk[i]).abs() < 1e-6 * (1.0 + fd.abs()), "k[{i}]: {fd} vs {}", gk[i]);
        }
        Ok(())
    }

    #[test]
    fn channel_affine_matches_broadcast_and_finite_differences() -> CResult<()> {
        let dev = Device::Cpu;
        let (b, c, h) = (2usize, 3usize, 4usize);
        let x = Var::from_vec(lcg(b * c * h, 21), (b, c, h), &dev)?;
        let sc = Var::from_vec(lcg(c, 22), c, &dev)?;
        let sh = Var::from_vec(lcg(c, 23), c, &dev)?;
        let w = Tensor::from_vec(lcg(b * c * h, 24), (b, c, h), &dev)?;
        let direct = x
            .broadcast_mul(&sc.reshape((1, c, 1))?)?
            .broadcast_add(&sh.reshape((1, c, 1))?)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let fused = channel_affine(&x, &sc, &sh, 1)?.flatten_all()?.to_vec1::<f64>()?;
        for (a, e) in fused.iter().zip(&direct) {
            assert!((a - e).abs() < 1e-15);
        }
        let loss = |x: &Tensor, sc: &Tensor, sh: &Tensor| -> CResult<Tensor> {
            (channel_affine(x, sc, sh, 1)?.sqr()? * &w)?.sum_all()
        };
        let grads = loss(&x, &sc, &sh)?.backward()?;
        let vars = [(&x, vec![b, c, h]), (&sc, vec![c]), (&sh, vec![c])];
        for (k, (v, shape)) in vars.iter().enumerate() {
            let an = grads.get(v.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
            let base = v.flatten_all()?.to_vec1::<f64>()?;
            for i in 0..base.len() {
                let eval = |d: f64| -> CResult<f64> {
                    let mut p = base.clone();
                    p[i] += d;
                    let t = Tensor::from_vec(p, shape.as_slice(), &dev)?;
                    let mut args = [x.as_tensor().clone(), sc.as_tensor().clone(), sh.as_tensor().clone()];
                    args[k] = t;
                    loss(&args[0], &args[1], &args[2])?.to_scalar::<f64>()
                };
                let fd = (eval(1e-6)? - eval(-1e-6)?) / 2e-6;
                assert!((fd - an[i]).abs() < 1e-7, "arg {k}[{i}]: {fd} vs {}", an[i]);
            }
        }
        Ok(())
    }

    #[test]
    fn softmax_and_sigmoid_gradients() -> CResult<()> {
        let dev = Device::Cpu;
        let v = Var::from_vec(lcg(12, 9).iter().map(|x| x * 3.0).collect::<Vec<_>>(), (3, 4), &dev)?;
        let w = Tensor::from_vec(lcg(12, 10), (3, 4), &dev)?;
        let f = |t: &Tensor| -> CResult<Tensor> { (softmax_last_dim(t)? * &w)?.sum_all() };
        let g = |t: &Tensor| -> CResult<Tensor> { (sigmoid(t)? * &w)?.sum_all() };
        let rows = softmax_last_dim(v.as_tensor())?.sum_keepdim(1)?.flatten_all()?.to_vec1::<f64>()?;
        assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-12));
        for func in [&f as &dyn Fn(&Tensor) -> CResult<Tensor>, &g] {
            let grads = func(v.as_tensor())?.backward()?;
            let an = grads.get(v.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
            let base = v.flatten_all()?.to_vec1::<f64>()?;
            for i in 0..12 {
                let mut p = base.clone();
                p[i] += 1e-6;
                let mut m = base.clone();
                m[i] -= 1e-6;
                let fd = (func(&Tensor::from_vec(p, (3, 4), &dev)?)?.to_scalar::<f64>()?
                    - func(&Tensor::from_vec(m, (3, 4), &dev)?)?.to_scalar::<f64>()?)
                    / 2e-6;
                assert!((fd - an[i]).abs() < 1e-7, "{i}: {fd} vs {}", an[i]);
            }
        }
        let big = Tensor::new(&[-1000f32, 1000.0], &dev)?;
        assert_eq!(sigmoid(&big)?.to_vec1::<f32>()?, vec![0.0, 1.0]);
        Ok(())
    }

    proptest::proptest! {
        #[test]
        fn fast_exp_tracks_libm(x in -90.0f32..=0.0) {
            let (got, want) = (exp_nonpositive_f32(x), x.exp());
            if x < -87.0 {
                proptest::prop_assert!(got == 0.0 && want < 2e-38);
            } else {
                proptest::prop_assert!(((got - want) / want).abs() < 3e-7, "{x}: {got} vs {want}");
            }
        }
    }
}
