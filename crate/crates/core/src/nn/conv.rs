//! 2D convolution as im2col + GEMM with hand-written backward passes.
//!
//! The stock CPU convolution backward is far slower than its forward pass,
//! which dominates training time on CPU-only machines.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

pub(crate) trait GemmElem: WithDType {
    /// `c = a * b + beta * c` with arbitrary strides.
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
        csc: isize,
    );
}

impl GemmElem for f32 {
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
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl GemmElem for f64 {
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
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            candle_core::bail!("conv2d expects rank-4 input and weight, got {x:?} and {w:?}");
        }
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, kh, kw) = (w[0], w[2], w[3]);
        if w[1] != cin {
            candle_core::bail!("conv2d channel mismatch: input {cin}, weight {}", w[1]);
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}");
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Input row hit by output row `o` at kernel offset `k`, if inside the image.
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Output columns `lo..hi` whose source column at offset `k` lies inside
    /// the image; with stride 1 the sources are then `lo + k - pad..`.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(k)).div_ceil(self.stride);
        let hi = if self.w + self.pad > k { ((self.w + self.pad - k - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }
}

fn im2col<T: GemmElem>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let dst = &mut cols[row..row + n];
                let (lo, hi) = g.valid_cols(kj);
                for oi in 0..g.ho {
                    let d = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    let Some(ii) = g.source(oi, ki, g.h) else {
                        d.fill(T::zero());
                        continue;
                    };
                    let src = &plane[ii * g.w..(ii + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &s) in d[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Like [`im2col`] but laid out `n x k`, one patch per row.
fn im2col_t<T: GemmElem>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let k = g.patch_len();
    let spans: Vec<(usize, usize)> = (0..g.kw).map(|kj| g.valid_cols(kj)).collect();
    for oi in 0..g.ho {
        let block = &mut cols[oi * g.wo * k..(oi + 1) * g.wo * k];
        let mut r = 0;
        for c in 0..g.cin {
            let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let row = g.source(oi, ki, g.h);
                for (kj, &(lo, hi)) in spans.iter().enumerate() {
                    match row {
                        None => (0..g.wo).for_each(|oj| block[oj * k + r] = T::zero()),
                        Some(ii) => {
                            (0..lo).chain(hi..g.wo).for_each(|oj| block[oj * k + r] = T::zero());
                            let src = &plane[ii * g.w..(ii + 1) * g.w];
                            let start = lo * g.stride + kj - g.pad;
                            for (oj, &v) in (lo..hi).zip(src[start..].iter().step_by(g.stride)) {
                                block[oj * k + r] = v;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: GemmElem>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let src = &cols[row..row + n];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oi in 0..g.ho {
                    let Some(ii) = g.source(oi, ki, g.h) else { continue };
                    let dst = &mut plane[ii * g.w..(ii + 1) * g.w];
                    let s = &src[oi * g.wo + lo..oi * g.wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d operands must be contiguous"),
    }
}

/// Dispatches a kernel over the two float dtypes.
fn dispatch(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    shape: Shape,
    f32_kernel: impl FnOnce(&[f32], &[f32]) -> Vec<f32>,
    f64_kernel: impl FnOnce(&[f64], &[f64]) -> Vec<f64>,
) -> candle_core::Result<(CpuStorage, Shape)> {
    match (s1, s2) {
        (CpuStorage::F32(_), CpuStorage::F32(_)) => {
            let out = f32_kernel(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?);
            Ok((CpuStorage::F32(out), shape))
        }
        (CpuStorage::F64(_), CpuStorage::F64(_)) => {
            let out = f64_kernel(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?);
            Ok((CpuStorage::F64(out), shape))
        }
        _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
    }
}

fn forward_kernel<T: GemmElem>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let o = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        // SAFETY: buffers are sized cout*k, k*n and cout*n with row-major strides.
        unsafe {
            T::gemm(
                g.cout, k, n, w.as_ptr(), k as isize, 1, cols.as_ptr(), n as isize, 1, T::zero(),
                o.as_mut_ptr(), n as isize, 1,
            )
        }
    }
    out
}

fn grad_input_kernel<T: GemmElem>(grad: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    if g.stride == 1 && g.kh == g.kw && g.pad < g.kh {
        return grad_input_as_conv(grad, w, g);
    }
    let (k, n) = (g.patch_len(), g.out_len());
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        // SAFETY: w is read transposed (k x cout); cols is k x n.
        unsafe {
            T::gemm(
                k, g.cout, n, w.as_ptr(), 1, k as isize, gb.as_ptr(), n as isize, 1, T::zero(),
                cols.as_mut_ptr(), n as isize, 1,
            )
        }
        col2im(&cols, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    dx
}

/// With unit stride the input gradient is a convolution of the output
/// gradient with the spatially flipped, channel-transposed kernel.
fn grad_input_as_conv<T: GemmElem>(grad: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (kh, kw) = (g.kh, g.kw);
    let mut flipped = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for i in 0..kh {
                for j in 0..kw {
                    flipped[((ci * g.cout + co) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] =
                        w[((co * g.cin + ci) * kh + i) * kw + j];
                }
            }
        }
    }
    let pad = kh - 1 - g.pad;
    let back = Geometry {
        batch: g.batch,
        cin: g.cout,
        h: g.ho,
        w: g.wo,
        cout: g.cin,
        kh,
        kw,
        stride: 1,
        pad,
        ho: g.ho + 2 * pad + 1 - kh,
        wo: g.wo + 2 * pad + 1 - kw,
    };
    debug_assert_eq!((back.ho, back.wo), (g.h, g.w));
    forward_kernel(grad, &flipped, &back)
}

fn grad_weight_kernel<T: GemmElem>(x: &[T], grad: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut dw = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); n * k];
    for b in 0..g.batch {
        im2col_t(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        // SAFETY: cols is n x k row-major; dw accumulates cout x k.
        unsafe {
            T::gemm(
                g.cout, n, k, gb.as_ptr(), n as isize, 1, cols.as_ptr(), k as isize, 1, T::one(),
                dw.as_mut_ptr(), k as isize, 1,
            )
        }
    }
    dw
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.cout, g.ho, g.wo));
        dispatch(
            s1,
            l1,
            s2,
            l2,
            shape,
            |x, w| forward_kernel(x, w, &g),
            |x, w| forward_kernel(x, w, &g),
        )
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let gx = grad.apply_op2_no_bwd(w, &GradInputOp(g))?;
        let gw = x.apply_op2_no_bwd(&grad, &GradWeightOp(g))?;
        Ok((Some(gx), Some(gw)))
    }
}

struct GradInputOp(Geometry);

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.cin, g.h, g.w));
        dispatch(
            s1,
            l1,
            s2,
            l2,
            shape,
            |gr, w| grad_input_kernel(gr, w, &g),
            |gr, w| grad_input_kernel(gr, w, &g),
        )
    }
}

struct GradWeightOp(Geometry);

impl CustomOp2 for GradWeightOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.cout, g.cin, g.kh, g.kw));
        dispatch(
            s1,
            l1,
            s2,
            l2,
            shape,
            |x, gr| grad_weight_kernel(x, gr, &g),
            |x, gr| grad_weight_kernel(x, gr, &g),
        )
    }
}

/// Cross-correlation of `x` `[B, Cin, H, W]` with `weight` `[Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive");
    }
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad })
}
