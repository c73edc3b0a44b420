//! Dense f32 tensors and the array-level kernels behind the autodiff graph.
//!
//! Layout is row-major; 4-d tensors are NCHW. The three convolution kernels
//! (`conv2d`, `conv2d_dx`, `conv2d_dw`) are mutual adjoints: `conv2d_dx` is the
//! transpose of `conv2d` in its image argument, `conv2d_dw` in its weight
//! argument. Every kernel accumulates each output element in a fixed order, so
//! results are bitwise deterministic regardless of rayon's scheduling.

use rayon::prelude::*;

/// Keep large buffers on the main heap instead of per-allocation mmap:
/// autodiff graphs retain hundreds of hundreds-of-KB tensors per step, and
/// with glibc's default 128 KB threshold every one of them costs a fresh
/// mmap plus page faults. Called once, lazily, from the tensor constructors.
#[cfg(target_os = "linux")]
fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
    });
}

#[cfg(not(target_os = "linux"))]
fn tune_allocator() {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        tune_allocator();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        tune_allocator();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interpret as (n, c, h, w).
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected 4-d tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> f32 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of {} elements",
            self.numel()
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Sum with a f64 accumulator; reductions feeding loss values need the head
/// room (naive f32 sums over a whole batch lose ~1e-4 relative).
pub fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64).sum()
}

pub fn mean_f64(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        sum_f64(xs) / xs.len() as f64
    }
}

fn conv_out_size(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Below this many multiply-accumulates a convolution runs single-threaded;
/// rayon dispatch costs more than the work at small sizes.
const PAR_THRESHOLD: usize = 1 << 19;

/// One row of a 3-tap horizontal stencil: acc[i] += w0 x[i-1] + w1 x[i] + w2 x[i+1]
/// with zero padding at both ends.
#[inline]
fn stencil3_row(acc: &mut [f32], x: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = acc.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        acc[0] += w1 * x[0];
        return;
    }
    acc[0] += w1 * x[0] + w2 * x[1];
    let inner = &mut acc[1..n - 1];
    let xl = &x[0..n - 2];
    let xm = &x[1..n - 1];
    let xr = &x[2..n];
    for i in 0..inner.len() {
        inner[i] += w0 * xl[i] + w1 * xm[i] + w2 * xr[i];
    }
    acc[n - 1] += w0 * x[n - 2] + w1 * x[n - 1];
}

#[inline]
fn axpy(acc: &mut [f32], x: &[f32], w: f32) {
    for (a, &xv) in acc.iter_mut().zip(x) {
        *a += w * xv;
    }
}

/// 2-d convolution (cross-correlation), zero padding.
/// x: `[n, ci, h, w]`, w: `[co, ci, kh, kw]` -> `[n, co, oh, ow]`.
///
/// The two shapes the networks actually use (3x3 stride 1 pad 1, and 1x1)
/// take fused fast paths; anything else goes through the generic loop.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (co, ci_w, kh, kw) = w.dims4();
    assert_eq!(ci, ci_w, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let mut out = vec![0.0f32; n * co * oh * ow];
    let xd = x.data();
    let wdat = w.data();

    let plane: Box<dyn Fn(usize, &mut [f32]) + Sync> =
        if kh == 3 && kw == 3 && stride == 1 && pad == 1 {
            Box::new(move |plane_idx: usize, op: &mut [f32]| {
                let ni = plane_idx / co;
                let coi = plane_idx % co;
                for cii in 0..ci {
                    let xbase = (ni * ci + cii) * h * wd;
                    let wbase = (coi * ci + cii) * 9;
                    let wk = &wdat[wbase..wbase + 9];
                    for oy in 0..oh {
                        let orow = &mut op[oy * ow..(oy + 1) * ow];
                        for ky in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow =
                                &xd[xbase + iy as usize * wd..xbase + (iy as usize + 1) * wd];
                            stencil3_row(orow, xrow, wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                        }
                    }
                }
            })
        } else if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            Box::new(move |plane_idx: usize, op: &mut [f32]| {
                let ni = plane_idx / co;
                let coi = plane_idx % co;
                for cii in 0..ci {
                    let xbase = (ni * ci + cii) * h * wd;
                    axpy(op, &xd[xbase..xbase + h * wd], wdat[coi * ci + cii]);
                }
            })
        } else {
            Box::new(move |plane_idx: usize, op: &mut [f32]| {
                let ni = plane_idx / co;
                let coi = plane_idx % co;
                for cii in 0..ci {
                    let xbase = (ni * ci + cii) * h * wd;
                    let wbase = (coi * ci + cii) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[wbase + ky * kw + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow =
                                    &xd[xbase + iy as usize * wd..xbase + (iy as usize + 1) * wd];
                                let orow = &mut op[oy * ow..(oy + 1) * ow];
                                for (ox, a) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *a += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            })
        };
    let work = n * co * ci * kh * kw * oh * ow;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(i, op)| plane(i, op));
    } else {
        out.chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(i, op)| plane(i, op));
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

/// Weight transform turning the input-gradient of a stride-1 convolution
/// into a forward convolution: swap channel axes and flip both spatial axes.
fn flip_swap_weights(w: &Tensor) -> Tensor {
    let (co, ci, kh, kw) = w.dims4();
    let wd = w.data();
    let mut out = vec![0.0f32; ci * co * kh * kw];
    for coi in 0..co {
        for cii in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    out[((cii * co + coi) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        wd[((coi * ci + cii) * kh + ky) * kw + kx];
                }
            }
        }
    }
    Tensor::new(vec![ci, co, kh, kw], out)
}

/// Gradient of `conv2d` with respect to its image input.
/// gy: `[n, co, oh, ow]`, w: `[co, ci, kh, kw]` -> `[n, ci, h, w]`.
pub fn conv2d_dx(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Tensor {
    let (n, co, oh, ow) = gy.dims4();
    let (co_w, ci, kh, kw) = w.dims4();
    assert_eq!(co, co_w, "conv2d_dx channel mismatch");
    if stride == 1 {
        // Full correlation with the flipped, channel-swapped kernel.
        let wt = flip_swap_weights(w);
        let out = conv2d(gy, &wt, 1, kh - 1 - pad);
        debug_assert_eq!(out.dims4(), (n, ci, h, wd));
        return out;
    }
    let mut out = vec![0.0f32; n * ci * h * wd];
    let gyd = gy.data();
    let wdat = w.data();
    let plane = |plane_idx: usize, gp: &mut [f32]| {
        let ni = plane_idx / ci;
        let cii = plane_idx % ci;
        for coi in 0..co {
            let gybase = (ni * co + coi) * oh * ow;
            let wbase = (coi * ci + cii) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[wbase + ky * kw + kx];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gyd[gybase + oy * ow..gybase + (oy + 1) * ow];
                        let xrow = &mut gp[iy as usize * wd..(iy as usize + 1) * wd];
                        for (ox, &g) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                xrow[ix as usize] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    };
    let work = n * co * ci * kh * kw * oh * ow;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(h * wd)
            .enumerate()
            .for_each(|(i, gp)| plane(i, gp));
    } else {
        out.chunks_mut(h * wd)
            .enumerate()
            .for_each(|(i, gp)| plane(i, gp));
    }
    Tensor::new(vec![n, ci, h, wd], out)
}

/// Gradient of `conv2d` with respect to its weight.
/// x: `[n, ci, h, w]`, gy: `[n, co, oh, ow]` -> `[co, ci, kh, kw]`.
pub fn conv2d_dw(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (n_g, co, oh, ow) = gy.dims4();
    assert_eq!(n, n_g, "conv2d_dw batch mismatch");
    let xd = x.data();
    let gyd = gy.data();
    let mut out = vec![0.0f32; co * ci * kh * kw];
    const LANES: usize = 16;
    let block = |coi: usize, wp: &mut [f32]| {
        for cii in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let acc = if stride == 1 {
                        // One streaming pass; the lane accumulators persist
                        // across rows so their setup cost amortizes away.
                        let lo = pad.saturating_sub(kx);
                        let hi = (wd + pad - kx).min(ow);
                        let mut lanes = [0.0f32; LANES];
                        let mut tail = 0.0f32;
                        if lo < hi {
                            let off = kx as isize - pad as isize;
                            for ni in 0..n {
                                let xbase = (ni * ci + cii) * h * wd;
                                let gybase = (ni * co + coi) * oh * ow;
                                for oy in 0..oh {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let grow = &gyd[gybase + oy * ow + lo..gybase + oy * ow + hi];
                                    let xrow = &xd[(xbase as isize
                                        + iy * wd as isize
                                        + lo as isize
                                        + off)
                                        as usize
                                        ..(xbase as isize + iy * wd as isize + hi as isize + off)
                                            as usize];
                                    let len = grow.len();
                                    let chunks = len / LANES;
                                    for c in 0..chunks {
                                        let ga = &grow[c * LANES..(c + 1) * LANES];
                                        let xa = &xrow[c * LANES..(c + 1) * LANES];
                                        for i in 0..LANES {
                                            lanes[i] += ga[i] * xa[i];
                                        }
                                    }
                                    for i in chunks * LANES..len {
                                        tail += grow[i] * xrow[i];
                                    }
                                }
                            }
                        }
                        let mut sum = tail;
                        for v in lanes {
                            sum += v;
                        }
                        sum
                    } else {
                        let mut acc = 0.0f32;
                        for ni in 0..n {
                            let xbase = (ni * ci + cii) * h * wd;
                            let gybase = (ni * co + coi) * oh * ow;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gyd[gybase + oy * ow..gybase + (oy + 1) * ow];
                                let xrow =
                                    &xd[xbase + iy as usize * wd..xbase + (iy as usize + 1) * wd];
                                for (ox, &g) in grow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        acc += g * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                        acc
                    };
                    wp[(cii * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    let work = n * co * ci * kh * kw * oh * ow;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(ci * kh * kw)
            .enumerate()
            .for_each(|(coi, wp)| block(coi, wp));
    } else {
        out.chunks_mut(ci * kh * kw)
            .enumerate()
            .for_each(|(coi, wp)| block(coi, wp));
    }
    Tensor::new(vec![co, ci, kh, kw], out)
}

/// x: `[n, c, h, w]` + b: `[c]`, broadcast over n, h, w.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(b.shape(), &[c], "bias shape mismatch");
    let mut out = x.data().to_vec();
    let bd = b.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let bv = bd[ci];
            for v in &mut out[base..base + h * w] {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Reduce `[n, c, h, w]` to `[c]` by summing n, h, w (bias gradient).
pub fn sum_to_channels(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4();
    let gd = g.data();
    let mut out = vec![0.0f32; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &gd[base..base + h * w] {
                acc += v as f64;
            }
        }
        out[ci] = acc as f32;
    }
    Tensor::new(vec![c], out)
}

/// Nearest-neighbor upsample by integer factor.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * f, w * f);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut row = vec![0.0f32; ow];
    for p in 0..n * c {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for iy in 0..h {
            let xrow = &xd[xb + iy * w..xb + (iy + 1) * w];
            for (ox, chunk) in row.chunks_mut(f).enumerate() {
                chunk.fill(xrow[ox]);
            }
            for dy in 0..f {
                let dst = ob + (iy * f + dy) * ow;
                out[dst..dst + ow].copy_from_slice(&row);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Sum over non-overlapping f x f blocks.
pub fn sum_pool(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % f == 0 && w % f == 0, "sum_pool size not divisible");
    let (oh, ow) = (h / f, w / f);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..f {
                    let row = xb + (oy * f + dy) * w + ox * f;
                    for dx in 0..f {
                        acc += xd[row + dx];
                    }
                }
                out[ob + oy * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Mean over non-overlapping f x f blocks (area downscale).
pub fn block_mean(x: &Tensor, f: usize) -> Tensor {
    let mut t = sum_pool(x, f);
    let inv = 1.0 / (f * f) as f32;
    for v in t.data_mut() {
        *v *= inv;
    }
    t
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert!(
        n == nb && h == hb && w == wb,
        "concat spatial/batch mismatch"
    );
    let plane = h * w;
    let mut out = vec![0.0f32; n * (ca + cb) * plane];
    for ni in 0..n {
        let oa = ni * (ca + cb) * plane;
        out[oa..oa + ca * plane].copy_from_slice(&a.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        out[oa + ca * plane..oa + (ca + cb) * plane]
            .copy_from_slice(&b.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Channels [c0, c1) of x.
pub fn slice_channels(x: &Tensor, c0: usize, c1: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(c0 < c1 && c1 <= c);
    let plane = h * w;
    let mut out = vec![0.0f32; n * (c1 - c0) * plane];
    for ni in 0..n {
        let src = (ni * c + c0) * plane;
        let dst = ni * (c1 - c0) * plane;
        out[dst..dst + (c1 - c0) * plane].copy_from_slice(&x.data()[src..src + (c1 - c0) * plane]);
    }
    Tensor::new(vec![n, c1 - c0, h, w], out)
}

/// Embed x into a wider channel range [c0, c0 + cx) of a zero tensor with
/// `c_total` channels (adjoint of `slice_channels`).
pub fn pad_channels(x: &Tensor, c0: usize, c_total: usize) -> Tensor {
    let (n, cx, h, w) = x.dims4();
    assert!(c0 + cx <= c_total);
    let plane = h * w;
    let mut out = vec![0.0f32; n * c_total * plane];
    for ni in 0..n {
        let dst = (ni * c_total + c0) * plane;
        let src = ni * cx * plane;
        out[dst..dst + cx * plane].copy_from_slice(&x.data()[src..src + cx * plane]);
    }
    Tensor::new(vec![n, c_total, h, w], out)
}

/// Mean across channels, yielding one channel.
pub fn mean_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; n * plane];
    let inv = 1.0 / c as f32;
    for ni in 0..n {
        for i in 0..plane {
            let mut acc = 0.0f32;
            for ci in 0..c {
                acc += xd[(ni * c + ci) * plane + i];
            }
            out[ni * plane + i] = acc * inv;
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Repeat a single-channel map across c channels, scaled.
pub fn repeat_channels(x: &Tensor, c: usize, scale: f32) -> Tensor {
    let (n, cx, h, w) = x.dims4();
    assert_eq!(cx, 1, "repeat_channels expects one channel");
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * plane];
    for ni in 0..n {
        for ci in 0..c {
            let dst = (ni * c + ci) * plane;
            for i in 0..plane {
                out[dst + i] = xd[ni * plane + i] * scale;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Per-sample mean over everything but the batch axis: `[n, ...]` -> `[n]`.
pub fn mean_per_sample(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut out = vec![0.0f32; n];
    for (ni, o) in out.iter_mut().enumerate() {
        *o = mean_f64(&x.data()[ni * per..(ni + 1) * per]) as f32;
    }
    Tensor::new(vec![n], out)
}

/// Broadcast `[n]` across the rest of `shape`, scaled.
pub fn per_sample_fill(s: &Tensor, shape: &[usize], scale: f32) -> Tensor {
    let n = shape[0];
    assert_eq!(s.shape(), &[n]);
    let per: usize = shape[1..].iter().product();
    let mut out = vec![0.0f32; n * per];
    for ni in 0..n {
        let v = s.data()[ni] * scale;
        for o in &mut out[ni * per..(ni + 1) * per] {
            *o = v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}
