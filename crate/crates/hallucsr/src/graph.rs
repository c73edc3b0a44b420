//! Eager reverse-mode autodiff over [`Tensor`]s.
//!
//! Every operation computes its value immediately and records a node; a call
//! to [`Graph::backward`] builds the gradients *as further graph nodes*, so a
//! gradient can itself be differentiated. That second pass is what the R1
//! penalty needs: the discriminators are piecewise affine (convolutions,
//! leaky activations, pooling), so treating activation masks as constants
//! during the replayed backward is exact almost everywhere.
//!
//! Nonlinearities that are not piecewise affine (`tanh`, `sigmoid`,
//! `softplus`) capture their derivative as a constant mask; their gradients
//! are exact for a single backward pass, which is the only way the generator
//! and loss paths use them.

use std::sync::Arc;

use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    /// Elementwise product with a captured constant (activation masks).
    MulMask(Var, Arc<Tensor>),
    /// y = f(x) with f'(x) captured at creation.
    Nonlin(Var, Arc<Tensor>),
    /// Rounding to the 256-level color grid; backward is the identity.
    RoundSt(Var),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvDx {
        gy: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvDw {
        x: Var,
        gy: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    SumToChannels(Var),
    BroadcastChannels(Var),
    Upsample {
        x: Var,
        f: usize,
    },
    SumPool {
        x: Var,
        f: usize,
    },
    ConcatC(Var, Var),
    SliceC {
        x: Var,
        c0: usize,
        c1: usize,
    },
    PadC {
        x: Var,
        c0: usize,
    },
    MeanC(Var),
    RepeatC {
        x: Var,
        scale: f32,
    },
    SumCKeep(Var),
    MeanAll(Var),
    SumAll(Var),
    Fill {
        s: Var,
        scale: f32,
    },
    MeanPerSample(Var),
    SumPerSample(Var),
    FillPerSample {
        s: Var,
        scale: f32,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatC(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MulMask(a, _)
            | Op::Nonlin(a, _)
            | Op::RoundSt(a)
            | Op::SumToChannels(a)
            | Op::BroadcastChannels(a)
            | Op::Upsample { x: a, .. }
            | Op::SumPool { x: a, .. }
            | Op::SliceC { x: a, .. }
            | Op::PadC { x: a, .. }
            | Op::MeanC(a)
            | Op::RepeatC { x: a, .. }
            | Op::SumCKeep(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::Fill { s: a, .. }
            | Op::MeanPerSample(a)
            | Op::SumPerSample(a)
            | Op::FillPerSample { s: a, .. } => vec![a],
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvDx { gy, w, .. } => vec![gy, w],
            Op::ConvDw { x, gy, .. } => vec![x, gy],
            Op::AddBias { x, b } => vec![x, b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Round a [-1, 1] value to the nearest of the 256 color levels
/// {-1, -1 + 2/255, ..., 1}. Exact midpoints round away from zero
/// (the midpoint at 0 itself rounds up).
pub fn grid_round(x: f64) -> f64 {
    // In u = x * 127.5 coordinates the grid sits at half-integers
    // -127.5, -126.5, ..., 127.5 and midpoints are integers.
    let u = (x * 127.5).clamp(-127.5, 127.5);
    let h = if u.fract() == 0.0 {
        if u < 0.0 {
            u - 0.5
        } else {
            u + 0.5
        }
    } else {
        u.floor() + 0.5
    };
    h.clamp(-127.5, 127.5) / 127.5
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    fn mul_mask(&mut self, a: Var, mask: Arc<Tensor>) -> Var {
        let v = self.value(a).zip(&mask, |x, m| x * m);
        self.push(v, Op::MulMask(a, mask))
    }

    fn nonlin(&mut self, x: Var, f: impl Fn(f32) -> (f32, f32)) -> Var {
        let src = self.value(x);
        let n = src.numel();
        let mut val = vec![0.0f32; n];
        let mut der = vec![0.0f32; n];
        for ((v, d), &xv) in val.iter_mut().zip(der.iter_mut()).zip(src.data()) {
            let (y, dy) = f(xv);
            *v = y;
            *d = dy;
        }
        let shape = src.shape().to_vec();
        let mask = Arc::new(Tensor::new(shape.clone(), der));
        self.push(Tensor::new(shape, val), Op::Nonlin(x, mask))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        // Dedicated branch-free loops; this runs on every activation in the
        // networks and the generic nonlin path is too slow for it.
        let src = self.value(x);
        let n = src.numel();
        let mut val = vec![0.0f32; n];
        let mut der = vec![0.0f32; n];
        for (v, &xv) in val.iter_mut().zip(src.data()) {
            *v = xv.max(0.0) + slope * xv.min(0.0);
        }
        for (d, &xv) in der.iter_mut().zip(src.data()) {
            *d = if xv >= 0.0 { 1.0 } else { slope };
        }
        let shape = src.shape().to_vec();
        let mask = Arc::new(Tensor::new(shape.clone(), der));
        self.push(Tensor::new(shape, val), Op::Nonlin(x, mask))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.nonlin(x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.nonlin(x, |v| {
            let y = v.tanh();
            (y, 1.0 - y * y)
        })
    }

    /// 2 * sigmoid(x): a (0, 2) bounded activation for gradient-map heads.
    pub fn sigmoid2(&mut self, x: Var) -> Var {
        self.nonlin(x, |v| {
            let s = 1.0 / (1.0 + (-v).exp());
            (2.0 * s, 2.0 * s * (1.0 - s))
        })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.nonlin(x, |v| {
            let y = if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            };
            let s = 1.0 / (1.0 + (-v).exp());
            (y, s)
        })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.nonlin(x, |v| {
            (
                v.abs(),
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                },
            )
        })
    }

    /// min(x, s) elementwise; at the tie the unclamped branch is kept.
    pub fn min_scalar(&mut self, x: Var, s: f32) -> Var {
        self.nonlin(x, |v| if v <= s { (v, 1.0) } else { (s, 0.0) })
    }

    /// Straight-through rounding to the 256-level color grid: the forward
    /// value is quantized, the backward pass is the identity.
    pub fn round_colors_st(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| grid_round(e as f64) as f32);
        self.push(v, Op::RoundSt(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = tensor::conv2d(self.value(x), self.value(w), stride, pad);
        self.push(v, Op::Conv { x, w, stride, pad })
    }

    fn conv2d_dx(
        &mut self,
        gy: Var,
        w: Var,
        stride: usize,
        pad: usize,
        h: usize,
        wd: usize,
    ) -> Var {
        let v = tensor::conv2d_dx(self.value(gy), self.value(w), stride, pad, h, wd);
        self.push(v, Op::ConvDx { gy, w, stride, pad })
    }

    fn conv2d_dw(
        &mut self,
        x: Var,
        gy: Var,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Var {
        let v = tensor::conv2d_dw(self.value(x), self.value(gy), stride, pad, kh, kw);
        self.push(v, Op::ConvDw { x, gy })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = tensor::add_bias(self.value(x), self.value(b));
        self.push(v, Op::AddBias { x, b })
    }

    fn sum_to_channels(&mut self, g: Var) -> Var {
        let v = tensor::sum_to_channels(self.value(g));
        self.push(v, Op::SumToChannels(g))
    }

    fn broadcast_channels(&mut self, b: Var, n: usize, h: usize, w: usize) -> Var {
        let c = self.value(b).shape()[0];
        let bd = self.value(b).data().to_vec();
        let mut out = vec![0.0f32; n * c * h * w];
        for ni in 0..n {
            for (ci, &bv) in bd.iter().enumerate() {
                let base = (ni * c + ci) * h * w;
                out[base..base + h * w].fill(bv);
            }
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::BroadcastChannels(b))
    }

    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let v = tensor::upsample_nearest(self.value(x), f);
        self.push(v, Op::Upsample { x, f })
    }

    pub fn sum_pool(&mut self, x: Var, f: usize) -> Var {
        let v = tensor::sum_pool(self.value(x), f);
        self.push(v, Op::SumPool { x, f })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.sum_pool(x, 2);
        self.scale(s, 0.25)
    }

    /// Area downscale by an integer factor.
    pub fn block_mean(&mut self, x: Var, f: usize) -> Var {
        let s = self.sum_pool(x, f);
        self.scale(s, 1.0 / (f * f) as f32)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::concat_channels(self.value(a), self.value(b));
        self.push(v, Op::ConcatC(a, b))
    }

    fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let v = tensor::slice_channels(self.value(x), c0, c1);
        self.push(v, Op::SliceC { x, c0, c1 })
    }

    fn pad_channels(&mut self, x: Var, c0: usize, c_total: usize) -> Var {
        let v = tensor::pad_channels(self.value(x), c0, c_total);
        self.push(v, Op::PadC { x, c0 })
    }

    /// Mean across channels, producing a one-channel map.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let v = tensor::mean_channels(self.value(x));
        self.push(v, Op::MeanC(x))
    }

    fn repeat_channels(&mut self, x: Var, c: usize, scale: f32) -> Var {
        let v = tensor::repeat_channels(self.value(x), c, scale);
        self.push(v, Op::RepeatC { x, scale })
    }

    fn sum_channels_keep(&mut self, x: Var) -> Var {
        let c = self.value(x).dims4().1;
        let m = tensor::mean_channels(self.value(x));
        let v = m.map(|e| e * c as f32);
        self.push(v, Op::SumCKeep(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(tensor::mean_f64(self.value(x).data()) as f32);
        self.push(v, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(tensor::sum_f64(self.value(x).data()) as f32);
        self.push(v, Op::SumAll(x))
    }

    fn fill(&mut self, s: Var, shape: Vec<usize>, scale: f32) -> Var {
        let v = Tensor::full(shape, self.value(s).item() * scale);
        self.push(v, Op::Fill { s, scale })
    }

    /// Per-sample mean over all non-batch axes: `[n, ...]` -> `[n]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let v = tensor::mean_per_sample(self.value(x));
        self.push(v, Op::MeanPerSample(x))
    }

    fn sum_per_sample(&mut self, x: Var) -> Var {
        let m = tensor::mean_per_sample(self.value(x));
        let per = (self.value(x).numel() / self.value(x).shape()[0]) as f32;
        let v = m.map(|e| e * per);
        self.push(v, Op::SumPerSample(x))
    }

    fn fill_per_sample(&mut self, s: Var, shape: Vec<usize>, scale: f32) -> Var {
        let v = tensor::per_sample_fill(self.value(s), &shape, scale);
        self.push(v, Op::FillPerSample { s, scale })
    }

    /// Elementwise product with a constant tensor (no gradient through it).
    pub fn mul_const(&mut self, x: Var, k: &Tensor) -> Var {
        self.mul_mask(x, Arc::new(k.clone()))
    }

    /// Reverse-mode gradients of `root` with respect to each of `wrt`.
    ///
    /// Gradients are ordinary graph nodes, so they can be combined into new
    /// scalars and differentiated again. Entries are `None` when `root` does
    /// not depend on that input.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        let limit = root.0;
        let mut active = vec![false; limit + 1];
        for v in wrt {
            if v.0 <= limit {
                active[v.0] = true;
            }
        }
        for i in 0..=limit {
            if !active[i] {
                active[i] = self.nodes[i].op.parents().iter().any(|p| active[p.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; limit + 1];
        if active[limit] {
            let shape = self.value(root).shape().to_vec();
            let seed = self.leaf(Tensor::full(shape, 1.0));
            grads[limit] = Some(seed);
        }
        for i in (0..=limit).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let push_to = |graph: &mut Graph, grads: &mut Vec<Option<Var>>, p: Var, c: Var| {
                if !active[p.0] {
                    return;
                }
                grads[p.0] = Some(match grads[p.0] {
                    None => c,
                    Some(prev) => graph.add(prev, c),
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    push_to(self, &mut grads, a, g);
                    push_to(self, &mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    push_to(self, &mut grads, a, g);
                    if active[b.0] {
                        let neg = self.scale(g, -1.0);
                        push_to(self, &mut grads, b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    if active[a.0] {
                        let c = self.mul(g, b);
                        push_to(self, &mut grads, a, c);
                    }
                    if active[b.0] {
                        let c = self.mul(g, a);
                        push_to(self, &mut grads, b, c);
                    }
                }
                Op::Scale(a, s) => {
                    let c = self.scale(g, s);
                    push_to(self, &mut grads, a, c);
                }
                Op::AddScalar(a) => push_to(self, &mut grads, a, g),
                Op::MulMask(a, mask) | Op::Nonlin(a, mask) => {
                    if active[a.0] {
                        let c = self.mul_mask(g, mask);
                        push_to(self, &mut grads, a, c);
                    }
                }
                Op::RoundSt(a) => push_to(self, &mut grads, a, g),
                Op::Conv { x, w, stride, pad } => {
                    if active[x.0] {
                        let (_, _, h, wd) = self.value(x).dims4();
                        let c = self.conv2d_dx(g, w, stride, pad, h, wd);
                        push_to(self, &mut grads, x, c);
                    }
                    if active[w.0] {
                        let (_, _, kh, kw) = self.value(w).dims4();
                        let c = self.conv2d_dw(x, g, stride, pad, kh, kw);
                        push_to(self, &mut grads, w, c);
                    }
                }
                Op::ConvDx {
                    gy, w, stride, pad, ..
                } => {
                    if active[gy.0] {
                        let c = self.conv2d(g, w, stride, pad);
                        push_to(self, &mut grads, gy, c);
                    }
                    if active[w.0] {
                        let (_, _, kh, kw) = self.value(w).dims4();
                        let c = self.conv2d_dw(g, gy, stride, pad, kh, kw);
                        push_to(self, &mut grads, w, c);
                    }
                }
                Op::ConvDw { .. } => {
                    // Weight gradients are terminal: nothing in the toolkit
                    // differentiates through them.
                    unreachable!("conv2d_dw output used in a differentiated expression")
                }
                Op::AddBias { x, b } => {
                    push_to(self, &mut grads, x, g);
                    if active[b.0] {
                        let c = self.sum_to_channels(g);
                        push_to(self, &mut grads, b, c);
                    }
                }
                Op::SumToChannels(a) => {
                    if active[a.0] {
                        let (n, _, h, w) = self.value(a).dims4();
                        let c = self.broadcast_channels(g, n, h, w);
                        push_to(self, &mut grads, a, c);
                    }
                }
                Op::BroadcastChannels(b) => {
                    if active[b.0] {
                        let c = self.sum_to_channels(g);
                        push_to(self, &mut grads, b, c);
                    }
                }
                Op::Upsample { x, f } => {
                    if active[x.0] {
                        let c = self.sum_pool(g, f);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::SumPool { x, f } => {
                    if active[x.0] {
                        let c = self.upsample(g, f);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::ConcatC(a, b) => {
                    let ca = self.value(a).dims4().1;
                    let cb = self.value(b).dims4().1;
                    if active[a.0] {
                        let c = self.slice_channels(g, 0, ca);
                        push_to(self, &mut grads, a, c);
                    }
                    if active[b.0] {
                        let c = self.slice_channels(g, ca, ca + cb);
                        push_to(self, &mut grads, b, c);
                    }
                }
                Op::SliceC { x, c0, c1 } => {
                    if active[x.0] {
                        let c_total = self.value(x).dims4().1;
                        let _ = c1;
                        let c = self.pad_channels(g, c0, c_total);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::PadC { x, c0, .. } => {
                    if active[x.0] {
                        let cx = self.value(x).dims4().1;
                        let c = self.slice_channels(g, c0, c0 + cx);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::MeanC(x) => {
                    if active[x.0] {
                        let c_ch = self.value(x).dims4().1;
                        let c = self.repeat_channels(g, c_ch, 1.0 / c_ch as f32);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::RepeatC { x, scale } => {
                    if active[x.0] {
                        let s = self.sum_channels_keep(g);
                        let c = self.scale(s, scale);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::SumCKeep(x) => {
                    if active[x.0] {
                        let c_ch = self.value(x).dims4().1;
                        let c = self.repeat_channels(g, c_ch, 1.0);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::MeanAll(x) => {
                    if active[x.0] {
                        let shape = self.value(x).shape().to_vec();
                        let n = self.value(x).numel() as f32;
                        let c = self.fill(g, shape, 1.0 / n);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::SumAll(x) => {
                    if active[x.0] {
                        let shape = self.value(x).shape().to_vec();
                        let c = self.fill(g, shape, 1.0);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::Fill { s, scale } => {
                    if active[s.0] {
                        let t = self.sum_all(g);
                        let c = self.scale(t, scale);
                        push_to(self, &mut grads, s, c);
                    }
                }
                Op::MeanPerSample(x) => {
                    if active[x.0] {
                        let shape = self.value(x).shape().to_vec();
                        let per = (self.value(x).numel() / shape[0]) as f32;
                        let c = self.fill_per_sample(g, shape, 1.0 / per);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::SumPerSample(x) => {
                    if active[x.0] {
                        let shape = self.value(x).shape().to_vec();
                        let c = self.fill_per_sample(g, shape, 1.0);
                        push_to(self, &mut grads, x, c);
                    }
                }
                Op::FillPerSample { s, scale } => {
                    if active[s.0] {
                        let t = self.sum_per_sample(g);
                        let c = self.scale(t, scale);
                        push_to(self, &mut grads, s, c);
                    }
                }
            }
        }
        wrt.iter()
            .map(|v| if v.0 <= limit { grads[v.0] } else { None })
            .collect()
    }
}
