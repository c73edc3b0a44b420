//! Scalar training objectives.
//!
//! Each loss exists in two forms: a pure function of domain values returning
//! f64 (the reference the tests pin down), and a graph form used inside
//! training steps where gradients are needed. The two share their reductions,
//! so they agree to f32 precision.
//!
//! Conventions: adversarial losses are the non-saturating logistic objectives
//! on raw logits (softplus form, real logits pushed up, fake logits down),
//! and the diversity term is the clamped ratio of gradient-map distance to
//! noise distance, maximized by the generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imagecore::{GradientMap, ImageTensor};
use crate::nets::{Discriminator, Extractor, NoiseVector};
use crate::tensor::Tensor;

/// Noise pairs closer than this make the diversity ratio meaningless.
pub const NOISE_DEGENERACY_EPS: f64 = 1e-8;

/// Every scalar hyperparameter of the objectives in one place.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction weight on perceptual + gradient terms.
    pub gamma: f64,
    /// Adversarial weight inside the reconstruction objective.
    pub beta: f64,
    /// Diversity weight inside the hallucination objective.
    pub alpha: f64,
    /// Clamp on the diversity ratio.
    pub tau: f64,
    /// Consistency slack of the constraint map, in quantization steps.
    pub epsilon: f64,
    /// R1 regularization strength, applied to both discriminators.
    pub r1_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 10.0,
            beta: 0.1,
            alpha: 1.0,
            tau: 10.0,
            epsilon: 0.1,
            r1_coeff: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.gamma,
            self.beta,
            self.alpha,
            self.epsilon,
            self.r1_coeff,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sum over extractor stages of the mean absolute feature difference.
pub fn perceptual_loss(
    sr: &ImageTensor,
    hr: &ImageTensor,
    extractor: &dyn Extractor,
) -> Result<f64> {
    if sr.height() != hr.height() || sr.width() != hr.width() || sr.channels() != hr.channels() {
        return Err(Error::ShapeMismatch {
            context: "perceptual_loss",
            expected: format!("{}x{}x{}", hr.height(), hr.width(), hr.channels()),
            got: format!("{}x{}x{}", sr.height(), sr.width(), sr.channels()),
        });
    }
    let mut g = Graph::new();
    let a = g.leaf(sr.to_tensor());
    let b = g.leaf(hr.to_tensor());
    let fa = extractor.stages(&mut g, a);
    let fb = extractor.stages(&mut g, b);
    let mut total = 0.0f64;
    for (va, vb) in fa.iter().zip(&fb) {
        let xa = g.value(*va).data();
        let xb = g.value(*vb).data();
        let mean: f64 = xa
            .iter()
            .zip(xb)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / xa.len() as f64;
        total += mean;
    }
    Ok(total)
}

/// Graph form over batched image tensors; `hr` enters as a constant.
pub fn perceptual_loss_graph(g: &mut Graph, sr: Var, hr: Var, extractor: &dyn Extractor) -> Var {
    let fa = extractor.stages(g, sr);
    let fb = extractor.stages(g, hr);
    let mut acc: Option<Var> = None;
    for (va, vb) in fa.into_iter().zip(fb) {
        let d = g.sub(va, vb);
        let a = g.abs(d);
        let m = g.mean_all(a);
        acc = Some(match acc {
            None => m,
            Some(prev) => g.add(prev, m),
        });
    }
    acc.expect("extractor exposes at least one stage")
}

/// Mean absolute difference of two gradient maps.
pub fn gradient_recon_loss(g_sr: &GradientMap, g_hr: &GradientMap) -> Result<f64> {
    if g_sr.height() != g_hr.height() || g_sr.width() != g_hr.width() {
        return Err(Error::ShapeMismatch {
            context: "gradient_recon_loss",
            expected: format!("{}x{}", g_hr.height(), g_hr.width()),
            got: format!("{}x{}", g_sr.height(), g_sr.width()),
        });
    }
    let sum: f64 = g_sr
        .data()
        .iter()
        .zip(g_hr.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / g_sr.data().len() as f64)
}

/// Mean absolute difference of two same-shaped graph tensors.
pub fn l1_mean_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ab = g.abs(d);
    g.mean_all(ab)
}

/// Clamped diversity ratio for one sample pair:
/// min(mean|g1 - g2| / |z1 - z2|_2, tau).
pub fn diversity_loss(
    g1: &GradientMap,
    g2: &GradientMap,
    z1: &NoiseVector,
    z2: &NoiseVector,
    tau: f64,
) -> Result<f64> {
    if g1.height() != g2.height() || g1.width() != g2.width() {
        return Err(Error::ShapeMismatch {
            context: "diversity_loss",
            expected: format!("{}x{}", g1.height(), g1.width()),
            got: format!("{}x{}", g2.height(), g2.width()),
        });
    }
    let dist = z1.distance(z2);
    if dist < NOISE_DEGENERACY_EPS {
        return Err(Error::DegenerateNoise { norm: dist });
    }
    let d: f64 = g1
        .data()
        .iter()
        .zip(g2.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / g1.data().len() as f64;
    Ok((d / dist).min(tau))
}

/// Batched graph form: per-sample clamped ratios, averaged over the batch.
/// `g1`/`g2` are `[n, 1, h, w]` gradient outputs for noise batches `z1`/`z2`.
pub fn diversity_loss_graph(
    g: &mut Graph,
    g1: Var,
    g2: Var,
    z1: &[NoiseVector],
    z2: &[NoiseVector],
    tau: f64,
) -> Result<Var> {
    let n = g.value(g1).shape()[0];
    assert_eq!(z1.len(), n);
    assert_eq!(z2.len(), n);
    let mut inv = Vec::with_capacity(n);
    for (a, b) in z1.iter().zip(z2) {
        let dist = a.distance(b);
        if dist < NOISE_DEGENERACY_EPS {
            return Err(Error::DegenerateNoise { norm: dist });
        }
        inv.push((1.0 / dist) as f32);
    }
    let d = g.sub(g1, g2);
    let a = g.abs(d);
    let per = g.mean_per_sample(a);
    let ratio = g.mul_const(per, &Tensor::new(vec![n], inv));
    let clamped = g.min_scalar(ratio, tau as f32);
    Ok(g.mean_all(clamped))
}

fn ensure_finite(t: &Tensor, context: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Non-saturating discriminator objective:
/// mean softplus(-real) + mean softplus(fake).
pub fn d_adversarial_loss(logits_real: &Tensor, logits_fake: &Tensor) -> Result<f64> {
    ensure_finite(logits_real, "d_adversarial_loss real logits")?;
    ensure_finite(logits_fake, "d_adversarial_loss fake logits")?;
    let real: f64 = logits_real
        .data()
        .iter()
        .map(|&v| softplus(-(v as f64)))
        .sum::<f64>()
        / logits_real.numel() as f64;
    let fake: f64 = logits_fake
        .data()
        .iter()
        .map(|&v| softplus(v as f64))
        .sum::<f64>()
        / logits_fake.numel() as f64;
    Ok(real + fake)
}

pub fn d_adversarial_loss_graph(g: &mut Graph, logits_real: Var, logits_fake: Var) -> Var {
    let neg = g.scale(logits_real, -1.0);
    let sr = g.softplus(neg);
    let mr = g.mean_all(sr);
    let sf = g.softplus(logits_fake);
    let mf = g.mean_all(sf);
    g.add(mr, mf)
}

/// Non-saturating generator objective: mean softplus(-fake).
pub fn g_adversarial_loss(logits_fake: &Tensor) -> Result<f64> {
    ensure_finite(logits_fake, "g_adversarial_loss logits")?;
    Ok(logits_fake
        .data()
        .iter()
        .map(|&v| softplus(-(v as f64)))
        .sum::<f64>()
        / logits_fake.numel() as f64)
}

pub fn g_adversarial_loss_graph(g: &mut Graph, logits_fake: Var) -> Var {
    let neg = g.scale(logits_fake, -1.0);
    let s = g.softplus(neg);
    g.mean_all(s)
}

/// R1 penalty for an arbitrary forward map: half the batch-mean squared L2
/// norm of the gradient of the summed logits with respect to `inputs`.
///
/// The returned node can be differentiated again (to feed the discriminator
/// update) because the gradients are themselves graph nodes.
pub fn r1_penalty_with<F>(g: &mut Graph, inputs: &[Tensor], forward: F) -> Var
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    assert!(!inputs.is_empty());
    let n = inputs[0].shape()[0];
    let input_vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let logits = forward(g, &input_vars);
    let s = g.sum_all(logits);
    let grads = g.backward(s, &input_vars);
    let mut acc: Option<Var> = None;
    for gr in grads.into_iter().flatten() {
        let sq = g.square(gr);
        let ss = g.sum_all(sq);
        acc = Some(match acc {
            None => ss,
            Some(prev) => g.add(prev, ss),
        });
    }
    match acc {
        // A discriminator that ignores its input has zero input-gradient.
        None => g.leaf(Tensor::scalar(0.0)),
        Some(a) => g.scale(a, 0.5 / n as f32),
    }
}

/// Same penalty as a graph node, evaluated on the given discriminator with
/// shared parameter leaves (so one backward pass updates adversarial and R1
/// terms together). `scales` lists batched real inputs, smallest scale first.
/// The conditioning plane counts as one of the penalized inputs: it is zero
/// for real batches, but the discriminator's sensitivity to it is exactly
/// what the penalty must keep bounded.
pub fn r1_penalty_graph(
    g: &mut Graph,
    d: &Discriminator,
    leaves: &[Var],
    scales: &[Tensor],
    cond: Option<&Tensor>,
) -> Var {
    match cond {
        Some(c) => {
            let mut inputs = scales.to_vec();
            inputs.push(c.clone());
            r1_penalty_with(g, &inputs, |g, vars| {
                let (imgs, cv) = vars.split_at(vars.len() - 1);
                d.forward(g, leaves, imgs, Some(cv[0]))
            })
        }
        None => r1_penalty_with(g, scales, |g, vars| d.forward(g, leaves, vars, None)),
    }
}

/// Tensor-level R1 penalty of a discriminator on a real batch. A missing
/// `cond` on a conditioned discriminator means the all-zero map (the real
/// input convention).
pub fn r1_penalty(d: &Discriminator, scales: &[Tensor], cond: Option<&Tensor>) -> Result<f64> {
    for t in scales {
        ensure_finite(t, "r1_penalty inputs")?;
    }
    let n = scales[0].shape()[0];
    let zero_cond: Option<Tensor> = if d.with_cond() && cond.is_none() {
        // The smallest emitted scale is twice the LR grid.
        let (_, _, h, w) = scales[0].dims4();
        Some(Tensor::zeros(vec![n, 1, h / 2, w / 2]))
    } else {
        None
    };
    let cond_t = if d.with_cond() {
        cond.or(zero_cond.as_ref())
    } else {
        None
    };
    let mut g = Graph::new();
    let leaves = d.params.leaves(&mut g);
    let v = r1_penalty_graph(&mut g, d, &leaves, scales, cond_t);
    Ok(g.value(v).item() as f64)
}

/// L_recons = gamma (L_percp + L_grad) + beta (L_adv_g + L_adv_I).
pub fn recons_total(percp: f64, grad: f64, adv_g: f64, adv_i: f64, w: &LossWeights) -> f64 {
    w.gamma * (percp + grad) + w.beta * (adv_g + adv_i)
}

/// L_halluc = L_adv_g + L_adv_I - alpha L_z. The diversity term enters
/// negated: the generator minimizes this total while maximizing L_z.
pub fn halluc_total(adv_g: f64, adv_i: f64, div: f64, w: &LossWeights) -> f64 {
    adv_g + adv_i - w.alpha * div
}
