//! The optimization loop: alternating discriminator and generator steps with
//! two time-scale Adam updates.
//!
//! Each iteration runs one discriminator step (both discriminators, on a fake
//! batch mixing reconstruction and hallucination outputs half/half, with R1
//! regularization on the real inputs) and one generator step (a z = 0
//! reconstruction pass and a two-sample hallucination pass whose gradients
//! accumulate into a single update).
//!
//! Batch order is derived statelessly from the bundle's data stream and the
//! global sample position, and the noise stream advances only inside steps,
//! so a run resumed from a checkpoint replays exactly the uninterrupted run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imagecore::{
    batch_to_tensor, compute_gradient, constraint_map, downscale, gradient_batch_to_tensor,
    image_from_tensor, ImageTensor, COLOR_STEP,
};
use crate::losses::{
    d_adversarial_loss_graph, diversity_loss_graph, g_adversarial_loss_graph, l1_mean_graph,
    perceptual_loss_graph, r1_penalty_graph, LossWeights,
};
use crate::nets::{AdamState, GeneratorConfig, ModelBundle, MultiScaleVars, NoiseVector, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_generator: f64,
    /// TTUR: the discriminators run at their own (faster) rate.
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            batch_size: 8,
            total_steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One CSV row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_di: f64,
    pub loss_dg: f64,
    pub loss_recons: f64,
    pub loss_halluc: f64,
    pub l_percp: f64,
    pub l_grad: f64,
    pub l_z: f64,
    pub r1_i: f64,
    pub r1_g: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss_DI,loss_Dg,loss_recons,loss_halluc,L_percp,L_grad,L_z,r1_I,r1_g";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_di,
            self.loss_dg,
            self.loss_recons,
            self.loss_halluc,
            self.l_percp,
            self.l_grad,
            self.l_z,
            self.r1_i,
            self.r1_g
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss_di,
            self.loss_dg,
            self.loss_recons,
            self.loss_halluc,
            self.l_percp,
            self.l_grad,
            self.l_z,
            self.r1_i,
            self.r1_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Write a metrics log (header plus one row per step).
pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// A training batch: the LR tensor, ground-truth pyramids, and the per-sample
/// LR images needed for constraint maps.
pub struct Batch {
    pub lr: Tensor,
    pub lr_images: Vec<ImageTensor>,
    /// Ground truth downscaled to each emitted scale, smallest first.
    pub hr_scales: Vec<Tensor>,
    /// Gradient maps of each entry of `hr_scales`.
    pub grad_scales: Vec<Tensor>,
}

impl Batch {
    pub fn from_samples(samples: &[&PairedSample], cfg: &GeneratorConfig) -> Result<Self> {
        let lr_images: Vec<ImageTensor> = samples.iter().map(|s| s.lr.clone()).collect();
        let lr = batch_to_tensor(&lr_images);
        let scales = cfg.num_scales();
        let mut hr_scales = Vec::with_capacity(scales);
        let mut grad_scales = Vec::with_capacity(scales);
        for k in 0..scales {
            let factor = cfg.scale_factor >> (k + 1);
            let mut imgs = Vec::with_capacity(samples.len());
            let mut grads = Vec::with_capacity(samples.len());
            for s in samples {
                let img = downscale(&s.hr, factor)?;
                grads.push(compute_gradient(&img)?);
                imgs.push(img);
            }
            hr_scales.push(batch_to_tensor(&imgs));
            grad_scales.push(gradient_batch_to_tensor(&grads));
        }
        Ok(Batch {
            lr,
            lr_images,
            hr_scales,
            grad_scales,
        })
    }

    pub fn len(&self) -> usize {
        self.lr_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr_images.is_empty()
    }
}

fn adam_update(
    params: &mut ParamSet,
    state: &mut AdamState,
    grads: &[Option<Tensor>],
    lr: f64,
    beta1: f64,
    beta2: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let (lr, bc1, bc2) = (lr as f32, bc1 as f32, bc2 as f32);
    for (i, gopt) in grads.iter().enumerate() {
        let Some(grad) = gopt else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensors_mut()[i].data_mut();
        for ((&g, (m, v)), p) in grad
            .data()
            .iter()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(p)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn extract_grads(g: &Graph, vars: Vec<Option<Var>>) -> Vec<Option<Tensor>> {
    vars.into_iter()
        .map(|v| v.map(|v| g.value(v).clone()))
        .collect()
}

/// Noise vectors for one fake batch: the first half zero (reconstruction
/// mode), the rest sampled (hallucination mode).
fn mixed_noise(bundle: &mut ModelBundle, n: usize) -> Vec<NoiseVector> {
    let m = bundle.config.noise_dim;
    (0..n)
        .map(|i| {
            if i < n / 2 {
                NoiseVector::zeros(m)
            } else {
                NoiseVector::sample(&mut bundle.z_rng, m)
            }
        })
        .collect()
}

/// Constraint map F for a graph-borne fake image, with the straight-through
/// rounding keeping gradients flowing to the generator.
fn constraint_map_graph(
    g: &mut Graph,
    fake_hr: Var,
    lr_const: Var,
    factor: usize,
    epsilon: f64,
) -> Var {
    let ds = g.block_mean(fake_hr, factor);
    let rounded = g.round_colors_st(ds);
    let diff = g.sub(rounded, lr_const);
    let a = g.abs(diff);
    let scaled = g.scale(a, (1.0 / COLOR_STEP) as f32);
    let slack = g.add_scalar(scaled, -epsilon as f32);
    let clipped = g.relu(slack);
    g.mean_channels(clipped)
}

/// Metrics of one discriminator step.
pub struct DStepMetrics {
    /// Full objectives (adversarial + weighted R1) per discriminator.
    pub loss_di: f64,
    pub loss_dg: f64,
    pub r1_i: f64,
    pub r1_g: f64,
}

/// One update of both discriminators; generator parameters are untouched.
pub fn train_step_discriminators(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<DStepMetrics> {
    let gen_cfg = bundle.config.clone();
    let n = batch.len();
    let w = &cfg.weights;

    // Detached fakes: run the generator without registering its parameters
    // as differentiated inputs, then freeze the outputs as constants.
    let zs = mixed_noise(bundle, n);
    let (fake_imgs, fake_grads) = {
        let mut g = Graph::new();
        let leaves = bundle.generator.params.leaves(&mut g);
        let out = bundle.generator.forward(&mut g, &leaves, &batch.lr, &zs);
        let imgs: Vec<Tensor> = out.images.iter().map(|&v| g.value(v).clone()).collect();
        let grads: Vec<Tensor> = out.gradients.iter().map(|&v| g.value(v).clone()).collect();
        (imgs, grads)
    };

    // Per-sample constraint maps of the fakes (array-level: no gradient needs
    // to reach the generator here).
    let fake_final = fake_imgs.last().expect("at least one scale");
    let mut cond_rows = Vec::with_capacity(n);
    for i in 0..n {
        let img = image_from_tensor(fake_final, i);
        cond_rows.push(constraint_map(
            &img,
            &batch.lr_images[i],
            gen_cfg.scale_factor,
            w.epsilon,
        )?);
    }
    let cond_data: Vec<f32> = cond_rows
        .iter()
        .flat_map(|c| c.data().iter().map(|&v| v as f32))
        .collect();
    let fake_cond = Tensor::new(vec![n, 1, gen_cfg.lr_size, gen_cfg.lr_size], cond_data);
    let zero_cond = Tensor::zeros(vec![n, 1, gen_cfg.lr_size, gen_cfg.lr_size]);

    // Image discriminator.
    let (di_total, di_r1, di_grads) = {
        let mut g = Graph::new();
        let leaves = bundle.d_image.params.leaves(&mut g);
        let real_vars: Vec<Var> = batch.hr_scales.iter().map(|t| g.leaf(t.clone())).collect();
        let fake_vars: Vec<Var> = fake_imgs.iter().map(|t| g.leaf(t.clone())).collect();
        let zc = g.leaf(zero_cond.clone());
        let fc = g.leaf(fake_cond.clone());
        let logits_real = bundle
            .d_image
            .forward(&mut g, &leaves, &real_vars, Some(zc));
        let logits_fake = bundle
            .d_image
            .forward(&mut g, &leaves, &fake_vars, Some(fc));
        let adv = d_adversarial_loss_graph(&mut g, logits_real, logits_fake);
        let r1 = r1_penalty_graph(
            &mut g,
            &bundle.d_image,
            &leaves,
            &batch.hr_scales,
            Some(&zero_cond),
        );
        let r1w = g.scale(r1, w.r1_coeff as f32);
        let total = g.add(adv, r1w);
        let total_v = g.value(total).item() as f64;
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("image-discriminator loss at step {}", bundle.step),
            });
        }
        let grads = g.backward(total, &leaves);
        (total_v, g.value(r1).item() as f64, extract_grads(&g, grads))
    };

    // Gradient discriminator (no conditioning).
    let (dg_total, dg_r1, dg_grads) = {
        let mut g = Graph::new();
        let leaves = bundle.d_gradient.params.leaves(&mut g);
        let real_vars: Vec<Var> = batch
            .grad_scales
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect();
        let fake_vars: Vec<Var> = fake_grads.iter().map(|t| g.leaf(t.clone())).collect();
        let logits_real = bundle.d_gradient.forward(&mut g, &leaves, &real_vars, None);
        let logits_fake = bundle.d_gradient.forward(&mut g, &leaves, &fake_vars, None);
        let adv = d_adversarial_loss_graph(&mut g, logits_real, logits_fake);
        let r1 = r1_penalty_graph(
            &mut g,
            &bundle.d_gradient,
            &leaves,
            &batch.grad_scales,
            None,
        );
        let r1w = g.scale(r1, w.r1_coeff as f32);
        let total = g.add(adv, r1w);
        let total_v = g.value(total).item() as f64;
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient-discriminator loss at step {}", bundle.step),
            });
        }
        let grads = g.backward(total, &leaves);
        (total_v, g.value(r1).item() as f64, extract_grads(&g, grads))
    };

    adam_update(
        &mut bundle.d_image.params,
        &mut bundle.opt_di,
        &di_grads,
        cfg.lr_discriminator,
        cfg.adam_beta1,
        cfg.adam_beta2,
    );
    adam_update(
        &mut bundle.d_gradient.params,
        &mut bundle.opt_dg,
        &dg_grads,
        cfg.lr_discriminator,
        cfg.adam_beta1,
        cfg.adam_beta2,
    );
    Ok(DStepMetrics {
        loss_di: di_total,
        loss_dg: dg_total,
        r1_i: di_r1,
        r1_g: dg_r1,
    })
}

/// Metrics of one generator step.
pub struct GStepMetrics {
    pub loss_recons: f64,
    pub loss_halluc: f64,
    pub l_percp: f64,
    pub l_grad: f64,
    pub l_z: f64,
}

/// Adversarial logits of a fake multi-scale output against both frozen
/// discriminators; returns (g_adv_image, g_adv_gradient) nodes.
fn fake_adversarial_terms(
    g: &mut Graph,
    bundle: &ModelBundle,
    di_leaves: &[Var],
    dg_leaves: &[Var],
    out: &MultiScaleVars,
    lr_const: Var,
    epsilon: f64,
) -> (Var, Var) {
    let fake_final = *out.images.last().expect("scales");
    let cond = constraint_map_graph(g, fake_final, lr_const, bundle.config.scale_factor, epsilon);
    let logits_i = bundle
        .d_image
        .forward(g, di_leaves, &out.images, Some(cond));
    let logits_g = bundle
        .d_gradient
        .forward(g, dg_leaves, &out.gradients, None);
    (
        g_adversarial_loss_graph(g, logits_i),
        g_adversarial_loss_graph(g, logits_g),
    )
}

/// One generator update accumulating the reconstruction pass (z = 0) and the
/// two-sample hallucination pass; discriminators are untouched.
pub fn train_step_generator(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<GStepMetrics> {
    let n = batch.len();
    let m = bundle.config.noise_dim;
    let w = cfg.weights;

    // Hallucination noise; one resample on a degenerate pair, then abort.
    let mut z1: Vec<NoiseVector> = (0..n)
        .map(|_| NoiseVector::sample(&mut bundle.z_rng, m))
        .collect();
    let mut z2: Vec<NoiseVector> = (0..n)
        .map(|_| NoiseVector::sample(&mut bundle.z_rng, m))
        .collect();
    let degenerate = |a: &[NoiseVector], b: &[NoiseVector]| {
        a.iter()
            .zip(b)
            .any(|(x, y)| x.distance(y) < crate::losses::NOISE_DEGENERACY_EPS)
    };
    if degenerate(&z1, &z2) {
        z1 = (0..n)
            .map(|_| NoiseVector::sample(&mut bundle.z_rng, m))
            .collect();
        z2 = (0..n)
            .map(|_| NoiseVector::sample(&mut bundle.z_rng, m))
            .collect();
        if degenerate(&z1, &z2) {
            return Err(Error::DegenerateNoise { norm: 0.0 });
        }
    }

    let mut g = Graph::new();
    let g_leaves = bundle.generator.params.leaves(&mut g);
    let di_leaves = bundle.d_image.params.leaves(&mut g);
    let dg_leaves = bundle.d_gradient.params.leaves(&mut g);
    let lr_const = g.leaf(batch.lr.clone());

    // Pass 1: reconstruction.
    let zeros: Vec<NoiseVector> = (0..n).map(|_| NoiseVector::zeros(m)).collect();
    let recon = bundle
        .generator
        .forward(&mut g, &g_leaves, &batch.lr, &zeros);
    let hr_final = g.leaf(batch.hr_scales.last().expect("scales").clone());
    let percp = perceptual_loss_graph(
        &mut g,
        *recon.images.last().unwrap(),
        hr_final,
        &bundle.extractor,
    );
    let mut grad_terms: Option<Var> = None;
    for (k, &gv) in recon.gradients.iter().enumerate() {
        let target = g.leaf(batch.grad_scales[k].clone());
        let term = l1_mean_graph(&mut g, gv, target);
        grad_terms = Some(match grad_terms {
            None => term,
            Some(prev) => g.add(prev, term),
        });
    }
    let l_grad = {
        let sum = grad_terms.expect("at least one scale");
        g.scale(sum, 1.0 / recon.gradients.len() as f32)
    };
    let (adv_i_r, adv_g_r) = {
        let (ai, ag) = fake_adversarial_terms(
            &mut g, bundle, &di_leaves, &dg_leaves, &recon, lr_const, w.epsilon,
        );
        (ai, ag)
    };
    // recons_total in graph form.
    let pg = g.add(percp, l_grad);
    let pg_w = g.scale(pg, w.gamma as f32);
    let adv_sum_r = g.add(adv_g_r, adv_i_r);
    let adv_w = g.scale(adv_sum_r, w.beta as f32);
    let loss_recons = g.add(pg_w, adv_w);

    // Pass 2: hallucination.
    let hal1 = bundle.generator.forward(&mut g, &g_leaves, &batch.lr, &z1);
    let hal2 = bundle.generator.forward(&mut g, &g_leaves, &batch.lr, &z2);
    let l_z = diversity_loss_graph(
        &mut g,
        *hal1.gradients.last().unwrap(),
        *hal2.gradients.last().unwrap(),
        &z1,
        &z2,
        w.tau,
    )?;
    let (adv_i_1, adv_g_1) = fake_adversarial_terms(
        &mut g, bundle, &di_leaves, &dg_leaves, &hal1, lr_const, w.epsilon,
    );
    let (adv_i_2, adv_g_2) = fake_adversarial_terms(
        &mut g, bundle, &di_leaves, &dg_leaves, &hal2, lr_const, w.epsilon,
    );
    let adv_i_h = {
        let s = g.add(adv_i_1, adv_i_2);
        g.scale(s, 0.5)
    };
    let adv_g_h = {
        let s = g.add(adv_g_1, adv_g_2);
        g.scale(s, 0.5)
    };
    // halluc_total in graph form: adv terms minus alpha * L_z.
    let adv_sum_h = g.add(adv_g_h, adv_i_h);
    let div_w = g.scale(l_z, -w.alpha as f32);
    let loss_halluc = g.add(adv_sum_h, div_w);

    let total = g.add(loss_recons, loss_halluc);
    let total_v = g.value(total).item() as f64;
    if !total_v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("generator loss at step {}", bundle.step),
        });
    }
    let grad_vars = g.backward(total, &g_leaves);
    let grads = extract_grads(&g, grad_vars);
    let metrics = GStepMetrics {
        loss_recons: g.value(loss_recons).item() as f64,
        loss_halluc: g.value(loss_halluc).item() as f64,
        l_percp: g.value(percp).item() as f64,
        l_grad: g.value(l_grad).item() as f64,
        l_z: g.value(l_z).item() as f64,
    };
    drop(g);
    adam_update(
        &mut bundle.generator.params,
        &mut bundle.opt_g,
        &grads,
        cfg.lr_generator,
        cfg.adam_beta1,
        cfg.adam_beta2,
    );
    Ok(metrics)
}

/// Sample index for global position `pos`: a fresh permutation per epoch,
/// derived from the bundle's frozen data stream (stateless, so checkpoint
/// resume reproduces the schedule).
fn sample_index(data_rng: &crate::rng::Rng, n: usize, pos: u64) -> usize {
    let epoch = pos / n as u64;
    let within = (pos % n as u64) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = data_rng.fork(&format!("epoch-{epoch}"));
    rng.shuffle(&mut perm);
    perm[within]
}

/// Run `steps` additional iterations on an existing bundle.
pub fn train_steps(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    dataset: &[PairedSample],
    steps: u64,
    metrics: &mut Vec<StepMetrics>,
    out_dir: Option<&Path>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    cfg.validate()?;
    let n = dataset.len();
    for _ in 0..steps {
        let base = bundle.step * cfg.batch_size as u64;
        let samples: Vec<&PairedSample> = (0..cfg.batch_size)
            .map(|j| &dataset[sample_index(&bundle.data_rng, n, base + j as u64)])
            .collect();
        let batch = Batch::from_samples(&samples, &bundle.config)?;
        let d = train_step_discriminators(bundle, &batch, cfg)?;
        let gm = train_step_generator(bundle, &batch, cfg)?;
        bundle.step += 1;
        metrics.push(StepMetrics {
            step: bundle.step,
            loss_di: d.loss_di,
            loss_dg: d.loss_dg,
            loss_recons: gm.loss_recons,
            loss_halluc: gm.loss_halluc,
            l_percp: gm.l_percp,
            l_grad: gm.l_grad,
            l_z: gm.l_z,
            r1_i: d.r1_i,
            r1_g: d.r1_g,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && bundle.step % cfg.checkpoint_every == 0 {
                crate::checkpoint::save_bundle(
                    bundle,
                    &dir.join(format!("ckpt-{:06}.ckpt", bundle.step)),
                )?;
            }
        }
    }
    Ok(())
}

/// Full training run from scratch. When `out_dir` is given, periodic
/// checkpoints, a final `model.ckpt`, and `metrics.csv` land there.
pub fn train(
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
    extractor_widths: &[usize],
    dataset: &[PairedSample],
    out_dir: Option<&Path>,
) -> Result<(ModelBundle, Vec<StepMetrics>)> {
    let mut bundle = ModelBundle::new(gen_cfg, cfg.seed, extractor_widths)?;
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    train_steps(
        &mut bundle,
        cfg,
        dataset,
        cfg.total_steps,
        &mut metrics,
        out_dir,
    )?;
    if let Some(dir) = out_dir {
        crate::checkpoint::save_bundle(&bundle, &dir.join("model.ckpt"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok((bundle, metrics))
}
