//! The generator, the two mirrored discriminators, and the perceptual
//! feature extractor.
//!
//! The generator runs a residual trunk at LR resolution on the LR image
//! concatenated with the spatially tiled noise vector, then one upblock per
//! factor-2 stage. Each upblock keeps a pre-activation accumulator per output
//! domain: the accumulator is upsampled, a small projected residual is added,
//! and a bounded activation (tanh for images, 2*sigmoid for gradient maps)
//! emits the scale's output. The accumulators are anchored on the LR input
//! itself, so a freshly initialized generator already reproduces an upsampled
//! version of its input and stays downscale-consistent.
//!
//! Discriminators mirror the generator: per-scale 1x1 injection convolutions,
//! two 3x3 convolutions with leaky activations, average-pool downsampling,
//! the constraint map concatenated at the last (LR-sized) block for the image
//! discriminator, a residual trunk, and a final 1x1 convolution whose raw
//! feature map is the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imagecore::{
    self, batch_to_tensor, gradient_map_from_tensor, image_from_tensor, ConstraintMap, GradientMap,
    ImageTensor,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Values straying this close to +-1 are clamped before the atanh anchor.
const ANCHOR_CLAMP: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Side length of the (square) LR input; must be at least 3.
    pub lr_size: usize,
    /// Upscaling factor, a power of two in {2, 4, 8}.
    pub scale_factor: usize,
    /// Channel width of the trunk and upblocks.
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    /// Noise dimension m.
    pub noise_dim: usize,
    /// Negative slope of every leaky activation.
    pub leak: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            lr_size: 4,
            scale_factor: 8,
            base_channels: 32,
            num_residual_blocks: 8,
            noise_dim: 64,
            leak: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale_factor, 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "scale_factor must be 2, 4 or 8, got {}",
                self.scale_factor
            )));
        }
        if self.lr_size < 3 {
            return Err(Error::Config(format!(
                "lr_size must be at least 3 (gradient anchors need a 3x3 stencil), got {}",
                self.lr_size
            )));
        }
        if self.num_residual_blocks < 1 {
            return Err(Error::Config("num_residual_blocks must be >= 1".into()));
        }
        if self.noise_dim < 1 {
            return Err(Error::Config("noise_dim must be >= 1".into()));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Config(format!(
                "leak must lie in [0, 1), got {}",
                self.leak
            )));
        }
        Ok(())
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * self.scale_factor
    }

    /// Number of upblocks / emitted scales: log2(scale_factor).
    pub fn num_scales(&self) -> usize {
        self.scale_factor.trailing_zeros() as usize
    }

    /// Spatial side of emitted scale k (0-based, last = HR).
    pub fn scale_size(&self, k: usize) -> usize {
        self.lr_size << (k + 1)
    }
}

/// m-dimensional noise; the zero vector selects reconstruction mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    values: Vec<f32>,
}

impl NoiseVector {
    pub fn zeros(m: usize) -> Self {
        NoiseVector {
            values: vec![0.0; m],
        }
    }

    pub fn sample(rng: &mut Rng, m: usize) -> Self {
        NoiseVector {
            values: (0..m).map(|_| rng.normal_f32()).collect(),
        }
    }

    pub fn from_values(values: Vec<f32>) -> Self {
        NoiseVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Euclidean distance, accumulated in f64.
    pub fn distance(&self, other: &NoiseVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Tile per-sample noise vectors into an `[n, m, h, w]` tensor.
pub fn noise_batch(zs: &[NoiseVector], h: usize, w: usize) -> Tensor {
    let n = zs.len();
    let m = zs[0].len();
    let mut data = vec![0.0f32; n * m * h * w];
    for (ni, z) in zs.iter().enumerate() {
        assert_eq!(z.len(), m, "noise vectors must share a dimension");
        for (mi, &v) in z.values.iter().enumerate() {
            let base = (ni * m + mi) * h * w;
            data[base..base + h * w].fill(v);
        }
    }
    Tensor::new(vec![n, m, h, w], data)
}

/// Named parameter arrays of one network, in construction order.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn set_by_name(&mut self, name: &str, t: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.tensors[idx].shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, file has {:?}",
                self.tensors[idx].shape(),
                t.shape()
            )));
        }
        self.tensors[idx] = t;
        Ok(())
    }

    /// Register every parameter as a leaf of `g`, in order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// A convolution layer: indices into a [`ParamSet`] plus geometry.
#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

struct NetBuilder<'a> {
    params: ParamSet,
    rng: &'a mut Rng,
}

impl<'a> NetBuilder<'a> {
    fn new(rng: &'a mut Rng) -> Self {
        NetBuilder {
            params: ParamSet::new(),
            rng,
        }
    }

    /// Kaiming-uniform weights scaled by `gain`, zero bias.
    fn conv(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        bias: bool,
    ) -> Conv {
        let fan_in = (ci * k * k) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let data = (0..co * ci * k * k)
            .map(|_| self.rng.uniform_in(-bound, bound) as f32)
            .collect();
        let w = self
            .params
            .add(format!("{name}.w"), Tensor::new(vec![co, ci, k, k], data));
        let b = if bias {
            Some(
                self.params
                    .add(format!("{name}.b"), Tensor::zeros(vec![co])),
            )
        } else {
            None
        };
        Conv { w, b, stride, pad }
    }
}

fn apply_conv(g: &mut Graph, leaves: &[Var], c: Conv, x: Var) -> Var {
    let y = g.conv2d(x, leaves[c.w], c.stride, c.pad);
    match c.b {
        Some(b) => g.add_bias(y, leaves[b]),
        None => y,
    }
}

fn leaky_gain(leak: f32) -> f64 {
    (2.0 / (1.0 + (leak as f64) * (leak as f64))).sqrt()
}

struct UpBlock {
    shared: Conv,
    img: Conv,
    img_proj: Conv,
    grad: Conv,
    grad_proj: Conv,
}

/// Multi-scale generator: trunk at LR size, one upblock per factor-2 stage.
pub struct Generator {
    cfg: GeneratorConfig,
    pub(crate) params: ParamSet,
    input_conv: Conv,
    res_blocks: Vec<(Conv, Conv)>,
    ups: Vec<UpBlock>,
}

/// Per-scale generator outputs as graph nodes (training path).
pub struct MultiScaleVars {
    /// Images from lr_size*2 up to hr_size, each bounded in [-1, 1].
    pub images: Vec<Var>,
    /// Gradient-map outputs aligned with `images`, each in [0, 2).
    pub gradients: Vec<Var>,
}

/// Per-scale generator outputs as domain values (inference path).
pub struct MultiScaleOutput {
    pub images: Vec<ImageTensor>,
    pub gradients: Vec<GradientMap>,
}

impl MultiScaleOutput {
    /// The HR pair: (I_SR, g_SR) when z = 0, (I_H_z, g_H_z) otherwise.
    pub fn final_pair(&self) -> (&ImageTensor, &GradientMap) {
        (
            self.images.last().expect("at least one scale"),
            self.gradients.last().unwrap(),
        )
    }
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Self {
        let c = cfg.base_channels;
        let gain = leaky_gain(cfg.leak);
        let mut b = NetBuilder::new(rng);
        let input_conv = b.conv("g/input", 3 + cfg.noise_dim, c, 3, 1, 1, gain, true);
        let res_blocks = (0..cfg.num_residual_blocks)
            .map(|i| {
                (
                    b.conv(&format!("g/res{i}.c1"), c, c, 3, 1, 1, gain, true),
                    b.conv(&format!("g/res{i}.c2"), c, c, 3, 1, 1, gain, true),
                )
            })
            .collect();
        let ups = (0..cfg.num_scales())
            .map(|k| UpBlock {
                shared: b.conv(&format!("g/up{k}.shared"), c, c, 3, 1, 1, gain, true),
                img: b.conv(&format!("g/up{k}.img"), c, c, 3, 1, 1, gain, true),
                img_proj: b.conv(&format!("g/up{k}.img_proj"), c, 3, 1, 1, 0, 0.05, true),
                grad: b.conv(&format!("g/up{k}.grad"), c, c, 3, 1, 1, gain, true),
                grad_proj: b.conv(&format!("g/up{k}.grad_proj"), c, 1, 1, 1, 0, 0.05, true),
            })
            .collect();
        Generator {
            cfg: cfg.clone(),
            params: b.params,
            input_conv,
            res_blocks,
            ups,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Constant anchors derived from the LR batch: the image accumulator
    /// starts at atanh(lr) and the gradient accumulator at logit(g_lr / 2),
    /// so zeroed residual heads would reproduce a plain upsampling.
    fn anchors(&self, lr_batch: &Tensor) -> (Tensor, Tensor) {
        let (n, _, h, w) = lr_batch.dims4();
        let img_anchor =
            lr_batch.map(|v| (v as f64).clamp(-ANCHOR_CLAMP, ANCHOR_CLAMP).atanh() as f32);
        let mut grad_data = Vec::with_capacity(n * h * w);
        for ni in 0..n {
            let img = image_from_tensor(lr_batch, ni);
            let gmap = imagecore::compute_gradient(&img)
                .expect("lr_size >= 3 is enforced by GeneratorConfig::validate");
            grad_data.extend(gmap.data().iter().map(|&v| {
                let p = (v / 2.0).clamp(0.02, 0.98);
                (p / (1.0 - p)).ln() as f32
            }));
        }
        (img_anchor, Tensor::new(vec![n, 1, h, w], grad_data))
    }

    /// Forward pass over graph nodes. `lr_batch` is [n, 3, lr, lr] and `zs`
    /// holds one noise vector per sample; both enter as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        lr_batch: &Tensor,
        zs: &[NoiseVector],
    ) -> MultiScaleVars {
        let (n, _, h, w) = lr_batch.dims4();
        assert_eq!(n, zs.len(), "one noise vector per sample");
        assert_eq!(h, self.cfg.lr_size, "lr batch height");
        assert_eq!(w, self.cfg.lr_size, "lr batch width");
        let leak = self.cfg.leak;

        let (img_anchor, grad_anchor) = self.anchors(lr_batch);
        let lr_var = g.leaf(lr_batch.clone());
        let z_var = g.leaf(noise_batch(zs, h, w));
        let mut feat = g.concat_channels(lr_var, z_var);
        feat = apply_conv(g, leaves, self.input_conv, feat);
        feat = g.leaky_relu(feat, leak);
        for &(c1, c2) in &self.res_blocks {
            let mut r = apply_conv(g, leaves, c1, feat);
            r = g.leaky_relu(r, leak);
            r = apply_conv(g, leaves, c2, r);
            feat = g.add(feat, r);
        }

        let mut img_acc = g.leaf(img_anchor);
        let mut grad_acc = g.leaf(grad_anchor);
        let mut images = Vec::with_capacity(self.ups.len());
        let mut gradients = Vec::with_capacity(self.ups.len());
        for up in &self.ups {
            feat = g.upsample(feat, 2);
            feat = apply_conv(g, leaves, up.shared, feat);
            feat = g.leaky_relu(feat, leak);

            let mut bi = apply_conv(g, leaves, up.img, feat);
            bi = g.leaky_relu(bi, leak);
            let di = apply_conv(g, leaves, up.img_proj, bi);
            let up_img = g.upsample(img_acc, 2);
            img_acc = g.add(up_img, di);
            images.push(g.tanh(img_acc));

            let mut bg = apply_conv(g, leaves, up.grad, feat);
            bg = g.leaky_relu(bg, leak);
            let dg = apply_conv(g, leaves, up.grad_proj, bg);
            let up_grad = g.upsample(grad_acc, 2);
            grad_acc = g.add(up_grad, dg);
            gradients.push(g.sigmoid2(grad_acc));
        }
        MultiScaleVars { images, gradients }
    }
}

/// Which discriminator a forward pass addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscriminatorKind {
    Image,
    Gradient,
}

/// Multi-scale inputs for [`discriminator_forward`].
pub enum ScaleInputs<'a> {
    Images(&'a [ImageTensor]),
    Gradients(&'a [GradientMap]),
}

/// Mirrored multi-scale discriminator. `in_channels` is 3 for the image
/// domain and 1 for the gradient domain; only the image discriminator
/// receives the constraint-map conditioning.
pub struct Discriminator {
    cfg: GeneratorConfig,
    pub(crate) params: ParamSet,
    in_channels: usize,
    with_cond: bool,
    inject: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    merge: Conv,
    res_blocks: Vec<(Conv, Conv)>,
    head: Conv,
}

impl Discriminator {
    pub fn new(cfg: &GeneratorConfig, in_channels: usize, with_cond: bool, rng: &mut Rng) -> Self {
        let c = cfg.base_channels;
        let gain = leaky_gain(cfg.leak);
        let scales = cfg.num_scales();
        let prefix = if in_channels == 1 { "dg" } else { "di" };
        let mut b = NetBuilder::new(rng);
        let mut inject = Vec::with_capacity(scales);
        let mut blocks = Vec::with_capacity(scales);
        for i in 0..scales {
            inject.push(b.conv(
                &format!("{prefix}/in{i}"),
                in_channels,
                c,
                1,
                1,
                0,
                gain,
                true,
            ));
            // The first block sees only the injected features; later blocks
            // see pooled features concatenated with the injection.
            let cin = if i == 0 { c } else { 2 * c };
            blocks.push((
                b.conv(&format!("{prefix}/blk{i}.c1"), cin, c, 3, 1, 1, gain, true),
                b.conv(&format!("{prefix}/blk{i}.c2"), c, c, 3, 1, 1, gain, true),
            ));
        }
        let merge_in = c + usize::from(with_cond);
        let merge = b.conv(&format!("{prefix}/merge"), merge_in, c, 3, 1, 1, gain, true);
        let res_blocks = (0..cfg.num_residual_blocks)
            .map(|i| {
                (
                    b.conv(&format!("{prefix}/res{i}.c1"), c, c, 3, 1, 1, gain, true),
                    b.conv(&format!("{prefix}/res{i}.c2"), c, c, 3, 1, 1, gain, true),
                )
            })
            .collect();
        // Raw feature map of the last convolution, used directly as logits.
        let head = b.conv(&format!("{prefix}/head"), c, 1, 1, 1, 0, 1.0, false);
        Discriminator {
            cfg: cfg.clone(),
            params: b.params,
            in_channels,
            with_cond,
            inject,
            blocks,
            merge,
            res_blocks,
            head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn with_cond(&self) -> bool {
        self.with_cond
    }

    /// Forward pass. `inputs` lists one Var per scale, smallest first
    /// (matching the generator's output order); `cond` is the constraint map
    /// at LR size and must be given iff the discriminator was built with
    /// conditioning. Returns patch logits [n, 1, lr, lr].
    pub fn forward(&self, g: &mut Graph, leaves: &[Var], inputs: &[Var], cond: Option<Var>) -> Var {
        let scales = self.cfg.num_scales();
        assert_eq!(inputs.len(), scales, "one input per scale");
        assert_eq!(cond.is_some(), self.with_cond, "conditioning mismatch");
        let leak = self.cfg.leak;
        let mut feat = None;
        for i in 0..scales {
            let x = inputs[scales - 1 - i];
            let mut inj = apply_conv(g, leaves, self.inject[i], x);
            inj = g.leaky_relu(inj, leak);
            let mut f = match feat {
                None => inj,
                Some(prev) => g.concat_channels(prev, inj),
            };
            let (c1, c2) = self.blocks[i];
            f = apply_conv(g, leaves, c1, f);
            f = g.leaky_relu(f, leak);
            f = apply_conv(g, leaves, c2, f);
            f = g.leaky_relu(f, leak);
            feat = Some(g.avg_pool2(f));
        }
        let mut f = feat.expect("at least one scale");
        if let Some(cv) = cond {
            f = g.concat_channels(f, cv);
        }
        f = apply_conv(g, leaves, self.merge, f);
        f = g.leaky_relu(f, leak);
        for &(c1, c2) in &self.res_blocks {
            let mut r = apply_conv(g, leaves, c1, f);
            r = g.leaky_relu(r, leak);
            r = apply_conv(g, leaves, c2, r);
            f = g.add(f, r);
        }
        apply_conv(g, leaves, self.head, f)
    }
}

/// Ordered frozen feature stages for the perceptual losses.
pub trait Extractor {
    /// Feature maps of each stage, shallowest first.
    fn stages(&self, g: &mut Graph, x: Var) -> Vec<Var>;
}

/// Frozen stack of stride-2 convolution stages with seeded random parameters.
/// Stage k halves the spatial size k+1 times. Pretrained weights in the
/// checkpoint array format can be swapped in via [`FeatureExtractor::load`].
pub struct FeatureExtractor {
    pub(crate) params: ParamSet,
    convs: Vec<Conv>,
    widths: Vec<usize>,
    seed: u64,
    leak: f32,
}

impl FeatureExtractor {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl Extractor for FeatureExtractor {
    fn stages(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let leaves = self.params.leaves(g);
        let mut cur = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for &c in &self.convs {
            cur = apply_conv(g, &leaves, c, cur);
            cur = g.leaky_relu(cur, self.leak);
            out.push(cur);
        }
        out
    }
}

/// The identity feature map: one stage, the image itself. Makes the
/// perceptual distance collapse to a plain mean absolute pixel difference.
pub struct IdentityExtractor;

impl Extractor for IdentityExtractor {
    fn stages(&self, _g: &mut Graph, x: Var) -> Vec<Var> {
        vec![x]
    }
}

/// Build the default frozen random extractor.
pub fn build_feature_extractor(seed: u64, stage_widths: &[usize]) -> Result<FeatureExtractor> {
    if stage_widths.is_empty() {
        return Err(Error::Config(
            "feature extractor needs at least one stage".into(),
        ));
    }
    let leak = 0.2;
    let mut rng = Rng::from_seed(seed).fork("feature-extractor");
    let mut b = NetBuilder::new(&mut rng);
    let mut convs = Vec::with_capacity(stage_widths.len());
    let mut cin = 3;
    for (i, &w) in stage_widths.iter().enumerate() {
        convs.push(b.conv(
            &format!("fx/stage{i}"),
            cin,
            w,
            3,
            2,
            1,
            leaky_gain(leak),
            true,
        ));
        cin = w;
    }
    Ok(FeatureExtractor {
        params: b.params,
        convs,
        widths: stage_widths.to_vec(),
        seed,
        leak,
    })
}

impl FeatureExtractor {
    /// Replace the random parameters with externally supplied ones (same
    /// array format as checkpoints; see the `checkpoint` module docs).
    pub fn load(path: &std::path::Path) -> Result<FeatureExtractor> {
        crate::checkpoint::load_extractor(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_extractor(self, path)
    }
}

/// Adam first/second moments aligned with a [`ParamSet`], plus the step count.
#[derive(Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            t: 0,
        }
    }
}

/// Everything a training run owns: the three networks, the frozen extractor,
/// optimizer state, step counter, and the RNG streams that keep runs
/// reproducible across checkpoint resume.
pub struct ModelBundle {
    pub config: GeneratorConfig,
    pub generator: Generator,
    pub d_image: Discriminator,
    pub d_gradient: Discriminator,
    pub extractor: FeatureExtractor,
    pub step: u64,
    pub opt_g: AdamState,
    pub opt_di: AdamState,
    pub opt_dg: AdamState,
    pub z_rng: Rng,
    pub data_rng: Rng,
}

impl ModelBundle {
    pub fn new(config: &GeneratorConfig, seed: u64, extractor_widths: &[usize]) -> Result<Self> {
        config.validate()?;
        let root = Rng::from_seed(seed);
        let mut g_rng = root.fork("init/generator");
        let mut di_rng = root.fork("init/d_image");
        let mut dg_rng = root.fork("init/d_gradient");
        let generator = Generator::new(config, &mut g_rng);
        let d_image = Discriminator::new(config, 3, true, &mut di_rng);
        let d_gradient = Discriminator::new(config, 1, false, &mut dg_rng);
        let extractor = build_feature_extractor(seed, extractor_widths)?;
        let opt_g = AdamState::new(&generator.params);
        let opt_di = AdamState::new(&d_image.params);
        let opt_dg = AdamState::new(&d_gradient.params);
        Ok(ModelBundle {
            config: config.clone(),
            generator,
            d_image,
            d_gradient,
            extractor,
            step: 0,
            opt_g,
            opt_di,
            opt_dg,
            z_rng: root.fork("z"),
            data_rng: root.fork("data"),
        })
    }
}

/// Run the generator on one LR image. Deterministic given (bundle, lr, z):
/// z = 0 reconstructs, z != 0 hallucinates.
pub fn generator_forward(
    bundle: &ModelBundle,
    lr: &ImageTensor,
    z: &NoiseVector,
) -> Result<MultiScaleOutput> {
    let cfg = &bundle.config;
    if lr.height() != cfg.lr_size || lr.width() != cfg.lr_size {
        return Err(Error::ShapeMismatch {
            context: "generator_forward",
            expected: format!("{0}x{0} LR input", cfg.lr_size),
            got: format!("{}x{}", lr.height(), lr.width()),
        });
    }
    if z.len() != cfg.noise_dim {
        return Err(Error::ShapeMismatch {
            context: "generator_forward noise",
            expected: format!("{} dims", cfg.noise_dim),
            got: format!("{}", z.len()),
        });
    }
    let mut g = Graph::new();
    let leaves = bundle.generator.params.leaves(&mut g);
    let lr_batch = batch_to_tensor(std::slice::from_ref(lr));
    let out = bundle
        .generator
        .forward(&mut g, &leaves, &lr_batch, std::slice::from_ref(z));
    Ok(MultiScaleOutput {
        images: out
            .images
            .iter()
            .map(|&v| image_from_tensor(g.value(v), 0))
            .collect(),
        gradients: out
            .gradients
            .iter()
            .map(|&v| gradient_map_from_tensor(g.value(v), 0))
            .collect(),
    })
}

/// Run one discriminator on a multi-scale input list (smallest scale first).
/// For the image discriminator a missing `cond` means the all-zero map (the
/// real-image input convention). Returns raw patch logits.
pub fn discriminator_forward(
    bundle: &ModelBundle,
    which: DiscriminatorKind,
    inputs: ScaleInputs<'_>,
    cond: Option<&ConstraintMap>,
) -> Result<Tensor> {
    let cfg = &bundle.config;
    let scales = cfg.num_scales();
    let mut g = Graph::new();
    let (d, input_vars): (&Discriminator, Vec<Var>) = match (which, inputs) {
        (DiscriminatorKind::Image, ScaleInputs::Images(images)) => {
            if images.len() != scales {
                return Err(Error::ShapeMismatch {
                    context: "discriminator_forward scales",
                    expected: format!("{scales} inputs"),
                    got: format!("{}", images.len()),
                });
            }
            for (k, img) in images.iter().enumerate() {
                if img.height() != cfg.scale_size(k) || img.channels() != 3 {
                    return Err(Error::ShapeMismatch {
                        context: "discriminator_forward input",
                        expected: format!("{0}x{0}x3 at scale {k}", cfg.scale_size(k)),
                        got: format!("{}x{}x{}", img.height(), img.width(), img.channels()),
                    });
                }
            }
            let vars = images
                .iter()
                .map(|im| {
                    let t = batch_to_tensor(std::slice::from_ref(im));
                    g.leaf(t)
                })
                .collect();
            (&bundle.d_image, vars)
        }
        (DiscriminatorKind::Gradient, ScaleInputs::Gradients(maps)) => {
            if maps.len() != scales {
                return Err(Error::ShapeMismatch {
                    context: "discriminator_forward scales",
                    expected: format!("{scales} inputs"),
                    got: format!("{}", maps.len()),
                });
            }
            for (k, m) in maps.iter().enumerate() {
                if m.height() != cfg.scale_size(k) {
                    return Err(Error::ShapeMismatch {
                        context: "discriminator_forward input",
                        expected: format!("{0}x{0} map at scale {k}", cfg.scale_size(k)),
                        got: format!("{}x{}", m.height(), m.width()),
                    });
                }
            }
            let vars = maps.iter().map(|m| g.leaf(m.to_tensor())).collect();
            (&bundle.d_gradient, vars)
        }
        _ => {
            return Err(Error::Config(
                "discriminator kind does not match input domain".into(),
            ))
        }
    };
    let cond_var = match which {
        DiscriminatorKind::Image => {
            let c = match cond {
                Some(c) => {
                    if c.height() != cfg.lr_size || c.width() != cfg.lr_size {
                        return Err(Error::ShapeMismatch {
                            context: "discriminator_forward cond",
                            expected: format!("{0}x{0}", cfg.lr_size),
                            got: format!("{}x{}", c.height(), c.width()),
                        });
                    }
                    c.to_tensor()
                }
                None => Tensor::zeros(vec![1, 1, cfg.lr_size, cfg.lr_size]),
            };
            Some(g.leaf(c))
        }
        DiscriminatorKind::Gradient => None,
    };
    let leaves = d.params.leaves(&mut g);
    let logits = d.forward(&mut g, &leaves, &input_vars, cond_var);
    Ok(g.value(logits).clone())
}
