//! Deterministic image-domain primitives.
//!
//! Everything here is pure f64 arithmetic: gradient maps, area downscaling,
//! color-grid quantization, and the constraint map that conditions the image
//! discriminator. The training path re-expresses the same math as graph ops;
//! these functions are the reference the tests lean on.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::grid_round;
use crate::tensor::Tensor;

/// Quantization step of the 256-level color grid on [-1, 1].
pub const COLOR_STEP: f64 = 2.0 / 255.0;

/// H x W x C raster with values in [-1, 1], stored planar (channel-major).
/// The common currency for LR/HR/SR/hallucinated images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageTensor {
    /// Construct and validate: positive dims, 1 or 3 channels, all values
    /// finite and inside [-1, 1].
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionTooSmall {
                what: "image dimension",
                got: 0,
                min: 1,
            });
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                context: "ImageTensor::new",
                expected: format!("{} values", height * width * channels),
                got: format!("{}", data.len()),
            });
        }
        if !data
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
        {
            return Err(Error::NonFinite {
                context: "ImageTensor values outside [-1, 1]".into(),
            });
        }
        Ok(ImageTensor {
            data,
            height,
            width,
            channels,
        })
    }

    /// Construct, clamping values into [-1, 1]. NaN becomes 0.
    pub fn from_unclamped(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        ImageTensor {
            data,
            height,
            width,
            channels,
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Self {
        ImageTensor::from_unclamped(height, width, channels, vec![v; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One image as a [1, c, h, w] f32 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Horizontal mirror (used by tests and the optional flip augmentation).
    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}

/// Stack images of identical shape into an `[n, c, h, w]` f32 tensor.
pub fn batch_to_tensor(images: &[ImageTensor]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert!(
            img.height == h && img.width == w && img.channels == c,
            "batch images must share a shape"
        );
        data.extend(img.data.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Extract sample `idx` of an `[n, c, h, w]` tensor, clamping into [-1, 1].
pub fn image_from_tensor(t: &Tensor, idx: usize) -> ImageTensor {
    let (n, c, h, w) = t.dims4();
    assert!(idx < n);
    let per = c * h * w;
    let data = t.data()[idx * per..(idx + 1) * per]
        .iter()
        .map(|&v| v as f64)
        .collect();
    ImageTensor::from_unclamped(h, w, c, data)
}

/// H x W x 1 nonnegative raster of gradient magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl GradientMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "GradientMap::new",
                expected: format!("{} values", height * width),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::NonFinite {
                context: "GradientMap values must be >= 0".into(),
            });
        }
        Ok(GradientMap {
            data,
            height,
            width,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn flip_horizontal(&self) -> GradientMap {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                data[y * self.width + x] = self.get(y, self.width - 1 - x);
            }
        }
        GradientMap {
            data,
            height: self.height,
            width: self.width,
        }
    }
}

/// Stack gradient maps into an `[n, 1, h, w]` f32 tensor.
pub fn gradient_batch_to_tensor(maps: &[GradientMap]) -> Tensor {
    assert!(!maps.is_empty());
    let (h, w) = (maps[0].height, maps[0].width);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        assert!(m.height == h && m.width == w);
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![maps.len(), 1, h, w], data)
}

/// Extract sample `idx` of an `[n, 1, h, w]` tensor, clamping below at 0.
pub fn gradient_map_from_tensor(t: &Tensor, idx: usize) -> GradientMap {
    let (n, c, h, w) = t.dims4();
    assert!(idx < n && c == 1);
    let per = h * w;
    let data = t.data()[idx * per..(idx + 1) * per]
        .iter()
        .map(|&v| (v as f64).max(0.0))
        .collect();
    GradientMap {
        data,
        height: h,
        width: w,
    }
}

/// Per-pixel consistency-violation map at LR resolution (one channel), with
/// the slack `epsilon` measured in quantization steps `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintMap {
    data: Vec<f64>,
    height: usize,
    width: usize,
    epsilon: f64,
    r: f64,
}

impl ConstraintMap {
    pub fn zero(height: usize, width: usize, epsilon: f64) -> Self {
        ConstraintMap {
            data: vec![0.0; height * width],
            height,
            width,
            epsilon,
            r: COLOR_STEP,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Central-difference gradient magnitude map.
///
/// Differences are computed per channel with replicate padding (so border
/// pixels difference over a one-pixel span), averaged across channels, and
/// combined as sqrt(gx^2 + gy^2).
pub fn compute_gradient(image: &ImageTensor) -> Result<GradientMap> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if h < 3 {
        return Err(Error::DimensionTooSmall {
            what: "image height",
            got: h,
            min: 3,
        });
    }
    if w < 3 {
        return Err(Error::DimensionTooSmall {
            what: "image width",
            got: w,
            min: 3,
        });
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        let yn = if y + 1 < h { y + 1 } else { y };
        let yp = y.saturating_sub(1);
        for x in 0..w {
            let xn = if x + 1 < w { x + 1 } else { x };
            let xp = x.saturating_sub(1);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                gx += image.get(y, xn, ch) - image.get(y, xp, ch);
                gy += image.get(yn, x, ch) - image.get(yp, x, ch);
            }
            gx /= c as f64;
            gy /= c as f64;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    GradientMap::new(h, w, out)
}

/// Area downscale: mean over non-overlapping factor x factor blocks.
pub fn downscale(image: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::Config("downscale factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    if h % factor != 0 {
        return Err(Error::NotDivisible { size: h, factor });
    }
    if w % factor != 0 {
        return Err(Error::NotDivisible { size: w, factor });
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0f64; oh * ow * c];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += image.get(oy * factor + dy, ox * factor + dx, ch);
                    }
                }
                data[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    ImageTensor::new(oh, ow, c, data)
}

/// Round every element to the nearest of the 256 color levels. Idempotent;
/// when used inside a training graph the backward pass is the identity
/// (straight-through), see [`crate::graph::Graph::round_colors_st`].
pub fn round_colors(image: &ImageTensor) -> ImageTensor {
    ImageTensor {
        data: image.data.iter().map(|&v| grid_round(v)).collect(),
        height: image.height,
        width: image.width,
        channels: image.channels,
    }
}

/// The conditioning map F = max(|round(DS(fake)) - lr| / r - epsilon, 0),
/// computed per channel and averaged to one plane.
pub fn constraint_map(
    fake_hr: &ImageTensor,
    lr: &ImageTensor,
    factor: usize,
    epsilon: f64,
) -> Result<ConstraintMap> {
    let ds = downscale(fake_hr, factor)?;
    if ds.height != lr.height || ds.width != lr.width || ds.channels != lr.channels {
        return Err(Error::ShapeMismatch {
            context: "constraint_map",
            expected: format!("{}x{}x{}", lr.height, lr.width, lr.channels),
            got: format!("{}x{}x{}", ds.height, ds.width, ds.channels),
        });
    }
    let rounded = round_colors(&ds);
    let (h, w, c) = (lr.height, lr.width, lr.channels);
    let mut data = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let diff = (rounded.get(y, x, ch) - lr.get(y, x, ch)).abs();
                acc += (diff / COLOR_STEP - epsilon).max(0.0);
            }
            data[y * w + x] = acc / c as f64;
        }
    }
    Ok(ConstraintMap {
        data,
        height: h,
        width: w,
        epsilon,
        r: COLOR_STEP,
    })
}

/// Load an 8-bit PNG/JPEG as a 3-channel image, mapping [0, 255] linearly to
/// [-1, 1] via v' = 2 v / 255 - 1.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; h * w * 3];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = 2.0 * px.0[ch] as f64 / 255.0 - 1.0;
        }
    }
    ImageTensor::new(h, w, 3, data)
}

/// Write as an 8-bit PNG with the inverse mapping. Values already on the
/// color grid round-trip exactly.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (image.height, image.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = if image.channels == 3 {
                    image.get(y, x, c)
                } else {
                    image.get(y, x, 0)
                };
                ((v + 1.0) * 255.0 / 2.0).round().clamp(0.0, 255.0) as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c_slope: f64) -> ImageTensor {
        let mut img = ImageTensor::constant(h, w, 1, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, 0, c_slope * x as f64);
            }
        }
        img
    }

    #[test]
    fn gradient_of_constant_image_is_zero() {
        let img = ImageTensor::constant(5, 7, 3, 0.5);
        let g = compute_gradient(&img).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_horizontal_ramp() {
        let c = 0.05;
        let g = compute_gradient(&ramp(4, 6, c)).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let expect = if x == 0 || x == 5 { c } else { 2.0 * c };
                assert!(
                    (g.get(y, x) - expect).abs() < 1e-15,
                    "({y},{x}): {} vs {expect}",
                    g.get(y, x)
                );
            }
        }
    }

    #[test]
    fn gradient_of_single_center_pixel() {
        let mut img = ImageTensor::constant(5, 5, 1, 0.0);
        img.set(2, 2, 0, 1.0);
        let g = compute_gradient(&img).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = if (y == 2 && (x == 1 || x == 3)) || (x == 2 && (y == 1 || y == 3)) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(g.get(y, x), expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn gradient_rejects_tiny_images() {
        let img = ImageTensor::constant(2, 5, 1, 0.0);
        assert!(matches!(
            compute_gradient(&img),
            Err(Error::DimensionTooSmall { min: 3, .. })
        ));
    }

    #[test]
    fn gradient_invariant_to_constant_offset() {
        let base = ramp(5, 5, 0.04);
        let shifted =
            ImageTensor::from_unclamped(5, 5, 1, base.data().iter().map(|v| v + 0.3).collect());
        let ga = compute_gradient(&base).unwrap();
        let gb = compute_gradient(&shifted).unwrap();
        for (a, b) in ga.data().iter().zip(gb.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_commutes_with_horizontal_mirror() {
        let mut img = ImageTensor::constant(6, 6, 3, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64 / 101.0) * 1.6 - 0.8;
        }
        let g_of_flip = compute_gradient(&img.flip_horizontal()).unwrap();
        let flip_of_g = compute_gradient(&img).unwrap().flip_horizontal();
        for (a, b) in g_of_flip.data().iter().zip(flip_of_g.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn downscale_symmetric_block_averages_to_zero() {
        let img = ImageTensor::new(2, 2, 1, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let out = downscale(&img, 2).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn downscale_checkerboard_is_zero() {
        let mut img = ImageTensor::constant(4, 4, 1, 0.0);
        for y in 0..4 {
            for x in 0..4 {
                img.set(y, x, 0, if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let out = downscale(&img, 2).unwrap();
        assert_eq!(out.height(), 2);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downscale_composes_multiplicatively() {
        let mut img = ImageTensor::constant(8, 8, 3, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 13 % 64) as f64 / 64.0) - 0.5;
        }
        let two_then_two = downscale(&downscale(&img, 2).unwrap(), 2).unwrap();
        let four = downscale(&img, 4).unwrap();
        for (a, b) in two_then_two.data().iter().zip(four.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn downscale_rejects_nondivisible() {
        let img = ImageTensor::constant(6, 6, 1, 0.1);
        assert!(matches!(
            downscale(&img, 4),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn round_colors_is_idempotent_and_fixes_grid_points() {
        let img = ImageTensor::new(1, 4, 1, vec![-1.0, -1.0 + 2.0 / 255.0, 0.0037, 1.0]).unwrap();
        let once = round_colors(&img);
        let twice = round_colors(&once);
        assert_eq!(once, twice);
        assert_eq!(once.get(0, 0, 0), -1.0);
        assert!((once.get(0, 1, 0) - (-1.0 + 2.0 / 255.0)).abs() < 1e-15);
        // Nearest level to 0.0037 on {-1 + 2k/255} is 1/255.
        assert!((once.get(0, 2, 0) - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(once.get(0, 3, 0), 1.0);
    }

    #[test]
    fn constraint_map_zero_when_downscale_matches() {
        let lr = ImageTensor::constant(2, 2, 3, 1.0 / 255.0);
        let fake = ImageTensor::constant(4, 4, 3, 1.0 / 255.0);
        let f = constraint_map(&fake, &lr, 2, 0.1).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constraint_map_single_level_difference() {
        // All channels of one LR pixel off by exactly one quantization level.
        let mut lr = ImageTensor::constant(2, 2, 3, 1.0 / 255.0);
        for ch in 0..3 {
            lr.set(0, 1, ch, 3.0 / 255.0);
        }
        let fake = ImageTensor::constant(4, 4, 3, 1.0 / 255.0);
        let f = constraint_map(&fake, &lr, 2, 0.1).unwrap();
        assert!((f.get(0, 1) - 0.9).abs() < 1e-12, "{}", f.get(0, 1));
        assert_eq!(f.get(0, 0), 0.0);
    }

    #[test]
    fn constraint_map_ten_level_difference() {
        let lr = ImageTensor::constant(2, 2, 1, -1.0);
        let fake = ImageTensor::constant(4, 4, 1, -1.0 + 10.0 * 2.0 / 255.0);
        let f = constraint_map(&fake, &lr, 2, 0.1).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert!((f.get(y, x) - 9.9).abs() < 1e-9, "{}", f.get(y, x));
            }
        }
    }

    #[test]
    fn constraint_map_zero_iff_quantized_differences_within_slack() {
        // Deterministic pseudo-random probes across the zero/nonzero boundary.
        let mut state = 0x12345u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for trial in 0..200 {
            let lr = ImageTensor::from_unclamped(2, 2, 1, (0..4).map(|_| next()).collect());
            let fake = ImageTensor::from_unclamped(4, 4, 1, (0..16).map(|_| next()).collect());
            let eps = 0.3 * (trial % 4) as f64;
            let f = constraint_map(&fake, &lr, 2, eps).unwrap();
            let ds = round_colors(&downscale(&fake, 2).unwrap());
            let all_within =
                (0..4).all(|i| (ds.data()[i] - lr.data()[i]).abs() <= eps * COLOR_STEP);
            let map_zero = f.data().iter().all(|&v| v == 0.0);
            assert_eq!(map_zero, all_within, "trial {trial}");
        }
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut img = ImageTensor::constant(8, 8, 3, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 31 % 97) as f64 / 97.0) * 1.8 - 0.9;
        }
        assert_eq!(
            compute_gradient(&img).unwrap(),
            compute_gradient(&img).unwrap()
        );
        assert_eq!(downscale(&img, 2).unwrap(), downscale(&img, 2).unwrap());
        assert_eq!(round_colors(&img), round_colors(&img));
        let lr = downscale(&img, 4).unwrap();
        assert_eq!(
            constraint_map(&img, &lr, 4, 0.1).unwrap(),
            constraint_map(&img, &lr, 4, 0.1).unwrap()
        );
    }

    #[test]
    fn constraint_map_shape_mismatch() {
        let lr = ImageTensor::constant(3, 3, 1, 0.0);
        let fake = ImageTensor::constant(4, 4, 1, 0.0);
        assert!(constraint_map(&fake, &lr, 2, 0.1).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_on_grid_values() {
        let dir = std::env::temp_dir().join("hallucsr_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        let mut img = ImageTensor::constant(6, 5, 3, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = -1.0 + 2.0 * ((i * 7) % 256) as f64 / 255.0;
        }
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        std::fs::remove_file(&path).ok();
    }
}
