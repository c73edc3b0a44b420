//! Quantitative metrics and sample-grid emission.
//!
//! PSNR and SSIM follow their standard definitions on the [-1, 1] data range
//! (L = 2). The perceptual distance is the feature-space distance under the
//! configured extractor; it is deliberately labeled "perceptual", not LPIPS.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{downscale, ImageTensor};
use crate::losses::perceptual_loss;
use crate::nets::{generator_forward, Extractor, ModelBundle, NoiseVector};
use crate::rng::Rng;

/// PSNR reported for a zero-MSE comparison; larger finite values are capped
/// here too so reports stay finite and comparable.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Data range of [-1, 1] images.
const DATA_RANGE: f64 = 2.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub consistency_violation_rate: f64,
    pub diversity: f64,
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, context: &'static str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{}x{}x{}", a.height(), a.width(), a.channels()),
            got: format!("{}x{}x{}", b.height(), b.width(), b.channels()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Horizontal then vertical pass of the separable window over one plane,
/// keeping only positions where the full window fits.
fn windowed_means(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), stability constants
/// scaled to the data range, channel-averaged, valid-window positions only.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DimensionTooSmall {
            what: "ssim image",
            got: h.min(w),
            min: SSIM_WINDOW,
        });
    }
    let c1 = (0.01 * DATA_RANGE) * (0.01 * DATA_RANGE);
    let c2 = (0.03 * DATA_RANGE) * (0.03 * DATA_RANGE);
    let k = gaussian_kernel();
    let plane_len = h * w;
    let mut total = 0.0f64;
    for ch in 0..a.channels() {
        let xa = &a.data()[ch * plane_len..(ch + 1) * plane_len];
        let xb = &b.data()[ch * plane_len..(ch + 1) * plane_len];
        let xx: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| x * y).collect();
        let mu_x = windowed_means(xa, h, w, &k);
        let mu_y = windowed_means(xb, h, w, &k);
        let e_xx = windowed_means(&xx, h, w, &k);
        let e_yy = windowed_means(&yy, h, w, &k);
        let e_xy = windowed_means(&xy, h, w, &k);
        let mut acc = 0.0f64;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = e_xx[i] - mx * mx;
            let sy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Feature-space distance under the configured extractor. Equals the
/// perceptual loss; zero iff the features coincide.
pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    extractor: &dyn Extractor,
) -> Result<f64> {
    perceptual_loss(a, b, extractor)
}

/// Fraction of (sample, pixel, channel) triples where the downscaled
/// hallucination strays at least `epsilon` (raw [-1, 1] units) from the LR
/// input.
pub fn consistency_violation_rate(
    bundle: &ModelBundle,
    lr: &ImageTensor,
    z_samples: &[NoiseVector],
    epsilon: f64,
) -> Result<f64> {
    if z_samples.is_empty() {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    let factor = bundle.config.scale_factor;
    let mut violations = 0usize;
    let mut total = 0usize;
    for z in z_samples {
        let out = generator_forward(bundle, lr, z)?;
        let (img, _) = out.final_pair();
        let ds = downscale(img, factor)?;
        for (d, l) in ds.data().iter().zip(lr.data()) {
            total += 1;
            if (d - l).abs() >= epsilon {
                violations += 1;
            }
        }
    }
    Ok(violations as f64 / total as f64)
}

/// Mean over unordered pairs of the mean absolute difference between
/// hallucinated gradient maps; zero exactly when the model ignores z.
pub fn diversity_score(
    bundle: &ModelBundle,
    lr: &ImageTensor,
    z_samples: &[NoiseVector],
) -> Result<f64> {
    if z_samples.len() < 2 {
        return Err(Error::TooFewSamples {
            got: z_samples.len(),
            min: 2,
        });
    }
    let maps: Vec<_> = z_samples
        .iter()
        .map(|z| generator_forward(bundle, lr, z).map(|o| o.gradients.last().unwrap().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_map_diversity(&maps))
}

/// Mean over unordered pairs of mean absolute map difference.
pub fn pairwise_map_diversity(maps: &[crate::imagecore::GradientMap]) -> f64 {
    let n = maps.len();
    let mut acc = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = maps[i]
                .data()
                .iter()
                .zip(maps[j].data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / maps[i].data().len() as f64;
            acc += d;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}

/// Nearest-neighbor upscale (for the LR column of sample grids).
pub fn nearest_upscale(img: &ImageTensor, factor: usize) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = ImageTensor::constant(h * factor, w * factor, c, 0.0);
    for ch in 0..c {
        for y in 0..h * factor {
            for x in 0..w * factor {
                out.set(y, x, ch, img.get(y / factor, x / factor, ch));
            }
        }
    }
    out
}

/// Write a sample grid: one row per sample, columns
/// [LR upscaled | ground truth | SR (z=0) | z_count hallucinations].
pub fn emit_grid(
    bundle: &ModelBundle,
    samples: &[crate::data::PairedSample],
    z_count: usize,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("emit_grid samples".into()));
    }
    let hr = bundle.config.hr_size();
    let factor = bundle.config.scale_factor;
    let m = bundle.config.noise_dim;
    let cols = 3 + z_count;
    let mut grid = ImageTensor::constant(samples.len() * hr, cols * hr, 3, 0.0);
    let blit = |tile: &ImageTensor, row: usize, col: usize, grid: &mut ImageTensor| {
        for ch in 0..3 {
            for y in 0..hr {
                for x in 0..hr {
                    let v = if tile.channels() == 3 {
                        tile.get(y, x, ch)
                    } else {
                        tile.get(y, x, 0)
                    };
                    grid.set(row * hr + y, col * hr + x, ch, v);
                }
            }
        }
    };
    let mut z_rng = Rng::from_seed(seed).fork("grid-z");
    for (row, s) in samples.iter().enumerate() {
        blit(&nearest_upscale(&s.lr, factor), row, 0, &mut grid);
        blit(&s.hr, row, 1, &mut grid);
        let sr = generator_forward(bundle, &s.lr, &NoiseVector::zeros(m))?;
        blit(sr.final_pair().0, row, 2, &mut grid);
        for j in 0..z_count {
            let z = NoiseVector::sample(&mut z_rng, m);
            let hal = generator_forward(bundle, &s.lr, &z)?;
            blit(hal.final_pair().0, row, 3 + j, &mut grid);
        }
    }
    crate::imagecore::save_png(&grid, out_path)
}

/// Evaluation settings for a test split.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Noise samples per image for the diversity / consistency diagnostics.
    pub z_count: usize,
    pub seed: u64,
    /// Raw-unit consistency threshold (the constraint-map epsilon is a
    /// separate, quantization-step quantity).
    pub epsilon: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            z_count: 8,
            seed: 0,
            epsilon: 0.1,
        }
    }
}

/// Aggregate metrics over a test split: PSNR/SSIM/perceptual against ground
/// truth at z = 0, violation rate and diversity over z != 0 samples.
pub fn evaluate(
    bundle: &ModelBundle,
    test: &[crate::data::PairedSample],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let m = bundle.config.noise_dim;
    let mut z_rng = Rng::from_seed(opts.seed).fork("eval-z");
    let (mut p_acc, mut s_acc, mut f_acc, mut v_acc, mut d_acc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in test {
        let sr = generator_forward(bundle, &s.lr, &NoiseVector::zeros(m))?;
        let (img, _) = sr.final_pair();
        p_acc += psnr(img, &s.hr)?;
        s_acc += ssim(img, &s.hr)?;
        f_acc += perceptual_distance(img, &s.hr, &bundle.extractor)?;
        let zs: Vec<NoiseVector> = (0..opts.z_count.max(2))
            .map(|_| NoiseVector::sample(&mut z_rng, m))
            .collect();
        v_acc += consistency_violation_rate(bundle, &s.lr, &zs, opts.epsilon)?;
        d_acc += diversity_score(bundle, &s.lr, &zs)?;
    }
    let n = test.len() as f64;
    Ok(MetricsReport {
        psnr: p_acc / n,
        ssim: s_acc / n,
        perceptual: f_acc / n,
        consistency_violation_rate: v_acc / n,
        diversity: d_acc / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorConfig, IdentityExtractor};

    fn patterned(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> ImageTensor {
        let mut img = ImageTensor::constant(h, w, c, 0.0);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, ch, f(y, x, ch).clamp(-1.0, 1.0));
                }
            }
        }
        img
    }

    #[test]
    fn psnr_examples() {
        let a = patterned(8, 8, 3, |y, x, c| {
            ((y * 3 + x + c) % 13) as f64 / 13.0 - 0.5
        });
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        let neg = ImageTensor::constant(4, 4, 1, -1.0);
        let pos = ImageTensor::constant(4, 4, 1, 1.0);
        assert!((psnr(&neg, &pos).unwrap() - 0.0).abs() < 1e-12);

        let base = ImageTensor::constant(4, 4, 1, 0.1);
        let off = ImageTensor::constant(4, 4, 1, 0.3);
        assert!((psnr(&base, &off).unwrap() - 20.0).abs() < 1e-9);

        assert_eq!(psnr(&base, &off).unwrap(), psnr(&off, &base).unwrap());
        let c = ImageTensor::constant(5, 4, 1, 0.0);
        assert!(psnr(&base, &c).is_err());
    }

    #[test]
    fn psnr_flip_invariance_and_noise_monotonicity() {
        let a = patterned(12, 12, 3, |y, x, c| {
            ((x * 7 + y * 3 + c) % 19) as f64 / 19.0 - 0.5
        });
        let b = patterned(12, 12, 3, |y, x, c| {
            ((x * 5 + y * 11 + c) % 17) as f64 / 17.0 - 0.5
        });
        let pf = psnr(&a.flip_horizontal(), &b.flip_horizontal()).unwrap();
        assert!((psnr(&a, &b).unwrap() - pf).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for &amp in &[0.05, 0.15, 0.4] {
            let noisy = patterned(12, 12, 3, |y, x, c| {
                a.get(y, x, c) + amp * if (x + y) % 2 == 0 { 1.0 } else { -1.0 }
            });
            let p = psnr(&a, &noisy).unwrap();
            assert!(p < prev, "psnr did not decrease at amplitude {amp}");
            prev = p;
        }
    }

    /// Direct double-loop SSIM, the oracle for the separable implementation.
    fn ssim_naive(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let k = gaussian_kernel();
        let (h, w) = (a.height(), a.width());
        let c1 = (0.01 * DATA_RANGE) * (0.01 * DATA_RANGE);
        let c2 = (0.03 * DATA_RANGE) * (0.03 * DATA_RANGE);
        let mut total = 0.0;
        for ch in 0..a.channels() {
            let mut acc = 0.0;
            let mut count = 0usize;
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let (mut mx, mut my) = (0.0f64, 0.0f64);
                    let (mut exx, mut eyy, mut exy) = (0.0f64, 0.0f64, 0.0f64);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k[dy] * k[dx];
                            let xv = a.get(oy + dy, ox + dx, ch);
                            let yv = b.get(oy + dy, ox + dx, ch);
                            mx += wgt * xv;
                            my += wgt * yv;
                            exx += wgt * xv * xv;
                            eyy += wgt * yv * yv;
                            exy += wgt * xv * yv;
                        }
                    }
                    let sx = exx - mx * mx;
                    let sy = eyy - my * my;
                    let sxy = exy - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                        / ((mx * mx + my * my + c1) * (sx + sy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / a.channels() as f64
    }

    #[test]
    fn ssim_examples_and_oracle_agreement() {
        let a = patterned(16, 16, 3, |y, x, c| {
            ((x * 3 + y * 5 + 2 * c) % 23) as f64 / 23.0 - 0.5
        });
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        // Zero-mean anticorrelated pattern.
        let z = patterned(
            16,
            16,
            1,
            |y, x, _| if (x + y) % 2 == 0 { 0.5 } else { -0.5 },
        );
        let zn = patterned(16, 16, 1, |y, x, _| -z.get(y, x, 0));
        assert!(ssim(&z, &zn).unwrap() < 0.0);

        let mut rng = crate::rng::Rng::from_seed(44);
        for _ in 0..5 {
            let x = patterned(16, 16, 3, |_, _, _| rng.uniform_in(-1.0, 1.0));
            let y = patterned(16, 16, 3, |_, _, _| rng.uniform_in(-1.0, 1.0));
            let fast = ssim(&x, &y).unwrap();
            let slow = ssim_naive(&x, &y);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
            assert!((ssim(&y, &x).unwrap() - fast).abs() < 1e-12, "symmetry");
            let ff = ssim(&x.flip_horizontal(), &y.flip_horizontal()).unwrap();
            assert!((ff - fast).abs() < 1e-9, "flip invariance");
        }

        let tiny = ImageTensor::constant(8, 8, 1, 0.0);
        assert!(matches!(
            ssim(&tiny, &tiny),
            Err(Error::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn perceptual_distance_examples() {
        let a = patterned(8, 8, 3, |y, x, c| ((x + y + c) % 9) as f64 / 9.0 - 0.4);
        let b = patterned(8, 8, 3, |y, x, c| ((2 * x + y + c) % 7) as f64 / 7.0 - 0.3);
        assert_eq!(
            perceptual_distance(&a, &a, &IdentityExtractor).unwrap(),
            0.0
        );
        let ab = perceptual_distance(&a, &b, &IdentityExtractor).unwrap();
        let ba = perceptual_distance(&b, &a, &IdentityExtractor).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // Linear (identity) extractor: distance from lerp(a, b, t) to b is
        // nonincreasing in t.
        let mut prev = f64::INFINITY;
        for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let lerp = patterned(8, 8, 3, |y, x, c| {
                a.get(y, x, c) * (1.0 - t) + b.get(y, x, c) * t
            });
            let d = perceptual_distance(&lerp, &b, &IdentityExtractor).unwrap();
            assert!(d <= prev + 1e-12, "not monotone at t={t}");
            prev = d;
        }
    }

    fn zeroed_bundle() -> ModelBundle {
        let cfg = GeneratorConfig {
            lr_size: 4,
            scale_factor: 4,
            base_channels: 6,
            num_residual_blocks: 1,
            noise_dim: 4,
            leak: 0.2,
        };
        let mut bundle = ModelBundle::new(&cfg, 1, &[4]).unwrap();
        for t in bundle.generator.params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        bundle
    }

    fn smooth_lr() -> ImageTensor {
        patterned(4, 4, 3, |y, x, c| {
            0.1 * x as f64 + 0.05 * y as f64 - 0.2 + 0.1 * c as f64
        })
    }

    #[test]
    fn consistency_rate_of_identity_like_model_is_zero() {
        // With all generator parameters zeroed the output is exactly the
        // upsampled anchor, i.e. the LR input itself.
        let bundle = zeroed_bundle();
        let lr = smooth_lr();
        let mut rng = crate::rng::Rng::from_seed(2);
        let zs: Vec<NoiseVector> = (0..4).map(|_| NoiseVector::sample(&mut rng, 4)).collect();
        let rate = consistency_violation_rate(&bundle, &lr, &zs, 0.1).unwrap();
        assert_eq!(rate, 0.0);

        // Ordering invariance.
        let mut rev = zs.clone();
        rev.reverse();
        let r2 = consistency_violation_rate(&bundle, &lr, &rev, 0.1).unwrap();
        assert_eq!(rate, r2);

        // Full-range epsilon can never be violated.
        assert_eq!(
            consistency_violation_rate(&bundle, &lr, &zs, 2.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn consistency_rate_of_saturated_model_is_one() {
        let mut bundle = zeroed_bundle();
        // Huge image-projection biases drive every output pixel to +1.
        let names: Vec<String> = bundle.generator.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.contains("img_proj") && name.ends_with(".b") {
                for v in bundle.generator.params.tensors_mut()[i].data_mut() {
                    *v = 50.0;
                }
            }
        }
        let lr = ImageTensor::constant(4, 4, 3, -1.0);
        let mut rng = crate::rng::Rng::from_seed(3);
        let zs: Vec<NoiseVector> = (0..3).map(|_| NoiseVector::sample(&mut rng, 4)).collect();
        let rate = consistency_violation_rate(&bundle, &lr, &zs, 0.1).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn diversity_score_of_z_ignoring_model_is_zero() {
        let bundle = zeroed_bundle();
        let lr = smooth_lr();
        let mut rng = crate::rng::Rng::from_seed(5);
        let zs: Vec<NoiseVector> = (0..4).map(|_| NoiseVector::sample(&mut rng, 4)).collect();
        assert_eq!(diversity_score(&bundle, &lr, &zs).unwrap(), 0.0);
        assert!(matches!(
            diversity_score(&bundle, &lr, &zs[..1]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn pairwise_diversity_examples() {
        let a = crate::imagecore::GradientMap::new(4, 4, vec![0.5; 16]).unwrap();
        let b = crate::imagecore::GradientMap::new(4, 4, vec![0.8; 16]).unwrap();
        let d = pairwise_map_diversity(&[a.clone(), b.clone()]);
        assert!((d - 0.3).abs() < 1e-12);
        // Permutation invariance over three maps.
        let c = crate::imagecore::GradientMap::new(4, 4, vec![0.1; 16]).unwrap();
        let d1 = pairwise_map_diversity(&[a.clone(), b.clone(), c.clone()]);
        let d2 = pairwise_map_diversity(&[c, a, b]);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn grid_layout_and_determinism() {
        let dir = std::env::temp_dir().join(format!("hallucsr_grid_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bundle = zeroed_bundle();
        let ds = crate::data::synth_dataset(2, 16, 4, 4).unwrap();

        let p0 = dir.join("grid0.png");
        emit_grid(&bundle, &ds, 0, 7, &p0).unwrap();
        let img0 = crate::imagecore::load_image(&p0).unwrap();
        assert_eq!(img0.width(), 3 * 16);
        assert_eq!(img0.height(), 2 * 16);

        let p1 = dir.join("grid1.png");
        let p2 = dir.join("grid2.png");
        emit_grid(&bundle, &ds, 3, 7, &p1).unwrap();
        emit_grid(&bundle, &ds, 3, 7, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "same seed must give identical bytes");
        let img1 = crate::imagecore::load_image(&p1).unwrap();
        assert_eq!(img1.width(), (3 + 3) * 16);
        std::fs::remove_dir_all(&dir).ok();
    }
}
