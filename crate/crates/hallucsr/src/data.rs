//! Dataset ingestion and synthesis.
//!
//! LR images are never loaded from disk: every pair is built by area-downscaling
//! its HR image, so the downscale-consistency constraint is satisfiable by
//! construction. The synthetic generator produces ramps, disks, and stripes
//! with enough structure to make gradient maps nontrivial.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::grid_round;
use crate::imagecore::{downscale, load_image, ImageTensor};
use crate::rng::Rng;

/// An HR image with its synthesized LR counterpart and a stable id.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub id: String,
}

/// Nudge each scale-factor block so its mean lands on the 256-level color
/// grid. LR pixels of 8-bit sources sit on that grid; without this, the
/// rounded constraint map could never reach zero on float-valued sources and
/// the consistency conditioning would flag every hallucination forever. The
/// correction per pixel is at most one quantization step, spread across the
/// block and capped at the [-1, 1] bounds.
fn snap_block_means(hr: &ImageTensor, factor: usize) -> ImageTensor {
    let (h, w, c) = (hr.height(), hr.width(), hr.channels());
    let mut out = hr.clone();
    let count = (factor * factor) as f64;
    for ch in 0..c {
        for by in 0..h / factor {
            for bx in 0..w / factor {
                let mut sum = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += out.get(by * factor + dy, bx * factor + dx, ch);
                    }
                }
                let mean = sum / count;
                let mut need = (grid_round(mean) - mean) * count;
                'spread: for dy in 0..factor {
                    for dx in 0..factor {
                        let (y, x) = (by * factor + dy, bx * factor + dx);
                        let v = out.get(y, x, ch);
                        let room = if need > 0.0 { 1.0 - v } else { -1.0 - v };
                        let take = if need > 0.0 {
                            need.min(room)
                        } else {
                            need.max(room)
                        };
                        out.set(y, x, ch, v + take);
                        need -= take;
                        if need == 0.0 {
                            break 'spread;
                        }
                    }
                }
            }
        }
    }
    out
}

impl PairedSample {
    fn from_hr(hr: ImageTensor, scale_factor: usize, id: String) -> Result<Self> {
        let hr = snap_block_means(&hr, scale_factor);
        let lr = downscale(&hr, scale_factor)?;
        Ok(PairedSample { hr, lr, id })
    }
}

/// Center-crop to a square and area-resample to `side` x `side`.
pub fn crop_resize_square(img: &ImageTensor, side: usize) -> ImageTensor {
    let s = img.height().min(img.width());
    let y0 = (img.height() - s) / 2;
    let x0 = (img.width() - s) / 2;
    let c = img.channels();
    // Separable box filter: dst pixel k covers source span [k*s/side, (k+1)*s/side).
    let weights = |k: usize| -> Vec<(usize, f64)> {
        let lo = k as f64 * s as f64 / side as f64;
        let hi = (k + 1) as f64 * s as f64 / side as f64;
        let mut out = Vec::new();
        let mut p = lo.floor() as usize;
        while (p as f64) < hi && p < s {
            let cover = (hi.min((p + 1) as f64) - lo.max(p as f64)).max(0.0);
            if cover > 0.0 {
                out.push((p, cover));
            }
            p += 1;
        }
        out
    };
    let col_w: Vec<Vec<(usize, f64)>> = (0..side).map(weights).collect();
    let scale = (side as f64 / s as f64) * (side as f64 / s as f64);
    let mut data = vec![0.0f64; side * side * c];
    for ch in 0..c {
        for (oy, wy) in col_w.iter().enumerate() {
            for (ox, wx) in col_w.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, fy) in wy {
                    for &(sx, fx) in wx {
                        acc += fy * fx * img.get(y0 + sy, x0 + sx, ch);
                    }
                }
                data[(ch * side + oy) * side + ox] = acc * scale;
            }
        }
    }
    ImageTensor::from_unclamped(side, side, c, data)
}

/// Load every decodable PNG/JPEG under `root_dir` (sorted by file name),
/// center-crop, resize to `hr_size`, and synthesize the LR pair.
pub fn load_dataset(
    root_dir: &Path,
    hr_size: usize,
    scale_factor: usize,
) -> Result<Vec<PairedSample>> {
    if hr_size % scale_factor != 0 {
        return Err(Error::NotDivisible {
            size: hr_size,
            factor: scale_factor,
        });
    }
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root_dir)
        .map_err(|_| Error::EmptyDataset(root_dir.display().to_string()))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
            names.push(name);
        }
    }
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let path = root_dir.join(&name);
        match load_image(&path) {
            Ok(img) => {
                let hr = crop_resize_square(&img, hr_size);
                samples.push(PairedSample::from_hr(hr, scale_factor, name)?);
            }
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root_dir.display().to_string()));
    }
    Ok(samples)
}

fn synth_image(kind: usize, hr_size: usize, rng: &mut Rng) -> ImageTensor {
    let s = hr_size as f64;
    let mut img = ImageTensor::constant(hr_size, hr_size, 3, 0.0);
    // Colors kept off the extremes so the generator's atanh anchor stays
    // well-conditioned.
    let color = |rng: &mut Rng| {
        [
            rng.uniform_in(-0.7, 0.7),
            rng.uniform_in(-0.7, 0.7),
            rng.uniform_in(-0.7, 0.7),
        ]
    };
    match kind % 3 {
        0 => {
            // Oriented ramp between two colors, with a solid rectangle on top.
            let a = color(rng);
            let b = color(rng);
            let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..hr_size {
                for x in 0..hr_size {
                    let t = (((x as f64 * dx + y as f64 * dy) / s + 1.0) / 2.0).clamp(0.0, 1.0);
                    for c in 0..3 {
                        img.set(y, x, c, a[c] + (b[c] - a[c]) * t);
                    }
                }
            }
            let fg = color(rng);
            let x0 = rng.below(hr_size / 2);
            let y0 = rng.below(hr_size / 2);
            let wd = hr_size / 4 + rng.below(hr_size / 3);
            let ht = hr_size / 4 + rng.below(hr_size / 3);
            for y in y0..(y0 + ht).min(hr_size) {
                for x in x0..(x0 + wd).min(hr_size) {
                    for c in 0..3 {
                        img.set(y, x, c, fg[c]);
                    }
                }
            }
        }
        1 => {
            // Disks on a flat background: hard edges everywhere.
            let bg = color(rng);
            for c in 0..3 {
                for v in 0..hr_size {
                    for x in 0..hr_size {
                        img.set(v, x, c, bg[c]);
                    }
                }
            }
            for _ in 0..4 {
                let fg = color(rng);
                let cx = rng.uniform_in(0.15, 0.85) * s;
                let cy = rng.uniform_in(0.15, 0.85) * s;
                let r = rng.uniform_in(0.08, 0.28) * s;
                for y in 0..hr_size {
                    for x in 0..hr_size {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d <= r {
                            for c in 0..3 {
                                img.set(y, x, c, fg[c]);
                            }
                        }
                    }
                }
            }
        }
        _ => {
            // Stripes with a short integer period, optionally diagonal.
            let a = color(rng);
            let b = color(rng);
            let period = [4usize, 6, 8][rng.below(3)];
            let orient = rng.below(3);
            for y in 0..hr_size {
                for x in 0..hr_size {
                    let pos = match orient {
                        0 => x,
                        1 => y,
                        _ => x + y,
                    };
                    let pick = if (pos % period) < period / 2 { &a } else { &b };
                    for c in 0..3 {
                        img.set(y, x, c, pick[c]);
                    }
                }
            }
        }
    }
    // Shared mid-frequency texture field: a few random sinusoids that the
    // downscale mostly destroys, so the LR input underdetermines the target
    // and reconstruction has real headroom over plain upsampling.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_in(0.5, 1.8),
                rng.uniform_in(0.5, 1.8),
                rng.uniform_in(0.0, std::f64::consts::TAU),
                rng.uniform_in(0.04, 0.09),
            )
        })
        .collect();
    let chan_phase = [0.0, 1.3, 2.6];
    for c in 0..3 {
        for y in 0..hr_size {
            for x in 0..hr_size {
                let mut t = 0.0;
                for &(fx, fy, phase, amp) in &waves {
                    t += amp * (fx * x as f64 + fy * y as f64 + phase + chan_phase[c]).sin();
                }
                let v = (img.get(y, x, c) + t).clamp(-0.9, 0.9);
                img.set(y, x, c, v);
            }
        }
    }
    img
}

/// Procedurally generated paired samples; fully determined by `seed`.
pub fn synth_dataset(
    n: usize,
    hr_size: usize,
    scale_factor: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::EmptyDataset("synthetic (n = 0)".into()));
    }
    if hr_size % scale_factor != 0 {
        return Err(Error::NotDivisible {
            size: hr_size,
            factor: scale_factor,
        });
    }
    let root = Rng::from_seed(seed).fork("synth");
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.fork(&format!("image-{i}"));
        let hr = synth_image(i, hr_size, &mut rng);
        samples.push(PairedSample::from_hr(
            hr,
            scale_factor,
            format!("synth-{i:04}"),
        )?);
    }
    Ok(samples)
}

/// Seed-deterministic disjoint, exhaustive split.
pub fn split(
    dataset: Vec<PairedSample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::FractionOutOfRange(train_fraction));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Rng::from_seed(seed).fork("split");
    rng.shuffle(&mut order);
    let k = ((dataset.len() as f64) * train_fraction).floor() as usize;
    let train_idx: std::collections::HashSet<usize> = order[..k].iter().copied().collect();
    let mut train = Vec::with_capacity(k);
    let mut test = Vec::with_capacity(dataset.len() - k);
    for (i, s) in dataset.into_iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}
