//! Checkpoint archives.
//!
//! A checkpoint is a single binary file: an 8-byte magic, a JSON metadata
//! block (config, step counters, RNG stream states), then a sequence of named
//! f32 arrays in little-endian byte order. Loads rebuild the networks from
//! the stored config and overwrite every parameter and optimizer moment by
//! name, so a save/load cycle is bit-exact and a resumed run continues the
//! exact RNG streams of the original.
//!
//! Pretrained feature-extractor weights use the same container with a
//! different magic and a reduced metadata block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{build_feature_extractor, FeatureExtractor, GeneratorConfig, ModelBundle};
use crate::rng::Rng;
use crate::tensor::Tensor;

const BUNDLE_MAGIC: &[u8; 8] = b"HSRCKPT1";
const EXTRACTOR_MAGIC: &[u8; 8] = b"HSRFEXT1";

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    config: GeneratorConfig,
    extractor_widths: Vec<usize>,
    extractor_seed: u64,
    step: u64,
    opt_g_t: u64,
    opt_di_t: u64,
    opt_dg_t: u64,
    z_rng: [u64; 6],
    data_rng: [u64; 6],
}

#[derive(Serialize, Deserialize)]
struct ExtractorMeta {
    widths: Vec<usize>,
    seed: u64,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn write_arrays<W: Write>(w: &mut W, arrays: &[(String, &Tensor)]) -> Result<()> {
    write_u64(w, arrays.len() as u64)?;
    for (name, t) in arrays {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_arrays<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let count = read_u64(r)?;
    if count > 1 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible array count {count}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint("implausible name length".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
        let ndim = read_u64(r)? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint("implausible rank".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(Error::Checkpoint("implausible array size".into()));
        }
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint("truncated array data".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

fn bundle_arrays(bundle: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut arrays = Vec::new();
    for (set, opt) in [
        (&bundle.generator.params, &bundle.opt_g),
        (&bundle.d_image.params, &bundle.opt_di),
        (&bundle.d_gradient.params, &bundle.opt_dg),
    ] {
        for (name, t) in set.names().iter().zip(set.tensors()) {
            arrays.push((format!("param/{name}"), t));
        }
        for (name, t) in set.names().iter().zip(&opt.m) {
            arrays.push((format!("adam.m/{name}"), t));
        }
        for (name, t) in set.names().iter().zip(&opt.v) {
            arrays.push((format!("adam.v/{name}"), t));
        }
    }
    let fx = &bundle.extractor.params;
    for (name, t) in fx.names().iter().zip(fx.tensors()) {
        arrays.push((format!("param/{name}"), t));
    }
    arrays
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let meta = BundleMeta {
        config: bundle.config.clone(),
        extractor_widths: bundle.extractor.widths().to_vec(),
        extractor_seed: bundle.extractor.seed(),
        step: bundle.step,
        opt_g_t: bundle.opt_g.t,
        opt_di_t: bundle.opt_di.t,
        opt_dg_t: bundle.opt_dg.t,
        z_rng: bundle.z_rng.state_words(),
        data_rng: bundle.data_rng.state_words(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BUNDLE_MAGIC)?;
    write_u64(&mut w, meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    write_arrays(&mut w, &bundle_arrays(bundle))?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Checkpoint(
            "not a model checkpoint (bad magic)".into(),
        ));
    }
    let meta_len = read_u64(&mut r)? as usize;
    if meta_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible metadata length".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
    let meta: BundleMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;

    let mut bundle = ModelBundle::new(&meta.config, meta.extractor_seed, &meta.extractor_widths)?;
    let arrays = read_arrays(&mut r)?;
    let mut seen = 0usize;
    for (name, t) in arrays {
        let (kind, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("malformed array name {name}")))?;
        let full = pname.to_string();
        let target = match full.split_once('/').map(|(p, _)| p) {
            Some("g") => 0usize,
            Some("di") => 1,
            Some("dg") => 2,
            Some("fx") => 3,
            _ => return Err(Error::Checkpoint(format!("unknown network in {name}"))),
        };
        match (kind, target) {
            ("param", 0) => bundle.generator.params.set_by_name(&full, t)?,
            ("param", 1) => bundle.d_image.params.set_by_name(&full, t)?,
            ("param", 2) => bundle.d_gradient.params.set_by_name(&full, t)?,
            ("param", 3) => bundle.extractor.params.set_by_name(&full, t)?,
            ("adam.m", i) | ("adam.v", i) if i < 3 => {
                let (set, opt) = match i {
                    0 => (&bundle.generator.params, &mut bundle.opt_g),
                    1 => (&bundle.d_image.params, &mut bundle.opt_di),
                    _ => (&bundle.d_gradient.params, &mut bundle.opt_dg),
                };
                let idx = set
                    .names()
                    .iter()
                    .position(|n| *n == full)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown moment {name}")))?;
                if kind == "adam.m" {
                    opt.m[idx] = t;
                } else {
                    opt.v[idx] = t;
                }
            }
            _ => return Err(Error::Checkpoint(format!("unexpected array {name}"))),
        }
        seen += 1;
    }
    let expected = bundle.generator.params.len() * 3
        + bundle.d_image.params.len() * 3
        + bundle.d_gradient.params.len() * 3
        + bundle.extractor.params.len();
    if seen != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} arrays, found {seen}"
        )));
    }
    bundle.step = meta.step;
    bundle.opt_g.t = meta.opt_g_t;
    bundle.opt_di.t = meta.opt_di_t;
    bundle.opt_dg.t = meta.opt_dg_t;
    bundle.z_rng = Rng::from_state_words(meta.z_rng);
    bundle.data_rng = Rng::from_state_words(meta.data_rng);
    Ok(bundle)
}

pub fn save_extractor(fx: &FeatureExtractor, path: &Path) -> Result<()> {
    let meta = ExtractorMeta {
        widths: fx.widths().to_vec(),
        seed: fx.seed(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EXTRACTOR_MAGIC)?;
    write_u64(&mut w, meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    let arrays: Vec<(String, &Tensor)> = fx
        .params()
        .names()
        .iter()
        .cloned()
        .zip(fx.params().tensors())
        .collect();
    write_arrays(&mut w, &arrays)?;
    w.flush()?;
    Ok(())
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != EXTRACTOR_MAGIC {
        return Err(Error::Checkpoint(
            "not an extractor weight file (bad magic)".into(),
        ));
    }
    let meta_len = read_u64(&mut r)? as usize;
    if meta_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible metadata length".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
    let meta: ExtractorMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
    let mut fx = build_feature_extractor(meta.seed, &meta.widths)?;
    for (name, t) in read_arrays(&mut r)? {
        fx.params.set_by_name(&name, t)?;
    }
    Ok(fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::GeneratorConfig;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("hallucsr_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            lr_size: 4,
            scale_factor: 4,
            base_channels: 6,
            num_residual_blocks: 2,
            noise_dim: 4,
            leak: 0.2,
        }
    }

    #[test]
    fn bundle_roundtrip_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.join("bundle.ckpt");
        let mut bundle = ModelBundle::new(&small_config(), 77, &[4, 6]).unwrap();
        bundle.step = 123;
        bundle.opt_g.t = 9;
        // Touch some state so the roundtrip is not trivially zeros.
        bundle.opt_g.m[0] = Tensor::full(bundle.opt_g.m[0].shape().to_vec(), 0.25);
        bundle.z_rng.next_u64();
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.opt_g.t, 9);
        assert_eq!(loaded.z_rng, bundle.z_rng);
        assert_eq!(loaded.data_rng, bundle.data_rng);
        for (a, b) in bundle
            .generator
            .params
            .tensors()
            .iter()
            .chain(bundle.d_image.params.tensors())
            .chain(bundle.d_gradient.params.tensors())
            .chain(bundle.extractor.params.tensors())
            .zip(
                loaded
                    .generator
                    .params
                    .tensors()
                    .iter()
                    .chain(loaded.d_image.params.tensors())
                    .chain(loaded.d_gradient.params.tensors())
                    .chain(loaded.extractor.params.tensors()),
            )
        {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(bundle.opt_g.m[0].data(), loaded.opt_g.m[0].data());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tmpdir();
        let path = dir.join("corrupt.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn extractor_roundtrip() {
        let dir = tmpdir();
        let path = dir.join("fx.bin");
        let fx = build_feature_extractor(5, &[4, 8]).unwrap();
        save_extractor(&fx, &path).unwrap();
        let loaded = load_extractor(&path).unwrap();
        assert_eq!(fx.widths(), loaded.widths());
        for (a, b) in fx.params().tensors().iter().zip(loaded.params().tensors()) {
            assert_eq!(a.data(), b.data());
        }
        std::fs::remove_file(&path).ok();
    }
}
