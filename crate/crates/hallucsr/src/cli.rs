//! The `hallucsr` command-line surface: `train`, `eval`, `hallucinate`.
//!
//! All settings live in one TOML config; command-line flags override config
//! values, and the resolved config is recorded next to the outputs so a run
//! can be reproduced from its artifacts alone. Every command is deterministic
//! given (inputs, seed).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_bundle, save_bundle};
use crate::data::{crop_resize_square, load_dataset, split, synth_dataset, PairedSample};
use crate::error::{Error, Result};
use crate::eval::{emit_grid, evaluate, nearest_upscale, EvalOptions};
use crate::imagecore::{load_image, save_png, ImageTensor};
use crate::nets::{generator_forward, GeneratorConfig, ModelBundle, NoiseVector};
use crate::rng::Rng;
use crate::training::{train, TrainConfig};

/// Everything a run needs, serializable to and from TOML without loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub training: TrainConfig,
    /// Channel widths of the frozen random feature extractor stages.
    pub extractor_widths: Vec<usize>,
    /// Directory of PNG/JPEG sources; absent means synthetic data.
    pub dataset_dir: Option<PathBuf>,
    /// Synthetic dataset size when no directory is given.
    pub synth_images: usize,
    pub train_fraction: f64,
    /// Output directory; flag and `HALLUCSR_OUT` take precedence.
    pub out_dir: Option<PathBuf>,
    /// Noise samples per image for evaluation diagnostics.
    pub eval_z_count: usize,
    /// Raw-unit consistency threshold for the violation rate.
    pub eval_epsilon: f64,
    /// Rows and hallucination columns of emitted sample grids.
    pub grid_samples: usize,
    pub grid_z_count: usize,
}

impl Default for RunConfig {
    /// The desk-scale synthetic smoke configuration: 4x4 -> 32x32, eight
    /// procedural images, and a network small enough to overfit on a CPU.
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig {
                lr_size: 4,
                scale_factor: 8,
                base_channels: 10,
                num_residual_blocks: 8,
                noise_dim: 6,
                leak: 0.2,
            },
            training: TrainConfig {
                // The desk net is orders of magnitude smaller than a
                // production SR model; it wants faster Adam rates (same 4:1
                // TTUR ratio) to overfit within the smoke budget.
                lr_generator: 4e-4,
                lr_discriminator: 1.6e-3,
                ..TrainConfig::default()
            },
            extractor_widths: vec![12, 24],
            dataset_dir: None,
            synth_images: 8,
            train_fraction: 0.8,
            out_dir: None,
            eval_z_count: 8,
            eval_epsilon: 0.1,
            grid_samples: 4,
            grid_z_count: 3,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.training.validate()?;
        if self.extractor_widths.is_empty() {
            return Err(Error::Config("extractor_widths must not be empty".into()));
        }
        if self.synth_images == 0 {
            return Err(Error::Config("synth_images must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::FractionOutOfRange(self.train_fraction));
        }
        Ok(())
    }
}

/// Holds the `.lock` file in an output directory for the process lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Default, Debug)]
struct Flags {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    z_count: Option<usize>,
    steps: Option<u64>,
    data: Option<PathBuf>,
    image: Option<PathBuf>,
}

const USAGE: &str = "usage: hallucsr <train|eval|hallucinate> [options]

options:
  --config <file>       TOML run config (defaults to the desk-scale synthetic profile)
  --seed <n>            root seed override
  --out <dir>           output directory (or HALLUCSR_OUT)
  --checkpoint <file>   model checkpoint (eval / hallucinate)
  --z-count <n>         number of noise samples / hallucinations
  --steps <n>           training step override
  --data <dir>          dataset directory of PNG/JPEG images
  --image <file>        input image (hallucinate)";

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut f = Flags::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut take = || -> Result<&String> {
            it.next()
                .ok_or_else(|| Error::Config(format!("{arg} needs a value")))
        };
        match arg.as_str() {
            "--config" => f.config = Some(PathBuf::from(take()?)),
            "--seed" => {
                f.seed = Some(
                    take()?
                        .parse()
                        .map_err(|_| Error::Config("--seed wants an integer".into()))?,
                )
            }
            "--out" => f.out = Some(PathBuf::from(take()?)),
            "--checkpoint" => f.checkpoint = Some(PathBuf::from(take()?)),
            "--z-count" => {
                f.z_count = Some(
                    take()?
                        .parse()
                        .map_err(|_| Error::Config("--z-count wants an integer".into()))?,
                )
            }
            "--steps" => {
                f.steps = Some(
                    take()?
                        .parse()
                        .map_err(|_| Error::Config("--steps wants an integer".into()))?,
                )
            }
            "--data" => f.data = Some(PathBuf::from(take()?)),
            "--image" => f.image = Some(PathBuf::from(take()?)),
            other => return Err(Error::Config(format!("unknown flag {other}"))),
        }
    }
    Ok(f)
}

fn resolved_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    // Flags win over the config file.
    if let Some(seed) = flags.seed {
        cfg.training.seed = seed;
    }
    if let Some(steps) = flags.steps {
        cfg.training.total_steps = steps;
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(data) = &flags.data {
        cfg.dataset_dir = Some(data.clone());
    }
    if let Some(z) = flags.z_count {
        cfg.eval_z_count = z;
        cfg.grid_z_count = z;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os("HALLUCSR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hallucsr-out"))
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<PairedSample>> {
    let hr = cfg.generator.hr_size();
    match &cfg.dataset_dir {
        Some(dir) => load_dataset(dir, hr, cfg.generator.scale_factor),
        None => synth_dataset(
            cfg.synth_images,
            hr,
            cfg.generator.scale_factor,
            cfg.training.seed,
        ),
    }
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let cfg = resolved_config(flags)?;
    let out = resolve_out_dir(&cfg);
    let _lock = DirLock::acquire(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let dataset = load_samples(&cfg)?;
    println!(
        "training {} steps on {} images ({}x{} -> {}x{})",
        cfg.training.total_steps,
        dataset.len(),
        cfg.generator.lr_size,
        cfg.generator.lr_size,
        cfg.generator.hr_size(),
        cfg.generator.hr_size()
    );
    let (bundle, metrics) = train(
        &cfg.generator,
        &cfg.training,
        &cfg.extractor_widths,
        &dataset,
        Some(&out),
    )?;
    if let Some(last) = metrics.last() {
        println!(
            "done at step {}: recons={:.4} halluc={:.4} D_I={:.4} D_g={:.4}",
            last.step, last.loss_recons, last.loss_halluc, last.loss_di, last.loss_dg
        );
    }
    let grid_rows = cfg.grid_samples.min(dataset.len()).max(1);
    emit_grid(
        &bundle,
        &dataset[..grid_rows],
        cfg.grid_z_count,
        cfg.training.seed,
        &out.join("grid.png"),
    )?;
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let cfg = resolved_config(flags)?;
    let ckpt = flags
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let bundle = load_bundle(ckpt)?;
    let out = resolve_out_dir(&cfg);
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_samples(&cfg)?;
    let (_, test) = split(dataset, cfg.train_fraction, cfg.training.seed)?;
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split".into()));
    }
    let opts = EvalOptions {
        z_count: cfg.eval_z_count,
        seed: cfg.training.seed,
        epsilon: cfg.eval_epsilon,
    };
    let report = evaluate(&bundle, &test, &opts)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    fs::write(out.join("report.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_hallucinate(flags: &Flags) -> Result<()> {
    let cfg = resolved_config(flags)?;
    let ckpt = flags
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("hallucinate needs --checkpoint".into()))?;
    let image_path = flags
        .image
        .as_ref()
        .ok_or_else(|| Error::Config("hallucinate needs --image".into()))?;
    let bundle = load_bundle(ckpt)?;
    let out = resolve_out_dir(&cfg);
    let _lock = DirLock::acquire(&out)?;
    let z_count = flags.z_count.unwrap_or(4);
    let seed = flags.seed.unwrap_or(cfg.training.seed);

    let source = load_image(image_path)?;
    let lr = crop_resize_square(&source, bundle.config.lr_size);
    let m = bundle.config.noise_dim;
    let sr = generator_forward(&bundle, &lr, &NoiseVector::zeros(m))?;
    save_png(sr.final_pair().0, &out.join("sr.png"))?;

    let mut tiles: Vec<ImageTensor> = vec![
        nearest_upscale(&lr, bundle.config.scale_factor),
        sr.final_pair().0.clone(),
    ];
    let mut z_rng = Rng::from_seed(seed).fork("hallucinate-z");
    for i in 0..z_count {
        let z = NoiseVector::sample(&mut z_rng, m);
        let hal = generator_forward(&bundle, &lr, &z)?;
        let img = hal.final_pair().0.clone();
        save_png(&img, &out.join(format!("halluc_{i:02}.png")))?;
        tiles.push(img);
    }
    // Composite strip: [LR upscaled | SR | hallucinations].
    let hr = bundle.config.hr_size();
    let mut strip = ImageTensor::constant(hr, hr * tiles.len(), 3, 0.0);
    for (col, tile) in tiles.iter().enumerate() {
        for c in 0..3 {
            for y in 0..hr {
                for x in 0..hr {
                    strip.set(y, col * hr + x, c, tile.get(y, x, c));
                }
            }
        }
    }
    save_png(&strip, &out.join("grid.png"))?;
    println!(
        "wrote sr.png, {z_count} hallucinations and grid.png to {}",
        out.display()
    );
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some((cmd, rest)) = args.split_first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    let flags = match parse_flags(rest) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{USAGE}");
            return 2;
        }
    };
    let result = match cmd.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "hallucinate" => cmd_hallucinate(&flags),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("error: unknown command {other}");
            eprintln!("{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Re-exported for tests that drive commands in-process.
pub fn save_bundle_to(bundle: &ModelBundle, path: &Path) -> Result<()> {
    save_bundle(bundle, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.training.seed = 99;
        cfg.dataset_dir = Some(PathBuf::from("/tmp/faces"));
        cfg.training.weights.alpha = 0.5;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // And a second serialization is byte-identical.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let text = "synth_imagse = 9\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn flags_override_config() {
        let flags = parse_flags(&[
            "--seed".into(),
            "7".into(),
            "--steps".into(),
            "12".into(),
            "--z-count".into(),
            "5".into(),
        ])
        .unwrap();
        let cfg = resolved_config(&flags).unwrap();
        assert_eq!(cfg.training.seed, 7);
        assert_eq!(cfg.training.total_steps, 12);
        assert_eq!(cfg.eval_z_count, 5);
    }

    #[test]
    fn unknown_flags_error_out() {
        assert!(parse_flags(&["--bogus".into(), "1".into()]).is_err());
        assert!(parse_flags(&["--seed".into()]).is_err());
    }

    #[test]
    fn dir_lock_blocks_second_acquire() {
        let dir = std::env::temp_dir().join(format!("hallucsr_lock_{}", std::process::id()));
        let lock = DirLock::acquire(&dir).unwrap();
        assert!(DirLock::acquire(&dir).is_err());
        drop(lock);
        let again = DirLock::acquire(&dir).unwrap();
        drop(again);
        std::fs::remove_dir_all(&dir).ok();
    }
}
