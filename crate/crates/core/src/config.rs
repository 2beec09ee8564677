//! Training configuration as `key = value` text.
//!
//! Blank lines and `#` comments are ignored, every key is optional and
//! defaults as in [`TrainConfig::default`], unknown or repeated keys are
//! errors. [`TrainConfig::to_text`] writes every key in a fixed order, so
//! parsing its output gives back the same configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::sampler::FrameworkConfig;
use crate::schedule::InitMode;
use crate::tensor::CacheMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub block: usize,
    pub ratio: f64,
    pub patch: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Iterations between learning-rate halvings.
    pub lr_halving: usize,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// Train through the whole sampler; otherwise regress the noise.
    pub e2e: bool,
    pub invertible: bool,
    pub injectors: bool,
    pub init: InitMode,
    pub precision: Precision,
    pub channels: [usize; 2],
    pub blocks_per_group: usize,
    pub expansion: usize,
    pub framework_mode: CacheMode,
    pub estimator_mode: CacheMode,
    pub eval_every: usize,
    pub eval_images: usize,
    pub reuse: bool,
    pub pruning: bool,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2,
            block: 8,
            ratio: 0.25,
            patch: 64,
            batch: 4,
            iterations: 2000,
            lr: 1e-4,
            lr_halving: 10_000,
            clip: 1.0,
            seed: 0,
            e2e: true,
            invertible: true,
            injectors: true,
            init: InitMode::BackProjection,
            precision: Precision::F32,
            channels: [16, 32],
            blocks_per_group: 2,
            expansion: 4,
            framework_mode: CacheMode::Recompute,
            estimator_mode: CacheMode::Cached,
            eval_every: 100,
            eval_images: 8,
            reuse: false,
            pruning: false,
            data_dir: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn mode(key: &str, v: &str) -> Result<CacheMode> {
    match v {
        "cached" => Ok(CacheMode::Cached),
        "recompute" => Ok(CacheMode::Recompute),
        _ => Err(Error::Config(format!("{key}: expected cached or recompute, got {v:?}"))),
    }
}

fn mode_name(m: CacheMode) -> &'static str {
    match m {
        CacheMode::Cached => "cached",
        CacheMode::Recompute => "recompute",
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

const KEYS: &[&str] = &[
    "steps", "block", "ratio", "patch", "batch", "iterations", "lr", "lr_halving", "clip", "seed", "e2e", "invertible",
    "injectors", "init", "precision", "channels", "blocks_per_group", "expansion", "framework_mode", "estimator_mode",
    "eval_every", "eval_images", "reuse", "pruning", "data_dir", "checkpoint", "metrics",
];

impl TrainConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "steps" => self.steps = num(k, v)?,
            "block" => self.block = num(k, v)?,
            "ratio" => self.ratio = num(k, v)?,
            "patch" => self.patch = num(k, v)?,
            "batch" => self.batch = num(k, v)?,
            "iterations" => self.iterations = num(k, v)?,
            "lr" => self.lr = num(k, v)?,
            "lr_halving" => self.lr_halving = num(k, v)?,
            "clip" => self.clip = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "e2e" => self.e2e = flag(k, v)?,
            "invertible" => self.invertible = flag(k, v)?,
            "injectors" => self.injectors = flag(k, v)?,
            "init" => {
                self.init = match v {
                    "backprojection" => InitMode::BackProjection,
                    "noise" => InitMode::Noise,
                    _ => return Err(Error::Config(format!("init: expected backprojection or noise, got {v:?}"))),
                }
            }
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            "channels" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let [a, b] = parts[..] else {
                    return Err(Error::Config(format!("channels: expected two comma-separated widths, got {v:?}")));
                };
                self.channels = [num(k, a)?, num(k, b)?];
            }
            "blocks_per_group" => self.blocks_per_group = num(k, v)?,
            "expansion" => self.expansion = num(k, v)?,
            "framework_mode" => self.framework_mode = mode(k, v)?,
            "estimator_mode" => self.estimator_mode = mode(k, v)?,
            "eval_every" => self.eval_every = num(k, v)?,
            "eval_images" => self.eval_images = num(k, v)?,
            "reuse" => self.reuse = flag(k, v)?,
            "pruning" => self.pruning = flag(k, v)?,
            "data_dir" => self.data_dir = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "metrics" => self.metrics = path(v),
            _ => unreachable!("key list and setter disagree on {k}"),
        }
        Ok(())
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let b = |x: bool| if x { "true" } else { "false" };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("steps", self.steps.to_string());
        kv("block", self.block.to_string());
        kv("ratio", format!("{:?}", self.ratio));
        kv("patch", self.patch.to_string());
        kv("batch", self.batch.to_string());
        kv("iterations", self.iterations.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_halving", self.lr_halving.to_string());
        kv("clip", format!("{:?}", self.clip));
        kv("seed", self.seed.to_string());
        kv("e2e", b(self.e2e).into());
        kv("invertible", b(self.invertible).into());
        kv("injectors", b(self.injectors).into());
        kv("init", match self.init {
            InitMode::BackProjection => "backprojection".into(),
            InitMode::Noise => "noise".into(),
        });
        kv("precision", match self.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        });
        kv("channels", format!("{},{}", self.channels[0], self.channels[1]));
        kv("blocks_per_group", self.blocks_per_group.to_string());
        kv("expansion", self.expansion.to_string());
        kv("framework_mode", mode_name(self.framework_mode).into());
        kv("estimator_mode", mode_name(self.estimator_mode).into());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_images", self.eval_images.to_string());
        kv("reuse", b(self.reuse).into());
        kv("pruning", b(self.pruning).into());
        kv("data_dir", path_text(&self.data_dir));
        kv("checkpoint", path_text(&self.checkpoint));
        kv("metrics", path_text(&self.metrics));
        s
    }

    /// FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.reuse {
            return Err(Error::OutOfScope { what: "estimator reuse across steps" });
        }
        if self.pruning {
            return Err(Error::OutOfScope { what: "step pruning" });
        }
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 || self.batch == 0 || self.block == 0 || self.patch == 0 || self.lr_halving == 0 {
            return bad("steps, batch, block, patch and lr_halving must be positive".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio {} outside (0, 1]", self.ratio));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip >= 0.0 && self.clip.is_finite()) {
            return bad("lr and clip must be finite and non-negative".into());
        }
        if self.patch % self.block != 0 {
            return bad(format!("patch {} is not a multiple of block {}", self.patch, self.block));
        }
        if self.patch % 2 != 0 {
            return bad(format!("patch {} must be even", self.patch));
        }
        if self.invertible && !self.e2e {
            return bad("invertible training needs e2e = true".into());
        }
        self.framework_config().estimator.validate()
    }

    pub fn framework_config(&self) -> FrameworkConfig {
        FrameworkConfig {
            steps: self.steps,
            invertible: self.invertible,
            mode: self.framework_mode,
            init: self.init,
            estimator: EstimatorConfig {
                image_channels: 1,
                channels: self.channels,
                blocks_per_group: self.blocks_per_group,
                expansion: self.expansion,
                injectors: self.injectors,
                invertible: self.invertible,
                mode: self.estimator_mode,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_text();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(TrainConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn keys_comments_and_paths() {
        let cfg = TrainConfig::parse(
            "# small run\nsteps = 3\nratio=0.1  # ten percent\nchannels = 8, 16\nframework_mode = cached\ncheckpoint = out/m.ckpt\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.ratio, 0.1);
        assert_eq!(cfg.channels, [8, 16]);
        assert_eq!(cfg.framework_mode, CacheMode::Cached);
        assert_eq!(cfg.checkpoint, Some(PathBuf::from("out/m.ckpt")));
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour = red",
            "steps = 2\nsteps = 3",
            "steps",
            "steps = two",
            "e2e = yes",
            "ratio = 1.5",
            "patch = 60\nblock = 32",
            "channels = 8,6",
            "e2e = false",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(TrainConfig::parse("reuse = true"), Err(Error::OutOfScope { .. })));
        assert!(matches!(TrainConfig::parse("pruning = true"), Err(Error::OutOfScope { .. })));
        assert!(TrainConfig::parse("e2e = false\ninvertible = false").is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), TrainConfig::parse(&a.to_text()).unwrap().hash());
    }
}
