//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! is optional and falls back to its default; unknown or repeated keys are
//! errors. Values are validated against the preconditions of the modules
//! that consume them when the file is loaded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use uvforge_core::deform::{DeformRanges, ElasticParams};
use uvforge_core::diffusion::{cosine_schedule, NoiseSchedule};
use uvforge_core::losses::TrainWeights;
use uvforge_core::model::{AscConfig, AscFlags, DenoiserSpec, DenoiserTrainConfig};
use uvforge_core::phantom::{Style, SubjectSpec};
use uvforge_core::spectral::BetaRule;
use uvforge_core::Shape3;

use crate::error::{Error, Result};

/// Wall-clock budget for `run-all`; loading warns when the projection exceeds it.
pub const TIME_BUDGET_SECS: f64 = 1800.0;

/// Volume extent written as `n` for a cube or `d x h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{s}` is not finite"))
        }
    }

    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Dims {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{s}` is not a shape")))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [n] => Ok(Dims([n; 3])),
            [d, h, w] => Ok(Dims([d, h, w])),
            _ => Err(format!("`{s}` is not a shape: use `n` or `d x h x w`")),
        }
    }

    fn render(&self) -> String {
        let [d, h, w] = self.0;
        format!("{d}x{h}x{w}")
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }

    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($field) => self.$field = <$ty as ConfigValue>::parse(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Every key in declaration order, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), self.$field.render()).expect("string write");)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 7,
    /// Phantom volume extent.
    shape: Dims = Dims([32; 3]),
    num_classes: usize = 5,
    n_source: usize = 12,
    n_target_train: usize = 10,
    n_target_test: usize = 10,
    /// Directory holding an existing dataset `manifest.json`; empty means the
    /// phantom set generated under the output directory.
    data_dir: Option<PathBuf> = None,

    hist_bins: usize = 32,
    beta_min: f64 = 0.1,
    beta_max: f64 = 1.0,
    alpha_min: f64 = 0.5,
    alpha_max: f64 = 1.5,
    lambda: f64 = 1.0,
    gamma: f64 = 0.99,
    frac_min: f64 = 0.1,
    frac_max: f64 = 0.4,
    seg_lr: f64 = 5.0,
    seg_epochs: usize = 60,
    source_batch: usize = 2,
    target_batch: usize = 2,
    tau: f64 = 0.7,

    diffusion_steps: usize = 250,
    schedule_offset: f64 = 0.008,
    embed_channels: usize = 4,
    denoiser_hidden: usize = 8,
    denoiser_lr: f64 = 0.03,
    denoiser_steps: usize = 3000,
    denoiser_accumulate: usize = 2,
    denoiser_ema: f64 = 0.995,
    /// Edge of the random training crop; 0 trains on whole volumes.
    denoiser_crop: usize = 12,

    rotation_deg: f64 = 10.0,
    scale_min: f64 = 0.9,
    scale_max: f64 = 1.1,
    shift: f64 = 0.05,
    elastic_window: usize = 5,
    elastic_field: usize = 8,
    elastic_alpha: f64 = 0.03,
    elastic_smooth: usize = 3,

    source_masks: bool = true,
    target_masks: bool = true,
    deform_masks: bool = true,
    /// Samples drawn per conditioning mask.
    scale_up: usize = 2,

    tol_mm: f64 = 1.0,
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(head, _)| head).trim()
}

impl RunConfig {
    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| Error::ConfigSyntax {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(syntax(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|m| syntax(format!("{key}: {m}")))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the built-in defaults for the name `default`.
    pub fn load(path: &Path) -> Result<Self> {
        if path == Path::new("default") && !path.exists() {
            return Ok(Self::default());
        }
        if !path.is_file() {
            return Err(Error::ConfigMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg = Self::parse(&text, path)?;
        let projected = cfg.projected_secs();
        if projected > TIME_BUDGET_SECS {
            log::warn!(
                "projected run-all time {:.0} s exceeds the {:.0} s budget",
                projected,
                TIME_BUDGET_SECS
            );
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::ConfigInvalid(m);
        let core = |e: uvforge_core::Error| Error::ConfigInvalid(e.to_string());
        let shape = self.shape()?;
        SubjectSpec::new(0, shape, self.num_classes, Style::DomainA).validate().map_err(core)?;
        for (name, n) in [
            ("n_source", self.n_source),
            ("n_target_train", self.n_target_train),
            ("n_target_test", self.n_target_test),
            ("hist_bins", self.hist_bins),
            ("seg_epochs", self.seg_epochs),
            ("source_batch", self.source_batch),
            ("target_batch", self.target_batch),
            ("denoiser_steps", self.denoiser_steps),
            ("denoiser_accumulate", self.denoiser_accumulate),
        ] {
            if n == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        self.beta_rule().validate().map_err(core)?;
        TrainWeights::new(self.lambda, self.gamma).map_err(core)?;
        if !(0.0 < self.frac_min && self.frac_min <= self.frac_max && self.frac_max <= 1.0) {
            return Err(invalid(format!(
                "frac_min/frac_max ({}, {}) must satisfy 0 < min <= max <= 1",
                self.frac_min, self.frac_max
            )));
        }
        for (name, lr) in [("seg_lr", self.seg_lr), ("denoiser_lr", self.denoiser_lr)] {
            if !(lr > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid(format!("tau {} must lie in (0, 1)", self.tau)));
        }
        self.schedule()?;
        self.denoiser_spec()?;
        if !(0.0..1.0).contains(&self.denoiser_ema) {
            return Err(invalid(format!("denoiser_ema {} must lie in [0, 1)", self.denoiser_ema)));
        }
        self.deform_ranges().validate().map_err(core)?;
        if self.scale_up > 0 && !self.source_masks && !self.target_masks {
            return Err(invalid("scale_up > 0 needs source_masks or target_masks".into()));
        }
        if !(self.tol_mm > 0.0) {
            return Err(invalid(format!("tol_mm {} must be positive", self.tol_mm)));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<Shape3> {
        let [d, h, w] = self.shape.0;
        Shape3::new(d, h, w).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn beta_rule(&self) -> BetaRule {
        BetaRule {
            clamp: (self.beta_min, self.beta_max),
            alpha_range: (self.alpha_min, self.alpha_max),
        }
    }

    pub fn asc_config(&self, flags: AscFlags) -> AscConfig {
        AscConfig {
            epochs: self.seg_epochs,
            lr: self.seg_lr,
            source_batch: self.source_batch,
            target_batch: self.target_batch,
            frac_range: (self.frac_min, self.frac_max),
            hist_bins: self.hist_bins,
            beta: self.beta_rule(),
            weights: TrainWeights {
                lambda: self.lambda,
                gamma: self.gamma,
            },
            flags,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.diffusion_steps, self.schedule_offset).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn denoiser_spec(&self) -> Result<DenoiserSpec> {
        DenoiserSpec::new(self.num_classes, self.embed_channels, self.denoiser_hidden)
            .map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn deform_ranges(&self) -> DeformRanges {
        DeformRanges {
            rotation_deg: self.rotation_deg,
            scale: (self.scale_min, self.scale_max),
            shift: self.shift,
            elastic: ElasticParams {
                window: self.elastic_window,
                field_size: self.elastic_field,
                alpha: self.elastic_alpha,
                smooth_iters: self.elastic_smooth,
            },
        }
    }

    pub fn denoiser_train_config(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            steps: self.denoiser_steps,
            lr: self.denoiser_lr,
            accumulate: self.denoiser_accumulate,
            ema: self.denoiser_ema,
            crop: (self.denoiser_crop > 0).then_some(self.denoiser_crop),
            deform: self.deform_ranges(),
        }
    }

    /// SHA-256 over every key except `seed`, so runs that differ only in
    /// the seed share a hash.
    pub fn hash(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("seed ")).collect::<Vec<_>>().join("\n");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Rough single-thread wall time of `run-all` in seconds, calibrated on
    /// a desktop core.
    pub fn projected_secs(&self) -> f64 {
        const ASC_PER_VOXEL: f64 = 2.0e-6;
        const SUPERVISED_PER_VOXEL: f64 = 0.5e-6;
        const DENOISER_PER_VOXEL: f64 = 2.5e-6;
        const SAMPLE_PER_VOXEL: f64 = 2.2e-7;
        let [d, h, w] = self.shape.0;
        let voxels = (d * h * w) as f64;
        let batches = |n: usize| n.div_ceil(self.source_batch.max(1)) as f64 * self.source_batch as f64;
        let epochs = self.seg_epochs as f64;
        let masks = (self.n_source + self.n_target_train) * self.scale_up;
        let crop = if self.denoiser_crop > 0 {
            (self.denoiser_crop.min(d) * self.denoiser_crop.min(h) * self.denoiser_crop.min(w)) as f64
        } else {
            voxels
        };
        let stage1 = epochs * batches(self.n_source) * voxels * ASC_PER_VOXEL;
        let stage2 = (self.denoiser_steps * self.denoiser_accumulate) as f64 * (crop + 0.2 * voxels) * DENOISER_PER_VOXEL
            + (masks * self.diffusion_steps) as f64 * voxels * SAMPLE_PER_VOXEL;
        let stage3 = epochs * batches(self.n_source + masks) * voxels * ASC_PER_VOXEL;
        let baselines = epochs * (batches(self.n_source) + batches(self.n_target_train)) * voxels * SUPERVISED_PER_VOXEL;
        stage1 + stage2 + stage3 + baselines
    }
}
