//! In-memory orchestration with caching of every intermediate product.
//!
//! An [`Experiment`] runs each stage at most once per distinct input. Samples
//! are keyed by provenance, so ablation settings that share masks share
//! samples, and evaluations are keyed by [`Variant::key`].

use std::collections::BTreeMap;
use std::str::FromStr;

use uvforge_core::model::AscFlags;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{train_and_evaluate, EvalOutcome, ResultRow, Variant};
use crate::generate::{base_mask, plan, train_generator, GenSettings, Generated, Generator, SampleKey};
use crate::stage1::{self, PseudoLabel, Stage1Output};

pub struct Experiment {
    pub cfg: RunConfig,
    pub data: Dataset,
    stage1: Option<Stage1Output>,
    pseudo: Option<Vec<PseudoLabel>>,
    generator: Option<Generator>,
    samples: BTreeMap<SampleKey, Generated>,
    evals: BTreeMap<String, EvalOutcome>,
}

impl Experiment {
    pub fn new(cfg: RunConfig, data: Dataset) -> Self {
        Self {
            cfg,
            data,
            stage1: None,
            pseudo: None,
            generator: None,
            samples: BTreeMap::new(),
            evals: BTreeMap::new(),
        }
    }

    /// Uses previously computed pseudo-labels instead of running stage 1.
    pub fn with_pseudo(mut self, pseudo: Vec<PseudoLabel>) -> Self {
        self.pseudo = Some(pseudo);
        self
    }

    pub fn with_generator(mut self, generator: Generator) -> Self {
        self.generator = Some(generator);
        self
    }

    /// Adds samples whose provenance matches the current generator.
    pub fn insert_samples(&mut self, samples: impl IntoIterator<Item = Generated>) {
        for g in samples {
            self.samples.insert(g.provenance.key(), g);
        }
    }

    pub fn stage1(&mut self) -> Result<Option<&Stage1Output>> {
        self.pseudo()?;
        Ok(self.stage1.as_ref())
    }

    pub fn pseudo(&mut self) -> Result<&[PseudoLabel]> {
        if self.pseudo.is_none() {
            log::info!("stage 1: adapting and pseudo-labelling {} target volumes", self.data.target_train.len());
            let out = stage1::run(&self.cfg, &self.data)?;
            self.pseudo = Some(out.pseudo.clone());
            self.stage1 = Some(out);
        }
        Ok(self.pseudo.as_deref().expect("set above"))
    }

    pub fn generator(&mut self) -> Result<&Generator> {
        if self.generator.is_none() {
            self.pseudo()?;
            let pseudo = self.pseudo.as_deref().expect("computed");
            log::info!("stage 2: training the conditional generator");
            let out = train_generator(&self.cfg, &self.data, pseudo)?;
            self.generator = Some(Generator::new(&self.cfg, out.ema)?);
        }
        Ok(self.generator.as_ref().expect("set above"))
    }

    /// Plans the settings and samples whatever the cache lacks.
    pub fn generated(&mut self, settings: GenSettings) -> Result<Vec<&Generated>> {
        let keys = self.plan(settings)?;
        let missing: Vec<&SampleKey> = keys.iter().filter(|k| !self.samples.contains_key(k)).collect();
        if !missing.is_empty() {
            self.generator()?;
            let pseudo = self.pseudo.as_deref().expect("computed with the generator");
            let generator = self.generator.as_ref().expect("computed");
            log::info!("stage 2: sampling {} volumes", missing.len());
            let mut fresh = Vec::with_capacity(missing.len());
            for key in missing {
                fresh.push(generator.sample(key, base_mask(key, &self.data, pseudo)?, self.cfg.seed)?);
            }
            self.insert_samples(fresh);
        }
        Ok(keys.iter().map(|k| &self.samples[k]).collect())
    }

    pub fn plan(&mut self, settings: GenSettings) -> Result<Vec<SampleKey>> {
        let settings = settings.canonical();
        if settings.is_empty() {
            return Ok(Vec::new());
        }
        self.pseudo()?;
        plan(settings, &self.data, self.pseudo.as_deref().expect("computed"))
    }

    pub fn evaluate(&mut self, variant: &Variant) -> Result<&EvalOutcome> {
        let key = variant.key();
        if !self.evals.contains_key(&key) {
            let settings = variant.settings();
            // resolve samples first so the cache borrow ends before training
            self.generated(settings)?;
            let keys = self.plan(settings)?;
            let gens: Vec<&Generated> = keys.iter().map(|k| &self.samples[k]).collect();
            log::info!("stage 3: training {key} on {} generated volumes", gens.len());
            let out = train_and_evaluate(&self.cfg, &self.data, variant, &gens)?;
            self.evals.insert(key.clone(), out);
        }
        Ok(&self.evals[&key])
    }

    pub fn row(&mut self, name: &str, variant: &Variant) -> Result<ResultRow> {
        let cfg = self.cfg.clone();
        let out = self.evaluate(variant)?;
        Ok(ResultRow::new(name, &cfg, variant, out))
    }

    /// All samples currently cached, in key order.
    pub fn samples(&self) -> impl Iterator<Item = &Generated> {
        self.samples.values()
    }
}

/// Ablation axes exposed by the `ablate` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Cumulative generator components, from no generated data to scale-up.
    Components,
    /// Samples per mask from 0 up to the configured factor (at least 2).
    ScaleUp,
    Deform,
    SourceMasks,
    TargetMasks,
    /// Cumulative adaptation training signals without generated data.
    Asc,
}

impl Axis {
    pub const NAMES: [&'static str; 6] = ["components", "scale-up", "deform", "source-masks", "target-masks", "asc"];
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "components" => Axis::Components,
            "scale-up" => Axis::ScaleUp,
            "deform" => Axis::Deform,
            "source-masks" => Axis::SourceMasks,
            "target-masks" => Axis::TargetMasks,
            "asc" => Axis::Asc,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown axis `{s}`; expected one of {}",
                    Axis::NAMES.join(", ")
                )))
            }
        })
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Named variants along `axis`, in row order.
pub fn variants(axis: Axis, cfg: &RunConfig) -> Vec<(String, Variant)> {
    let base = GenSettings::from_config(cfg);
    let adapted = |s: GenSettings| Variant::Adapted(s);
    match axis {
        Axis::Components => {
            let m2 = GenSettings {
                source_masks: true,
                target_masks: false,
                deform: false,
                scale_up: 1,
            };
            let m3 = GenSettings { target_masks: true, ..m2 };
            let m4 = GenSettings { deform: true, ..m3 };
            let m5 = GenSettings { scale_up: 2, ..m4 };
            [GenSettings::none(), m2, m3, m4, m5]
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("m{}", i + 1), adapted(s)))
                .collect()
        }
        Axis::ScaleUp => (0..=cfg.scale_up.max(2))
            .map(|k| (format!("scale_up={k}"), adapted(GenSettings { scale_up: k, ..base })))
            .collect(),
        Axis::Deform => [false, true]
            .into_iter()
            .map(|b| (format!("deform={}", on_off(b)), adapted(GenSettings { deform: b, ..base })))
            .collect(),
        Axis::SourceMasks => [false, true]
            .into_iter()
            .map(|b| {
                let s = GenSettings { source_masks: b, ..base };
                (format!("source_masks={}", on_off(b)), adapted(s))
            })
            .collect(),
        Axis::TargetMasks => [false, true]
            .into_iter()
            .map(|b| {
                let s = GenSettings { target_masks: b, ..base };
                (format!("target_masks={}", on_off(b)), adapted(s))
            })
            .collect(),
        Axis::Asc => {
            let m1 = AscFlags {
                fixed_beta: cfg.beta_min,
                adaptive_beta: false,
                ..AscFlags::supervised()
            };
            let m2 = AscFlags { sft_seg: true, ..m1 };
            let m3 = AscFlags { app_target: true, ..m2 };
            let m4 = AscFlags { app_transferred: true, ..m3 };
            let m5 = AscFlags { structure: true, ..m4 };
            let m6 = AscFlags { adaptive_beta: true, ..m5 };
            let rows = [(m1, false), (m2, false), (m3, false), (m4, false), (m5, false), (m6, false), (m6, true)];
            rows.into_iter()
                .enumerate()
                .map(|(i, (flags, ensemble))| (format!("asc_m{}", i + 1), Variant::Asc { flags, ensemble }))
                .collect()
        }
    }
}
