//! Stage 2: conditional generator training and mask-conditioned sampling.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uvforge_core::deform::{deform_labels, AffineParams, DeformRanges, ElasticParams};
use uvforge_core::diffusion::{from_model_range, sample_loop, ClipDenoised, ConditionEmbedder, Domain, NoiseSchedule};
use uvforge_core::model::{encode_params, train_denoiser, ConvDenoiser, DenoiserOutcome, DenoiserPair, ParamVector};
use uvforge_core::rng::{derive_seed, derived_rng, rng_from_seed, tag};
use uvforge_core::{LabelVolume, ScalarVolume};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stage1::{accepted, PseudoLabel};

/// Which masks condition the sampler, whether they are deformed first and
/// how many samples each mask receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenSettings {
    pub source_masks: bool,
    pub target_masks: bool,
    pub deform: bool,
    pub scale_up: usize,
}

impl GenSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            source_masks: cfg.source_masks,
            target_masks: cfg.target_masks,
            deform: cfg.deform_masks,
            scale_up: cfg.scale_up,
        }
    }

    pub fn none() -> Self {
        Self {
            source_masks: false,
            target_masks: false,
            deform: false,
            scale_up: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.scale_up == 0 || !(self.source_masks || self.target_masks)
    }

    /// Settings that produce the same generated set map to one canonical value.
    pub fn canonical(self) -> Self {
        if self.is_empty() {
            Self::none()
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Source,
    Target,
}

/// Identity of one generated sample; the run seed and the generator
/// weights complete its provenance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub mask: MaskSource,
    pub subject: String,
    pub replicate: usize,
    pub deformed: bool,
}

impl SampleKey {
    pub fn name(&self) -> String {
        format!(
            "{}_r{}_{}",
            self.subject,
            self.replicate,
            if self.deformed { "def" } else { "raw" }
        )
    }

    pub fn seed(&self, run_seed: u64) -> u64 {
        let mask = match self.mask {
            MaskSource::Source => tag("source-mask"),
            MaskSource::Target => tag("target-mask"),
        };
        derive_seed(
            run_seed,
            &[tag("sample"), mask, tag(&self.subject), self.replicate as u64, self.deformed as u64],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformRecord {
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub shift_bound: f64,
    pub elastic_window: usize,
    pub elastic_field: usize,
    pub elastic_alpha: f64,
    pub elastic_smooth: usize,
    /// The affine drawn from the ranges above.
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl DeformRecord {
    fn new(ranges: &DeformRanges, affine: &AffineParams) -> Self {
        Self {
            rotation_deg: ranges.rotation_deg,
            scale_range: ranges.scale,
            shift_bound: ranges.shift,
            elastic_window: ranges.elastic.window,
            elastic_field: ranges.elastic.field_size,
            elastic_alpha: ranges.elastic.alpha,
            elastic_smooth: ranges.elastic.smooth_iters,
            rotation: affine.rotation,
            scale: affine.scale,
            shift: affine.shift,
        }
    }

    fn ranges(&self) -> DeformRanges {
        DeformRanges {
            rotation_deg: self.rotation_deg,
            scale: self.scale_range,
            shift: self.shift_bound,
            elastic: ElasticParams {
                window: self.elastic_window,
                field_size: self.elastic_field,
                alpha: self.elastic_alpha,
                smooth_iters: self.elastic_smooth,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mask: MaskSource,
    pub subject: String,
    pub replicate: usize,
    pub seed: u64,
    pub deform: Option<DeformRecord>,
    /// Fingerprint of the generator weights.
    pub generator: String,
}

impl Provenance {
    pub fn key(&self) -> SampleKey {
        SampleKey {
            mask: self.mask,
            subject: self.subject.clone(),
            replicate: self.replicate,
            deformed: self.deform.is_some(),
        }
    }
}

/// A generated image with the mask it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub provenance: Provenance,
    pub image: ScalarVolume,
    pub label: LabelVolume,
}

/// Keys of every sample the settings call for: source masks first, then
/// accepted target masks, each with `scale_up` replicates.
pub fn plan(settings: GenSettings, data: &Dataset, pseudo: &[PseudoLabel]) -> Result<Vec<SampleKey>> {
    if settings.is_empty() {
        return Ok(Vec::new());
    }
    let mut masks: Vec<(MaskSource, String)> = Vec::new();
    if settings.source_masks {
        masks.extend(data.source.iter().map(|s| (MaskSource::Source, s.id.clone())));
    }
    if settings.target_masks {
        let before = masks.len();
        masks.extend(accepted(pseudo).map(|p| (MaskSource::Target, p.id.clone())));
        if masks.len() == before {
            return Err(Error::NoMasks);
        }
    }
    Ok(masks
        .into_iter()
        .flat_map(|(mask, subject)| {
            (0..settings.scale_up).map(move |replicate| SampleKey {
                mask,
                subject: subject.clone(),
                replicate,
                deformed: settings.deform,
            })
        })
        .collect())
}

/// Source pairs, deformed on the fly during training, plus accepted
/// pseudo-labelled target pairs.
pub fn training_pairs(data: &Dataset, pseudo: &[PseudoLabel]) -> Result<Vec<DenoiserPair>> {
    let mut pairs: Vec<DenoiserPair> = data
        .source
        .iter()
        .map(|s| DenoiserPair {
            image: s.image.clone(),
            label: s.label.clone(),
            domain: Domain::Source,
        })
        .collect();
    for p in accepted(pseudo) {
        let subject = data.target_train.iter().find(|s| s.id == p.id).ok_or_else(|| Error::Artifact {
            path: format!("pseudo/{}", p.id).into(),
            message: "pseudo-label for an unknown target subject".into(),
        })?;
        pairs.push(DenoiserPair {
            image: subject.image.clone(),
            label: p.record.label.clone(),
            domain: Domain::Target,
        });
    }
    Ok(pairs)
}

pub fn train_generator(cfg: &RunConfig, data: &Dataset, pseudo: &[PseudoLabel]) -> Result<DenoiserOutcome> {
    let spec = cfg.denoiser_spec()?;
    let mut rng = derived_rng(cfg.seed, &[tag("denoiser")]);
    let init = spec.init(&mut rng);
    let pairs = training_pairs(data, pseudo)?;
    Ok(train_denoiser(
        &spec,
        &init,
        &pairs,
        &cfg.schedule()?,
        &cfg.denoiser_train_config(),
        &mut rng,
    )?)
}

pub fn fingerprint(params: &ParamVector) -> Result<String> {
    let digest = Sha256::digest(encode_params(params)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// A trained denoiser ready to sample.
pub struct Generator {
    denoiser: ClipDenoised<ConvDenoiser>,
    embedder: ConditionEmbedder,
    sched: NoiseSchedule,
    ranges: DeformRanges,
    fingerprint: String,
}

impl Generator {
    pub fn new(cfg: &RunConfig, params: ParamVector) -> Result<Self> {
        let fingerprint = fingerprint(&params)?;
        let model = ConvDenoiser::new(cfg.denoiser_spec()?, params)?;
        Ok(Self {
            embedder: model.embedder()?,
            denoiser: ClipDenoised(model),
            sched: cfg.schedule()?,
            ranges: cfg.deform_ranges(),
            fingerprint,
        })
    }

    pub fn params(&self) -> &ParamVector {
        self.denoiser.0.params()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// The provenance [`Generator::sample`] would record for `key`, computed
    /// without sampling.
    pub fn provenance(&self, key: &SampleKey, run_seed: u64) -> Provenance {
        let seed = key.seed(run_seed);
        let deform = key.deformed.then(|| {
            let affine = self.ranges.sample_affine(&mut rng_from_seed(seed));
            DeformRecord::new(&self.ranges, &affine)
        });
        Provenance {
            mask: key.mask,
            subject: key.subject.clone(),
            replicate: key.replicate,
            seed,
            deform,
            generator: self.fingerprint.clone(),
        }
    }

    pub fn sample(&self, key: &SampleKey, mask: &LabelVolume, run_seed: u64) -> Result<Generated> {
        self.regenerate(&self.provenance(key, run_seed), mask)
    }

    /// Replays a recorded provenance against the undeformed conditioning mask.
    pub fn regenerate(&self, prov: &Provenance, mask: &LabelVolume) -> Result<Generated> {
        if prov.generator != self.fingerprint {
            return Err(Error::Artifact {
                path: prov.key().name().into(),
                message: format!("recorded generator {} differs from {}", prov.generator, self.fingerprint),
            });
        }
        let mut rng = rng_from_seed(prov.seed);
        let label = match &prov.deform {
            Some(record) => {
                let ranges = record.ranges();
                let affine = ranges.sample_affine(&mut rng);
                deform_labels(mask, &affine, &ranges.elastic, &mut rng)?
            }
            None => mask.clone(),
        };
        let x = sample_loop(&self.denoiser, &label, &self.embedder, &self.sched, &mut rng)?;
        Ok(Generated {
            provenance: prov.clone(),
            image: from_model_range(&x),
            label,
        })
    }
}

/// The undeformed conditioning mask behind a sample key.
pub fn base_mask<'a>(key: &SampleKey, data: &'a Dataset, pseudo: &'a [PseudoLabel]) -> Result<&'a LabelVolume> {
    let found = match key.mask {
        MaskSource::Source => data.source.iter().find(|s| s.id == key.subject).map(|s| &s.label),
        MaskSource::Target => pseudo.iter().find(|p| p.id == key.subject).map(|p| &p.record.label),
    };
    found.ok_or_else(|| Error::Artifact {
        path: key.name().into(),
        message: format!("no conditioning mask for subject {}", key.subject),
    })
}
