//! Stage 3: retraining on source plus generated data, baselines and scoring.

use serde::{Deserialize, Serialize};
use uvforge_core::metrics::{average_reports, evaluate, MetricReport};
use uvforge_core::model::{predict_all, train_asc, AscFlags, ParamVector, Segmenter};
use uvforge_core::rng::{derived_rng, tag};
use uvforge_core::{LabelVolume, ProbVolume, ScalarVolume};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::generate::{GenSettings, Generated};
use crate::stage1::labelled;

/// A training recipe scored on the target test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Supervised on source only.
    LowerBound,
    /// Supervised on target-train ground truth.
    UpperBound,
    /// Full adaptation on source plus the generated set.
    Adapted(GenSettings),
    /// Adaptation without generated data under the given training signals;
    /// `ensemble` scores the averaged late-epoch predictions.
    Asc { flags: AscFlags, ensemble: bool },
}

impl Variant {
    /// Identifies the computation; variants with equal keys give equal results.
    pub fn key(&self) -> String {
        match self {
            Variant::LowerBound => "lower_bound".into(),
            Variant::UpperBound => "upper_bound".into(),
            Variant::Adapted(s) => {
                let s = s.canonical();
                format!(
                    "adapted:src={}:tgt={}:def={}:k={}",
                    s.source_masks, s.target_masks, s.deform, s.scale_up
                )
            }
            Variant::Asc { flags, ensemble } => format!(
                "asc:sft={}:app_t={}:app_tfs={}:str={}:ada={}:beta={}:ens={}",
                flags.sft_seg,
                flags.app_target,
                flags.app_transferred,
                flags.structure,
                flags.adaptive_beta,
                flags.fixed_beta,
                ensemble
            ),
        }
    }

    pub fn settings(&self) -> GenSettings {
        match self {
            Variant::Adapted(s) => s.canonical(),
            _ => GenSettings::none(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub per_subject: Vec<MetricReport>,
    pub student: ParamVector,
    pub n_labelled: usize,
    pub n_generated: usize,
}

/// Scores argmax predictions against the test ground truth.
pub fn score(cfg: &RunConfig, data: &Dataset, preds: &[ProbVolume]) -> Result<(MetricReport, Vec<MetricReport>)> {
    let per_subject: Vec<MetricReport> = preds
        .iter()
        .zip(&data.target_test)
        .map(|(p, s)| evaluate(&p.argmax(), &s.label, cfg.tol_mm))
        .collect::<uvforge_core::Result<_>>()?;
    Ok((average_reports(&per_subject)?, per_subject))
}

/// Scores a segmenter checkpoint on the target test split.
pub fn evaluate_params(cfg: &RunConfig, data: &Dataset, params: &ParamVector) -> Result<MetricReport> {
    let model = Segmenter::new(data.num_classes)?;
    let preds = predict_all(&model, params, &data.test_images())?;
    Ok(score(cfg, data, &preds)?.0)
}

/// Trains the variant and scores it. `generated` is used only by
/// [`Variant::Adapted`].
pub fn train_and_evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    variant: &Variant,
    generated: &[&Generated],
) -> Result<EvalOutcome> {
    let model = Segmenter::new(data.num_classes)?;
    let supervised = {
        let mut c = cfg.asc_config(AscFlags::supervised());
        c.weights.lambda = 0.0;
        c
    };
    let (labelled_set, target, cfg_asc, ensemble): (Vec<(ScalarVolume, LabelVolume)>, Vec<ScalarVolume>, _, bool) =
        match variant {
            Variant::LowerBound => (labelled(&data.source), Vec::new(), supervised, false),
            Variant::UpperBound => (labelled(&data.target_train), Vec::new(), supervised, false),
            Variant::Adapted(_) => {
                let mut set = labelled(&data.source);
                set.extend(generated.iter().map(|g| (g.image.clone(), g.label.clone())));
                (set, data.target_images(), cfg.asc_config(AscFlags::default()), false)
            }
            Variant::Asc { flags, ensemble } => {
                (labelled(&data.source), data.target_images(), cfg.asc_config(*flags), *ensemble)
            }
        };
    let n_generated = if matches!(variant, Variant::Adapted(_)) { generated.len() } else { 0 };
    let test = data.test_images();
    let watch: &[ScalarVolume] = if ensemble { &test } else { &[] };
    let out = train_asc(
        &model,
        &model.init(),
        &labelled_set,
        &target,
        watch,
        &cfg_asc,
        &mut derived_rng(cfg.seed, &[tag("stage3")]),
    )?;
    let preds = if ensemble {
        out.ensembled
    } else {
        predict_all(&model, &out.student, &test)?
    };
    let (report, per_subject) = score(cfg, data, &preds)?;
    Ok(EvalOutcome {
        report,
        per_subject,
        student: out.student,
        n_labelled: labelled_set.len(),
        n_generated,
    })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub source_masks: bool,
    pub target_masks: bool,
    pub deform: bool,
    pub scale_up: usize,
    pub n_labelled: usize,
    pub n_generated: usize,
    pub mean_dsc: Option<f64>,
    pub mean_nsd: Option<f64>,
    pub mean_asd: Option<f64>,
}

impl ResultRow {
    pub fn new(name: &str, cfg: &RunConfig, variant: &Variant, outcome: &EvalOutcome) -> Self {
        let s = variant.settings();
        Self {
            variant: name.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            source_masks: s.source_masks,
            target_masks: s.target_masks,
            deform: s.deform,
            scale_up: s.scale_up,
            n_labelled: outcome.n_labelled,
            n_generated: outcome.n_generated,
            mean_dsc: outcome.report.mean_dsc,
            mean_nsd: outcome.report.mean_nsd,
            mean_asd: outcome.report.mean_asd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_keys_collapse_equivalent_settings() {
        let empty_a = Variant::Adapted(GenSettings::none());
        let empty_b = Variant::Adapted(GenSettings {
            source_masks: true,
            target_masks: true,
            deform: true,
            scale_up: 0,
        });
        assert_eq!(empty_a.key(), empty_b.key());
        let full = Variant::Adapted(GenSettings::from_config(&RunConfig::default()));
        assert_ne!(full.key(), empty_a.key());
        assert_ne!(Variant::LowerBound.key(), Variant::UpperBound.key());
        let asc = |ensemble| Variant::Asc {
            flags: AscFlags::default(),
            ensemble,
        };
        assert_ne!(asc(true).key(), asc(false).key());
    }
}
