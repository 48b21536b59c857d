//! Stage 1: teacher-student adaptation and pseudo-labelling of the target set.

use uvforge_core::model::{train_asc, AscFlags, ParamVector, Segmenter};
use uvforge_core::pseudolabel::{make_pseudo_label, PseudoLabelRecord};
use uvforge_core::rng::{derived_rng, tag};
use uvforge_core::{LabelVolume, ScalarVolume};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Subject};
use crate::error::Result;

/// A pseudo-label with the id of the target subject it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub record: PseudoLabelRecord,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub pseudo: Vec<PseudoLabel>,
    pub student: ParamVector,
    pub teacher: ParamVector,
    pub loss_curve: Vec<f64>,
}

pub(crate) fn labelled(subjects: &[Subject]) -> Vec<(ScalarVolume, LabelVolume)> {
    subjects.iter().map(|s| (s.image.clone(), s.label.clone())).collect()
}

pub fn run(cfg: &RunConfig, data: &Dataset) -> Result<Stage1Output> {
    let model = Segmenter::new(data.num_classes)?;
    let targets = data.target_images();
    let out = train_asc(
        &model,
        &model.init(),
        &labelled(&data.source),
        &targets,
        &targets,
        &cfg.asc_config(AscFlags::default()),
        &mut derived_rng(cfg.seed, &[tag("stage1")]),
    )?;
    let pseudo = data
        .target_train
        .iter()
        .zip(&out.ensembled)
        .map(|(s, prob)| {
            Ok(PseudoLabel {
                id: s.id.clone(),
                record: make_pseudo_label(prob, cfg.tau, out.window.clone())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Stage1Output {
        pseudo,
        student: out.student,
        teacher: out.teacher,
        loss_curve: out.loss_curve,
    })
}

pub fn accepted(pseudo: &[PseudoLabel]) -> impl Iterator<Item = &PseudoLabel> {
    pseudo.iter().filter(|p| p.record.accepted)
}
