//! Pseudo-labels for unlabelled target volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbVolume};

pub const DEFAULT_TAU: f64 = 0.7;
pub const ENSEMBLE_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub label: LabelVolume,
    pub mean_confidence: f64,
    pub accepted: bool,
    pub source_epochs: Vec<usize>,
}

/// The JSON sidecar stored next to a pseudo-label volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelMeta {
    pub mean_confidence: f64,
    pub accepted: bool,
    pub source_epochs: Vec<usize>,
}

impl PseudoLabelRecord {
    pub fn meta(&self) -> PseudoLabelMeta {
        PseudoLabelMeta {
            mean_confidence: self.mean_confidence,
            accepted: self.accepted,
            source_epochs: self.source_epochs.clone(),
        }
    }

    pub fn from_parts(label: LabelVolume, meta: PseudoLabelMeta) -> Self {
        Self {
            label,
            mean_confidence: meta.mean_confidence,
            accepted: meta.accepted,
            source_epochs: meta.source_epochs,
        }
    }
}

pub fn ensemble_probs(preds: &[ProbVolume]) -> Result<ProbVolume> {
    let first = preds.first().ok_or(Error::Empty("prediction list"))?;
    let mut acc = vec![0.0; first.data().len()];
    for p in preds {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch(first.shape().dims(), p.shape().dims()));
        }
        if p.num_classes() != first.num_classes() {
            return Err(Error::ClassMismatch(first.num_classes(), p.num_classes()));
        }
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    let k = preds.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    ProbVolume::new(first.shape(), first.spacing(), first.num_classes(), acc)
}

/// Indices of the most recent `min(ENSEMBLE_EPOCHS, epochs)` epochs.
pub fn ensemble_window(epochs: usize) -> Vec<usize> {
    (epochs.saturating_sub(ENSEMBLE_EPOCHS)..epochs).collect()
}

/// Argmax labels plus whole-volume acceptance at `tau`.
pub fn make_pseudo_label(prob: &ProbVolume, tau: f64, source_epochs: Vec<usize>) -> Result<PseudoLabelRecord> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must lie in (0, 1)")));
    }
    let mean_confidence = prob.mean_confidence();
    Ok(PseudoLabelRecord {
        label: prob.argmax(),
        mean_confidence,
        accepted: mean_confidence >= tau,
        source_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Shape3, Spacing3};

    fn prob(n: usize, c: usize, data: Vec<f64>) -> ProbVolume {
        ProbVolume::new(Shape3::new(1, 1, n).unwrap(), Spacing3::unit(), c, data).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let a = prob(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = prob(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ensemble_probs(&[a.clone()]).unwrap(), a);
        assert_eq!(ensemble_probs(&[a.clone(), b]).unwrap().data(), &[0.5; 4]);
        let c = prob(2, 2, vec![0.3, 0.7, 0.9, 0.1]);
        let three = ensemble_probs(&[c.clone(), c.clone(), c.clone()]).unwrap();
        for (x, y) in three.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(ensemble_probs(&[]).is_err());
        assert!(ensemble_probs(&[a, prob(3, 2, vec![0.5; 6])]).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let onehot = prob(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let r = make_pseudo_label(&onehot, 0.9, vec![0]).unwrap();
        assert!(r.accepted);
        assert_eq!(r.mean_confidence, 1.0);
        let uniform = prob(2, 2, vec![0.5; 4]);
        let r = make_pseudo_label(&uniform, 0.9, vec![]).unwrap();
        assert!(!r.accepted);
        assert_eq!(r.mean_confidence, 0.5);
        assert_eq!(r.label.data(), &[0, 0]);
        let mut data = Vec::new();
        for i in 0..10 {
            data.extend(if i < 6 { [0.8, 0.2] } else { [0.6, 0.4] });
        }
        let r = make_pseudo_label(&prob(10, 2, data), 0.7, vec![]).unwrap();
        assert!((r.mean_confidence - 0.72).abs() < 1e-12);
        assert!(r.accepted);
        assert!(r.label.data().iter().all(|&l| l == 0));
        assert!(make_pseudo_label(&onehot, 1.0, vec![]).is_err());
    }

    #[test]
    fn window_is_last_ten() {
        assert_eq!(ensemble_window(3), vec![0, 1, 2]);
        assert_eq!(ensemble_window(25), (15..25).collect::<Vec<_>>());
    }

    #[test]
    fn sidecar_round_trip() {
        let meta = PseudoLabelMeta {
            mean_confidence: 0.8125,
            accepted: true,
            source_epochs: vec![3, 4],
        };
        let json = serde_json::to_string(&meta).unwrap();
        assert_eq!(json, r#"{"mean_confidence":0.8125,"accepted":true,"source_epochs":[3,4]}"#);
        assert_eq!(serde_json::from_str::<PseudoLabelMeta>(&json).unwrap(), meta);
    }
}
