//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with one gradient vector per
//! differentiated input, each laid out like that input's data. Teacher
//! predictions are constants and get no gradient.

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::volume::{LabelVolume, ProbVolume};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOut {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossOut {
    pub fn scaled(mut self, k: f64) -> Self {
        self.value *= k;
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= k);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for TrainWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.99,
        }
    }
}

impl TrainWeights {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} must lie in [0, 1]")));
        }
        Ok(Self { lambda, gamma })
    }
}

/// Soft Dice loss on channel-interleaved probabilities.
pub fn soft_dice(probs: &[f64], labels: &[u8], num_classes: usize) -> Result<LossOut> {
    let c = num_classes;
    if probs.len() != labels.len() * c {
        return Err(Error::VectorLengthMismatch(probs.len(), labels.len() * c));
    }
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut ysum = vec![0.0; c];
    for (v, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= c {
            return Err(Error::LabelOutOfRange {
                index: v,
                label: l,
                num_classes: c,
            });
        }
        let p = &probs[v * c..(v + 1) * c];
        for k in 0..c {
            psum[k] += p[k];
        }
        inter[l] += p[l];
        ysum[l] += 1.0;
    }
    let mut score = 0.0;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for k in 0..c {
        num[k] = 2.0 * inter[k] + DICE_SMOOTH;
        den[k] = psum[k] + ysum[k] + DICE_SMOOTH;
        score += num[k] / den[k];
    }
    let value = 1.0 - score / c as f64;
    let mut grad = vec![0.0; probs.len()];
    for (v, &l) in labels.iter().enumerate() {
        for k in 0..c {
            let y = if l as usize == k { 1.0 } else { 0.0 };
            let d = (2.0 * y * den[k] - num[k]) / (den[k] * den[k]);
            grad[v * c + k] = -d / c as f64;
        }
    }
    Ok(LossOut {
        value,
        grads: vec![grad],
    })
}

fn check_pair(p: &ProbVolume, y: &LabelVolume) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch(p.shape().dims(), y.shape().dims()));
    }
    if p.num_classes() != y.num_classes() {
        return Err(Error::ClassMismatch(p.num_classes(), y.num_classes()));
    }
    Ok(())
}

pub fn dice_loss(p: &ProbVolume, y: &LabelVolume) -> Result<LossOut> {
    check_pair(p, y)?;
    soft_dice(p.data(), y.data(), p.num_classes())
}

/// Dice on the source prediction plus Dice on the style-transferred source.
pub fn l_seg(p_s: &ProbVolume, p_sft: &ProbVolume, y_s: &LabelVolume) -> Result<LossOut> {
    let a = dice_loss(p_s, y_s)?;
    let b = dice_loss(p_sft, y_s)?;
    Ok(LossOut {
        value: a.value + b.value,
        grads: a.grads.into_iter().chain(b.grads).collect(),
    })
}

/// Sum of two element-mean squared errors; gradients w.r.t. the students.
pub fn paired_mse(student_a: &[f64], teacher_a: &[f64], student_b: &[f64], teacher_b: &[f64]) -> Result<LossOut> {
    let n = student_a.len();
    for other in [teacher_a.len(), student_b.len(), teacher_b.len()] {
        if other != n {
            return Err(Error::VectorLengthMismatch(n, other));
        }
    }
    if n == 0 {
        return Err(Error::Empty("consistency inputs"));
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (s, t) in [(student_a, teacher_a), (student_b, teacher_b)] {
        let mut g = Vec::with_capacity(n);
        let mut sq = 0.0;
        for (a, b) in s.iter().zip(t) {
            let d = a - b;
            sq += d * d;
            g.push(2.0 * d * inv);
        }
        value += sq * inv;
        grads.push(g);
    }
    Ok(LossOut { value, grads })
}

fn check_same(vols: &[&ProbVolume]) -> Result<()> {
    let first = vols[0];
    for v in &vols[1..] {
        if v.shape() != first.shape() {
            return Err(Error::ShapeMismatch(first.shape().dims(), v.shape().dims()));
        }
        if v.num_classes() != first.num_classes() {
            return Err(Error::ClassMismatch(first.num_classes(), v.num_classes()));
        }
    }
    Ok(())
}

/// Dual appearance consistency: each student view against the teacher's
/// prediction on the other view.
pub fn l_app_con(f_xt: &ProbVolume, f_xtfs: &ProbVolume, ft_xt: &ProbVolume, ft_xtfs: &ProbVolume) -> Result<LossOut> {
    check_same(&[f_xt, f_xtfs, ft_xt, ft_xtfs])?;
    paired_mse(f_xt.data(), ft_xtfs.data(), f_xtfs.data(), ft_xt.data())
}

/// Appearance plus structure consistency on CutMix-perturbed student views.
pub fn l_asc(
    f_xt_sp: &ProbVolume,
    f_xtfs_sp: &ProbVolume,
    ft_xt: &ProbVolume,
    ft_xtfs: &ProbVolume,
) -> Result<LossOut> {
    check_same(&[f_xt_sp, f_xtfs_sp, ft_xt, ft_xtfs])?;
    paired_mse(f_xt_sp.data(), ft_xtfs.data(), f_xtfs_sp.data(), ft_xt.data())
}

/// `seg + lambda * asc`; gradients are the seg gradients followed by the
/// scaled asc gradients.
pub fn l_all(seg: &LossOut, asc: &LossOut, w: TrainWeights) -> LossOut {
    let asc = asc.clone().scaled(w.lambda);
    LossOut {
        value: seg.value + asc.value,
        grads: seg.grads.iter().cloned().chain(asc.grads).collect(),
    }
}

pub fn ema_blend(teacher: &[f64], student: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::VectorLengthMismatch(teacher.len(), student.len()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must lie in [0, 1]")));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| gamma * t + (1.0 - gamma) * s)
        .collect())
}

pub fn ema_update(teacher: &ParamVector, student: &ParamVector, gamma: f64) -> Result<ParamVector> {
    if teacher.layout() != student.layout() {
        return Err(Error::LayoutMismatch("teacher and student layouts differ".into()));
    }
    teacher.with_values(ema_blend(teacher.values(), student.values(), gamma)?)
}
