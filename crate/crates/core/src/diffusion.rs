//! Label-conditioned denoising diffusion.
//!
//! Timesteps are 1-based: `t` runs from 1 (almost clean) to `T` (almost pure
//! noise). Images are diffused in `[-1, 1]`; see [`to_model_range`].

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::deform::{deform_labels, deformable_transform, DeformRanges};
use crate::error::{Error, Result};
use crate::losses::LossOut;
use crate::rng::Rng;
use crate::volume::{LabelVolume, ScalarVolume, Shape3};

pub const DEFAULT_STEPS: usize = 250;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_EMBED_CHANNELS: usize = 4;
const BETA_CLIP: (f64, f64) = (1e-8, 0.999);

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alphabar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 timesteps".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alphabar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alphabar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alphabar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alphabar(&self, t: usize) -> Result<f64> {
        Ok(self.alphabar[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

/// Cosine schedule with offset `s`; betas are clipped and the cumulative
/// products recomputed from the clipped values.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("T = {steps} must be >= 2")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("offset {s} must be positive")));
    }
    let g = |t: f64| {
        let c = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let g0 = g(0.0);
    let mut prev = 1.0;
    let betas = (1..=steps)
        .map(|t| {
            let ab = g(t as f64) / g0;
            let b = (1.0 - ab / prev).clamp(BETA_CLIP.0, BETA_CLIP.1);
            prev = ab;
            b
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Maps `[0, 1]` intensities to the diffusion range `[-1, 1]`.
pub fn to_model_range(v: &ScalarVolume) -> ScalarVolume {
    let data = v.data().iter().map(|x| 2.0 * x - 1.0).collect();
    v.with_data(data).expect("affine map keeps values finite")
}

pub fn from_model_range(v: &ScalarVolume) -> ScalarVolume {
    let data = v.data().iter().map(|x| (x + 1.0) / 2.0).collect();
    v.with_data(data).expect("affine map keeps values finite")
}

pub fn standard_normal(shape: Shape3, like: &ScalarVolume, rng: &mut Rng) -> ScalarVolume {
    let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    like.with_data(data).expect("normal draws are finite")
}

/// `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn q_sample(x0: &ScalarVolume, t: usize, eps: &ScalarVolume, sched: &NoiseSchedule) -> Result<ScalarVolume> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(x0.shape().dims(), eps.shape().dims()));
    }
    let ab = sched.alphabar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    x0.with_data(data)
}

/// Linear map from one-hot class vectors to embedding channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder {
    num_classes: usize,
    channels: usize,
    /// Row-major `channels x num_classes`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConditionEmbedder {
    pub fn new(num_classes: usize, channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || channels == 0 {
            return Err(Error::InvalidArgument("embedder needs C >= 2 and E >= 1".into()));
        }
        if weight.len() != channels * num_classes {
            return Err(Error::VectorLengthMismatch(weight.len(), channels * num_classes));
        }
        if bias.len() != channels {
            return Err(Error::VectorLengthMismatch(bias.len(), channels));
        }
        Ok(Self {
            num_classes,
            channels,
            weight,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, channels: usize) -> Result<Self> {
        Self::new(num_classes, channels, vec![0.0; channels * num_classes], vec![0.0; channels])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Embedding planes, one per channel. For a one-hot input the linear
    /// map reduces to a column lookup.
    pub fn embed(&self, c: &LabelVolume) -> Result<Vec<Vec<f64>>> {
        if c.num_classes() != self.num_classes {
            return Err(Error::ClassMismatch(self.num_classes, c.num_classes()));
        }
        Ok((0..self.channels)
            .map(|e| {
                let row = &self.weight[e * self.num_classes..(e + 1) * self.num_classes];
                c.data().iter().map(|&k| row[k as usize] + self.bias[e]).collect()
            })
            .collect())
    }
}

/// Noisy image plus embedding planes, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput {
    pub shape: Shape3,
    pub x: Vec<f64>,
    pub embedding: Vec<Vec<f64>>,
}

impl ConditionedInput {
    pub fn channel_count(&self) -> usize {
        1 + self.embedding.len()
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.x
        } else {
            &self.embedding[k - 1]
        }
    }
}

pub fn embed_condition(x_t: &ScalarVolume, c: &LabelVolume, emb: &ConditionEmbedder) -> Result<ConditionedInput> {
    if x_t.shape() != c.shape() {
        return Err(Error::ShapeMismatch(x_t.shape().dims(), c.shape().dims()));
    }
    Ok(ConditionedInput {
        shape: x_t.shape(),
        x: x_t.data().to_vec(),
        embedding: emb.embed(c)?,
    })
}

/// Noise predictor.
pub trait Denoiser {
    fn predict(&self, input: &ConditionedInput, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>>;
}

/// Scalar reverse step from explicit coefficients.
pub fn p_step_scalar(x_t: f64, eps_hat: f64, alpha: f64, alphabar: f64, sigma: f64, z: f64) -> f64 {
    (x_t - (1.0 - alpha) / (1.0 - alphabar).sqrt() * eps_hat) / alpha.sqrt() + sigma * z
}

/// One ancestral sampling step from `t` to `t - 1`.
pub fn p_step(
    x_t: &ScalarVolume,
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    z: Option<&ScalarVolume>,
) -> Result<ScalarVolume> {
    let n = x_t.shape().len();
    if eps_hat.len() != n {
        return Err(Error::VectorLengthMismatch(eps_hat.len(), n));
    }
    if let Some(z) = z {
        if z.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch(x_t.shape().dims(), z.shape().dims()));
        }
    }
    let (a, ab, s) = (sched.alpha(t)?, sched.alphabar(t)?, sched.sigma(t)?);
    let data = (0..n)
        .map(|i| {
            let zi = z.map_or(0.0, |z| z.data()[i]);
            p_step_scalar(x_t.data()[i], eps_hat[i], a, ab, s, zi)
        })
        .collect();
    x_t.with_data(data)
}

/// Full reverse chain from `x_T ~ N(0, I)`, conditioning every step on `c`.
pub fn sample_loop(
    denoiser: &dyn Denoiser,
    c: &LabelVolume,
    emb: &ConditionEmbedder,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ScalarVolume> {
    let shape = c.shape();
    let like = ScalarVolume::zeros(shape, c.spacing());
    let mut x = standard_normal(shape, &like, rng);
    let mut input = embed_condition(&x, c, emb)?;
    for t in (1..=sched.steps()).rev() {
        input.x.copy_from_slice(x.data());
        let eps = denoiser.predict(&input, t, sched)?;
        let z = (t > 1).then(|| standard_normal(shape, &like, rng));
        x = p_step(&x, t, &eps, sched, z.as_ref())?;
    }
    Ok(x)
}

/// Mean absolute error with the sign subgradient w.r.t. `eps_hat`.
pub fn mae(eps: &[f64], eps_hat: &[f64]) -> Result<LossOut> {
    if eps.len() != eps_hat.len() {
        return Err(Error::VectorLengthMismatch(eps.len(), eps_hat.len()));
    }
    if eps.is_empty() {
        return Err(Error::Empty("noise tensors"));
    }
    let inv = 1.0 / eps.len() as f64;
    let mut value = 0.0;
    let grad = eps
        .iter()
        .zip(eps_hat)
        .map(|(e, h)| {
            let d = h - e;
            value += d.abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossOut {
        value: value * inv,
        grads: vec![grad],
    })
}

pub fn mae_loss(eps: &ScalarVolume, eps_hat: &ScalarVolume) -> Result<LossOut> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(eps.shape().dims(), eps_hat.shape().dims()));
    }
    mae(eps.data(), eps_hat.data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// Prepares a training pair. Source pairs get one shared random deformation;
/// pseudo-labelled target pairs pass through untouched.
pub fn train_pair_assemble(
    image: &ScalarVolume,
    label: &LabelVolume,
    domain: Domain,
    ranges: &DeformRanges,
    rng: &mut Rng,
) -> Result<(ScalarVolume, LabelVolume)> {
    match domain {
        Domain::Target => Ok((image.clone(), label.clone())),
        Domain::Source => {
            let affine = ranges.sample_affine(rng);
            let (img, lbl) = deformable_transform(image, Some(label), &affine, &ranges.elastic, rng)?;
            Ok((img, lbl.expect("label requested")))
        }
    }
}

/// Deforms a conditioning mask before sampling; applies to either domain.
pub fn sampling_mask(label: &LabelVolume, ranges: &DeformRanges, rng: &mut Rng) -> Result<LabelVolume> {
    let affine = ranges.sample_affine(rng);
    deform_labels(label, &affine, &ranges.elastic, rng)
}

/// Exact posterior-mean noise predictor when every element of `x0` is
/// independently `N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    pub mean: f64,
    pub var: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn eps(&self, x: f64, alphabar: f64) -> f64 {
        (1.0 - alphabar).sqrt() * (x - alphabar.sqrt() * self.mean) / (alphabar * self.var + 1.0 - alphabar)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(&self, input: &ConditionedInput, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let ab = sched.alphabar(t)?;
        Ok(input.x.iter().map(|&x| self.eps(x, ab)).collect())
    }
}

/// Clips the clean-image estimate implied by the inner prediction to
/// `[-1, 1]` and returns the noise consistent with the clipped estimate.
pub struct ClipDenoised<D>(pub D);

impl<D: Denoiser> Denoiser for ClipDenoised<D> {
    fn predict(&self, input: &ConditionedInput, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let eps = self.0.predict(input, t, sched)?;
        let ab = sched.alphabar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(input
            .x
            .iter()
            .zip(&eps)
            .map(|(&x, &e)| {
                let x0 = ((x - b * e) / a).clamp(-1.0, 1.0);
                (x - a * x0) / b
            })
            .collect())
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, input: &ConditionedInput, _t: usize, _sched: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(vec![0.0; input.x.len()])
    }
}
