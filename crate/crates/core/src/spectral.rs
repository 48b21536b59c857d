//! Fourier amplitude transfer between domains.
//!
//! A volume is split into a centre-shifted amplitude and phase spectrum. The
//! low-frequency box of one volume's amplitude is replaced by another's while
//! the phase is kept, so the output keeps the content of the first volume and
//! takes on the intensity statistics of the second. The box size `beta` can
//! be chosen from the distance between the two intensity histograms.

use std::f64::consts::SQRT_2;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::volume::{histogram, ScalarVolume, Shape3};

/// Smallest swap ratio.
pub const BETA_MIN: f64 = 0.1;
/// Largest swap ratio; the mask cannot exceed the full spectrum.
pub const BETA_MAX: f64 = 1.0;
/// Range of the random multiplier applied to the histogram-derived ratio.
pub const ALPHA_RANGE: (f64, f64) = (0.5, 1.5);
/// Largest Euclidean distance between two probability vectors.
pub const D_MAX: f64 = SQRT_2;

struct Plans {
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Plans {
    fn new(shape: Shape3) -> Self {
        let mut planner = FftPlanner::new();
        let dims = shape.dims();
        Self {
            forward: dims.map(|n| planner.plan_fft_forward(n)),
            inverse: dims.map(|n| planner.plan_fft_inverse(n)),
        }
    }
}

/// Unnormalized 3D transform along every axis, in place.
fn fft3(data: &mut [Complex64], shape: Shape3, plans: &[Arc<dyn Fft<f64>>; 3]) {
    let (d, h, w) = (shape.d, shape.h, shape.w);
    // w is contiguous
    for row in data.chunks_exact_mut(w) {
        plans[2].process(row);
    }
    let mut line = vec![Complex64::default(); h.max(d)];
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = data[shape.index(z, y, x)];
            }
            plans[1].process(&mut line[..h]);
            for y in 0..h {
                data[shape.index(z, y, x)] = line[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = data[shape.index(z, y, x)];
            }
            plans[0].process(&mut line[..d]);
            for z in 0..d {
                data[shape.index(z, y, x)] = line[z];
            }
        }
    }
}

/// Maps an unshifted frequency index to its centre-shifted position.
#[inline]
fn shift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Amplitude and phase of a volume's 3D Fourier transform, centre-shifted so
/// the DC term sits at `(d/2, h/2, w/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub shape: Shape3,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

fn to_complex_shifted(v: &ScalarVolume, plans: &Plans) -> Vec<Complex64> {
    let shape = v.shape();
    let mut buf: Vec<Complex64> = v.data().iter().map(|&r| Complex64::new(r, 0.0)).collect();
    fft3(&mut buf, shape, &plans.forward);
    let mut shifted = vec![Complex64::default(); buf.len()];
    for (i, c) in buf.into_iter().enumerate() {
        let (z, y, x) = shape.coords(i);
        let j = shape.index(
            shift_index(z, shape.d),
            shift_index(y, shape.h),
            shift_index(x, shape.w),
        );
        shifted[j] = c;
    }
    shifted
}

/// Inverse transform of a centre-shifted spectrum; returns the complex result.
fn from_shifted(spec: &[Complex64], shape: Shape3, plans: &Plans) -> Vec<Complex64> {
    let mut buf = vec![Complex64::default(); spec.len()];
    for (i, slot) in buf.iter_mut().enumerate() {
        let (z, y, x) = shape.coords(i);
        *slot = spec[shape.index(
            shift_index(z, shape.d),
            shift_index(y, shape.h),
            shift_index(x, shape.w),
        )];
    }
    fft3(&mut buf, shape, &plans.inverse);
    let scale = 1.0 / shape.len() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

pub fn decompose(v: &ScalarVolume) -> Spectrum {
    let plans = Plans::new(v.shape());
    let spec = to_complex_shifted(v, &plans);
    Spectrum {
        shape: v.shape(),
        amplitude: spec.iter().map(|c| c.norm()).collect(),
        phase: spec.iter().map(|c| c.arg()).collect(),
    }
}

/// Rebuilds the spatial volume from amplitude and phase, keeping the real
/// part. Returns the volume and the largest imaginary residue.
pub fn reconstruct_with_residue(
    spec: &Spectrum,
    like: &ScalarVolume,
) -> Result<(ScalarVolume, f64)> {
    if spec.shape != like.shape() {
        return Err(Error::ShapeMismatch(spec.shape.dims(), like.shape().dims()));
    }
    let plans = Plans::new(spec.shape);
    let complex: Vec<Complex64> = spec
        .amplitude
        .iter()
        .zip(&spec.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    let out = from_shifted(&complex, spec.shape, &plans);
    let residue = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let vol = like.with_data(out.into_iter().map(|c| c.re).collect())?;
    Ok((vol, residue))
}

pub fn reconstruct(spec: &Spectrum, like: &ScalarVolume) -> Result<ScalarVolume> {
    reconstruct_with_residue(spec, like).map(|(v, _)| v)
}

/// Centred axis-aligned low-frequency box in shifted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LowFreqMask {
    pub shape: Shape3,
    pub beta: f64,
    /// Half-extent of the box along d, h, w.
    pub half_extent: [usize; 3],
}

impl LowFreqMask {
    pub fn new(shape: Shape3, beta: f64) -> Result<Self> {
        if !(BETA_MIN..=BETA_MAX).contains(&beta) {
            return Err(Error::InvalidArgument(format!(
                "beta {beta} outside [{BETA_MIN}, {BETA_MAX}]"
            )));
        }
        let half_extent = shape
            .dims()
            .map(|n| ((beta * n as f64 / 2.0).floor() as usize).min(n / 2));
        Ok(Self {
            shape,
            beta,
            half_extent,
        })
    }

    #[inline]
    fn axis_contains(j: usize, n: usize, e: usize) -> bool {
        let c = n / 2;
        j + e >= c && j <= c + e
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let [ed, eh, ew] = self.half_extent;
        Self::axis_contains(z, self.shape.d, ed)
            && Self::axis_contains(y, self.shape.h, eh)
            && Self::axis_contains(x, self.shape.w, ew)
    }

    /// Binary membership per shifted frequency.
    pub fn membership(&self) -> Vec<bool> {
        (0..self.shape.len())
            .map(|i| {
                let (z, y, x) = self.shape.coords(i);
                self.contains(z, y, x)
            })
            .collect()
    }
}

/// Replaces the low-frequency amplitude of `content` with that of `style`,
/// keeping the phase of `content`.
pub fn amplitude_swap(content: &ScalarVolume, style: &ScalarVolume, beta: f64) -> Result<ScalarVolume> {
    amplitude_swap_with_residue(content, style, beta).map(|(v, _)| v)
}

/// As [`amplitude_swap`], also returning the discarded imaginary residue.
pub fn amplitude_swap_with_residue(
    content: &ScalarVolume,
    style: &ScalarVolume,
    beta: f64,
) -> Result<(ScalarVolume, f64)> {
    if content.shape() != style.shape() {
        return Err(Error::ShapeMismatch(content.shape().dims(), style.shape().dims()));
    }
    let mask = LowFreqMask::new(content.shape(), beta)?;
    let plans = Plans::new(content.shape());
    let c = to_complex_shifted(content, &plans);
    let s = to_complex_shifted(style, &plans);
    let shape = content.shape();
    let mixed: Vec<Complex64> = c
        .iter()
        .zip(&s)
        .enumerate()
        .map(|(i, (cc, sc))| {
            let (z, y, x) = shape.coords(i);
            if mask.contains(z, y, x) {
                Complex64::from_polar(sc.norm(), cc.arg())
            } else {
                *cc
            }
        })
        .collect();
    let out = from_shifted(&mixed, shape, &plans);
    let residue = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    Ok((content.with_data(out.into_iter().map(|c| c.re).collect())?, residue))
}

/// Clamp bounds of the swap ratio and the range of its random multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRule {
    pub clamp: (f64, f64),
    pub alpha_range: (f64, f64),
}

impl Default for BetaRule {
    fn default() -> Self {
        Self {
            clamp: (BETA_MIN, BETA_MAX),
            alpha_range: ALPHA_RANGE,
        }
    }
}

impl BetaRule {
    /// Both ranges must be ordered and lie inside the default ones.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(BETA_MIN <= lo && lo <= hi && hi <= BETA_MAX) {
            return Err(Error::InvalidArgument(format!(
                "beta clamp ({lo}, {hi}) not an ordered range inside [{BETA_MIN}, {BETA_MAX}]"
            )));
        }
        let (a, b) = self.alpha_range;
        if !(ALPHA_RANGE.0 <= a && a <= b && b <= ALPHA_RANGE.1) {
            return Err(Error::InvalidArgument(format!(
                "alpha range ({a}, {b}) not an ordered range inside [{}, {}]",
                ALPHA_RANGE.0, ALPHA_RANGE.1
            )));
        }
        Ok(())
    }

    /// `clamp(max(lo, d/d_max * alpha), lo, hi)`.
    pub fn beta(&self, d_hist: f64, alpha: f64) -> Result<f64> {
        let (a, b) = self.alpha_range;
        if !(a..=b).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [{a}, {b}]")));
        }
        let (lo, hi) = self.clamp;
        Ok((d_hist / D_MAX * alpha).max(lo).clamp(lo, hi))
    }
}

/// Swap ratio from the histogram distance under the default [`BetaRule`].
pub fn beta_from_distance(d_hist: f64, alpha: f64) -> Result<f64> {
    BetaRule::default().beta(d_hist, alpha)
}

/// Euclidean distance between the intensity histograms of two volumes.
pub fn histogram_distance(a: &ScalarVolume, b: &ScalarVolume, bins: usize) -> Result<f64> {
    let ha = histogram(a, bins)?;
    let hb = histogram(b, bins)?;
    Ok(ha
        .iter()
        .zip(&hb)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt())
}

/// Histogram-adaptive swap ratio for a source/target pair.
pub fn adaptive_beta(x_s: &ScalarVolume, x_t: &ScalarVolume, bins: usize, alpha: f64) -> Result<f64> {
    let d = histogram_distance(x_s, x_t, bins)?;
    beta_from_distance(d, alpha)
}
