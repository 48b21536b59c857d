//! Synthetic two-domain phantoms.
//!
//! Anatomy is a set of nested, noisily deformed ellipsoid shells that depend
//! only on the subject seed. The rendered image depends on the seed and the
//! domain style, so the same subject can be viewed in both domains with one
//! shared ground truth.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, tag, Rng};
use crate::volume::{normalize_minmax, LabelVolume, ScalarVolume, Shape3, Spacing3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    DomainA,
    DomainB,
}

impl Style {
    pub fn name(self) -> &'static str {
        match self {
            Style::DomainA => "A",
            Style::DomainB => "B",
        }
    }
}

/// Rendering constants for one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleParams {
    /// Exponent of the class-depth to intensity curve `lo + span * q^gamma`.
    pub contrast_gamma: f64,
    pub texture_amplitude: f64,
    /// Cycles across the volume for texture components.
    pub texture_freq: (f64, f64),
    pub bias_amplitude: f64,
    /// True for a multiplicative bias field, false for additive.
    pub bias_multiplicative: bool,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    pub semi_axis: f64,
    pub semi_axis_jitter: f64,
    pub centre_jitter: f64,
    pub shape_noise: f64,
    pub level_lo: f64,
    pub level_span: f64,
    pub domain_a: StyleParams,
    pub domain_b: StyleParams,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            semi_axis: 0.85,
            semi_axis_jitter: 0.1,
            centre_jitter: 0.08,
            shape_noise: 0.06,
            level_lo: 0.1,
            level_span: 0.8,
            domain_a: StyleParams {
                contrast_gamma: 1.0,
                texture_amplitude: 0.03,
                texture_freq: (5.0, 9.0),
                bias_amplitude: 0.03,
                bias_multiplicative: false,
                noise_sigma: 0.02,
            },
            domain_b: StyleParams {
                contrast_gamma: 0.7,
                texture_amplitude: 0.05,
                texture_freq: (1.0, 3.0),
                bias_amplitude: 0.15,
                bias_multiplicative: true,
                noise_sigma: 0.05,
            },
        }
    }
}

impl PhantomParams {
    pub fn style(&self, style: Style) -> &StyleParams {
        match style {
            Style::DomainA => &self.domain_a,
            Style::DomainB => &self.domain_b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectSpec {
    pub seed: u64,
    pub shape: Shape3,
    pub num_classes: usize,
    pub style: Style,
}

impl SubjectSpec {
    pub fn new(seed: u64, shape: Shape3, num_classes: usize, style: Style) -> Self {
        Self {
            seed,
            shape,
            num_classes,
            style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=255).contains(&self.num_classes) {
            return Err(Error::InvalidClassCount(self.num_classes));
        }
        let min_dim = *self.shape.dims().iter().min().expect("three dims");
        if min_dim / 2 < 2 * self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} too small for {} nested shells",
                self.shape.dims(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Sum of random plane waves, normalized to unit peak amplitude.
struct WaveField {
    waves: Vec<([f64; 3], f64)>,
}

impl WaveField {
    fn random(count: usize, freq: (f64, f64), rng: &mut Rng) -> Self {
        let waves = (0..count)
            .map(|_| {
                let dir: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
                let f = rng.random_range(freq.0..=freq.1) * std::f64::consts::PI;
                (dir.map(|d| d / n * f), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let sum: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum();
        sum / self.waves.len() as f64
    }
}

fn coords(shape: Shape3, i: usize) -> [f64; 3] {
    let (z, y, x) = shape.coords(i);
    [
        (2 * z + 1) as f64 / shape.d as f64 - 1.0,
        (2 * y + 1) as f64 / shape.h as f64 - 1.0,
        (2 * x + 1) as f64 / shape.w as f64 - 1.0,
    ]
}

/// Outer radius of shell `k` (1-based) in units of the ellipsoid radius.
fn shell_radius(k: usize, num_classes: usize) -> f64 {
    1.0 - 0.6 * (k - 1) as f64 / (num_classes - 2) as f64
}

pub fn gen_labels(seed: u64, shape: Shape3, num_classes: usize, params: &PhantomParams) -> Result<LabelVolume> {
    let mut rng = derived_rng(seed, &[tag("anatomy")]);
    let axes: [f64; 3] = std::array::from_fn(|_| {
        params.semi_axis * (1.0 + rng.random_range(-params.semi_axis_jitter..=params.semi_axis_jitter))
    });
    let centre: [f64; 3] = std::array::from_fn(|_| rng.random_range(-params.centre_jitter..=params.centre_jitter));
    let warp = WaveField::random(6, (1.0, 2.5), &mut rng);
    let data = (0..shape.len())
        .map(|i| {
            let p = coords(shape, i);
            let r = (0..3)
                .map(|a| ((p[a] - centre[a]) / axes[a]).powi(2))
                .sum::<f64>()
                .sqrt()
                + params.shape_noise * warp.at(p);
            (1..num_classes)
                .rev()
                .find(|&k| r < shell_radius(k, num_classes))
                .unwrap_or(0) as u8
        })
        .collect();
    LabelVolume::new(shape, Spacing3::unit(), num_classes, data)
}

fn render(labels: &LabelVolume, seed: u64, style: Style, params: &PhantomParams) -> Result<ScalarVolume> {
    let sp = params.style(style);
    let shape = labels.shape();
    let c = labels.num_classes();
    let mut rng = derived_rng(seed, &[tag("appearance"), tag(style.name())]);
    let texture: Vec<WaveField> = (0..c).map(|_| WaveField::random(4, sp.texture_freq, &mut rng)).collect();
    let bias = WaveField::random(3, (0.3, 0.8), &mut rng);
    let levels: Vec<f64> = (0..c)
        .map(|k| params.level_lo + params.level_span * (k as f64 / (c - 1) as f64).powf(sp.contrast_gamma))
        .collect();
    let data = (0..shape.len())
        .map(|i| {
            let p = coords(shape, i);
            let k = labels.data()[i] as usize;
            let base = levels[k] + sp.texture_amplitude * texture[k].at(p);
            let b = sp.bias_amplitude * bias.at(p);
            let v = if sp.bias_multiplicative { base * (1.0 + b) } else { base + b };
            v + sp.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    normalize_minmax(&ScalarVolume::new(shape, Spacing3::unit(), data)?)
}

pub fn gen_subject_with(spec: &SubjectSpec, params: &PhantomParams) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let labels = gen_labels(spec.seed, spec.shape, spec.num_classes, params)?;
    let image = render(&labels, spec.seed, spec.style, params)?;
    Ok((image, labels))
}

pub fn gen_subject(spec: &SubjectSpec) -> Result<(ScalarVolume, LabelVolume)> {
    gen_subject_with(spec, &PhantomParams::default())
}

/// Subjects with seeds `seed_base .. seed_base + n`.
pub fn gen_dataset(
    n: usize,
    style: Style,
    seed_base: u64,
    shape: Shape3,
    num_classes: usize,
    params: &PhantomParams,
) -> Result<Vec<(ScalarVolume, LabelVolume)>> {
    (0..n as u64)
        .map(|k| gen_subject_with(&SubjectSpec::new(seed_base + k, shape, num_classes, style), params))
        .collect()
}

/// Subject counts of the three dataset splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source: 12,
            target_train: 10,
            target_test: 10,
        }
    }
}

impl SplitSizes {
    /// Disjoint, consecutive seed ranges starting at `base`.
    pub fn seed_bases(&self, base: u64) -> [u64; 3] {
        let s = base;
        let t = s + self.source as u64;
        [s, t, t + self.target_train as u64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, style: Style) -> SubjectSpec {
        SubjectSpec::new(seed, Shape3::cube(32).unwrap(), 5, style)
    }

    #[test]
    fn anatomy_is_shared_across_styles() {
        let (ia, la) = gen_subject(&spec(3, Style::DomainA)).unwrap();
        let (ib, lb) = gen_subject(&spec(3, Style::DomainB)).unwrap();
        assert_eq!(la, lb);
        assert_ne!(ia, ib);
        let (lo, hi) = ia.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_subject(&spec(9, Style::DomainB)).unwrap(), gen_subject(&spec(9, Style::DomainB)).unwrap());
    }

    #[test]
    fn every_class_is_present() {
        for seed in 0..20 {
            let (_, l) = gen_subject(&spec(seed, Style::DomainA)).unwrap();
            let counts = l.class_counts();
            for (k, &n) in counts.iter().enumerate().skip(1) {
                assert!(n as f64 / l.data().len() as f64 >= 0.01, "seed {seed} class {k}: {n}");
            }
        }
    }

    #[test]
    fn class_means_keep_depth_order_with_a_gap() {
        // both domains brighten with depth but along different curves
        let (ia, l) = gen_subject(&spec(1, Style::DomainA)).unwrap();
        let (ib, _) = gen_subject(&spec(1, Style::DomainB)).unwrap();
        let means = |img: &ScalarVolume| -> Vec<f64> {
            let mut s = vec![0.0; 5];
            let mut n = vec![0.0; 5];
            for (v, &k) in img.data().iter().zip(l.data()) {
                s[k as usize] += v;
                n[k as usize] += 1.0;
            }
            s.iter().zip(&n).map(|(a, b)| a / b).collect()
        };
        let (ma, mb) = (means(&ia), means(&ib));
        assert!(ma.windows(2).all(|w| w[0] < w[1]));
        assert!(mb.windows(2).all(|w| w[0] < w[1]));
        assert!(mb[1] - ma[1] > 0.05, "{ma:?} {mb:?}");
    }

    #[test]
    fn small_shapes_are_rejected() {
        let s = SubjectSpec::new(0, Shape3::cube(16).unwrap(), 5, Style::DomainA);
        assert!(gen_subject(&s).is_err());
        let empty = gen_dataset(0, Style::DomainA, 0, Shape3::cube(24).unwrap(), 5, &PhantomParams::default());
        assert!(empty.unwrap().is_empty());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let [s, t, e] = SplitSizes::default().seed_bases(100);
        assert_eq!((s, t, e), (100, 112, 122));
    }
}
