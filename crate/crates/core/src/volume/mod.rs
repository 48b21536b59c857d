//! Core 3D volume types.
//!
//! Voxels are stored row-major with `w` fastest: the linear index of voxel
//! `(z, y, x)` is `(z * h + y) * w + x`. Probability volumes interleave their
//! channels per voxel (channel fastest).

mod io;

pub use io::{
    decode_volume, encode_label, encode_prob, encode_scalar, load_label, load_scalar, load_volume,
    save_label, save_prob, save_scalar, Dtype, StoredVolume, MAGIC,
};

use crate::error::{Error, Result};

/// Voxel extents along depth, height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape([d, h, w]));
        }
        d.checked_mul(h)
            .and_then(|p| p.checked_mul(w))
            .ok_or(Error::InvalidShape([d, h, w]))?;
        Ok(Self { d, h, w })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }
}

/// Millimetres per voxel along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing3 {
    pub sd: f64,
    pub sh: f64,
    pub sw: f64,
}

impl Spacing3 {
    pub fn new(sd: f64, sh: f64, sw: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(sd) && ok(sh) && ok(sw)) {
            return Err(Error::InvalidSpacing([sd, sh, sw]));
        }
        Ok(Self { sd, sh, sw })
    }

    pub fn unit() -> Self {
        Self {
            sd: 1.0,
            sh: 1.0,
            sw: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sd, self.sh, self.sw]
    }
}

impl Default for Spacing3 {
    fn default() -> Self {
        Self::unit()
    }
}

/// Real-valued 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    shape: Shape3,
    spacing: Spacing3,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(shape: Shape3, spacing: Spacing3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: Shape3, spacing: Spacing3) -> Self {
        Self::filled(shape, spacing, 0.0)
    }

    pub fn filled(shape: Shape3, spacing: Spacing3, value: f64) -> Self {
        Self {
            shape,
            spacing,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(z, y, x)]
    }

    /// Same geometry, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape, self.spacing, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Integer class map with `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    spacing: Spacing3Eq,
    num_classes: usize,
    data: Vec<u8>,
}

// Spacing compared bitwise so that `LabelVolume` can implement `Eq`.
#[derive(Debug, Clone, Copy)]
struct Spacing3Eq(Spacing3);

impl PartialEq for Spacing3Eq {
    fn eq(&self, other: &Self) -> bool {
        self.0.as_array().map(f64::to_bits) == other.0.as_array().map(f64::to_bits)
    }
}

impl Eq for Spacing3Eq {}

impl LabelVolume {
    pub fn new(shape: Shape3, spacing: Spacing3, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if !(2..=255).contains(&num_classes) {
            return Err(Error::InvalidClassCount(num_classes));
        }
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: data[i] as usize,
                num_classes,
            });
        }
        Ok(Self {
            shape,
            spacing: Spacing3Eq(spacing),
            num_classes,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing.0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.shape, self.spacing.0, self.num_classes, data)
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Channel-interleaved one-hot encoding.
    pub fn one_hot(&self) -> Vec<f64> {
        let c = self.num_classes;
        let mut out = vec![0.0; self.data.len() * c];
        for (i, &v) in self.data.iter().enumerate() {
            out[i * c + v as usize] = 1.0;
        }
        out
    }
}

/// Tolerance on the per-voxel channel sum of a [`ProbVolume`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Per-voxel class probabilities, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    shape: Shape3,
    spacing: Spacing3,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(shape: Shape3, spacing: Spacing3, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if !(2..=255).contains(&num_classes) {
            return Err(Error::InvalidClassCount(num_classes));
        }
        if data.len() != shape.len() * num_classes {
            return Err(Error::LengthMismatch {
                expected: shape.len() * num_classes,
                got: data.len(),
            });
        }
        for (i, voxel) in data.chunks_exact(num_classes).enumerate() {
            let sum: f64 = voxel.iter().sum();
            let valid = voxel.iter().all(|&p| p.is_finite() && p >= 0.0);
            if !valid || (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidProbabilities { index: i, sum });
            }
        }
        Ok(Self {
            shape,
            spacing,
            num_classes,
            data,
        })
    }

    /// One-hot probabilities of a label map.
    pub fn from_labels(labels: &LabelVolume) -> Self {
        Self {
            shape: labels.shape(),
            spacing: labels.spacing(),
            num_classes: labels.num_classes(),
            data: labels.one_hot(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Per-voxel argmax, ties resolved toward the lowest class id.
    pub fn argmax(&self) -> LabelVolume {
        let data = self
            .data
            .chunks_exact(self.num_classes)
            .map(|v| argmax_lowest(v) as u8)
            .collect();
        LabelVolume {
            shape: self.shape,
            spacing: Spacing3Eq(self.spacing),
            num_classes: self.num_classes,
            data,
        }
    }

    /// Mean over voxels of the largest channel probability.
    pub fn mean_confidence(&self) -> f64 {
        let total: f64 = self
            .data
            .chunks_exact(self.num_classes)
            .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        total / self.shape.len() as f64
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = k;
        }
    }
    best
}

/// Affine min-max rescale to `[0, 1]`.
pub fn normalize_minmax(v: &ScalarVolume) -> Result<ScalarVolume> {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateRange);
    }
    let data = v
        .data()
        .iter()
        .map(|&x| (x - lo) / range)
        .collect();
    v.with_data(data)
}

/// Intensity histogram of a `[0, 1]` volume as a probability vector.
///
/// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin is closed so 1.0 is
/// counted. Values outside `[0, 1]` are clamped into the end bins.
pub fn histogram(v: &ScalarVolume, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    for &x in v.data() {
        let b = (x * bins as f64).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    let n = v.data().len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}
