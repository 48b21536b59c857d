//! Affine plus elastic deformation of volumes and label maps.
//!
//! Coordinates are normalized per axis to `[-1, 1]` with voxel-centre
//! alignment: voxel `i` of an axis with `n` voxels sits at `(2i + 1)/n - 1`.
//! Component order is always `(z, y, x)`, matching `(d, h, w)`.
//!
//! The transform builds an affine sampling grid from an angle-axis rotation,
//! per-axis scale and shift, adds a smoothed random displacement field drawn
//! on a coarse grid and upsampled, then resamples the image trilinearly and
//! the labels by nearest neighbour on the same grid. Samples falling outside
//! the volume read as zero (background for labels).

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{LabelVolume, ScalarVolume, Shape3};

pub type Mat3 = [[f64; 3]; 3];
/// Row-major 3x4 affine matrix `[A | t]`.
pub type Affine = [[f64; 4]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Angle-axis rotation vector in radians.
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    /// Translation in normalized coordinates.
    pub shift: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shift: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("scale {:?} must be positive", self.scale)));
        }
        if norm(self.rotation) >= std::f64::consts::PI {
            return Err(Error::InvalidArgument("rotation angle must be below pi".into()));
        }
        Ok(())
    }

    /// `A = diag(scale) * R(rotation)` with the shift as last column.
    pub fn matrix(&self) -> Affine {
        let r = angle_axis_to_rotation(self.rotation);
        let mut a = [[0.0; 4]; 3];
        for d in 0..3 {
            for c in 0..3 {
                a[d][c] = r[d][c] * self.scale[d];
            }
            a[d][3] = self.shift[d];
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    /// Smoothing window, odd.
    pub window: usize,
    /// Coarse field extent per axis.
    pub field_size: usize,
    /// Displacement scale in normalized coordinates.
    pub alpha: f64,
    /// Number of smoothing passes.
    pub smooth_iters: usize,
}

impl ElasticParams {
    pub fn none() -> Self {
        Self {
            window: 1,
            field_size: 2,
            alpha: 0.0,
            smooth_iters: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("window {} must be odd", self.window)));
        }
        if self.field_size < 2 {
            return Err(Error::InvalidArgument("field size must be >= 2".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-voxel displacement in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub shape: Shape3,
    pub dz: Vec<f64>,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(shape: Shape3) -> Self {
        let n = shape.len();
        Self {
            shape,
            dz: vec![0.0; n],
            dy: vec![0.0; n],
            dx: vec![0.0; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.dz
            .iter()
            .chain(&self.dy)
            .chain(&self.dx)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-voxel source coordinates in normalized space, `(z, y, x)` per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub shape: Shape3,
    pub coords: Vec<[f64; 3]>,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Rodrigues' formula.
pub fn angle_axis_to_rotation(r: [f64; 3]) -> Mat3 {
    let theta = norm(r);
    if theta == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [kx, ky, kz] = r.map(|c| c / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + kx * kx * t, kx * ky * t - kz * s, kx * kz * t + ky * s],
        [ky * kx * t + kz * s, c + ky * ky * t, ky * kz * t - kx * s],
        [kz * kx * t - ky * s, kz * ky * t + kx * s, c + kz * kz * t],
    ]
}

#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Continuous voxel position of a normalized coordinate. Positions within
/// 1e-9 of an integer snap to it, which keeps identity resampling exact.
#[inline]
fn voxel_position(u: f64, n: usize) -> f64 {
    let p = ((u + 1.0) * n as f64 - 1.0) / 2.0;
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

pub fn build_affine_grid(a: &Affine, shape: Shape3) -> SampleGrid {
    let mut coords = Vec::with_capacity(shape.len());
    for z in 0..shape.d {
        let pz = normalized_coord(z, shape.d);
        for y in 0..shape.h {
            let py = normalized_coord(y, shape.h);
            for x in 0..shape.w {
                let px = normalized_coord(x, shape.w);
                let p = [pz, py, px];
                coords.push(std::array::from_fn(|r| {
                    a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3]
                }));
            }
        }
    }
    SampleGrid { shape, coords }
}

/// Separable normalized box filter with zero padding, same-size output.
fn box_smooth(field: &mut [f64], shape: Shape3, window: usize) {
    if window <= 1 {
        return;
    }
    let r = (window / 2) as isize;
    let inv = 1.0 / window as f64;
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        line.resize(n, 0.0);
        for start in 0..field.len() {
            // visit each line once, from its first element
            let (z, y, x) = shape.coords(start);
            if [z, y, x][axis] != 0 {
                continue;
            }
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = field[start + k * stride];
            }
            for k in 0..n as isize {
                let lo = (k - r).max(0);
                let hi = (k + r).min(n as isize - 1);
                let sum: f64 = (lo..=hi).map(|j| line[j as usize]).sum();
                field[start + k as usize * stride] = sum * inv;
            }
        }
    }
}

/// Trilinear read with edge clamping, used to resize coarse fields.
fn sample_clamped(data: &[f64], shape: Shape3, p: [f64; 3]) -> f64 {
    let dims = shape.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = q.floor();
        base[a] = f as usize;
        frac[a] = q - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = (base[a] + bit).min(dims[a] - 1);
        }
        if w != 0.0 {
            acc += w * data[shape.index(idx[0], idx[1], idx[2])];
        }
    }
    acc
}

fn resize_trilinear(data: &[f64], from: Shape3, to: Shape3) -> Vec<f64> {
    let src = |i: usize, n_out: usize, n_in: usize| {
        let p = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let r = p.round();
        if (p - r).abs() < 1e-9 {
            r
        } else {
            p
        }
    };
    let mut out = Vec::with_capacity(to.len());
    for z in 0..to.d {
        let pz = src(z, to.d, from.d);
        for y in 0..to.h {
            let py = src(y, to.h, from.h);
            for x in 0..to.w {
                let px = src(x, to.w, from.w);
                out.push(sample_clamped(data, from, [pz, py, px]));
            }
        }
    }
    out
}

/// Random smooth displacement field.
///
/// Uniform noise in `[-1, 1]` is drawn on a coarse `f + 2*(w/2)` grid per
/// axis, scaled by `alpha`, box-filtered `sn` times, cropped to `f` and
/// trilinearly resized to `shape`.
pub fn elastic_field(params: &ElasticParams, shape: Shape3, rng: &mut Rng) -> Result<DisplacementField> {
    params.validate()?;
    if params.alpha == 0.0 {
        return Ok(DisplacementField::zeros(shape));
    }
    let pad = params.window / 2;
    let f = params.field_size;
    let padded = Shape3::cube(f + 2 * pad)?;
    let coarse = Shape3::cube(f)?;
    let mut component = || -> Result<Vec<f64>> {
        let mut field: Vec<f64> = (0..padded.len())
            .map(|_| rng.random_range(-1.0..=1.0) * params.alpha)
            .collect();
        for _ in 0..params.smooth_iters {
            box_smooth(&mut field, padded, params.window);
        }
        let mut cropped = Vec::with_capacity(coarse.len());
        for z in 0..f {
            for y in 0..f {
                for x in 0..f {
                    cropped.push(field[padded.index(z + pad, y + pad, x + pad)]);
                }
            }
        }
        Ok(resize_trilinear(&cropped, coarse, shape))
    };
    let dz = component()?;
    let dy = component()?;
    let dx = component()?;
    Ok(DisplacementField { shape, dz, dy, dx })
}

fn add_displacement(grid: &mut SampleGrid, field: &DisplacementField) {
    for (i, c) in grid.coords.iter_mut().enumerate() {
        c[0] += field.dz[i];
        c[1] += field.dy[i];
        c[2] += field.dx[i];
    }
}

/// Trilinear resampling with zero padding outside the volume.
pub fn sample_trilinear(v: &ScalarVolume, grid: &SampleGrid) -> Result<ScalarVolume> {
    let shape = v.shape();
    let dims = shape.dims();
    let data = v.data();
    let out = grid
        .coords
        .iter()
        .map(|c| {
            let p: [f64; 3] = std::array::from_fn(|a| voxel_position(c[a], dims[a]));
            let base = p.map(|q| q.floor());
            let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a]);
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let bit = (corner >> (2 - a)) & 1;
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    let k = base[a] + bit as f64;
                    inside &= k >= 0.0 && k < dims[a] as f64;
                    idx[a] = k.max(0.0) as usize;
                }
                if inside && w != 0.0 {
                    acc += w * data[shape.index(idx[0], idx[1], idx[2])];
                }
            }
            acc
        })
        .collect();
    ScalarVolume::new(grid.shape, v.spacing(), out)
}

/// Nearest-neighbour resampling; outside samples become class 0.
pub fn sample_nearest(v: &LabelVolume, grid: &SampleGrid) -> Result<LabelVolume> {
    let shape = v.shape();
    let dims = shape.dims();
    let out = grid
        .coords
        .iter()
        .map(|c| {
            let idx: [f64; 3] = std::array::from_fn(|a| voxel_position(c[a], dims[a]).round());
            if (0..3).all(|a| idx[a] >= 0.0 && idx[a] < dims[a] as f64) {
                v.data()[shape.index(idx[0] as usize, idx[1] as usize, idx[2] as usize)]
            } else {
                0
            }
        })
        .collect();
    LabelVolume::new(grid.shape, v.spacing(), v.num_classes(), out)
}

/// Builds the full deformation grid for a shape.
pub fn deformation_grid(
    shape: Shape3,
    affine: &AffineParams,
    elastic: &ElasticParams,
    rng: &mut Rng,
) -> Result<SampleGrid> {
    affine.validate()?;
    let mut grid = build_affine_grid(&affine.matrix(), shape);
    let field = elastic_field(elastic, shape, rng)?;
    add_displacement(&mut grid, &field);
    Ok(grid)
}

/// Deforms an image and, optionally, its label map with one shared grid.
pub fn deformable_transform(
    img: &ScalarVolume,
    lbl: Option<&LabelVolume>,
    affine: &AffineParams,
    elastic: &ElasticParams,
    rng: &mut Rng,
) -> Result<(ScalarVolume, Option<LabelVolume>)> {
    if let Some(l) = lbl {
        if l.shape() != img.shape() {
            return Err(Error::ShapeMismatch(img.shape().dims(), l.shape().dims()));
        }
    }
    let grid = deformation_grid(img.shape(), affine, elastic, rng)?;
    let out_img = sample_trilinear(img, &grid)?;
    let out_lbl = lbl.map(|l| sample_nearest(l, &grid)).transpose()?;
    Ok((out_img, out_lbl))
}

/// Deforms a label map alone.
pub fn deform_labels(
    lbl: &LabelVolume,
    affine: &AffineParams,
    elastic: &ElasticParams,
    rng: &mut Rng,
) -> Result<LabelVolume> {
    let grid = deformation_grid(lbl.shape(), affine, elastic, rng)?;
    sample_nearest(lbl, &grid)
}

/// Ranges for randomly drawn deformation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformRanges {
    /// Per-axis rotation bound in degrees.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub shift: f64,
    pub elastic: ElasticParams,
}

impl Default for DeformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale: (0.9, 1.1),
            shift: 0.05,
            elastic: ElasticParams {
                window: 5,
                field_size: 8,
                alpha: 0.03,
                smooth_iters: 3,
            },
        }
    }
}

impl DeformRanges {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..180.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidArgument(format!("rotation bound {} outside [0, 180)", self.rotation_deg)));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale range ({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("shift bound {} must be >= 0", self.shift)));
        }
        self.elastic.validate()
    }

    pub fn sample_affine(&self, rng: &mut Rng) -> AffineParams {
        let rot = self.rotation_deg.to_radians();
        let mut draw = |lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let rotation = [draw(-rot, rot), draw(-rot, rot), draw(-rot, rot)];
        let scale = [
            draw(self.scale.0, self.scale.1),
            draw(self.scale.0, self.scale.1),
            draw(self.scale.0, self.scale.1),
        ];
        let shift = [
            draw(-self.shift, self.shift),
            draw(-self.shift, self.shift),
            draw(-self.shift, self.shift),
        ];
        AffineParams {
            rotation,
            scale,
            shift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::volume::Spacing3;

    fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
        std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
    }

    fn transpose(a: &Mat3) -> Mat3 {
        std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
    }

    fn det(a: &Mat3) -> f64 {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    #[test]
    fn rotation_examples() {
        let id = angle_axis_to_rotation([0.0; 3]);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let q = angle_axis_to_rotation([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[i][j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = rng_from_seed(42);
        for _ in 0..1000 {
            let mut r = [0.0; 3];
            for c in &mut r {
                *c = rng.random_range(-1.7..1.7);
            }
            if norm(r) >= std::f64::consts::PI {
                continue;
            }
            let m = angle_axis_to_rotation(r);
            let rtr = matmul(&transpose(&m), &m);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((rtr[i][j] - e).abs() < 1e-12);
                }
            }
            assert!((det(&m) - 1.0).abs() < 1e-12);
            let inv = angle_axis_to_rotation(r.map(|c| -c));
            let mt = transpose(&m);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((inv[i][j] - mt[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn affine_grid_examples() {
        let shape = Shape3::new(4, 3, 2).unwrap();
        let id = build_affine_grid(&AffineParams::identity().matrix(), shape);
        for (i, c) in id.coords.iter().enumerate() {
            let (z, y, x) = shape.coords(i);
            assert_eq!(*c, [normalized_coord(z, 4), normalized_coord(y, 3), normalized_coord(x, 2)]);
        }
        let shifted = AffineParams {
            shift: [0.5, 0.0, 0.0],
            ..AffineParams::identity()
        };
        let g = build_affine_grid(&shifted.matrix(), shape);
        for (a, b) in g.coords.iter().zip(&id.coords) {
            assert!((a[0] - b[0] - 0.5).abs() < 1e-15);
            assert_eq!(a[1], b[1]);
        }
        let scaled = AffineParams {
            scale: [2.0, 1.0, 1.0],
            ..AffineParams::identity()
        };
        let g = build_affine_grid(&scaled.matrix(), shape);
        // corner voxels: z = -0.75 and +0.75 on a 4-voxel axis
        assert_eq!(g.coords[0][0], -1.5);
        assert_eq!(g.coords[shape.len() - 1][0], 1.5);
    }

    #[test]
    fn elastic_zero_alpha_and_raw_bound() {
        let shape = Shape3::cube(6).unwrap();
        let mut rng = rng_from_seed(1);
        let zero = elastic_field(
            &ElasticParams {
                alpha: 0.0,
                ..DeformRanges::default().elastic
            },
            shape,
            &mut rng,
        )
        .unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let raw = elastic_field(
            &ElasticParams {
                window: 3,
                field_size: 6,
                alpha: 0.2,
                smooth_iters: 0,
            },
            shape,
            &mut rng,
        )
        .unwrap();
        assert!(raw.max_abs() <= 0.2);
        assert!(raw.max_abs() > 0.1);
    }

    #[test]
    fn smoothing_shrinks_variance_monotonically() {
        let shape = Shape3::cube(8).unwrap();
        let variance = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let mut prev = f64::INFINITY;
        for sn in 0..=20 {
            let params = ElasticParams {
                window: 3,
                field_size: 8,
                alpha: 1.0,
                smooth_iters: sn,
            };
            let field = elastic_field(&params, shape, &mut rng_from_seed(99)).unwrap();
            let var = variance(&field.dz);
            assert!(var < prev, "sn={sn}: {var} !< {prev}");
            prev = var;
        }
    }

    fn ramp(shape: Shape3) -> ScalarVolume {
        let data = (0..shape.len()).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        ScalarVolume::new(shape, Spacing3::unit(), data).unwrap()
    }

    fn labels(shape: Shape3) -> LabelVolume {
        let data = (0..shape.len()).map(|i| (1 + (i * 7) % 3) as u8).collect();
        LabelVolume::new(shape, Spacing3::unit(), 4, data).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let shape = Shape3::new(5, 6, 7).unwrap();
        let img = ramp(shape);
        let lbl = labels(shape);
        let (oi, ol) = deformable_transform(
            &img,
            Some(&lbl),
            &AffineParams::identity(),
            &ElasticParams::none(),
            &mut rng_from_seed(0),
        )
        .unwrap();
        assert_eq!(oi, img);
        assert_eq!(ol.unwrap(), lbl);
    }

    #[test]
    fn one_voxel_shift_along_w() {
        let shape = Shape3::new(3, 4, 8).unwrap();
        let img = ramp(shape);
        let lbl = labels(shape);
        // one voxel is 2/w in normalized units; sampling at x + 1 moves content left
        let affine = AffineParams {
            shift: [0.0, 0.0, 2.0 / 8.0],
            ..AffineParams::identity()
        };
        let (oi, ol) = deformable_transform(&img, Some(&lbl), &affine, &ElasticParams::none(), &mut rng_from_seed(0))
            .unwrap();
        let ol = ol.unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..8 {
                    let (ei, el) = if x + 1 < 8 {
                        (img.get(z, y, x + 1), lbl.get(z, y, x + 1))
                    } else {
                        (0.0, 0)
                    };
                    assert!((oi.get(z, y, x) - ei).abs() < 1e-12);
                    assert_eq!(ol.get(z, y, x), el);
                }
            }
        }
    }

    #[test]
    fn labels_never_gain_classes() {
        let shape = Shape3::cube(10).unwrap();
        let lbl = labels(shape);
        let img = ramp(shape);
        let mut rng = rng_from_seed(5);
        let ranges = DeformRanges {
            rotation_deg: 25.0,
            ..DeformRanges::default()
        };
        for _ in 0..5 {
            let a = ranges.sample_affine(&mut rng);
            let (_, out) = deformable_transform(&img, Some(&lbl), &a, &ranges.elastic, &mut rng).unwrap();
            assert!(out.unwrap().data().iter().all(|&v| v <= 3));
        }
    }

    #[test]
    fn range_validation() {
        DeformRanges::default().validate().unwrap();
        let bad = [
            DeformRanges { rotation_deg: 180.0, ..DeformRanges::default() },
            DeformRanges { scale: (1.1, 0.9), ..DeformRanges::default() },
            DeformRanges { scale: (0.0, 1.0), ..DeformRanges::default() },
            DeformRanges { shift: -0.1, ..DeformRanges::default() },
        ];
        for r in bad {
            assert!(r.validate().is_err(), "{r:?}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let shape = Shape3::cube(8).unwrap();
        let img = ramp(shape);
        let ranges = DeformRanges::default();
        let run = |seed| {
            let mut rng = rng_from_seed(seed);
            let a = ranges.sample_affine(&mut rng);
            deformable_transform(&img, None, &a, &ranges.elastic, &mut rng).unwrap().0
        };
        assert_eq!(run(3).data(), run(3).data());
        assert_ne!(run(3).data(), run(4).data());
    }

    #[test]
    fn rejects_mismatch_and_bad_params() {
        let img = ramp(Shape3::cube(4).unwrap());
        let lbl = labels(Shape3::cube(5).unwrap());
        let mut rng = rng_from_seed(0);
        assert!(deformable_transform(&img, Some(&lbl), &AffineParams::identity(), &ElasticParams::none(), &mut rng)
            .is_err());
        let bad = ElasticParams {
            window: 4,
            ..ElasticParams::none()
        };
        assert!(bad.validate().is_err());
    }
}
