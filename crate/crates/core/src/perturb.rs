//! CutMix structure perturbation.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{ScalarVolume, Shape3};

pub const DEFAULT_FRAC_RANGE: (f64, f64) = (0.1, 0.4);
const MAX_ATTEMPTS: usize = 100;
/// Per-axis aspect jitter applied around the cube edge for a target fraction.
const ASPECT_JITTER: (f64, f64) = (0.75, 1.0 / 0.75);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub corner: [usize; 3],
    pub size: [usize; 3],
}

impl BoxRegion {
    pub fn new(corner: [usize; 3], size: [usize; 3], shape: Shape3) -> Result<Self> {
        let dims = shape.dims();
        if (0..3).any(|a| corner[a] + size[a] > dims[a]) {
            return Err(Error::InvalidArgument(format!(
                "box {corner:?}+{size:?} exceeds shape {dims:?}"
            )));
        }
        Ok(Self { corner, size })
    }

    /// An empty box; cutmix with it is the identity.
    pub fn empty() -> Self {
        Self {
            corner: [0; 3],
            size: [0; 3],
        }
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }

    pub fn fraction(&self, shape: Shape3) -> f64 {
        self.voxels() as f64 / shape.len() as f64
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| p[a] >= self.corner[a] && p[a] < self.corner[a] + self.size[a])
    }
}

fn in_range(frac: f64, lo: f64, hi: f64) -> bool {
    frac >= lo - 1e-12 && frac <= hi + 1e-12
}

/// Draws a box whose volume fraction lies in `frac_range`.
///
/// Per-axis extents are drawn around the cube edge of a uniformly drawn
/// target fraction and rejected until the product lands in range. If that
/// fails, the cube sizes that fit are tried before giving up.
pub fn sample_box(shape: Shape3, frac_range: (f64, f64), rng: &mut Rng) -> Result<BoxRegion> {
    let (lo, hi) = frac_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!("fraction range ({lo}, {hi})")));
    }
    let dims = shape.dims();
    let total = shape.len() as f64;
    let mut size = None;
    for _ in 0..MAX_ATTEMPTS {
        let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let cand: [usize; 3] = std::array::from_fn(|a| {
            let jitter = rng.random_range(ASPECT_JITTER.0..=ASPECT_JITTER.1);
            let edge = (target.cbrt() * dims[a] as f64 * jitter).round() as usize;
            edge.clamp(1, dims[a])
        });
        if in_range(cand.iter().product::<usize>() as f64 / total, lo, hi) {
            size = Some(cand);
            break;
        }
    }
    if size.is_none() {
        // scaled copies of the volume shape, smallest first
        let m = *dims.iter().min().unwrap_or(&1);
        size = (1..=m)
            .map(|k| dims.map(|n| (n * k / m).max(1)))
            .find(|c| in_range(c.iter().product::<usize>() as f64 / total, lo, hi));
    }
    let size = size.ok_or(Error::InfeasibleBox { lo, hi, shape: dims })?;
    let corner = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
    BoxRegion::new(corner, size, shape)
}

/// Copies the donor's voxels inside `region` onto the recipient.
pub fn cutmix(recipient: &ScalarVolume, donor: &ScalarVolume, region: &BoxRegion) -> Result<ScalarVolume> {
    if recipient.shape() != donor.shape() {
        return Err(Error::ShapeMismatch(recipient.shape().dims(), donor.shape().dims()));
    }
    let shape = recipient.shape();
    BoxRegion::new(region.corner, region.size, shape)?;
    let mut out = recipient.data().to_vec();
    let [cz, cy, cx] = region.corner;
    let [sz, sy, sx] = region.size;
    for z in cz..cz + sz {
        for y in cy..cy + sy {
            let start = shape.index(z, y, cx);
            out[start..start + sx].copy_from_slice(&donor.data()[start..start + sx]);
        }
    }
    recipient.with_data(out)
}
