use crate::error::{Error, Result};
use crate::volume::{ProbVolume, ScalarVolume, Shape3};

use super::params::{ParamBlock, ParamVector};

pub const FEATURE_COUNT: usize = 7;
const GRADIENT_GAIN: f64 = 4.0;

/// Per-voxel input features, stored as planes: intensity, 3^3 and 5^3 box
/// means, gradient magnitude and normalized z, y, x.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub shape: Shape3,
    pub planes: Vec<Vec<f64>>,
}

/// Box mean over the in-bounds part of a `(2r+1)^3` window.
fn box_mean(data: &[f64], shape: Shape3, r: usize) -> Vec<f64> {
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    let mut sums = data.to_vec();
    let mut counts = vec![1.0; data.len()];
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..sums.len() {
            let (z, y, x) = shape.coords(start);
            if [z, y, x][axis] != 0 {
                continue;
            }
            for target in [&mut sums, &mut counts] {
                line.clear();
                line.extend((0..n).map(|k| target[start + k * stride]));
                prefix.clear();
                prefix.push(0.0);
                let mut acc = 0.0;
                for v in &line {
                    acc += v;
                    prefix.push(acc);
                }
                for k in 0..n {
                    let lo = k.saturating_sub(r);
                    let hi = (k + r + 1).min(n);
                    target[start + k * stride] = prefix[hi] - prefix[lo];
                }
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, c)| s / c).collect()
}

fn gradient_magnitude(data: &[f64], shape: Shape3) -> Vec<f64> {
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    (0..data.len())
        .map(|i| {
            let (z, y, x) = shape.coords(i);
            let pos = [z, y, x];
            let mut g2 = 0.0;
            for a in 0..3 {
                let n = dims[a];
                if n == 1 {
                    continue;
                }
                let s = strides[a];
                let d = if pos[a] == 0 {
                    data[i + s] - data[i]
                } else if pos[a] + 1 == n {
                    data[i] - data[i - s]
                } else {
                    (data[i + s] - data[i - s]) / 2.0
                };
                g2 += d * d;
            }
            g2.sqrt()
        })
        .collect()
}

impl Features {
    pub fn compute(image: &ScalarVolume) -> Self {
        let shape = image.shape();
        let data = image.data();
        // intensities are centred from [0, 1] onto [-1, 1]
        let centre = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| 2.0 * x - 1.0).collect() };
        let mut planes = vec![
            centre(data.to_vec()),
            centre(box_mean(data, shape, 1)),
            centre(box_mean(data, shape, 2)),
            gradient_magnitude(data, shape).into_iter().map(|g| GRADIENT_GAIN * g).collect(),
        ];
        let dims = shape.dims();
        for axis in 0..3 {
            planes.push(
                (0..shape.len())
                    .map(|i| {
                        let (z, y, x) = shape.coords(i);
                        (2 * [z, y, x][axis] + 1) as f64 / dims[axis] as f64 - 1.0
                    })
                    .collect(),
            );
        }
        Self { shape, planes }
    }
}

/// Per-voxel softmax over a linear map of [`Features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segmenter {
    pub num_classes: usize,
}

impl Segmenter {
    pub fn new(num_classes: usize) -> Result<Self> {
        if !(2..=255).contains(&num_classes) {
            return Err(Error::InvalidClassCount(num_classes));
        }
        Ok(Self { num_classes })
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new("seg.weight", &[self.num_classes, FEATURE_COUNT]),
            ParamBlock::new("seg.bias", &[self.num_classes]),
        ]
    }

    pub fn init(&self) -> ParamVector {
        ParamVector::zeros(self.layout())
    }

    pub fn forward(&self, params: &ParamVector, feats: &Features, like: &ScalarVolume) -> Result<ProbVolume> {
        params.expect_layout(&self.layout())?;
        let c = self.num_classes;
        let w = params.block("seg.weight")?;
        let b = params.block("seg.bias")?;
        let n = feats.shape.len();
        let mut out = vec![0.0; n * c];
        let mut logits = vec![0.0; c];
        for v in 0..n {
            for k in 0..c {
                let row = &w[k * FEATURE_COUNT..(k + 1) * FEATURE_COUNT];
                logits[k] = b[k] + (0..FEATURE_COUNT).map(|f| row[f] * feats.planes[f][v]).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits[k] - m).exp();
                out[v * c + k] = e;
                z += e;
            }
            out[v * c..(v + 1) * c].iter_mut().for_each(|p| *p /= z);
        }
        ProbVolume::new(feats.shape, like.spacing(), c, out)
    }

    /// Parameter gradient given the loss gradient on the output probabilities.
    pub fn backward(&self, params: &ParamVector, feats: &Features, probs: &ProbVolume, upstream: &[f64]) -> Result<Vec<f64>> {
        params.expect_layout(&self.layout())?;
        let c = self.num_classes;
        let p = probs.data();
        if upstream.len() != p.len() {
            return Err(Error::VectorLengthMismatch(upstream.len(), p.len()));
        }
        let mut grad = vec![0.0; params.len()];
        let (gw, gb) = grad.split_at_mut(c * FEATURE_COUNT);
        let mut dz = vec![0.0; c];
        for v in 0..feats.shape.len() {
            let pv = &p[v * c..(v + 1) * c];
            let gv = &upstream[v * c..(v + 1) * c];
            let dot: f64 = pv.iter().zip(gv).map(|(a, b)| a * b).sum();
            for k in 0..c {
                dz[k] = pv[k] * (gv[k] - dot);
            }
            for k in 0..c {
                if dz[k] == 0.0 {
                    continue;
                }
                gb[k] += dz[k];
                let row = &mut gw[k * FEATURE_COUNT..(k + 1) * FEATURE_COUNT];
                for (f, slot) in row.iter_mut().enumerate() {
                    *slot += dz[k] * feats.planes[f][v];
                }
            }
        }
        Ok(grad)
    }
}

fn infer(params: &ParamVector) -> Result<Segmenter> {
    let c = params.block("seg.bias")?.len();
    let model = Segmenter::new(c)?;
    params.expect_layout(&model.layout())?;
    Ok(model)
}

pub fn seg_forward(params: &ParamVector, image: &ScalarVolume) -> Result<ProbVolume> {
    infer(params)?.forward(params, &Features::compute(image), image)
}

pub fn seg_backward(params: &ParamVector, image: &ScalarVolume, upstream: &[f64]) -> Result<Vec<f64>> {
    let model = infer(params)?;
    let feats = Features::compute(image);
    let probs = model.forward(params, &feats, image)?;
    model.backward(params, &feats, &probs, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::volume::Spacing3;
    use rand::Rng as _;

    fn image(shape: Shape3, seed: u64) -> ScalarVolume {
        let mut rng = rng_from_seed(seed);
        ScalarVolume::new(shape, Spacing3::unit(), (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn random_params(c: usize, seed: u64) -> ParamVector {
        let mut rng = rng_from_seed(seed);
        let layout = Segmenter::new(c).unwrap().layout();
        let n = layout.iter().map(ParamBlock::len).sum();
        ParamVector::new(layout, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform() {
        let img = image(Shape3::cube(3).unwrap(), 0);
        let p = seg_forward(&Segmenter::new(4).unwrap().init(), &img).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bias_selects_class() {
        let img = image(Shape3::cube(3).unwrap(), 1);
        let mut params = Segmenter::new(3).unwrap().init();
        params.block_mut("seg.bias").unwrap()[2] = 50.0;
        assert!(seg_forward(&params, &img).unwrap().argmax().data().iter().all(|&l| l == 2));
    }

    #[test]
    fn softmax_sums_to_one() {
        let img = image(Shape3::cube(4).unwrap(), 2);
        let p = seg_forward(&random_params(3, 3), &img).unwrap();
        for v in 0..64 {
            let s: f64 = p.voxel(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.voxel(v).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let shape = Shape3::new(3, 4, 5).unwrap();
        let m = box_mean(&vec![2.5; shape.len()], shape, 2);
        assert!(m.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let data: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        let m = box_mean(&data, shape, 1);
        // interior voxel (1, 1, 1) sees the full 3^3 window
        let centre = shape.index(1, 1, 1);
        let expect: f64 = (0..3)
            .flat_map(|z| (0..3).flat_map(move |y| (0..3).map(move |x| shape.index(z, y, x) as f64)))
            .sum::<f64>()
            / 27.0;
        assert!((m[centre] - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = Shape3::cube(4).unwrap();
        let img = image(shape, 4);
        let params = random_params(3, 5);
        let mut rng = rng_from_seed(6);
        let upstream: Vec<f64> = (0..shape.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &ParamVector| -> f64 {
            let probs = seg_forward(p, &img).unwrap();
            probs.data().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let grad = seg_backward(&params, &img, &upstream).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut v = params.values().to_vec();
            v[i] += h;
            let up = loss(&params.with_values(v.clone()).unwrap());
            v[i] -= 2.0 * h;
            let dn = loss(&params.with_values(v).unwrap());
            let num = (up - dn) / (2.0 * h);
            let scale = num.abs().max(grad[i].abs()).max(1e-6);
            assert!((num - grad[i]).abs() / scale < 1e-4, "param {i}: {num} vs {}", grad[i]);
        }
        let zero = seg_backward(&params, &img, &vec![0.0; upstream.len()]).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
        let doubled: Vec<f64> = upstream.iter().map(|g| 2.0 * g).collect();
        let g2 = seg_backward(&params, &img, &doubled).unwrap();
        for (a, b) in g2.iter().zip(&grad) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }
}
