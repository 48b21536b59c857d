use std::sync::Mutex;

use rand::Rng as _;

use crate::diffusion::{ConditionEmbedder, ConditionedInput, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{LabelVolume, Shape3};

use super::params::{ParamBlock, ParamVector};

const TAPS: usize = 27;

/// Visits the valid part of every 3x3x3 offset. The callback receives the
/// tap index, the output start, the input start and the run length along w.
fn for_each_tap(shape: Shape3, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = shape.dims().map(|n| n as isize);
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let tap = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                let (x0, x1) = ((-dx).max(0), (w - dx).min(w));
                if x1 <= x0 {
                    continue;
                }
                for z in (-dz).max(0)..(d - dz).min(d) {
                    for y in (-dy).max(0)..(h - dy).min(h) {
                        let out = ((z * h + y) * w + x0) as usize;
                        let inp = (((z + dz) * h + (y + dy)) * w + x0 + dx) as usize;
                        f(tap, out, inp, (x1 - x0) as usize);
                    }
                }
            }
        }
    }
}

/// `out[v] += sum_o k[o] * input[v + o]`, zero padded.
fn conv_add(input: &[f64], kernel: &[f64], shape: Shape3, out: &mut [f64]) {
    for_each_tap(shape, |tap, o, i, n| {
        let k = kernel[tap];
        if k == 0.0 {
            return;
        }
        for (dst, src) in out[o..o + n].iter_mut().zip(&input[i..i + n]) {
            *dst += k * src;
        }
    });
}

/// Adjoint of [`conv_add`] w.r.t. its input.
fn conv_adjoint_add(upstream: &[f64], kernel: &[f64], shape: Shape3, out: &mut [f64]) {
    for_each_tap(shape, |tap, o, i, n| {
        let k = kernel[tap];
        if k == 0.0 {
            return;
        }
        for (dst, src) in out[i..i + n].iter_mut().zip(&upstream[o..o + n]) {
            *dst += k * src;
        }
    });
}

/// Kernel gradient of [`conv_add`].
fn conv_kernel_grad(input: &[f64], upstream: &[f64], shape: Shape3, grad: &mut [f64]) {
    for_each_tap(shape, |tap, o, i, n| {
        grad[tap] += upstream[o..o + n].iter().zip(&input[i..i + n]).map(|(a, b)| a * b).sum::<f64>();
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub num_classes: usize,
    pub embed_channels: usize,
    pub hidden: usize,
}

impl DenoiserSpec {
    pub fn new(num_classes: usize, embed_channels: usize, hidden: usize) -> Result<Self> {
        if !(2..=255).contains(&num_classes) || embed_channels == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("denoiser needs C >= 2, E >= 1, K >= 1".into()));
        }
        Ok(Self {
            num_classes,
            embed_channels,
            hidden,
        })
    }

    /// Image, embedding and timestep channels.
    pub fn in_channels(&self) -> usize {
        self.embed_channels + 2
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let (c, e, k) = (self.num_classes, self.embed_channels, self.hidden);
        vec![
            ParamBlock::new("embed.weight", &[e, c]),
            ParamBlock::new("embed.bias", &[e]),
            ParamBlock::new("conv1.weight", &[k, self.in_channels(), TAPS]),
            ParamBlock::new("conv1.bias", &[k]),
            ParamBlock::new("conv2.weight", &[1, k, TAPS]),
            ParamBlock::new("conv2.bias", &[1]),
        ]
    }

    /// Uniform fan-in scaled initialisation; the output layer starts small.
    pub fn init(&self, rng: &mut Rng) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        let fill = |slot: &mut [f64], bound: f64, rng: &mut Rng| {
            slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        };
        fill(p.block_mut("embed.weight").expect("layout"), 1.0, rng);
        let b1 = (1.0 / (self.in_channels() * TAPS) as f64).sqrt();
        fill(p.block_mut("conv1.weight").expect("layout"), b1, rng);
        let b2 = 0.1 * (1.0 / (self.hidden * TAPS) as f64).sqrt();
        fill(p.block_mut("conv2.weight").expect("layout"), b2, rng);
        p
    }

    pub fn embedder(&self, params: &ParamVector) -> Result<ConditionEmbedder> {
        params.expect_layout(&self.layout())?;
        ConditionEmbedder::new(
            self.num_classes,
            self.embed_channels,
            params.block("embed.weight")?.to_vec(),
            params.block("embed.bias")?.to_vec(),
        )
    }

    fn check_input(&self, input: &ConditionedInput) -> Result<()> {
        if input.embedding.len() != self.embed_channels {
            return Err(Error::InvalidArgument(format!(
                "expected {} embedding channels, got {}",
                self.embed_channels,
                input.embedding.len()
            )));
        }
        let n = input.shape.len();
        if input.x.len() != n || input.embedding.iter().any(|e| e.len() != n) {
            return Err(Error::VectorLengthMismatch(input.x.len(), n));
        }
        Ok(())
    }

    fn channels<'a>(&self, input: &'a ConditionedInput, t_plane: &'a [f64]) -> Vec<&'a [f64]> {
        let mut ch: Vec<&[f64]> = (0..input.channel_count()).map(|k| input.channel(k)).collect();
        ch.push(t_plane);
        ch
    }

    /// Forward pass keeping the hidden pre-activations for backward.
    pub fn forward_tape(&self, params: &ParamVector, input: &ConditionedInput, t_frac: f64) -> Result<Tape> {
        params.expect_layout(&self.layout())?;
        self.check_input(input)?;
        let shape = input.shape;
        let n = shape.len();
        let w1 = params.block("conv1.weight")?;
        let b1 = params.block("conv1.bias")?;
        let t_plane = vec![t_frac; n];
        let channels = self.channels(input, &t_plane);
        let cin = self.in_channels();
        let mut pre = Vec::with_capacity(self.hidden);
        for k in 0..self.hidden {
            let mut acc = vec![b1[k]; n];
            for (c, ch) in channels.iter().enumerate() {
                conv_add(ch, &w1[(k * cin + c) * TAPS..(k * cin + c + 1) * TAPS], shape, &mut acc);
            }
            pre.push(acc);
        }
        let output = self.head(params, &pre, shape)?;
        Ok(Tape {
            shape,
            t_frac,
            pre,
            output,
        })
    }

    fn head(&self, params: &ParamVector, pre: &[Vec<f64>], shape: Shape3) -> Result<Vec<f64>> {
        let w2 = params.block("conv2.weight")?;
        let b2 = params.block("conv2.bias")?[0];
        let mut out = vec![b2; shape.len()];
        let mut hidden = vec![0.0; shape.len()];
        for (k, p) in pre.iter().enumerate() {
            hidden.iter_mut().zip(p).for_each(|(h, v)| *h = v.max(0.0));
            conv_add(&hidden, &w2[k * TAPS..(k + 1) * TAPS], shape, &mut out);
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamVector, input: &ConditionedInput, t_frac: f64) -> Result<Vec<f64>> {
        Ok(self.forward_tape(params, input, t_frac)?.output)
    }

    /// Gradient of `sum(upstream * output)` w.r.t. the convolution weights
    /// and, through the embedding channels, the embedder. `labels` are the
    /// classes that produced the embedding.
    pub fn backward(
        &self,
        params: &ParamVector,
        input: &ConditionedInput,
        labels: &LabelVolume,
        tape: &Tape,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let shape = tape.shape;
        let n = shape.len();
        if upstream.len() != n {
            return Err(Error::VectorLengthMismatch(upstream.len(), n));
        }
        if labels.shape() != shape || labels.num_classes() != self.num_classes {
            return Err(Error::ShapeMismatch(labels.shape().dims(), shape.dims()));
        }
        let cin = self.in_channels();
        let w1 = params.block("conv1.weight")?;
        let w2 = params.block("conv2.weight")?;
        let mut grad = ParamVector::zeros(self.layout());

        grad.block_mut("conv2.bias")?[0] = upstream.iter().sum();
        let mut hidden = vec![0.0; n];
        let mut dpre = vec![vec![0.0; n]; self.hidden];
        {
            let gw2 = grad.block_mut("conv2.weight")?;
            for k in 0..self.hidden {
                hidden.iter_mut().zip(&tape.pre[k]).for_each(|(h, v)| *h = v.max(0.0));
                conv_kernel_grad(&hidden, upstream, shape, &mut gw2[k * TAPS..(k + 1) * TAPS]);
                conv_adjoint_add(upstream, &w2[k * TAPS..(k + 1) * TAPS], shape, &mut dpre[k]);
                dpre[k].iter_mut().zip(&tape.pre[k]).for_each(|(d, p)| {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }
        let t_plane = vec![tape.t_frac; n];
        let channels = self.channels(input, &t_plane);
        let mut d_embed = vec![vec![0.0; n]; self.embed_channels];
        {
            let gw1 = grad.block_mut("conv1.weight")?;
            for k in 0..self.hidden {
                for (c, ch) in channels.iter().enumerate() {
                    let r = (k * cin + c) * TAPS..(k * cin + c + 1) * TAPS;
                    conv_kernel_grad(ch, &dpre[k], shape, &mut gw1[r.clone()]);
                    if (1..=self.embed_channels).contains(&c) {
                        conv_adjoint_add(&dpre[k], &w1[r], shape, &mut d_embed[c - 1]);
                    }
                }
            }
        }
        {
            let gb1 = grad.block_mut("conv1.bias")?;
            for k in 0..self.hidden {
                gb1[k] = dpre[k].iter().sum();
            }
        }
        let c = self.num_classes;
        let mut gwe = vec![0.0; self.embed_channels * c];
        let mut gbe = vec![0.0; self.embed_channels];
        for (e, plane) in d_embed.iter().enumerate() {
            for (v, &g) in plane.iter().enumerate() {
                gwe[e * c + labels.data()[v] as usize] += g;
                gbe[e] += g;
            }
        }
        grad.block_mut("embed.weight")?.copy_from_slice(&gwe);
        grad.block_mut("embed.bias")?.copy_from_slice(&gbe);
        Ok(grad.values().to_vec())
    }
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub shape: Shape3,
    pub t_frac: f64,
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

struct ConstantTerms {
    embedding: Vec<Vec<f64>>,
    /// Bias plus the embedding contribution, per hidden unit.
    pre: Vec<Vec<f64>>,
}

/// Trained convolutional noise predictor used for sampling.
///
/// The first layer is linear, so the contribution of the embedding channels
/// is fixed for a whole reverse chain and the timestep channel only scales
/// a fixed response. Both are cached; each step convolves the image channel
/// alone.
pub struct ConvDenoiser {
    spec: DenoiserSpec,
    params: ParamVector,
    constant: Mutex<Option<ConstantTerms>>,
    ones: Mutex<Option<(Shape3, Vec<Vec<f64>>)>>,
}

impl ConvDenoiser {
    pub fn new(spec: DenoiserSpec, params: ParamVector) -> Result<Self> {
        params.expect_layout(&spec.layout())?;
        Ok(Self {
            spec,
            params,
            constant: Mutex::new(None),
            ones: Mutex::new(None),
        })
    }

    pub fn spec(&self) -> DenoiserSpec {
        self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn embedder(&self) -> Result<ConditionEmbedder> {
        self.spec.embedder(&self.params)
    }

    fn w1(&self, k: usize, c: usize) -> &[f64] {
        let cin = self.spec.in_channels();
        let w = self.params.block("conv1.weight").expect("layout checked");
        &w[(k * cin + c) * TAPS..(k * cin + c + 1) * TAPS]
    }

    fn constant_terms(&self, input: &ConditionedInput) -> Vec<Vec<f64>> {
        let mut guard = self.constant.lock().expect("cache lock");
        if let Some(c) = guard.as_ref() {
            if c.embedding == input.embedding {
                return c.pre.clone();
            }
        }
        let b1 = self.params.block("conv1.bias").expect("layout checked");
        let n = input.shape.len();
        let pre: Vec<Vec<f64>> = (0..self.spec.hidden)
            .map(|k| {
                let mut acc = vec![b1[k]; n];
                for (e, plane) in input.embedding.iter().enumerate() {
                    conv_add(plane, self.w1(k, e + 1), input.shape, &mut acc);
                }
                acc
            })
            .collect();
        *guard = Some(ConstantTerms {
            embedding: input.embedding.clone(),
            pre: pre.clone(),
        });
        pre
    }

    fn ones_response(&self, shape: Shape3) -> Vec<Vec<f64>> {
        let mut guard = self.ones.lock().expect("cache lock");
        if let Some((s, r)) = guard.as_ref() {
            if *s == shape {
                return r.clone();
            }
        }
        let ones = vec![1.0; shape.len()];
        let tc = self.spec.in_channels() - 1;
        let r: Vec<Vec<f64>> = (0..self.spec.hidden)
            .map(|k| {
                let mut acc = vec![0.0; shape.len()];
                conv_add(&ones, self.w1(k, tc), shape, &mut acc);
                acc
            })
            .collect();
        *guard = Some((shape, r.clone()));
        r
    }
}

impl Denoiser for ConvDenoiser {
    fn predict(&self, input: &ConditionedInput, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.spec.check_input(input)?;
        sched.alpha(t)?;
        let t_frac = t as f64 / sched.steps() as f64;
        let mut pre = self.constant_terms(input);
        let ones = self.ones_response(input.shape);
        for (k, acc) in pre.iter_mut().enumerate() {
            acc.iter_mut().zip(&ones[k]).for_each(|(a, o)| *a += t_frac * o);
            conv_add(&input.x, self.w1(k, 0), input.shape, acc);
        }
        self.spec.head(&self.params, &pre, input.shape)
    }
}
