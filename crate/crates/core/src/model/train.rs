use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::deform::DeformRanges;
use crate::diffusion::{embed_condition, mae, q_sample, to_model_range, train_pair_assemble, Domain, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{dice_loss, ema_blend, l_all, l_asc, l_seg, LossOut, TrainWeights};
use crate::perturb::{cutmix, sample_box, BoxRegion, DEFAULT_FRAC_RANGE};
use crate::pseudolabel::ensemble_window;
use crate::rng::Rng;
use crate::spectral::{amplitude_swap, histogram_distance, BetaRule};
use crate::volume::{LabelVolume, ProbVolume, ScalarVolume, Shape3};

use super::denoiser::DenoiserSpec;
use super::params::ParamVector;
use super::segmenter::{Features, Segmenter};

/// Switches for the individual training signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscFlags {
    /// Supervise the style-transferred source view.
    pub sft_seg: bool,
    /// Consistency of the perturbed target view against the teacher on the
    /// transferred target view.
    pub app_target: bool,
    /// Consistency of the perturbed transferred target view against the
    /// teacher on the plain target view.
    pub app_transferred: bool,
    /// CutMix structure perturbation of the student views.
    pub structure: bool,
    /// Histogram-driven swap ratio; otherwise `fixed_beta`.
    pub adaptive_beta: bool,
    pub fixed_beta: f64,
}

impl Default for AscFlags {
    fn default() -> Self {
        Self {
            sft_seg: true,
            app_target: true,
            app_transferred: true,
            structure: true,
            adaptive_beta: true,
            fixed_beta: 0.1,
        }
    }
}

impl AscFlags {
    /// Plain supervised Dice training.
    pub fn supervised() -> Self {
        Self {
            sft_seg: false,
            app_target: false,
            app_transferred: false,
            structure: false,
            ..Self::default()
        }
    }

    fn uses_target(&self) -> bool {
        self.sft_seg || self.app_target || self.app_transferred
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscConfig {
    pub epochs: usize,
    pub lr: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub frac_range: (f64, f64),
    pub hist_bins: usize,
    pub beta: BetaRule,
    pub weights: TrainWeights,
    pub flags: AscFlags,
}

impl Default for AscConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 5.0,
            source_batch: 2,
            target_batch: 2,
            frac_range: DEFAULT_FRAC_RANGE,
            hist_bins: 32,
            beta: BetaRule::default(),
            weights: TrainWeights::default(),
            flags: AscFlags::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscOutcome {
    pub student: ParamVector,
    pub teacher: ParamVector,
    /// Mean total loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Student predictions on each watched image averaged over `window`.
    pub ensembled: Vec<ProbVolume>,
    /// Student predictions on each watched image after the last epoch.
    pub last: Vec<ProbVolume>,
    pub window: Vec<usize>,
}

struct View {
    image: ScalarVolume,
    feats: Features,
}

impl View {
    fn new(image: ScalarVolume) -> Self {
        let feats = Features::compute(&image);
        Self { image, feats }
    }
}

/// Drops the consistency halves switched off by `flags`.
fn mask_terms(
    asc: LossOut,
    f_xt_sp: &ProbVolume,
    ft_xtfs: &ProbVolume,
    f_xtfs_sp: &ProbVolume,
    ft_xt: &ProbVolume,
    flags: AscFlags,
) -> LossOut {
    if flags.app_target && flags.app_transferred {
        return asc;
    }
    let n = f_xt_sp.data().len();
    let half = |s: &ProbVolume, t: &ProbVolume| -> f64 {
        s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
    };
    let mut value = 0.0;
    let mut grads = asc.grads;
    if flags.app_target {
        value += half(f_xt_sp, ft_xtfs);
    } else {
        grads[0] = vec![0.0; n];
    }
    if flags.app_transferred {
        value += half(f_xtfs_sp, ft_xt);
    } else {
        grads[1] = vec![0.0; n];
    }
    LossOut { value, grads }
}

fn accumulate(total: &mut [f64], g: &[f64], k: f64) {
    total.iter_mut().zip(g).for_each(|(t, v)| *t += k * v);
}

/// Teacher-student training with appearance and structure consistency.
///
/// Each step takes a batch of labelled source images and unlabelled target
/// images. Pair `i` swaps low-frequency amplitudes between source `i` and
/// target `i`; the CutMix donor is the next target image in the batch.
/// Student predictions on `watch` are recorded over the ensembling window.
pub fn train_asc(
    model: &Segmenter,
    init: &ParamVector,
    source: &[(ScalarVolume, LabelVolume)],
    target: &[ScalarVolume],
    watch: &[ScalarVolume],
    cfg: &AscConfig,
    rng: &mut Rng,
) -> Result<AscOutcome> {
    if source.is_empty() {
        return Err(Error::Empty("source set"));
    }
    if cfg.epochs == 0 || cfg.source_batch == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    init.expect_layout(&model.layout())?;
    let flags = cfg.flags;
    let use_target = flags.uses_target() && !target.is_empty();
    let consistency = use_target && (flags.app_target || flags.app_transferred) && cfg.weights.lambda > 0.0;

    let source_views: Vec<View> = source.iter().map(|(img, _)| View::new(img.clone())).collect();
    let target_views: Vec<View> = target.iter().map(|img| View::new(img.clone())).collect();
    let watch_feats: Vec<Features> = watch.iter().map(Features::compute).collect();

    let mut student = init.clone();
    let mut teacher = init.clone();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let window = ensemble_window(cfg.epochs);
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); watch.len()];
    let mut last = Vec::new();

    let steps = source.len().div_ceil(cfg.source_batch);
    let mut s_order: Vec<usize> = (0..source.len()).collect();
    let mut t_order: Vec<usize> = (0..target.len()).collect();
    let mut t_cursor = 0;
    for epoch in 0..cfg.epochs {
        s_order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let batch: Vec<usize> = (0..cfg.source_batch)
                .map(|k| s_order[(step * cfg.source_batch + k) % source.len()])
                .collect();
            let t_batch: Vec<usize> = if use_target {
                (0..cfg.target_batch.max(1))
                    .map(|_| {
                        if t_cursor == 0 {
                            t_order.shuffle(rng);
                        }
                        let i = t_order[t_cursor];
                        t_cursor = (t_cursor + 1) % t_order.len();
                        i
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let mut grad = vec![0.0; student.len()];
            let mut step_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for (i, &si) in batch.iter().enumerate() {
                let (_, y_s) = &source[si];
                let xs = &source_views[si];
                let p_s = model.forward(&student, &xs.feats, &xs.image)?;
                if !use_target {
                    let seg = dice_loss(&p_s, y_s)?;
                    step_loss += seg.value;
                    accumulate(&mut grad, &model.backward(&student, &xs.feats, &p_s, &seg.grads[0])?, scale);
                    continue;
                }
                let ti = t_batch[i % t_batch.len()];
                let xt = &target_views[ti];
                let beta = if flags.adaptive_beta {
                    let alpha = rng.random_range(cfg.beta.alpha_range.0..=cfg.beta.alpha_range.1);
                    cfg.beta.beta(histogram_distance(&xs.image, &xt.image, cfg.hist_bins)?, alpha)?
                } else {
                    flags.fixed_beta
                };
                // differentiated inputs in gradient order, paired with the
                // view that produced them
                let mut views: Vec<(Cow<'_, Features>, ProbVolume)> = Vec::new();
                let seg = if flags.sft_seg {
                    let x_sft = View::new(amplitude_swap(&xs.image, &xt.image, beta)?);
                    let p_sft = model.forward(&student, &x_sft.feats, &x_sft.image)?;
                    let seg = l_seg(&p_s, &p_sft, y_s)?;
                    views.push((Cow::Borrowed(&xs.feats), p_s));
                    views.push((Cow::Owned(x_sft.feats), p_sft));
                    seg
                } else {
                    let seg = dice_loss(&p_s, y_s)?;
                    views.push((Cow::Borrowed(&xs.feats), p_s));
                    seg
                };
                let asc = if consistency {
                    let x_tfs = View::new(amplitude_swap(&xt.image, &xs.image, beta)?);
                    let donor = &target_views[t_batch[(i + 1) % t_batch.len()]].image;
                    let region = if flags.structure {
                        sample_box(xt.image.shape(), cfg.frac_range, rng)?
                    } else {
                        BoxRegion::empty()
                    };
                    let ft_xt = model.forward(&teacher, &xt.feats, &xt.image)?;
                    let ft_xtfs = model.forward(&teacher, &x_tfs.feats, &x_tfs.image)?;
                    let xt_sp = View::new(cutmix(&xt.image, donor, &region)?);
                    let xtfs_sp = View::new(cutmix(&x_tfs.image, donor, &region)?);
                    let f_xt_sp = model.forward(&student, &xt_sp.feats, &xt_sp.image)?;
                    let f_xtfs_sp = model.forward(&student, &xtfs_sp.feats, &xtfs_sp.image)?;
                    let asc = l_asc(&f_xt_sp, &f_xtfs_sp, &ft_xt, &ft_xtfs)?;
                    let asc = mask_terms(asc, &f_xt_sp, &ft_xtfs, &f_xtfs_sp, &ft_xt, flags);
                    views.push((Cow::Owned(xt_sp.feats), f_xt_sp));
                    views.push((Cow::Owned(xtfs_sp.feats), f_xtfs_sp));
                    asc
                } else {
                    LossOut {
                        value: 0.0,
                        grads: Vec::new(),
                    }
                };
                let total = l_all(&seg, &asc, cfg.weights);
                step_loss += total.value;
                for ((feats, pred), g) in views.iter().zip(&total.grads) {
                    accumulate(&mut grad, &model.backward(&student, feats, pred, g)?, scale);
                }
            }
            student.descend(&grad, cfg.lr)?;
            teacher = teacher.with_values(ema_blend(teacher.values(), student.values(), cfg.weights.gamma)?)?;
            epoch_loss += step_loss * scale;
        }
        loss_curve.push(epoch_loss / steps as f64);
        if window.contains(&epoch) || epoch + 1 == cfg.epochs {
            let preds: Vec<ProbVolume> = watch_feats
                .iter()
                .zip(watch)
                .map(|(f, img)| model.forward(&student, f, img))
                .collect::<Result<_>>()?;
            if window.contains(&epoch) {
                for (s, p) in sums.iter_mut().zip(&preds) {
                    if s.is_empty() {
                        s.resize(p.data().len(), 0.0);
                    }
                    accumulate(s, p.data(), 1.0);
                }
            }
            if epoch + 1 == cfg.epochs {
                last = preds;
            }
        }
    }
    let k = window.len() as f64;
    let ensembled = sums
        .into_iter()
        .zip(&last)
        .map(|(s, p)| ProbVolume::new(p.shape(), p.spacing(), p.num_classes(), s.iter().map(|v| v / k).collect()))
        .collect::<Result<_>>()?;
    Ok(AscOutcome {
        student,
        teacher,
        loss_curve,
        ensembled,
        last,
        window,
    })
}

/// Student predictions for a list of images.
pub fn predict_all(model: &Segmenter, params: &ParamVector, images: &[ScalarVolume]) -> Result<Vec<ProbVolume>> {
    images
        .iter()
        .map(|img| model.forward(params, &Features::compute(img), img))
        .collect()
}

/// Image, label and domain of one denoiser training pair. Images are in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DenoiserPair {
    pub image: ScalarVolume,
    pub label: LabelVolume,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub accumulate: usize,
    pub ema: f64,
    /// Random cubic crop edge used for each step; `None` trains on whole volumes.
    pub crop: Option<usize>,
    pub deform: DeformRanges,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 0.03,
            accumulate: 2,
            ema: 0.995,
            crop: Some(12),
            deform: DeformRanges::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutcome {
    /// Exponential moving average of the trained weights, used for sampling.
    pub ema: ParamVector,
    pub last: ParamVector,
    /// Loss of every optimisation step, averaged over its accumulated draws.
    pub loss_curve: Vec<f64>,
}

fn crop_pair(image: &ScalarVolume, label: &LabelVolume, edge: usize, rng: &mut Rng) -> Result<(ScalarVolume, LabelVolume)> {
    let shape = image.shape();
    let dims = shape.dims();
    let size = dims.map(|n| n.min(edge));
    if size == dims {
        return Ok((image.clone(), label.clone()));
    }
    let corner: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
    let out_shape = Shape3::new(size[0], size[1], size[2])?;
    let mut img = Vec::with_capacity(out_shape.len());
    let mut lbl = Vec::with_capacity(out_shape.len());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = shape.index(corner[0] + z, corner[1] + y, corner[2]);
            img.extend_from_slice(&image.data()[start..start + size[2]]);
            lbl.extend_from_slice(&label.data()[start..start + size[2]]);
        }
    }
    Ok((
        ScalarVolume::new(out_shape, image.spacing(), img)?,
        LabelVolume::new(out_shape, label.spacing(), label.num_classes(), lbl)?,
    ))
}

/// One noisy draw: returns the loss and, when asked, the parameter gradient.
fn denoiser_draw(
    spec: &DenoiserSpec,
    params: &ParamVector,
    x0: &ScalarVolume,
    label: &LabelVolume,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    with_grad: bool,
) -> Result<(LossOut, Option<Vec<f64>>)> {
    let t = rng.random_range(1..=sched.steps());
    let eps_data: Vec<f64> = (0..x0.shape().len()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = x0.with_data(eps_data)?;
    let x_t = q_sample(x0, t, &eps, sched)?;
    let input = embed_condition(&x_t, label, &spec.embedder(params)?)?;
    let t_frac = t as f64 / sched.steps() as f64;
    let tape = spec.forward_tape(params, &input, t_frac)?;
    let loss = mae(eps.data(), &tape.output)?;
    let grad = if with_grad {
        Some(spec.backward(params, &input, label, &tape, &loss.grads[0])?)
    } else {
        None
    };
    Ok((loss, grad))
}

/// SGD on the L1 noise-prediction loss with uniformly drawn timesteps.
pub fn train_denoiser(
    spec: &DenoiserSpec,
    init: &ParamVector,
    pairs: &[DenoiserPair],
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut Rng,
) -> Result<DenoiserOutcome> {
    if pairs.is_empty() {
        return Err(Error::Empty("denoiser training pairs"));
    }
    if cfg.accumulate == 0 {
        return Err(Error::InvalidArgument("accumulation count must be positive".into()));
    }
    init.expect_layout(&spec.layout())?;
    let mut params = init.clone();
    let mut ema = init.clone();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.accumulate {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let (img, lbl) = train_pair_assemble(&pair.image, &pair.label, pair.domain, &cfg.deform, rng)?;
            let (img, lbl) = match cfg.crop {
                Some(edge) => crop_pair(&img, &lbl, edge, rng)?,
                None => (img, lbl),
            };
            let x0 = to_model_range(&img);
            let (l, g) = denoiser_draw(spec, &params, &x0, &lbl, sched, rng, true)?;
            loss += l.value;
            accumulate(&mut grad, &g.expect("requested"), 1.0 / cfg.accumulate as f64);
        }
        params.descend(&grad, cfg.lr)?;
        ema = ema.with_values(ema_blend(ema.values(), params.values(), cfg.ema)?)?;
        loss_curve.push(loss / cfg.accumulate as f64);
    }
    Ok(DenoiserOutcome {
        ema,
        last: params,
        loss_curve,
    })
}

/// Mean L1 noise-prediction loss over `draws` random timesteps per pair,
/// without deformation or cropping.
pub fn denoiser_loss(
    spec: &DenoiserSpec,
    params: &ParamVector,
    pairs: &[DenoiserPair],
    sched: &NoiseSchedule,
    draws: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if pairs.is_empty() || draws == 0 {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut total = 0.0;
    for pair in pairs {
        let x0 = to_model_range(&pair.image);
        for _ in 0..draws {
            total += denoiser_draw(spec, params, &x0, &pair.label, sched, rng, false)?.0.value;
        }
    }
    Ok(total / (pairs.len() * draws) as f64)
}
