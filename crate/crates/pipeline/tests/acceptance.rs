//! Acceptance suite. Every test prints one `PASS`/`FAIL` line and fails on
//! `FAIL`. Tests share a lock so that wall-clock budgets are measured
//! without contention.

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng as _;
use uvforge::config::{Dims, RunConfig};
use uvforge::dataset;
use uvforge::evaluate::Variant;
use uvforge::experiment::{variants, Axis, Experiment};
use uvforge::generate::GenSettings;
use uvforge_core::deform::{angle_axis_to_rotation, deformable_transform, AffineParams, ElasticParams};
use uvforge_core::diffusion::{
    cosine_schedule, embed_condition, mae, p_step_scalar, q_sample, sample_loop, standard_normal,
    AnalyticGaussianDenoiser, ConditionEmbedder,
};
use uvforge_core::losses::{dice_loss, l_app_con, l_asc, l_seg, paired_mse, soft_dice};
use uvforge_core::metrics::{asd, dsc, nsd};
use uvforge_core::model::{seg_backward, seg_forward, DenoiserSpec, ParamVector, Segmenter};
use uvforge_core::perturb::{cutmix, sample_box};
use uvforge_core::rng::{rng_from_seed, Rng};
use uvforge_core::spectral::{adaptive_beta, amplitude_swap, decompose, reconstruct, BetaRule};
use uvforge_core::{LabelVolume, ProbVolume, ScalarVolume, Shape3, Spacing3};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Collects named sub-checks and reports them as one criterion.
struct Criterion {
    name: &'static str,
    budget: Duration,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(name: &'static str, budget_secs: u64) -> Self {
        Self {
            name,
            budget: Duration::from_secs(budget_secs),
            start: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn finish(self, elapsed: Duration) {
        let mut failures = self.failures;
        if elapsed > self.budget {
            failures.push(format!("took {:.0}s, budget {}s", elapsed.as_secs_f64(), self.budget.as_secs()));
        }
        let status = if failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = self.notes.join("; ");
        if !failures.is_empty() {
            detail = format!("{detail}; failed: {}", failures.join(" | "));
        }
        println!(
            "{status} {} ({:.1}s / {}s) {detail}",
            self.name,
            elapsed.as_secs_f64(),
            self.budget.as_secs()
        );
        assert!(failures.is_empty(), "{} failed: {}", self.name, failures.join(" | "));
    }

    fn finish_timed(self) {
        let elapsed = self.start.elapsed();
        self.finish(elapsed);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_volume(shape: Shape3, rng: &mut Rng) -> ScalarVolume {
    let data = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    ScalarVolume::new(shape, Spacing3::unit(), data).unwrap()
}

fn random_labels(shape: Shape3, classes: usize, rng: &mut Rng) -> LabelVolume {
    let data = (0..shape.len()).map(|_| rng.random_range(0..classes as u8)).collect();
    LabelVolume::new(shape, Spacing3::unit(), classes, data).unwrap()
}

fn random_probs(shape: Shape3, classes: usize, rng: &mut Rng) -> ProbVolume {
    let mut data = Vec::with_capacity(shape.len() * classes);
    for _ in 0..shape.len() {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbVolume::new(shape, Spacing3::unit(), classes, data).unwrap()
}

/// Largest relative disagreement between `grad` and central differences of `f`.
fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let h = 1e-5;
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        let num = (up - dn) / (2.0 * h);
        let scale = num.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((num - grad[i]).abs() / scale);
    }
    worst
}

fn params_like(p: &ParamVector, data: &[f64]) -> ParamVector {
    p.with_values(data.to_vec()).unwrap()
}

#[test]
fn criterion_1_numerical_kernels() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 1: numerical kernels", 120);
    let mut rng = rng_from_seed(101);

    let mut fft = 0.0f64;
    let mut self_swap = 0.0f64;
    let mut full_swap = 0.0f64;
    for dims in [(8, 8, 8), (7, 9, 10), (5, 6, 3), (16, 12, 4)] {
        let shape = Shape3::new(dims.0, dims.1, dims.2).unwrap();
        let v = random_volume(shape, &mut rng);
        let style = random_volume(shape, &mut rng);
        fft = fft.max(max_abs_diff(reconstruct(&decompose(&v), &v).unwrap().data(), v.data()));
        for beta in [0.1, 0.33, 0.5, 1.0] {
            self_swap = self_swap.max(max_abs_diff(amplitude_swap(&v, &v, beta).unwrap().data(), v.data()));
        }
        // with the whole spectrum swapped the output carries the style amplitude
        let out = amplitude_swap(&v, &style, 1.0).unwrap();
        full_swap = full_swap.max(max_abs_diff(&decompose(&out).amplitude, &decompose(&style).amplitude));
    }
    c.check(fft < 1e-9, format!("FFT round trip {fft:e}"));
    c.check(self_swap < 1e-9, format!("self swap {self_swap:e}"));
    c.check(full_swap < 1e-9, format!("full swap amplitude {full_swap:e}"));
    c.note(format!("fft {fft:.1e}, self swap {self_swap:.1e}, full swap {full_swap:.1e}"));

    let rule = BetaRule::default();
    let shape = Shape3::cube(6).unwrap();
    let mut clamp_ok = true;
    for _ in 0..20 {
        let a = random_volume(shape, &mut rng);
        let b = random_volume(shape, &mut rng);
        let beta = adaptive_beta(&a, &b, 32, rng.random_range(0.5..1.5)).unwrap();
        clamp_ok &= (rule.clamp.0..=rule.clamp.1).contains(&beta);
        clamp_ok &= adaptive_beta(&a, &a, 32, 1.0).unwrap() == rule.clamp.0;
    }
    let zeros = ScalarVolume::zeros(shape, Spacing3::unit());
    let ones = ScalarVolume::filled(shape, Spacing3::unit(), 1.0);
    clamp_ok &= adaptive_beta(&zeros, &ones, 32, 1.5).unwrap() == rule.clamp.1;
    let mut monotone = true;
    for alpha in [0.5, 1.0, 1.5] {
        let betas: Vec<f64> = (0..=300).map(|k| rule.beta(k as f64 * 0.005, alpha).unwrap()).collect();
        monotone &= betas.windows(2).all(|w| w[1] >= w[0]);
    }
    for d in [0.0, 0.3, 0.9, 1.4] {
        let by_alpha: Vec<f64> = [0.5, 0.9, 1.2, 1.5].iter().map(|&a| rule.beta(d, a).unwrap()).collect();
        monotone &= by_alpha.windows(2).all(|w| w[1] >= w[0]);
    }
    c.check(clamp_ok, "adaptive ratio leaves its clamp");
    c.check(monotone, "adaptive ratio not monotone");

    let mut orth = 0.0f64;
    for _ in 0..200 {
        let mut axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (axis.iter().map(|a| a * a).sum::<f64>()).sqrt();
        let angle = rng.random_range(0.0..3.1);
        axis.iter_mut().for_each(|a| *a *= angle / n);
        let r = angle_axis_to_rotation(axis);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                orth = orth.max((dot - f64::from(i == j)).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        orth = orth.max((det - 1.0).abs());
    }
    c.check(orth < 1e-12, format!("rotation orthonormality {orth:e}"));

    let mut identity_ok = true;
    for dims in [(5, 7, 9), (8, 8, 8), (1, 4, 6)] {
        let shape = Shape3::new(dims.0, dims.1, dims.2).unwrap();
        let img = random_volume(shape, &mut rng);
        let lbl = random_labels(shape, 4, &mut rng);
        let (di, dl) =
            deformable_transform(&img, Some(&lbl), &AffineParams::identity(), &ElasticParams::none(), &mut rng).unwrap();
        identity_ok &= di == img && dl.as_ref() == Some(&lbl);
    }
    c.check(identity_ok, "identity deformation is not exact");

    let mut cutmix_ok = true;
    for _ in 0..20 {
        let shape = Shape3::new(rng.random_range(4..12), rng.random_range(4..12), rng.random_range(4..12)).unwrap();
        let a = random_volume(shape, &mut rng);
        let b = ScalarVolume::new(shape, Spacing3::unit(), a.data().iter().map(|v| v + 10.0).collect()).unwrap();
        let region = sample_box(shape, (0.1, 0.4), &mut rng).unwrap();
        let mixed = cutmix(&a, &b, &region).unwrap();
        let mut inside = 0;
        for i in 0..shape.len() {
            let (z, y, x) = shape.coords(i);
            let want = if region.contains(z, y, x) {
                inside += 1;
                b.data()[i]
            } else {
                a.data()[i]
            };
            cutmix_ok &= mixed.data()[i] == want;
        }
        cutmix_ok &= inside == region.voxels();
    }
    c.check(cutmix_ok, "CutMix does not partition the volume");

    let mut grads: Vec<(&str, f64)> = Vec::new();
    let shape = Shape3::cube(4).unwrap();
    let y = random_labels(shape, 3, &mut rng);
    let p = random_probs(shape, 3, &mut rng);
    let out = soft_dice(p.data(), y.data(), 3).unwrap();
    grads.push(("soft dice", fd_error(|x| soft_dice(x, y.data(), 3).unwrap().value, p.data(), &out.grads[0])));

    // probability volumes must stay on the simplex, so the per-entry
    // differences run on the slice kernels and the volume losses must hand
    // back exactly the kernel gradients
    let q = random_probs(shape, 3, &mut rng);
    let out = l_seg(&p, &q, &y).unwrap();
    let dq = soft_dice(q.data(), y.data(), 3).unwrap();
    let dp = soft_dice(p.data(), y.data(), 3).unwrap();
    c.check(out.grads == [dp.grads[0].clone(), dq.grads[0].clone()], "seg gradient differs from its dice terms");

    let [s1, s2, t1, t2] = std::array::from_fn(|_| random_probs(shape, 3, &mut rng));
    let kernel = paired_mse(s1.data(), t2.data(), s2.data(), t1.data()).unwrap();
    grads.push(("consistency (first view)", fd_error(|x| paired_mse(x, t2.data(), s2.data(), t1.data()).unwrap().value, s1.data(), &kernel.grads[0])));
    grads.push(("consistency (second view)", fd_error(|x| paired_mse(s1.data(), t2.data(), x, t1.data()).unwrap().value, s2.data(), &kernel.grads[1])));
    c.check(l_app_con(&s1, &s2, &t1, &t2).unwrap() == kernel, "appearance loss differs from its kernel");
    c.check(l_asc(&s1, &s2, &t1, &t2).unwrap() == kernel, "structure loss differs from its kernel");

    // keep every residual away from the kink at zero
    let eps: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps_hat: Vec<f64> = eps
        .iter()
        .map(|e| e + rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let out = mae(&eps, &eps_hat).unwrap();
    grads.push(("noise L1", fd_error(|x| mae(&eps, x).unwrap().value, &eps_hat, &out.grads[0])));

    let img = random_volume(shape, &mut rng);
    let model = Segmenter::new(3).unwrap();
    let perturbed: Vec<f64> = model.init().values().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    let params = params_like(&model.init(), &perturbed);
    let upstream: Vec<f64> = (0..shape.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = seg_backward(&params, &img, &upstream).unwrap();
    let linear = |x: &[f64]| -> f64 {
        let probs = seg_forward(&params_like(&params, x), &img).unwrap();
        probs.data().iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    grads.push(("segmenter", fd_error(linear, params.values(), &analytic)));

    let dice_through = |x: &[f64]| dice_loss(&seg_forward(&params_like(&params, x), &img).unwrap(), &y).unwrap().value;
    let probs = seg_forward(&params, &img).unwrap();
    let g = dice_loss(&probs, &y).unwrap();
    let chained = seg_backward(&params, &img, &g.grads[0]).unwrap();
    grads.push(("dice through segmenter", fd_error(dice_through, params.values(), &chained)));

    let spec = DenoiserSpec::new(3, 2, 3).unwrap();
    let base = spec.init(&mut rng);
    let dparams = params_like(&base, &base.values().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect::<Vec<_>>());
    let x = ScalarVolume::new(shape, Spacing3::unit(), (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let input = embed_condition(&x, &y, &spec.embedder(&dparams).unwrap()).unwrap();
    let upstream: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape = spec.forward_tape(&dparams, &input, 0.4).unwrap();
    let analytic = spec.backward(&dparams, &input, &y, &tape, &upstream).unwrap();
    let linear = |v: &[f64]| -> f64 {
        let p = params_like(&dparams, v);
        let inp = embed_condition(&x, &y, &spec.embedder(&p).unwrap()).unwrap();
        spec.forward(&p, &inp, 0.4).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    grads.push(("denoiser", fd_error(linear, dparams.values(), &analytic)));

    let worst = grads.iter().map(|g| g.1).fold(0.0, f64::max);
    for (name, err) in &grads {
        c.check(*err < 1e-4, format!("{name} gradient relative error {err:e}"));
    }
    c.note(format!("{} gradients, worst relative error {worst:.1e}", grads.len()));
    c.finish_timed();
}

/// Face-connected boundary voxels, with the array border counted as outside.
fn oracle_surface(mask: &[bool], shape: Shape3, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = shape.dims();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[shape.index(z as usize, y as usize, x as usize)]
    };
    let mut out = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !inside(z, y, x) {
                    continue;
                }
                let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx));
                if exposed {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    out
}

fn nearest(p: &[f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter()
        .map(|q| (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

struct OracleScores {
    dsc: f64,
    asd: f64,
    nsd: Vec<f64>,
}

fn oracle(a: &[bool], b: &[bool], shape: Shape3, spacing: [f64; 3], tols: &[f64]) -> OracleScores {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let sa = oracle_surface(a, shape, spacing);
    let sb = oracle_surface(b, shape, spacing);
    let da: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    let db: Vec<f64> = sb.iter().map(|p| nearest(p, &sa)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let nsd = tols
        .iter()
        .map(|&t| {
            let hits = da.iter().chain(&db).filter(|&&d| d <= t * (1.0 + 1e-12)).count();
            hits as f64 / (da.len() + db.len()) as f64
        })
        .collect();
    OracleScores {
        dsc: 2.0 * both as f64 / (na + nb) as f64,
        asd: (mean(&da) + mean(&db)) / 2.0,
        nsd,
    }
}

fn random_mask(shape: Shape3, spacing: [f64; 3], rng: &mut Rng) -> Vec<bool> {
    let n = shape.len();
    let mut mask: Vec<bool> = if rng.random_bool(0.5) {
        let density = rng.random_range(0.05..0.6);
        (0..n).map(|_| rng.random_bool(density)).collect()
    } else {
        // a few overlapping ellipsoids
        let dims = shape.dims();
        let blobs: Vec<([f64; 3], f64)> = (0..rng.random_range(1..4))
            .map(|_| {
                let c = std::array::from_fn(|k| rng.random_range(0.0..dims[k] as f64) * spacing[k]);
                (c, rng.random_range(1.0..6.0))
            })
            .collect();
        (0..n)
            .map(|i| {
                let (z, y, x) = shape.coords(i);
                let p = [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]];
                blobs.iter().any(|(c, r)| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= r * r)
            })
            .collect()
    };
    if !mask.contains(&true) {
        let i = rng.random_range(0..n);
        mask[i] = true;
    }
    mask
}

fn to_labels(mask: &[bool], shape: Shape3, spacing: Spacing3) -> LabelVolume {
    LabelVolume::new(shape, spacing, 2, mask.iter().map(|&m| m as u8).collect()).unwrap()
}

#[test]
fn criterion_2_metric_oracle() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 2: metric oracle", 120);
    let mut rng = rng_from_seed(202);
    let tols = [0.5, 1.0, 2.0, 3.0];
    let (mut worst_dsc, mut worst_asd, mut worst_nsd) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let shape = Shape3::new(rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)).unwrap();
        let sp: [f64; 3] = std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..2.0) });
        let spacing = Spacing3::new(sp[0], sp[1], sp[2]).unwrap();
        let a = random_mask(shape, sp, &mut rng);
        let b = random_mask(shape, sp, &mut rng);
        let want = oracle(&a, &b, shape, sp, &tols);
        let (pa, pb) = (to_labels(&a, shape, spacing), to_labels(&b, shape, spacing));
        worst_dsc = worst_dsc.max((dsc(&pa, &pb, 1).unwrap() - want.dsc).abs());
        worst_asd = worst_asd.max((asd(&pa, &pb, 1).unwrap() - want.asd).abs());
        for (t, w) in tols.iter().zip(&want.nsd) {
            worst_nsd = worst_nsd.max((nsd(&pa, &pb, 1, *t).unwrap() - w).abs());
        }
    }
    c.check(worst_dsc < 1e-9, format!("DSC off by {worst_dsc:e}"));
    c.check(worst_asd < 1e-9, format!("ASD off by {worst_asd:e}"));
    c.check(worst_nsd < 1e-9, format!("NSD off by {worst_nsd:e}"));
    c.note(format!("50 pairs, worst |diff| DSC {worst_dsc:.1e} ASD {worst_asd:.1e} NSD {worst_nsd:.1e}"));

    // two parallel single-voxel plates three voxels apart at 1 mm spacing
    let shape = Shape3::new(8, 6, 6).unwrap();
    let plate = |z0: usize| -> LabelVolume {
        let data = (0..shape.len()).map(|i| (shape.coords(i).0 == z0) as u8).collect();
        LabelVolume::new(shape, Spacing3::unit(), 2, data).unwrap()
    };
    let (p, g) = (plate(2), plate(5));
    let plate_asd = asd(&p, &g, 1).unwrap();
    let (n1, n3) = (nsd(&p, &g, 1, 1.0).unwrap(), nsd(&p, &g, 1, 3.0).unwrap());
    c.check(plate_asd == 3.0, format!("plate ASD {plate_asd}"));
    c.check(n1 == 0.0, format!("plate NSD at 1 mm {n1}"));
    c.check(n3 == 1.0, format!("plate NSD at 3 mm {n3}"));
    c.note(format!("plates ASD {plate_asd}, NSD 1mm {n1}, NSD 3mm {n3}"));
    c.finish_timed();
}

#[test]
fn criterion_3_diffusion_math() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 3: diffusion math", 300);
    let steps = 250;
    let s = 0.008;
    let sched = cosine_schedule(steps, s).unwrap();
    let g = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut ident = 0.0f64;
    let mut prod = 1.0;
    let mut closed_form_steps = 0;
    for t in 1..=steps {
        let b = sched.beta(t).unwrap();
        prod *= 1.0 - b;
        ident = ident.max((sched.alpha(t).unwrap() - (1.0 - b)).abs());
        ident = ident.max((sched.sigma(t).unwrap().powi(2) - b).abs());
        ident = ident.max((sched.alphabar(t).unwrap() - prod).abs());
        // where no clipping happened the product telescopes to the closed form
        let raw = 1.0 - g(t as f64) / g((t - 1) as f64);
        if raw > 1e-8 && raw < 0.999 && closed_form_steps == t - 1 {
            closed_form_steps += 1;
            ident = ident.max((sched.alphabar(t).unwrap() - g(t as f64) / g(0.0)).abs());
        }
    }
    c.check(ident < 1e-12, format!("schedule identities off by {ident:e}"));
    c.check(closed_form_steps > 200, format!("only {closed_form_steps} steps follow the closed form"));
    c.note(format!("schedule {ident:.1e} over {closed_form_steps} closed-form steps"));

    let n = 100_000;
    let shape = Shape3::new(10, 100, 100).unwrap();
    let mut rng = rng_from_seed(303);
    let mut mc_ok = true;
    for (x0, t) in [(0.6, 50), (-0.3, 125), (0.9, 240)] {
        let base = ScalarVolume::filled(shape, Spacing3::unit(), x0);
        let eps = standard_normal(shape, &base, &mut rng);
        let xt = q_sample(&base, t, &eps, &sched).unwrap();
        let ab = sched.alphabar(t).unwrap();
        let (want_mean, want_var) = (ab.sqrt() * x0, 1.0 - ab);
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        let (zm, zv) = ((mean - want_mean) / se_mean, (var - want_var) / se_var);
        mc_ok &= zm.abs() < 4.0 && zv.abs() < 4.0;
        c.note(format!("q_sample t={t}: z(mean) {zm:.2}, z(var) {zv:.2}"));
    }
    c.check(mc_ok, "q_sample moments beyond 4 standard errors");

    let v = p_step_scalar(1.0, 1.0, 0.99, 0.5, 0.0, 0.0);
    c.check((v - 0.99082).abs() < 1e-5, format!("p_step hand value {v}"));
    c.note(format!("p_step {v:.5}"));

    let (mu, var) = (0.5, 0.04);
    let denoiser = AnalyticGaussianDenoiser { mean: mu, var };
    // a per-voxel predictor treats voxels independently: 10^4 voxels, 10^4 samples
    let shape = Shape3::new(1, 100, 100).unwrap();
    let cond = LabelVolume::new(shape, Spacing3::unit(), 2, vec![0; shape.len()]).unwrap();
    let emb = ConditionEmbedder::zeros(2, 1).unwrap();
    let out = sample_loop(&denoiser, &cond, &emb, &sched, &mut rng).unwrap();
    let m = out.mean();
    let v2 = out.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (out.data().len() as f64 - 1.0);
    c.check((m - mu).abs() <= 0.05 * mu, format!("sampled mean {m}"));
    c.check((v2 - var).abs() <= 0.10 * var, format!("sampled variance {v2}"));
    c.note(format!("sample_loop mean {m:.4} (want {mu}), variance {v2:.5} (want {var})"));
    c.finish_timed();
}

const SEEDS: [u64; 3] = [7, 8, 9];

/// Everything criteria 4 and 5 read from one seed.
struct SeedRun {
    seed: u64,
    lower: f64,
    upper: f64,
    full: f64,
    ladder: Vec<f64>,
    sweep: Vec<f64>,
    ordering_time: Duration,
    total_time: Duration,
}

fn phantom_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        shape: Dims([24; 3]),
        ..RunConfig::default()
    }
}

fn mean_dsc(exp: &mut Experiment, variant: &Variant) -> f64 {
    exp.evaluate(variant).unwrap().report.mean_dsc.expect("foreground present")
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = phantom_config(seed);
    let start = Instant::now();
    let data = dataset::generate(&cfg).unwrap();
    let mut exp = Experiment::new(cfg.clone(), data);
    let lower = mean_dsc(&mut exp, &Variant::LowerBound);
    let upper = mean_dsc(&mut exp, &Variant::UpperBound);
    let full = mean_dsc(&mut exp, &Variant::Adapted(GenSettings::from_config(&cfg)));
    let ordering_time = start.elapsed();
    let ladder = variants(Axis::Components, &cfg).iter().map(|(_, v)| mean_dsc(&mut exp, v)).collect();
    let sweep = variants(Axis::ScaleUp, &cfg).iter().take(3).map(|(_, v)| mean_dsc(&mut exp, v)).collect();
    SeedRun {
        seed,
        lower,
        upper,
        full,
        ladder,
        sweep,
        ordering_time,
        total_time: start.elapsed(),
    }
}

fn phantom_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn seed_mean(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

#[test]
fn criterion_4_domain_gap_ordering() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 4: domain-gap ordering", 1800);
    let runs = phantom_runs();
    let lower = seed_mean(runs, |r| r.lower);
    let upper = seed_mean(runs, |r| r.upper);
    let full = seed_mean(runs, |r| r.full);
    for r in runs {
        c.note(format!("seed {} LB {:.4} full {:.4} UB {:.4}", r.seed, r.lower, r.full, r.upper));
    }
    c.note(format!("mean LB {lower:.4} full {full:.4} UB {upper:.4}"));
    c.check(upper > full - 0.03, format!("upper bound {upper:.4} below full {full:.4} - 0.03"));
    c.check(full >= lower + 0.05, format!("full {full:.4} below lower bound {lower:.4} + 0.05"));
    let elapsed = runs.iter().map(|r| r.ordering_time).sum();
    c.finish(elapsed);
}

#[test]
fn criterion_5_ablation_monotonicity() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 5: ablation monotonicity", 2700);
    let runs = phantom_runs();
    let ladder: Vec<f64> = (0..5).map(|i| seed_mean(runs, |r| r.ladder[i])).collect();
    let sweep: Vec<f64> = (0..3).map(|i| seed_mean(runs, |r| r.sweep[i])).collect();
    for r in runs {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        c.note(format!("seed {} ladder [{}] sweep [{}]", r.seed, fmt(&r.ladder), fmt(&r.sweep)));
    }
    let names = ["M1", "M2", "M3", "M4", "M5"];
    c.note(format!(
        "mean ladder {}",
        names.iter().zip(&ladder).map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ")
    ));
    for step in 1..4 {
        let delta = ladder[step + 1] - ladder[step];
        c.check(delta >= -0.01, format!("{} -> {} changes DSC by {delta:.4}", names[step], names[step + 1]));
    }
    let gain = ladder[4] - ladder[0];
    c.check(gain >= 0.02, format!("M5 - M1 = {gain:.4}"));
    c.note(format!("sweep k=0,1,2: {:.4} {:.4} {:.4}", sweep[0], sweep[1], sweep[2]));
    for k in 0..2 {
        c.check(sweep[k + 1] >= sweep[k] - 0.01, format!("sweep drops from k={k} to k={}", k + 1));
    }
    let elapsed = runs.iter().map(|r| r.total_time).sum();
    c.finish(elapsed);
}

const DETERMINISM_CONFIG: &str = "\
shape = 16
num_classes = 3
n_source = 3
n_target_train = 3
n_target_test = 2
seg_epochs = 12
denoiser_steps = 80
diffusion_steps = 50
denoiser_crop = 8
scale_up = 1
tau = 0.5
";

fn run_all(cfg: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_uvforge"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "run-all"])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out.join("results.csv")).unwrap()
}

#[test]
fn criterion_6_determinism() {
    let _guard = serial();
    let mut c = Criterion::new("criterion 6: determinism", 600);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let first = run_all(&cfg, &dir.path().join("first"));
    let second = run_all(&cfg, &dir.path().join("second"));
    c.check(!first.is_empty(), "empty results.csv");
    c.check(first == second, "results.csv differs between runs");
    c.note(format!("{} bytes, {} rows, identical: {}", first.len(), first.split(|&b| b == b'\n').count() - 2, first == second));
    c.finish_timed();
}
