//! Finite-difference checks of every analytic gradient on a reduced model in double precision.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::meta::bilevel::{meta_gradient, BilevelProblem, GradOut, InnerConfig};
use crate::meta::problem::{EpisodeProblem, FtMode};
use crate::model::{Architecture, FtInput, FtNoise, ModelConfig};
use crate::objectives::{episode_losses, BatchPoint, LossBatch, LossOptions, LossWeights, Phase};
use crate::scalar::Scalar;
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Gradients below this magnitude are compared absolutely; difference quotients of
/// the fixture's losses carry up to about `1e-9` of rounding noise.
pub const FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn central(f: &impl Fn(&[f64]) -> Result<f64>, xp: &mut [f64], i: usize, h: f64) -> Result<f64> {
    let x = xp[i];
    xp[i] = x + h;
    let up = f(xp)?;
    xp[i] = x - h;
    let down = f(xp)?;
    xp[i] = x;
    Ok((up - down) / (2.0 * h))
}

/// Central difference at the largest step that agrees with the next smaller one, so
/// that a leaky-ReLU or hinge kink inside the stencil does not pollute the estimate.
fn derivative(f: &impl Fn(&[f64]) -> Result<f64>, xp: &mut [f64], i: usize) -> Result<f64> {
    let mut prev = central(f, xp, i, STEPS[0])?;
    for &h in &STEPS[1..] {
        let next = central(f, xp, i, h)?;
        if (prev - next).abs() <= 1e-6 + 1e-5 * prev.abs() {
            return Ok(prev);
        }
        prev = next;
    }
    Ok(prev)
}

/// Central differences of `f` at `x` compared with `grad` on every coordinate.
pub fn compare(name: &str, f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], grad: &[f64]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        worst = worst.max(rel_error(grad[i], derivative(&f, &mut xp, i)?));
    }
    Ok(CheckResult { name: name.into(), coordinates: x.len(), max_rel_error: worst, passed: worst < TOLERANCE })
}

/// Inputs shared by the suites: a reduced model, random parameters and a small batch.
pub struct Fixture {
    pub arch: Architecture,
    pub omega: Vec<f64>,
    pub ft: Vec<f64>,
    pub psi: Vec<f64>,
    pub trn: LossBatch<f64>,
    pub val: LossBatch<f64>,
}

fn random_images<R: Rng>(rng: &mut R, n: usize, c: &ModelConfig) -> Tensor<f64> {
    let len = n * c.image_channels * c.image_size * c.image_size;
    Tensor::new(
        vec![n, c.image_channels, c.image_size, c.image_size],
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

impl Fixture {
    pub fn new(seed_value: u64) -> Result<Self> {
        let config = ModelConfig::reduced();
        let arch = Architecture::new(config.clone())?;
        let mut rng = seed::rng(seed_value, &[]);
        let mut omega: Vec<f64> = arch.init_omega(seed_value);
        // Break the symmetric initialization of norms and biases so every path carries gradient.
        omega.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let ft: Vec<f64> = arch.init_ft::<f64>().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let psi = (0..arch.inv_range().len()).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut batch = |with_donor: bool| {
            let points = (0..3)
                .map(|i| BatchPoint { sketch: i, photo: i, negative: 3 + i % 2, donor: (with_donor && i < 2).then_some(3 + i) })
                .collect();
            LossBatch { sketches: random_images(&mut rng, 5, &config), photos: random_images(&mut rng, 5, &config), points }
        };
        let trn = batch(true);
        let val = batch(false);
        Ok(Self { arch, omega, ft, psi, trn, val })
    }
}

/// Margin wide enough that every triplet hinge of the fixture is active.
const MARGIN: f64 = 5.0;

fn weights() -> LossWeights {
    LossWeights { lambda1: 0.3, lambda2: 0.8, lambda3: 0.7, m_zinv: MARGIN, m_zf: MARGIN }
}

fn noise() -> FtNoise<f64> {
    FtNoise::draw(&mut seed::rng(7, &[]), 10, ModelConfig::reduced().channels.as_slice())
}

fn latent_term<S: Scalar>(fx: &Fixture, omega: &[S], term: &str) -> (S, Vec<S>) {
    let mut tape = Tape::<S>::new();
    let w = fx.arch.omega.bind(&mut tape, omega, true);
    let batch = fx.trn.cast(S::from_f64);
    let mut img_shape = batch.sketches.shape().to_vec();
    img_shape[0] = batch.num_images();
    let mut px = batch.sketches.data().to_vec();
    px.extend_from_slice(batch.photos.data());
    let x = tape.constant(Tensor::new(img_shape, px));
    let lat = fx.arch.encode_on(&mut tape, &w, x, None);
    let m = batch.sketches.rows();
    let out = match term {
        "kl" => {
            let k = tape.row_kl(lat.mu, lat.log_var);
            tape.sum(k)
        }
        _ => {
            let z = if term == "tri_inv" {
                lat.z_inv
            } else {
                let eps = (0..batch.num_images() * fx.arch.config.d).map(|i| S::from_f64(((i * 37 % 11) as f64 - 5.0) / 5.0)).collect();
                let zv = tape.reparam(lat.mu, lat.log_var, eps);
                tape.add(lat.z_inv, zv)
            };
            let rows = |f: fn(&BatchPoint) -> usize, off: usize| batch.points.iter().map(|p| off + f(p)).collect::<Vec<_>>();
            let a = tape.gather(z, &rows(|p| p.sketch, 0));
            let p = tape.gather(z, &rows(|p| p.photo, m));
            let n = tape.gather(z, &rows(|p| p.negative, m));
            let t = tape.triplet(a, p, n, MARGIN);
            tape.sum(t)
        }
    };
    let g = tape.backward(out);
    (tape.value(out).item(), fx.arch.omega.flat_grads(&g, &w))
}

fn regulariser(fx: &Fixture, omega: &[f64], psi: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let w = fx.arch.omega.bind(&mut tape, omega, true);
    let p = tape.param(Tensor::new(vec![psi.len(), 1], psi.to_vec()));
    let (iw, ib) = fx.arch.inv_vars(&w);
    let (a, b) = (tape.value(iw).numel(), tape.value(ib).numel());
    let iw = tape.reshape(iw, vec![a, 1]);
    let ib = tape.reshape(ib, vec![b, 1]);
    let inv = tape.concat_rows(&[iw, ib]);
    let r = tape.weighted_abs(p, inv);
    let g = tape.backward(r);
    (tape.value(r).item(), fx.arch.omega.flat_grads(&g, &w), g.get_or_zeros(p, &[psi.len(), 1]).into_data())
}

/// Composite loss of a phase; returns value and gradients in (Ω, φ, ψ).
fn composite(fx: &Fixture, omega: &[f64], ft: &[f64], psi: &[f64], phase: Phase) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let w = fx.arch.omega.bind(&mut tape, omega, true);
    let inner = phase == Phase::Inner;
    let fv = fx.arch.ft.bind(&mut tape, ft, true);
    let p = tape.param(Tensor::new(vec![psi.len(), 1], psi.to_vec()));
    let n = noise();
    let ft_in = inner.then(|| FtInput { vars: &fv, noise: &n });
    let batch = if phase == Phase::Outer { &fx.val } else { &fx.trn };
    let opts = LossOptions { photo_to_sketch: true };
    let (loss, _) = episode_losses(
        &mut tape,
        &fx.arch,
        &w,
        batch,
        phase,
        &weights(),
        opts,
        ft_in,
        inner.then_some(p),
        &mut seed::rng(11, &[]),
    )?;
    let g = tape.backward(loss);
    Ok((
        tape.value(loss).item(),
        fx.arch.omega.flat_grads(&g, &w),
        fx.arch.ft.flat_grads(&g, &fv),
        g.get_or_zeros(p, &[psi.len(), 1]).into_data(),
    ))
}

/// Meta-gradient on the reduced model against differences of the unrolled outer loss.
fn bilevel(fx: &Fixture, first_order: bool) -> Result<Vec<CheckResult>> {
    let problem = EpisodeProblem::new(
        &fx.arch,
        fx.trn.clone(),
        fx.val.clone(),
        weights(),
        LossOptions::default(),
        FtMode::Learned,
        true,
        5,
    );
    let cfg = InnerConfig { alpha: 0.05, steps: 2, clip: None, adaptive: false, first_order };
    let mut hyper = fx.ft.clone();
    hyper.extend_from_slice(&fx.psi);
    let mg = meta_gradient(&problem, &fx.omega, &hyper, &cfg)?;
    let unrolled = |omega: &[f64], hyper: &[f64]| -> Result<f64> {
        let mut w = omega.to_vec();
        for _ in 0..cfg.steps {
            let g: GradOut<f64> = problem.train_grad(&w, hyper)?;
            w.iter_mut().zip(&g.omega).for_each(|(x, gi)| *x -= cfg.alpha * gi);
        }
        Ok(problem.test_grad(&w)?.loss)
    };
    let tag = if first_order { " (first-order)" } else { "" };
    Ok(vec![
        compare(&format!("meta-gradient wrt model parameters{tag}"), |o| unrolled(o, &hyper), &fx.omega, &mg.omega)?,
        compare(&format!("meta-gradient wrt FT and regulariser weights{tag}"), |h| unrolled(&fx.omega, h), &hyper, &mg.hyper)?,
    ])
}

/// Every suite; a result fails when its worst relative error reaches [`TOLERANCE`].
pub fn run_all(seed_value: u64) -> Result<Vec<CheckResult>> {
    let fx = Fixture::new(seed_value)?;
    let mut out = Vec::new();
    for term in ["kl", "tri_inv", "tri_f"] {
        let (_, g) = latent_term::<f64>(&fx, &fx.omega, term);
        out.push(compare(term, |o| Ok(latent_term::<f64>(&fx, o, term).0), &fx.omega, &g)?);
    }
    let rec_only = |o: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::<f64>::new();
        let w = fx.arch.omega.bind(&mut tape, o, true);
        let wts = LossWeights { lambda1: 0.0, lambda2: 0.0, ..weights() };
        let (l, _) = episode_losses(
            &mut tape,
            &fx.arch,
            &w,
            &fx.trn,
            Phase::Warmup,
            &wts,
            LossOptions { photo_to_sketch: true },
            None,
            None::<Var>,
            &mut seed::rng(3, &[]),
        )?;
        let g = tape.backward(l);
        Ok((tape.value(l).item(), fx.arch.omega.flat_grads(&g, &w)))
    };
    let (_, g) = rec_only(&fx.omega)?;
    out.push(compare("rec", |o| Ok(rec_only(o)?.0), &fx.omega, &g)?);
    let (_, gw, gp) = regulariser(&fx, &fx.omega, &fx.psi);
    out.push(compare("reg wrt model parameters", |o| Ok(regulariser(&fx, o, &fx.psi).0), &fx.omega, &gw)?);
    out.push(compare("reg wrt regulariser weights", |p| Ok(regulariser(&fx, &fx.omega, p).0), &fx.psi, &gp)?);
    for (phase, name) in [(Phase::Warmup, "warm-up"), (Phase::Inner, "inner"), (Phase::Outer, "outer")] {
        let (_, gw, gf, gp) = composite(&fx, &fx.omega, &fx.ft, &fx.psi, phase)?;
        let f = |o: &[f64]| Ok(composite(&fx, o, &fx.ft, &fx.psi, phase)?.0);
        out.push(compare(&format!("{name} composite wrt model parameters"), f, &fx.omega, &gw)?);
        if phase == Phase::Inner {
            let f = |v: &[f64]| Ok(composite(&fx, &fx.omega, v, &fx.psi, phase)?.0);
            out.push(compare("inner composite wrt FT parameters", f, &fx.ft, &gf)?);
            let f = |v: &[f64]| Ok(composite(&fx, &fx.omega, &fx.ft, v, phase)?.0);
            out.push(compare("inner composite wrt regulariser weights", f, &fx.psi, &gp)?);
        }
    }
    out.extend(bilevel(&fx, false)?);
    Ok(out)
}

/// `L_trn = c·w² + ψ|w|` and `L_tst = ½w²` over a single weight.
pub struct QuadraticProblem {
    pub c: f64,
}

impl BilevelProblem for QuadraticProblem {
    type R = f64;

    fn train_grad<S: Scalar<Base = f64>>(&self, omega: &[S], hyper: &[S]) -> Result<GradOut<S>> {
        let (w, psi) = (omega[0], hyper[0]);
        let c = S::from_f64(self.c);
        let sign = S::from_f64(if w.re() == 0.0 { 0.0 } else { w.re().signum() });
        Ok(GradOut { loss: c * w * w + psi * w.abs(), omega: vec![S::from_f64(2.0) * c * w + psi * sign], hyper: vec![w.abs()] })
    }

    fn test_grad(&self, omega: &[f64]) -> Result<GradOut<f64>> {
        Ok(GradOut { loss: 0.5 * omega[0] * omega[0], omega: vec![omega[0]], hyper: vec![] })
    }
}

/// Outer gradient at `w = 1`, `α = 0.1` for `L_trn = w²`: `(second-order, first-order)`.
pub fn quadratic_oracle() -> Result<(f64, f64)> {
    let q = QuadraticProblem { c: 1.0 };
    let cfg = InnerConfig { alpha: 0.1, steps: 1, clip: None, adaptive: false, first_order: false };
    let second = meta_gradient(&q, &[1.0], &[0.0], &cfg)?.omega[0];
    let first = meta_gradient(&q, &[1.0], &[0.0], &InnerConfig { first_order: true, ..cfg })?.omega[0];
    Ok((second, first))
}
