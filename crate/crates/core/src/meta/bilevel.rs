//! Differentiating an outer loss through unrolled inner gradient steps.
//!
//! For `Ω_{k+1} = Ω_k − α D_k ∇_Ω L_trn(Ω_k, h)` the outer gradient of
//! `L_tst(Ω_n)` is accumulated backwards: starting from `a = ∇L_tst(Ω_n)`, each
//! step subtracts `α H_{hΩ} D_k a` from the hyper-gradient and replaces `a` by
//! `a − α H_{ΩΩ} D_k a`. The Hessian-vector products come from one reverse pass
//! over dual numbers whose tangent is `D_k a`. The step scalings `D_k` (gradient
//! clipping, optional adaptive normalization) are held constant.

use crate::error::{Error, Result};
use crate::scalar::{Dual, Real, Scalar};

/// Loss and gradients of one evaluation.
#[derive(Clone, Debug)]
pub struct GradOut<S> {
    pub loss: S,
    pub omega: Vec<S>,
    pub hyper: Vec<S>,
}

/// A pair of losses sharing the model parameters `Ω`; the inner one also depends on hyper-parameters.
pub trait BilevelProblem: Sync {
    type R: Real;

    /// Inner (training) loss with gradients in `Ω` and the hyper-parameters.
    /// Must be a deterministic function of its arguments.
    fn train_grad<S: Scalar<Base = Self::R>>(&self, omega: &[S], hyper: &[S]) -> Result<GradOut<S>>;

    /// Outer (test) loss with its gradient in `Ω`; `hyper` of the result is ignored.
    fn test_grad(&self, omega: &[Self::R]) -> Result<GradOut<Self::R>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub alpha: f64,
    pub steps: usize,
    /// Global-norm clip of each inner gradient.
    pub clip: Option<f64>,
    /// Replace the plain step by a per-coordinate normalized one (first Adam moments).
    pub adaptive: bool,
    /// Drop the dependence of `Ω_n` on `Ω` and the hyper-parameters.
    pub first_order: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { alpha: 0.0005, steps: 1, clip: Some(10.0), adaptive: false, first_order: false }
    }
}

pub struct InnerTrajectory<R> {
    /// `Ω_0 … Ω_n`.
    pub iterates: Vec<Vec<R>>,
    /// Per-coordinate step scaling `D_k`.
    pub scales: Vec<Vec<R>>,
    pub train_losses: Vec<f64>,
}

pub fn norm<R: Real>(v: &[R]) -> f64 {
    v.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

/// Factor that brings a vector of global norm `n` down to `max`.
pub fn clip_factor(n: f64, max: Option<f64>) -> f64 {
    match max {
        Some(m) if n > m => m / n,
        _ => 1.0,
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Runs the inner steps and records everything the backward sweep needs.
pub fn inner_update<P: BilevelProblem>(
    problem: &P,
    omega: &[P::R],
    hyper: &[P::R],
    cfg: &InnerConfig,
) -> Result<InnerTrajectory<P::R>> {
    if cfg.steps == 0 {
        return Err(Error::Contract("inner_steps must be at least 1".into()));
    }
    let mut iterates = vec![omega.to_vec()];
    let mut scales = Vec::new();
    let mut train_losses = Vec::new();
    let mut m1 = vec![0.0f64; omega.len()];
    let mut m2 = vec![0.0f64; omega.len()];
    for k in 0..cfg.steps {
        let cur = iterates.last().expect("non-empty");
        let g = problem.train_grad::<P::R>(cur, hyper)?;
        let loss = g.loss.to_f64();
        if !loss.is_finite() || g.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("inner loss at step {k}")));
        }
        train_losses.push(loss);
        let c = clip_factor(norm(&g.omega), cfg.clip);
        let scale: Vec<P::R> = if cfg.adaptive {
            let t = (k + 1) as i32;
            g.omega
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let gv = gi.to_f64() * c;
                    m1[i] = ADAM_B1 * m1[i] + (1.0 - ADAM_B1) * gv;
                    m2[i] = ADAM_B2 * m2[i] + (1.0 - ADAM_B2) * gv * gv;
                    let mh = m1[i] / (1.0 - ADAM_B1.powi(t));
                    let vh = m2[i] / (1.0 - ADAM_B2.powi(t));
                    // Step is mh/(sqrt(vh)+eps); express it as a scaling of the raw gradient.
                    let step = mh / (vh.sqrt() + ADAM_EPS);
                    if gi.to_f64() == 0.0 {
                        P::R::zero()
                    } else {
                        P::R::from_f64(step / gi.to_f64())
                    }
                })
                .collect()
        } else {
            vec![P::R::from_f64(c); omega.len()]
        };
        let alpha = P::R::from_f64(cfg.alpha);
        let next = cur.iter().zip(&g.omega).zip(&scale).map(|((&w, &gi), &s)| w - alpha * s * gi).collect();
        scales.push(scale);
        iterates.push(next);
    }
    Ok(InnerTrajectory { iterates, scales, train_losses })
}

#[derive(Clone, Debug)]
pub struct MetaGradient<R> {
    pub omega: Vec<R>,
    pub hyper: Vec<R>,
    /// Inner loss before the first step.
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Gradient of `L_tst(Ω_n(Ω, h))` with respect to `Ω` and `h`.
pub fn meta_gradient<P: BilevelProblem>(
    problem: &P,
    omega: &[P::R],
    hyper: &[P::R],
    cfg: &InnerConfig,
) -> Result<MetaGradient<P::R>> {
    let traj = inner_update(problem, omega, hyper, cfg)?;
    let adapted = traj.iterates.last().expect("non-empty");
    let out = problem.test_grad(adapted)?;
    let test_loss = out.loss.to_f64();
    if !test_loss.is_finite() || out.omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outer loss".into()));
    }
    let mut a = out.omega;
    let mut g_hyper = vec![P::R::zero(); hyper.len()];
    if !cfg.first_order {
        let alpha = P::R::from_f64(cfg.alpha);
        for k in (0..cfg.steps).rev() {
            let tangent: Vec<P::R> = a.iter().zip(&traj.scales[k]).map(|(&x, &s)| x * s).collect();
            let w: Vec<Dual<P::R>> =
                traj.iterates[k].iter().zip(&tangent).map(|(&v, &d)| Dual::new(v, d)).collect();
            let h: Vec<Dual<P::R>> = hyper.iter().map(|&v| Dual::constant(v)).collect();
            let hv = problem.train_grad::<Dual<P::R>>(&w, &h)?;
            for (gh, d) in g_hyper.iter_mut().zip(&hv.hyper) {
                *gh -= alpha * d.d;
            }
            for (ai, d) in a.iter_mut().zip(&hv.omega) {
                *ai -= alpha * d.d;
            }
        }
    }
    if a.iter().chain(&g_hyper).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    Ok(MetaGradient { omega: a, hyper: g_hyper, train_loss: traj.train_losses[0], test_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L_trn = c·w² + ψ|w|`, `L_tst = ½ w²`, single weight, single hyper-parameter.
    struct Quadratic {
        c: f64,
    }

    impl BilevelProblem for Quadratic {
        type R = f64;

        fn train_grad<S: Scalar<Base = f64>>(&self, omega: &[S], hyper: &[S]) -> Result<GradOut<S>> {
            let (w, psi) = (omega[0], hyper[0]);
            let c = S::from_f64(self.c);
            let sign = S::from_f64(w.re().signum() * (w.re() != 0.0) as i32 as f64);
            Ok(GradOut {
                loss: c * w * w + psi * w.abs(),
                omega: vec![S::from_f64(2.0) * c * w + psi * sign],
                hyper: vec![w.abs()],
            })
        }

        fn test_grad(&self, omega: &[f64]) -> Result<GradOut<f64>> {
            Ok(GradOut { loss: 0.5 * omega[0] * omega[0], omega: vec![omega[0]], hyper: vec![] })
        }
    }

    fn cfg(alpha: f64, steps: usize) -> InnerConfig {
        InnerConfig { alpha, steps, clip: None, adaptive: false, first_order: false }
    }

    #[test]
    fn inner_step_examples() {
        let q = Quadratic { c: 1.0 };
        let t = inner_update(&q, &[1.0], &[0.0], &cfg(0.1, 1)).unwrap();
        assert!((t.iterates[1][0] - 0.8).abs() < 1e-15);
        let t = inner_update(&q, &[1.0], &[0.0], &cfg(0.0, 1)).unwrap();
        assert_eq!(t.iterates[1][0], 1.0);
        let only_reg = Quadratic { c: 0.0 };
        let t = inner_update(&only_reg, &[2.0], &[3.0], &cfg(0.1, 1)).unwrap();
        assert!((t.iterates[1][0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn zero_inner_steps_is_rejected() {
        assert!(inner_update(&Quadratic { c: 1.0 }, &[1.0], &[0.0], &cfg(0.1, 0)).is_err());
    }

    #[test]
    fn hyper_gradient_through_regulariser() {
        // w' = w − α(2w + ψ sign w); dL/dψ = w' · (−α sign w).
        let q = Quadratic { c: 1.0 };
        let (w, psi, alpha) = (1.5, 0.4, 0.1);
        let g = meta_gradient(&q, &[w], &[psi], &cfg(alpha, 1)).unwrap();
        let w1 = w - alpha * (2.0 * w + psi);
        assert!((g.hyper[0] - w1 * -alpha).abs() < 1e-12);
        assert!((g.omega[0] - w1 * (1.0 - 2.0 * alpha)).abs() < 1e-12);
    }

    #[test]
    fn multi_step_matches_closed_form() {
        let q = Quadratic { c: 1.0 };
        let g = meta_gradient(&q, &[1.0], &[0.0], &cfg(0.1, 3)).unwrap();
        // w_n = 0.8^n w, L = ½ w_n² ⇒ dL/dw = 0.8^{2n} w.
        assert!((g.omega[0] - 0.8f64.powi(6)).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_step_and_derivative() {
        let q = Quadratic { c: 1.0 };
        let c = InnerConfig { clip: Some(1.0), ..cfg(0.1, 1) };
        // Gradient 2w = 6 clipped to 1: w' = 3 − 0.1, derivative (1 − 0.1·2/6)·w'.
        let g = meta_gradient(&q, &[3.0], &[0.0], &c).unwrap();
        assert!((g.omega[0] - 2.9 * (1.0 - 0.2 / 6.0)).abs() < 1e-12);
    }
}
