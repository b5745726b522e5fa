//! One episode as a bilevel problem over the model's loss functions.

use std::sync::{Mutex, OnceLock};

use crate::error::Result;
use crate::model::{Architecture, FtInput, FtNoise};
use crate::objectives::{episode_losses, LossBatch, LossOptions, LossTerms, LossWeights, Phase};
use crate::scalar::{Real, Scalar};
use crate::seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::bilevel::{BilevelProblem, GradOut};

const STREAM_FT: u64 = 1;
const STREAM_INNER: u64 = 2;
const STREAM_OUTER: u64 = 3;

/// How the feature transforms take part in the inner loss.
#[derive(Clone, Debug, PartialEq)]
pub enum FtMode<R> {
    Off,
    /// FT parameters are hyper-parameters and receive meta-gradients.
    Learned,
    /// FT active with these constant parameters.
    Fixed(Vec<R>),
}

/// Layout of the hyper-parameter vector: learned FT parameters, then regulariser weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperLayout {
    pub ft: usize,
    pub psi: usize,
}

impl HyperLayout {
    pub fn new<R>(arch: &Architecture, ft: &FtMode<R>, regulariser: bool) -> Self {
        Self {
            ft: if matches!(ft, FtMode::Learned) { arch.ft.len() } else { 0 },
            psi: if regulariser { arch.inv_range().len() } else { 0 },
        }
    }

    pub fn len(&self) -> usize {
        self.ft + self.psi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct EpisodeProblem<'a, R> {
    pub arch: &'a Architecture,
    pub trn: LossBatch<R>,
    pub val: LossBatch<R>,
    pub weights: LossWeights,
    pub options: LossOptions,
    pub ft: FtMode<R>,
    pub layout: HyperLayout,
    /// Seeds the FT and reparameterization noise; fixed per episode so every
    /// evaluation of the inner loss sees the same draws.
    pub seed: u64,
    ft_noise: FtNoise<f64>,
    first_inner: OnceLock<LossTerms>,
    last_outer: Mutex<Option<LossTerms>>,
}

impl<'a, R: Real> EpisodeProblem<'a, R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: &'a Architecture,
        trn: LossBatch<R>,
        val: LossBatch<R>,
        weights: LossWeights,
        options: LossOptions,
        ft: FtMode<R>,
        regulariser: bool,
        seed: u64,
    ) -> Self {
        let layout = HyperLayout::new(arch, &ft, regulariser);
        let ft_noise = FtNoise::draw(&mut seed::rng(seed, &[STREAM_FT]), trn.num_images(), arch.ft_channels());
        Self {
            arch,
            trn,
            val,
            weights,
            options,
            ft,
            layout,
            seed,
            ft_noise,
            first_inner: OnceLock::new(),
            last_outer: Mutex::new(None),
        }
    }

    /// Terms of the first inner evaluation and of the latest outer one.
    pub fn recorded_terms(&self) -> (Option<LossTerms>, Option<LossTerms>) {
        (self.first_inner.get().cloned(), self.last_outer.lock().expect("unpoisoned").clone())
    }

    /// Inner loss terms at `omega` without gradients.
    pub fn train_terms(&self, omega: &[R], hyper: &[R]) -> Result<LossTerms> {
        Ok(self.inner::<R>(omega, hyper, false)?.1)
    }

    fn inner<S: Scalar<Base = R>>(&self, omega: &[S], hyper: &[S], grads: bool) -> Result<(GradOut<S>, LossTerms)> {
        let mut tape = Tape::<S>::new();
        let w = self.arch.omega.bind(&mut tape, omega, true);
        let batch = self.trn.cast(|x: R| S::from_base(x));
        let noise = self.ft_noise.cast::<S>();
        let ft_vars = match &self.ft {
            FtMode::Off => None,
            FtMode::Learned => Some(self.arch.ft.bind(&mut tape, &hyper[..self.layout.ft], true)),
            FtMode::Fixed(v) => {
                let v: Vec<S> = v.iter().map(|&x| S::from_base(x)).collect();
                Some(self.arch.ft.bind(&mut tape, &v, false))
            }
        };
        let psi = (self.layout.psi > 0).then(|| {
            let p = hyper[self.layout.ft..].to_vec();
            tape.param(Tensor::new(vec![p.len(), 1], p))
        });
        let ft = ft_vars.as_ref().map(|vars| FtInput { vars, noise: &noise });
        let mut rng = seed::rng(self.seed, &[STREAM_INNER]);
        let (loss, terms) = episode_losses(
            &mut tape,
            self.arch,
            &w,
            &batch,
            Phase::Inner,
            &self.weights,
            self.options,
            ft,
            psi,
            &mut rng,
        )?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((GradOut { loss: value, omega: Vec::new(), hyper: Vec::new() }, terms));
        }
        let _ = self.first_inner.set(terms.clone());
        let g = tape.backward(loss);
        let mut hyper_g = Vec::with_capacity(self.layout.len());
        if let (FtMode::Learned, Some(vars)) = (&self.ft, &ft_vars) {
            hyper_g.extend(self.arch.ft.flat_grads(&g, vars));
        }
        if let Some(p) = psi {
            hyper_g.extend_from_slice(g.get_or_zeros(p, &[self.layout.psi, 1]).data());
        }
        Ok((GradOut { loss: value, omega: self.arch.omega.flat_grads(&g, &w), hyper: hyper_g }, terms))
    }

    /// Outer loss with its terms and gradient.
    pub fn outer(&self, omega: &[R]) -> Result<(GradOut<R>, LossTerms)> {
        outer_grad(self.arch, omega, &self.val, &self.weights, self.options, Phase::Outer, seed::derive(self.seed, &[STREAM_OUTER]))
    }
}

impl<R: Real> BilevelProblem for EpisodeProblem<'_, R> {
    type R = R;

    fn train_grad<S: Scalar<Base = R>>(&self, omega: &[S], hyper: &[S]) -> Result<GradOut<S>> {
        Ok(self.inner(omega, hyper, true)?.0)
    }

    fn test_grad(&self, omega: &[R]) -> Result<GradOut<R>> {
        let (g, terms) = self.outer(omega)?;
        *self.last_outer.lock().expect("unpoisoned") = Some(terms);
        Ok(g)
    }
}

/// Loss and `Ω`-gradient of a phase without FT or regulariser (warm-up and outer loss).
pub fn outer_grad<R: Real>(
    arch: &Architecture,
    omega: &[R],
    batch: &LossBatch<R>,
    weights: &LossWeights,
    options: LossOptions,
    phase: Phase,
    noise_seed: u64,
) -> Result<(GradOut<R>, LossTerms)> {
    let mut tape = Tape::<R>::new();
    let w = arch.omega.bind(&mut tape, omega, true);
    let mut rng = seed::rng(noise_seed, &[]);
    let (loss, terms) = episode_losses(&mut tape, arch, &w, batch, phase, weights, options, None, None, &mut rng)?;
    let g = tape.backward(loss);
    Ok((GradOut { loss: tape.value(loss).item(), omega: arch.omega.flat_grads(&g, &w), hyper: Vec::new() }, terms))
}
