//! The disentangling encoder/decoder and its flat parameter layout.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{ImageTensor, Modality};
use crate::scalar::{Real, Scalar};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Encoder block widths; one FT layer follows each block's normalization.
    pub channels: Vec<usize>,
    pub d: usize,
    /// Initial standard deviations of the sampled FT shift and scale.
    pub ft_init_std_omega: f64,
    pub ft_init_std_eta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 1,
            channels: vec![16, 32, 64, 64],
            d: 64,
            ft_init_std_omega: 0.5,
            ft_init_std_eta: 0.3,
        }
    }
}

impl ModelConfig {
    /// The small double-precision model used by gradient checks.
    pub fn reduced() -> Self {
        Self { image_size: 8, image_channels: 1, channels: vec![2, 3], d: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be non-empty and positive".into()));
        }
        if self.d == 0 || self.image_channels == 0 {
            return Err(Error::Config("d and image_channels must be positive".into()));
        }
        let n = self.channels.len();
        if n >= usize::BITS as usize || self.image_size % (1 << n) != 0 || self.image_size >> n == 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 2^{n}",
                self.image_size
            )));
        }
        if !(self.ft_init_std_omega > 0.0 && self.ft_init_std_eta > 0.0) {
            return Err(Error::Config("FT initial deviations must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn bottleneck_len(&self) -> usize {
        let s = self.bottleneck_side();
        self.channels.last().copied().unwrap_or(0) * s * s
    }
}

/// `log(1 + e^x)`, the positive map applied to FT deviation parameters.
pub fn smooth_relu(x: f64) -> f64 {
    x.softplus()
}

/// Inverse of [`smooth_relu`] for `y > 0`.
pub fn smooth_relu_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        mu.len() == log_var.len() && mu.len() == eps.len(),
        "reparameterize lengths {} / {} / {}",
        mu.len(),
        log_var.len(),
        eps.len()
    );
    Ok(mu.iter().zip(log_var).zip(eps).map(|((m, lv), e)| m + (lv / 2.0).exp() * e).collect())
}

pub fn fuse(z_inv: &[f64], z_var: &[f64]) -> Result<Vec<f64>> {
    ensure!(z_inv.len() == z_var.len(), "fuse lengths {} / {}", z_inv.len(), z_var.len());
    Ok(z_inv.iter().zip(z_var).map(|(a, b)| a + b).collect())
}

/// `η ⊙ F + ω` on a channel-major feature map `[c][h*w]`.
pub fn ft_transform(
    feature: &[f64],
    channels: usize,
    phi_omega: &[f64],
    phi_eta: &[f64],
    eps_omega: &[f64],
    eps_eta: &[f64],
) -> Result<Vec<f64>> {
    ensure!(channels > 0 && feature.len() % channels == 0, "feature map not divisible into {channels} channels");
    for (name, v) in [("phi_omega", phi_omega), ("phi_eta", phi_eta), ("eps_omega", eps_omega), ("eps_eta", eps_eta)] {
        ensure!(v.len() == channels, "{name} has {} entries for {channels} channels", v.len());
    }
    let plane = feature.len() / channels;
    let mut out = Vec::with_capacity(feature.len());
    for c in 0..channels {
        let omega = smooth_relu(phi_omega[c]) * eps_omega[c];
        let eta = 1.0 + smooth_relu(phi_eta[c]) * eps_eta[c];
        out.extend(feature[c * plane..(c + 1) * plane].iter().map(|f| eta * f + omega));
    }
    Ok(out)
}

pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    ensure!(mu.len() == log_var.len(), "kl lengths {} / {}", mu.len(), log_var.len());
    ensure!(
        mu.iter().chain(log_var).all(|v| v.is_finite()),
        "kl_divergence needs finite inputs"
    );
    Ok(0.5 * mu.iter().zip(log_var).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors packed into one flat vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.len();
        self.segments.push(Segment { name: name.into(), shape, offset });
        self.segments.len() - 1
    }

    pub fn len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// One tape leaf per segment.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, flat: &[S], trainable: bool) -> Vec<Var> {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        self.segments
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), flat[s.range()].to_vec());
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    pub fn flat_grads<S: Scalar>(&self, grads: &Grads<S>, vars: &[Var]) -> Vec<S> {
        let mut out = vec![S::zero(); self.len()];
        for (s, &v) in self.segments.iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                out[s.range()].copy_from_slice(g.data());
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Block {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Decoder {
    fc_w: usize,
    fc_b: usize,
    ups: Vec<Block>,
}

/// Layer structure plus index into the flat parameter vectors.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    /// Encoder, latent heads and both decoders.
    pub omega: ParamLayout,
    /// Per FT layer: shift deviation parameters, then scale deviation parameters.
    pub ft: ParamLayout,
    enc: Vec<Block>,
    heads: [(usize, usize); 3],
    dec: [Decoder; 2],
}

/// Symbolic encoder outputs on a tape, one row per image.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z_inv: Var,
    pub mu: Var,
    pub log_var: Var,
}

/// Standard-normal draws for every FT layer of one forward pass, one per image and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FtNoise<S> {
    pub omega: Vec<Vec<S>>,
    pub eta: Vec<Vec<S>>,
}

impl FtNoise<f64> {
    pub fn draw<R: Rng>(rng: &mut R, batch: usize, channels: &[usize]) -> Self {
        let mut sample = |c: usize| (0..batch * c).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let mut omega = Vec::new();
        let mut eta = Vec::new();
        for &c in channels {
            omega.push(sample(c));
            eta.push(sample(c));
        }
        Self { omega, eta }
    }

    pub fn cast<S: Scalar>(&self) -> FtNoise<S> {
        let c = |v: &Vec<Vec<f64>>| v.iter().map(|l| l.iter().map(|&x| S::from_f64(x)).collect()).collect();
        FtNoise { omega: c(&self.omega), eta: c(&self.eta) }
    }
}

/// FT parameters and noise for one forward pass.
pub struct FtInput<'a, S> {
    pub vars: &'a [Var],
    pub noise: &'a FtNoise<S>,
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut omega = ParamLayout::default();
        let mut ft = ParamLayout::default();
        let mut enc = Vec::new();
        let mut cin = config.image_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let w = omega.push(format!("enc{i}.w"), vec![c, cin, KERNEL, KERNEL]);
            let b = omega.push(format!("enc{i}.b"), vec![c]);
            let g = omega.push(format!("enc{i}.gamma"), vec![c]);
            let bt = omega.push(format!("enc{i}.beta"), vec![c]);
            ft.push(format!("ft{i}.omega"), vec![c]);
            ft.push(format!("ft{i}.eta"), vec![c]);
            enc.push(Block { w, b, norm: Some((g, bt)) });
            cin = c;
        }
        let flat = config.bottleneck_len();
        let d = config.d;
        let mut head = |name: &str| {
            (omega.push(format!("{name}.w"), vec![d, flat]), omega.push(format!("{name}.b"), vec![d]))
        };
        let heads = [head("head.inv"), head("head.mu"), head("head.log_var")];
        let mut decoder = |name: &str| {
            let fc_w = omega.push(format!("dec.{name}.fc.w"), vec![flat, d]);
            let fc_b = omega.push(format!("dec.{name}.fc.b"), vec![flat]);
            let mut ups = Vec::new();
            let n = config.channels.len();
            for i in (0..n).rev() {
                let ci = config.channels[i];
                let co = if i == 0 { config.image_channels } else { config.channels[i - 1] };
                let w = omega.push(format!("dec.{name}.up{}.w", n - 1 - i), vec![ci, co, KERNEL, KERNEL]);
                let b = omega.push(format!("dec.{name}.up{}.b", n - 1 - i), vec![co]);
                let norm = (i > 0).then(|| {
                    (
                        omega.push(format!("dec.{name}.up{}.gamma", n - 1 - i), vec![co]),
                        omega.push(format!("dec.{name}.up{}.beta", n - 1 - i), vec![co]),
                    )
                });
                ups.push(Block { w, b, norm });
            }
            Decoder { fc_w, fc_b, ups }
        };
        let dec = [decoder("sketch"), decoder("photo")];
        Ok(Self { config, omega, ft, enc, heads, dec })
    }

    /// Flat range of the invariant head (weights then bias) inside the main parameter vector.
    pub fn inv_range(&self) -> Range<usize> {
        let (w, b) = self.heads[0];
        let start = self.omega.segments[w].offset;
        let end = self.omega.segments[b].range().end;
        start..end
    }

    /// Tape leaves of the invariant head's weight and bias.
    pub fn inv_vars(&self, omega: &[Var]) -> (Var, Var) {
        let (w, b) = self.heads[0];
        (omega[w], omega[b])
    }

    pub fn ft_channels(&self) -> &[usize] {
        &self.config.channels
    }

    pub fn init_omega<R: Real>(&self, seed: u64) -> Vec<R> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![R::zero(); self.omega.len()];
        for s in &self.omega.segments {
            let name = s.name.as_str();
            let dst = &mut out[s.range()];
            let std = if name.ends_with(".w") {
                let fan_in = if name.contains(".up") {
                    s.shape[0] * KERNEL * KERNEL / 4
                } else {
                    s.shape[1..].iter().product()
                };
                let gain = if name.starts_with("head.log_var") {
                    0.1
                } else if name.starts_with("head") {
                    1.0
                } else {
                    2.0
                };
                (gain / fan_in as f64).sqrt()
            } else if name.ends_with(".gamma") {
                dst.iter_mut().for_each(|v| *v = R::one());
                continue;
            } else {
                continue;
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            dst.iter_mut().for_each(|v| *v = R::from_f64(dist.sample(&mut rng)));
        }
        out
    }

    /// FT parameters whose deviations equal the given values.
    pub fn ft_with_std<R: Real>(&self, std_omega: f64, std_eta: f64) -> Vec<R> {
        let mut out = vec![R::zero(); self.ft.len()];
        for s in &self.ft.segments {
            let v = if s.name.ends_with(".omega") { std_omega } else { std_eta };
            out[s.range()].iter_mut().for_each(|x| *x = R::from_f64(smooth_relu_inverse(v)));
        }
        out
    }

    pub fn init_ft<R: Real>(&self) -> Vec<R> {
        self.ft_with_std(self.config.ft_init_std_omega, self.config.ft_init_std_eta)
    }

    /// `x` is `[N, C, H, W]`; returns `[N, d]` heads.
    pub fn encode_on<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        omega: &[Var],
        x: Var,
        ft: Option<FtInput<'_, S>>,
    ) -> LatentVars {
        let shape = tape.shape(x).to_vec();
        assert_eq!(
            &shape[1..],
            &[self.config.image_channels, self.config.image_size, self.config.image_size],
            "encoder input shape"
        );
        let mut h = x;
        for (i, blk) in self.enc.iter().enumerate() {
            h = tape.conv2d(h, omega[blk.w], omega[blk.b], 2, 1);
            let (g, bt) = blk.norm.expect("encoder blocks are normalized");
            h = tape.instance_norm(h, omega[g], omega[bt]);
            if let Some(ft) = &ft {
                h = tape.feature_transform(
                    h,
                    ft.vars[2 * i],
                    ft.vars[2 * i + 1],
                    ft.noise.omega[i].clone(),
                    ft.noise.eta[i].clone(),
                );
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = shape[0];
        let flat = tape.reshape(h, vec![n, self.config.bottleneck_len()]);
        let mut head = |k: usize| {
            let (w, b) = self.heads[k];
            tape.linear(flat, omega[w], omega[b])
        };
        LatentVars { z_inv: head(0), mu: head(1), log_var: head(2) }
    }

    /// `z` is `[N, d]`; returns `[N, C, H, W]` in `(-1, 1)`.
    pub fn decode_on<S: Scalar>(&self, tape: &mut Tape<S>, omega: &[Var], z: Var, modality: Modality) -> Var {
        let dec = &self.dec[modality as usize];
        let n = tape.value(z).rows();
        let mut h = tape.linear(z, omega[dec.fc_w], omega[dec.fc_b]);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        let s = self.config.bottleneck_side();
        let c = *self.config.channels.last().expect("validated");
        h = tape.reshape(h, vec![n, c, s, s]);
        for blk in &dec.ups {
            h = tape.conv_transpose2d(h, omega[blk.w], omega[blk.b], 2, 1);
            match blk.norm {
                Some((g, bt)) => {
                    h = tape.instance_norm(h, omega[g], omega[bt]);
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                None => h = tape.tanh(h),
            }
        }
        h
    }
}

/// Encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z_inv: Vec<f32>,
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

/// A model with concrete single-precision parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub omega: Vec<f32>,
    pub ft: Vec<f32>,
}

const EMBED_CHUNK: usize = 32;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let omega = arch.init_omega(seed);
        let ft = arch.init_ft();
        Ok(Self { arch, omega, ft })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let c = &self.arch.config;
        ensure!(
            img.size == c.image_size && img.channels == c.image_channels,
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.channels,
            img.size,
            img.size,
            c.image_channels,
            c.image_size,
            c.image_size
        );
        Ok(())
    }

    pub fn encode_batch<R: Rng>(&self, imgs: &[&ImageTensor], ft_active: bool, rng: &mut R) -> Result<Vec<LatentCode>> {
        for img in imgs {
            self.check_image(img)?;
        }
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let c = &self.arch.config;
        let mut tape = Tape::<f32>::new();
        let omega = self.arch.omega.bind(&mut tape, &self.omega, false);
        let mut data = Vec::with_capacity(imgs.len() * imgs[0].data().len());
        for img in imgs {
            data.extend_from_slice(img.data());
        }
        let x = tape.constant(Tensor::new(vec![imgs.len(), c.image_channels, c.image_size, c.image_size], data));
        let lat = if ft_active {
            let ft_vars = self.arch.ft.bind(&mut tape, &self.ft, false);
            let noise = FtNoise::draw(rng, imgs.len(), self.arch.ft_channels()).cast::<f32>();
            self.arch.encode_on(&mut tape, &omega, x, Some(FtInput { vars: &ft_vars, noise: &noise }))
        } else {
            self.arch.encode_on(&mut tape, &omega, x, None)
        };
        let rows = |v: Var| {
            let t = tape.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
        };
        let (zi, mu, lv) = (rows(lat.z_inv), rows(lat.mu), rows(lat.log_var));
        let out: Vec<LatentCode> = zi
            .into_iter()
            .zip(mu)
            .zip(lv)
            .map(|((z_inv, mu), log_var)| LatentCode { z_inv, mu, log_var })
            .collect();
        if out.iter().any(|l| l.z_inv.iter().chain(&l.mu).chain(&l.log_var).any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    pub fn encode<R: Rng>(&self, img: &ImageTensor, ft_active: bool, rng: &mut R) -> Result<LatentCode> {
        Ok(self.encode_batch(&[img], ft_active, rng)?.remove(0))
    }

    /// Retrieval embeddings: invariant codes with FT bypassed.
    pub fn embed(&self, imgs: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<&[&ImageTensor]> = imgs.chunks(EMBED_CHUNK).collect();
        let parts = crate::par::map(&chunks, |chunk| {
            self.encode_batch(chunk, false, &mut ChaCha8Rng::seed_from_u64(0))
        });
        let mut out = Vec::with_capacity(imgs.len());
        for p in parts {
            out.extend(p?.into_iter().map(|l| l.z_inv));
        }
        Ok(out)
    }

    pub fn decode(&self, z_f: &[f32], modality: Modality) -> Result<ImageTensor> {
        let c = &self.arch.config;
        ensure!(z_f.len() == c.d, "latent has {} entries, model expects {}", z_f.len(), c.d);
        ensure!(z_f.iter().all(|v| v.is_finite()), "latent must be finite");
        let mut tape = Tape::<f32>::new();
        let omega = self.arch.omega.bind(&mut tape, &self.omega, false);
        let z = tape.constant(Tensor::new(vec![1, c.d], z_f.to_vec()));
        let y = self.arch.decode_on(&mut tape, &omega, z, modality);
        ImageTensor::new(c.image_channels, c.image_size, modality, tape.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_all_parameters_contiguously() {
        let arch = Architecture::new(ModelConfig::default()).unwrap();
        let mut next = 0;
        for s in &arch.omega.segments {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(arch.inv_range().len(), 64 * 1024 + 64);
        assert_eq!(arch.ft.len(), 2 * (16 + 32 + 64 + 64));
    }

    #[test]
    fn smooth_relu_inverse_round_trips() {
        for y in [1e-3, 0.25, 0.6, 5.0, 40.0] {
            assert!((smooth_relu(smooth_relu_inverse(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut c = ModelConfig::reduced();
        c.image_size = 6;
        assert!(Architecture::new(c).is_err());
    }
}
