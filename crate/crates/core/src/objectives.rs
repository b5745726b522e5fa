//! Loss terms and their per-phase composition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Modality;
use crate::model::{Architecture, FtInput};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub m_zinv: f64,
    pub m_zf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.001, lambda2: 1.0, lambda3: 0.7, m_zinv: 0.5, m_zf: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.m_zinv, self.m_zf];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.m_zinv <= 0.0 || self.m_zf <= 0.0 {
            return Err(Error::Config("triplet margins must be positive".into()));
        }
        Ok(())
    }
}

/// Euclidean norm of the difference.
pub fn reconstruction_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(pred.len() == target.len(), "reconstruction lengths {} / {}", pred.len(), target.len());
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `max(0, margin + ‖a−p‖² − ‖a−n‖²)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    ensure!(
        anchor.len() == positive.len() && anchor.len() == negative.len(),
        "triplet lengths {} / {} / {}",
        anchor.len(),
        positive.len(),
        negative.len()
    );
    ensure!(margin > 0.0, "triplet margin must be positive, got {margin}");
    let sq = |x: &[f64]| anchor.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    Ok((margin + sq(positive) - sq(negative)).max(0.0))
}

/// `Σ ψ_h |w_h|`.
pub fn regulariser_loss(psi: &[f64], omega_inv: &[f64]) -> Result<f64> {
    ensure!(psi.len() == omega_inv.len(), "regulariser lengths {} / {}", psi.len(), omega_inv.len());
    ensure!(psi.iter().all(|&p| p >= 0.0), "regulariser weights must be non-negative");
    Ok(psi.iter().zip(omega_inv).map(|(p, w)| p * w.abs()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Inner,
    Outer,
}

/// One sketch-photo data point inside a [`LossBatch`]; indices refer to the batch's image tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPoint {
    pub sketch: usize,
    pub photo: usize,
    pub negative: usize,
    /// Another style of the same object, supplying the style code for cross-style reconstruction.
    pub donor: Option<usize>,
}

/// Images of one loss evaluation. Sketches and photos are `[M, C, H, W]` / `[P, C, H, W]`.
#[derive(Clone, Debug)]
pub struct LossBatch<S> {
    pub sketches: Tensor<S>,
    pub photos: Tensor<S>,
    pub points: Vec<BatchPoint>,
}

impl<S: Scalar> LossBatch<S> {
    pub fn num_images(&self) -> usize {
        self.sketches.rows() + self.photos.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.sketches.rows(), self.photos.rows());
        ensure!(!self.points.is_empty(), "loss batch has no data points");
        ensure!(
            self.sketches.shape()[1..] == self.photos.shape()[1..],
            "sketch and photo shapes differ"
        );
        for pt in &self.points {
            ensure!(pt.sketch < m && pt.donor.is_none_or(|d| d < m), "sketch index out of range");
            ensure!(pt.photo < p && pt.negative < p, "photo index out of range");
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self, f: impl Fn(S) -> T + Copy) -> LossBatch<T> {
        LossBatch { sketches: self.sketches.map(f), photos: self.photos.map(f), points: self.points.clone() }
    }
}

/// Per-data-point means of each term, the raw regulariser, and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub kl: f64,
    pub tri_inv: f64,
    pub tri_f: f64,
    pub reg: f64,
    pub total: f64,
    /// Points whose cross-style term was dropped for lack of a second style.
    pub skipped_cross_style: usize,
}

/// The weighted composite from already-averaged terms.
pub fn composite(terms: &LossTerms, weights: &LossWeights, phase: Phase) -> f64 {
    let base = terms.rec + weights.lambda1 * terms.kl + weights.lambda2 * (terms.tri_inv + terms.tri_f);
    match phase {
        Phase::Inner => base + weights.lambda3 * terms.reg,
        Phase::Warmup | Phase::Outer => base,
    }
}

/// Options for [`episode_losses`] beyond the weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    /// Add photo→sketch translation to the reconstruction set.
    pub photo_to_sketch: bool,
}

/// Builds the phase's composite loss on `tape` and returns it with its breakdown.
///
/// `ft` and `psi` are only accepted in the inner phase; either may be absent there
/// (the corresponding ablations). Reparameterization noise is drawn from `rng`,
/// one standard-normal vector per encoded image, sketches first.
#[allow(clippy::too_many_arguments)]
pub fn episode_losses<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    arch: &Architecture,
    omega: &[Var],
    batch: &LossBatch<S>,
    phase: Phase,
    weights: &LossWeights,
    options: LossOptions,
    ft: Option<FtInput<'_, S>>,
    psi: Option<Var>,
    rng: &mut R,
) -> Result<(Var, LossTerms)> {
    batch.validate()?;
    ensure!(phase == Phase::Inner || (ft.is_none() && psi.is_none()), "FT and regulariser belong to the inner phase only");
    let m = batch.sketches.rows();
    let n_img = batch.num_images();
    let d = arch.config.d;
    let mut img_shape = batch.sketches.shape().to_vec();
    img_shape[0] = n_img;
    let mut pixels = batch.sketches.data().to_vec();
    pixels.extend_from_slice(batch.photos.data());
    let images = tape.constant(Tensor::new(img_shape, pixels));

    let lat = arch.encode_on(tape, omega, images, ft);
    let eps: Vec<S> = (0..n_img * d).map(|_| S::from_f64(StandardNormal.sample(rng))).collect();
    let z_var = tape.reparam(lat.mu, lat.log_var, eps);
    let z_f = tape.add(lat.z_inv, z_var);

    let pts = &batch.points;
    let s_rows: Vec<usize> = pts.iter().map(|p| p.sketch).collect();
    let p_rows: Vec<usize> = pts.iter().map(|p| m + p.photo).collect();
    let n_rows: Vec<usize> = pts.iter().map(|p| m + p.negative).collect();
    let crossed: Vec<&BatchPoint> = pts.iter().filter(|p| p.donor.is_some()).collect();
    let skipped = pts.len() - crossed.len();
    if skipped > 0 {
        log::debug!("{skipped} data points without a second style; cross-style term skipped");
    }

    // Sketch head: self reconstruction, cross-style, optional photo→sketch.
    let mut sk_in = vec![tape.gather(z_f, &s_rows)];
    let mut sk_tgt = s_rows.clone();
    let mut kl_rows = s_rows.clone();
    if !crossed.is_empty() {
        let own: Vec<usize> = crossed.iter().map(|p| p.sketch).collect();
        let donors: Vec<usize> = crossed.iter().map(|p| p.donor.expect("filtered")).collect();
        let zi = tape.gather(lat.z_inv, &own);
        let zv = tape.gather(z_var, &donors);
        sk_in.push(tape.add(zi, zv));
        sk_tgt.extend(&own);
        kl_rows.extend(&donors);
    }
    if options.photo_to_sketch {
        sk_in.push(tape.gather(z_f, &p_rows));
        sk_tgt.extend(&s_rows);
        kl_rows.extend(&p_rows);
    }
    // Photo head: self reconstruction and sketch→photo translation.
    let ph_in = [tape.gather(z_f, &p_rows), tape.gather(z_f, &s_rows)];
    let ph_tgt: Vec<usize> = p_rows.iter().chain(&p_rows).copied().collect();
    kl_rows.extend(&p_rows);
    kl_rows.extend(&s_rows);

    let sk_z = tape.concat_rows(&sk_in);
    let ph_z = tape.concat_rows(&ph_in);
    let sk_pred = arch.decode_on(tape, omega, sk_z, Modality::Sketch);
    let ph_pred = arch.decode_on(tape, omega, ph_z, Modality::Photo);
    let sk_t = tape.gather(images, &sk_tgt);
    let ph_t = tape.gather(images, &ph_tgt);
    let pix = arch.config.image_channels * arch.config.image_size * arch.config.image_size;
    let mut rec_norm = |pred: Var, tgt: Var| {
        let diff = tape.sub(pred, tgt);
        let rows = tape.value(diff).rows();
        let flat = tape.reshape(diff, vec![rows, pix]);
        tape.row_norm(flat)
    };
    let rec_rows = [rec_norm(sk_pred, sk_t), rec_norm(ph_pred, ph_t)];
    let rec_all = tape.concat_rows(&rec_rows);
    let rec = tape.sum(rec_all);

    let kl_each = tape.row_kl(lat.mu, lat.log_var);
    let kl_sel = tape.gather(kl_each, &kl_rows);
    let kl = tape.sum(kl_sel);

    let mut triplet = |z: Var, margin: f64| {
        let a = tape.gather(z, &s_rows);
        let p = tape.gather(z, &p_rows);
        let n = tape.gather(z, &n_rows);
        let t = tape.triplet(a, p, n, margin);
        tape.sum(t)
    };
    let tri_inv = triplet(lat.z_inv, weights.m_zinv);
    let tri_f = triplet(z_f, weights.m_zf);

    let inv_pts = 1.0 / pts.len() as f64;
    let kl_w = tape.scale(kl, weights.lambda1);
    let tri = tape.add(tri_inv, tri_f);
    let tri_w = tape.scale(tri, weights.lambda2);
    let mut total = tape.add(rec, kl_w);
    total = tape.add(total, tri_w);
    total = tape.scale(total, inv_pts);

    let mut reg_value = 0.0;
    if let Some(psi) = psi {
        let (w, b) = arch.inv_vars(omega);
        let wl = tape.value(w).numel();
        let bl = tape.value(b).numel();
        let wc = tape.reshape(w, vec![wl, 1]);
        let bc = tape.reshape(b, vec![bl, 1]);
        let inv = tape.concat_rows(&[wc, bc]);
        let reg = tape.weighted_abs(psi, inv);
        reg_value = tape.value(reg).item().re();
        let reg_w = tape.scale(reg, weights.lambda3);
        total = tape.add(total, reg_w);
    }

    let v = |tape: &Tape<S>, x: Var| tape.value(x).item().re() * inv_pts;
    let terms = LossTerms {
        rec: v(tape, rec),
        kl: v(tape, kl),
        tri_inv: v(tape, tri_inv),
        tri_f: v(tape, tri_f),
        reg: reg_value,
        total: tape.value(total).item().re(),
        skipped_cross_style: skipped,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("{phase:?} loss")));
    }
    Ok((total, terms))
}
