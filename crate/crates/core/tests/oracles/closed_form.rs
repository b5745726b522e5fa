//! Worked examples for the model primitives and the loss terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use smup_core::image::{ImageTensor, Modality};
use smup_core::model::{
    fuse, ft_transform, kl_divergence, reparameterize, smooth_relu, Architecture, Model, ModelConfig,
};
use smup_core::objectives::{
    episode_losses, reconstruction_loss, regulariser_loss, triplet_loss, BatchPoint, LossBatch, LossOptions,
    LossTerms, LossWeights, Phase,
};
use smup_core::tape::Tape;
use smup_core::tensor::Tensor;

use super::{close, holds, Case, Outcome};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn cases() -> Vec<Case> {
    vec![
        ("smooth_relu(0) = ln 2", smooth_relu_zero),
        ("smooth_relu(-40) < 1e-15", smooth_relu_far_left),
        ("smooth_relu(10) = 10.0000454", smooth_relu_ten),
        ("reparameterize examples", reparameterize_examples),
        ("reparameterize distribution", reparameterize_distribution),
        ("fuse examples", fuse_examples),
        ("ft_transform limit and substitution", ft_transform_examples),
        ("ft_transform eta mean", ft_transform_eta_mean),
        ("encode shape and determinism", encode_contracts),
        ("encode with vanishing FT", encode_ft_limit),
        ("decode range, shape, determinism", decode_contracts),
        ("kl examples", kl_examples),
        ("kl against Monte Carlo", kl_monte_carlo),
        ("kl non-negative", kl_non_negative),
        ("reconstruction examples", reconstruction_examples),
        ("triplet examples", triplet_examples),
        ("triplet rotation invariance", triplet_rotation_invariance),
        ("regulariser examples", regulariser_examples),
        ("loss weight defaults", weight_defaults),
        ("episode loss vanishes", episode_zero_total),
        ("inner minus outer is the regulariser", episode_phase_difference),
        ("episode loss against term-by-term recomputation", episode_composition),
        ("zero weights leave reconstruction", episode_reconstruction_only),
    ]
}

fn smooth_relu_zero() -> Outcome {
    close("ln2", smooth_relu(0.0), 0.693147, 1e-6)
}

fn smooth_relu_far_left() -> Outcome {
    let v = smooth_relu(-40.0);
    holds((0.0..1e-15).contains(&v), || format!("got {v}"))
}

fn smooth_relu_ten() -> Outcome {
    // log(1+e^10) = 10 + log(1+e^-10); the tail series converges fast.
    let t = (-10f64).exp();
    let oracle = 10.0 + (1..30).map(|k| (-1f64).powi(k + 1) * t.powi(k) / k as f64).sum::<f64>();
    close("oracle", smooth_relu(10.0), oracle, 1e-12)?;
    close("stated", smooth_relu(10.0), 10.0000454, 5e-8)
}

fn reparameterize_examples() -> Outcome {
    let z = e(reparameterize(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -1.0]))?;
    close("z0", z[0], 1.5, 1e-12)?;
    close("z1", z[1], 1.0, 1e-12)?;
    let z = e(reparameterize(&[0.0], &[2.0 * 2f64.ln()], &[1.0]))?;
    close("sigma 2", z[0], 2.0, 1e-12)?;
    let mut r = rng(1);
    let mu = normals(&mut r, 16);
    let lv: Vec<f64> = normals(&mut r, 16).iter().map(|v| 3.0 * v).collect();
    let z = e(reparameterize(&mu, &lv, &[0.0; 16]))?;
    holds(z == mu, || "eps = 0 does not return mu".into())?;
    holds(reparameterize(&[0.0], &[0.0, 1.0], &[0.0]).is_err(), || "length mismatch accepted".into())
}

fn reparameterize_distribution() -> Outcome {
    let n = 100_000;
    let (mu, lv) = (0.3, (0.25f64).ln());
    let mut r = rng(2);
    let eps = normals(&mut r, n);
    let z = e(reparameterize(&vec![mu; n], &vec![lv; n], &eps))?;
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma2 = lv.exp();
    close("mean", mean, mu, 4.0 * (sigma2 / n as f64).sqrt())?;
    close("variance", var, sigma2, 4.0 * sigma2 * (2.0 / (n - 1) as f64).sqrt())
}

fn fuse_examples() -> Outcome {
    holds(e(fuse(&[1.0, 2.0], &[3.0, 4.0]))? == [4.0, 6.0], || "(1,2)+(3,4)".into())?;
    holds(e(fuse(&[-1.0, 1.0], &[1.0, -1.0]))? == [0.0, 0.0], || "cancellation".into())?;
    let z = normals(&mut rng(3), 64);
    holds(e(fuse(&z, &[0.0; 64]))? == z, || "additive identity".into())?;
    holds(fuse(&[1.0], &[1.0, 2.0]).is_err(), || "length mismatch accepted".into())
}

fn ft_transform_examples() -> Outcome {
    let mut r = rng(4);
    let (c, plane) = (3, 5);
    let f = normals(&mut r, c * plane);
    let eo: Vec<f64> = normals(&mut r, c).iter().map(|v| 10.0 * v).collect();
    let ee: Vec<f64> = normals(&mut r, c).iter().map(|v| 10.0 * v).collect();
    let out = e(ft_transform(&f, c, &[-40.0; 3], &[-40.0; 3], &eo, &ee))?;
    let dev = out.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    holds(dev < 1e-6, || format!("phi = -40 deviates by {dev}"))?;

    let phi = [-1.0, 0.0, 2.0];
    let out = e(ft_transform(&f, c, &phi, &[0.3; 3], &[1.0; 3], &[0.0; 3]))?;
    for ch in 0..c {
        let s = smooth_relu(phi[ch]);
        for i in 0..plane {
            close("F + s", out[ch * plane + i], f[ch * plane + i] + s, 1e-12)?;
        }
    }
    holds(ft_transform(&f, 2, &[0.0; 2], &[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err(), || {
        "indivisible feature map accepted".into()
    })
}

fn ft_transform_eta_mean() -> Outcome {
    let n = 10_000;
    let phi_eta = 0.4;
    let s = smooth_relu(phi_eta);
    let mut r = rng(5);
    let mut sum = 0.0;
    for _ in 0..n {
        let eps: f64 = StandardNormal.sample(&mut r);
        // A unit feature with no bias shift reads out η directly.
        sum += e(ft_transform(&[1.0], 1, &[0.0], &[phi_eta], &[0.0], &[eps]))?[0];
    }
    close("mean eta", sum / n as f64, 1.0, 4.0 * s / (n as f64).sqrt())
}

fn random_image(r: &mut ChaCha8Rng, cfg: &ModelConfig, modality: Modality) -> ImageTensor {
    let n = cfg.image_channels * cfg.image_size * cfg.image_size;
    let data = (0..n).map(|_| r.random_range(-1.0f32..=1.0)).collect();
    ImageTensor::new(cfg.image_channels, cfg.image_size, modality, data).expect("valid image")
}

fn encode_contracts() -> Outcome {
    let model = e(Model::new(ModelConfig::default(), 7))?;
    let cfg = &model.arch.config;
    holds(cfg.image_size == 64 && cfg.d == 64, || "default config is not 64x64, d = 64".into())?;
    let img = random_image(&mut rng(6), cfg, Modality::Sketch);
    let a = e(model.encode(&img, false, &mut rng(0)))?;
    let b = e(model.encode(&img, false, &mut rng(99)))?;
    holds(a.z_inv.len() == 64 && a.mu.len() == 64 && a.log_var.len() == 64, || "latent lengths".into())?;
    holds(a == b, || "FT-off encoding is not deterministic".into())?;
    let small = random_image(&mut rng(6), &ModelConfig::reduced(), Modality::Sketch);
    holds(model.encode(&small, false, &mut rng(0)).is_err(), || "wrong image size accepted".into())
}

fn encode_ft_limit() -> Outcome {
    let mut model = e(Model::new(ModelConfig::default(), 8))?;
    model.ft.iter_mut().for_each(|v| *v = -40.0);
    let img = random_image(&mut rng(9), &model.arch.config, Modality::Photo);
    let on = e(model.encode(&img, true, &mut rng(1)))?;
    let off = e(model.encode(&img, false, &mut rng(1)))?;
    let dev = on.z_inv.iter().zip(&off.z_inv).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    holds(dev < 1e-5, || format!("max-norm difference {dev}"))
}

fn decode_contracts() -> Outcome {
    let model = e(Model::new(ModelConfig::default(), 10))?;
    let cfg = model.arch.config.clone();
    let mut r = rng(11);
    for modality in [Modality::Sketch, Modality::Photo] {
        for _ in 0..4 {
            let z: Vec<f32> = normals(&mut r, cfg.d).iter().map(|&v| v as f32).collect();
            let a = e(model.decode(&z, modality))?;
            holds(a.channels == cfg.image_channels && a.size == cfg.image_size, || "decoded shape".into())?;
            holds(a.data().iter().all(|v| -1.0 < *v && *v < 1.0), || "pixel outside (-1, 1)".into())?;
            holds(a == e(model.decode(&z, modality))?, || "decode not deterministic".into())?;
        }
    }
    holds(model.decode(&[0.0; 3], Modality::Sketch).is_err(), || "short latent accepted".into())
}

fn kl_examples() -> Outcome {
    close("prior", e(kl_divergence(&[0.0; 5], &[0.0; 5]))?, 0.0, 1e-15)?;
    close("d=1", e(kl_divergence(&[1.0], &[0.0]))?, 0.5, 1e-15)?;
    close("d=2", e(kl_divergence(&[0.0, 0.0], &[1.0, 1.0]))?, std::f64::consts::E - 2.0, 1e-12)?;
    close("stated", e(kl_divergence(&[0.0, 0.0], &[1.0, 1.0]))?, 0.718282, 1e-6)?;
    holds(kl_divergence(&[f64::NAN], &[0.0]).is_err(), || "NaN accepted".into())
}

fn kl_monte_carlo() -> Outcome {
    // E_q[log q(z) - log p(z)] with q = N(0, e·I), p = N(0, I).
    let n = 100_000;
    let (lv, d) = (1.0f64, 2);
    let sigma = (lv / 2.0).exp();
    let mut r = rng(12);
    let mut sum = 0.0;
    for _ in 0..n {
        for _ in 0..d {
            let eps: f64 = StandardNormal.sample(&mut r);
            let z = sigma * eps;
            sum += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
        }
    }
    let mc = sum / n as f64;
    let exact = e(kl_divergence(&[0.0, 0.0], &[lv, lv]))?;
    holds((mc - exact).abs() <= 0.02 * exact, || format!("Monte Carlo {mc} vs closed form {exact}"))
}

fn kl_non_negative() -> Outcome {
    let mut r = rng(13);
    for _ in 0..10_000 {
        let d = r.random_range(1..6);
        let mu: Vec<f64> = normals(&mut r, d).iter().map(|v| 3.0 * v).collect();
        let lv: Vec<f64> = normals(&mut r, d).iter().map(|v| 3.0 * v).collect();
        let kl = e(kl_divergence(&mu, &lv))?;
        holds(kl >= 0.0, || format!("KL {kl} for mu {mu:?}, log_var {lv:?}"))?;
    }
    Ok(())
}

fn reconstruction_examples() -> Outcome {
    let x = normals(&mut rng(14), 32);
    close("identical", e(reconstruction_loss(&x, &x))?, 0.0, 0.0)?;
    close("ones", e(reconstruction_loss(&[1.0; 16], &[0.0; 16]))?, 4.0, 1e-15)?;
    let mut r = rng(15);
    let (a, b) = (normals(&mut r, 4096), normals(&mut r, 4096));
    let mut acc = 0.0;
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        acc += diff * diff;
    }
    close("element loop", e(reconstruction_loss(&a, &b))?, acc.sqrt(), 1e-10)?;
    holds(reconstruction_loss(&[0.0; 3], &[0.0; 4]).is_err(), || "shape mismatch accepted".into())
}

fn triplet_examples() -> Outcome {
    let a = [0.0, 0.0];
    close("0.3", e(triplet_loss(&a, &[0.2f64.sqrt(), 0.0], &[0.0, 0.4f64.sqrt()], 0.5))?, 0.3, 1e-12)?;
    close("inactive", e(triplet_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0 + 0.6f64.sqrt()], 0.5))?, 0.0, 0.0)?;
    close("1.1", e(triplet_loss(&a, &[1.0, 0.0], &[0.0, 0.2f64.sqrt()], 0.3))?, 1.1, 1e-12)?;
    holds(triplet_loss(&a, &a, &[0.0], 0.3).is_err(), || "dimension mismatch accepted".into())?;
    holds(triplet_loss(&a, &a, &a, 0.0).is_err(), || "zero margin accepted".into())
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
fn orthogonal(r: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = normals(r, d);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

fn apply(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn triplet_rotation_invariance() -> Outcome {
    let mut r = rng(16);
    let d = 8;
    for _ in 0..100 {
        let q = orthogonal(&mut r, d);
        let (a, p, n) = (normals(&mut r, d), normals(&mut r, d), normals(&mut r, d));
        let margin = r.random_range(0.1..4.0);
        let before = e(triplet_loss(&a, &p, &n, margin))?;
        let after = e(triplet_loss(&apply(&q, &a), &apply(&q, &p), &apply(&q, &n), margin))?;
        close("rotated", after, before, 1e-8)?;
    }
    Ok(())
}

fn regulariser_examples() -> Outcome {
    close("4.0", e(regulariser_loss(&[1.0, 2.0], &[-3.0, 0.5]))?, 4.0, 1e-15)?;
    let mut r = rng(17);
    let w = normals(&mut r, 10);
    let psi: Vec<f64> = normals(&mut r, 10).iter().map(|v| v.abs()).collect();
    close("psi = 0", e(regulariser_loss(&[0.0; 10], &w))?, 0.0, 0.0)?;
    close("omega = 0", e(regulariser_loss(&psi, &[0.0; 10]))?, 0.0, 0.0)?;
    let base = e(regulariser_loss(&psi, &w))?;
    for c in [1e-3, 0.5, 2.0, 37.0] {
        let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
        close("homogeneity", e(regulariser_loss(&psi, &scaled))?, c * base, 1e-12 * c.max(1.0) * base)?;
    }
    holds(regulariser_loss(&[-1.0], &[1.0]).is_err(), || "negative weight accepted".into())?;
    holds(regulariser_loss(&[1.0], &[1.0, 2.0]).is_err(), || "length mismatch accepted".into())
}

fn weight_defaults() -> Outcome {
    let w = LossWeights::default();
    holds(
        (w.lambda1, w.lambda2, w.lambda3, w.m_zinv, w.m_zf) == (0.001, 1.0, 0.7, 0.5, 0.3),
        || format!("{w:?}"),
    )
}

/// Tiny episode on the reduced model: sketches 0..3, photos 0..3.
struct Episode {
    arch: Architecture,
    omega: Vec<f64>,
    batch: LossBatch<f64>,
}

fn episode(seed: u64) -> Episode {
    let arch = Architecture::new(ModelConfig::reduced()).expect("reduced config");
    let omega = arch.init_omega(seed);
    let c = &arch.config;
    let pix = c.image_channels * c.image_size * c.image_size;
    let mut r = rng(seed + 100);
    let mut images = |n: usize| {
        let data = (0..n * pix).map(|_| r.random_range(-1.0..=1.0)).collect();
        Tensor::new(vec![n, c.image_channels, c.image_size, c.image_size], data)
    };
    let batch = LossBatch {
        sketches: images(3),
        photos: images(3),
        points: vec![
            BatchPoint { sketch: 0, photo: 0, negative: 1, donor: Some(2) },
            BatchPoint { sketch: 1, photo: 1, negative: 2, donor: None },
            BatchPoint { sketch: 2, photo: 2, negative: 0, donor: Some(0) },
        ],
    };
    Episode { arch, omega, batch }
}

fn psi_for(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..arch.inv_range().len()).map(|_| r.random_range(0.0..0.01)).collect()
}

fn losses(ep: &Episode, phase: Phase, weights: &LossWeights, psi: Option<&[f64]>, noise: u64) -> Result<LossTerms, String> {
    let mut tape = Tape::<f64>::new();
    let w = ep.arch.omega.bind(&mut tape, &ep.omega, false);
    let p = psi.map(|p| tape.constant(Tensor::new(vec![p.len(), 1], p.to_vec())));
    let opts = LossOptions::default();
    let (_, terms) =
        e(episode_losses(&mut tape, &ep.arch, &w, &ep.batch, phase, weights, opts, None, p, &mut rng(noise)))?;
    Ok(terms)
}

fn episode_zero_total() -> Outcome {
    let mut ep = episode(20);
    let arch = &ep.arch;
    for s in &arch.omega.segments {
        let range = s.range();
        if s.name.starts_with("head.mu") || s.name.starts_with("head.log_var") || s.name.starts_with("dec.") {
            ep.omega[range].iter_mut().for_each(|v| *v = 0.0);
        } else if s.name.starts_with("head.inv") {
            // Pushes the negative far past both margins.
            ep.omega[range].iter_mut().for_each(|v| *v *= 1e3);
        }
    }
    let c = &arch.config;
    let pix = c.image_channels * c.image_size * c.image_size;
    let shape = vec![1, c.image_channels, c.image_size, c.image_size];
    let mut photos = vec![0.0; pix];
    photos.extend(ep.batch.photos.row(1).iter().copied());
    ep.batch = LossBatch {
        sketches: Tensor::new(shape.clone(), vec![0.0; pix]),
        photos: Tensor::new(vec![2, shape[1], shape[2], shape[3]], photos),
        points: vec![BatchPoint { sketch: 0, photo: 0, negative: 1, donor: None }],
    };
    let t = losses(&ep, Phase::Outer, &LossWeights::default(), None, 1)?;
    holds(t.total == 0.0 && t.rec == 0.0 && t.kl == 0.0 && t.tri_inv == 0.0 && t.tri_f == 0.0, || {
        format!("{t:?}")
    })
}

fn episode_phase_difference() -> Outcome {
    let ep = episode(21);
    let psi = psi_for(&ep.arch, 22);
    let w = LossWeights::default();
    let inner = losses(&ep, Phase::Inner, &w, Some(&psi), 3)?;
    let outer = losses(&ep, Phase::Outer, &w, None, 3)?;
    holds(inner.reg > 0.0 && outer.total < inner.total, || format!("inner {inner:?}, outer {outer:?}"))?;
    close("difference", inner.total - outer.total, w.lambda3 * inner.reg, 1e-10)
}

fn episode_composition() -> Outcome {
    let ep = episode(23);
    let psi = psi_for(&ep.arch, 24);
    let weights = LossWeights { lambda1: 0.4, lambda2: 1.3, lambda3: 0.7, m_zinv: 2.0, m_zf: 1.5 };
    let noise = 5;
    let got = losses(&ep, Phase::Inner, &weights, Some(&psi), noise)?;

    let arch = &ep.arch;
    let c = &arch.config;
    let m = ep.batch.sketches.rows();
    let n_img = m + ep.batch.photos.rows();
    let pixels: Vec<Vec<f64>> = (0..m)
        .map(|i| ep.batch.sketches.row(i).to_vec())
        .chain((0..n_img - m).map(|i| ep.batch.photos.row(i).to_vec()))
        .collect();
    // Per-image encodings, each on its own tape.
    let mut z_inv = Vec::new();
    let mut mu = Vec::new();
    let mut lv = Vec::new();
    for px in &pixels {
        let mut tape = Tape::<f64>::new();
        let w = arch.omega.bind(&mut tape, &ep.omega, false);
        let x = tape.constant(Tensor::new(vec![1, c.image_channels, c.image_size, c.image_size], px.clone()));
        let lat = arch.encode_on(&mut tape, &w, x, None);
        z_inv.push(tape.value(lat.z_inv).data().to_vec());
        mu.push(tape.value(lat.mu).data().to_vec());
        lv.push(tape.value(lat.log_var).data().to_vec());
    }
    let mut r = rng(noise);
    let z_var: Vec<Vec<f64>> =
        (0..n_img).map(|i| reparameterize(&mu[i], &lv[i], &normals(&mut r, c.d))).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let z_f: Vec<Vec<f64>> = (0..n_img).map(|i| fuse(&z_inv[i], &z_var[i])).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let decode = |z: &[f64], modality: Modality| {
        let mut tape = Tape::<f64>::new();
        let w = arch.omega.bind(&mut tape, &ep.omega, false);
        let zv = tape.constant(Tensor::new(vec![1, c.d], z.to_vec()));
        let y = arch.decode_on(&mut tape, &w, zv, modality);
        tape.value(y).data().to_vec()
    };
    let kl = |i: usize| kl_divergence(&mu[i], &lv[i]).expect("finite");
    let (mut rec, mut kl_sum, mut tri_inv, mut tri_f) = (0.0, 0.0, 0.0, 0.0);
    for pt in &ep.batch.points {
        let (s, p, n) = (pt.sketch, m + pt.photo, m + pt.negative);
        rec += e(reconstruction_loss(&decode(&z_f[s], Modality::Sketch), &pixels[s]))?;
        rec += e(reconstruction_loss(&decode(&z_f[p], Modality::Photo), &pixels[p]))?;
        rec += e(reconstruction_loss(&decode(&z_f[s], Modality::Photo), &pixels[p]))?;
        kl_sum += 2.0 * kl(s) + kl(p);
        if let Some(k) = pt.donor {
            let crossed = e(fuse(&z_inv[s], &z_var[k]))?;
            rec += e(reconstruction_loss(&decode(&crossed, Modality::Sketch), &pixels[s]))?;
            kl_sum += kl(k);
        }
        tri_inv += e(triplet_loss(&z_inv[s], &z_inv[p], &z_inv[n], weights.m_zinv))?;
        tri_f += e(triplet_loss(&z_f[s], &z_f[p], &z_f[n], weights.m_zf))?;
    }
    let inv: Vec<f64> = ep.omega[arch.inv_range()].to_vec();
    let reg = e(regulariser_loss(&psi, &inv))?;
    let np = ep.batch.points.len() as f64;
    let total = (rec + weights.lambda1 * kl_sum + weights.lambda2 * (tri_inv + tri_f)) / np + weights.lambda3 * reg;

    close("rec", got.rec, rec / np, 1e-8)?;
    close("kl", got.kl, kl_sum / np, 1e-8)?;
    close("tri_inv", got.tri_inv, tri_inv / np, 1e-8)?;
    close("tri_f", got.tri_f, tri_f / np, 1e-8)?;
    close("reg", got.reg, reg, 1e-8)?;
    close("total", got.total, total, 1e-8)?;
    holds(got.skipped_cross_style == 1, || format!("skipped {}", got.skipped_cross_style))
}

fn episode_reconstruction_only() -> Outcome {
    let ep = episode(25);
    let psi = psi_for(&ep.arch, 26);
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
    let t = losses(&ep, Phase::Inner, &zero, Some(&psi), 4)?;
    holds(t.kl > 0.0 && t.reg > 0.0, || format!("{t:?}"))?;
    close("total = rec", t.total, t.rec, 1e-12)
}
