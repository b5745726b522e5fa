//! Reverse-mode autodiff over a recorded tape of coarse tensor ops.
//!
//! Every op's backward rule is written in terms of the generic [`Scalar`], so the
//! same tape differentiates `f32`/`f64` programs and, over [`crate::scalar::Dual`]
//! inputs, produces Hessian-vector products in the tangent of the gradient.

use crate::kernels::{batch_to_channel_major, channel_to_batch_major, col2im, im2col, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Param,
    Const,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<S> },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom, xmat: Vec<S> },
    Linear { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    FeatureTransform { x: Var, phi_omega: Var, phi_eta: Var, eps_omega: Vec<S>, eps_eta: Vec<S> },
    LeakyRelu { x: Var, slope: f64 },
    Tanh { x: Var },
    Reshape { x: Var },
    Gather { x: Var, rows: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: S },
    Reparam { mu: Var, log_var: Var, eps: Vec<S> },
    RowNorm { x: Var },
    RowKl { mu: Var, log_var: Var },
    Triplet { a: Var, p: Var, n: Var },
    WeightedAbs { psi: Var, w: Var },
    Sum { x: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every `param` leaf.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn acc<S: Scalar>(slot: &mut Option<Tensor<S>>, shape: &[usize], data: Vec<S>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), data)),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Param, true)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Const, false)
    }

    /// `x[N,C,H,W] * w[O,C,K,K] + b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out_c = ws[0];
        let cols = im2col(self.value(x).data(), geom);
        let ncols = geom.cols();
        let kk = geom.patch_len();
        let mut out_mat = vec![S::zero(); out_c * ncols];
        S::gemm(
            out_c,
            kk,
            ncols,
            self.value(w).data(),
            (kk as isize, 1),
            &cols,
            (ncols as isize, 1),
            &mut out_mat,
            (ncols as isize, 1),
            false,
        );
        let mut out = channel_to_batch_major(&out_mat, geom.batch, out_c, oh * ow);
        let bias = self.value(b).data();
        for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bo = bias[i % out_c];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(vec![geom.batch, out_c, oh, ow], out),
            Op::Conv2d { x, w, b, geom, cols },
            ng,
        )
    }

    /// Transposed convolution, `w[Ci, Co, K, K]`; output side `(H-1)*stride - 2*pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(ws[0], xs[1], "conv_transpose2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom { batch: n, channels: co, height: oh, width: ow, kernel: k, stride, pad };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let p_in = h * wd;
        let xmat = batch_to_channel_major(self.value(x).data(), n, ci, p_in);
        let kk = geom.patch_len();
        let ncols = n * p_in;
        let mut cols = vec![S::zero(); kk * ncols];
        // cols = W^T xmat with W viewed as [Ci, Co*K*K].
        S::gemm(
            kk,
            ci,
            ncols,
            self.value(w).data(),
            (1, kk as isize),
            &xmat,
            (ncols as isize, 1),
            &mut cols,
            (ncols as isize, 1),
            false,
        );
        let mut out = col2im(&cols, geom);
        let bias = self.value(b).data();
        for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bo = bias[i % co];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(vec![n, co, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom, xmat },
            ng,
        )
    }

    /// `x[N,I] w[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, i) = (self.value(x).rows(), self.value(x).row_len());
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[1], i, "linear input width mismatch");
        let o = ws[0];
        let mut out = vec![S::zero(); n * o];
        S::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            &mut out,
            (o as isize, 1),
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, ng)
    }

    /// Per-sample, per-channel normalization over spatial positions with affine `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let p: usize = xs[2..].iter().product();
        let eps = S::from_f64(INSTANCE_NORM_EPS);
        let pinv = S::from_f64(1.0 / p as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); n * c];
        let mut out = vec![S::zero(); xd.len()];
        for nc in 0..n * c {
            let ch = nc % c;
            let src = &xd[nc * p..][..p];
            let mut mean = S::zero();
            for &v in src {
                mean += v;
            }
            mean *= pinv;
            let mut var = S::zero();
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var *= pinv;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[nc] = inv;
            for j in 0..p {
                let h = (src[j] - mean) * inv;
                xhat[nc * p + j] = h;
                out[nc * p + j] = g[ch] * h + bt[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(xs, out), Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// `η ⊙ F + ω` with `ω = softplus(φ_ω)·ε_ω`, `η = 1 + softplus(φ_η)·ε_η`, one draw per sample and channel.
    pub fn feature_transform(
        &mut self,
        x: Var,
        phi_omega: Var,
        phi_eta: Var,
        eps_omega: Vec<S>,
        eps_eta: Vec<S>,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let p: usize = xs[2..].iter().product();
        assert_eq!(self.value(phi_omega).numel(), c, "FT channel mismatch");
        assert_eq!(self.value(phi_eta).numel(), c, "FT channel mismatch");
        assert_eq!(eps_omega.len(), n * c);
        assert_eq!(eps_eta.len(), n * c);
        let sw: Vec<S> = self.value(phi_omega).data().iter().map(|v| v.softplus()).collect();
        let se: Vec<S> = self.value(phi_eta).data().iter().map(|v| v.softplus()).collect();
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        for nc in 0..n * c {
            let ch = nc % c;
            let eta = S::one() + se[ch] * eps_eta[nc];
            let omega = sw[ch] * eps_omega[nc];
            for j in 0..p {
                out[nc * p + j] = eta * xd[nc * p + j] + omega;
            }
        }
        let ng = self.ng(x) || self.ng(phi_omega) || self.ng(phi_eta);
        self.push(
            Tensor::new(xs, out),
            Op::FeatureTransform { x, phi_omega, phi_eta, eps_omega, eps_eta },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = S::from_f64(slope);
        let out = self.value(x).map(|v| if v.re() > 0.0 { v } else { v * s });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// Select rows (leading index) of `x`, repeats allowed.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let l = t.row_len();
        let mut data = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::Gather { x, rows: rows.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat_rows trailing shape mismatch");
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, data), Op::ConcatRows { parts: parts.to_vec() }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Sub { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    /// `μ + exp(½ log σ²) ⊙ ε`.
    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: Vec<S>) -> Var {
        assert_eq!(self.shape(mu), self.shape(log_var), "reparam shape mismatch");
        assert_eq!(self.value(mu).numel(), eps.len(), "reparam noise length mismatch");
        let half = S::from_f64(0.5);
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        let ng = self.ng(mu) || self.ng(log_var);
        self.push(Tensor::new(shape, data), Op::Reparam { mu, log_var, eps }, ng)
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().fold(S::zero(), |a, &v| a + v * v).sqrt()).collect();
        let n = t.rows();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], data), Op::RowNorm { x }, ng)
    }

    /// `½ Σ (μ² + σ² − 1 − log σ²)` per row.
    pub fn row_kl(&mut self, mu: Var, log_var: Var) -> Var {
        assert_eq!(self.shape(mu), self.shape(log_var), "kl shape mismatch");
        let m = self.value(mu);
        let lv = self.value(log_var);
        let half = S::from_f64(0.5);
        let data = (0..m.rows())
            .map(|r| {
                let mut s = S::zero();
                for (&a, &l) in m.row(r).iter().zip(lv.row(r)) {
                    s += a * a + l.exp() - S::one() - l;
                }
                s * half
            })
            .collect();
        let n = m.rows();
        let ng = self.ng(mu) || self.ng(log_var);
        self.push(Tensor::new(vec![n], data), Op::RowKl { mu, log_var }, ng)
    }

    /// Row-wise `max(0, margin + ‖a−p‖² − ‖a−n‖²)`.
    pub fn triplet(&mut self, a: Var, p: Var, n: Var, margin: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(p), "triplet shape mismatch");
        assert_eq!(self.shape(a), self.shape(n), "triplet shape mismatch");
        let margin = S::from_f64(margin);
        let (ta, tp, tn) = (self.value(a), self.value(p), self.value(n));
        let data = (0..ta.rows())
            .map(|r| {
                let mut t = margin;
                for ((&x, &y), &z) in ta.row(r).iter().zip(tp.row(r)).zip(tn.row(r)) {
                    t += (x - y) * (x - y) - (x - z) * (x - z);
                }
                if t.re() > 0.0 {
                    t
                } else {
                    S::zero()
                }
            })
            .collect();
        let rows = ta.rows();
        let ng = self.ng(a) || self.ng(p) || self.ng(n);
        self.push(Tensor::new(vec![rows], data), Op::Triplet { a, p, n }, ng)
    }

    /// `Σ ψ_h |w_h|`.
    pub fn weighted_abs(&mut self, psi: Var, w: Var) -> Var {
        assert_eq!(self.value(psi).numel(), self.value(w).numel(), "regulariser length mismatch");
        let s = self
            .value(psi)
            .data()
            .iter()
            .zip(self.value(w).data())
            .fold(S::zero(), |acc, (&p, &x)| acc + p * x.abs());
        let ng = self.ng(psi) || self.ng(w);
        self.push(Tensor::scalar(s), Op::WeightedAbs { psi, w }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &v| a + v);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Gradients of the scalar `out` with respect to every param leaf.
    pub fn backward(&self, out: Var) -> Grads<S> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.shape(out).to_vec(), vec![S::one()]));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        let put = |grads: &mut [Option<Tensor<S>>], v: Var, data: Vec<S>| {
            if self.ng(v) {
                acc(&mut grads[v.0], self.shape(v), data);
            }
        };
        match &node.op {
            Op::Param | Op::Const => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let out_c = self.shape(*w)[0];
                let (oh, ow) = geom.out_hw();
                let plane = oh * ow;
                let ncols = geom.cols();
                let kk = geom.patch_len();
                let gmat = batch_to_channel_major(gd, geom.batch, out_c, plane);
                if self.ng(*b) {
                    let mut db = vec![S::zero(); out_c];
                    for (o, d) in db.iter_mut().enumerate() {
                        for &v in &gmat[o * ncols..(o + 1) * ncols] {
                            *d += v;
                        }
                    }
                    put(grads, *b, db);
                }
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); out_c * kk];
                    S::gemm(
                        out_c,
                        ncols,
                        kk,
                        &gmat,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        &mut dw,
                        (kk as isize, 1),
                        false,
                    );
                    put(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dcols = vec![S::zero(); kk * ncols];
                    S::gemm(
                        kk,
                        out_c,
                        ncols,
                        self.value(*w).data(),
                        (1, kk as isize),
                        &gmat,
                        (ncols as isize, 1),
                        &mut dcols,
                        (ncols as isize, 1),
                        false,
                    );
                    put(grads, *x, col2im(&dcols, *geom));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, xmat } => {
                let xs = self.shape(*x);
                let (n, ci, p_in) = (xs[0], xs[1], xs[2] * xs[3]);
                let co = geom.channels;
                let kk = geom.patch_len();
                let ncols = n * p_in;
                if self.ng(*b) {
                    let plane = geom.height * geom.width;
                    let mut db = vec![S::zero(); co];
                    for (i, chunk) in gd.chunks(plane).enumerate() {
                        for &v in chunk {
                            db[i % co] += v;
                        }
                    }
                    put(grads, *b, db);
                }
                let dcols = im2col(gd, *geom);
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); ci * kk];
                    S::gemm(
                        ci,
                        ncols,
                        kk,
                        xmat,
                        (ncols as isize, 1),
                        &dcols,
                        (1, ncols as isize),
                        &mut dw,
                        (kk as isize, 1),
                        false,
                    );
                    put(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dxm = vec![S::zero(); ci * ncols];
                    S::gemm(
                        ci,
                        kk,
                        ncols,
                        self.value(*w).data(),
                        (kk as isize, 1),
                        &dcols,
                        (ncols as isize, 1),
                        &mut dxm,
                        (ncols as isize, 1),
                        false,
                    );
                    put(grads, *x, channel_to_batch_major(&dxm, n, ci, p_in));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.value(*x).rows(), self.value(*x).row_len());
                let o = self.shape(*w)[0];
                if self.ng(*b) {
                    let mut db = vec![S::zero(); o];
                    for row in gd.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    put(grads, *b, db);
                }
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); o * i];
                    S::gemm(
                        o,
                        n,
                        i,
                        gd,
                        (1, o as isize),
                        self.value(*x).data(),
                        (i as isize, 1),
                        &mut dw,
                        (i as isize, 1),
                        false,
                    );
                    put(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dx = vec![S::zero(); n * i];
                    S::gemm(
                        n,
                        o,
                        i,
                        gd,
                        (o as isize, 1),
                        self.value(*w).data(),
                        (i as isize, 1),
                        &mut dx,
                        (i as isize, 1),
                        false,
                    );
                    put(grads, *x, dx);
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let p: usize = xs[2..].iter().product();
                let gm = self.value(*gamma).data();
                let mut dx = vec![S::zero(); n * c * p];
                let mut dg = vec![S::zero(); c];
                let mut dbt = vec![S::zero(); c];
                let pf = S::from_f64(p as f64);
                let pinv = S::from_f64(1.0 / p as f64);
                for nc in 0..n * c {
                    let ch = nc % c;
                    let gy = &gd[nc * p..][..p];
                    let xh = &xhat[nc * p..][..p];
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..p {
                        dg[ch] += gy[j] * xh[j];
                        dbt[ch] += gy[j];
                        let dh = gy[j] * gm[ch];
                        s1 += dh;
                        s2 += dh * xh[j];
                    }
                    let k = inv_std[nc] * pinv;
                    for j in 0..p {
                        dx[nc * p + j] = k * (pf * gy[j] * gm[ch] - s1 - xh[j] * s2);
                    }
                }
                put(grads, *x, dx);
                put(grads, *gamma, dg);
                put(grads, *beta, dbt);
            }
            Op::FeatureTransform { x, phi_omega, phi_eta, eps_omega, eps_eta } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let p: usize = xs[2..].iter().product();
                let pw = self.value(*phi_omega).data();
                let pe = self.value(*phi_eta).data();
                let xd = self.value(*x).data();
                let mut dx = vec![S::zero(); n * c * p];
                let mut dpw = vec![S::zero(); c];
                let mut dpe = vec![S::zero(); c];
                for nc in 0..n * c {
                    let ch = nc % c;
                    let eta = S::one() + pe[ch].softplus() * eps_eta[nc];
                    let mut sg = S::zero();
                    let mut sgx = S::zero();
                    for j in 0..p {
                        let gv = gd[nc * p + j];
                        dx[nc * p + j] = eta * gv;
                        sg += gv;
                        sgx += gv * xd[nc * p + j];
                    }
                    dpw[ch] += sg * eps_omega[nc] * pw[ch].sigmoid();
                    dpe[ch] += sgx * eps_eta[nc] * pe[ch].sigmoid();
                }
                put(grads, *x, dx);
                put(grads, *phi_omega, dpw);
                put(grads, *phi_eta, dpe);
            }
            Op::LeakyRelu { x, slope } => {
                let s = S::from_f64(*slope);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v.re() > 0.0 { gv } else { gv * s })
                    .collect();
                put(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = node.value.data().iter().zip(gd).map(|(&y, &gv)| gv * (S::one() - y * y)).collect();
                put(grads, *x, dx);
            }
            Op::Reshape { x } => put(grads, *x, gd.to_vec()),
            Op::Gather { x, rows } => {
                let t = self.value(*x);
                let l = t.row_len();
                let mut dx = vec![S::zero(); t.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..l {
                        dx[r * l + j] += gd[k * l + j];
                    }
                }
                put(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    put(grads, p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Add { a, b } => {
                put(grads, *a, gd.to_vec());
                put(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                put(grads, *a, gd.to_vec());
                put(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Scale { x, c } => put(grads, *x, gd.iter().map(|&v| v * *c).collect()),
            Op::Reparam { mu, log_var, eps } => {
                put(grads, *mu, gd.to_vec());
                let half = S::from_f64(0.5);
                let dlv = self
                    .value(*log_var)
                    .data()
                    .iter()
                    .zip(eps)
                    .zip(gd)
                    .map(|((&lv, &e), &gv)| gv * e * (lv * half).exp() * half)
                    .collect();
                put(grads, *log_var, dlv);
            }
            Op::RowNorm { x } => {
                let t = self.value(*x);
                let l = t.row_len();
                let mut dx = vec![S::zero(); t.numel()];
                for r in 0..t.rows() {
                    let nrm = node.value.data()[r];
                    if nrm.re() == 0.0 {
                        continue;
                    }
                    let k = gd[r] / nrm;
                    for j in 0..l {
                        dx[r * l + j] = t.data()[r * l + j] * k;
                    }
                }
                put(grads, *x, dx);
            }
            Op::RowKl { mu, log_var } => {
                let m = self.value(*mu);
                let lv = self.value(*log_var);
                let l = m.row_len();
                let half = S::from_f64(0.5);
                let mut dm = vec![S::zero(); m.numel()];
                let mut dl = vec![S::zero(); m.numel()];
                for r in 0..m.rows() {
                    for j in 0..l {
                        let idx = r * l + j;
                        dm[idx] = gd[r] * m.data()[idx];
                        dl[idx] = gd[r] * half * (lv.data()[idx].exp() - S::one());
                    }
                }
                put(grads, *mu, dm);
                put(grads, *log_var, dl);
            }
            Op::Triplet { a, p, n } => {
                let (ta, tp, tn) = (self.value(*a), self.value(*p), self.value(*n));
                let l = ta.row_len();
                let mut da = vec![S::zero(); ta.numel()];
                let mut dp = vec![S::zero(); ta.numel()];
                let mut dn = vec![S::zero(); ta.numel()];
                let two = S::from_f64(2.0);
                for r in 0..ta.rows() {
                    if node.value.data()[r].re() <= 0.0 {
                        continue;
                    }
                    let k = gd[r] * two;
                    for j in 0..l {
                        let idx = r * l + j;
                        let (x, y, z) = (ta.data()[idx], tp.data()[idx], tn.data()[idx]);
                        da[idx] = k * (z - y);
                        dp[idx] = k * (y - x);
                        dn[idx] = k * (x - z);
                    }
                }
                put(grads, *a, da);
                put(grads, *p, dp);
                put(grads, *n, dn);
            }
            Op::WeightedAbs { psi, w } => {
                let g0 = gd[0];
                let wv = self.value(*w).data();
                let pv = self.value(*psi).data();
                put(grads, *psi, wv.iter().map(|&x| g0 * x.abs()).collect());
                let dw = wv
                    .iter()
                    .zip(pv)
                    .map(|(&x, &p)| {
                        let r = x.re();
                        if r > 0.0 {
                            g0 * p
                        } else if r < 0.0 {
                            -(g0 * p)
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                put(grads, *w, dw);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                put(grads, *x, vec![gd[0]; n]);
            }
        }
    }
}
