//! Scalar types the autodiff tape is generic over.
//!
//! `f32` and `f64` are the ordinary reals. [`Dual`] carries a primal value and a
//! forward-mode tangent; running a reverse-mode pass over `Dual` numbers yields
//! the gradient in the primal parts and a Hessian-vector product in the tangent
//! parts (forward-over-reverse), which is what the meta-gradient needs.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    type Base: Real;

    fn from_f64(v: f64) -> Self;
    fn from_base(v: Self::Base) -> Self;
    /// Primal part.
    fn value(self) -> Self::Base;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;

    /// `c = a·b` (or `c += a·b` when `accumulate`), general strides, row index first.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    );

    #[inline]
    fn re(self) -> f64 {
        self.value().to_f64()
    }
    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    #[inline]
    fn abs(self) -> Self {
        if self.re() < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline]
    fn powi2(self) -> Self {
        self * self
    }
    /// `log(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        let x = self.re();
        if x > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }
    #[inline]
    fn ln_1p(self) -> Self {
        (Self::one() + self).ln()
    }
    fn is_finite(self) -> bool;
}

/// Plain floating point types; the base of every [`Scalar`].
pub trait Real: Scalar<Base = Self> + PartialOrd {
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

fn max_index(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a: usize,
    sa: (isize, isize),
    b: usize,
    sb: (isize, isize),
    c: usize,
    sc: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_index(m, k, sa) < a, "gemm: lhs out of bounds");
        assert!(max_index(k, n, sb) < b, "gemm: rhs out of bounds");
    }
    assert!(max_index(m, n, sc) < c, "gemm: output out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            type Base = $t;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn from_base(v: Self) -> Self {
                v
            }
            #[inline]
            fn value(self) -> Self {
                self
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sigmoid(self) -> Self {
                if self >= 0.0 {
                    1.0 / (1.0 + (-self).exp())
                } else {
                    let e = self.exp();
                    e / (1.0 + e)
                }
            }
            #[inline]
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (isize, isize),
                b: &[Self],
                sb: (isize, isize),
                c: &mut [Self],
                sc: (isize, isize),
                accumulate: bool,
            ) {
                check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index reachable through (dims, strides) was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0,
                        sa.1,
                        b.as_ptr(),
                        sb.0,
                        sb.1,
                        beta,
                        c.as_mut_ptr(),
                        sc.0,
                        sc.1,
                    );
                }
            }
        }

        impl Real for $t {
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// First-order dual number `v + d·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<R> {
    pub v: R,
    pub d: R,
}

impl<R: Real> Dual<R> {
    #[inline]
    pub fn new(v: R, d: R) -> Self {
        Self { v, d }
    }
    #[inline]
    pub fn constant(v: R) -> Self {
        Self { v, d: R::zero() }
    }
}

impl<R: Real> Add for Dual<R> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}
impl<R: Real> Sub for Dual<R> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}
impl<R: Real> Mul for Dual<R> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}
impl<R: Real> Div for Dual<R> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = R::one() / o.v;
        let v = self.v * inv;
        Self::new(v, (self.d - v * o.d) * inv)
    }
}
impl<R: Real> Neg for Dual<R> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}
impl<R: Real> AddAssign for Dual<R> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.v += o.v;
        self.d += o.d;
    }
}
impl<R: Real> SubAssign for Dual<R> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.v -= o.v;
        self.d -= o.d;
    }
}
impl<R: Real> MulAssign for Dual<R> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<R: Real> Scalar for Dual<R> {
    type Base = R;

    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(R::from_f64(v))
    }
    #[inline]
    fn from_base(v: R) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(self) -> R {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, e * self.d)
    }
    #[inline]
    fn ln(self) -> Self {
        Self::new(self.v.ln(), self.d / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self::new(s, self.d / (s + s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Self::new(t, (R::one() - t * t) * self.d)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = self.v.sigmoid();
        Self::new(s, s * (R::one() - s) * self.d)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        Self::new(self.v.ln_1p(), self.d / (R::one() + self.v))
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.d.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
        sc: (isize, isize),
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
        if m == 0 || n == 0 {
            return;
        }
        // Split into primal/tangent planes so the heavy lifting runs on real gemm kernels:
        // (Av + Ad ε)(Bv + Bd ε) = AvBv + (AvBd + AdBv) ε.
        let split = |src: &[Self], rows: usize, cols: usize, s: (isize, isize)| {
            let mut v = Vec::with_capacity(rows * cols);
            let mut d = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for q in 0..cols {
                    let x = src[r * s.0 as usize + q * s.1 as usize];
                    v.push(x.v);
                    d.push(x.d);
                }
            }
            (v, d)
        };
        let (av, ad) = split(a, m, k, sa);
        let (bv, bd) = split(b, k, n, sb);
        let (mut cv, mut cd) = if accumulate {
            split(c, m, n, sc)
        } else {
            (vec![R::zero(); m * n], vec![R::zero(); m * n])
        };
        let ra = (k as isize, 1);
        let rb = (n as isize, 1);
        let rc = (n as isize, 1);
        R::gemm(m, k, n, &av, ra, &bv, rb, &mut cv, rc, accumulate);
        R::gemm(m, k, n, &av, ra, &bd, rb, &mut cd, rc, accumulate);
        R::gemm(m, k, n, &ad, ra, &bv, rb, &mut cd, rc, true);
        for r in 0..m {
            for q in 0..n {
                c[r * sc.0 as usize + q * sc.1 as usize] = Self::new(cv[r * n + q], cd[r * n + q]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposed_strides() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        // b supplied transposed: stored as n x k.
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, &a, (k as isize, 1), &bt, (1, k as isize), &mut c, (n as isize, 1), false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_gemm_tangent_is_product_rule() {
        let (m, k, n) = (2, 3, 2);
        let av: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let ad: Vec<f64> = (0..6).map(|i| 0.5 - i as f64).collect();
        let bv: Vec<f64> = (0..6).map(|i| (i as f64).sqrt()).collect();
        let bd: Vec<f64> = (0..6).map(|i| i as f64 * 0.25).collect();
        let a: Vec<Dual<f64>> = av.iter().zip(&ad).map(|(&v, &d)| Dual::new(v, d)).collect();
        let b: Vec<Dual<f64>> = bv.iter().zip(&bd).map(|(&v, &d)| Dual::new(v, d)).collect();
        let mut c = vec![Dual::default(); 4];
        Dual::gemm(m, k, n, &a, (3, 1), &b, (2, 1), &mut c, (2, 1), false);
        let v = naive(m, k, n, &av, &bv);
        let d1 = naive(m, k, n, &av, &bd);
        let d2 = naive(m, k, n, &ad, &bv);
        for i in 0..4 {
            assert!((c[i].v - v[i]).abs() < 1e-12);
            assert!((c[i].d - d1[i] - d2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((1000.0f64).softplus().is_finite());
        assert!((-1000.0f64).softplus() >= 0.0);
        let x = Dual::new(0.3f64, 1.0);
        assert!((x.softplus().d - 0.3f64.sigmoid()).abs() < 1e-14);
    }
}
