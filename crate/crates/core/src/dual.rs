//! Forward-mode dual numbers `re + eps·ε` with `ε² = 0`.
//!
//! Running a reverse-mode pass over `Dual<F>` values yields, in the `eps`
//! component of every gradient, the directional derivative of that gradient
//! along the input tangent. The R1 penalty uses this to obtain its exact
//! parameter gradient as a Hessian-vector product.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<F> {
    pub re: F,
    pub eps: F,
}

impl<F: Scalar> Dual<F> {
    pub fn new(re: F, eps: F) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: F) -> Self {
        Self { re, eps: F::zero() }
    }

    #[inline]
    fn chain(self, value: F, slope: F) -> Self {
        Self { re: value, eps: self.eps * slope }
    }
}

impl<F: Scalar> fmt::Display for Dual<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<F: Scalar> PartialOrd for Dual<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<F: Scalar> Add for Dual<F> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl<F: Scalar> Sub for Dual<F> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl<F: Scalar> Mul for Dual<F> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self { re: self.re * o.re, eps: self.re * o.eps + self.eps * o.re }
    }
}

impl<F: Scalar> Div for Dual<F> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self { re: q, eps: (self.eps - q * o.eps) / o.re }
    }
}

impl<F: Scalar> Rem for Dual<F> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // x mod y = x - trunc(x/y)·y; trunc is locally constant.
        let t = (self.re / o.re).trunc();
        Self { re: self.re % o.re, eps: self.eps - t * o.eps }
    }
}

impl<F: Scalar> Neg for Dual<F> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { re: -self.re, eps: -self.eps }
    }
}

impl<F: Scalar> Sum for Dual<F> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<F: Scalar> Zero for Dual<F> {
    fn zero() -> Self {
        Self::constant(F::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<F: Scalar> One for Dual<F> {
    fn one() -> Self {
        Self::constant(F::one())
    }
}

impl<F: Scalar> Num for Dual<F> {
    type FromStrRadixErr = F::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        F::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<F: Scalar> ToPrimitive for Dual<F> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
    fn to_f32(&self) -> Option<f32> {
        self.re.to_f32()
    }
}

impl<F: Scalar> NumCast for Dual<F> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <F as NumCast>::from(n).map(Self::constant)
    }
}

impl<F: Scalar> FromPrimitive for Dual<F> {
    fn from_i64(n: i64) -> Option<Self> {
        F::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        F::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        F::from_f64(n).map(Self::constant)
    }
}

macro_rules! const_fns {
    ($($name:ident),*) => {
        $(fn $name() -> Self { Self::constant(F::$name()) })*
    };
}

impl<F: Scalar> FloatConst for Dual<F> {
    const_fns!(
        E, FRAC_1_PI, FRAC_1_SQRT_2, FRAC_2_PI, FRAC_2_SQRT_PI, FRAC_PI_2, FRAC_PI_3, FRAC_PI_4,
        FRAC_PI_6, FRAC_PI_8, LN_10, LN_2, LOG10_E, LOG2_E, PI, SQRT_2
    );
}

impl<F: Scalar> Float for Dual<F> {
    const_fns!(nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value);

    fn is_nan(self) -> bool {
        self.re.is_nan() || self.eps.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite() || self.eps.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        Self { re: self.re.fract(), eps: self.eps }
    }
    fn abs(self) -> Self {
        if self.re < F::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        let v = self.re.powi(n);
        let d = if n == 0 { F::zero() } else { F::lit(n as f64) * self.re.powi(n - 1) };
        self.chain(v, d)
    }
    fn powf(self, n: Self) -> Self {
        // d(x^y) = y x^(y-1) dx + x^y ln(x) dy
        let v = self.re.powf(n.re);
        let dx = n.re * self.re.powf(n.re - F::one());
        let dy = if n.eps == F::zero() { F::zero() } else { v * self.re.ln() * n.eps };
        Self { re: v, eps: self.eps * dx + dy }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, F::lit(0.5) / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.chain(e, e * F::LN_2())
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * F::LN_2()).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * F::LN_10()).recip())
    }
    fn max(self, o: Self) -> Self {
        if o.re > self.re || self.re.is_nan() {
            o
        } else {
            self
        }
    }
    fn min(self, o: Self) -> Self {
        if o.re < self.re || self.re.is_nan() {
            o
        } else {
            self
        }
    }
    fn abs_sub(self, o: Self) -> Self {
        if self.re <= o.re {
            Self::zero()
        } else {
            self - o
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.chain(c, (F::lit(3.0) * c * c).recip())
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, F::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (F::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(F::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (F::one() + self.re * self.re).recip())
    }
    fn atan2(self, o: Self) -> Self {
        let d = self.re * self.re + o.re * o.re;
        Self { re: self.re.atan2(o.re), eps: (o.re * self.eps - self.re * o.eps) / d }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (F::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, F::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + F::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - F::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (F::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<F: Scalar> Scalar for Dual<F> {
    const DTYPE: &'static str = "dual";

    fn re_f64(self) -> f64 {
        self.re.re_f64()
    }

    /// Splits into three real products: `Cr ← β·Cr + Ar·Br`, `Ce ← β·Ce + Ar·Be + Ae·Br`.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (usize, usize),
        b: &[Self],
        (rsb, csb): (usize, usize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (usize, usize),
    ) {
        assert!(beta.eps == F::zero(), "dual gemm needs a real beta");
        let pack = |src: &[Self], rows: usize, cols: usize, rs: usize, cs: usize| {
            let mut re = Vec::with_capacity(rows * cols);
            let mut eps = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = src[i * rs + j * cs];
                    re.push(v.re);
                    eps.push(v.eps);
                }
            }
            (re, eps)
        };
        let (ar, ae) = pack(a, m, k, rsa, csa);
        let (br, be) = pack(b, k, n, rsb, csb);
        let (mut cr, mut ce) = pack(c, m, n, rsc, csc);
        F::gemm(m, k, n, &ar, (k, 1), &br, (n, 1), beta.re, &mut cr, (n, 1));
        F::gemm(m, k, n, &ar, (k, 1), &be, (n, 1), beta.re, &mut ce, (n, 1));
        F::gemm(m, k, n, &ae, (k, 1), &br, (n, 1), F::one(), &mut ce, (n, 1));
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] = Dual::new(cr[i * n + j], ce[i * n + j]);
            }
        }
    }
}
