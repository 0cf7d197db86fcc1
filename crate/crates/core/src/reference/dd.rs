//! Double-double arithmetic: an unevaluated sum `hi + lo` of two f64 giving
//! about 106 bits of significand.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

/// Scalar the reference forward pass can run in.
pub trait Real:
    Copy + Debug + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn mul_f64(self, w: f64) -> Self;
    /// Accumulates `a * w` into a running sum kept as two f64 words.
    fn mac(acc: &mut [f64; 2], a: Self, w: f64);
    fn from_acc(acc: [f64; 2]) -> Self;

    /// `acc[j] += a * w[j]` for every `j`.
    fn mac_row(acc: &mut [[f64; 2]], a: Self, w: &[f64]) {
        for (o, &b) in acc.iter_mut().zip(w) {
            Self::mac(o, a, b);
        }
    }

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn mul_f64(self, w: f64) -> Self {
        self * w
    }
    fn mac(acc: &mut [f64; 2], a: Self, w: f64) {
        acc[0] += a * w;
    }
    fn from_acc(acc: [f64; 2]) -> Self {
        acc[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

const EXP_TERMS: usize = 9;

/// `1/n!` for `n` in `0..=EXP_TERMS`.
fn inverse_factorials() -> &'static [DoubleDouble; EXP_TERMS + 1] {
    static TABLE: OnceLock<[DoubleDouble; EXP_TERMS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [DoubleDouble::ONE; EXP_TERMS + 1];
        for n in 1..=EXP_TERMS {
            t[n] = t[n - 1] / (n as f64).into();
        }
        t
    })
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[cfg(target_feature = "fma")]
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Dekker's product; `mul_add` without hardware FMA is a slow library call.
#[cfg(not(target_feature = "fma"))]
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    #[inline]
    fn split(a: f64) -> (f64, f64) {
        let t = 134_217_729.0 * a; // 2^27 + 1
        let hi = t - (t - a);
        (hi, a - hi)
    }
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

#[cfg(all(target_arch = "x86_64", not(target_feature = "fma")))]
#[target_feature(enable = "fma")]
unsafe fn mac_row_fma(acc: &mut [[f64; 2]], a: DoubleDouble, w: &[f64]) {
    for (o, &b) in acc.iter_mut().zip(w) {
        let p = a.hi * b;
        let e = a.hi.mul_add(b, -p);
        let (s, q) = two_sum(o[0], p);
        o[0] = s;
        o[1] += q + e + a.lo * b;
    }
}

impl DoubleDouble {
    pub const ONE: DoubleDouble = DoubleDouble { hi: 1.0, lo: 0.0 };

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    /// Exact multiplication by a power of two.
    fn ldexp(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DoubleDouble {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(std::cmp::Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + -o
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        Self::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self - o * q1.into();
        let q2 = r.hi / o.hi;
        let r = r - o * q2.into();
        let q3 = r.hi / o.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        DoubleDouble { hi: q1, lo: q2 } + q3.into()
    }
}

impl Real for DoubleDouble {
    fn from_f64(x: f64) -> Self {
        x.into()
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return f64::INFINITY.into();
        }
        if self.hi < -745.0 {
            return 0.0.into();
        }
        // x = k ln2 + r, then exp(r) = exp(r / 1024)^1024
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * k.into()).ldexp(-10);
        // |r| < 3.4e-4, so nine Taylor terms of s = exp(r) - 1 reach full
        // precision; squaring keeps it since (1 + s)^2 = 1 + (2s + s^2)
        let c = inverse_factorials();
        let mut s = c[EXP_TERMS];
        for n in (1..EXP_TERMS).rev() {
            s = s * r + c[n];
        }
        s = s * r;
        for _ in 0..10 {
            s = s.ldexp(1) + s * s;
        }
        (s + DoubleDouble::ONE).ldexp(k as i32)
    }

    fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { f64::NEG_INFINITY.into() } else { f64::NAN.into() };
        }
        // Newton on exp(y) = x
        let mut y: DoubleDouble = self.hi.ln().into();
        for _ in 0..2 {
            y = y + self * (-y).exp() - DoubleDouble::ONE;
        }
        y
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { 0.0.into() } else { f64::NAN.into() };
        }
        let y: DoubleDouble = self.hi.sqrt().into();
        y + (self - y * y) / (y + y)
    }

    fn mul_f64(self, w: f64) -> Self {
        let (p, e) = two_prod(self.hi, w);
        Self::norm(p, e + self.lo * w)
    }

    // compensated dot product: rounding errors gather in the second word
    fn mac(acc: &mut [f64; 2], a: Self, w: f64) {
        let (p, e) = two_prod(a.hi, w);
        let (s, q) = two_sum(acc[0], p);
        acc[0] = s;
        acc[1] += q + e + a.lo * w;
    }

    fn from_acc(acc: [f64; 2]) -> Self {
        let (hi, lo) = two_sum(acc[0], acc[1]);
        DoubleDouble { hi, lo }
    }

    fn mac_row(acc: &mut [[f64; 2]], a: Self, w: &[f64]) {
        #[cfg(all(target_arch = "x86_64", not(target_feature = "fma")))]
        if std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature was just detected
            return unsafe { mac_row_fma(acc, a, w) };
        }
        for (o, &b) in acc.iter_mut().zip(w) {
            Self::mac(o, a, b);
        }
    }
}
