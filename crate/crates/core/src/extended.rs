//! Double-double arithmetic: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
//! good for roughly 106 significant bits. Only what the finite-difference
//! oracle needs: field operations, `exp`, `ln` and a stable `log σ`.
//!
//! Transcendentals are accurate to a few parts in 1e-31 relative over the
//! ranges the oracle uses; overflow and underflow follow f64.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// Error-free `a + b` (Knuth).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free `a + b` given `|a| ≥ |b|`.
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Error-free `a · b` via fused multiply-add.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    fn renorm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Exact sum of two doubles.
    pub fn sum(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_sum(a, b);
        Dd { hi, lo }
    }

    /// Exact product of two doubles.
    pub fn product(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_prod(a, b);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// `self · 2^k`, exact barring overflow or underflow.
    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.78 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Dd::ZERO;
        }
        if self.hi == 0.0 && self.lo == 0.0 {
            return Dd::ONE;
        }
        // x = k ln 2 + r with |r| ≤ ln2/2; expm1(r/512) by Taylor, then nine
        // doublings via expm1(2t) = expm1(t)·(expm1(t) + 2).
        let k = (self.hi / LN2.hi).round();
        let t = (self - LN2 * k).scale_pow2(-9);
        let mut s = t;
        let mut term = t;
        for i in 2..=14 {
            term = term * t / i as f64;
            s = s + term;
            if term.hi.abs() < 1e-36 * s.hi.abs() {
                break;
            }
        }
        for _ in 0..9 {
            s = s * (s + 2.0);
        }
        (s + 1.0).scale_pow2(k as i32)
    }

    /// Natural log; one Newton step on `exp` from the f64 estimate doubles
    /// the number of correct bits.
    pub fn ln(self) -> Dd {
        if self.hi < 0.0 || self.hi.is_nan() {
            return Dd::from(f64::NAN);
        }
        if self.hi == 0.0 {
            return Dd::from(f64::NEG_INFINITY);
        }
        if self.hi.is_infinite() {
            return self;
        }
        let y = Dd::from(self.hi.ln());
        y + self * (-y).exp() - 1.0
    }

    /// `ln(1 + self)`, relatively accurate for tiny arguments through
    /// `ln(1 + u) = 2 atanh(u / (2 + u))`.
    pub fn ln_1p(self) -> Dd {
        if self.hi.abs() > 1e-2 {
            return (self + 1.0).ln();
        }
        let s = self / (self + 2.0);
        let s2 = s * s;
        let mut power = s;
        let mut total = s;
        for k in 1..=12 {
            power = power * s2;
            let term = power / (2 * k + 1) as f64;
            total = total + term;
            if term.hi.abs() < 1e-36 * total.hi.abs() {
                break;
            }
        }
        total * 2.0
    }

    /// `log σ(z) = min(z, 0) − ln(1 + e^{−|z|})`, stable for either sign.
    pub fn log_sigmoid(self) -> Dd {
        let t = (-self.abs()).exp().ln_1p();
        if self.hi >= 0.0 {
            -t
        } else {
            self - t
        }
    }

    /// `ln Σ e^{x_i}` with the max factored out.
    pub fn logsumexp(xs: &[Dd]) -> Dd {
        let m = xs.iter().map(|x| x.hi).fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Dd::from(m);
        }
        let total = xs.iter().fold(Dd::ZERO, |acc, &x| acc + (x - m).exp());
        total.ln() + m
    }
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Add<f64> for Dd {
    type Output = Dd;
    fn add(self, b: f64) -> Dd {
        let (s, e) = two_sum(self.hi, b);
        Dd::renorm(s, e + self.lo)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Sub<f64> for Dd {
    type Output = Dd;
    fn sub(self, b: f64) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        Dd::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        Dd::renorm(p, e + self.lo * b)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        Dd::renorm(q1, q2) + q3
    }
}

impl Div<f64> for Dd {
    type Output = Dd;
    fn div(self, b: f64) -> Dd {
        self / Dd::from(b)
    }
}
