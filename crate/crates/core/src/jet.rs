//! Order-3 forward-mode differentiation with respect to a single seeded input.
//!
//! A [`Jet`] carries a value together with its first three derivatives
//! `(f, f', f'', f''')`. The components are derivative values, not Taylor
//! coefficients, so residual code can read `u_xx` straight out of `v2`.
//!
//! Arithmetic is plain IEEE arithmetic; finiteness is checked at the
//! boundaries where a jet turns into a loss (see [`Jet::check`]).

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Value and first three derivatives with respect to one seed variable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
}

impl Jet {
    pub const ZERO: Jet = Jet { v0: 0.0, v1: 0.0, v2: 0.0, v3: 0.0 };

    #[inline]
    pub const fn new(v0: f64, v1: f64, v2: f64, v3: f64) -> Self {
        Jet { v0, v1, v2, v3 }
    }

    /// A constant: all derivatives vanish.
    #[inline]
    pub const fn constant(c: f64) -> Self {
        Jet { v0: c, v1: 0.0, v2: 0.0, v3: 0.0 }
    }

    /// The differentiation variable itself, `x ↦ x`.
    #[inline]
    pub const fn seed(x: f64) -> Self {
        Jet { v0: x, v1: 1.0, v2: 0.0, v3: 0.0 }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 4] {
        [self.v0, self.v1, self.v2, self.v3]
    }

    #[inline]
    pub fn from_array(a: [f64; 4]) -> Self {
        Jet::new(a[0], a[1], a[2], a[3])
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.v0.is_finite() && self.v1.is_finite() && self.v2.is_finite() && self.v3.is_finite()
    }

    /// Returns the jet unchanged if every component is finite.
    pub fn check(self) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite("jet component"))
        }
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Jet::new(self.v0 * s, self.v1 * s, self.v2 * s, self.v3 * s)
    }

    /// `self + s * other`, the inner-loop accumulation of an affine layer.
    #[inline]
    pub fn mul_add_scalar(self, s: f64, other: Jet) -> Self {
        Jet::new(
            self.v0 + s * other.v0,
            self.v1 + s * other.v1,
            self.v2 + s * other.v2,
            self.v3 + s * other.v3,
        )
    }

    /// Apply a scalar function given its value and first three derivatives at
    /// `self.v0` (Faà di Bruno to third order).
    #[inline]
    pub fn compose(self, f0: f64, f1: f64, f2: f64, f3: f64) -> Self {
        let (u1, u2, u3) = (self.v1, self.v2, self.v3);
        Jet::new(
            f0,
            f1 * u1,
            f2 * u1 * u1 + f1 * u2,
            f3 * u1 * u1 * u1 + 3.0 * f2 * u1 * u2 + f1 * u3,
        )
    }

    #[inline]
    pub fn tanh(self) -> Self {
        let t = self.v0.tanh();
        let d = tanh_derivatives(t);
        self.compose(t, d[0], d[1], d[2])
    }

    #[inline]
    pub fn exp(self) -> Self {
        let e = self.v0.exp();
        self.compose(e, e, e, e)
    }

    #[inline]
    pub fn sin(self) -> Self {
        let (s, c) = self.v0.sin_cos();
        self.compose(s, c, -s, -c)
    }

    #[inline]
    pub fn cos(self) -> Self {
        let (s, c) = self.v0.sin_cos();
        self.compose(c, -s, -c, s)
    }

    /// `1 / self`; fails at zero.
    pub fn recip(self) -> Result<Self> {
        if self.v0 == 0.0 {
            return Err(Error::Domain("reciprocal of a jet with zero value"));
        }
        let r = 1.0 / self.v0;
        let r2 = r * r;
        Ok(self.compose(r, -r2, 2.0 * r2 * r, -6.0 * r2 * r2))
    }

    /// `sech²(self)`, i.e. `1 - tanh²`.
    pub fn sech2(self) -> Self {
        let t = self.tanh();
        Jet::constant(1.0) - t * t
    }
}

/// First four derivatives of `tanh` expressed through `t = tanh(a)`.
#[inline]
pub(crate) fn tanh_derivatives(t: f64) -> [f64; 4] {
    let d1 = 1.0 - t * t;
    let d2 = -2.0 * t * d1;
    let d3 = -2.0 * (d1 * d1 + t * d2);
    let d4 = -6.0 * d1 * d2 - 2.0 * t * d3;
    [d1, d2, d3, d4]
}

impl Add for Jet {
    type Output = Jet;
    #[inline]
    fn add(self, o: Jet) -> Jet {
        Jet::new(self.v0 + o.v0, self.v1 + o.v1, self.v2 + o.v2, self.v3 + o.v3)
    }
}

impl AddAssign for Jet {
    #[inline]
    fn add_assign(&mut self, o: Jet) {
        *self = *self + o;
    }
}

impl Sub for Jet {
    type Output = Jet;
    #[inline]
    fn sub(self, o: Jet) -> Jet {
        Jet::new(self.v0 - o.v0, self.v1 - o.v1, self.v2 - o.v2, self.v3 - o.v3)
    }
}

impl Neg for Jet {
    type Output = Jet;
    #[inline]
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    /// Leibniz rule to third order.
    #[inline]
    fn mul(self, b: Jet) -> Jet {
        let a = self;
        Jet::new(
            a.v0 * b.v0,
            a.v1 * b.v0 + a.v0 * b.v1,
            a.v2 * b.v0 + 2.0 * a.v1 * b.v1 + a.v0 * b.v2,
            a.v3 * b.v0 + 3.0 * a.v2 * b.v1 + 3.0 * a.v1 * b.v2 + a.v0 * b.v3,
        )
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    #[inline]
    fn mul(self, s: f64) -> Jet {
        self.scale(s)
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    #[inline]
    fn add(self, c: f64) -> Jet {
        Jet::new(self.v0 + c, self.v1, self.v2, self.v3)
    }
}
