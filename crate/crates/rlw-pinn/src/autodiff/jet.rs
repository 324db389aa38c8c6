//! Forward-mode propagation of the mixed partials used by the RLW operator.
//!
//! A [`Jet`] carries a value and the five derivatives (dx, dt, dxt, dxx,
//! dxxt) of a scalar quantity with respect to the point (x, t) it was seeded
//! at. The cross term dxt never appears in the residual itself but the
//! product rule for dxxt consumes it, so it is propagated everywhere.

use super::AutodiffError;
use std::ops::{Add, Mul, Neg, Sub};

/// Value plus mixed partials of one scalar quantity at one (x, t) point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    /// Value.
    pub v: f64,
    /// d/dx.
    pub dx: f64,
    /// d/dt.
    pub dt: f64,
    /// d2/dxdt.
    pub dxt: f64,
    /// d2/dx2.
    pub dxx: f64,
    /// d3/dx2dt.
    pub dxxt: f64,
}

impl Jet {
    pub const ZERO: Jet = Jet::constant(0.0);

    /// Jet of a quantity that does not depend on (x, t).
    #[inline]
    pub const fn constant(v: f64) -> Jet {
        Jet { v, dx: 0.0, dt: 0.0, dxt: 0.0, dxx: 0.0, dxxt: 0.0 }
    }

    /// Seed for the x input itself: dx = 1, all higher partials zero.
    #[inline]
    pub const fn seed_x(v: f64) -> Jet {
        Jet { v, dx: 1.0, dt: 0.0, dxt: 0.0, dxx: 0.0, dxxt: 0.0 }
    }

    /// Seed for the t input itself: dt = 1, all higher partials zero.
    #[inline]
    pub const fn seed_t(v: f64) -> Jet {
        Jet { v, dx: 0.0, dt: 1.0, dxt: 0.0, dxx: 0.0, dxxt: 0.0 }
    }

    /// Multiply by a plain constant.
    #[inline]
    pub fn scale(self, c: f64) -> Jet {
        Jet {
            v: c * self.v,
            dx: c * self.dx,
            dt: c * self.dt,
            dxt: c * self.dxt,
            dxx: c * self.dxx,
            dxxt: c * self.dxxt,
        }
    }

    /// Chain rule for a smooth unary g given g(v), g'(v), g''(v), g'''(v).
    #[inline]
    pub fn unary(self, g0: f64, g1: f64, g2: f64, g3: f64) -> Jet {
        let Jet { dx, dt, dxt, dxx, dxxt, .. } = self;
        Jet {
            v: g0,
            dx: g1 * dx,
            dt: g1 * dt,
            dxt: g2 * dx * dt + g1 * dxt,
            dxx: g2 * dx * dx + g1 * dxx,
            dxxt: g3 * dt * dx * dx + 2.0 * g2 * dx * dxt + g2 * dt * dxx + g1 * dxxt,
        }
    }

    /// silu(z) = z * sigmoid(z), propagated through the chain rule.
    #[inline]
    pub fn silu(self) -> Jet {
        let d = silu_derivs(self.v);
        self.unary(d[0], d[1], d[2], d[3])
    }

    /// tanh, propagated through the chain rule.
    #[inline]
    pub fn tanh(self) -> Jet {
        let d = tanh_derivs(self.v);
        self.unary(d[0], d[1], d[2], d[3])
    }

    /// True when every component is finite.
    #[inline]
    pub fn is_finite(self) -> bool {
        self.v.is_finite()
            && self.dx.is_finite()
            && self.dt.is_finite()
            && self.dxt.is_finite()
            && self.dxx.is_finite()
            && self.dxxt.is_finite()
    }

    /// Pass the jet through unchanged, or report which primitive produced a
    /// non-finite component.
    #[inline]
    pub fn validated(self, op: &'static str) -> Result<Jet, AutodiffError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(AutodiffError::NonFinite { op })
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    #[inline]
    fn add(self, b: Jet) -> Jet {
        Jet {
            v: self.v + b.v,
            dx: self.dx + b.dx,
            dt: self.dt + b.dt,
            dxt: self.dxt + b.dxt,
            dxx: self.dxx + b.dxx,
            dxxt: self.dxxt + b.dxxt,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    #[inline]
    fn sub(self, b: Jet) -> Jet {
        Jet {
            v: self.v - b.v,
            dx: self.dx - b.dx,
            dt: self.dt - b.dt,
            dxt: self.dxt - b.dxt,
            dxx: self.dxx - b.dxx,
            dxxt: self.dxxt - b.dxxt,
        }
    }
}

impl Neg for Jet {
    type Output = Jet;
    #[inline]
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

/// Leibniz rule on every multi-index up to (2, 1).
impl Mul for Jet {
    type Output = Jet;
    #[inline]
    fn mul(self, b: Jet) -> Jet {
        let a = self;
        Jet {
            v: a.v * b.v,
            dx: a.dx * b.v + a.v * b.dx,
            dt: a.dt * b.v + a.v * b.dt,
            dxt: a.dxt * b.v + a.dx * b.dt + a.dt * b.dx + a.v * b.dxt,
            dxx: a.dxx * b.v + 2.0 * a.dx * b.dx + a.v * b.dxx,
            dxxt: a.dxxt * b.v
                + a.dxx * b.dt
                + 2.0 * (a.dxt * b.dx + a.dx * b.dxt)
                + a.dt * b.dxx
                + a.v * b.dxxt,
        }
    }
}

/// Logistic sigmoid and its first four derivatives at z.
///
/// Every derivative of sigma is a polynomial in s = sigma(z); the rows below
/// are those polynomials expanded.
#[inline]
pub fn sigmoid_derivs(z: f64) -> [f64; 5] {
    let s = sigmoid_value(z);
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s2 * s2;
    let s5 = s4 * s;
    [
        s,
        s - s2,
        s - 3.0 * s2 + 2.0 * s3,
        s - 7.0 * s2 + 12.0 * s3 - 6.0 * s4,
        s - 15.0 * s2 + 50.0 * s3 - 60.0 * s4 + 24.0 * s5,
    ]
}

/// Logistic sigmoid, branch chosen to avoid overflow for either sign.
#[inline]
pub fn sigmoid_value(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// silu(z) = z * sigma(z). Every silu evaluation path funnels through the
/// same sigma expression, so value-only and jet-mode passes agree bit for
/// bit.
#[inline]
pub fn silu_value(z: f64) -> f64 {
    z * sigmoid_value(z)
}

/// silu(z) = z * sigma(z) and its first four derivatives at z.
///
/// silu^(n) = z * sigma^(n) + n * sigma^(n-1) by the Leibniz rule.
#[inline]
pub fn silu_derivs(z: f64) -> [f64; 5] {
    let s = sigmoid_derivs(z);
    [
        z * s[0],
        z * s[1] + s[0],
        z * s[2] + 2.0 * s[1],
        z * s[3] + 3.0 * s[2],
        z * s[4] + 4.0 * s[3],
    ]
}

/// tanh and its first four derivatives at z, via u = 1 - tanh^2.
#[inline]
pub fn tanh_derivs(z: f64) -> [f64; 5] {
    let t = z.tanh();
    let u = 1.0 - t * t;
    [
        t,
        u,
        -2.0 * t * u,
        -2.0 * u * (1.0 - 3.0 * t * t),
        8.0 * t * u * (2.0 - 3.0 * t * t),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() <= tol * (1.0 + b.abs()),
            "{what}: got {a}, expected {b}"
        );
    }

    #[test]
    fn seeds_have_unit_first_partials() {
        let x = Jet::seed_x(2.0);
        assert_eq!(x, Jet { v: 2.0, dx: 1.0, ..Jet::ZERO });
        let t = Jet::seed_t(-1.5);
        assert_eq!(t, Jet { v: -1.5, dt: 1.0, ..Jet::ZERO });
        let c = Jet::constant(7.0);
        assert_eq!(c, Jet { v: 7.0, ..Jet::ZERO });
    }

    #[test]
    fn product_of_x_with_itself() {
        let x = Jet::seed_x(2.0);
        let p = x * x;
        assert_eq!(p.v, 4.0);
        assert_eq!(p.dx, 4.0);
        assert_eq!(p.dxx, 2.0);
        assert_eq!(p.dt, 0.0);
        assert_eq!(p.dxt, 0.0);
        assert_eq!(p.dxxt, 0.0);
    }

    #[test]
    fn product_of_x_and_t_has_unit_cross_term() {
        let p = Jet::seed_x(1.0) * Jet::seed_t(1.0);
        assert_eq!(p.v, 1.0);
        assert_eq!(p.dx, 1.0);
        assert_eq!(p.dt, 1.0);
        assert_eq!(p.dxt, 1.0);
        assert_eq!(p.dxx, 0.0);
        assert_eq!(p.dxxt, 0.0);
    }

    #[test]
    fn x_squared_times_t_has_unit_dxxt_over_two() {
        // u = x^2 t: dxxt = 2.
        let x = Jet::seed_x(3.0);
        let t = Jet::seed_t(0.5);
        let u = x * x * t;
        assert_eq!(u.v, 4.5);
        assert_eq!(u.dx, 3.0);
        assert_eq!(u.dt, 9.0);
        assert_eq!(u.dxt, 6.0);
        assert_eq!(u.dxx, 1.0);
        assert_eq!(u.dxxt, 2.0);
    }

    #[test]
    fn silu_at_zero() {
        let s = Jet::seed_x(0.0).silu();
        assert_eq!(s.v, 0.0);
        assert_eq!(s.dx, 0.5);
    }

    #[test]
    fn silu_chain_through_square() {
        // f(x) = silu(x^2): f_xx = 4 x^2 silu''(x^2) + 2 silu'(x^2).
        let x0 = 1.3_f64;
        let f = (Jet::seed_x(x0) * Jet::seed_x(x0)).silu();
        let d = silu_derivs(x0 * x0);
        assert_close(f.v, d[0], 1e-15, "value");
        assert_close(f.dx, 2.0 * x0 * d[1], 1e-14, "dx");
        assert_close(f.dxx, 4.0 * x0 * x0 * d[2] + 2.0 * d[1], 1e-14, "dxx");
    }

    #[test]
    fn tanh_matches_closed_forms() {
        let z = 0.7_f64;
        let j = Jet::seed_x(z).tanh();
        let t = z.tanh();
        assert_close(j.v, t, 1e-15, "tanh");
        assert_close(j.dx, 1.0 - t * t, 1e-15, "tanh'");
        assert_close(j.dxx, -2.0 * t * (1.0 - t * t), 1e-15, "tanh''");
    }

    #[test]
    fn derivative_tables_match_finite_differences() {
        // Central differences on the scalar functions pin the closed-form
        // derivative tables used by every jet op.
        let h = 1e-5;
        for &z in &[-3.0, -0.8, 0.0, 0.4, 2.5] {
            for order in 1..=4usize {
                let probe = |f: &dyn Fn(f64) -> [f64; 5]| {
                    let lo = f(z - h)[order - 1];
                    let hi = f(z + h)[order - 1];
                    (hi - lo) / (2.0 * h)
                };
                let fd_sig = probe(&sigmoid_derivs);
                assert_close(sigmoid_derivs(z)[order], fd_sig, 1e-8, "sigmoid deriv");
                let fd_silu = probe(&silu_derivs);
                assert_close(silu_derivs(z)[order], fd_silu, 1e-8, "silu deriv");
                let fd_tanh = probe(&tanh_derivs);
                assert_close(tanh_derivs(z)[order], fd_tanh, 1e-8, "tanh deriv");
            }
        }
    }

    #[test]
    fn validated_reports_the_failing_primitive() {
        let big = Jet::constant(f64::MAX);
        let blown = (big * big).validated("mul");
        match blown {
            Err(AutodiffError::NonFinite { op }) => assert_eq!(op, "mul"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert!(Jet::seed_x(1.0).silu().validated("silu").is_ok());
    }

    #[test]
    fn jet_algebra_matches_finite_differences_on_a_composition() {
        // f(x, t) = silu(a x + b t + c) * tanh(p x + q t) + x * t * x
        let (a, b, c, p, q) = (0.9, -0.6, 0.2, 0.45, 0.8);
        let f = |x: f64, t: f64| -> f64 {
            let lin = a * x + b * t + c;
            let s = lin * sigmoid_derivs(lin)[0];
            s * (p * x + q * t).tanh() + x * t * x
        };
        let jet_at = |x: f64, t: f64| -> Jet {
            let xj = Jet::seed_x(x);
            let tj = Jet::seed_t(t);
            let lin = xj.scale(a) + tj.scale(b) + Jet::constant(c);
            lin.silu() * (xj.scale(p) + tj.scale(q)).tanh() + xj * tj * xj
        };
        let (x0, t0) = (0.35, -0.55);
        let j = jet_at(x0, t0);
        let h = 2e-3;

        // 4th order central first/second derivative stencils.
        let d1 = |g: &dyn Fn(f64) -> f64, z: f64| {
            (-g(z + 2.0 * h) + 8.0 * g(z + h) - 8.0 * g(z - h) + g(z - 2.0 * h)) / (12.0 * h)
        };
        let d2 = |g: &dyn Fn(f64) -> f64, z: f64| {
            (-g(z + 2.0 * h) + 16.0 * g(z + h) - 30.0 * g(z) + 16.0 * g(z - h)
                - g(z - 2.0 * h))
                / (12.0 * h * h)
        };

        assert_close(j.v, f(x0, t0), 1e-14, "v");
        assert_close(j.dx, d1(&|x| f(x, t0), x0), 1e-9, "dx");
        assert_close(j.dt, d1(&|t| f(x0, t), t0), 1e-9, "dt");
        let fx = |t: f64| d1(&|x| f(x, t), x0);
        assert_close(j.dxt, d1(&fx, t0), 1e-8, "dxt");
        assert_close(j.dxx, d2(&|x| f(x, t0), x0), 1e-8, "dxx");
        let fxx = |t: f64| d2(&|x| f(x, t), x0);
        assert_close(j.dxxt, d1(&fxx, t0), 1e-7, "dxxt");
    }
}
