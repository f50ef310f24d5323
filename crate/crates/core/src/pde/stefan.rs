//! Similarity constants of the one-phase Stefan problem with `k_max = 1`,
//! `k_min = 0`.
//!
//! The front sits at `x*(t) = α√t` with `α = 2α̃`, where `α̃` is the root of
//!
//! ```text
//! (1 - u*)/√π = u* · erf(α̃) · α̃ · exp(α̃²)
//! ```
//!
//! The right-hand side is strictly increasing in `α̃ > 0`, so the root is
//! unique whenever it is bracketed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BRACKET_LO: f64 = 1e-8;
const BRACKET_HI: f64 = 10.0;
const RESIDUAL_TOL: f64 = 1e-13;
const MAX_ITER: usize = 200;

/// Error function, backed by the fdlibm rational approximations in `libm`
/// (maximum error below 1 ulp on the real line).
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StefanConstants {
    pub u_star: f64,
    /// Root of the transcendental equation.
    pub alpha_tilde: f64,
    /// Front speed constant, `x*(t) = alpha * sqrt(t)`.
    pub alpha: f64,
    /// Amplitude of the erf profile, `(1 - u*) / erf(alpha / 2)`.
    pub c1: f64,
}

impl StefanConstants {
    /// `|(1 - u*)/√π - u* erf(α̃) α̃ exp(α̃²)|` at the stored root.
    pub fn residual(&self) -> f64 {
        transcendental(self.alpha_tilde, self.u_star).abs()
    }
}

fn transcendental(a: f64, u_star: f64) -> f64 {
    u_star * erf(a) * a * (a * a).exp() - (1.0 - u_star) / std::f64::consts::PI.sqrt()
}

fn transcendental_derivative(a: f64, u_star: f64) -> f64 {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    u_star * (2.0 * a / sqrt_pi + erf(a) * (a * a).exp() * (1.0 + 2.0 * a * a))
}

/// Solve for `α̃` by bisection on `[1e-8, 10]` with safeguarded Newton steps.
pub fn solve_stefan_constants(u_star: f64) -> Result<StefanConstants> {
    if !(u_star > 0.0 && u_star < 1.0) {
        return Err(Error::Range(format!("Stefan u* = {u_star} must lie in (0, 1)")));
    }
    let f = |a: f64| transcendental(a, u_star);

    let (mut lo, mut hi) = (BRACKET_LO, BRACKET_HI);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::Convergence(format!(
            "Stefan root not bracketed for u* = {u_star}: f({lo:e}) = {f_lo:e}, f({hi}) = {f_hi:e}"
        )));
    }

    let mut a = 0.5 * (lo + hi);
    for _ in 0..MAX_ITER {
        let fa = f(a);
        if fa.abs() <= RESIDUAL_TOL {
            break;
        }
        if fa < 0.0 {
            lo = a;
        } else {
            hi = a;
        }
        if hi - lo <= 4.0 * f64::EPSILON * a {
            break;
        }
        let newton = a - fa / transcendental_derivative(a, u_star);
        a = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }

    let residual = f(a).abs();
    // Exponential growth of the right-hand side limits attainable absolute
    // accuracy for tiny u*; judge convergence relative to its magnitude.
    let scale = 1.0 + u_star * erf(a) * a * (a * a).exp();
    if residual > 1e-12 * scale {
        return Err(Error::Convergence(format!(
            "Stefan solve stalled for u* = {u_star}: α̃ = {a}, residual = {residual:e}"
        )));
    }

    let alpha = 2.0 * a;
    Ok(StefanConstants {
        u_star,
        alpha_tilde: a,
        alpha,
        c1: (1.0 - u_star) / erf(a),
    })
}
