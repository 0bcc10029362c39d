//! Special functions and a bracketing root finder.
//!
//! The incomplete gamma pair follows the usual split: power series for
//! `x < a + 1` and a modified-Lentz continued fraction for the upper tail
//! otherwise. The Gaussian tail `Q(x)` is expressed through the upper
//! incomplete gamma at `a = 1/2`, so every kernel here shares one core.

use std::f64::consts::{LN_2, PI};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecFunError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no sign change on [{lo}, {hi}] (f(lo) = {f_lo}, f(hi) = {f_hi})")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("root finder did not converge after {iterations} iterations (best x = {best}, f = {residual})")]
    NoConvergence {
        iterations: usize,
        best: f64,
        residual: f64,
    },
}

pub type Result<T> = std::result::Result<T, SpecFunError>;

/// Stopping rule for iterative kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl ToleranceSpec {
    pub fn new(abs_tol: f64, rel_tol: f64, max_iter: usize) -> Result<Self> {
        if !(abs_tol > 0.0) || !(rel_tol > 0.0) || max_iter == 0 {
            return Err(SpecFunError::Domain(format!(
                "invalid tolerance: abs_tol={abs_tol}, rel_tol={rel_tol}, max_iter={max_iter}"
            )));
        }
        Ok(Self {
            abs_tol,
            rel_tol,
            max_iter,
        })
    }
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-14,
            rel_tol: 1e-15,
            max_iter: 500,
        }
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

// B_{2n} / (2n (2n - 1)) for n = 1..8.
const STIRLING_COEFFS: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

const STIRLING_MIN: f64 = 10.0;

/// `ln Γ(a) − [(a − ½) ln a − a + ln √(2π)]`, valid for `a ≥ 10`.
fn stirling_correction(a: f64) -> f64 {
    let inv = 1.0 / a;
    let inv2 = inv * inv;
    let mut term = inv;
    let mut sum = 0.0;
    for c in STIRLING_COEFFS {
        sum += c * term;
        term *= inv2;
    }
    sum
}

/// Natural log of the gamma function for `a > 0`.
pub fn ln_gamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(SpecFunError::Domain(format!("ln_gamma requires a > 0, got {a}")));
    }
    // Shift up into the Stirling range: ln Γ(a) = ln Γ(a + n) − ln[a (a+1) … (a+n−1)].
    let mut shifted = a;
    let mut log_prod = 0.0;
    let mut prod = 1.0;
    while shifted < STIRLING_MIN {
        prod *= shifted;
        shifted += 1.0;
        if prod > 1e280 {
            log_prod += prod.ln();
            prod = 1.0;
        }
    }
    log_prod += prod.ln();
    let big = (shifted - 0.5) * shifted.ln() - shifted + LN_SQRT_2PI + stirling_correction(shifted);
    Ok(big - log_prod)
}

fn check_gamma_args(a: f64, x: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(SpecFunError::Domain(format!("incomplete gamma requires a > 0, got {a}")));
    }
    if !(x >= 0.0) {
        return Err(SpecFunError::Domain(format!("incomplete gamma requires x >= 0, got {x}")));
    }
    Ok(())
}

/// `x^a e^{-x} / Γ(a)`, evaluated without cancelling large logarithms.
fn gamma_prefactor(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if a < STIRLING_MIN {
        let lg = ln_gamma(a).expect("a > 0 checked by caller");
        return (a * x.ln() - x - lg).exp();
    }
    // Γ(a) = √(2π/a) (a/e)^a e^{s(a)}, so the prefactor is
    // √(a/2π) exp(a [ln(1+u) − u] − s(a)) with u = (x − a)/a.
    let u = (x - a) / a;
    let log_term = a * (u.ln_1p() - u);
    (a / (2.0 * PI)).sqrt() * (log_term - stirling_correction(a)).exp()
}

const GAMMA_EPS: f64 = 1e-17;
const GAMMA_MAX_ITER: usize = 100_000;

/// Series for P(a, x); converges for all x but is used for x < a + 1.
pub(crate) fn lower_gamma_series(a: f64, x: f64) -> f64 {
    let pre = gamma_prefactor(a, x);
    if pre == 0.0 {
        return 0.0;
    }
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    (pre * sum).min(1.0)
}

/// Continued fraction for Q(a, x); used for x ≥ a + 1.
pub(crate) fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let pre = gamma_prefactor(a, x);
    if pre == 0.0 {
        return 0.0;
    }
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (pre * h).min(1.0)
}

/// Regularized lower incomplete gamma P(a, x) = γ(a, x) / Γ(a).
pub fn reg_lower_gamma(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if x < a + 1.0 {
        Ok(lower_gamma_series(a, x))
    } else {
        Ok(1.0 - upper_gamma_cf(a, x))
    }
}

/// Regularized upper incomplete gamma Q(a, x) = Γ(a, x) / Γ(a).
pub fn reg_upper_gamma(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    if x < a + 1.0 {
        Ok(1.0 - lower_gamma_series(a, x))
    } else {
        Ok(upper_gamma_cf(a, x))
    }
}

/// Gaussian tail probability Q(x) = P[N(0,1) > x].
pub fn q_function(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    // erfc(z) = Q_Γ(½, z²) for z ≥ 0, with z = x/√2.
    let arg = 0.5 * x * x;
    if x >= 0.0 {
        0.5 * reg_upper_gamma(0.5, arg).unwrap_or(0.0)
    } else {
        0.5 * (1.0 + reg_lower_gamma(0.5, arg).unwrap_or(1.0))
    }
}

/// Inverse of [`q_function`] on (0, 1).
pub fn inv_q_function(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SpecFunError::Domain(format!("inv_q_function requires 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Q(±38) is already out of double range for the tails we can represent.
    let tol = ToleranceSpec::new(1e-300, 1e-16, 400)?;
    match find_root_monotone(|x| q_function(x) - p, -38.5, 38.5, tol) {
        Ok(x) => Ok(x),
        Err(SpecFunError::NoConvergence { best, .. }) => Ok(best),
        Err(e) => Err(e),
    }
}

/// Root of a continuous monotone function on a sign-changing bracket.
///
/// Bisection safeguarded secant (Illinois variant): a secant step is taken
/// when it lands inside the bracket, and a plain bisection step is forced
/// whenever two consecutive steps fail to halve the bracket.
pub fn find_root_monotone<F>(f: F, lo: f64, hi: f64, tol: ToleranceSpec) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut fa = f(a);
    let mut fb = f(b);
    if fa.is_nan() || fb.is_nan() {
        return Err(SpecFunError::Domain("function is NaN at a bracket end".into()));
    }
    if fa.abs() <= tol.abs_tol {
        return Ok(a);
    }
    if fb.abs() <= tol.abs_tol {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(SpecFunError::Bracket {
            lo: a,
            hi: b,
            f_lo: fa,
            f_hi: fb,
        });
    }

    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    // Which end was retained last time (for the Illinois halving).
    let mut side = 0i8;
    let mut slow_steps = 0u8;

    for _ in 0..tol.max_iter {
        let width = b - a;
        let secant = b - fb * (b - a) / (fb - fa);
        let mid = 0.5 * (a + b);
        let x = if slow_steps >= 2 || !(secant > a && secant < b) {
            slow_steps = 0;
            mid
        } else {
            secant
        };
        let fx = f(x);
        if fx.abs() < best.1.abs() {
            best = (x, fx);
        }
        if fx.abs() <= tol.abs_tol || fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == fb.signum() {
            b = x;
            fb = fx;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = x;
            fa = fx;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        let new_width = b - a;
        if new_width > 0.5 * width {
            slow_steps += 1;
        } else {
            slow_steps = 0;
        }
        let r = best.0;
        if new_width <= tol.rel_tol * r.abs() + tol.abs_tol {
            return Ok(r);
        }
    }
    Err(SpecFunError::NoConvergence {
        iterations: tol.max_iter,
        best: best.0,
        residual: best.1,
    })
}

/// `log2(1 + x)` with the usual accuracy near zero.
pub(crate) fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / LN_2
}
