//! Energy detection of the backscatter symbol at the BRx.
//!
//! Under hypothesis `i` the `T` received samples are i.i.d. `CN(0, σ_i²)`, so
//! the energy `Σ|y(t)|²` is `σ_i²·Gamma(T, 1)`. The likelihood-ratio test
//! compares the energy to `τ = T σ0² σ1² Δ` with
//! `Δ = (ln σ1² − ln σ0²) / (σ1² − σ0²)`, which gives the closed-form error
//! probability `½[P(T, T σ_min² Δ) + Q(T, T σ_max² Δ)]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::specfun::{self, find_root_monotone, ToleranceSpec};

/// Upper 0.5% point of the standard normal (two-sided 99% interval).
const Z_99: f64 = 2.575_829_303_548_901;

/// Trials per independently seeded Monte Carlo partition.
const MC_CHUNK: usize = 1 << 16;

/// Variances and derived quantities of one detection problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerOperatingPoint {
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    pub t_symbols: u32,
    pub delta: f64,
    pub sigma_min_sq: f64,
    pub sigma_max_sq: f64,
}

impl BerOperatingPoint {
    pub fn new(sigma0_sq: f64, sigma1_sq: f64, t_symbols: u32) -> Result<Self> {
        for (name, v) in [("sigma0_sq", sigma0_sq), ("sigma1_sq", sigma1_sq)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if t_symbols == 0 {
            return Err(Error::Config("t_symbols must be at least 1".into()));
        }
        let sigma_min_sq = sigma0_sq.min(sigma1_sq);
        let sigma_max_sq = sigma0_sq.max(sigma1_sq);
        // Δ = ln(r)/(σ_min² (r − 1)) with r = σ_max²/σ_min²; ln(1+u)/u → 1 as u → 0.
        let u = (sigma_max_sq - sigma_min_sq) / sigma_min_sq;
        let log_ratio_over_u = if u == 0.0 { 1.0 } else { u.ln_1p() / u };
        Ok(Self {
            sigma0_sq,
            sigma1_sq,
            t_symbols,
            delta: log_ratio_over_u / sigma_min_sq,
            sigma_min_sq,
            sigma_max_sq,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma0_sq == self.sigma1_sq
    }

    /// `T σ_min² Δ` (argument of the lower incomplete gamma).
    pub fn lower_arg(&self) -> f64 {
        self.t_symbols as f64 * self.sigma_min_sq * self.delta
    }

    /// `T σ_max² Δ` (argument of the upper incomplete gamma).
    pub fn upper_arg(&self) -> f64 {
        self.t_symbols as f64 * self.sigma_max_sq * self.delta
    }

    pub fn ber(&self) -> f64 {
        if self.is_degenerate() {
            return 0.5;
        }
        let t = self.t_symbols as f64;
        let missed = specfun::reg_lower_gamma(t, self.lower_arg()).expect("valid gamma arguments");
        let false_alarm = specfun::reg_upper_gamma(t, self.upper_arg()).expect("valid gamma arguments");
        (0.5 * (missed + false_alarm)).min(0.5)
    }

    pub fn threshold(&self) -> Result<f64> {
        if self.is_degenerate() {
            return Err(Error::Degenerate(
                "equal variances: the energy test cannot separate the hypotheses".into(),
            ));
        }
        Ok(self.t_symbols as f64 * self.sigma0_sq * self.sigma1_sq * self.delta)
    }
}

/// Closed-form bit error rate of the energy detector.
pub fn ber_closed_form(sigma0_sq: f64, sigma1_sq: f64, t_symbols: u32) -> Result<f64> {
    Ok(BerOperatingPoint::new(sigma0_sq, sigma1_sq, t_symbols)?.ber())
}

/// BER as a function of the variance ratio `σ1²/σ0² ≥ 1` alone.
pub fn ratio_ber(ratio: f64, t_symbols: u32) -> Result<f64> {
    if !(ratio >= 1.0) {
        return Err(Error::Config(format!("variance ratio must be >= 1, got {ratio}")));
    }
    ber_closed_form(1.0, ratio, t_symbols)
}

/// Likelihood-ratio energy threshold `τ = T σ0² σ1² Δ`.
pub fn detection_threshold(sigma0_sq: f64, sigma1_sq: f64, t_symbols: u32) -> Result<f64> {
    BerOperatingPoint::new(sigma0_sq, sigma1_sq, t_symbols)?.threshold()
}

/// Smallest variance ratio `λ_s ≥ 1` with `ratio_ber(λ_s, T) = ber_target`.
pub fn solve_lambda_s(ber_target: f64, t_symbols: u32) -> Result<f64> {
    if !(ber_target > 0.0 && ber_target < 0.5) {
        return Err(Error::Config(format!(
            "BER target must lie in (0, 0.5) to admit a ratio threshold, got {ber_target}"
        )));
    }
    if t_symbols == 0 {
        return Err(Error::Config("t_symbols must be at least 1".into()));
    }
    let f = |r: f64| ratio_ber(r, t_symbols).expect("ratio >= 1 inside bracket") - ber_target;
    let mut hi = 2.0;
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Config(format!(
                "BER target {ber_target} unreachable for T = {t_symbols}"
            )));
        }
    }
    let tol = ToleranceSpec::new(1e-15, 1e-15, 1000)?;
    match find_root_monotone(f, 1.0, hi, tol) {
        Ok(r) => Ok(r),
        Err(specfun::SpecFunError::NoConvergence { best, residual, .. }) if residual.abs() < 1e-12 => {
            Ok(best)
        }
        Err(e) => Err(e.into()),
    }
}

/// Outcome of a Monte Carlo energy-detection run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloBer {
    pub trials: u64,
    pub errors: u64,
    pub ber: f64,
    /// 99% normal-approximation half-width around `ber`.
    pub half_width: f64,
}

impl MonteCarloBer {
    /// Binomial standard deviation of the error fraction if the true BER is `p`.
    pub fn binomial_sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Draws `n_trials` equiprobable hypotheses and runs the threshold test on
/// `T` circular complex Gaussian samples each.
///
/// Trials are split into fixed-size partitions whose generators are keyed by
/// `(seed, partition index)`, so the result does not depend on the thread pool.
pub fn simulate_energy_detection(
    sigma0_sq: f64,
    sigma1_sq: f64,
    t_symbols: u32,
    n_trials: u64,
    seed: u64,
) -> Result<MonteCarloBer> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let point = BerOperatingPoint::new(sigma0_sq, sigma1_sq, t_symbols)?;
    // Equal variances carry no information; any fixed test errs half the
    // time, so threshold at the mean energy.
    let tau = if point.is_degenerate() {
        t_symbols as f64 * sigma0_sq
    } else {
        point.threshold()?
    };
    let one_is_louder = sigma1_sq > sigma0_sq;
    let n_chunks = (n_trials as usize).div_ceil(MC_CHUNK);

    let errors: u64 = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let start = chunk * MC_CHUNK;
            let len = MC_CHUNK.min(n_trials as usize - start);
            let mut errors = 0u64;
            for _ in 0..len {
                let symbol_one: bool = rng.gen();
                let var = if symbol_one { sigma1_sq } else { sigma0_sq };
                let mut energy = 0.0;
                for _ in 0..t_symbols {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    energy += re * re + im * im;
                }
                energy *= 0.5 * var;
                let decide_one = (energy > tau) == one_is_louder;
                if decide_one != symbol_one {
                    errors += 1;
                }
            }
            errors
        })
        .sum();

    let ber = errors as f64 / n_trials as f64;
    Ok(MonteCarloBer {
        trials: n_trials,
        errors,
        ber,
        half_width: Z_99 * (ber * (1.0 - ber) / n_trials as f64).sqrt(),
    })
}
