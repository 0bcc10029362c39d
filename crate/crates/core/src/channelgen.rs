//! Geometry-driven Rayleigh channel sampling.
//!
//! Every entry is `√PL(d) · CN(0, 1)` with the log-distance path loss
//! `PL(d) = PL_0 · d^{−α}` (PL_0 at 1 m), with one exponent per link class.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{db_to_linear, CMatrix, CVector, ChannelSet, SystemConfig};
use crate::specfun::SpecFunError;

pub type Point = [f64; 3];

/// Default PR line, `x ∈ [30, 70]` m.
const PR_LINE: (f64, f64) = (30.0, 70.0);

/// Path-loss exponent per link class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathlossExponents {
    pub ptx_pr: f64,
    pub ptx_brx: f64,
    pub ptx_ris: f64,
    pub ris_pr: f64,
    pub ris_brx: f64,
}

impl Default for PathlossExponents {
    fn default() -> Self {
        Self {
            ptx_pr: 3.5,
            ptx_brx: 3.5,
            ptx_ris: 2.2,
            ris_pr: 2.2,
            ris_brx: 2.2,
        }
    }
}

impl PathlossExponents {
    fn all(&self) -> [f64; 5] {
        [self.ptx_pr, self.ptx_brx, self.ptx_ris, self.ris_pr, self.ris_brx]
    }
}

/// Node positions (metres) and path-loss parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub ptx: Point,
    pub ris: Point,
    pub brx: Point,
    /// Explicit PR positions (the first `n_pr` are used). Empty means
    /// `n_pr` receivers evenly spaced on the default line.
    pub prs: Vec<Point>,
    /// Path loss at the 1 m reference distance, dB (negative).
    pub ref_loss_db: f64,
    pub exponents: PathlossExponents,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            ptx: [0.0, 0.0, 10.0],
            ris: [50.0, 10.0, 10.0],
            brx: [52.0, 12.0, 1.5],
            prs: Vec::new(),
            ref_loss_db: -30.0,
            exponents: PathlossExponents::default(),
        }
    }
}

impl GeometryConfig {
    /// `n` PRs evenly spaced on `x ∈ [x0, x1]`, `y = 0`, height 1.5 m.
    pub fn pr_line(n: usize, x0: f64, x1: f64) -> Vec<Point> {
        match n {
            0 => Vec::new(),
            1 => vec![[0.5 * (x0 + x1), 0.0, 1.5]],
            _ => (0..n)
                .map(|i| [x0 + (x1 - x0) * i as f64 / (n - 1) as f64, 0.0, 1.5])
                .collect(),
        }
    }

    /// Default layout with `n_pr` receivers on the standard line.
    pub fn with_prs(n_pr: usize) -> Self {
        Self {
            prs: Self::pr_line(n_pr, PR_LINE.0, PR_LINE.1),
            ..Self::default()
        }
    }

    /// Shifts the BRx and the first `n_pr` PRs by `offset · direction`.
    pub fn shifted(&self, direction: Point, offset: f64, n_pr: usize) -> Self {
        let mv = |p: Point| [p[0] + offset * direction[0], p[1] + offset * direction[1], p[2] + offset * direction[2]];
        Self {
            brx: mv(self.brx),
            prs: self.pr_positions(n_pr).into_iter().map(mv).collect(),
            ..self.clone()
        }
    }

    /// Positions of the first `n_pr` PRs.
    pub fn pr_positions(&self, n_pr: usize) -> Vec<Point> {
        if self.prs.is_empty() {
            Self::pr_line(n_pr, PR_LINE.0, PR_LINE.1)
        } else {
            self.prs.iter().take(n_pr).copied().collect()
        }
    }

    pub fn validate(&self, n_pr: usize) -> Result<()> {
        if !self.prs.is_empty() && self.prs.len() < n_pr {
            return Err(Error::Config(format!(
                "geometry lists {} PR positions, {n_pr} requested",
                self.prs.len()
            )));
        }
        if self.exponents.all().iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("path-loss exponents must be positive: {:?}", self.exponents)));
        }
        if !self.ref_loss_db.is_finite() {
            return Err(Error::Config("reference path loss must be finite".into()));
        }
        let prs = self.pr_positions(n_pr);
        let all = [self.ptx, self.ris, self.brx];
        for p in all.iter().chain(prs.iter()) {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("non-finite position {p:?}")));
            }
        }
        let rx = std::iter::once(&self.brx).chain(prs.iter());
        for p in rx {
            for src in [self.ptx, self.ris] {
                if distance(src, *p) <= 0.0 {
                    return Err(Error::Config(format!("receiver at {p:?} coincides with a transmitter")));
                }
            }
        }
        if distance(self.ptx, self.ris) <= 0.0 {
            return Err(Error::Config("PTx and RIS coincide".into()));
        }
        Ok(())
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Linear power gain `10^{ref/10} · d^{−α}`.
pub fn pathloss_linear(distance_m: f64, exponent: f64, ref_loss_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(SpecFunError::Domain(format!("path-loss distance must be positive, got {distance_m}")).into());
    }
    Ok(db_to_linear(ref_loss_db) * distance_m.powf(-exponent))
}

fn cn(rng: &mut ChaCha8Rng, amp: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * (amp * std::f64::consts::FRAC_1_SQRT_2)
}

/// Draws one channel realization for the dimensions in `cfg`; identical
/// `seed` gives bit-identical channels.
pub fn sample_channels(geo: &GeometryConfig, cfg: &SystemConfig, seed: u64) -> Result<ChannelSet> {
    let (n_tx, n_ris, n_pr) = (cfg.n_tx, cfg.n_ris, cfg.n_pr);
    geo.validate(n_pr)?;
    let ex = &geo.exponents;
    let amp = |a: Point, b: Point, exp: f64| -> Result<f64> { Ok(pathloss_linear(distance(a, b), exp, geo.ref_loss_db)?.sqrt()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let a_brx = amp(geo.ptx, geo.brx, ex.ptx_brx)?;
    let h_brx = CVector::from_fn(n_tx, |_, _| cn(&mut rng, a_brx));
    let prs = geo.pr_positions(n_pr);
    let mut h_pr = Vec::with_capacity(n_pr);
    for &p in &prs {
        let a = amp(geo.ptx, p, ex.ptx_pr)?;
        h_pr.push(CVector::from_fn(n_tx, |_, _| cn(&mut rng, a)));
    }
    let a_g = amp(geo.ptx, geo.ris, ex.ptx_ris)?;
    let g = CMatrix::from_fn(n_tx, n_ris, |_, _| cn(&mut rng, a_g));
    let a_gb = amp(geo.ris, geo.brx, ex.ris_brx)?;
    let g_brx = CVector::from_fn(n_ris, |_, _| cn(&mut rng, a_gb));
    let mut g_pr = Vec::with_capacity(n_pr);
    for &p in &prs {
        let a = amp(geo.ris, p, ex.ris_pr)?;
        g_pr.push(CVector::from_fn(n_ris, |_, _| cn(&mut rng, a)));
    }
    ChannelSet::new(h_pr, h_brx, g, g_pr, g_brx)
}
