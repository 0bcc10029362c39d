//! System parameters, channels, decision variables and the pure evaluators
//! for effective channels, rates, branch variances and constraint residuals.
//!
//! Receiver index `0` is the BRx and `1..=K` are the PRs throughout.
//! The effective channel of receiver `k` under backscatter branch `i` is
//! `h_k − (−1)^i G̃_k φ` with the cached cascade `G̃_k = G·diag(g_k)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector;
use crate::error::{Error, Result};
use crate::specfun::log2_1p;

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Scalar problem parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_tx: usize,
    pub n_ris: usize,
    pub n_pr: usize,
    pub t_symbols: u32,
    /// δ², linear watts.
    pub noise_power: f64,
    /// Γ_p = 2^{r_p} − 1 (linear).
    pub gamma_p: f64,
    /// Variance-ratio threshold λ_s matching `ber_target`.
    pub lambda_s: f64,
    /// Λ_s.
    pub ber_target: f64,
}

impl SystemConfig {
    /// Builds a config, deriving `lambda_s` from `ber_target`.
    ///
    /// A target of exactly 0.5 maps to `lambda_s = 1`, i.e. a vacuous BER
    /// requirement.
    pub fn new(
        n_tx: usize,
        n_ris: usize,
        n_pr: usize,
        t_symbols: u32,
        noise_power: f64,
        gamma_p: f64,
        ber_target: f64,
    ) -> Result<Self> {
        if n_tx == 0 || n_ris == 0 || n_pr == 0 || t_symbols == 0 {
            return Err(Error::Config(format!(
                "counts must be positive (n_tx={n_tx}, n_ris={n_ris}, n_pr={n_pr}, T={t_symbols})"
            )));
        }
        if !(noise_power > 0.0) || !noise_power.is_finite() {
            return Err(Error::Config(format!("noise power must be positive, got {noise_power}")));
        }
        if !(gamma_p > 0.0) || !gamma_p.is_finite() {
            return Err(Error::Config(format!("gamma_p must be positive, got {gamma_p}")));
        }
        if !(ber_target > 0.0 && ber_target <= 0.5) {
            return Err(Error::Config(format!("ber_target must lie in (0, 0.5], got {ber_target}")));
        }
        let lambda_s = if ber_target == 0.5 {
            1.0
        } else {
            detector::solve_lambda_s(ber_target, t_symbols)?
        };
        Ok(Self {
            n_tx,
            n_ris,
            n_pr,
            t_symbols,
            noise_power,
            gamma_p,
            lambda_s,
            ber_target,
        })
    }

    /// Desk-scale defaults at the paper operating point (Γ_p = 15 dB, T = 50,
    /// Λ_s = 0.0786) with unit noise power.
    pub fn desk(n_tx: usize, n_ris: usize, n_pr: usize) -> Self {
        Self::new(n_tx, n_ris, n_pr, 50, 1.0, db_to_linear(15.0), 0.0786)
            .expect("desk defaults are valid")
    }

    /// Rate target in bits/s/Hz implied by `gamma_p`.
    pub fn rate_target(&self) -> f64 {
        log2_1p(self.gamma_p)
    }

    /// Re-checks the `lambda_s`/`ber_target` pairing, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(
            self.n_tx,
            self.n_ris,
            self.n_pr,
            self.t_symbols,
            self.noise_power,
            self.gamma_p,
            self.ber_target,
        )?;
        if (fresh.lambda_s - self.lambda_s).abs() > 1e-9 * fresh.lambda_s {
            return Err(Error::Config(format!(
                "lambda_s = {} inconsistent with ber_target = {} (expected {})",
                self.lambda_s, self.ber_target, fresh.lambda_s
            )));
        }
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// All propagation channels of one realization plus cached cascades.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    h_pr: Vec<CVector>,
    h_brx: CVector,
    g_mat: CMatrix,
    g_pr: Vec<CVector>,
    g_brx: CVector,
    cascades: Vec<CMatrix>,
}

impl ChannelSet {
    pub fn new(
        h_pr: Vec<CVector>,
        h_brx: CVector,
        g_mat: CMatrix,
        g_pr: Vec<CVector>,
        g_brx: CVector,
    ) -> Result<Self> {
        let (n_tx, n_ris) = g_mat.shape();
        if h_pr.is_empty() || h_pr.len() != g_pr.len() {
            return Err(Error::Dimension(format!(
                "{} direct PR channels vs {} RIS->PR channels",
                h_pr.len(),
                g_pr.len()
            )));
        }
        if h_brx.len() != n_tx || h_pr.iter().any(|h| h.len() != n_tx) {
            return Err(Error::Dimension(format!("direct channels must have length N_t = {n_tx}")));
        }
        if g_brx.len() != n_ris || g_pr.iter().any(|g| g.len() != n_ris) {
            return Err(Error::Dimension(format!("RIS channels must have length N_r = {n_ris}")));
        }
        let cascades = std::iter::once(&g_brx)
            .chain(g_pr.iter())
            .map(|g| cascade(&g_mat, g))
            .collect();
        Ok(Self {
            h_pr,
            h_brx,
            g_mat,
            g_pr,
            g_brx,
            cascades,
        })
    }

    pub fn n_tx(&self) -> usize {
        self.g_mat.nrows()
    }

    pub fn n_ris(&self) -> usize {
        self.g_mat.ncols()
    }

    pub fn n_pr(&self) -> usize {
        self.h_pr.len()
    }

    /// Number of receivers including the BRx (K + 1).
    pub fn n_receivers(&self) -> usize {
        self.h_pr.len() + 1
    }

    fn check_receiver(&self, k: usize) -> Result<()> {
        if k > self.n_pr() {
            return Err(Error::Index {
                index: k,
                limit: self.n_pr(),
            });
        }
        Ok(())
    }

    /// PTx → receiver `k` channel (`k = 0` is the BRx).
    pub fn direct(&self, k: usize) -> &CVector {
        if k == 0 {
            &self.h_brx
        } else {
            &self.h_pr[k - 1]
        }
    }

    /// RIS → receiver `k` channel.
    pub fn ris_to(&self, k: usize) -> &CVector {
        if k == 0 {
            &self.g_brx
        } else {
            &self.g_pr[k - 1]
        }
    }

    pub fn g_mat(&self) -> &CMatrix {
        &self.g_mat
    }

    /// `G̃_k = G·diag(g_k)`.
    pub fn cascade(&self, k: usize) -> &CMatrix {
        &self.cascades[k]
    }

    /// Multiplies every channel seen at the receivers by `factor`.
    ///
    /// Direct links and `G` are scaled, RIS→receiver links are not, so every
    /// effective channel scales by exactly `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = Complex64::new(factor, 0.0);
        Self::new(
            self.h_pr.iter().map(|h| h * f).collect(),
            &self.h_brx * f,
            &self.g_mat * f,
            self.g_pr.clone(),
            self.g_brx.clone(),
        )
        .expect("scaling preserves dimensions")
    }

    /// Same realization with the PTx → RIS link removed (`G = 0`).
    pub fn without_ris(&self) -> Self {
        Self::new(
            self.h_pr.clone(),
            self.h_brx.clone(),
            CMatrix::zeros(self.n_tx(), self.n_ris()),
            self.g_pr.clone(),
            self.g_brx.clone(),
        )
        .expect("dimensions unchanged")
    }

    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n_tx() != cfg.n_tx || self.n_ris() != cfg.n_ris || self.n_pr() != cfg.n_pr {
            return Err(Error::Dimension(format!(
                "channels are N_t={}, N_r={}, K={} but config says N_t={}, N_r={}, K={}",
                self.n_tx(),
                self.n_ris(),
                self.n_pr(),
                cfg.n_tx,
                cfg.n_ris,
                cfg.n_pr
            )));
        }
        Ok(())
    }

    pub fn to_fixture(&self) -> ChannelFixture {
        ChannelFixture {
            n_tx: self.n_tx(),
            n_ris: self.n_ris(),
            n_pr: self.n_pr(),
            h_pr: self.h_pr.iter().map(vec_to_pairs).collect(),
            h_brx: vec_to_pairs(&self.h_brx),
            g_mat: (0..self.n_tx())
                .map(|r| self.g_mat.row(r).iter().map(|z| [z.re, z.im]).collect())
                .collect(),
            g_pr: self.g_pr.iter().map(vec_to_pairs).collect(),
            g_brx: vec_to_pairs(&self.g_brx),
        }
    }

    pub fn from_fixture(fx: &ChannelFixture) -> Result<Self> {
        if fx.g_mat.len() != fx.n_tx || fx.g_mat.iter().any(|r| r.len() != fx.n_ris) {
            return Err(Error::Dimension(format!(
                "fixture G must be {} rows of {} entries",
                fx.n_tx, fx.n_ris
            )));
        }
        if fx.h_pr.len() != fx.n_pr {
            return Err(Error::Dimension(format!("fixture lists {} PRs, expected {}", fx.h_pr.len(), fx.n_pr)));
        }
        let g_mat = CMatrix::from_fn(fx.n_tx, fx.n_ris, |r, c| pair(fx.g_mat[r][c]));
        Self::new(
            fx.h_pr.iter().map(|v| pairs_to_vec(v)).collect(),
            pairs_to_vec(&fx.h_brx),
            g_mat,
            fx.g_pr.iter().map(|v| pairs_to_vec(v)).collect(),
            pairs_to_vec(&fx.g_brx),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_fixture()).expect("fixture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fx: ChannelFixture = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_fixture(&fx)
    }
}

fn cascade(g_mat: &CMatrix, g: &CVector) -> CMatrix {
    let mut out = g_mat.clone();
    for (mut col, gn) in out.column_iter_mut().zip(g.iter()) {
        col *= *gn;
    }
    out
}

fn pair(p: [f64; 2]) -> Complex64 {
    Complex64::new(p[0], p[1])
}

fn vec_to_pairs(v: &CVector) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn pairs_to_vec(v: &[[f64; 2]]) -> CVector {
    CVector::from_iterator(v.len(), v.iter().copied().map(pair))
}

/// Plain-text channel fixture: every complex number is a `[re, im]` pair and
/// `g_mat` is stored row-major (`n_tx` rows of `n_ris` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFixture {
    pub n_tx: usize,
    pub n_ris: usize,
    pub n_pr: usize,
    pub h_pr: Vec<Vec<[f64; 2]>>,
    pub h_brx: Vec<[f64; 2]>,
    pub g_mat: Vec<Vec<[f64; 2]>>,
    pub g_pr: Vec<Vec<[f64; 2]>>,
    pub g_brx: Vec<[f64; 2]>,
}

/// RIS reflection vector with unit-modulus entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RisPhase {
    phases: CVector,
}

impl RisPhase {
    pub const UNIT_TOL: f64 = 1e-12;

    pub fn new(phases: CVector) -> Result<Self> {
        if let Some(bad) = phases.iter().find(|z| (z.norm() - 1.0).abs() > Self::UNIT_TOL) {
            return Err(Error::Config(format!("RIS entry {bad} is not unit modulus")));
        }
        Ok(Self { phases })
    }

    /// Projects every entry onto the unit circle (zeros map to 1).
    pub fn normalized(phases: CVector) -> Self {
        Self {
            phases: phases.map(|z| {
                let r = z.norm();
                if r > 0.0 {
                    z / r
                } else {
                    Complex64::new(1.0, 0.0)
                }
            }),
        }
    }

    pub fn from_angles(theta: &[f64]) -> Self {
        Self {
            phases: CVector::from_iterator(theta.len(), theta.iter().map(|t| Complex64::from_polar(1.0, *t))),
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            phases: CVector::from_element(n, Complex64::new(1.0, 0.0)),
        }
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        Self::from_angles(&theta)
    }

    pub fn negated(&self) -> Self {
        Self {
            phases: -&self.phases,
        }
    }

    pub fn as_vector(&self) -> &CVector {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn max_modulus_deviation(&self) -> f64 {
        self.phases.iter().map(|z| (z.norm() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn set(&mut self, n: usize, value: Complex64) {
        self.phases[n] = value;
    }
}

/// Transmit beamformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub w: CVector,
}

impl Precoder {
    pub fn new(w: CVector) -> Result<Self> {
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Config("precoder has non-finite entries".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(n: usize) -> Self {
        Self { w: CVector::zeros(n) }
    }

    pub fn power(&self) -> f64 {
        transmit_power(self)
    }
}

/// Effective-channel stacks `H_{E,i}`, one `N_t × (K+1)` matrix per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannels {
    pub branch: [CMatrix; 2],
}

impl EffectiveChannels {
    pub fn column(&self, k: usize, i: usize) -> CVector {
        self.branch[i].column(k).into_owned()
    }

    /// `h_{E,k}(i)^H w`.
    pub fn inner(&self, k: usize, i: usize, w: &Precoder) -> Complex64 {
        self.branch[i].column(k).dotc(&w.w)
    }

    pub fn n_receivers(&self) -> usize {
        self.branch[0].ncols()
    }
}

/// Sign multiplying the cascade term in branch `i`: `−(−1)^i`.
pub fn branch_sign(i: usize) -> f64 {
    if i == 0 {
        -1.0
    } else {
        1.0
    }
}

/// `h_{E,k}(i) = h_k − (−1)^i G̃_k φ`.
pub fn effective_channel(ch: &ChannelSet, phi: &RisPhase, k: usize, i: usize) -> Result<CVector> {
    ch.check_receiver(k)?;
    if i > 1 {
        return Err(Error::Index { index: i, limit: 1 });
    }
    if phi.len() != ch.n_ris() {
        return Err(Error::Dimension(format!(
            "phase vector has {} entries, RIS has {}",
            phi.len(),
            ch.n_ris()
        )));
    }
    let reflected = ch.cascade(k) * phi.as_vector();
    Ok(ch.direct(k) + reflected * Complex64::new(branch_sign(i), 0.0))
}

pub fn stack_effective(ch: &ChannelSet, phi: &RisPhase) -> EffectiveChannels {
    let n_rx = ch.n_receivers();
    let mut b0 = CMatrix::zeros(ch.n_tx(), n_rx);
    let mut b1 = CMatrix::zeros(ch.n_tx(), n_rx);
    for k in 0..n_rx {
        let reflected = ch.cascade(k) * phi.as_vector();
        let direct = ch.direct(k);
        b0.set_column(k, &(direct - &reflected));
        b1.set_column(k, &(direct + &reflected));
    }
    EffectiveChannels { branch: [b0, b1] }
}

/// `(σ0², σ1²)` at the BRx.
pub fn branch_variances(eff: &EffectiveChannels, w: &Precoder, noise_power: f64) -> (f64, f64) {
    (
        eff.inner(0, 0, w).norm_sqr() + noise_power,
        eff.inner(0, 1, w).norm_sqr() + noise_power,
    )
}

/// Expected rate at PR `k` over equiprobable backscatter symbols.
pub fn primary_rate(eff: &EffectiveChannels, w: &Precoder, noise_power: f64, k: usize) -> f64 {
    0.5 * (0..2)
        .map(|i| log2_1p(eff.inner(k, i, w).norm_sqr() / noise_power))
        .sum::<f64>()
}

/// One rate-balanced residual `|h_{E,k}^H(i) w|² − δ²Γ_p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateResidual {
    pub k: usize,
    pub i: usize,
    pub value: f64,
}

/// Residuals for all PRs (`k = 1..=K`) and both branches, ordered by `(k, i)`.
pub fn rate_residuals(eff: &EffectiveChannels, w: &Precoder, cfg: &SystemConfig) -> Vec<RateResidual> {
    let floor = cfg.noise_power * cfg.gamma_p;
    (1..eff.n_receivers())
        .flat_map(|k| {
            (0..2).map(move |i| RateResidual {
                k,
                i,
                value: eff.inner(k, i, w).norm_sqr() - floor,
            })
        })
        .collect()
}

/// `|h_{E,0}^H(1)w|² − λ_s|h_{E,0}^H(0)w|² + (1−λ_s)δ²`.
pub fn ber_constraint_residual(eff: &EffectiveChannels, w: &Precoder, cfg: &SystemConfig) -> f64 {
    eff.inner(0, 1, w).norm_sqr() - cfg.lambda_s * eff.inner(0, 0, w).norm_sqr()
        + (1.0 - cfg.lambda_s) * cfg.noise_power
}

pub fn transmit_power(w: &Precoder) -> f64 {
    w.w.norm_squared()
}

/// Which constraint a [`ConstraintCheck`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Rate-balanced SNR floor for receiver `k` under branch `i`.
    Rate { k: usize, i: usize },
    /// Static-RIS (single branch) SNR floor for receiver `k`.
    StaticRate { k: usize },
    /// Variance-ratio form of the BRx BER constraint.
    Ber,
    /// Secondary SNR of the backscatter link (conventional SR baseline).
    SecondarySnr,
    UnitModulus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub kind: ConstraintKind,
    /// Residual in noise-normalized (SNR) units; nonnegative means satisfied.
    pub residual: f64,
    pub pass: bool,
}

/// Per-constraint residuals of one candidate solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub checks: Vec<ConstraintCheck>,
    pub power: f64,
    /// Expected rate at each PR (reported, not constrained).
    pub expected_rates: Vec<f64>,
    pub tol: f64,
}

impl FeasibilityReport {
    pub fn new(tol: f64, power: f64) -> Self {
        Self {
            checks: Vec::new(),
            power,
            expected_rates: Vec::new(),
            tol,
        }
    }

    pub fn push(&mut self, kind: ConstraintKind, residual: f64) {
        self.checks.push(ConstraintCheck {
            kind,
            residual,
            pass: residual >= -self.tol,
        });
    }

    /// Unit-modulus check; the residual is minus the worst deviation.
    pub fn push_unit_modulus(&mut self, phi: &RisPhase) {
        let dev = phi.max_modulus_deviation();
        self.checks.push(ConstraintCheck {
            kind: ConstraintKind::UnitModulus,
            residual: -dev,
            pass: dev <= RisPhase::UNIT_TOL.max(self.tol),
        });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn worst_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(f64::INFINITY, f64::min)
    }

    pub fn get(&self, kind: ConstraintKind) -> Option<&ConstraintCheck> {
        self.checks.iter().find(|c| c.kind == kind)
    }
}

/// Evaluates every constraint of the ID-SR power-minimization problem.
///
/// Residuals are divided by δ² so that `tol` is an SNR margin independent of
/// the absolute noise level.
pub fn check_feasibility(
    ch: &ChannelSet,
    phi: &RisPhase,
    w: &Precoder,
    cfg: &SystemConfig,
    tol: f64,
) -> FeasibilityReport {
    let eff = stack_effective(ch, phi);
    let mut report = FeasibilityReport::new(tol, transmit_power(w));
    for r in rate_residuals(&eff, w, cfg) {
        report.push(ConstraintKind::Rate { k: r.k, i: r.i }, r.value / cfg.noise_power);
    }
    // The BER depends only on the variance ratio, so either branch ordering
    // meets the target; under φ → −φ the two orderings trade places.
    let primary = ber_constraint_residual(&eff, w, cfg);
    let companion = eff.inner(0, 0, w).norm_sqr() - cfg.lambda_s * eff.inner(0, 1, w).norm_sqr()
        + (1.0 - cfg.lambda_s) * cfg.noise_power;
    report.push(ConstraintKind::Ber, primary.max(companion) / cfg.noise_power);
    report.push_unit_modulus(phi);
    report.expected_rates = (1..eff.n_receivers())
        .map(|k| primary_rate(&eff, w, cfg.noise_power, k))
        .collect();
    report
}

pub(crate) fn zero() -> Complex64 {
    ZERO
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub fn cn<R: Rng>(rng: &mut R, scale: f64) -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * (scale / std::f64::consts::SQRT_2)
    }

    pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> CVector {
        CVector::from_fn(n, |_, _| cn(rng, scale))
    }

    pub fn random_channels(seed: u64, n_tx: usize, n_ris: usize, n_pr: usize) -> ChannelSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_pr = (0..n_pr).map(|_| random_vec(&mut rng, n_tx, 1.0)).collect();
        let h_brx = random_vec(&mut rng, n_tx, 1.0);
        let g = CMatrix::from_fn(n_tx, n_ris, |_, _| cn(&mut rng, 0.5));
        let g_pr = (0..n_pr).map(|_| random_vec(&mut rng, n_ris, 0.5)).collect();
        let g_brx = random_vec(&mut rng, n_ris, 0.5);
        ChannelSet::new(h_pr, h_brx, g, g_pr, g_brx).unwrap()
    }
}
