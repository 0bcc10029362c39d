//! Penalty-based block coordinate descent.
//!
//! Every constrained inner product of the design problem is a *link*: an
//! effective channel `e = d + s·G̃_c φ` (direct part `d`, optional cascade
//! `c` with sign `s`) paired with an auxiliary `q ≈ e^H w`. The penalized
//! objective is
//!
//! ```text
//! ‖w‖² + ρ ‖q − E^H w‖²,   E = [e_1, …, e_L]
//! ```
//!
//! and the blocks `q`, `φ`, `w` are minimized in turn, each in closed form:
//! `q` by projection onto its constraint set, `φ` element by element on the
//! unit circle, `w` by a regularized normal-equation solve. The outer loop
//! grows `ρ` geometrically until `‖q − E^H w‖_∞` drops below the tolerance.
//!
//! The solver works in noise-normalized units (channels divided by `δ`),
//! which leaves `w` and the transmit power unchanged and makes the
//! equality-violation tolerance an amplitude relative to the noise floor.

use nalgebra::linalg::Cholesky;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, branch_sign, CMatrix, CVector, ChannelSet, ConstraintKind, FeasibilityReport, Precoder, RisPhase,
    SystemConfig,
};
use crate::specfun::{find_root_monotone, ToleranceSpec};

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Loop controls for [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Initial penalty weight relative to `‖w_0‖² / ‖E^H w_0‖²`, the ratio
    /// that balances power against the penalty at the starting point.
    pub rho_init: f64,
    pub rho_growth: f64,
    /// Inner stop: largest relative block change.
    pub eps_inner: f64,
    /// Outer stop: `‖q − E^H w‖_∞`.
    pub eps_outer: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub seed: u64,
    /// Record the penalty objective after every block update.
    pub record_blocks: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rho_init: 10.0,
            rho_growth: 4.0,
            eps_inner: 1e-4,
            eps_outer: 1e-4,
            max_outer: 30,
            max_inner: 200,
            seed: 0,
            record_blocks: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_init > 0.0) || !(self.rho_growth > 1.0) {
            return Err(Error::Config(format!(
                "need rho_init > 0 and rho_growth > 1 (got {}, {})",
                self.rho_init, self.rho_growth
            )));
        }
        if !(self.eps_inner > 0.0) || !(self.eps_outer > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Which design problem a [`PenaltyProblem`] encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "UPPERCASE")]
pub enum SystemKind {
    #[serde(rename = "IDSR")]
    IdSr,
    #[serde(rename = "WORIS")]
    Woris,
    #[serde(rename = "WOBRX", alias = "WOBRx")]
    Wobrx,
    #[serde(rename = "CSR")]
    Csr,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::IdSr => "IDSR",
            SystemKind::Woris => "WORIS",
            SystemKind::Wobrx => "WOBRx",
            SystemKind::Csr => "CSR",
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IDSR" | "ID-SR" => Ok(SystemKind::IdSr),
            "WORIS" => Ok(SystemKind::Woris),
            "WOBRX" => Ok(SystemKind::Wobrx),
            "CSR" | "C-SR" => Ok(SystemKind::Csr),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }
}

/// Constraint attached to a link's auxiliary variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkRole {
    /// `|q|² ≥ floor` (noise-normalized).
    Floor(f64),
    /// `q_{0,0}` of the BER pair.
    BerLow,
    /// `q_{0,1}` of the BER pair (kept real).
    BerHigh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    /// Receiver whose direct channel enters `e`, if any.
    pub direct: Option<usize>,
    /// Receiver whose cascade enters `e`, with its sign.
    pub reflect: Option<(usize, f64)>,
    pub role: LinkRole,
    pub kind: ConstraintKind,
    /// Backscatter branch the link belongs to (0 for static links).
    pub branch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BerCoupling {
    low: usize,
    high: usize,
    lambda_s: f64,
}

/// A design problem in link form, in noise-normalized units.
#[derive(Debug, Clone)]
pub struct PenaltyProblem {
    kind: SystemKind,
    channels: ChannelSet,
    links: Vec<Link>,
    ber: Option<BerCoupling>,
    uses_ris: bool,
    infeasible: Option<String>,
}

impl PenaltyProblem {
    /// Assembles a problem from links over `ch` scaled to unit noise.
    pub fn from_links(
        kind: SystemKind,
        ch: &ChannelSet,
        cfg: &SystemConfig,
        links: Vec<Link>,
        uses_ris: bool,
    ) -> Result<Self> {
        ch.check_against(cfg)?;
        if links.is_empty() {
            return Err(Error::Config("problem has no links".into()));
        }
        let low = links.iter().position(|l| l.role == LinkRole::BerLow);
        let high = links.iter().position(|l| l.role == LinkRole::BerHigh);
        let ber = match (low, high) {
            (Some(low), Some(high)) => Some(BerCoupling {
                low,
                high,
                lambda_s: cfg.lambda_s,
            }),
            (None, None) => None,
            _ => return Err(Error::Config("BER links must come in pairs".into())),
        };
        let channels = ch.scaled(1.0 / cfg.noise_power.sqrt());
        let mut infeasible = None;
        for (idx, link) in links.iter().enumerate() {
            if let Some(k) = link.direct {
                if k > ch.n_pr() {
                    return Err(Error::Index { index: k, limit: ch.n_pr() });
                }
            }
            if let Some((k, _)) = link.reflect {
                if k > ch.n_pr() {
                    return Err(Error::Index { index: k, limit: ch.n_pr() });
                }
            }
            let dead_direct = link.direct.map_or(true, |k| channels.direct(k).iter().all(|z| *z == model::zero()));
            let dead_reflect = !uses_ris
                || link
                    .reflect
                    .map_or(true, |(k, _)| channels.cascade(k).iter().all(|z| *z == model::zero()));
            if dead_direct && dead_reflect {
                let needs_signal = match link.role {
                    LinkRole::Floor(f) => f > 0.0,
                    LinkRole::BerHigh => cfg.lambda_s > 1.0,
                    LinkRole::BerLow => false,
                };
                if needs_signal {
                    infeasible = Some(format!("link {idx} ({:?}) has an identically zero channel", link.kind));
                }
            }
        }
        Ok(Self {
            kind,
            channels,
            links,
            ber,
            uses_ris,
            infeasible,
        })
    }

    /// ID-SR: both backscatter branches for every receiver; the BRx carries
    /// the BER pair, PRs carry rate-balanced floors.
    pub fn idsr(ch: &ChannelSet, cfg: &SystemConfig) -> Result<Self> {
        let mut links = Vec::with_capacity(2 * ch.n_receivers());
        for i in 0..2 {
            for k in 0..ch.n_receivers() {
                let (role, kind) = if k == 0 {
                    (
                        if i == 0 { LinkRole::BerLow } else { LinkRole::BerHigh },
                        ConstraintKind::Ber,
                    )
                } else {
                    (LinkRole::Floor(cfg.gamma_p), ConstraintKind::Rate { k, i })
                };
                links.push(Link {
                    direct: Some(k),
                    reflect: Some((k, branch_sign(i))),
                    role,
                    kind,
                    branch: i,
                });
            }
        }
        Self::from_links(SystemKind::IdSr, ch, cfg, links, true)
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn uses_ris(&self) -> bool {
        self.uses_ris
    }

    /// Channels in noise-normalized units.
    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn structural_infeasibility(&self) -> Option<&str> {
        self.infeasible.as_deref()
    }

    fn reflected(&self, phi: &RisPhase) -> Vec<Option<CVector>> {
        let mut out = vec![None; self.channels.n_receivers()];
        if !self.uses_ris {
            return out;
        }
        for link in &self.links {
            if let Some((k, _)) = link.reflect {
                if out[k].is_none() {
                    out[k] = Some(self.channels.cascade(k) * phi.as_vector());
                }
            }
        }
        out
    }

    /// Link matrix `E = [e_1, …, e_L]` (N_t × L).
    pub fn link_matrix(&self, phi: &RisPhase) -> CMatrix {
        let reflected = self.reflected(phi);
        let n_tx = self.channels.n_tx();
        let mut e = CMatrix::zeros(n_tx, self.links.len());
        for (col, link) in self.links.iter().enumerate() {
            let mut v = match link.direct {
                Some(k) => self.channels.direct(k).clone(),
                None => CVector::zeros(n_tx),
            };
            if let (Some((k, sign)), true) = (link.reflect, self.uses_ris) {
                v += reflected[k].as_ref().expect("computed above") * Complex64::new(sign, 0.0);
            }
            e.set_column(col, &v);
        }
        e
    }

    /// Matched-filter start: `Σ_k h_k / ‖Σ_k h_k‖`, scaled so the weakest
    /// branch-0 floor is exactly met.
    pub fn initial_precoder(&self, phi: &RisPhase) -> Precoder {
        let n_tx = self.channels.n_tx();
        let mut dir = CVector::zeros(n_tx);
        for k in 1..self.channels.n_receivers() {
            dir += self.channels.direct(k);
        }
        if dir.norm() == 0.0 {
            dir = self.link_matrix(phi).column_sum();
        }
        if dir.norm() == 0.0 {
            dir = CVector::from_element(n_tx, ONE);
        }
        dir /= Complex64::new(dir.norm(), 0.0);
        let e = self.link_matrix(phi);
        let mut scale_sq: f64 = 0.0;
        for (col, link) in self.links.iter().enumerate() {
            if let (LinkRole::Floor(floor), 0) = (link.role, link.branch) {
                let gain = e.column(col).dotc(&dir).norm_sqr();
                if gain > 0.0 {
                    scale_sq = scale_sq.max(floor / gain);
                }
            }
        }
        if !(scale_sq > 0.0) || !scale_sq.is_finite() {
            scale_sq = 1.0;
        }
        Precoder { w: dir * Complex64::new(scale_sq.sqrt(), 0.0) }
    }

    /// Residuals of the original constraints at `(w, φ)`, in SNR units.
    pub fn feasibility(&self, phi: &RisPhase, w: &Precoder, tol: f64) -> FeasibilityReport {
        let e = self.link_matrix(phi);
        let z = e.ad_mul(&w.w);
        let mut report = FeasibilityReport::new(tol, w.power());
        for (col, link) in self.links.iter().enumerate() {
            if let LinkRole::Floor(floor) = link.role {
                report.push(link.kind, z[col].norm_sqr() - floor);
            }
        }
        if let Some(b) = self.ber {
            let (g0, g1) = (z[b.low].norm_sqr(), z[b.high].norm_sqr());
            let lam = b.lambda_s;
            // Either branch ordering of the variances satisfies the BER target.
            let primary = g1 - lam * g0 + (1.0 - lam);
            let companion = g0 - lam * g1 + (1.0 - lam);
            report.push(ConstraintKind::Ber, primary.max(companion));
        }
        if self.uses_ris {
            report.push_unit_modulus(phi);
        }
        report
    }

    /// Smallest `β ≥ 1` such that `β·w` meets every floor and the BER pair.
    /// Returns `None` when scaling cannot repair the BER constraint.
    fn feasibility_scale(&self, e: &CMatrix, w: &Precoder) -> Option<f64> {
        let z = e.ad_mul(&w.w);
        let mut beta_sq: f64 = 1.0;
        for (col, link) in self.links.iter().enumerate() {
            if let LinkRole::Floor(floor) = link.role {
                let gain = z[col].norm_sqr();
                if floor > 0.0 {
                    if gain <= 0.0 {
                        return None;
                    }
                    beta_sq = beta_sq.max(floor / gain);
                }
            }
        }
        if let Some(b) = self.ber {
            let margin = z[b.high].norm_sqr() - b.lambda_s * z[b.low].norm_sqr();
            let need = b.lambda_s - 1.0;
            if need > 0.0 {
                if margin <= 0.0 {
                    return None;
                }
                beta_sq = beta_sq.max(need / margin);
            }
        }
        beta_sq.is_finite().then(|| beta_sq.sqrt())
    }
}

/// Solver iterate.
#[derive(Debug, Clone)]
pub struct PenaltyState {
    pub w: Precoder,
    pub phi: RisPhase,
    /// Auxiliaries, one per link. For ID-SR the first `K+1` entries are
    /// `q_0` and the next `K+1` are `q_1`.
    pub q: CVector,
    pub rho: f64,
    /// Link matrix consistent with `phi`.
    pub eff: CMatrix,
}

impl PenaltyState {
    /// Starts with `q = E^H w`, i.e. zero penalty.
    pub fn new(problem: &PenaltyProblem, w: Precoder, phi: RisPhase, rho: f64) -> Self {
        let eff = problem.link_matrix(&phi);
        let q = eff.ad_mul(&w.w);
        Self { w, phi, q, rho, eff }
    }

    pub fn q0(&self) -> CVector {
        let half = self.q.len() / 2;
        self.q.rows(0, half).into_owned()
    }

    pub fn q1(&self) -> CVector {
        let half = self.q.len() / 2;
        self.q.rows(half, half).into_owned()
    }

    /// `E^H w`.
    pub fn targets(&self) -> CVector {
        self.eff.ad_mul(&self.w.w)
    }

    /// `‖q − E^H w‖_∞`.
    pub fn eq_violation(&self) -> f64 {
        (&self.q - self.targets()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// `‖w‖² + ρ ‖q − E^H w‖²`.
pub fn penalty_objective(state: &PenaltyState) -> f64 {
    state.w.power() + state.rho * (&state.q - state.targets()).norm_squared()
}

/// Projection of `z` onto `{q : |q| ≥ min_amplitude}`.
///
/// `z = 0` projects to `min_amplitude + 0j`.
pub fn update_q_rate(z: Complex64, min_amplitude: f64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        return Complex64::new(min_amplitude, 0.0);
    }
    z * (min_amplitude / r).max(1.0)
}

/// Solution of the two-variable BER projection
/// `min (q01 − t1)² + |q00 − t0|²` s.t. `q01² ≥ λ_s|q00|² + (λ_s − 1)δ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerProjectionWorkspace {
    pub t0: Complex64,
    pub t1: f64,
    pub c0: f64,
    pub c1: f64,
    pub lambda_t: f64,
    pub q00: Complex64,
    pub q01: f64,
    pub active: bool,
    /// `t1 = 0` (or numerically so): solved on the one-dimensional boundary.
    pub fallback: bool,
}

const LAMBDA_T_MAX: f64 = 1.0 - 1e-12;

pub fn update_q_ber(t0: Complex64, t1: f64, lambda_s: f64, noise: f64) -> BerProjectionWorkspace {
    let a = t0.norm_sqr();
    let b = t1 * t1;
    let offset = (lambda_s - 1.0) * noise;
    let mut ws = BerProjectionWorkspace {
        t0,
        t1,
        c0: 1.0,
        c1: 1.0,
        lambda_t: 0.0,
        q00: t0,
        q01: t1,
        active: false,
        fallback: false,
    };
    if b >= lambda_s * a + offset {
        return ws;
    }
    ws.active = true;
    // g(λ) = c1² t1² − λ_s c0² |t0|² − (λ_s − 1)δ² is increasing in λ.
    let g = |lt: f64| b / ((1.0 - lt) * (1.0 - lt)) - lambda_s * a / ((1.0 + lt * lambda_s).powi(2)) - offset;
    if b == 0.0 || g(LAMBDA_T_MAX) < 0.0 {
        // Boundary parametrization q01 = √(λ_s r² + (λ_s − 1)δ²), |q00| = r:
        // the residual λ_s r² + (λ_s−1)δ² + (r − |t0|)² is minimized at r = |t0|/(1+λ_s).
        let r = a.sqrt() / (1.0 + lambda_s);
        ws.fallback = true;
        ws.lambda_t = 1.0;
        ws.c0 = 1.0 / (1.0 + lambda_s);
        ws.c1 = f64::INFINITY;
        ws.q00 = if a > 0.0 { t0 * (r / a.sqrt()) } else { model::zero() };
        ws.q01 = (lambda_s * r * r + offset).max(0.0).sqrt();
        return ws;
    }
    let tol = ToleranceSpec::new(1e-300, 1e-16, 2000).expect("static tolerance");
    let lt = match find_root_monotone(g, 0.0, LAMBDA_T_MAX, tol) {
        Ok(x) => x,
        Err(crate::specfun::SpecFunError::NoConvergence { best, .. }) => best,
        Err(_) => 0.0,
    };
    ws.lambda_t = lt;
    ws.c0 = 1.0 / (1.0 + lt * lambda_s);
    ws.q00 = t0 * ws.c0;
    // Land exactly on the boundary; the sign follows t1 (c1 ≥ 0).
    let q01_abs = (lambda_s * ws.q00.norm_sqr() + offset).max(0.0).sqrt();
    ws.q01 = q01_abs.copysign(t1);
    ws.c1 = ws.q01 / t1;
    ws
}

/// Rotates `w` by a common phase so that `e_high^H w` is real and
/// nonnegative; no-op when that inner product is zero.
pub fn rotate_w_real(w: &Precoder, e_high: &CVector) -> Precoder {
    let z = e_high.dotc(&w.w);
    if z.norm() == 0.0 {
        return w.clone();
    }
    Precoder {
        w: &w.w * Complex64::from_polar(1.0, -z.arg()),
    }
}

/// Minimizer of `‖w‖² + ρ‖q − E^H w‖²`:
/// `(E E^H + ρ⁻¹ I) w = E q`, solved by Cholesky.
pub fn update_w(eff: &CMatrix, q: &CVector, rho: f64) -> Precoder {
    let n = eff.nrows();
    let mut gram = eff * eff.adjoint();
    for d in 0..n {
        gram[(d, d)] += Complex64::new(1.0 / rho, 0.0);
    }
    let rhs = eff * q;
    let chol = Cholesky::new(gram).expect("E E^H + I/ρ is positive definite");
    Precoder { w: chol.solve(&rhs) }
}

/// `A_φ`, `b_φ` and the running residual `b_φ − A_φ φ` for one sweep.
///
/// Row `ℓ` of `A_φ` is `s_ℓ · w^H G̃_{c(ℓ)}` and `b_ℓ = q_ℓ^* − w^H d_ℓ`, so
/// `|b_ℓ − A_ℓ φ| = |q_ℓ − e_ℓ^H w|`.
#[derive(Debug, Clone)]
pub struct PhiWorkspace {
    a: CMatrix,
    b: CVector,
    residual: CVector,
    /// Penalty contribution of links without a RIS term.
    fixed: f64,
}

impl PhiWorkspace {
    pub fn new(problem: &PenaltyProblem, state: &PenaltyState) -> Self {
        let ch = &problem.channels;
        let n_ris = ch.n_ris();
        // u = G^H w, so (w^H G̃_k)_n = g_k[n] · conj(u_n).
        let u = ch.g_mat().ad_mul(&state.w.w);
        let ris_links: Vec<(usize, usize, f64)> = problem
            .links
            .iter()
            .enumerate()
            .filter_map(|(l, link)| link.reflect.map(|(k, s)| (l, k, s)))
            .collect();
        let mut a = CMatrix::zeros(ris_links.len(), n_ris);
        let mut b = CVector::zeros(ris_links.len());
        let mut fixed = 0.0;
        let mut row = 0;
        for (l, link) in problem.links.iter().enumerate() {
            let direct_term = match link.direct {
                Some(k) => ch.direct(k).dotc(&state.w.w).conj(),
                None => model::zero(),
            };
            match link.reflect {
                Some((k, sign)) => {
                    let g = ch.ris_to(k);
                    for n in 0..n_ris {
                        a[(row, n)] = g[n] * u[n].conj() * sign;
                    }
                    b[row] = state.q[l].conj() - direct_term;
                    row += 1;
                }
                None => fixed += (state.q[l].conj() - direct_term).norm_sqr(),
            }
        }
        debug_assert_eq!(row, ris_links.len());
        let residual = &b - &a * state.phi.as_vector();
        Self { a, b, residual, fixed }
    }

    /// `‖A_φ φ − b_φ‖²` plus the φ-independent links.
    pub fn objective(&self) -> f64 {
        self.residual.norm_squared() + self.fixed
    }

    pub fn residual(&self) -> &CVector {
        &self.residual
    }

    /// `b_φ − A_φ φ` rebuilt from scratch.
    pub fn rebuilt_residual(&self, phi: &RisPhase) -> CVector {
        &self.b - &self.a * phi.as_vector()
    }

    /// Exact minimizer over `φ_n` on the unit circle with the rest fixed;
    /// updates `phi` and the running residual in O(L).
    pub fn update_element(&mut self, phi: &mut RisPhase, n: usize) -> Complex64 {
        let old = phi.as_vector()[n];
        let col = self.a.column(n);
        // c = b − A φ_{−n}
        let mut corr = model::zero();
        for (r, a_rn) in self.residual.iter().zip(col.iter()) {
            corr += a_rn.conj() * (r + a_rn * old);
        }
        let mag = corr.norm();
        if mag == 0.0 || !mag.is_finite() {
            return old;
        }
        let new = corr / mag;
        let delta = new - old;
        for (r, a_rn) in self.residual.iter_mut().zip(col.iter()) {
            *r -= a_rn * delta;
        }
        phi.set(n, new);
        new
    }
}

/// One sequential pass `n = 1..N_r`; returns the objective after each element.
pub fn sweep_phi(problem: &PenaltyProblem, state: &PenaltyState) -> (RisPhase, Vec<f64>) {
    let mut ws = PhiWorkspace::new(problem, state);
    let mut phi = state.phi.clone();
    let mut trace = Vec::with_capacity(phi.len() + 1);
    trace.push(ws.objective());
    for n in 0..phi.len() {
        ws.update_element(&mut phi, n);
        trace.push(ws.objective());
    }
    (phi, trace)
}

/// Which block was just updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Q,
    Phi,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub outer: usize,
    pub inner: usize,
    pub block: Block,
    pub objective: f64,
}

/// One row of the convergence trace (recorded after each inner iteration).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub rho: f64,
    pub penalty_objective: f64,
    pub transmit_power: f64,
    pub eq_violation_inf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxOuterReached,
    /// Equality violation stopped shrinking while ρ kept growing.
    Stalled,
    /// A constrained link has no signal path at all.
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub system: SystemKind,
    #[serde(with = "cvec_serde")]
    pub w: CVector,
    #[serde(with = "cvec_serde")]
    pub phi: CVector,
    pub power: f64,
    pub status: SolveStatus,
    pub feasible: bool,
    pub report: FeasibilityReport,
    pub trace: Vec<TraceRecord>,
    #[serde(skip)]
    pub blocks: Vec<BlockRecord>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_rho: f64,
    /// Equality violation at exit (before feasibility scaling).
    pub eq_violation: f64,
    /// Factor `β ≥ 1` applied to `w` at exit to land on the feasible set.
    pub feasibility_scale: f64,
    pub diagnostics: Option<String>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Converged and feasible.
    pub fn usable(&self) -> bool {
        self.converged() && self.feasible
    }

    pub fn precoder(&self) -> Precoder {
        Precoder { w: self.w.clone() }
    }

    pub fn ris_phase(&self) -> RisPhase {
        RisPhase::normalized(self.phi.clone())
    }

    /// Trace as CSV with a header row.
    pub fn trace_csv(&self) -> String {
        write_trace_csv(&self.trace)
    }
}

/// CSV text for trace rows: `outer_iter, inner_iter, rho, penalty_objective,
/// transmit_power, eq_violation_inf`.
pub fn write_trace_csv(trace: &[TraceRecord]) -> String {
    let mut wtr = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if trace.is_empty() {
        wtr.write_record(["outer_iter", "inner_iter", "rho", "penalty_objective", "transmit_power", "eq_violation_inf"])
            .expect("in-memory write");
    }
    for r in trace {
        wtr.serialize(r).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

/// Serializes complex vectors as `[[re, im], …]`.
pub(crate) mod cvec_serde {
    use super::CVector;
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &CVector, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = v.iter().map(|z| [z.re, z.im]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CVector, D::Error> {
        let pairs: Vec<[f64; 2]> = Vec::deserialize(d)?;
        Ok(CVector::from_iterator(pairs.len(), pairs.into_iter().map(|p| Complex64::new(p[0], p[1]))))
    }
}

/// Optional warm start.
#[derive(Debug, Clone, Default)]
pub struct SolveInit {
    pub phi: Option<RisPhase>,
    pub w: Option<Precoder>,
}

/// `‖w‖² / ‖E^H w‖²`, or 1 when either side vanishes.
fn rho_reference(state: &PenaltyState) -> f64 {
    let gain = state.targets().norm_squared();
    let power = state.w.power();
    if gain > 0.0 && power > 0.0 && (power / gain).is_finite() {
        power / gain
    } else {
        1.0
    }
}

fn rel_change(new: &CVector, old: &CVector) -> f64 {
    (new - old).norm() / (1.0 + old.norm())
}

fn q_step(problem: &PenaltyProblem, state: &mut PenaltyState) {
    if let Some(b) = problem.ber {
        state.w = rotate_w_real(&state.w, &state.eff.column(b.high).into_owned());
    }
    let z = state.targets();
    for (l, link) in problem.links.iter().enumerate() {
        if let LinkRole::Floor(floor) = link.role {
            state.q[l] = update_q_rate(z[l], floor.sqrt());
        }
    }
    if let Some(b) = problem.ber {
        let ws = update_q_ber(z[b.low], z[b.high].re, b.lambda_s, 1.0);
        state.q[b.low] = ws.q00;
        state.q[b.high] = Complex64::new(ws.q01, 0.0);
    }
}

fn phi_step(problem: &PenaltyProblem, state: &mut PenaltyState) {
    let (phi, _) = sweep_phi(problem, state);
    state.phi = phi;
    state.eff = problem.link_matrix(&state.phi);
}

fn w_step(state: &mut PenaltyState) {
    state.w = update_w(&state.eff, &state.q, state.rho);
}

/// Stages without a 2× drop in violation before a run is declared stalled.
const STALL_WINDOW: usize = 3;

/// Runs the two-level penalty BCD loop on `problem`.
pub fn run_pbcd(problem: &PenaltyProblem, opts: &SolverOptions, init: SolveInit) -> Result<SolveResult> {
    opts.validate()?;
    let n_ris = problem.channels.n_ris();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let phi0 = match init.phi {
        Some(p) => {
            if p.len() != n_ris {
                return Err(Error::Dimension(format!("initial phase has {} entries, RIS has {n_ris}", p.len())));
            }
            p
        }
        None if problem.uses_ris => RisPhase::random(n_ris, &mut rng),
        None => RisPhase::ones(n_ris),
    };
    let w0 = init.w.unwrap_or_else(|| problem.initial_precoder(&phi0));
    let mut state = PenaltyState::new(problem, w0, phi0, 1.0);
    state.rho = opts.rho_init * rho_reference(&state);

    if let Some(reason) = problem.infeasible.clone() {
        return Ok(finish(problem, state, SolveStatus::Infeasible, Vec::new(), Vec::new(), 0, 0, Some(reason)));
    }

    let mut trace = Vec::new();
    let mut blocks = Vec::new();
    let mut violations: Vec<f64> = Vec::new();
    let mut total_inner = 0;
    let mut status = SolveStatus::MaxOuterReached;
    let mut diagnostics = None;
    let mut outer_done = 0;

    for outer in 0..opts.max_outer {
        state.rho *= opts.rho_growth;
        outer_done = outer + 1;
        for inner in 0..opts.max_inner {
            let (w_old, phi_old, q_old) = (state.w.w.clone(), state.phi.as_vector().clone(), state.q.clone());
            let mut record = |state: &PenaltyState, block| {
                if opts.record_blocks {
                    blocks.push(BlockRecord {
                        outer,
                        inner,
                        block,
                        objective: penalty_objective(state),
                    });
                }
            };
            q_step(problem, &mut state);
            record(&state, Block::Q);
            if problem.uses_ris {
                phi_step(problem, &mut state);
                record(&state, Block::Phi);
            }
            w_step(&mut state);
            record(&state, Block::W);
            total_inner += 1;

            trace.push(TraceRecord {
                outer_iter: outer,
                inner_iter: inner,
                rho: state.rho,
                penalty_objective: penalty_objective(&state),
                transmit_power: state.w.power(),
                eq_violation_inf: state.eq_violation(),
            });

            let change = rel_change(&state.w.w, &w_old)
                .max(rel_change(&state.q, &q_old))
                .max(if problem.uses_ris {
                    rel_change(state.phi.as_vector(), &phi_old)
                } else {
                    0.0
                });
            if change < opts.eps_inner {
                break;
            }
        }
        let v = state.eq_violation();
        violations.push(v);
        if !v.is_finite() {
            status = SolveStatus::Stalled;
            diagnostics = Some(format!("non-finite equality violation at outer iteration {outer}"));
            break;
        }
        if v < opts.eps_outer {
            status = SolveStatus::Converged;
            break;
        }
        if violations.len() > STALL_WINDOW {
            let earlier = violations[violations.len() - 1 - STALL_WINDOW];
            if v > 0.5 * earlier {
                status = SolveStatus::Stalled;
                diagnostics = Some(format!(
                    "equality violation {v:.3e} vs {earlier:.3e} {STALL_WINDOW} stages earlier while rho grew to {:.3e}; penalty term {:.3e}",
                    state.rho,
                    state.rho * v * v
                ));
                break;
            }
        }
    }
    Ok(finish(problem, state, status, trace, blocks, outer_done, total_inner, diagnostics))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &PenaltyProblem,
    state: PenaltyState,
    status: SolveStatus,
    trace: Vec<TraceRecord>,
    blocks: Vec<BlockRecord>,
    outer_iterations: usize,
    inner_iterations: usize,
    diagnostics: Option<String>,
) -> SolveResult {
    let eq_violation = state.eq_violation();
    let mut w = match problem.ber {
        Some(b) => rotate_w_real(&state.w, &state.eff.column(b.high).into_owned()),
        None => state.w.clone(),
    };
    let mut scale = 1.0;
    if status != SolveStatus::Infeasible {
        if let Some(beta) = problem.feasibility_scale(&state.eff, &w) {
            scale = beta;
            w.w *= Complex64::new(beta, 0.0);
        }
        if let Some((polished, beta)) = polish(problem, &state.eff, &w) {
            if polished.power() < w.power() {
                w = polished;
                scale = beta;
            }
        }
    }
    let report = problem.feasibility(&state.phi, &w, FEAS_TOL);
    SolveResult {
        system: problem.kind,
        power: w.power(),
        feasible: report.all_pass() && status != SolveStatus::Infeasible,
        w: w.w,
        phi: state.phi.as_vector().clone(),
        status,
        report,
        trace,
        blocks,
        outer_iterations,
        inner_iterations,
        final_rho: state.rho,
        eq_violation,
        feasibility_scale: scale,
        diagnostics,
    }
}

/// Constraints within this relative margin of their floor count as active.
const ACTIVE_MARGIN: f64 = 1e-3;
const POLISH_STEPS: usize = 8;

/// Limit `ρ → ∞` of the `q`/`w` steps with `φ` fixed: `w` becomes the
/// minimum-norm solution of `e_ℓ^H w = q_ℓ` over the active links. Returns
/// the polished precoder (already rescaled onto the feasible set) and its
/// scale factor.
fn polish(problem: &PenaltyProblem, eff: &CMatrix, start: &Precoder) -> Option<(Precoder, f64)> {
    let mut w = start.clone();
    for _ in 0..POLISH_STEPS {
        let z = eff.ad_mul(&w.w);
        let mut cols = Vec::new();
        let mut targets = Vec::new();
        for (l, link) in problem.links.iter().enumerate() {
            if let LinkRole::Floor(floor) = link.role {
                if floor > 0.0 && z[l].norm_sqr() <= floor * (1.0 + ACTIVE_MARGIN) {
                    cols.push(l);
                    let r = z[l].norm();
                    targets.push(if r > 0.0 { z[l] * (floor.sqrt() / r) } else { Complex64::new(floor.sqrt(), 0.0) });
                }
            }
        }
        if let Some(b) = problem.ber {
            let (z_low, z_high) = (z[b.low], z[b.high]);
            let margin = z_high.norm_sqr() - b.lambda_s * z_low.norm_sqr() - (b.lambda_s - 1.0);
            if margin <= ACTIVE_MARGIN * (1.0 + z_high.norm_sqr()) {
                // Pin the pair to the nearest boundary point (or, if already
                // slightly inside, raise q01 onto the boundary).
                let phase = if z_high.norm() > 0.0 { z_high / z_high.norm() } else { ONE };
                let ws = update_q_ber(z_low * phase.conj(), z_high.norm(), b.lambda_s, 1.0);
                let (q00, q01) = if ws.active {
                    (ws.q00, ws.q01)
                } else {
                    let low = z_low * phase.conj();
                    (low, (b.lambda_s * low.norm_sqr() + b.lambda_s - 1.0).max(0.0).sqrt())
                };
                cols.push(b.low);
                targets.push(q00 * phase);
                cols.push(b.high);
                targets.push(phase * q01);
            }
        }
        if cols.is_empty() {
            break;
        }
        let e_a = CMatrix::from_fn(eff.nrows(), cols.len(), |r, c| eff[(r, cols[c])]);
        let q_a = CVector::from_vec(targets);
        let pinv = e_a.adjoint().pseudo_inverse(1e-12).ok()?;
        let next = Precoder { w: pinv * q_a };
        let done = (&next.w - &w.w).norm() <= 1e-13 * (1.0 + w.w.norm());
        w = next;
        if done {
            break;
        }
    }
    let beta = problem.feasibility_scale(eff, &w)?;
    w.w *= Complex64::new(beta, 0.0);
    w.w.iter().all(|z| z.is_finite()).then_some((w, beta))
}

/// Tolerance (SNR units) of the feasibility report attached to results.
pub const FEAS_TOL: f64 = 1e-6;

/// Minimizes transmit power of the ID-SR system.
pub fn solve(ch: &ChannelSet, cfg: &SystemConfig, opts: &SolverOptions) -> Result<SolveResult> {
    solve_with(ch, cfg, opts, SolveInit::default())
}

pub fn solve_with(ch: &ChannelSet, cfg: &SystemConfig, opts: &SolverOptions, init: SolveInit) -> Result<SolveResult> {
    let problem = PenaltyProblem::idsr(ch, cfg)?;
    run_pbcd(&problem, opts, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{cn, random_channels, random_vec};
    use crate::model::{check_feasibility, stack_effective};
    use rand::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn desk_cfg(nt: usize, nr: usize, k: usize) -> SystemConfig {
        SystemConfig::new(nt, nr, k, 50, 1.0, 4.0, 0.0786).unwrap()
    }

    #[test]
    fn rate_projection_cases() {
        assert_eq!(update_q_rate(c(2.0, 0.0), 1.0), c(2.0, 0.0));
        let z = Complex64::from_polar(0.5, std::f64::consts::FRAC_PI_4);
        let q = update_q_rate(z, 1.0);
        assert!((q - Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4)).norm() < 1e-15);
        assert_eq!(update_q_rate(model::zero(), 3.0), c(3.0, 0.0));
    }

    #[test]
    fn ber_projection_inactive() {
        let ws = update_q_ber(model::zero(), 1.0, 2.0, 0.1);
        assert!(!ws.active);
        assert_eq!(ws.q00, model::zero());
        assert_eq!(ws.q01, 1.0);
        assert_eq!(ws.lambda_t, 0.0);
    }

    fn ber_objective(q00: Complex64, q01: f64, t0: Complex64, t1: f64) -> f64 {
        (q01 - t1).powi(2) + (q00 - t0).norm_sqr()
    }

    /// Dense grid over c0 ∈ [0, 1.5]; for each c0 the best c1 is the smallest
    /// feasible value no less than 1. Refined by ternary search (the reduced
    /// function is convex).
    fn grid_oracle(t0: Complex64, t1: f64, lam: f64, noise: f64) -> f64 {
        let a = t0.norm_sqr();
        let b = t1 * t1;
        let reduced = |c0: f64| {
            let need = lam * c0 * c0 * a + (lam - 1.0) * noise;
            let c1 = if b > 0.0 { (need.max(0.0) / b).sqrt().max(1.0) } else { f64::INFINITY };
            (c0 - 1.0).powi(2) * a + (c1 - 1.0).powi(2) * b
        };
        let n = 150_000;
        let step = 1.5 / n as f64;
        let (mut best_i, mut best) = (0, f64::INFINITY);
        for i in 0..=n {
            let v = reduced(i as f64 * step);
            if v < best {
                best = v;
                best_i = i;
            }
        }
        let (mut lo, mut hi) = ((best_i as f64 - 1.0).max(0.0) * step, (best_i as f64 + 1.0) * step);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if reduced(m1) < reduced(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best.min(reduced(0.5 * (lo + hi)))
    }

    #[test]
    fn ber_projection_active_matches_grid() {
        let (t0, t1, lam, noise) = (c(1.0, 0.0), 1.0, 2.0, 1.0);
        let ws = update_q_ber(t0, t1, lam, noise);
        assert!(ws.active && !ws.fallback);
        assert!(ws.lambda_t > 0.0 && ws.lambda_t < 1.0);
        assert!((ws.c0 - 1.0 / (1.0 + ws.lambda_t * lam)).abs() < 1e-12);
        assert!((ws.c1 - 1.0 / (1.0 - ws.lambda_t)).abs() < 1e-8);
        let g = ws.q01 * ws.q01 - lam * ws.q00.norm_sqr() - (lam - 1.0) * noise;
        assert!(g.abs() < 1e-10);
        let got = ber_objective(ws.q00, ws.q01, t0, t1);
        let oracle = grid_oracle(t0, t1, lam, noise);
        assert!(got <= oracle + 1e-6, "{got} vs grid {oracle}");
        assert!(oracle <= got + 1e-6, "{ws:?} got {got} oracle {oracle}");
    }

    #[test]
    fn ber_projection_fallback_beats_grid() {
        let (t0, lam, noise) = (c(1.0, 0.0), 2.0, 0.01);
        let ws = update_q_ber(t0, 0.0, lam, noise);
        assert!(ws.fallback);
        let got = ber_objective(ws.q00, ws.q01, t0, 0.0);
        // Grid over the feasible set {q01 ≥ √(λ|q00|²+(λ−1)δ²)} with real q00
        // (a phase away from t0 only hurts).
        let mut best = f64::INFINITY;
        for i in 0..=20_000 {
            let r = i as f64 * 1e-4;
            for &extra in &[0.0, 1e-3, 1e-2] {
                let q01 = (lam * r * r + (lam - 1.0) * noise).sqrt() + extra;
                best = best.min(ber_objective(c(r, 0.0), q01, t0, 0.0));
            }
        }
        assert!(got <= best + 1e-12, "{got} vs {best}");
        assert!(ws.q01 * ws.q01 >= lam * ws.q00.norm_sqr() + (lam - 1.0) * noise - 1e-12);
    }

    #[test]
    fn ber_projection_random_against_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let t0 = cn(&mut rng, 1.5);
            let t1: f64 = rng.gen_range(0.05..2.0);
            let lam: f64 = rng.gen_range(1.0..4.0);
            let noise: f64 = rng.gen_range(0.01..1.0);
            let ws = update_q_ber(t0, t1, lam, noise);
            assert!(ws.q01 * ws.q01 >= lam * ws.q00.norm_sqr() + (lam - 1.0) * noise - 1e-10);
            let got = ber_objective(ws.q00, ws.q01, t0, t1);
            let oracle = grid_oracle(t0, t1, lam, noise);
            assert!(got <= oracle + 1e-6, "{got} vs {oracle}");
        }
    }

    #[test]
    fn rotation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_vec(&mut rng, 4, 1.0);
        let w = Precoder::new(random_vec(&mut rng, 4, 1.0)).unwrap();
        let r = rotate_w_real(&w, &e);
        let z = e.dotc(&r.w);
        assert!(z.im.abs() < 1e-14 && z.re >= 0.0);
        assert!((r.power() - w.power()).abs() < 1e-14);
        let again = rotate_w_real(&r, &e);
        assert!((again.w - r.w).norm() < 1e-14);
        let zero_e = CVector::zeros(4);
        assert_eq!(rotate_w_real(&w, &zero_e), w);
    }

    #[test]
    fn w_update_cases() {
        let e = CMatrix::zeros(3, 4);
        let q = CVector::from_element(4, c(1.0, 2.0));
        assert_eq!(update_w(&e, &q, 5.0).w, CVector::zeros(3));

        // N_t = 1, two links: w = ρ(ĥ0 q̂0 + ĥ1 q̂1)/(1 + ρ(|ĥ0|² + |ĥ1|²)).
        let (h0, h1, q0, q1, rho) = (c(0.3, -0.7), c(1.1, 0.4), c(0.5, 0.2), c(-0.4, 0.9), 2.5);
        let e = CMatrix::from_row_slice(1, 2, &[h0, h1]);
        let q = CVector::from_vec(vec![q0, q1]);
        let w = update_w(&e, &q, rho).w[0];
        let want = (h0 * q0 + h1 * q1) * rho / (1.0 + rho * (h0.norm_sqr() + h1.norm_sqr()));
        assert!((w - want).norm() < 1e-14);
        // Direct 1-D check: the objective is larger at nearby points.
        let f = |x: Complex64| x.norm_sqr() + rho * ((q0 - h0.conj() * x).norm_sqr() + (q1 - h1.conj() * x).norm_sqr());
        for k in 0..16 {
            let d = Complex64::from_polar(1e-4, k as f64);
            assert!(f(w + d) > f(w));
        }
    }

    #[test]
    fn w_update_is_local_minimum() {
        let ch = random_channels(21, 4, 8, 2);
        let cfg = desk_cfg(4, 8, 2);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = RisPhase::random(8, &mut rng);
        let mut st = PenaltyState::new(&p, Precoder::zeros(4), phi, 3.0);
        st.q = random_vec(&mut rng, p.n_links(), 2.0);
        st.w = update_w(&st.eff, &st.q, st.rho);
        let base = penalty_objective(&st);
        // Normal-equation residual.
        let mut gram = &st.eff * st.eff.adjoint();
        for d in 0..4 {
            gram[(d, d)] += c(1.0 / st.rho, 0.0);
        }
        let resid = &gram * &st.w.w - &st.eff * &st.q;
        assert!(resid.norm() <= 1e-10 * (&st.eff * &st.q).norm());
        for _ in 0..20 {
            let mut probe = st.clone();
            probe.w.w += random_vec(&mut rng, 4, 1e-3);
            assert!(penalty_objective(&probe) > base);
        }
    }

    #[test]
    fn penalty_objective_cases() {
        let ch = random_channels(22, 3, 4, 2);
        let cfg = desk_cfg(3, 4, 2);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Precoder::new(random_vec(&mut rng, 3, 1.0)).unwrap();
        let st = PenaltyState::new(&p, w.clone(), RisPhase::random(4, &mut rng), 7.0);
        assert!((penalty_objective(&st) - w.power()).abs() < 1e-14);

        let mut st0 = PenaltyState::new(&p, Precoder::zeros(3), RisPhase::ones(4), 7.0);
        st0.q = random_vec(&mut rng, p.n_links(), 1.0);
        let want = 7.0 * (st0.q0().norm_squared() + st0.q1().norm_squared());
        assert!((penalty_objective(&st0) - want).abs() < 1e-12);

        // Naive loop over receivers and branches on the original channels.
        let mut st = st0.clone();
        st.w = Precoder::new(random_vec(&mut rng, 3, 1.0)).unwrap();
        st.phi = RisPhase::random(4, &mut rng);
        st.eff = p.link_matrix(&st.phi);
        let eff = stack_effective(p.channels(), &st.phi);
        let mut naive = st.w.power();
        for i in 0..2 {
            for k in 0..3 {
                let q = if i == 0 { st.q0()[k] } else { st.q1()[k] };
                naive += 7.0 * (q - eff.inner(k, i, &st.w)).norm_sqr();
            }
        }
        assert!((penalty_objective(&st) - naive).abs() < 1e-10);
    }

    #[test]
    fn phi_element_single_term() {
        // N_r = 1, K = 1, one link carries all the RIS weight: φ aligns a to b.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = random_channels(23, 2, 1, 1);
        let cfg = desk_cfg(2, 1, 1);
        let links = vec![Link {
            direct: Some(1),
            reflect: Some((1, 1.0)),
            role: LinkRole::Floor(1.0),
            kind: ConstraintKind::StaticRate { k: 1 },
            branch: 0,
        }];
        let p = PenaltyProblem::from_links(SystemKind::Wobrx, &ch, &cfg, links, true).unwrap();
        let mut st = PenaltyState::new(&p, Precoder::new(random_vec(&mut rng, 2, 1.0)).unwrap(), RisPhase::ones(1), 1.0);
        st.q = random_vec(&mut rng, 1, 3.0);
        let mut ws = PhiWorkspace::new(&p, &st);
        let a = ws.a[(0, 0)];
        let b = ws.b[0];
        let mut phi = st.phi.clone();
        let got = ws.update_element(&mut phi, 0);
        let want = (a.conj() * b) / (a.conj() * b).norm();
        assert!((got - want).norm() < 1e-14);
        assert!((got.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn phi_element_beats_phase_grid() {
        let ch = random_channels(24, 3, 6, 2);
        let cfg = desk_cfg(3, 6, 2);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let mut st = PenaltyState::new(
                &p,
                Precoder::new(random_vec(&mut rng, 3, 1.0)).unwrap(),
                RisPhase::random(6, &mut rng),
                2.0,
            );
            st.q = random_vec(&mut rng, p.n_links(), 2.0);
            let n = trial % 6;
            let mut ws = PhiWorkspace::new(&p, &st);
            let mut phi = st.phi.clone();
            ws.update_element(&mut phi, n);
            let best = ws.objective();
            // Evaluate the true penalty at every grid phase for element n.
            let steps = (std::f64::consts::TAU / 1e-3) as usize;
            for s in 0..steps {
                let mut cand = st.clone();
                cand.phi.set(n, Complex64::from_polar(1.0, s as f64 * 1e-3));
                cand.eff = p.link_matrix(&cand.phi);
                let obj = (&cand.q - cand.targets()).norm_squared();
                assert!(best <= obj + 1e-10, "trial {trial}: {best} vs {obj}");
            }
        }
    }

    #[test]
    fn phi_zero_correlation_keeps_previous() {
        let ch = random_channels(25, 2, 3, 1).without_ris();
        let cfg = desk_cfg(2, 3, 1);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = RisPhase::random(3, &mut rng);
        let st = PenaltyState::new(&p, Precoder::new(random_vec(&mut rng, 2, 1.0)).unwrap(), phi.clone(), 1.0);
        let (after, _) = sweep_phi(&p, &st);
        assert_eq!(after, phi);
    }

    #[test]
    fn sweep_monotone_and_incremental_residual_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..10 {
            let ch = random_channels(100 + seed, 3, 16, 2);
            let cfg = desk_cfg(3, 16, 2);
            let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
            let mut st = PenaltyState::new(
                &p,
                Precoder::new(random_vec(&mut rng, 3, 1.0)).unwrap(),
                RisPhase::random(16, &mut rng),
                1.0,
            );
            st.q = random_vec(&mut rng, p.n_links(), 2.0);
            let mut ws = PhiWorkspace::new(&p, &st);
            let mut phi = st.phi.clone();
            let mut prev = ws.objective();
            for n in 0..16 {
                ws.update_element(&mut phi, n);
                let obj = ws.objective();
                assert!(obj <= prev + 1e-12 * (1.0 + prev));
                prev = obj;
            }
            let rebuilt = ws.rebuilt_residual(&phi);
            assert!((rebuilt - ws.residual()).norm() < 1e-10);
            // The workspace objective equals the penalty sum on the new phases.
            let mut check = st.clone();
            check.phi = phi.clone();
            check.eff = p.link_matrix(&phi);
            assert!(((&check.q - check.targets()).norm_squared() - prev).abs() < 1e-9 * (1.0 + prev));
            assert!(phi.max_modulus_deviation() <= 1e-12);
        }
    }

    #[test]
    fn sweep_single_element_equals_element_update() {
        let ch = random_channels(26, 2, 1, 1);
        let cfg = desk_cfg(2, 1, 1);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = PenaltyState::new(&p, Precoder::new(random_vec(&mut rng, 2, 1.0)).unwrap(), RisPhase::ones(1), 1.0);
        st.q = random_vec(&mut rng, p.n_links(), 1.0);
        let (swept, _) = sweep_phi(&p, &st);
        let mut ws = PhiWorkspace::new(&p, &st);
        let mut phi = st.phi.clone();
        ws.update_element(&mut phi, 0);
        assert_eq!(swept, phi);
    }

    fn strong_instance(seed: u64) -> (ChannelSet, SystemConfig) {
        let ch = random_channels(seed, 2, 4, 1).scaled(2.0);
        (ch, SystemConfig::new(2, 4, 1, 50, 1.0, 2.0, 0.0786).unwrap())
    }

    #[test]
    fn small_solve_is_feasible() {
        let (ch, cfg) = strong_instance(31);
        let res = solve(&ch, &cfg, &SolverOptions::default()).unwrap();
        assert!(res.converged(), "{:?} {:?}", res.status, res.diagnostics);
        assert!(res.eq_violation <= 1e-4);
        let rep = check_feasibility(&ch, &res.ris_phase(), &res.precoder(), &cfg, 1e-6);
        assert!(rep.all_pass(), "{rep:?}");
        assert!((res.power - rep.power).abs() < 1e-15);
        assert!(res.feasibility_scale >= 1.0 && res.feasibility_scale < 1.01);
    }

    #[test]
    fn block_updates_monotone_and_aux_constraints_hold() {
        let ch = random_channels(32, 4, 16, 2);
        let cfg = desk_cfg(4, 16, 2);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let opts = SolverOptions {
            record_blocks: true,
            ..SolverOptions::default()
        };
        let res = run_pbcd(&p, &opts, SolveInit::default()).unwrap();
        let mut prev: Option<&BlockRecord> = None;
        for rec in &res.blocks {
            if let Some(pr) = prev {
                if pr.outer == rec.outer {
                    assert!(
                        rec.objective <= pr.objective + 1e-9 * (1.0 + pr.objective.abs()),
                        "{pr:?} -> {rec:?}"
                    );
                }
            }
            prev = Some(rec);
        }
    }

    #[test]
    fn aux_constraints_after_q_step() {
        let ch = random_channels(33, 4, 8, 3);
        let cfg = desk_cfg(4, 8, 3);
        let p = PenaltyProblem::idsr(&ch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = PenaltyState::new(
            &p,
            Precoder::new(random_vec(&mut rng, 4, 0.3)).unwrap(),
            RisPhase::random(8, &mut rng),
            1.0,
        );
        q_step(&p, &mut st);
        let (q0, q1) = (st.q0(), st.q1());
        for k in 1..=3 {
            assert!(q0[k].norm_sqr() >= cfg.gamma_p - 1e-10);
            assert!(q1[k].norm_sqr() >= cfg.gamma_p - 1e-10);
        }
        assert_eq!(q1[0].im, 0.0);
        assert!(q1[0].re >= 0.0);
        assert!(q1[0].re.powi(2) >= cfg.lambda_s * q0[0].norm_sqr() + (cfg.lambda_s - 1.0) - 1e-10);
    }

    #[test]
    fn sign_flipped_start_gives_mirrored_feasible_solution() {
        let (ch, cfg) = strong_instance(34);
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let phi_init = RisPhase::random(4, &mut rng);
        let res = solve_with(
            &ch,
            &cfg,
            &opts,
            SolveInit {
                phi: Some(phi_init.negated()),
                w: None,
            },
        )
        .unwrap();
        assert!(res.converged());
        let mirrored = check_feasibility(&ch, &res.ris_phase().negated(), &res.precoder(), &cfg, 1e-6);
        assert!(mirrored.all_pass(), "{mirrored:?}");
        assert!((mirrored.power - res.power).abs() < 1e-6);
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let (ch, cfg) = strong_instance(35);
        let res = solve(&ch, &cfg, &SolverOptions::default()).unwrap();
        let csv = res.trace_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "outer_iter,inner_iter,rho,penalty_objective,transmit_power,eq_violation_inf"
        );
        assert_eq!(lines.count(), res.trace.len());
        assert!(res.trace.len() <= 30 * 200);
    }

    #[test]
    fn options_validation() {
        let mut o = SolverOptions::default();
        assert!(o.validate().is_ok());
        o.rho_growth = 1.0;
        assert!(o.validate().is_err());
        let o = SolverOptions {
            eps_outer: 0.0,
            ..SolverOptions::default()
        };
        assert!(o.validate().is_err());
    }

    #[test]
    fn solve_is_deterministic() {
        let (ch, cfg) = strong_instance(36);
        let a = solve(&ch, &cfg, &SolverOptions::default()).unwrap();
        let b = solve(&ch, &cfg, &SolverOptions::default()).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.trace, b.trace);
    }
}
