//! Comparison systems, each a link configuration for the PBCD engine.
//!
//! - WORIS: no RIS, no BRx; direct-link SNR floors at the PRs.
//! - WOBRx: static RIS (no backscatter), SNR floors at the PRs.
//! - CSR: conventional symbiotic radio; the BRx decodes the primary signal
//!   too (rate-balanced floors for `k = 0..K`) and the backscatter link must
//!   reach a secondary SNR `Γ_s` with `Λ_s = Q(√(2Γ_s))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{branch_sign, ChannelSet, ConstraintKind, RisPhase, SystemConfig};
use crate::solver::{run_pbcd, Link, LinkRole, PenaltyProblem, SolveInit, SolveResult, SolverOptions, SystemKind};
use crate::specfun::inv_q_function;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: SystemKind,
    /// Secondary SNR target (linear), CSR only.
    pub gamma_s: f64,
    /// CSR: also require the primary floor at the BRx.
    pub include_brx_rate: bool,
}

impl BaselineSpec {
    /// CSR at the BER target of `cfg`: `Γ_s = Q⁻¹(Λ_s)² / 2`.
    pub fn csr(cfg: &SystemConfig) -> Result<Self> {
        Ok(Self {
            kind: SystemKind::Csr,
            gamma_s: csr_gamma_s(cfg.ber_target)?,
            include_brx_rate: true,
        })
    }

    pub fn plain(kind: SystemKind) -> Self {
        Self {
            kind,
            gamma_s: 0.0,
            include_brx_rate: false,
        }
    }
}

/// `Γ_s` with `Q(√(2Γ_s)) = Λ_s`; zero for `Λ_s ≥ 0.5`.
pub fn csr_gamma_s(ber_target: f64) -> Result<f64> {
    if !(ber_target > 0.0) {
        return Err(Error::Config(format!("BER target must be positive, got {ber_target}")));
    }
    if ber_target >= 0.5 {
        return Ok(0.0);
    }
    let x = inv_q_function(ber_target)?;
    Ok(0.5 * x * x)
}

fn static_links(n_pr: usize, with_ris: bool, gamma_p: f64) -> Vec<Link> {
    (1..=n_pr)
        .map(|k| Link {
            direct: Some(k),
            reflect: with_ris.then_some((k, 1.0)),
            role: LinkRole::Floor(gamma_p),
            kind: ConstraintKind::StaticRate { k },
            branch: 0,
        })
        .collect()
}

pub fn woris_problem(ch: &ChannelSet, cfg: &SystemConfig) -> Result<PenaltyProblem> {
    PenaltyProblem::from_links(SystemKind::Woris, ch, cfg, static_links(ch.n_pr(), false, cfg.gamma_p), false)
}

pub fn wobrx_problem(ch: &ChannelSet, cfg: &SystemConfig) -> Result<PenaltyProblem> {
    PenaltyProblem::from_links(SystemKind::Wobrx, ch, cfg, static_links(ch.n_pr(), true, cfg.gamma_p), true)
}

pub fn csr_problem(ch: &ChannelSet, cfg: &SystemConfig, spec: &BaselineSpec) -> Result<PenaltyProblem> {
    if spec.kind != SystemKind::Csr {
        return Err(Error::Config(format!("CSR solver called with a {} spec", spec.kind)));
    }
    if !(spec.gamma_s >= 0.0) || !spec.gamma_s.is_finite() {
        return Err(Error::Config(format!("gamma_s must be nonnegative, got {}", spec.gamma_s)));
    }
    let first = if spec.include_brx_rate { 0 } else { 1 };
    let mut links = Vec::new();
    for i in 0..2 {
        for k in first..=ch.n_pr() {
            links.push(Link {
                direct: Some(k),
                reflect: Some((k, branch_sign(i))),
                role: LinkRole::Floor(cfg.gamma_p),
                kind: ConstraintKind::Rate { k, i },
                branch: i,
            });
        }
    }
    // (T/δ²)|g_0^H Φ^H G^H w|² ≥ Γ_s, in noise-normalized units.
    links.push(Link {
        direct: None,
        reflect: Some((0, 1.0)),
        role: LinkRole::Floor(spec.gamma_s / cfg.t_symbols as f64),
        kind: ConstraintKind::SecondarySnr,
        branch: 0,
    });
    PenaltyProblem::from_links(SystemKind::Csr, ch, cfg, links, true)
}

pub fn solve_woris(ch: &ChannelSet, cfg: &SystemConfig, opts: &SolverOptions) -> Result<SolveResult> {
    run_pbcd(&woris_problem(ch, cfg)?, opts, SolveInit::default())
}

/// WORIS ignores the phase; the argument exists so callers can pass the
/// same inputs as to the RIS systems.
pub fn solve_woris_with_phase(
    ch: &ChannelSet,
    cfg: &SystemConfig,
    phi: &RisPhase,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    run_pbcd(
        &woris_problem(ch, cfg)?,
        opts,
        SolveInit {
            phi: Some(phi.clone()),
            w: None,
        },
    )
}

pub fn solve_wobrx(ch: &ChannelSet, cfg: &SystemConfig, opts: &SolverOptions) -> Result<SolveResult> {
    run_pbcd(&wobrx_problem(ch, cfg)?, opts, SolveInit::default())
}

pub fn solve_csr(ch: &ChannelSet, cfg: &SystemConfig, spec: &BaselineSpec, opts: &SolverOptions) -> Result<SolveResult> {
    run_pbcd(&csr_problem(ch, cfg, spec)?, opts, SolveInit::default())
}
