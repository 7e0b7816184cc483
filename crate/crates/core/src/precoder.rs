//! Eigen-beamforming precoders for self-interference suppression.
//!
//! The coupling matrix is decomposed as `H_self = U Σ Vᴴ` with singular
//! values in descending order. The receive precoder keeps the last `n_up`
//! rows of `Uᴴ` and the transmit precoder the last `n_down` columns of `V`,
//! so the retained directions are the weakest couplings.

use faer::{c64, Mat, MatRef};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, frobenius_sq, CMatrix};
use crate::linkbudget::{self, EvalOptions, LinkError, NoiseConfig, TransmitPowers};

#[derive(Debug, Error, PartialEq)]
pub enum PrecoderError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is empty ({0}x{1})")]
    Empty(usize, usize),
    #[error("singular value decomposition did not converge")]
    NonConvergence,
    #[error("selection ({n_up}, {n_down}) outside 1..={m_up} x 1..={m_down}")]
    Selection {
        m_up: usize,
        m_down: usize,
        n_up: usize,
        n_down: usize,
    },
}

/// Full singular value decomposition with unitary factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    /// M_up × M_up.
    pub u: CMatrix,
    /// Length min(M_up, M_down), descending.
    pub singular_values: Vec<f64>,
    /// M_down × M_down.
    pub v: CMatrix,
}

impl SvdTriple {
    pub fn m_up(&self) -> usize {
        self.u.nrows()
    }

    pub fn m_down(&self) -> usize {
        self.v.nrows()
    }

    /// M_up × M_down rectangular diagonal Σ.
    pub fn sigma(&self) -> CMatrix {
        let mut s = CMatrix::zeros(self.m_up(), self.m_down());
        for (i, &sv) in self.singular_values.iter().enumerate() {
            s[(i, i)] = Complex64::new(sv, 0.0);
        }
        s
    }

    pub fn reconstruct(&self) -> CMatrix {
        &self.u * self.sigma() * self.v.adjoint()
    }
}

/// Multiplies column `col` by the phase that makes its largest-magnitude
/// entry real and positive. Returns the applied unit phasor.
fn normalize_column_phase(m: &mut CMatrix, col: usize) -> Complex64 {
    let mut best = 0usize;
    let mut best_mag = -1.0;
    for r in 0..m.nrows() {
        let mag = m[(r, col)].norm();
        if mag > best_mag {
            best_mag = mag;
            best = r;
        }
    }
    if best_mag <= 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let pivot = m[(best, col)];
    let rot = pivot.conj() / best_mag;
    for r in 0..m.nrows() {
        m[(r, col)] *= rot;
    }
    // exact zero imaginary part on the pivot
    m[(best, col)] = Complex64::new(m[(best, col)].norm(), 0.0);
    rot
}

fn to_faer(m: &CMatrix) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |r, c| {
        let z = m[(r, c)];
        c64::new(z.re, z.im)
    })
}

fn from_faer(m: MatRef<'_, c64>, order: &[usize]) -> CMatrix {
    CMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        let z = m[(r, order.get(c).copied().unwrap_or(c))];
        Complex64::new(z.re, z.im)
    })
}

/// Decomposes `h = U Σ Vᴴ` with full unitary factors, descending singular
/// values, and each (U, V) column pair rotated so the largest entry of the
/// U column is real-positive. Columns beyond the rank-carrying ones are
/// normalized independently.
pub fn svd_decompose(h: &CMatrix) -> Result<SvdTriple, PrecoderError> {
    let (m_up, m_down) = h.shape();
    if m_up == 0 || m_down == 0 {
        return Err(PrecoderError::Empty(m_up, m_down));
    }
    if !all_finite(h) {
        return Err(PrecoderError::NonFinite);
    }
    let svd = to_faer(h)
        .svd()
        .map_err(|_| PrecoderError::NonConvergence)?;
    let diag = svd.S();
    let raw: Vec<f64> = (0..diag.dim()).map(|i| diag[i].re).collect();

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| raw[i].max(0.0)).collect();
    let mut u = from_faer(svd.U(), &order);
    let mut v = from_faer(svd.V(), &order);
    if !all_finite(&u) || !all_finite(&v) || singular_values.iter().any(|s| !s.is_finite()) {
        return Err(PrecoderError::NonConvergence);
    }

    for c in 0..order.len() {
        let rot = normalize_column_phase(&mut u, c);
        for r in 0..m_down {
            v[(r, c)] *= rot;
        }
    }
    for c in order.len()..m_up {
        normalize_column_phase(&mut u, c);
    }
    for c in order.len()..m_down {
        normalize_column_phase(&mut v, c);
    }
    Ok(SvdTriple {
        u,
        singular_values,
        v,
    })
}

/// Selection matrices `(S_rᵀ, S_t)`: `S_rᵀ = [0 I]` is n_up × m_up and
/// `S_t = [0; I]` is m_down × n_down.
pub fn selection_matrices(
    m_up: usize,
    m_down: usize,
    n_up: usize,
    n_down: usize,
) -> Result<(CMatrix, CMatrix), PrecoderError> {
    check_selection(m_up, m_down, n_up, n_down)?;
    let one = Complex64::new(1.0, 0.0);
    let mut receive = CMatrix::zeros(n_up, m_up);
    for r in 0..n_up {
        receive[(r, m_up - n_up + r)] = one;
    }
    let mut transmit = CMatrix::zeros(m_down, n_down);
    for c in 0..n_down {
        transmit[(m_down - n_down + c, c)] = one;
    }
    Ok((receive, transmit))
}

fn check_selection(
    m_up: usize,
    m_down: usize,
    n_up: usize,
    n_down: usize,
) -> Result<(), PrecoderError> {
    if n_up == 0 || n_up > m_up || n_down == 0 || n_down > m_down {
        return Err(PrecoderError::Selection {
            m_up,
            m_down,
            n_up,
            n_down,
        });
    }
    Ok(())
}

/// A chosen number of effective uplink and downlink antennas together with
/// the resulting precoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub n_up: usize,
    pub n_down: usize,
    /// `S_rᵀ`, n_up × m_up.
    pub receive_selection: CMatrix,
    /// `S_t`, m_down × n_down.
    pub transmit_selection: CMatrix,
    /// `S_rᵀ Uᴴ`, n_up × m_up.
    pub receive_precoder: CMatrix,
    /// `V S_t`, m_down × n_down.
    pub transmit_precoder: CMatrix,
}

impl PartitionPlan {
    pub fn new(svd: &SvdTriple, n_up: usize, n_down: usize) -> Result<Self, PrecoderError> {
        let (m_up, m_down) = (svd.m_up(), svd.m_down());
        let (receive_selection, transmit_selection) =
            selection_matrices(m_up, m_down, n_up, n_down)?;
        let u_h = svd.u.adjoint();
        let receive_precoder = u_h.rows(m_up - n_up, n_up).into_owned();
        let transmit_precoder = svd.v.columns(m_down - n_down, n_down).into_owned();
        Ok(Self {
            n_up,
            n_down,
            receive_selection,
            transmit_selection,
            receive_precoder,
            transmit_precoder,
        })
    }

    /// All antennas on both sides.
    pub fn full(svd: &SvdTriple) -> Self {
        Self::new(svd, svd.m_up(), svd.m_down()).expect("full selection is always valid")
    }
}

/// `S_rᵀ Σ S_t`, extracted as the bottom-right n_up × n_down block of Σ.
pub fn selected_sigma_block(svd: &SvdTriple, plan: &PartitionPlan) -> CMatrix {
    let (m_up, m_down) = (svd.m_up(), svd.m_down());
    let row0 = m_up - plan.n_up;
    let col0 = m_down - plan.n_down;
    CMatrix::from_fn(plan.n_up, plan.n_down, |r, c| {
        let (i, j) = (row0 + r, col0 + c);
        if i == j {
            Complex64::new(svd.singular_values[i], 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Residual self-interference power after precoding,
/// `P_down · ‖S_rᵀ Σ S_t‖_F²`.
pub fn residual_si_power(svd: &SvdTriple, plan: &PartitionPlan, p_down_w: f64) -> f64 {
    p_down_w * frobenius_sq(&selected_sigma_block(svd, plan))
}

/// Index-sum shortcut `P_down · Σ σ²[i]` for 1-based
/// `i = m_up + m_down − (n_up + n_down) + 1 ..= min(m_up, m_down)`.
/// Equals [`residual_si_power`] only when one side is fully selected.
pub fn residual_si_closed_form(svd: &SvdTriple, plan: &PartitionPlan, p_down_w: f64) -> f64 {
    let lo = svd.m_up() + svd.m_down() + 1;
    let lo = lo.saturating_sub(plan.n_up + plan.n_down);
    let hi = svd.m_up().min(svd.m_down());
    let sum = (lo.max(1)..=hi).fold(0.0, |acc, i| acc + svd.singular_values[i - 1].powi(2));
    p_down_w * sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostic {
    pub n_up: usize,
    pub n_down: usize,
    pub direct_w: f64,
    pub closed_form_w: f64,
}

impl ResidualDiagnostic {
    pub fn discrepancy_w(&self) -> f64 {
        self.direct_w - self.closed_form_w
    }

    pub fn agrees(&self, rel_tol: f64) -> bool {
        let scale = self.direct_w.abs().max(self.closed_form_w.abs());
        self.discrepancy_w().abs() <= rel_tol * scale
    }
}

/// Both residual forms side by side; logs when they disagree.
pub fn residual_si_diagnostic(
    svd: &SvdTriple,
    plan: &PartitionPlan,
    p_down_w: f64,
) -> ResidualDiagnostic {
    let d = ResidualDiagnostic {
        n_up: plan.n_up,
        n_down: plan.n_down,
        direct_w: residual_si_power(svd, plan, p_down_w),
        closed_form_w: residual_si_closed_form(svd, plan, p_down_w),
    };
    if !d.agrees(1e-12) {
        log::info!(
            "residual SI forms differ at (n_up={}, n_down={}): direct {:e} W, index sum {:e} W",
            d.n_up,
            d.n_down,
            d.direct_w,
            d.closed_form_w
        );
    }
    d
}

/// `P_up · ‖S_rᵀ Uᴴ H_up‖_F²`.
pub fn desired_signal_power(plan: &PartitionPlan, h_up: &CMatrix, p_up_w: f64) -> f64 {
    p_up_w * frobenius_sq(&(&plan.receive_precoder * h_up))
}

/// Caps on the partitions considered by [`search_partition`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConstraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_up: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_down: Option<usize>,
}

impl PartitionConstraint {
    pub fn allows(&self, n_up: usize, n_down: usize) -> bool {
        self.max_total.is_none_or(|t| n_up + n_down <= t)
            && self.max_up.is_none_or(|m| n_up <= m)
            && self.max_down.is_none_or(|m| n_down <= m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub n_up: usize,
    pub n_down: usize,
    pub sinr_up: f64,
    pub sinr_down: f64,
    pub capacity_up: f64,
    pub capacity_down: f64,
    pub sum_capacity: f64,
}

/// Sorts by descending sum capacity, then ascending n_up, then n_down.
pub fn rank_scores(scores: &mut [PartitionScore]) {
    scores.sort_by(|a, b| {
        b.sum_capacity
            .total_cmp(&a.sum_capacity)
            .then(a.n_up.cmp(&b.n_up))
            .then(a.n_down.cmp(&b.n_down))
    });
}

/// Evaluates every allowed `(n_up, n_down)` and returns them ranked.
#[allow(clippy::too_many_arguments)]
pub fn search_partition(
    h_self: &CMatrix,
    h_up: &CMatrix,
    h_down: &CMatrix,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    constraint: &PartitionConstraint,
    options: &EvalOptions,
) -> Result<Vec<PartitionScore>, LinkError> {
    let svd = svd_decompose(h_self)?;
    search_with_svd(&svd, h_up, h_down, powers, noise, constraint, options)
}

/// [`search_partition`] with a precomputed decomposition.
pub fn search_with_svd(
    svd: &SvdTriple,
    h_up: &CMatrix,
    h_down: &CMatrix,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    constraint: &PartitionConstraint,
    options: &EvalOptions,
) -> Result<Vec<PartitionScore>, LinkError> {
    linkbudget::check_precoded_dims(svd, h_up, h_down)?;
    let pairs: Vec<(usize, usize)> = (1..=svd.m_up())
        .flat_map(|u| (1..=svd.m_down()).map(move |d| (u, d)))
        .filter(|&(u, d)| constraint.allows(u, d))
        .collect();
    let mut scores: Vec<PartitionScore> = pairs
        .par_iter()
        .map(|&(n_up, n_down)| {
            let plan = PartitionPlan::new(svd, n_up, n_down)?;
            let (sinr_up, sinr_down) =
                linkbudget::sinr_precoded(h_up, h_down, svd, &plan, powers, noise, options)?;
            let capacity_up = linkbudget::capacity(sinr_up, linkbudget::DuplexMode::Full);
            let capacity_down = linkbudget::capacity(sinr_down, linkbudget::DuplexMode::Full);
            Ok(PartitionScore {
                n_up,
                n_down,
                sinr_up,
                sinr_down,
                capacity_up,
                capacity_down,
                sum_capacity: capacity_up + capacity_down,
            })
        })
        .collect::<Result<_, LinkError>>()?;
    rank_scores(&mut scores);
    Ok(scores)
}
