//! Noise model, SINR and capacity for the four duplexing schemes, plus a
//! symbol-level Monte-Carlo estimator of the precoded power terms.
//!
//! Receiver noise on each antenna follows a dynamic-range floor
//! `P_N,i = max(P_n, K·(P_S,i + P_I,i))`: thermal noise, or a fixed fraction
//! of everything that antenna receives, whichever is larger.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{frobenius_sq, row_power, CMatrix};
use crate::precoder::{
    residual_si_closed_form, residual_si_diagnostic, residual_si_power, svd_decompose,
    PartitionPlan, PrecoderError, ResidualDiagnostic, SvdTriple,
};

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("invalid noise configuration: {0}")]
    Noise(String),
    #[error("invalid transmit power: {0}")]
    Power(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Precoder(#[from] PrecoderError),
}

/// Thermal floor and dynamic-range ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub p_n_w: f64,
    pub k_dyn: f64,
}

impl NoiseConfig {
    pub fn new(p_n_w: f64, k_dyn: f64) -> Result<Self, LinkError> {
        let cfg = Self { p_n_w, k_dyn };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.p_n_w > 0.0 && self.p_n_w.is_finite()) {
            return Err(LinkError::Noise(format!(
                "p_n_w must be > 0, got {}",
                self.p_n_w
            )));
        }
        if !(self.k_dyn >= 0.0 && self.k_dyn.is_finite()) {
            return Err(LinkError::Noise(format!(
                "k_dyn must be >= 0, got {}",
                self.k_dyn
            )));
        }
        Ok(())
    }
}

/// Per-stream transmit powers under identity input covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitPowers {
    pub p_up_w: f64,
    pub p_down_w: f64,
}

impl TransmitPowers {
    pub fn new(p_up_w: f64, p_down_w: f64) -> Result<Self, LinkError> {
        let p = Self { p_up_w, p_down_w };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        for (name, v) in [("p_up_w", self.p_up_w), ("p_down_w", self.p_down_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LinkError::Power(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the per-antenna noise levels enter the aggregate noise term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReading {
    /// Levels are variances: the aggregate is `tr(P_r diag(P_N) P_rᴴ)`,
    /// and `Σ P_N,i` without a projection.
    #[default]
    Covariance,
    /// Levels form a vector that is projected and squared: `‖P_r p‖²`,
    /// and `Σ P_N,i²` without a projection.
    PowerVector,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub noise_reading: NoiseReading,
    /// Literal formulas: uplink channel in the downlink reference numerator,
    /// the ideal uplink figure overwritten by the downlink one, uplink power
    /// in the half-duplex downlink numerator, and the index-sum residual.
    #[serde(default)]
    pub strict_paper: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuplexMode {
    Full,
    Half,
}

/// `max(P_n, K·(P_S,i + P_I,i))`.
pub fn per_antenna_noise(p_s_i: f64, p_i_i: f64, noise: &NoiseConfig) -> f64 {
    noise.p_n_w.max(noise.k_dyn * (p_s_i + p_i_i))
}

/// `log₂(1 + SINR)`, halved for half-duplex time sharing.
pub fn capacity(sinr_linear: f64, mode: DuplexMode) -> f64 {
    let c = (1.0 + sinr_linear).log2();
    match mode {
        DuplexMode::Full => c,
        DuplexMode::Half => 0.5 * c,
    }
}

pub fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Per-antenna received signal, interference and resulting noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaPowers {
    pub p_s_w: Vec<f64>,
    pub p_i_w: Vec<f64>,
    pub p_n_w: Vec<f64>,
}

/// `h_signal` rows are antennas (or users), columns are sources sent with
/// `p_signal`. `h_interf` likewise with `p_interf`; `None` omits the term.
pub fn antenna_powers(
    h_signal: &CMatrix,
    p_signal: f64,
    h_interf: Option<(&CMatrix, f64)>,
    noise: &NoiseConfig,
) -> AntennaPowers {
    let p_s_w: Vec<f64> = row_power(h_signal)
        .into_iter()
        .map(|x| p_signal * x)
        .collect();
    let p_i_w: Vec<f64> = match h_interf {
        Some((h, p)) => row_power(h).into_iter().map(|x| p * x).collect(),
        None => vec![0.0; p_s_w.len()],
    };
    let p_n_w = p_s_w
        .iter()
        .zip(&p_i_w)
        .map(|(&s, &i)| per_antenna_noise(s, i, noise))
        .collect();
    AntennaPowers {
        p_s_w,
        p_i_w,
        p_n_w,
    }
}

/// Aggregate noise seen after `projector` (identity when `None`).
pub fn projected_noise(projector: Option<&CMatrix>, p_n: &[f64], reading: NoiseReading) -> f64 {
    match (projector, reading) {
        (None, NoiseReading::Covariance) => p_n.iter().sum(),
        (None, NoiseReading::PowerVector) => p_n.iter().map(|x| x * x).sum(),
        (Some(p), NoiseReading::Covariance) => (0..p.nrows())
            .map(|r| {
                p.row(r)
                    .iter()
                    .zip(p_n)
                    .map(|(z, &n)| z.norm_sqr() * n)
                    .sum::<f64>()
            })
            .sum(),
        (Some(p), NoiseReading::PowerVector) => (0..p.nrows())
            .map(|r| {
                p.row(r)
                    .iter()
                    .zip(p_n)
                    .map(|(z, &n)| z * n)
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .sum(),
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub(crate) fn check_precoded_dims(
    svd: &SvdTriple,
    h_up: &CMatrix,
    h_down: &CMatrix,
) -> Result<(), LinkError> {
    if h_up.nrows() != svd.m_up() {
        return Err(LinkError::Dimension(format!(
            "uplink channel has {} rows, coupling has {} uplink elements",
            h_up.nrows(),
            svd.m_up()
        )));
    }
    if h_down.ncols() != svd.m_down() {
        return Err(LinkError::Dimension(format!(
            "downlink channel has {} columns, coupling has {} downlink elements",
            h_down.ncols(),
            svd.m_down()
        )));
    }
    Ok(())
}

/// Per-antenna uplink powers with the precoded interference `U Σ S_t`.
pub fn uplink_antenna_powers(
    h_up: &CMatrix,
    svd: &SvdTriple,
    plan: &PartitionPlan,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
) -> AntennaPowers {
    // H_self V S_t = U Σ S_t
    let leak = &svd.u * svd.sigma() * &plan.transmit_selection;
    antenna_powers(h_up, powers.p_up_w, Some((&leak, powers.p_down_w)), noise)
}

/// Per-user downlink powers for the precoded transmitter.
pub fn downlink_user_powers(
    h_down: &CMatrix,
    plan: &PartitionPlan,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
) -> AntennaPowers {
    let effective = h_down * &plan.transmit_precoder;
    antenna_powers(&effective, powers.p_down_w, None, noise)
}

pub fn sinr_uplink_precoded(
    h_up: &CMatrix,
    svd: &SvdTriple,
    plan: &PartitionPlan,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> f64 {
    let signal = powers.p_up_w * frobenius_sq(&(&plan.receive_precoder * h_up));
    let interference = if options.strict_paper {
        residual_si_closed_form(svd, plan, powers.p_down_w)
    } else {
        residual_si_power(svd, plan, powers.p_down_w)
    };
    let levels = uplink_antenna_powers(h_up, svd, plan, powers, noise);
    let n = projected_noise(
        Some(&plan.receive_precoder),
        &levels.p_n_w,
        options.noise_reading,
    );
    ratio(signal, interference + n)
}

pub fn sinr_downlink_precoded(
    h_down: &CMatrix,
    plan: &PartitionPlan,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> f64 {
    let effective = h_down * &plan.transmit_precoder;
    let signal = powers.p_down_w * frobenius_sq(&effective);
    let levels = antenna_powers(&effective, powers.p_down_w, None, noise);
    ratio(
        signal,
        projected_noise(None, &levels.p_n_w, options.noise_reading),
    )
}

/// `(up, down)` precoded SINRs.
pub fn sinr_precoded(
    h_up: &CMatrix,
    h_down: &CMatrix,
    svd: &SvdTriple,
    plan: &PartitionPlan,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> Result<(f64, f64), LinkError> {
    check_precoded_dims(svd, h_up, h_down)?;
    Ok((
        sinr_uplink_precoded(h_up, svd, plan, powers, noise, options),
        sinr_downlink_precoded(h_down, plan, powers, noise, options),
    ))
}

/// `(up, down)` SINRs with the full coupling and no precoding.
pub fn sinr_reference(
    h_up: &CMatrix,
    h_down: &CMatrix,
    h_self: &CMatrix,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> (f64, f64) {
    let up_levels = antenna_powers(h_up, powers.p_up_w, Some((h_self, powers.p_down_w)), noise);
    let up = ratio(
        powers.p_up_w * frobenius_sq(h_up),
        powers.p_down_w * frobenius_sq(h_self)
            + projected_noise(None, &up_levels.p_n_w, options.noise_reading),
    );
    let down_levels = antenna_powers(h_down, powers.p_down_w, None, noise);
    let down_channel = if options.strict_paper { h_up } else { h_down };
    let down = ratio(
        powers.p_down_w * frobenius_sq(down_channel),
        projected_noise(None, &down_levels.p_n_w, options.noise_reading),
    );
    (up, down)
}

fn interference_free(h: &CMatrix, p: f64, noise: &NoiseConfig, reading: NoiseReading) -> f64 {
    let levels = antenna_powers(h, p, None, noise);
    ratio(
        p * frobenius_sq(h),
        projected_noise(None, &levels.p_n_w, reading),
    )
}

/// `(up, down)` SINRs of an ideal full-duplex link without coupling.
pub fn sinr_full_ideal(
    h_up: &CMatrix,
    h_down: &CMatrix,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> (f64, f64) {
    let up = interference_free(h_up, powers.p_up_w, noise, options.noise_reading);
    let down = interference_free(h_down, powers.p_down_w, noise, options.noise_reading);
    if options.strict_paper {
        (down, down)
    } else {
        (up, down)
    }
}

/// `(up, down)` SINRs when every element serves one direction at a time.
/// `h_up_half` is M × K_up, `h_down_half` is K_down × M.
pub fn sinr_half_duplex(
    h_up_half: &CMatrix,
    h_down_half: &CMatrix,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    options: &EvalOptions,
) -> (f64, f64) {
    let up = interference_free(h_up_half, powers.p_up_w, noise, options.noise_reading);
    let down_levels = antenna_powers(h_down_half, powers.p_down_w, None, noise);
    let numerator_power = if options.strict_paper {
        powers.p_up_w
    } else {
        powers.p_down_w
    };
    let down = ratio(
        numerator_power * frobenius_sq(h_down_half),
        projected_noise(None, &down_levels.p_n_w, options.noise_reading),
    );
    (up, down)
}

/// All channel matrices of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkInputs {
    /// M_up × K_up.
    pub h_up: CMatrix,
    /// K_down × M_down.
    pub h_down: CMatrix,
    /// M_up × M_down.
    pub h_self: CMatrix,
    /// M × K_up over every element.
    pub h_up_half: CMatrix,
    /// K_down × M over every element.
    pub h_down_half: CMatrix,
    pub powers: TransmitPowers,
    pub noise: NoiseConfig,
}

impl LinkInputs {
    pub fn validate(&self) -> Result<(), LinkError> {
        self.powers.validate()?;
        self.noise.validate()?;
        let dim = |msg: String| Err(LinkError::Dimension(msg));
        let (m_up, m_down) = self.h_self.shape();
        if self.h_up.nrows() != m_up {
            return dim(format!("h_up rows {} != {m_up}", self.h_up.nrows()));
        }
        if self.h_down.ncols() != m_down {
            return dim(format!(
                "h_down columns {} != {m_down}",
                self.h_down.ncols()
            ));
        }
        if self.h_up_half.ncols() != self.h_up.ncols() {
            return dim("half-duplex uplink user count differs".into());
        }
        if self.h_down_half.nrows() != self.h_down.nrows() {
            return dim("half-duplex downlink user count differs".into());
        }
        if self.h_up_half.nrows() < m_up + m_down || self.h_down_half.ncols() < m_up + m_down {
            return dim("half-duplex channels must span every element".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFigure {
    pub sinr: f64,
    pub sinr_db: f64,
    pub capacity_bps_hz: f64,
}

impl LinkFigure {
    pub fn new(sinr: f64, mode: DuplexMode) -> Self {
        Self {
            sinr,
            sinr_db: to_db(sinr),
            capacity_bps_hz: capacity(sinr, mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFigures {
    pub up: LinkFigure,
    pub down: LinkFigure,
}

impl ModeFigures {
    fn new((up, down): (f64, f64), mode: DuplexMode) -> Self {
        Self {
            up: LinkFigure::new(up, mode),
            down: LinkFigure::new(down, mode),
        }
    }

    pub fn sum_capacity(&self) -> f64 {
        self.up.capacity_bps_hz + self.down.capacity_bps_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub m_up: usize,
    pub m_down: usize,
    pub n_up: usize,
    pub n_down: usize,
    pub singular_values: Vec<f64>,
    pub residual_si: ResidualDiagnostic,
    pub uplink_antennas: AntennaPowers,
    pub downlink_users: AntennaPowers,
    pub precoded: ModeFigures,
    pub reference: ModeFigures,
    pub full_ideal: ModeFigures,
    pub half_duplex: ModeFigures,
    pub options: EvalOptions,
}

/// Evaluates every mode for one partition.
pub fn evaluate(
    inputs: &LinkInputs,
    n_up: usize,
    n_down: usize,
    options: &EvalOptions,
) -> Result<LinkReport, LinkError> {
    inputs.validate()?;
    let svd = svd_decompose(&inputs.h_self)?;
    evaluate_with_svd(inputs, &svd, n_up, n_down, options)
}

pub fn evaluate_with_svd(
    inputs: &LinkInputs,
    svd: &SvdTriple,
    n_up: usize,
    n_down: usize,
    options: &EvalOptions,
) -> Result<LinkReport, LinkError> {
    let plan = PartitionPlan::new(svd, n_up, n_down)?;
    let (powers, noise) = (&inputs.powers, &inputs.noise);
    let precoded = sinr_precoded(
        &inputs.h_up,
        &inputs.h_down,
        svd,
        &plan,
        powers,
        noise,
        options,
    )?;
    let reference = sinr_reference(
        &inputs.h_up,
        &inputs.h_down,
        &inputs.h_self,
        powers,
        noise,
        options,
    );
    let full_ideal = sinr_full_ideal(&inputs.h_up, &inputs.h_down, powers, noise, options);
    let half = sinr_half_duplex(
        &inputs.h_up_half,
        &inputs.h_down_half,
        powers,
        noise,
        options,
    );
    Ok(LinkReport {
        m_up: svd.m_up(),
        m_down: svd.m_down(),
        n_up,
        n_down,
        singular_values: svd.singular_values.clone(),
        residual_si: residual_si_diagnostic(svd, &plan, powers.p_down_w),
        uplink_antennas: uplink_antenna_powers(&inputs.h_up, svd, &plan, powers, noise),
        downlink_users: downlink_user_powers(&inputs.h_down, &plan, powers, noise),
        precoded: ModeFigures::new(precoded, DuplexMode::Full),
        reference: ModeFigures::new(reference, DuplexMode::Full),
        full_ideal: ModeFigures::new(full_ideal, DuplexMode::Full),
        half_duplex: ModeFigures::new(half, DuplexMode::Half),
        options: *options,
    })
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymbolEstimates {
    pub n_symbols: usize,
    /// `E‖P_r H_up x_up‖²`.
    pub signal: Estimate,
    /// `E‖P_r H_self P_t x_down‖²`.
    pub interference: Estimate,
    /// `E‖P_r n‖²`.
    pub noise: Estimate,
}

impl SymbolEstimates {
    pub fn sinr(&self) -> f64 {
        ratio(self.signal.mean, self.interference.mean + self.noise.mean)
    }
}

const SYMBOL_BLOCK: usize = 4096;

fn complex_gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * sigma, im * sigma)
}

fn row_major(m: &CMatrix) -> Vec<Complex64> {
    (0..m.nrows())
        .flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>())
        .collect()
}

/// `‖A x‖²` for row-major `a` with `rows` rows.
fn apply_norm_sqr(a: &[Complex64], rows: usize, x: &[Complex64]) -> f64 {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            a[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(p, q)| p * q)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum()
}

/// Draws `n_symbols` independent uplink receptions
/// `P_r (H_up x_up + H_self P_t x_down + n)` and returns the empirical mean
/// power of each term after the receive precoder.
///
/// Without a plan both precoders are identities. Noise on antenna i is
/// circular Gaussian at the level [`per_antenna_noise`] assigns it.
/// Blocks of symbols run in parallel on independent streams of `seed` and
/// are combined in block order, so results do not depend on thread count.
///
/// A downlink can be simulated by passing its effective channel
/// `H_down P_t` as `h_up`, a zero coupling matrix, no plan, and the
/// downlink power as `p_up_w`.
pub fn simulate_symbols(
    h_up: &CMatrix,
    h_self: &CMatrix,
    plan: Option<&PartitionPlan>,
    powers: &TransmitPowers,
    noise: &NoiseConfig,
    n_symbols: usize,
    seed: u64,
) -> Result<SymbolEstimates, LinkError> {
    if n_symbols == 0 {
        return Err(LinkError::Dimension("n_symbols must be >= 1".into()));
    }
    let m_up = h_up.nrows();
    if h_self.nrows() != m_up {
        return Err(LinkError::Dimension(format!(
            "coupling has {} rows, uplink channel {m_up}",
            h_self.nrows()
        )));
    }
    let identity_rx = CMatrix::identity(m_up, m_up);
    let identity_tx = CMatrix::identity(h_self.ncols(), h_self.ncols());
    let (p_r, p_t) = match plan {
        Some(p) => {
            if p.receive_precoder.ncols() != m_up || p.transmit_precoder.nrows() != h_self.ncols() {
                return Err(LinkError::Dimension("plan does not match matrices".into()));
            }
            (&p.receive_precoder, &p.transmit_precoder)
        }
        None => (&identity_rx, &identity_tx),
    };
    let leak = h_self * p_t;
    let levels = antenna_powers(h_up, powers.p_up_w, Some((&leak, powers.p_down_w)), noise);

    let rows = p_r.nrows();
    let a = row_major(&(p_r * h_up));
    let b = row_major(&(p_r * &leak));
    let c = row_major(p_r);
    let (k_up, n_down) = (h_up.ncols(), leak.ncols());
    let sig_up = (powers.p_up_w / 2.0).sqrt();
    let sig_down = (powers.p_down_w / 2.0).sqrt();
    let sig_noise: Vec<f64> = levels.p_n_w.iter().map(|p| (p / 2.0).sqrt()).collect();

    let n_blocks = n_symbols.div_ceil(SYMBOL_BLOCK);
    let partials: Vec<[f64; 6]> = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(block as u64);
            let count = SYMBOL_BLOCK.min(n_symbols - block * SYMBOL_BLOCK);
            let mut acc = [0.0; 6];
            let mut x_up = vec![Complex64::default(); k_up];
            let mut x_down = vec![Complex64::default(); n_down];
            let mut n = vec![Complex64::default(); m_up];
            for _ in 0..count {
                x_up.iter_mut()
                    .for_each(|z| *z = complex_gaussian(&mut rng, sig_up));
                x_down
                    .iter_mut()
                    .for_each(|z| *z = complex_gaussian(&mut rng, sig_down));
                for (z, &s) in n.iter_mut().zip(&sig_noise) {
                    *z = complex_gaussian(&mut rng, s);
                }
                let terms = [
                    apply_norm_sqr(&a, rows, &x_up),
                    apply_norm_sqr(&b, rows, &x_down),
                    apply_norm_sqr(&c, rows, &n),
                ];
                for (k, t) in terms.iter().enumerate() {
                    acc[2 * k] += t;
                    acc[2 * k + 1] += t * t;
                }
            }
            acc
        })
        .collect();

    let mut total = [0.0; 6];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let n = n_symbols as f64;
    let estimate = |sum: f64, sum_sq: f64| {
        let mean = sum / n;
        let var = if n_symbols > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    };
    Ok(SymbolEstimates {
        n_symbols,
        signal: estimate(total[0], total[1]),
        interference: estimate(total[2], total[3]),
        noise: estimate(total[4], total[5]),
    })
}
