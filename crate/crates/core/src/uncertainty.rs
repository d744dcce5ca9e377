//! Two layers of transfer uncertainty.
//!
//! Layer one is additive noise on every realized transfer. Layer two
//! modulates channel efficiency through weather- and demand-driven loss
//! terms, clamped into `[epsilon_floor, 1]`. The cascade variance of a
//! linear chain has a closed form, checked here against a Monte-Carlo run.
//!
//! Units: the closed form and its Monte-Carlo oracle are dimensionless, in
//! units of the per-hop allocation noise. They do not convert flow noise into
//! level noise through reservoir area or the time step.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkTopology, WeatherVector};

/// Linear heat and precipitation loss:
/// γ_env = clamp(c_T · max(0, T̄ − T_ref) + c_P · P̄, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvLossCoeffs {
    /// per °C above `t_ref_c`
    pub c_temp: f64,
    pub t_ref_c: f64,
    /// per mm/h
    pub c_precip: f64,
}

impl Default for EnvLossCoeffs {
    /// 45 °C against a 30 °C reference gives 0.3.
    fn default() -> Self {
        Self {
            c_temp: 0.02,
            t_ref_c: 30.0,
            c_precip: 0.01,
        }
    }
}

/// γ_human = clamp(c_H · (d_i + d_j) / (2 d_ref), 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanLossCoeffs {
    pub c_h: f64,
    /// m³/s
    pub d_ref: f64,
}

impl Default for HumanLossCoeffs {
    fn default() -> Self {
        Self { c_h: 0.1, d_ref: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyParams {
    pub sigma_base: f64,
    pub sigma_eta: f64,
    pub epsilon_floor: f64,
    pub env_loss: EnvLossCoeffs,
    pub human_loss: HumanLossCoeffs,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self {
            sigma_base: 0.05,
            sigma_eta: 0.0,
            epsilon_floor: 0.1,
            env_loss: EnvLossCoeffs::default(),
            human_loss: HumanLossCoeffs::default(),
        }
    }
}

impl UncertaintyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_base >= 0.0 && self.sigma_eta >= 0.0) {
            return Err(Error::InvalidParameter("noise scales must be nonnegative".into()));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1.0) {
            return Err(Error::InvalidParameter("epsilon_floor must lie in (0, 1)".into()));
        }
        if !(self.human_loss.d_ref > 0.0) {
            return Err(Error::InvalidParameter("d_ref must be positive".into()));
        }
        Ok(())
    }
}

pub fn env_loss(w_i: &WeatherVector, w_j: &WeatherVector, coeffs: &EnvLossCoeffs) -> f64 {
    let t_mean = 0.5 * (w_i.temp_c + w_j.temp_c);
    let p_mean = 0.5 * (w_i.precip_mm + w_j.precip_mm);
    let raw = coeffs.c_temp * (t_mean - coeffs.t_ref_c).max(0.0) + coeffs.c_precip * p_mean;
    raw.clamp(0.0, 1.0)
}

/// Demand-driven loss. An active guidance estimate replaces the demand map.
pub fn human_loss(d_i: f64, d_j: f64, coeffs: &HumanLossCoeffs, guidance_override: Option<f64>) -> f64 {
    if let Some(g) = guidance_override {
        return g.clamp(0.0, 1.0);
    }
    (coeffs.c_h * (d_i + d_j) / (2.0 * coeffs.d_ref)).clamp(0.0, 1.0)
}

/// α = min(1, max(ε, α_nominal · (1 − γ_env − γ_human)))
pub fn channel_efficiency(alpha_nominal: f64, gamma_env: f64, gamma_human: f64, epsilon_floor: f64) -> f64 {
    (alpha_nominal * (1.0 - gamma_env - gamma_human)).max(epsilon_floor).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferDraw {
    /// m³/s, never negative
    pub flow: f64,
    pub clamped: bool,
}

/// f = α·a + ε with ε ~ N(0, (σ_base · scale)²); `scale` defaults to the
/// release itself. Negative draws are clamped to zero and flagged.
pub fn sample_transfer<R: Rng + ?Sized>(
    release: f64,
    alpha: f64,
    sigma_base: f64,
    release_scale: Option<f64>,
    rng: &mut R,
) -> TransferDraw {
    let mean = alpha * release;
    let sd = sigma_base * release_scale.unwrap_or(release);
    if sd <= 0.0 {
        return TransferDraw {
            flow: mean.max(0.0),
            clamped: false,
        };
    }
    let z: f64 = StandardNormal.sample(rng);
    let f = mean + sd * z;
    if f < 0.0 {
        TransferDraw { flow: 0.0, clamped: true }
    } else {
        TransferDraw { flow: f, clamped: false }
    }
}

/// Var[h_n] = Σ_{i=1}^{n−1} (Π_{j=i+1}^{n} α²_{j,j−1}) σ_base² + σ_η²
///
/// `alphas[k]` is the efficiency of hop `k → k+1`, so a chain of `n` nodes
/// passes `n − 1` values.
pub fn predicted_cascade_variance(alphas: &[f64], sigma_base: f64, sigma_eta: f64) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Empty("efficiency chain".into()));
    }
    let s2 = sigma_base * sigma_base;
    let mut suffix = 1.0;
    let mut total = 0.0;
    for &a in alphas.iter().rev() {
        suffix *= a * a;
        total += suffix * s2;
    }
    Ok(total + sigma_eta * sigma_eta)
}

/// End-to-end efficiency Π α along a chain.
pub fn compound_efficiency(alphas: &[f64]) -> f64 {
    alphas.iter().product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub variance: f64,
    pub std: f64,
    pub n_samples: usize,
}

/// Empirical variance of the terminal perturbation of a linear chain.
///
/// Each releasing node adds an independent N(0, σ_base²) allocation error to
/// whatever perturbation it received; the sum is carried through the next
/// channel at that channel's nominal efficiency (floored at ε). The terminal
/// node adds N(0, σ_η²).
pub fn monte_carlo_cascade_variance<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    params: &UncertaintyParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    let order = topology.chain_order()?;
    if order.len() < 2 {
        return Err(Error::NotAChain("need at least two nodes".into()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let alphas: Vec<f64> = order
        .windows(2)
        .map(|w| {
            let e = topology.downstream_edges(w[0])[0];
            debug_assert_eq!(topology.edge_endpoints(e).1, w[1]);
            topology.edges()[e].alpha_nominal.clamp(params.epsilon_floor, 1.0)
        })
        .collect();

    // Welford accumulation of the terminal perturbation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_samples {
        let mut x = 0.0;
        for &a in &alphas {
            let z: f64 = StandardNormal.sample(rng);
            x = a * (x + params.sigma_base * z);
        }
        if params.sigma_eta > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            x += params.sigma_eta * z;
        }
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let variance = m2 / (n_samples - 1) as f64;
    Ok(MonteCarloEstimate {
        variance,
        std: variance.sqrt(),
        n_samples,
    })
}
