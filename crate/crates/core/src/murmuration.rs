//! Flocking-style coordination losses over release decisions.
//!
//! Every agent compares its own total release S_i = Σ_k a_{i→k} with what its
//! neighbors released one communication delay ago:
//!
//! * alignment pulls S_i toward the pairwise midpoints ½(S_i + S_j),
//! * separation penalises near-identical totals with a Gaussian kernel whose
//!   radius widens with the spread of neighbor levels,
//! * cohesion drives the regional outflow toward the ecological target.
//!
//! Neighbor quantities are constants; every gradient is with respect to the
//! agent's own releases only. Releases are expected in normalized units (for
//! example divided by `a_max`), matching the scale of `rho_base`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::WeatherVector;

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Which ecological target the regional outflow sum is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohesionTarget {
    /// F_eco / |P_i|, as the cohesion rule is written.
    #[default]
    PerMemberShare,
    /// F_eco itself.
    Collective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinationParams {
    pub beta_d: f64,
    pub beta_e: f64,
    pub rho_base: f64,
    pub lambda_eco: f64,
    /// CV used when the mean neighbor level is too close to zero to divide by.
    pub cv_cap: f64,
    pub cohesion_target: CohesionTarget,
}

impl Default for CoordinationParams {
    fn default() -> Self {
        Self {
            beta_d: 0.1,
            beta_e: 0.5,
            rho_base: 0.3,
            lambda_eco: 1.0,
            cv_cap: 3.0,
            cohesion_target: CohesionTarget::PerMemberShare,
        }
    }
}

impl CoordinationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_d >= 0.0 && self.beta_e >= 0.0) {
            return Err(Error::InvalidParameter("beta_d and beta_e must be nonnegative".into()));
        }
        if !(self.rho_base > 0.0) {
            return Err(Error::InvalidParameter("rho_base must be positive".into()));
        }
        if !(self.lambda_eco >= 0.0) {
            return Err(Error::InvalidParameter("lambda_eco must be nonnegative".into()));
        }
        Ok(())
    }
}

/// (κ_align, κ_sep, κ_coh) on the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct CoordinationWeights {
    align: f64,
    sep: f64,
    coh: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    align: f64,
    sep: f64,
    coh: f64,
}

impl TryFrom<RawWeights> for CoordinationWeights {
    type Error = Error;
    fn try_from(r: RawWeights) -> Result<Self> {
        CoordinationWeights::new(r.align, r.sep, r.coh)
    }
}

impl From<CoordinationWeights> for RawWeights {
    fn from(w: CoordinationWeights) -> Self {
        RawWeights {
            align: w.align,
            sep: w.sep,
            coh: w.coh,
        }
    }
}

impl Default for CoordinationWeights {
    fn default() -> Self {
        Self {
            align: 0.6,
            sep: 0.1,
            coh: 0.3,
        }
    }
}

impl CoordinationWeights {
    pub fn new(align: f64, sep: f64, coh: f64) -> Result<Self> {
        let sum = align + sep + coh;
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(align) && in_unit(sep) && in_unit(coh)) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::OffSimplex { align, sep, coh, sum });
        }
        Ok(Self { align, sep, coh })
    }

    /// Divide by the sum when it lies within `tolerance` of one. Triples
    /// already on the simplex are kept bit for bit.
    pub fn renormalized(align: f64, sep: f64, coh: f64, tolerance: f64) -> Result<Self> {
        let sum = align + sep + coh;
        let nonneg = align >= 0.0 && sep >= 0.0 && coh >= 0.0;
        if !nonneg || !((sum - 1.0).abs() <= tolerance) {
            return Err(Error::OffSimplex { align, sep, coh, sum });
        }
        if let Ok(w) = Self::new(align, sep, coh) {
            return Ok(w);
        }
        Self::new(align / sum, sep / sum, coh / sum)
    }

    pub fn align(&self) -> f64 {
        self.align
    }

    pub fn sep(&self) -> f64 {
        self.sep
    }

    pub fn coh(&self) -> f64 {
        self.coh
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.align, self.sep, self.coh]
    }
}

/// A loss value and its gradient with respect to each own release.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn uniform(value: f64, d_total: f64, n_actions: usize) -> Self {
        Self {
            value,
            grad: vec![d_total; n_actions],
        }
    }
}

/// Softmax over −β_d δ_ij − β_e ‖ω_i − ω_j‖₂.
pub fn coordination_weights(
    own_weather: &WeatherVector,
    neighbors: &[(f64, WeatherVector)],
    params: &CoordinationParams,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let energies: Vec<f64> = neighbors
        .iter()
        .map(|(dist, w)| -params.beta_d * dist - params.beta_e * own_weather.distance(w))
        .collect();
    Ok(softmax(&energies))
}

pub(crate) fn softmax(energies: &[f64]) -> Vec<f64> {
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Σ_j w_ij (S_i − ā_ij)² with ā_ij = ½(S_i + S_j(t−τ)).
pub fn alignment_loss(own_releases: &[f64], neighbor_totals: &[f64], weights: &[f64]) -> LossGrad {
    let s: f64 = own_releases.iter().sum();
    let mut value = 0.0;
    let mut d = 0.0;
    for (&sj, &w) in neighbor_totals.iter().zip(weights) {
        let resid = s - 0.5 * (s + sj);
        value += w * resid * resid;
        // own release appears in both S_i and ā_ij
        d += w * 2.0 * resid * 0.5;
    }
    LossGrad::uniform(value, d, own_releases.len())
}

/// ρ_i = ρ_base · (1 + CV) with CV the population coefficient of variation of
/// the delayed neighbor levels. Falls back to `cv_cap` when the mean is
/// negligible next to the largest magnitude.
pub fn adaptive_radius(levels: &[f64], params: &CoordinationParams) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let n = levels.len() as f64;
    let mean = levels.iter().sum::<f64>() / n;
    let var = levels.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / n;
    let max_abs = levels.iter().fold(0.0f64, |m, h| m.max(h.abs()));
    let cv = if max_abs == 0.0 {
        0.0
    } else if mean.abs() < 1e-6 * max_abs {
        params.cv_cap
    } else {
        var.sqrt() / mean.abs()
    };
    Ok(params.rho_base * (1.0 + cv))
}

/// Σ_j exp(−(S_i − S_j)² / ρ²).
pub fn separation_loss(own_releases: &[f64], neighbor_totals: &[f64], rho: f64) -> LossGrad {
    let s: f64 = own_releases.iter().sum();
    let r2 = rho * rho;
    let mut value = 0.0;
    let mut d = 0.0;
    for &sj in neighbor_totals {
        let diff = s - sj;
        let k = (-diff * diff / r2).exp();
        value += k;
        d += k * (-2.0 * diff / r2);
    }
    LossGrad::uniform(value, d, own_releases.len())
}

/// λ_eco (Q − target)² where Q is the agent's own current total plus the
/// delayed outflows of the other region members.
pub fn cohesion_loss(
    own_releases: &[f64],
    other_region_outflows: &[f64],
    f_eco: f64,
    region_size: usize,
    lambda_eco: f64,
    target: CohesionTarget,
) -> LossGrad {
    let goal = match target {
        CohesionTarget::PerMemberShare => f_eco / region_size.max(1) as f64,
        CohesionTarget::Collective => f_eco,
    };
    let q: f64 = own_releases.iter().sum::<f64>() + other_region_outflows.iter().sum::<f64>();
    let resid = q - goal;
    LossGrad::uniform(lambda_eco * resid * resid, 2.0 * lambda_eco * resid, own_releases.len())
}

/// All three losses of one agent with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationLosses {
    pub align: f64,
    pub sep: f64,
    pub coh: f64,
    pub total: f64,
    pub grad_align: Vec<f64>,
    pub grad_sep: Vec<f64>,
    pub grad_coh: Vec<f64>,
}

impl CoordinationLosses {
    pub fn grad_total(&self, w: &CoordinationWeights) -> Vec<f64> {
        (0..self.grad_align.len())
            .map(|k| w.align * self.grad_align[k] + w.sep * self.grad_sep[k] + w.coh * self.grad_coh[k])
            .collect()
    }
}

/// κ_align 𝓛_align + κ_sep 𝓛_sep + κ_coh 𝓛_coh. Re-checks the simplex so a
/// weight triple assembled by hand cannot slip through.
pub fn total_coordination_loss(losses: [f64; 3], weights: &CoordinationWeights) -> Result<f64> {
    let w = CoordinationWeights::new(weights.align, weights.sep, weights.coh)?;
    Ok(w.align * losses[0] + w.sep * losses[1] + w.coh * losses[2])
}

/// Everything an agent knows about its neighborhood at one step, frozen so
/// the losses can be re-evaluated for any candidate own release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationContext {
    pub neighbor_totals: Vec<f64>,
    pub weights: Vec<f64>,
    pub rho: f64,
    pub other_region_outflows: Vec<f64>,
    pub f_eco: f64,
    pub region_size: usize,
    pub lambda_eco: f64,
    pub target: CohesionTarget,
    pub kappa: CoordinationWeights,
}

impl CoordinationContext {
    pub fn evaluate(&self, own_releases: &[f64]) -> CoordinationLosses {
        let a = alignment_loss(own_releases, &self.neighbor_totals, &self.weights);
        let s = separation_loss(own_releases, &self.neighbor_totals, self.rho);
        let c = cohesion_loss(
            own_releases,
            &self.other_region_outflows,
            self.f_eco,
            self.region_size,
            self.lambda_eco,
            self.target,
        );
        let k = self.kappa;
        CoordinationLosses {
            align: a.value,
            sep: s.value,
            coh: c.value,
            total: k.align * a.value + k.sep * s.value + k.coh * c.value,
            grad_align: a.grad,
            grad_sep: s.grad,
            grad_coh: c.grad,
        }
    }
}
