//! Advantage estimation and the coordination-penalized clipped policy update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{AgentNet, Observation};
use crate::autodiff::{Grads, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::guidance::Mode;
use crate::murmuration::CoordinationContext;
use crate::nn::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyperparams {
    pub lr_policy: f64,
    pub lr_value: f64,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Episodes between updates (U).
    pub update_every: usize,
    /// Coordination penalty weight β_mur.
    pub beta_mur: f64,
    pub value_coef: f64,
    pub mode_multipliers: ModeMultipliers,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            lr_policy: 3e-4,
            lr_value: 1e-3,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            batch_size: 512,
            epochs: 10,
            update_every: 4,
            beta_mur: 0.05,
            value_coef: 1.0,
            mode_multipliers: ModeMultipliers::default(),
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidParameter("clip_eps must lie in (0, 1)".into()));
        }
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::InvalidParameter("gamma and gae_lambda must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.update_every == 0 {
            return Err(Error::InvalidParameter("batch_size, epochs and update_every must be positive".into()));
        }
        if !(self.beta_mur >= 0.0 && self.lr_policy > 0.0 && self.lr_value > 0.0 && self.value_coef >= 0.0) {
            return Err(Error::InvalidParameter("rates and weights must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_policy: self.lr_policy,
            lr_value: self.lr_value,
            ..AdamConfig::default()
        }
    }
}

/// Penalty scaling per guidance mode; emergencies weigh coordination more.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeMultipliers {
    pub strategic: f64,
    pub tactical: f64,
    pub operational: f64,
}

impl Default for ModeMultipliers {
    fn default() -> Self {
        Self {
            strategic: 1.0,
            tactical: 2.0,
            operational: 4.0,
        }
    }
}

impl ModeMultipliers {
    pub fn get(&self, mode: Option<Mode>) -> f64 {
        match mode {
            None | Some(Mode::Strategic) => self.strategic,
            Some(Mode::Tactical) => self.tactical,
            Some(Mode::Operational) => self.operational,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// δ_t = r_t + γ V_{t+1} − V_t, A_t = δ_t + γλ A_{t+1}; `bootstrap` is the
/// value after the last step (zero for a terminal state).
pub fn compute_gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<Gae> {
    if rewards.len() != values.len() {
        return Err(Error::Dimension(format!("{} rewards but {} values", rewards.len(), values.len())));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(Gae { advantages, returns })
}

/// What the penalty needs to re-evaluate the coordination loss at a new
/// mean action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyContext {
    pub context: CoordinationContext,
    /// Releases are divided by this before the losses see them.
    pub flow_scale: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub u: Vec<f64>,
    /// Gaussian log-density of `u` under the behavior policy.
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub advantage: f64,
    pub ret: f64,
    pub penalty: Option<PenaltyContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub clip_fraction: f64,
    pub penalty: f64,
    /// Surrogate minus β_mur times the penalty.
    pub objective: f64,
    pub value_loss: f64,
    pub minibatches: usize,
}

/// Loss to minimize on one minibatch:
/// −mean(min(rA, clip(r)A)) + β_mur·mean(m·𝓛_total(ā)) + c_v·mean((V − R)²),
/// where ā is the deterministic action. With `grads` the gradient is
/// accumulated as well.
pub fn ppo_loss(
    net: &AgentNet,
    store: &ParamStore,
    samples: &[&Sample],
    hyper: &TrainHyperparams,
    grads: Option<&mut Grads>,
) -> Result<(f64, UpdateDiagnostics)> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Empty("minibatch".into()));
    }
    let m = net.n_actions;
    let mut t = Tape::new(store);
    let obs: Vec<&Observation> = samples.iter().map(|s| &s.obs).collect();
    let heads = net.forward(&mut t, &obs)?;
    let u: Vec<f64> = samples.iter().flat_map(|s| s.u.iter().copied()).collect();
    if u.len() != b * m {
        return Err(Error::Dimension("stored actions do not match the action head".into()));
    }
    let logp = t.gaussian_log_prob(heads.mean, heads.log_std, u)?;
    let old = t.input(b, 1, samples.iter().map(|s| s.log_prob).collect());
    let diff = t.sub(logp, old)?;
    let ratio = t.exp(diff);
    let adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    let eps = hyper.clip_eps;
    let clip_fraction = t.value(ratio).iter().filter(|r| (**r - 1.0).abs() > eps).count() as f64 / b as f64;
    let surr = t.clipped_surrogate(ratio, adv, eps)?;
    let surr_mean = t.mean_all(surr);
    let mut loss = t.scale(surr_mean, -1.0);

    let mut penalty = 0.0;
    let active = hyper.beta_mur != 0.0
        && samples
            .iter()
            .any(|s| s.penalty.as_ref().is_some_and(|p| p.multiplier != 0.0));
    if active {
        let squashed = t.tanh(heads.mean);
        let shifted = t.add_scalar(squashed, 1.0);
        let mut values = vec![0.0; b];
        let mut local = vec![0.0; b * m];
        // releases in m³/s; each row is divided by its own flow scale below
        let releases = t.scale(shifted, 0.5 * net.a_max);
        let rv = t.value(releases).to_vec();
        for (r, s) in samples.iter().enumerate() {
            let Some(p) = &s.penalty else { continue };
            let row: Vec<f64> = rv[r * m..(r + 1) * m].iter().map(|a| a / p.flow_scale).collect();
            let l = p.context.evaluate(&row);
            values[r] = p.multiplier * l.total;
            let g = l.grad_total(&p.context.kappa);
            for k in 0..m {
                local[r * m + k] = p.multiplier * g[k] / p.flow_scale;
            }
        }
        let ext = t.external(releases, values, local)?;
        let pen = t.mean_all(ext);
        penalty = t.scalar(pen);
        let weighted = t.scale(pen, hyper.beta_mur);
        loss = t.add(loss, weighted)?;
    }

    let targets = t.input(b, 1, samples.iter().map(|s| s.ret).collect());
    let err = t.sub(heads.value, targets)?;
    let sq = t.mul(err, err)?;
    let value_loss = t.mean_all(sq);
    let weighted_value = t.scale(value_loss, hyper.value_coef);
    let total = t.add(loss, weighted_value)?;

    if let Some(g) = grads {
        t.backward(total, g)?;
    }
    let surrogate = t.scalar(surr_mean);
    Ok((
        t.scalar(total),
        UpdateDiagnostics {
            clip_fraction,
            penalty,
            objective: surrogate - hyper.beta_mur * penalty,
            value_loss: t.scalar(value_loss),
            minibatches: 1,
        },
    ))
}

/// Rescale advantages to mean 0, std 1 (std guarded at 1e-8).
pub fn normalize_advantages(samples: &mut [Sample]) {
    let n = samples.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for s in samples {
        s.advantage = (s.advantage - mean) / std;
    }
}

/// Several epochs of shuffled minibatch descent. On a non-finite gradient
/// the parameters and optimizer state are restored and the error returned.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &AgentNet,
    store: &mut ParamStore,
    adam: &mut Adam,
    samples: &mut [Sample],
    hyper: &TrainHyperparams,
    rng: &mut R,
) -> Result<UpdateDiagnostics> {
    if samples.is_empty() {
        return Err(Error::Empty("experience batch".into()));
    }
    if samples.iter().any(|s| !s.advantage.is_finite() || !s.ret.is_finite()) {
        return Err(Error::NonFiniteGradient("advantage or return target".into()));
    }
    normalize_advantages(samples);
    let saved_store = store.clone();
    let saved_adam = adam.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut diag = UpdateDiagnostics::default();
    let result = (|| {
        for _ in 0..hyper.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let mut grads = Grads::zeros_like(store);
                let (_, d) = ppo_loss(net, store, &batch, hyper, Some(&mut grads))?;
                adam.step(store, &grads)?;
                diag.clip_fraction += d.clip_fraction;
                diag.penalty += d.penalty;
                diag.objective += d.objective;
                diag.value_loss += d.value_loss;
                diag.minibatches += 1;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        *store = saved_store;
        *adam = saved_adam;
        return Err(e);
    }
    let k = diag.minibatches.max(1) as f64;
    diag.clip_fraction /= k;
    diag.penalty /= k;
    diag.objective /= k;
    diag.value_loss /= k;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_examples() {
        let g = compute_gae(&[1.0, 1.0], &[0.0, 0.0], 0.0, 0.99, 0.95).unwrap();
        assert!((g.advantages[0] - 1.9405).abs() < 1e-12);
        assert_eq!(g.advantages[1], 1.0);
        let single = compute_gae(&[2.0], &[0.5], 1.0, 0.9, 0.95).unwrap();
        assert!((single.advantages[0] - (2.0 + 0.9 - 0.5)).abs() < 1e-12);
        let tele = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(tele.advantages, vec![6.0, 5.0, 3.0]);
        assert!(compute_gae(&[1.0], &[], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn multipliers() {
        let m = ModeMultipliers::default();
        assert_eq!(m.get(None), 1.0);
        assert_eq!(m.get(Some(Mode::Operational)), 4.0);
    }
}
