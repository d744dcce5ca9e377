//! Per-agent encoder, policy and value networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamGroup, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, LstmCell, Mlp};
use crate::rng::StreamFactory;

/// h, q_in, q_out, temperature, precipitation, humidity, demand.
pub const STATE_DIM: usize = 7;
/// Efficiency estimate and scaled distance of the connecting channel.
pub const EDGE_DIM: usize = 2;
pub const WEATHER_DIM: usize = 3;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSizes {
    /// Hidden and output widths of the neighbor message map.
    pub gnn: Vec<usize>,
    pub lstm_hidden: usize,
    /// History window K.
    pub window: usize,
    /// Forecast horizon H.
    pub horizon: usize,
    pub policy: Vec<usize>,
    pub value: Vec<usize>,
    pub injection_hidden: usize,
    pub activation: Activation,
    /// Injection strength ξ.
    pub xi: f64,
    /// Whether the injection mixer exists at all.
    pub injection: bool,
    /// Exploration scale at initialisation, in pre-squash units.
    pub init_std: f64,
}

impl Default for NetworkSizes {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkSizes {
    /// Small enough to train thousands of episodes on one core.
    pub fn desk() -> Self {
        Self {
            gnn: vec![8],
            lstm_hidden: 8,
            window: 4,
            horizon: 4,
            policy: vec![32, 32, 16],
            value: vec![32, 32],
            injection_hidden: 16,
            activation: Activation::Relu,
            xi: 0.1,
            injection: true,
            init_std: 0.5,
        }
    }

    /// The full-size configuration.
    pub fn full() -> Self {
        Self {
            gnn: vec![64, 128, 64],
            lstm_hidden: 128,
            window: 24,
            horizon: 6,
            policy: vec![256, 256, 128],
            value: vec![256, 256],
            injection_hidden: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("history window must be at least 1".into()));
        }
        if self.gnn.is_empty() || self.policy.is_empty() || self.lstm_hidden == 0 {
            return Err(Error::InvalidParameter("network widths must be nonempty".into()));
        }
        if !(self.xi >= 0.0) {
            return Err(Error::InvalidParameter("xi must be nonnegative".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::InvalidParameter("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn gnn_out(&self) -> usize {
        *self.gnn.last().expect("validated")
    }

    pub fn encoded_dim(&self) -> usize {
        STATE_DIM + self.gnn_out() + self.lstm_hidden + self.horizon * WEATHER_DIM
    }
}

/// Network input of one agent at one step, already scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub own: Vec<f64>,
    /// One row of `STATE_DIM + EDGE_DIM` per neighbor, delayed.
    pub neighbors: Vec<f64>,
    /// K rows of `STATE_DIM`, oldest first, zero rows in front when short.
    pub history: Vec<f64>,
    /// H rows of `WEATHER_DIM`.
    pub forecast: Vec<f64>,
    /// [∇align; ∇sep; ∇coh], one block of `n_actions` each.
    pub injection: Vec<f64>,
}

/// Forward-pass outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub encoded: Var,
    pub hidden: Var,
    pub mean: Var,
    pub log_std: Var,
    pub value: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub n_neighbors: usize,
    pub n_actions: usize,
    pub a_max: f64,
    pub sizes: NetworkSizes,
    gnn: Mlp,
    lstm: LstmCell,
    first: Linear,
    mixer: Option<Mlp>,
    trunk: Vec<Linear>,
    mean_head: Linear,
    log_std_head: Linear,
    value: Mlp,
}

impl AgentNet {
    /// Every layer draws its initial weights from a stream named
    /// `{label}.{layer}`, so optional layers never shift the others.
    pub fn new(
        store: &mut ParamStore,
        factory: &StreamFactory,
        label: &str,
        n_neighbors: usize,
        n_actions: usize,
        a_max: f64,
        sizes: &NetworkSizes,
    ) -> Result<Self> {
        sizes.validate()?;
        if n_actions == 0 {
            return Err(Error::InvalidParameter(format!("agent {label} has no release slots")));
        }
        let p = ParamGroup::Policy;
        let act = sizes.activation;
        let mut gnn_sizes = vec![STATE_DIM + EDGE_DIM];
        gnn_sizes.extend(&sizes.gnn);
        let gnn = Mlp::new(store, factory, &format!("{label}.gnn"), p, &gnn_sizes, act);
        let lstm = LstmCell::new(store, factory, &format!("{label}.lstm"), p, STATE_DIM, sizes.lstm_hidden);
        let enc = sizes.encoded_dim();
        let width = sizes.policy[0];
        let first = Linear::new(store, factory, &format!("{label}.pi.0"), p, enc, width);
        let mixer = sizes.injection.then(|| {
            Mlp::new(
                store,
                factory,
                &format!("{label}.inject"),
                p,
                &[3 * n_actions, sizes.injection_hidden, width],
                act,
            )
        });
        let trunk = sizes
            .policy
            .windows(2)
            .enumerate()
            .map(|(k, io)| Linear::new(store, factory, &format!("{label}.pi.{}", k + 1), p, io[0], io[1]))
            .collect();
        let last = *sizes.policy.last().expect("validated");
        let mean_head = Linear::new(store, factory, &format!("{label}.pi.mean"), p, last, n_actions);
        let log_std_head = Linear::new(store, factory, &format!("{label}.pi.log_std"), p, last, n_actions);
        // start the bounded log-std at ln(init_std)
        let target = (sizes.init_std.ln() - LOG_STD_MIN) / (LOG_STD_MAX - LOG_STD_MIN);
        let bias = (target / (1.0 - target)).ln();
        store.get_mut(log_std_head.b).data.iter_mut().for_each(|b| *b = bias);
        let mut value_sizes = vec![enc];
        value_sizes.extend(&sizes.value);
        value_sizes.push(1);
        let value = Mlp::new(store, factory, &format!("{label}.value"), ParamGroup::Value, &value_sizes, act);
        Ok(Self {
            n_neighbors,
            n_actions,
            a_max,
            sizes: sizes.clone(),
            gnn,
            lstm,
            first,
            mixer,
            trunk,
            mean_head,
            log_std_head,
            value,
        })
    }

    fn check(&self, o: &Observation) -> Result<()> {
        let s = &self.sizes;
        let ok = o.own.len() == STATE_DIM
            && o.neighbors.len() == self.n_neighbors * (STATE_DIM + EDGE_DIM)
            && o.history.len() == s.window * STATE_DIM
            && o.forecast.len() == s.horizon * WEATHER_DIM
            && o.injection.len() == 3 * self.n_actions;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("observation does not match the agent network".into()))
        }
    }

    /// Encoded state [own; neighbor aggregate; history summary; forecast].
    pub fn encode(&self, t: &mut Tape<'_>, batch: &[&Observation]) -> Result<Var> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("observation batch".into()));
        }
        for o in batch {
            self.check(o)?;
        }
        let s = &self.sizes;
        let gather = |f: &dyn Fn(&Observation) -> &[f64]| -> Vec<f64> { batch.iter().flat_map(|o| f(o).iter().copied()).collect() };
        let own = t.input(b, STATE_DIM, gather(&|o| &o.own));
        let aggregate = if self.n_neighbors > 0 {
            let rows = t.input(b * self.n_neighbors, STATE_DIM + EDGE_DIM, gather(&|o| &o.neighbors));
            let msg = self.gnn.forward(t, rows)?;
            let msg = s.activation.apply(t, msg);
            t.group_mean(msg, self.n_neighbors)?
        } else {
            t.input(b, s.gnn_out(), vec![0.0; b * s.gnn_out()])
        };
        let steps: Vec<Var> = (0..s.window)
            .map(|k| {
                let v = batch
                    .iter()
                    .flat_map(|o| o.history[k * STATE_DIM..(k + 1) * STATE_DIM].iter().copied())
                    .collect();
                t.input(b, STATE_DIM, v)
            })
            .collect();
        let memory = self.lstm.run(t, &steps)?;
        let mut parts = vec![own, aggregate, memory];
        if s.horizon > 0 {
            parts.push(t.input(b, s.horizon * WEATHER_DIM, gather(&|o| &o.forecast)));
        }
        t.concat(&parts)
    }

    pub fn forward(&self, t: &mut Tape<'_>, batch: &[&Observation]) -> Result<Heads> {
        let encoded = self.encode(t, batch)?;
        let act = self.sizes.activation;
        let pre = self.first.forward(t, encoded)?;
        let mut h = act.apply(t, pre);
        if let Some(mixer) = &self.mixer {
            if self.sizes.xi != 0.0 {
                let g: Vec<f64> = batch.iter().flat_map(|o| o.injection.iter().copied()).collect();
                let g = t.input(batch.len(), 3 * self.n_actions, g);
                let mixed = mixer.forward(t, g)?;
                let mixed = t.scale(mixed, self.sizes.xi);
                h = t.add(h, mixed)?;
            }
        }
        let hidden = h;
        for layer in &self.trunk {
            let z = layer.forward(t, h)?;
            h = act.apply(t, z);
        }
        let mean = self.mean_head.forward(t, h)?;
        let raw = self.log_std_head.forward(t, h)?;
        let squashed = t.sigmoid(raw);
        let scaled = t.scale(squashed, LOG_STD_MAX - LOG_STD_MIN);
        let log_std = t.add_scalar(scaled, LOG_STD_MIN);
        let detached = t.detach(encoded);
        let value = self.value.forward(t, detached)?;
        Ok(Heads {
            encoded,
            hidden,
            mean,
            log_std,
            value,
        })
    }

    /// Forward one observation and draw (or take the mean of) an action.
    pub fn act<R: Rng + ?Sized>(&self, store: &ParamStore, obs: &Observation, rng: &mut R, deterministic: bool) -> Result<ActionSample> {
        let mut t = Tape::new(store);
        let heads = self.forward(&mut t, &[obs])?;
        let mean = t.value(heads.mean).to_vec();
        let log_std = t.value(heads.log_std).to_vec();
        let u: Vec<f64> = if deterministic {
            mean.clone()
        } else {
            mean.iter()
                .zip(&log_std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s.exp() * z
                })
                .collect()
        };
        let log_prob_gaussian: f64 = u
            .iter()
            .zip(mean.iter().zip(&log_std))
            .map(|(&u, (&m, &s))| crate::autodiff::gaussian_log_density(u, m, s))
            .sum();
        let correction: f64 = u.iter().map(|&u| log_squash_jacobian(u, self.a_max)).sum();
        Ok(ActionSample {
            releases: u.iter().map(|&u| squash(u, self.a_max)).collect(),
            mean_releases: mean.iter().map(|&m| squash(m, self.a_max)).collect(),
            u,
            log_prob_gaussian,
            log_prob: log_prob_gaussian - correction,
            value: t.value(heads.value)[0],
        })
    }

    /// State-value estimates for a batch.
    pub fn values(&self, store: &ParamStore, batch: &[&Observation]) -> Result<Vec<f64>> {
        let mut t = Tape::new(store);
        let heads = self.forward(&mut t, batch)?;
        Ok(t.value(heads.value).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// In [0, a_max] per slot.
    pub releases: Vec<f64>,
    /// Releases of the deterministic (mean) action.
    pub mean_releases: Vec<f64>,
    /// Pre-squash sample.
    pub u: Vec<f64>,
    /// Log-density of `u`; the ratio of two policies uses this.
    pub log_prob_gaussian: f64,
    /// Log-density of the released action, squash correction included.
    pub log_prob: f64,
    pub value: f64,
}

/// a = a_max · (tanh u + 1) / 2
pub fn squash(u: f64, a_max: f64) -> f64 {
    (a_max * 0.5 * (u.tanh() + 1.0)).clamp(0.0, a_max)
}

/// ln |da/du| = ln(a_max/2) + ln(1 − tanh² u), evaluated without cancellation.
pub fn log_squash_jacobian(u: f64, a_max: f64) -> f64 {
    let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    (0.5 * a_max).ln() + 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Inverse of the raw-to-log-std bound, for tests and tools.
pub fn bounded_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * sigmoid(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn obs(n_nb: usize, m: usize, s: &NetworkSizes, fill: f64) -> Observation {
        Observation {
            own: vec![fill; STATE_DIM],
            neighbors: (0..n_nb * (STATE_DIM + EDGE_DIM)).map(|k| fill + k as f64 * 0.01).collect(),
            history: vec![fill; s.window * STATE_DIM],
            forecast: vec![fill; s.horizon * WEATHER_DIM],
            injection: vec![0.0; 3 * m],
        }
    }

    fn net(n_nb: usize, m: usize) -> (ParamStore, AgentNet) {
        let mut store = ParamStore::new();
        let n = AgentNet::new(&mut store, &StreamFactory::new(9), "a", n_nb, m, 20.0, &NetworkSizes::desk()).unwrap();
        (store, n)
    }

    #[test]
    fn encoded_width() {
        let (store, n) = net(3, 2);
        let s = NetworkSizes::desk();
        let mut t = Tape::new(&store);
        let o = obs(3, 2, &s, 0.3);
        let e = n.encode(&mut t, &[&o, &o]).unwrap();
        assert_eq!(t.shape(e), (2, STATE_DIM + 8 + 8 + 12));
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, n) = net(2, 1);
        let s = NetworkSizes::desk();
        let a = obs(2, 1, &s, 0.2);
        let mut b = a.clone();
        let w = STATE_DIM + EDGE_DIM;
        let (first, second) = b.neighbors.split_at_mut(w);
        first.swap_with_slice(second);
        let mut t = Tape::new(&store);
        let ea = n.encode(&mut t, &[&a]).unwrap();
        let eb = n.encode(&mut t, &[&b]).unwrap();
        for (x, y) in t.value(ea).iter().zip(t.value(eb)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_networks_pass_state_and_forecast_through() {
        let (mut store, n) = net(2, 1);
        for p in store.params_mut() {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let s = NetworkSizes::desk();
        let o = obs(2, 1, &s, 0.7);
        let mut t = Tape::new(&store);
        let e = n.encode(&mut t, &[&o]).unwrap();
        let v = t.value(e);
        assert!(v[..STATE_DIM].iter().all(|&x| x == 0.7));
        assert!(v[STATE_DIM..STATE_DIM + 16].iter().all(|&x| x == 0.0));
        assert!(v[STATE_DIM + 16..].iter().all(|&x| x == 0.7));
    }

    #[test]
    fn deterministic_zero_mean_is_midpoint() {
        let (mut store, n) = net(1, 2);
        let head = n.mean_head;
        store.get_mut(head.w).data.iter_mut().for_each(|x| *x = 0.0);
        let o = obs(1, 2, &NetworkSizes::desk(), 0.4);
        let mut rng = StreamFactory::new(1).stream(Purpose::Policy, "x");
        let a = n.act(&store, &o, &mut rng, true).unwrap();
        assert_eq!(a.releases, vec![10.0, 10.0]);
    }

    #[test]
    fn initial_exploration_scale() {
        assert!((bounded_log_std(((0.5f64.ln() + 5.0) / 7.0 / (1.0 - (0.5f64.ln() + 5.0) / 7.0)).ln()) - 0.5f64.ln()).abs() < 1e-12);
        let (store, n) = net(1, 1);
        let mut t = Tape::new(&store);
        let o = obs(1, 1, &NetworkSizes::desk(), 0.0);
        let h = n.forward(&mut t, &[&o]).unwrap();
        let ls = t.value(h.log_std)[0];
        assert!(ls > -1.5 && ls < 0.2, "{ls}");
    }

    #[test]
    fn jacobian_matches_direct_form() {
        for &u in &[-3.0, -0.5, 0.0, 0.2, 2.5] {
            let direct = (10.0 * (1.0 - f64::tanh(u).powi(2))).ln();
            assert!((log_squash_jacobian(u, 20.0) - direct).abs() < 1e-12);
        }
        assert!(log_squash_jacobian(40.0, 20.0).is_finite());
        assert!(log_squash_jacobian(-40.0, 20.0).is_finite());
    }
}
