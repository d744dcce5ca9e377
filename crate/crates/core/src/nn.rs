//! Dense layers, a small MLP, an LSTM cell and the Adam optimizer on top of
//! [`crate::autodiff`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamFactory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, t: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => t.relu(x),
            Activation::Tanh => t.tanh(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in from a stream keyed by `name`; bias zero.
    pub fn new(
        store: &mut ParamStore,
        factory: &StreamFactory,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let mut rng = factory.stream(Purpose::Init, name);
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        let w = store.add(format!("{name}.w"), group, outputs, inputs, data);
        let b = store.add(format!("{name}.b"), group, outputs, 1, vec![0.0; outputs]);
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        t.linear(x, self.w, self.b)
    }
}

/// Linear layers with an activation between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        factory: &StreamFactory,
        name: &str,
        group: ParamGroup,
        sizes: &[usize],
        activation: Activation,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, io)| Linear::new(store, factory, &format!("{name}.{k}"), group, io[0], io[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, h)?;
            if k + 1 < self.layers.len() {
                h = self.activation.apply(t, h);
            }
        }
        Ok(h)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}

/// Single-layer LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_map: Linear,
    pub hidden_map: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, factory: &StreamFactory, name: &str, group: ParamGroup, inputs: usize, hidden: usize) -> Self {
        Self {
            input_map: Linear::new(store, factory, &format!("{name}.x"), group, inputs, 4 * hidden),
            hidden_map: Linear::new(store, factory, &format!("{name}.h"), group, hidden, 4 * hidden),
            hidden,
        }
    }

    pub fn step(&self, t: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let zx = self.input_map.forward(t, x)?;
        let zh = self.hidden_map.forward(t, h)?;
        let z = t.add(zx, zh)?;
        let i_raw = t.slice_cols(z, 0, n)?;
        let f_raw = t.slice_cols(z, n, n)?;
        let g_raw = t.slice_cols(z, 2 * n, n)?;
        let o_raw = t.slice_cols(z, 3 * n, n)?;
        let i = t.sigmoid(i_raw);
        let f = t.sigmoid(f_raw);
        let g = t.tanh(g_raw);
        let o = t.sigmoid(o_raw);
        let keep = t.mul(f, c)?;
        let write = t.mul(i, g)?;
        let c_next = t.add(keep, write)?;
        let squashed = t.tanh(c_next);
        let h_next = t.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Run the cell over a sequence of `rows × inputs` nodes from a zero state
    /// and return the final hidden state.
    pub fn run(&self, t: &mut Tape<'_>, sequence: &[Var]) -> Result<Var> {
        let rows = t.shape(sequence[0]).0;
        let mut h = t.input(rows, self.hidden, vec![0.0; rows * self.hidden]);
        let mut c = t.input(rows, self.hidden, vec![0.0; rows * self.hidden]);
        for &x in sequence {
            let (hn, cn) = self.step(t, x, h, c)?;
            h = hn;
            c = cn;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_policy: f64,
    pub lr_value: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_policy: 3e-4,
            lr_value: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step with the learning rate of each parameter's group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if let Some(k) = grads.data.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(store.params()[k].name.clone()));
        }
        if grads.data.len() != self.m.len() {
            return Err(Error::Dimension("optimizer state does not match the parameter store".into()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Policy => c.lr_policy,
                ParamGroup::Value => c.lr_value,
            };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.data[k]);
            for j in 0..p.data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bounded_and_keyed_by_name() {
        let f = StreamFactory::new(3);
        let mut s = ParamStore::new();
        let a = Linear::new(&mut s, &f, "layer", ParamGroup::Policy, 16, 4);
        let b = Linear::new(&mut s, &f, "layer", ParamGroup::Policy, 16, 4);
        let c = Linear::new(&mut s, &f, "other", ParamGroup::Policy, 16, 4);
        let wa = &s.get(a.w).data;
        assert!(wa.iter().all(|x| x.abs() <= 0.25));
        assert_eq!(wa, &s.get(b.w).data);
        assert_ne!(wa, &s.get(c.w).data);
        assert!(s.get(a.b).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let f = StreamFactory::new(1);
        let mut s = ParamStore::new();
        let cell = LstmCell::new(&mut s, &f, "lstm", ParamGroup::Policy, 3, 5);
        for p in s.params_mut() {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new(&s);
        let xs: Vec<Var> = (0..4).map(|k| t.input(2, 3, vec![k as f64; 6])).collect();
        let h = cell.run(&mut t, &xs).unwrap();
        assert!(t.value(h).iter().all(|&x| x == 0.0));
        assert_eq!(t.shape(h), (2, 5));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamGroup::Value, 1, 2, vec![3.0, -2.0]);
        let mut opt = Adam::new(
            &s,
            AdamConfig {
                lr_value: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..2000 {
            let x = s.get(id).data.clone();
            let g = Grads {
                data: vec![vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]],
            };
            opt.step(&mut s, &g).unwrap();
        }
        let x = &s.get(id).data;
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut s = ParamStore::new();
        s.add("x", ParamGroup::Policy, 1, 1, vec![0.0]);
        let mut opt = Adam::new(&s, AdamConfig::default());
        let g = Grads { data: vec![vec![f64::NAN]] };
        assert!(matches!(opt.step(&mut s, &g), Err(Error::NonFiniteGradient(_))));
        assert_eq!(s.params()[0].data[0], 0.0);
    }
}
