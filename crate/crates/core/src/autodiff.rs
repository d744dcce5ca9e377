//! Minimal define-by-run reverse-mode differentiation over row-major batches.
//!
//! Every node holds a `rows × cols` matrix; rows are batch samples. Values are
//! computed eagerly while the graph is built, so intermediate results can be
//! read back (the coordination penalty needs the current mean action before it
//! can attach its own local gradient). Parameters live in a [`ParamStore`] and
//! are referenced by id; gradients land in a [`Grads`] buffer of matching
//! shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Policy,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        self.params.push(Param {
            name: name.into(),
            group,
            rows,
            cols,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// Flat view used by finite-difference checks.
    pub fn scalar_mut(&mut self, flat: usize) -> &mut f64 {
        let mut k = flat;
        for p in &mut self.params {
            if k < p.data.len() {
                return &mut p.data[k];
            }
            k -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Linear { x: Var, w: ParamId, b: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    GroupMean { x: Var, group: usize },
    SumCols(Var),
    MeanAll(Var),
    GaussianLogProb { mean: Var, log_std: Var, u: Vec<f64> },
    ClippedSurrogate { ratio: Var, adv: Vec<f64>, eps: f64 },
    External { x: Var, grad: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// A computation graph bound to one parameter store.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "input data does not match its shape");
        self.push(Op::Input, rows, cols, value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let value = self.nodes[v.0].value.clone();
        self.input(r, c, value)
    }

    /// y = x Wᵀ + b with W stored `out × in`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (rows, inp) = self.shape(x);
        let wp = self.store.get(w);
        let bp = self.store.get(b);
        if wp.cols != inp || bp.data.len() != wp.rows {
            return Err(Error::Dimension(format!(
                "linear layer {} expects {} inputs, got {}",
                wp.name, wp.cols, inp
            )));
        }
        let out = wp.rows;
        let xv = &self.nodes[x.0].value;
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wp.data[o * inp..(o + 1) * inp];
                y.push(bp.data[o] + dot(xr, wr));
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, rows, out, y, true))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.zip_same(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), r, c, v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.zip_same(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), r, c, v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.zip_same(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), r, c, v, ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(op, r, c, v, ng)
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Dimension("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                v.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat(parts.to_vec()), rows, cols, v, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Dimension(format!("slice {start}..{} of {cols} columns", start + len)));
        }
        let xv = self.value(x);
        let mut v = Vec::with_capacity(rows * len);
        for r in 0..rows {
            v.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Op::Slice { x, start }, rows, len, v, ng))
    }

    /// Mean over consecutive blocks of `group` rows: `(n·group) × c → n × c`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!("{rows} rows do not split into groups of {group}")));
        }
        let n = rows / group;
        let xv = self.value(x);
        let mut v = vec![0.0; n * cols];
        for r in 0..rows {
            let o = (r / group) * cols;
            for c in 0..cols {
                v[o + c] += xv[r * cols + c];
            }
        }
        let inv = 1.0 / group as f64;
        v.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(x);
        Ok(self.push(Op::GroupMean { x, group }, n, cols, v, ng))
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let v = self.value(x).chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Op::SumCols(x), rows, 1, v, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Op::MeanAll(x), 1, 1, vec![m], ng)
    }

    /// Row-wise Σ_k log N(u_k; mean_k, exp(log_std_k)²) → `rows × 1`.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, u: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.zip_same(mean, log_std, "gaussian_log_prob")?;
        if u.len() != rows * cols {
            return Err(Error::Dimension("gaussian_log_prob: sample shape".into()));
        }
        let mv = self.value(mean);
        let sv = self.value(log_std);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                out[r] += gaussian_log_density(u[k], mv[k], sv[k]);
            }
        }
        let ng = self.ng(mean) || self.ng(log_std);
        Ok(self.push(Op::GaussianLogProb { mean, log_std, u }, rows, 1, out, ng))
    }

    /// Row-wise min(r·A, clip(r, 1−ε, 1+ε)·A) for a `rows × 1` ratio node.
    pub fn clipped_surrogate(&mut self, ratio: Var, adv: Vec<f64>, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(ratio);
        if cols != 1 || adv.len() != rows {
            return Err(Error::Dimension("clipped_surrogate expects a column and one advantage per row".into()));
        }
        let v = self
            .value(ratio)
            .iter()
            .zip(&adv)
            .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
            .collect();
        let ng = self.ng(ratio);
        Ok(self.push(Op::ClippedSurrogate { ratio, adv, eps }, rows, 1, v, ng))
    }

    /// Attach a row-wise scalar function evaluated outside the tape: `values`
    /// holds one number per row of `x`, `grad` its derivative with respect to
    /// every entry of `x`.
    pub fn external(&mut self, x: Var, values: Vec<f64>, grad: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if values.len() != rows || grad.len() != rows * cols {
            return Err(Error::Dimension("external: value or gradient shape".into()));
        }
        let ng = self.ng(x);
        Ok(self.push(Op::External { x, grad }, rows, 1, values, ng))
    }

    /// Reverse sweep from a 1×1 node, accumulating into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Grads) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar root".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj, grads);
        }
        if let Some(k) = grads.data.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(self.store.params()[k].name.clone()));
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let send = |adj: &mut [Option<Vec<f64>>], v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Linear { x, w, b } => {
                let wp = self.store.get(*w);
                let (out, inp) = (wp.rows, wp.cols);
                let xv = &self.nodes[x.0].value;
                let rows = node.rows;
                {
                    let gw = &mut grads.data[w.0];
                    for r in 0..rows {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                {
                    let gb = &mut grads.data[b.0];
                    for r in 0..rows {
                        for o in 0..out {
                            gb[o] += g[r * out + o];
                        }
                    }
                }
                send(adj, *x, &|s| {
                    for r in 0..rows {
                        let sr = &mut s[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, &wp.data[o * inp..(o + 1) * inp], sr);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(adj, *a, &|s| axpy(1.0, g, s));
                send(adj, *b, &|s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                send(adj, *a, &|s| axpy(1.0, g, s));
                send(adj, *b, &|s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                send(adj, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                send(adj, *b, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, k) => send(adj, *a, &|s| axpy(*k, g, s)),
            Op::AddScalar(a) => send(adj, *a, &|s| axpy(1.0, g, s)),
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                send(adj, *a, &|s| {
                    for k in 0..s.len() {
                        if av[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                send(adj, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(adj, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                send(adj, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = node.rows;
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].cols;
                    send(adj, p, &|s| {
                        for r in 0..rows {
                            axpy(1.0, &g[r * total + offset..r * total + offset + c], &mut s[r * c..(r + 1) * c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (rows, len) = (node.rows, node.cols);
                let cols = self.nodes[x.0].cols;
                send(adj, *x, &|s| {
                    for r in 0..rows {
                        axpy(1.0, &g[r * len..(r + 1) * len], &mut s[r * cols + start..r * cols + start + len]);
                    }
                });
            }
            Op::GroupMean { x, group } => {
                let cols = node.cols;
                let inv = 1.0 / *group as f64;
                let rows_in = self.nodes[x.0].rows;
                send(adj, *x, &|s| {
                    for r in 0..rows_in {
                        let o = (r / group) * cols;
                        for c in 0..cols {
                            s[r * cols + c] += inv * g[o + c];
                        }
                    }
                });
            }
            Op::SumCols(x) => {
                let cols = self.nodes[x.0].cols;
                send(adj, *x, &|s| {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k / cols];
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                send(adj, *x, &|s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::GaussianLogProb { mean, log_std, u } => {
                let mv = &self.nodes[mean.0].value;
                let sv = &self.nodes[log_std.0].value;
                let cols = self.nodes[mean.0].cols;
                send(adj, *mean, &|s| {
                    for k in 0..s.len() {
                        let var = (2.0 * sv[k]).exp();
                        s[k] += g[k / cols] * (u[k] - mv[k]) / var;
                    }
                });
                send(adj, *log_std, &|s| {
                    for k in 0..s.len() {
                        let z2 = (u[k] - mv[k]).powi(2) * (-2.0 * sv[k]).exp();
                        s[k] += g[k / cols] * (z2 - 1.0);
                    }
                });
            }
            Op::ClippedSurrogate { ratio, adv, eps } => {
                let rv = &self.nodes[ratio.0].value;
                send(adj, *ratio, &|s| {
                    for k in 0..s.len() {
                        let r = rv[k];
                        let a = adv[k];
                        let unclipped = r * a;
                        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
                        // the clipped branch is flat outside the trust region
                        let d = if unclipped <= clipped || (r > 1.0 - eps && r < 1.0 + eps) { a } else { 0.0 };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::External { x, grad } => {
                let cols = self.nodes[x.0].cols;
                send(adj, *x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k / cols] * grad[k];
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn gaussian_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - LN_SQRT_2PI
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
