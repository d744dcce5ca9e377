//! Evaluation metrics: coordination quality, learning-curve stability and
//! safety rate.

use serde::{Deserialize, Serialize};

use crate::agents::StepRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    /// Mean over agents of I(a_i; a_−i) / ln n.
    pub q_c: f64,
    /// Miller–Madow bias of the plug-in estimate under independence, on the
    /// same normalized scale. Values of `q_c` below this are noise.
    pub bias_bound: f64,
    pub samples: usize,
}

/// Bin by rank: equal values share a bin, and any strictly increasing
/// transform of `xs` gives the same labels.
pub fn quantile_bins(xs: &[f64], n_bins: usize) -> Vec<usize> {
    let n = xs.len();
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    xs.iter()
        .map(|x| {
            let below = sorted.partition_point(|v| v.total_cmp(x).is_lt());
            (below * n_bins / n).min(n_bins - 1)
        })
        .collect()
}

/// Plug-in mutual information of two label sequences, in nats, and the number
/// of occupied cells along each axis.
fn plugin_mi(x: &[usize], y: &[usize], n_bins: usize) -> (f64, usize, usize) {
    let n = x.len() as f64;
    let mut joint = vec![0usize; n_bins * n_bins];
    let mut px = vec![0usize; n_bins];
    let mut py = vec![0usize; n_bins];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * n_bins + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let mut mi = 0.0;
    for a in 0..n_bins {
        for b in 0..n_bins {
            let c = joint[a * n_bins + b];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (px[a] as f64 * py[b] as f64)).ln();
            }
        }
    }
    let occupied = |p: &[usize]| p.iter().filter(|&&c| c > 0).count();
    (mi.max(0.0), occupied(&px), occupied(&py))
}

/// `actions[t][i]` is agent i's total release at sample t. The rest of the
/// collective is summarized by the mean of the other agents' totals.
pub fn coordination_quality(actions: &[Vec<f64>], n_bins: usize) -> Result<QualityEstimate> {
    let samples = actions.len();
    let n = actions.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::InvalidParameter("coordination quality needs at least two agents".into()));
    }
    if n_bins < 2 || samples < n_bins {
        return Err(Error::InvalidParameter(format!("{samples} samples cannot fill {n_bins} bins")));
    }
    if actions.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension("action rows have different agent counts".into()));
    }
    let log_n = (n as f64).ln();
    let mut q = 0.0;
    let mut bias = 0.0;
    for i in 0..n {
        let own: Vec<f64> = actions.iter().map(|row| row[i]).collect();
        let others: Vec<f64> = actions
            .iter()
            .map(|row| (row.iter().sum::<f64>() - row[i]) / (n - 1) as f64)
            .collect();
        let bx = quantile_bins(&own, n_bins);
        let by = quantile_bins(&others, n_bins);
        let (mi, kx, ky) = plugin_mi(&bx, &by, n_bins);
        q += mi / log_n;
        bias += (kx.saturating_sub(1) * ky.saturating_sub(1)) as f64 / (2.0 * samples as f64) / log_n;
    }
    Ok(QualityEstimate {
        q_c: q / n as f64,
        bias_bound: bias / n as f64,
        samples,
    })
}

/// Population std over |mean| of the last `window` returns; `None` when the
/// mean is too close to zero for the ratio to mean anything.
pub fn learning_curve_cv(returns: &[f64], window: usize) -> Result<Option<f64>> {
    if window == 0 || returns.is_empty() {
        return Err(Error::Empty("return window".into()));
    }
    if window > returns.len() {
        return Err(Error::InvalidParameter(format!("window {window} exceeds {} returns", returns.len())));
    }
    let tail = &returns[returns.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    if mean.abs() < 1e-12 {
        return Ok(None);
    }
    let var = tail.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / window as f64;
    Ok(Some(var.sqrt() / mean.abs()))
}

/// Fraction of (step, node) pairs at or below the safe level, from
/// `(h, h_safe)` pairs. An empty log counts as safe.
pub fn safety_rate(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    pairs.iter().filter(|(h, safe)| h <= safe).count() as f64 / pairs.len() as f64
}

/// Summary of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub steps: usize,
    pub nodes: usize,
    pub safety_rate: f64,
    pub flood_steps: usize,
    /// Mean over nodes of the summed reward.
    pub return_mean: f64,
    /// Absent when there are too few steps or agents to bin.
    pub coordination: Option<QualityEstimate>,
}

impl TrajectoryMetrics {
    pub fn from_records(rows: &[StepRecord], n_bins: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("trajectory".into()));
        }
        let mut nodes: Vec<&str> = Vec::new();
        for r in rows {
            if !nodes.contains(&r.node.as_str()) {
                nodes.push(&r.node);
            }
        }
        let steps = rows.iter().map(|r| r.step).max().expect("nonempty") + 1;
        let mut actions = vec![vec![0.0; nodes.len()]; steps];
        for r in rows {
            let i = nodes.iter().position(|n| *n == r.node).expect("collected above");
            actions[r.step][i] = r.q_out;
        }
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.h_safe)).collect();
        Ok(Self {
            steps,
            nodes: nodes.len(),
            safety_rate: safety_rate(&pairs),
            flood_steps: rows.iter().filter(|r| r.h > r.h_safe).count(),
            return_mean: rows.iter().map(|r| r.reward).sum::<f64>() / nodes.len() as f64,
            coordination: coordination_quality(&actions, n_bins).ok(),
        })
    }
}
