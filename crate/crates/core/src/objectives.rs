//! Training losses: load-balancing terms, their relaxation schedule, and the
//! assembled pretraining and merging objectives.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Per-step loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub imp: f64,
    pub load: f64,
    pub aux: f64,
    pub alpha_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.lm += b.lm / n;
            m.imp += b.imp / n;
            m.load += b.load / n;
            m.aux += b.aux / n;
            m.alpha_t += b.alpha_t / n;
            m.total += b.total / n;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub alpha0: f64,
    pub epochs: usize,
}

/// `α₀·½·(1 + cos(π·t/T))` for `0 ≤ t ≤ T`.
pub fn alpha_schedule(cfg: &ScheduleConfig, t: f64) -> Result<f64> {
    if cfg.epochs == 0 || !(0.0..=cfg.epochs as f64).contains(&t) {
        return Err(Error::EpochOutOfRange { t, total: cfg.epochs });
    }
    if t == cfg.epochs as f64 {
        return Ok(0.0);
    }
    Ok(cfg.alpha0 * 0.5 * (1.0 + (PI * t / cfg.epochs as f64).cos()))
}

/// Squared coefficient of variation of the per-expert weight totals.
pub fn importance_loss_graph(g: &mut Graph, weights: Var) -> Result<Var> {
    let imp = g.col_sum(weights);
    g.cv_squared(imp)
}

/// Squared coefficient of variation of the per-expert routing-probability
/// totals.
pub fn load_loss_graph(g: &mut Graph, scores: Var, sigma: f64) -> Result<Var> {
    let p = g.load_prob(scores, sigma)?;
    let load = g.col_sum(p);
    g.cv_squared(load)
}

fn check_rows(w: &Tensor) -> Result<()> {
    for i in 0..w.rows() {
        let s: f64 = w.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::shape("importance_loss", format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

pub fn importance_loss(weights: &Tensor) -> Result<f64> {
    check_rows(weights)?;
    let mut g = Graph::new();
    let w = g.constant(weights.clone());
    let l = importance_loss_graph(&mut g, w)?;
    Ok(g.value(l).item())
}

pub fn load_loss(scores: &Tensor, sigma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(scores.clone());
    let l = load_loss_graph(&mut g, r, sigma)?;
    Ok(g.value(l).item())
}

pub fn aux_loss(imp: f64, load: f64) -> f64 {
    0.5 * (imp + load)
}

/// Assembles `lm + α_t·½(imp + load)`.
pub fn pretrain_loss(lm: f64, imp: f64, load: f64, alpha_t: f64) -> LossBreakdown {
    let aux = aux_loss(imp, load);
    LossBreakdown {
        lm,
        imp,
        load,
        aux,
        alpha_t,
        total: lm + alpha_t * aux,
    }
}

/// Mean over tokens of `‖target − tokens‖₂`; `target` is a constant.
pub fn gap_graph(g: &mut Graph, tokens: Var, target: Var) -> Result<Var> {
    let diff = g.sub(target, tokens)?;
    let norms = g.row_norm(diff);
    Ok(g.mean(norms))
}

/// Mean per-token gap between two token sets.
pub fn mean_gap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("gap", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let d = a.cols();
    let n = a.rows();
    let total: f64 = (0..n)
        .map(|i| {
            a.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&b.data()[i * d..(i + 1) * d])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Weights of the two merging terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub lm: f64,
    pub gap: f64,
}

/// `w_lm·lm + w_gap·gap` on the graph, skipping terms with weight 0.
pub fn merge_objective(g: &mut Graph, lm: Option<Var>, gap: Var, w: MergeWeights) -> Result<Var> {
    let gap_term = g.scale(gap, w.gap);
    match lm {
        Some(l) if w.lm != 0.0 => {
            let lm_term = g.scale(l, w.lm);
            g.add(lm_term, gap_term)
        }
        _ => Ok(gap_term),
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
