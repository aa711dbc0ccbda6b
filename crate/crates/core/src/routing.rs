//! Token-wise gating, noisy softmax ensembling with detachment masks,
//! residual fusion and contribution statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hub::{linear, ParamSource};
use crate::numerics::{mlp_forward, Graph, Init, Linear, MlpParams, ParamStore, RandomSource, Tensor, Var};

pub const GATE_PREFIX: &str = "gate.";
pub const FUSE_PREFIX: &str = "fuse.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingKind {
    Linear,
    Mlp,
}

/// Plain weights of a linear gate, `r = x·θ + b`.
#[derive(Clone, Debug)]
pub struct GatingParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `vis_tokens·θ + b`, one score row per token.
pub fn route(gp: &GatingParams, vis_tokens: &Tensor) -> Result<Tensor> {
    if vis_tokens.cols() != gp.weight.rows() || gp.bias.numel() != gp.weight.cols() {
        return Err(Error::shape(
            "route",
            format!("tokens {:?}, gate {:?}", vis_tokens.shape(), gp.weight.shape()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(vis_tokens.clone());
    let w = g.constant(gp.weight.clone());
    let b = g.constant(gp.bias.clone());
    let r = g.matmul(x, w)?;
    let r = g.add_bias(r, b)?;
    Ok(g.value(r).clone())
}

/// The gating network `G_θ`.
#[derive(Clone, Debug)]
pub struct Gating {
    layers: Vec<Linear>,
}

impl Gating {
    pub fn new(store: &mut ParamStore, kind: GatingKind, d_vis: usize, experts: usize, rng: &mut RandomSource) -> Self {
        let layers = match kind {
            GatingKind::Linear => vec![Linear::new(store, "gate.l0", d_vis, experts, true, Init::FanIn, rng, true)],
            GatingKind::Mlp => vec![
                Linear::new(store, "gate.l0", d_vis, d_vis, true, Init::He, rng, true),
                Linear::new(store, "gate.l1", d_vis, experts, true, Init::FanIn, rng, true),
            ],
        };
        Self { layers }
    }

    pub fn experts(&self) -> usize {
        self.layers.last().expect("gate has a layer").d_out
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSource, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.layers[0].d_in {
            return Err(Error::shape(
                "route",
                format!("token width {} vs gate input {}", g.value(x).cols(), self.layers[0].d_in),
            ));
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = linear(g, p, l, h)?;
        }
        Ok(h)
    }

    /// Plain weights when the gate is a single linear layer.
    pub fn params(&self, store: &ParamStore) -> Option<GatingParams> {
        let [l] = self.layers.as_slice() else { return None };
        Some(GatingParams {
            weight: store.get(l.weight).clone(),
            bias: store.get(l.bias.expect("gate bias")).clone(),
        })
    }
}

fn keep_mask(rows: usize, k: usize, retained: &[usize]) -> Result<Vec<bool>> {
    if retained.is_empty() {
        return Err(Error::EmptyRetainedSet);
    }
    if let Some(&bad) = retained.iter().find(|&&e| e >= k) {
        return Err(Error::UnknownExpert(bad));
    }
    let mut row = vec![false; k];
    retained.iter().for_each(|&e| row[e] = true);
    Ok(row.iter().copied().cycle().take(rows * k).collect())
}

/// Softmax over retained experts of `r + ε`, `ε ~ N(0, 1/K²)` on retained
/// columns when a noise source is given. Detached columns come out exactly 0.
pub fn ensemble_weights_graph(
    g: &mut Graph,
    scores: Var,
    noise: Option<&mut RandomSource>,
    retained: &[usize],
) -> Result<Var> {
    let (n, k) = (g.value(scores).rows(), g.value(scores).cols());
    let keep = keep_mask(n, k, retained)?;
    let noisy = match noise {
        Some(rng) => {
            let std = 1.0 / k as f64;
            let eps: Vec<f64> = keep.iter().map(|&kp| if kp { std * rng.standard_normal() } else { 0.0 }).collect();
            let e = g.constant(Tensor::from_parts(vec![n, k], eps));
            g.add(scores, e)?
        }
        None => scores,
    };
    g.softmax_rows(noisy, Some(&keep))
}

pub fn ensemble_weights(
    scores: &Tensor,
    rng: &mut RandomSource,
    noise_enabled: bool,
    retained: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.constant(scores.clone());
    let w = ensemble_weights_graph(&mut g, r, noise_enabled.then_some(rng), retained)?;
    Ok(g.value(w).clone())
}

/// `Σ_k w_k ⊙ projected_k` over the experts that have a projection; the
/// others must carry zero weight.
pub fn ensemble_graph(g: &mut Graph, weights: Var, projected: &[Option<Var>]) -> Result<Var> {
    let k = g.value(weights).cols();
    if projected.len() != k {
        return Err(Error::shape("ensemble", format!("{} projections for {k} experts", projected.len())));
    }
    let mut acc: Option<Var> = None;
    for (e, p) in projected.iter().enumerate() {
        let Some(p) = *p else { continue };
        if g.value(p).rows() != g.value(weights).rows() {
            return Err(Error::shape("ensemble", "projection rows differ from weight rows"));
        }
        let w = g.slice_cols(weights, e, 1)?;
        let term = g.col_scale(p, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or(Error::EmptyRetainedSet)
}

pub fn ensemble_expert_tokens(weights: &Tensor, projected: &[Tensor]) -> Result<Tensor> {
    if let Some(p) = projected.iter().find(|p| p.shape() != projected[0].shape()) {
        return Err(Error::shape("ensemble", format!("{:?} vs {:?}", p.shape(), projected[0].shape())));
    }
    let mut g = Graph::new();
    let w = g.constant(weights.clone());
    let ps: Vec<Option<Var>> = projected.iter().map(|p| Some(g.constant(p.clone()))).collect();
    let out = ensemble_graph(&mut g, w, &ps)?;
    Ok(g.value(out).clone())
}

/// How expert knowledge enters the vision tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStrategy {
    /// `t_vis + λ·M_φ(t_exp)`.
    Residual,
    /// `t_vis + t_exp`.
    Direct,
    /// Expert tokens appended after the vision tokens.
    Concat,
}

impl TransferStrategy {
    pub fn name(self) -> &'static str {
        match self {
            TransferStrategy::Residual => "residual",
            TransferStrategy::Direct => "direct",
            TransferStrategy::Concat => "concat",
        }
    }
}

/// The fusion MLP `M_φ`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut RandomSource) -> Self {
        let fc1 = Linear::new(store, "fuse.fc1", d, d, true, Init::He, rng, true);
        let fc2 = Linear::new(store, "fuse.fc2", d, d, true, Init::FanIn, rng, true);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSource, x: Var) -> Result<Var> {
        let h = linear(g, p, &self.fc1, x)?;
        let h = g.gelu(h);
        linear(g, p, &self.fc2, h)
    }

    pub fn params(&self, store: &ParamStore) -> MlpParams {
        let b = |l: &Linear| store.get(l.bias.expect("fusion bias")).clone();
        MlpParams {
            w1: store.get(self.fc1.weight).clone(),
            b1: b(&self.fc1),
            w2: store.get(self.fc2.weight).clone(),
            b2: b(&self.fc2),
        }
    }
}

/// `t_vis + λ·M_φ(t_exp)` on the graph. With `λ = 0` the vision tokens are
/// returned as they are.
pub fn fuse_residual_graph(
    g: &mut Graph,
    p: &ParamSource,
    fusion: &Fusion,
    lambda: f64,
    t_vis: Var,
    t_exp: Var,
) -> Result<Var> {
    if g.value(t_vis).shape() != g.value(t_exp).shape() {
        return Err(Error::shape("fuse_residual", "token shapes differ"));
    }
    if lambda == 0.0 {
        return Ok(t_vis);
    }
    let m = fusion.forward(g, p, t_exp)?;
    let m = g.scale(m, lambda);
    g.add(t_vis, m)
}

/// Plain fusion parameters.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub mlp: MlpParams,
    pub lambda: f64,
}

pub fn fuse_residual(f: &FusionParams, t_vis: &Tensor, t_exp: &Tensor) -> Result<Tensor> {
    if t_vis.shape() != t_exp.shape() {
        return Err(Error::shape("fuse_residual", "token shapes differ"));
    }
    if !(0.0..=1.0).contains(&f.lambda) {
        return Err(Error::ConfigInvalid(format!("λ = {} outside [0, 1]", f.lambda)));
    }
    if f.lambda == 0.0 {
        return Ok(t_vis.clone());
    }
    let m = mlp_forward(&f.mlp, t_exp)?;
    let data = t_vis.data().iter().zip(m.data()).map(|(v, u)| v + f.lambda * u).collect();
    Ok(Tensor::new(t_vis.shape().to_vec(), data)?)
}

pub fn fuse_direct(t_vis: &Tensor, t_exp: &Tensor) -> Result<Tensor> {
    if t_vis.shape() != t_exp.shape() {
        return Err(Error::shape("fuse_direct", "token shapes differ"));
    }
    let data = t_vis.data().iter().zip(t_exp.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::new(t_vis.shape().to_vec(), data)?)
}

pub fn fuse_concat(t_vis: &Tensor, t_exp: &Tensor) -> Result<Tensor> {
    if t_vis.shape() != t_exp.shape() {
        return Err(Error::shape("fuse_concat", "token shapes differ"));
    }
    let mut data = t_vis.data().to_vec();
    data.extend_from_slice(t_exp.data());
    Ok(Tensor::new(vec![2 * t_vis.rows(), t_vis.cols()], data)?)
}

/// Weights, scores and mask of one routed image.
#[derive(Clone, Debug)]
pub struct RoutingState {
    pub scores: Tensor,
    pub weights: Tensor,
    pub retained: Vec<usize>,
    pub noise_enabled: bool,
}

/// Running mean of each expert's ensemble weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionStats {
    pub means: Vec<f64>,
    pub count: u64,
}

impl ContributionStats {
    pub fn new(k: usize) -> Self {
        Self {
            means: vec![0.0; k],
            count: 0,
        }
    }

    /// Folds in every row of `w`.
    pub fn update(&mut self, w: &Tensor) {
        let n = w.rows() as u64;
        if n == 0 {
            return;
        }
        let total = (self.count + n) as f64;
        for (k, m) in self.means.iter_mut().enumerate() {
            let batch_sum: f64 = (0..w.rows()).map(|i| w.at(i, k)).sum();
            *m += (batch_sum - n as f64 * *m) / total;
        }
        self.count += n;
    }

    /// Expert ids by decreasing mean weight, ties to the lower id.
    pub fn rank(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.means.len()).collect();
        ids.sort_by(|&a, &b| self.means[b].total_cmp(&self.means[a]).then(a.cmp(&b)));
        ids
    }
}

pub fn update_contribution_stats(mut stats: ContributionStats, w: &Tensor) -> ContributionStats {
    stats.update(w);
    stats
}

pub fn rank_experts(stats: &ContributionStats) -> Vec<usize> {
    stats.rank()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_retained_set_rejected() {
        let r = Tensor::zeros(&[2, 3]);
        let mut rng = RandomSource::new(0);
        assert!(matches!(ensemble_weights(&r, &mut rng, false, &[]), Err(Error::EmptyRetainedSet)));
    }

    #[test]
    fn uniform_stats_rank_by_id() {
        let mut s = ContributionStats::new(3);
        s.update(&Tensor::full(&[4, 3], 1.0 / 3.0));
        assert_eq!(s.rank(), vec![0, 1, 2]);
    }
}
