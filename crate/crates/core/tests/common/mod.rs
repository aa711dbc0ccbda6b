#![allow(dead_code)]

use tove_core::numerics::{Graph, RandomSource, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients which are
/// zero on both sides compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite differences of a scalar function of several tensors.
/// The oracle only ever evaluates forward values.
pub fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Compares graph gradients against finite differences for a loss built by
/// `build` over trainable leaves. Returns the worst relative error.
pub fn check_graph_grads(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    let numeric = numeric_grads(inputs, &eval);
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = grads.get(*v).expect("trainable leaf has gradient");
        for (a, n) in ana.iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Deterministic pseudo-random tensor for test inputs.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = tove_core::numerics::RandomSource::new(seed);
    Tensor::from_fn(shape, |_| scale * rng.standard_normal())
}

pub const PHI_1: f64 = 0.8413447460685429;

/// Φ from the Maclaurin series of the standard normal integral. Good to
/// ~1e-13 for |x| ≤ 5, which covers every argument used below.
pub fn phi_oracle(x: f64) -> f64 {
    assert!(x.abs() <= 5.0, "oracle range");
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / (2.0 * n);
        let t = term / (2.0 * n + 1.0);
        sum += t;
        if t.abs() < 1e-18 {
            break;
        }
    }
    0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn cv2_oracle(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

pub fn col_sums(w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|k| (0..w.rows()).map(|i| w.at(i, k)).sum()).collect()
}

pub fn load_oracle(r: &Tensor, sigma: f64) -> f64 {
    let k = r.cols();
    let loads: Vec<f64> = (0..k)
        .map(|e| {
            (0..r.rows())
                .map(|i| {
                    let row = r.row(i);
                    let best_other = (0..k).filter(|&j| j != e).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                    phi_oracle((row[e] - best_other) / (sigma * 2f64.sqrt()))
                })
                .sum()
        })
        .collect();
    cv2_oracle(&loads)
}

pub fn softmax_rows_oracle(r: &Tensor) -> Tensor {
    let k = r.cols();
    let mut out = Vec::with_capacity(r.numel());
    for i in 0..r.rows() {
        let row = r.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / s));
    }
    Tensor::new(vec![r.rows(), k], out).unwrap()
}

pub fn one_hot_rows(counts: &[usize]) -> Tensor {
    let k = counts.len();
    let mut data = Vec::new();
    for (e, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let mut row = vec![0.0; k];
            row[e] = 1.0;
            data.extend(row);
        }
    }
    Tensor::new(vec![data.len() / k, k], data).unwrap()
}

/// Cyclic shifts of one probability row give equal column sums.
pub fn balanced_weights(k: usize, reps: usize, rng: &mut RandomSource) -> Tensor {
    let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.01).collect();
    let s: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let mut data = Vec::new();
    for _ in 0..reps {
        for shift in 0..k {
            data.extend((0..k).map(|j| p[(j + shift) % k]));
        }
    }
    Tensor::new(vec![k * reps, k], data).unwrap()
}
