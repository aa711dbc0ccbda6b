//! Resampling between token grids.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 1-D linear interpolation weights `[dst × src]` with aligned corners.
fn linear_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut w = vec![0.0; dst * src];
    for i in 0..dst {
        let pos = if dst == 1 || src == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        w[i * src + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[i * src + hi] += frac;
        }
    }
    w
}

/// 1-D area-average weights `[dst × src]`: each output cell averages the
/// source cells it overlaps, weighted by overlap length.
pub fn area_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut w = vec![0.0; dst * src];
    let step = src as f64 / dst as f64;
    for i in 0..dst {
        let (a, b) = (i as f64 * step, (i + 1) as f64 * step);
        for j in (a.floor() as usize)..(b.ceil() as usize).min(src) {
            let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
            w[i * src + j] = overlap / step;
        }
    }
    w
}

fn kron(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, bc: usize) -> Tensor {
    let (rows, cols) = (ar * br, ac * bc);
    let mut out = vec![0.0; rows * cols];
    for i in 0..ar {
        for j in 0..ac {
            let av = a[i * ac + j];
            if av == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k) * cols + j * bc + l] = av * b[k * bc + l];
                }
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], out)
}

/// Matrix `[th·tw × sh·sw]` mapping row-major grid tokens to the target
/// grid by bilinear interpolation with aligned corners.
pub fn bilinear_matrix(src: (usize, usize), dst: (usize, usize)) -> Result<Tensor> {
    if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
        return Err(Error::EmptyGrid);
    }
    let wy = linear_weights(src.0, dst.0);
    let wx = linear_weights(src.1, dst.1);
    Ok(kron(&wy, dst.0, src.0, &wx, dst.1, src.1))
}

/// Resizes `[h·w × d]` tokens from `native` to `target` grid, channelwise.
/// Equal grids return the input unchanged.
pub fn align_token_count(tokens: &Tensor, native: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    let m = bilinear_matrix(native, target)?;
    if tokens.shape().len() != 2 || tokens.rows() != native.0 * native.1 {
        return Err(Error::shape(
            "align_token_count",
            format!("tokens {:?} for grid {native:?}", tokens.shape()),
        ));
    }
    if native == target {
        return Ok(tokens.clone());
    }
    let d = tokens.cols();
    let mut out = vec![0.0; m.rows() * d];
    crate::numerics::graph::matmul_into(m.data(), tokens.data(), &mut out, m.rows(), m.cols(), d);
    Ok(Tensor::from_parts(vec![m.rows(), d], out))
}
