//! Independent reference evaluations used to verify the fast paths: plain
//! loops straight from the defining formulas, and finite differences.
//!
//! Nothing here calls into the code it checks.

use crate::densecrf::{GaussianKernelParams, LabelCompatibility, Neighborhood};
use crate::ecrf::EcrfParams;
use crate::gridcore::{position_embedding, Image};
use crate::superpixel::SuperpixelMap;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, 1e-6)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result of the brute-force feature-space CRF evaluation.
pub struct EcrfReference {
    pub output: Vec<f64>,
    /// For every ordered pair `(i, j)` in the neighborhood, whether the raw
    /// kernel dot product was positive.
    pub active: Vec<bool>,
}

/// Direct per-cell evaluation of the feature-space CRF layer in `f64`.
pub fn ecrf_forward_reference(
    features: &[f64],
    channels: usize,
    image: &Image,
    sp: &SuperpixelMap,
    params: &EcrfParams<f64>,
) -> EcrfReference {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let c = channels;
    let pos = position_embedding(h, w, params.pos_dim).expect("valid position dim");
    let token_dim = 3 + params.pos_dim;

    let mut embed = vec![vec![0.0; params.embed_dim]; n];
    for i in 0..n {
        let mut token = image.color(i).to_vec();
        token.extend_from_slice(pos.cell(i));
        for d in 0..params.embed_dim {
            let mut acc = params.embed_bias[d];
            for x in 0..token_dim {
                acc += params.embed_weight[d * token_dim + x] * token[x];
            }
            embed[i][d] = acc;
        }
    }

    let mut output = vec![0.0; n * c];
    let mut active = Vec::new();
    for i in 0..n {
        let fi = &features[i * c..(i + 1) * c];
        let mut numer = fi.to_vec();
        let mut z = 1.0;
        if params.use_pairwise {
            for j in 0..n {
                if j == i || !params.neighborhood.contains(w, i, j) {
                    continue;
                }
                let fj = &features[j * c..(j + 1) * c];
                let raw: f64 = (0..params.embed_dim).map(|d| embed[i][d] * embed[j][d]).sum();
                active.push(raw > 0.0);
                let k = if raw > 0.0 { raw } else { 0.0 };
                let mut pre = params.compat_bias;
                for q in 0..c {
                    pre += params.compat_weight[q] * fi[q] + params.compat_weight[c + q] * fj[q];
                }
                let mu = 1.0 / (1.0 + (-pre).exp());
                let psi = mu * k;
                z += psi;
                for q in 0..c {
                    numer[q] += psi * fj[q];
                }
            }
        }
        if params.use_superpixel {
            let block = sp.block_ids()[i];
            let members: Vec<usize> = (0..n).filter(|&l| sp.block_ids()[l] == block).collect();
            for q in 0..c {
                let mean = members.iter().map(|&l| features[l * c + q]).sum::<f64>() / members.len() as f64;
                numer[q] += mean;
            }
            z += 1.0;
        }
        for q in 0..c {
            output[i * c + q] = numer[q] / z;
        }
    }
    EcrfReference { output, active }
}

/// Triple-loop mean-field update over class scores.
pub fn mean_field_reference(
    scores: &[f64],
    classes: usize,
    image: &Image,
    params: &GaussianKernelParams,
    compat: &LabelCompatibility,
    neighborhood: Neighborhood,
) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let kernel = |i: usize, j: usize| -> f64 {
        let (ri, ci) = ((i / w) as f64, (i % w) as f64);
        let (rj, cj) = ((j / w) as f64, (j % w) as f64);
        let dp2 = (ri - rj) * (ri - rj) + (ci - cj) * (ci - cj);
        let (a, b) = (image.color(i), image.color(j));
        let di2 = (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]);
        params.w1
            * (-dp2 / (2.0 * params.theta_alpha * params.theta_alpha)
                - di2 / (2.0 * params.theta_beta * params.theta_beta))
                .exp()
            + params.w2 * (-dp2 / (2.0 * params.theta_gamma * params.theta_gamma)).exp()
    };
    let mut out = vec![0.0; n * classes];
    for i in 0..n {
        let mut z = 1.0;
        for j in 0..n {
            if j != i && neighborhood.contains(w, i, j) {
                z += kernel(i, j);
            }
        }
        for a in 0..classes {
            let mut acc = scores[i * classes + a];
            for j in 0..n {
                if j == i || !neighborhood.contains(w, i, j) {
                    continue;
                }
                let mut msg = 0.0;
                for b in 0..classes {
                    msg += compat.get(a, b) * scores[j * classes + b];
                }
                acc += kernel(i, j) * msg;
            }
            out[i * classes + a] = acc / z;
        }
    }
    out
}

/// `-ln(exp(y_c) / Σ exp(y_m))` evaluated with plain exponentials.
pub fn neg_log_softmax(logits: &[f64], label: usize) -> f64 {
    let s: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[label].exp() / s).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic_is_exact() {
        let g = central_diff(&[1.0, -2.0], 1e-3, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-10 && (g[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        assert!((rel_err(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
    }
}
