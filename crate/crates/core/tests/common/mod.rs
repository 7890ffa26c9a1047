//! Reference implementations and numerical oracles shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use metaland::autodiff::{Shape, Tensor};
use metaland::model::{init_params, loss_and_gradient, LabeledBatch, ModelSpec, ParameterVector};
use metaland::tasks::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize, n_way: usize) -> LabeledBatch {
    let x = normal_vec(rng, rows * dim);
    let labels = (0..rows).map(|_| rng.random_range(0..n_way)).collect();
    LabeledBatch::new(Tensor::new(Shape::new(rows, dim), x), labels)
}

/// Xavier init plus a small perturbation so biases are not exactly zero.
pub fn generic_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut p = init_params(spec, seed);
    let mut r = rng(seed ^ 0x5eed);
    for v in p.iter_mut() {
        *v += 0.05 * normal(&mut r);
    }
    p
}

/// Plain-loop MLP: W stored fan_in x fan_out row-major, then the bias.
/// Returns the logits and every hidden pre-activation.
pub fn ref_forward(spec: &ModelSpec, params: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let layers = spec.layers();
    let mut h = x.to_vec();
    let mut pre = Vec::new();
    let mut off = 0;
    for (l, &(fi, fo)) in layers.iter().enumerate() {
        let w = &params[off..off + fi * fo];
        let b = &params[off + fi * fo..off + fi * fo + fo];
        off += (fi + 1) * fo;
        let mut z = vec![0.0; rows * fo];
        for r in 0..rows {
            for o in 0..fo {
                let mut s = b[o];
                for i in 0..fi {
                    s += h[r * fi + i] * w[i * fo + o];
                }
                z[r * fo + o] = s;
            }
        }
        if l + 1 < layers.len() {
            pre.push(z.clone());
            h = z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        } else {
            h = z;
        }
    }
    (h, pre)
}

/// Mean cross-entropy through the reference forward pass.
pub fn ref_loss(spec: &ModelSpec, params: &[f64], batch: &LabeledBatch) -> f64 {
    let rows = batch.len();
    let (logits, _) = ref_forward(spec, params, batch.features.data(), rows);
    let n = spec.n_way;
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits[r * n..(r + 1) * n];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= (row[batch.labels[r]] - m) - lse;
    }
    total / rows as f64
}

/// Sign pattern of every ReLU pre-activation.
pub fn relu_pattern(spec: &ModelSpec, params: &[f64], batch: &LabeledBatch) -> Vec<bool> {
    ref_forward(spec, params, batch.features.data(), batch.len()).1.into_iter().flatten().map(|v| v > 0.0).collect()
}

pub fn shifted(params: &[f64], coord: usize, delta: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    p[coord] += delta;
    p
}

/// True when moving `coord` anywhere in `[-reach, reach]` leaves every ReLU
/// on the same side of its kink at the endpoints, so a finite-difference
/// stencil of that width sees a smooth function.
pub fn kink_free(spec: &ModelSpec, params: &[f64], batch: &LabeledBatch, coord: usize, reach: f64) -> bool {
    let base = relu_pattern(spec, params, batch);
    [-reach, reach].iter().all(|&d| relu_pattern(spec, &shifted(params, coord, d), batch) == base)
}

/// Fourth-order central difference.
pub fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2(&d) / l2(b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain gradient-descent inner loop using only first-order gradients,
/// returning every iterate including the start.
pub fn ref_inner_loop(spec: &ModelSpec, start: &[f64], support: &LabeledBatch, alpha: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut out = vec![start.to_vec()];
    let mut p = ParameterVector::new(start.to_vec());
    for _ in 0..steps {
        let (_, g) = loss_and_gradient(spec, &p, support).unwrap();
        for (v, gi) in p.iter_mut().zip(g.iter()) {
            *v -= alpha * gi;
        }
        out.push(p.to_vec());
    }
    out
}

/// Mean target loss after adapting to each episode's support set.
pub fn ref_meta_objective(spec: &ModelSpec, theta: &[f64], batch: &[Episode], alpha: f64, steps: usize) -> f64 {
    batch
        .iter()
        .map(|e| {
            let sol = ref_inner_loop(spec, theta, &e.support, alpha, steps).pop().unwrap();
            ref_loss(spec, &sol, &e.target)
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Kink check for the meta-objective: every iterate on the support set and
/// the solution on the target set keep their ReLU patterns when `coord` of
/// the start moves by `+-reach`.
pub fn meta_kink_free(
    spec: &ModelSpec,
    theta: &[f64],
    batch: &[Episode],
    alpha: f64,
    steps: usize,
    coord: usize,
    reach: f64,
) -> bool {
    let patterns = |t: &[f64]| -> Vec<Vec<bool>> {
        let mut out = Vec::new();
        for e in batch {
            let its = ref_inner_loop(spec, t, &e.support, alpha, steps);
            for it in &its {
                out.push(relu_pattern(spec, it, &e.support));
            }
            out.push(relu_pattern(spec, its.last().unwrap(), &e.target));
        }
        out
    };
    let base = patterns(theta);
    [-reach, reach].iter().all(|&d| patterns(&shifted(theta, coord, d)) == base)
}

/// `n` distinct coordinates drawn uniformly.
pub fn sample_coords(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, dim, n.min(dim)).into_vec()
}

/// Symmetric Hessian from one exact HVP per basis vector.
pub fn dense_hessian(dim: usize, mut hvp: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut h = vec![0.0; dim * dim];
    let mut e = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        let col = hvp(&e);
        e[j] = 0.0;
        for i in 0..dim {
            h[i * dim + j] = col[i];
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let m = 0.5 * (h[i * dim + j] + h[j * dim + i]);
            h[i * dim + j] = m;
            h[j * dim + i] = m;
        }
    }
    h
}

/// Largest |eigenvalue| of a dense symmetric matrix.
pub fn max_abs_eigenvalue(h: &[f64], dim: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(dim, dim, h);
    let eig = nalgebra::SymmetricEigen::new(m);
    eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
pub mod checks;
