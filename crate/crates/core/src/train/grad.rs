//! Closed-form per-example losses and gradients.

use crate::error::{Error, Result};
use crate::head::{AggregationMap, LearnedHead, MoSHead};
use crate::kernels::{log_sum_exp, Metric};

/// Gradient of the MoS loss, laid out like [`MoSHead::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoSGrad {
    pub proj: Vec<f64>,
    pub bias: Vec<f64>,
    pub prior: Vec<f64>,
    /// Present only when the output embedding is trained.
    pub output: Option<Vec<f64>>,
}

impl MoSGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.proj.len() + 2 * self.bias.len());
        out.extend_from_slice(&self.proj);
        out.extend_from_slice(&self.bias);
        out.extend_from_slice(&self.prior);
        if let Some(o) = &self.output {
            out.extend_from_slice(o);
        }
        out
    }
}

/// Row weights `q = softmax(s / tau)` and `P_y = (M q)_y`, plus `ln P_y`
/// computed stably.
struct HeadPass {
    q: Vec<f64>,
    /// `M[y, i]` for every row.
    m_y: Vec<f64>,
    p_y: f64,
    log_p_y: f64,
}

fn head_pass(emb: &[f64], dim: usize, map: &AggregationMap, metric: Metric, h: &[f64], y: usize, tau: f64) -> HeadPass {
    let s: Vec<f64> = emb.chunks_exact(dim).map(|e| metric.score(e, h)).collect();
    let lse = log_sum_exp(&s, tau);
    let q: Vec<f64> = s.iter().map(|x| (x / tau - lse).exp()).collect();
    let mut one_hot = vec![0.0; map.vocab_size()];
    one_hot[y] = 1.0;
    let m_y = map.pull_back(&one_hot);
    // ln sum_{i: M[y,i] > 0} M[y,i] exp(s_i / tau) - lse
    let owned: Vec<f64> = s
        .iter()
        .zip(&m_y)
        .map(|(x, m)| if *m > 0.0 { x / tau + m.ln() } else { f64::NEG_INFINITY })
        .collect();
    let log_p_y = log_sum_exp(&owned, 1.0) - lse;
    let p_y = q.iter().zip(&m_y).map(|(a, b)| a * b).sum();
    HeadPass { q, m_y, p_y, log_p_y }
}

/// Adds `coef[i] * d s_i / d e_i` to `grad` for every row.
fn accumulate_rows(grad: &mut [f64], emb: &[f64], dim: usize, metric: Metric, h: &[f64], coef: &[f64], tau: f64) {
    for ((g, e), c) in grad.chunks_exact_mut(dim).zip(emb.chunks_exact(dim)).zip(coef) {
        let c = c / tau;
        match metric {
            Metric::Ip => {
                for (gj, hj) in g.iter_mut().zip(h) {
                    *gj += c * hj;
                }
            }
            Metric::L2 => {
                for ((gj, ej), hj) in g.iter_mut().zip(e).zip(h) {
                    *gj += c * -2.0 * (ej - hj);
                }
            }
        }
    }
}

fn check_example(head_dim: usize, vocab: usize, h: &[f64], y: usize) -> Result<()> {
    if h.len() != head_dim {
        return Err(Error::shape("training feature", head_dim, h.len()));
    }
    if y >= vocab {
        return Err(Error::input(format!("target {y} outside vocabulary of size {vocab}")));
    }
    Ok(())
}

pub(crate) fn learned_loss_grad_raw(
    emb: &[f64],
    dim: usize,
    map: &AggregationMap,
    metric: Metric,
    h: &[f64],
    y: usize,
    tau: f64,
    grad: &mut [f64],
) -> f64 {
    let pass = head_pass(emb, dim, map, metric, h, y, tau);
    // dL/ds_i = q_i (1 - M[y,i] / P_y)
    let coef: Vec<f64> = pass
        .q
        .iter()
        .zip(&pass.m_y)
        .map(|(q, m)| q - q * m / pass.p_y)
        .collect();
    accumulate_rows(grad, emb, dim, metric, h, &coef, tau);
    -pass.log_p_y
}

pub(crate) fn interpolated_loss_grad_raw(
    emb: &[f64],
    dim: usize,
    map: &AggregationMap,
    metric: Metric,
    h: &[f64],
    y: usize,
    p_lm_y: f64,
    lambda: f64,
    tau: f64,
    grad: &mut [f64],
) -> f64 {
    let pass = head_pass(emb, dim, map, metric, h, y, tau);
    let p = (1.0 - lambda) * p_lm_y + lambda * pass.p_y;
    // dL/ds_i = -(lambda / P) q_i (M[y,i] - P_head,y)
    let coef: Vec<f64> = pass
        .q
        .iter()
        .zip(&pass.m_y)
        .map(|(q, m)| -(lambda / p) * q * (m - pass.p_y))
        .collect();
    accumulate_rows(grad, emb, dim, metric, h, &coef, tau);
    if lambda == 1.0 {
        -pass.log_p_y
    } else {
        -p.ln()
    }
}

/// Cross-entropy `-ln P_head(y | h)` of a learned head and its gradient with
/// respect to the embeddings (same layout).
pub fn learned_head_loss_grad(head: &LearnedHead, h: &[f64], y: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_example(head.dim(), head.vocab_size(), h, y)?;
    let mut grad = vec![0.0; head.embeddings().len()];
    let loss = learned_loss_grad_raw(head.embeddings(), head.dim(), head.map(), head.metric(), h, y, tau, &mut grad);
    Ok((loss, grad))
}

/// `-ln((1 - lambda) p_lm_y + lambda P_head(y | h))` with the base-model
/// probability held fixed; gradient with respect to the head embeddings.
pub fn interpolated_loss_grad(
    head: &LearnedHead,
    h: &[f64],
    y: usize,
    p_lm_y: f64,
    lambda: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_example(head.dim(), head.vocab_size(), h, y)?;
    crate::kernels::check_lambda(lambda)?;
    let mut grad = vec![0.0; head.embeddings().len()];
    let loss = interpolated_loss_grad_raw(
        head.embeddings(),
        head.dim(),
        head.map(),
        head.metric(),
        h,
        y,
        p_lm_y,
        lambda,
        tau,
        &mut grad,
    );
    Ok((loss, grad))
}

/// `-ln sum_r pi_r p_r[y]` and its gradient; the output embedding's gradient
/// is included when `with_output` is set.
pub fn mos_loss_grad(head: &MoSHead, h: &[f64], y: usize, with_output: bool) -> Result<(f64, MoSGrad)> {
    check_example(head.dim(), head.vocab_size(), h, y)?;
    let f = head.forward(h)?;
    let d = head.dim();
    let r_count = head.components();
    let mut grad = MoSGrad {
        proj: vec![0.0; r_count * d * d],
        bias: vec![0.0; r_count * d],
        prior: vec![0.0; r_count * d],
        output: with_output.then(|| vec![0.0; head.vocab_size() * d]),
    };
    let p = f.mixture[y];
    let out = head.output();
    for r in 0..r_count {
        let pi = f.priors[r];
        let pr_y = f.components[r][y];
        // prior logits: dL/da_r = -pi_r (p_r[y] - P) / P
        let da = -pi * (pr_y - p) / p;
        for (g, x) in grad.prior[r * d..(r + 1) * d].iter_mut().zip(h) {
            *g += da * x;
        }
        // posterior-weighted softmax gradient on the component logits
        let w = pi * pr_y / p;
        let g_logits: Vec<f64> = f.components[r]
            .iter()
            .enumerate()
            .map(|(v, pv)| w * (pv - if v == y { 1.0 } else { 0.0 }))
            .collect();
        let mut dz = vec![0.0; d];
        for (gv, e) in g_logits.iter().zip(out.chunks_exact(d)) {
            for (dzj, ej) in dz.iter_mut().zip(e) {
                *dzj += gv * ej;
            }
        }
        if let Some(go) = grad.output.as_mut() {
            for (gv, row) in g_logits.iter().zip(go.chunks_exact_mut(d)) {
                for (gj, zj) in row.iter_mut().zip(&f.projected[r]) {
                    *gj += gv * zj;
                }
            }
        }
        let proj = &mut grad.proj[r * d * d..(r + 1) * d * d];
        for (row, dzi) in proj.chunks_exact_mut(d).zip(&dz) {
            for (g, x) in row.iter_mut().zip(h) {
                *g += dzi * x;
            }
        }
        for (g, dzi) in grad.bias[r * d..(r + 1) * d].iter_mut().zip(&dz) {
            *g += dzi;
        }
    }
    let loss = -p.ln();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::OutputEmbedding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let eps = 1e-6 * x[i].abs().max(1.0);
        let mut up = x.to_vec();
        up[i] += eps;
        let mut down = x.to_vec();
        down[i] -= eps;
        (f(&up) - f(&down)) / (2.0 * eps)
    }

    fn random_head(rng: &mut ChaCha8Rng, v: usize, d: usize, metric: Metric) -> LearnedHead {
        let alloc: Vec<usize> = (0..v).map(|_| rng.random_range(1..3)).collect();
        let n: usize = alloc.iter().sum();
        let emb: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = LearnedHead::from_allocation(d, alloc, emb).unwrap();
        LearnedHead::new(d, h.embeddings().to_vec(), h.map().clone(), h.allocation().to_vec(), metric).unwrap()
    }

    #[test]
    fn learned_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let metric = if trial % 2 == 0 { Metric::Ip } else { Metric::L2 };
            let head = random_head(&mut rng, 5, 3, metric);
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..5);
            let tau = rng.random_range(0.5..2.0);
            let (_, g) = learned_head_loss_grad(&head, &h, y, tau).unwrap();
            let loss = |e: &[f64]| {
                let hd = head.with_embeddings(e.to_vec()).unwrap();
                learned_head_loss_grad(&hd, &h, y, tau).unwrap().0
            };
            for i in 0..g.len() {
                let num = fd(loss, head.embeddings(), i);
                assert!(rel_err(g[i], num) < 1e-4 || (g[i] - num).abs() < 1e-8, "{} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn interpolated_gradient_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = random_head(&mut rng, 4, 3, Metric::Ip);
        let h = [0.3, -0.2, 0.9];
        let (_, g) = interpolated_loss_grad(&head, &h, 2, 0.3, 0.4, 1.0).unwrap();
        let loss = |e: &[f64]| {
            let hd = head.with_embeddings(e.to_vec()).unwrap();
            interpolated_loss_grad(&hd, &h, 2, 0.3, 0.4, 1.0).unwrap().0
        };
        for i in 0..g.len() {
            let num = fd(loss, head.embeddings(), i);
            assert!(rel_err(g[i], num) < 1e-4 || (g[i] - num).abs() < 1e-8);
        }
        let (l0, g0) = interpolated_loss_grad(&head, &h, 2, 0.3, 0.0, 1.0).unwrap();
        assert!(g0.iter().all(|x| *x == 0.0));
        assert_eq!(l0, -(0.3f64).ln());
        let (l1, g1) = interpolated_loss_grad(&head, &h, 2, 0.3, 1.0, 1.0).unwrap();
        let (ls, gs) = learned_head_loss_grad(&head, &h, 2, 1.0).unwrap();
        assert_eq!(l1, ls);
        for (a, b) in g1.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mos_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let (v, d, r) = (6, 3, 1 + trial % 3);
            let w = OutputEmbedding::new(v, d, (0..v * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let head = MoSHead::new(
                &w,
                r,
                (0..r * d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..r * d).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..v);
            let with_output = trial % 2 == 1;
            let (_, g) = mos_loss_grad(&head, &h, y, with_output).unwrap();
            let g = g.flatten();
            let x = head.parameters(with_output);
            assert_eq!(g.len(), x.len());
            let loss = |p: &[f64]| {
                let hd = head.with_parameters(p, with_output).unwrap();
                mos_loss_grad(&hd, &h, y, false).unwrap().0
            };
            for i in 0..g.len() {
                let num = fd(loss, &x, i);
                assert!(rel_err(g[i], num) < 1e-4 || (g[i] - num).abs() < 1e-8, "{i}: {} vs {num}", g[i]);
            }
        }
    }
}
