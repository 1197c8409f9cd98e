#![allow(dead_code)]

use bbl_core::tinynet::{loss_and_logit_grad, Activation, Dense, LossKind, Network};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `n` draws of a standard bivariate Gaussian with correlation `rho`, as two
/// single-column matrices.
pub fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x[[i, 0]] = a;
        y[[i, 0]] = rho * a + s * b;
    }
    (x, y)
}

/// `-ln(1 - rho^2) / 2`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the ±h probe crossed a ReLU kink.
    pub kinks: usize,
}

const ACTIVATIONS: [Activation; 4] = [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Elu];

fn loss_at(net: &Network, x: &Array2<f64>, t: &[usize], loss: LossKind) -> f64 {
    let acts = net.forward(x.view()).unwrap();
    loss_and_logit_grad(acts.output().view(), t, None, loss).unwrap().0
}

fn relu_signs(net: &Network, x: &Array2<f64>) -> Vec<bool> {
    let acts = net.forward(x.view()).unwrap();
    net.layers
        .iter()
        .zip(&acts.pre)
        .filter(|(l, _)| l.activation == Activation::Relu)
        .flat_map(|(_, pre)| pre.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// turning round-off into large ratios.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random network (1–3 layers, widths 1–5, any activation per layer), random
/// batch and loss; parameters and inputs uniform in `[-1, 1]`. Compares the
/// analytic parameter and input gradients with central differences.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        widths.push(rng.random_range(1..=5));
    }
    *widths.last_mut().unwrap() = rng.random_range(2..=4);
    let layers: Vec<Dense> = widths
        .windows(2)
        .map(|w| Dense {
            weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-1.0..1.0)),
            activation: ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())],
        })
        .collect();
    let mut net = Network::from_layers(layers).unwrap();
    let batch = rng.random_range(1..=4);
    let classes = *widths.last().unwrap();
    let x = Array2::from_shape_fn((batch, widths[0]), |_| rng.random_range(-1.0..1.0));
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let loss = if rng.random_bool(0.5) {
        LossKind::SoftmaxCrossEntropy
    } else {
        LossKind::GeneralizedCrossEntropy { q: rng.random_range(0.1..1.0) }
    };

    let acts = net.forward(x.view()).unwrap();
    let (_, g) = loss_and_logit_grad(acts.output().view(), &t, None, loss).unwrap();
    let (grads, grad_x) = net.backward(&acts, g.view()).unwrap();

    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, kinks: 0 };
    let mut record = |analytic: f64, plus: f64, minus: f64, crossed: bool| {
        if crossed {
            out.kinks += 1;
            return;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        out.max_rel_error = out.max_rel_error.max(rel_error(analytic, numeric));
        out.checked += 1;
    };

    for li in 0..net.layers.len() {
        let (rows, cols) = net.layers[li].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = net.layers[li].weights[[i, j]];
                net.layers[li].weights[[i, j]] = orig + FD_STEP;
                let (lp, sp) = (loss_at(&net, &x, &t, loss), relu_signs(&net, &x));
                net.layers[li].weights[[i, j]] = orig - FD_STEP;
                let (lm, sm) = (loss_at(&net, &x, &t, loss), relu_signs(&net, &x));
                net.layers[li].weights[[i, j]] = orig;
                record(grads.layers[li].0[[i, j]], lp, lm, sp != sm);
            }
        }
        for j in 0..cols {
            let orig = net.layers[li].bias[j];
            net.layers[li].bias[j] = orig + FD_STEP;
            let (lp, sp) = (loss_at(&net, &x, &t, loss), relu_signs(&net, &x));
            net.layers[li].bias[j] = orig - FD_STEP;
            let (lm, sm) = (loss_at(&net, &x, &t, loss), relu_signs(&net, &x));
            net.layers[li].bias[j] = orig;
            record(grads.layers[li].1[j], lp, lm, sp != sm);
        }
    }
    let mut xp = x.clone();
    for r in 0..batch {
        for c in 0..widths[0] {
            let orig = x[[r, c]];
            xp[[r, c]] = orig + FD_STEP;
            let (lp, sp) = (loss_at(&net, &xp, &t, loss), relu_signs(&net, &xp));
            xp[[r, c]] = orig - FD_STEP;
            let (lm, sm) = (loss_at(&net, &xp, &t, loss), relu_signs(&net, &xp));
            xp[[r, c]] = orig;
            record(grad_x[[r, c]], lp, lm, sp != sm);
        }
    }
    out
}
