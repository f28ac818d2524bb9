//! Central finite-difference check of the analytic gradient.

use rand::Rng;

use super::layer::Activation;
use super::network::{Network, NetworkBuilder, WeightedSample};
use crate::error::Result;
use crate::fingerprint::Label;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub params: usize,
    pub max_relative_error: f64,
    /// Parameter index with the worst error.
    pub worst: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients from dominating through rounding noise alone.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `loss_and_gradient` against `(L(w + eps) - L(w - eps)) / 2 eps`
/// for every parameter of `net`. With `eps = 1e-6` on an O(1) loss the
/// difference quotient carries roughly 1e-9 of rounding noise, hence the
/// floor of [`RELATIVE_ERROR_FLOOR`]; a larger `eps` instead risks stepping
/// across a ReLU or max-pool kink.
pub fn gradient_check(net: &Network, batch: &[WeightedSample<'_>], eps: f64) -> Result<GradCheck> {
    let (_, analytic) = net.loss_and_gradient(batch)?;
    let base = net.parameters();
    let mut probe = net.clone();
    let mut worst = (0.0, 0);
    let mut w = base.clone();
    for i in 0..base.len() {
        w[i] = base[i] + eps;
        probe.set_parameters(&w)?;
        let up = probe.loss_and_gradient(batch)?.0;
        w[i] = base[i] - eps;
        probe.set_parameters(&w)?;
        let down = probe.loss_and_gradient(batch)?.0;
        w[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        let e = relative_error(analytic[i], numeric, RELATIVE_ERROR_FLOOR);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheck {
        params: base.len(),
        max_relative_error: worst.0,
        worst: worst.1,
    })
}

fn any_activation(rng: &mut impl Rng) -> Activation {
    match rng.random_range(0..3) {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        _ => Activation::Sigmoid,
    }
}

/// A small random network (at most `max_params` parameters): either a dense
/// stack or a convolutional stack with optional pooling, always ending in two
/// sigmoid outputs. Every parameter, biases included, is redrawn from
/// U[-1, 1]; zero biases behind dead ReLUs would otherwise put units exactly
/// on the kink, where no derivative exists.
pub fn random_network(rng: &mut impl Rng, max_params: usize) -> Result<Network> {
    loop {
        // draw the architecture first; the builder holds the generator
        let net = if rng.random_bool(0.5) {
            let width = rng.random_range(2..10);
            let depth = rng.random_range(0..3);
            let hidden: Vec<(usize, Activation)> = (0..depth)
                .map(|_| (rng.random_range(2..8), any_activation(rng)))
                .collect();
            let mut b = NetworkBuilder::new("probe", width, rng);
            for (units, act) in hidden {
                b = b.dense(units).act(act);
            }
            b.dense(2).act(Activation::Sigmoid).build()?
        } else {
            let side = [4usize, 5, 6][rng.random_range(0..3)];
            let first = (rng.random_range(1..4), any_activation(rng));
            let pool = rng.random_bool(0.5);
            let second = rng
                .random_bool(0.5)
                .then(|| (rng.random_range(1..4), any_activation(rng)));
            let gap = rng.random_bool(0.5);
            let mut b = NetworkBuilder::new("probe", side * side, rng)
                .reshape(side)
                .conv(first.0)
                .act(first.1);
            if pool {
                b = b.maxpool();
            }
            if let Some((f, a)) = second {
                b = b.conv(f).act(a);
            }
            b = if gap {
                b.global_avg_pool()
            } else {
                b.flatten()
            };
            b.dense(2).act(Activation::Sigmoid).build()?
        };
        if net.param_count() <= max_params {
            let mut net = net;
            let p: Vec<f64> = (0..net.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            net.set_parameters(&p)?;
            return Ok(net);
        }
    }
}

/// Continuous uniform inputs, so max-pooling ties have probability zero.
pub fn random_batch(rng: &mut impl Rng, width: usize, n: usize) -> Vec<(Vec<f64>, Label)> {
    (0..n)
        .map(|_| {
            let x = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = if rng.random_bool(0.5) {
                Label::Benign
            } else {
                Label::Malware
            };
            (x, l)
        })
        .collect()
}
