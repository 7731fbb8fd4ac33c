//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry: `param[i]` or `input[i]` and flat index.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter and input gradients of `loss(net(inputs))`
/// against central differences with step `h`.
///
/// `loss` returns the scalar loss and its gradient with respect to every
/// network output. At most `per_tensor` entries of each tensor are probed,
/// chosen with `seed`. Every evaluation runs on a fresh clone of `net`, so
/// dropout masks and batch statistics are identical across probes.
///
/// The denominator floor is `1e-6 * max(1, |loss|)`: rounding noise in the
/// difference quotient grows with the loss value, so gradients that are
/// exactly zero (a bias feeding batch normalization) are compared on that
/// scale instead of against noise.
pub fn finite_diff_check<F>(
    net: &Network<f64>,
    inputs: &[Tensor<f64>],
    loss: F,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
{
    if !(h > 0.0) || per_tensor == 0 {
        return param_err("step and probe count must be positive");
    }
    let mut analytic_net = net.clone();
    analytic_net.zero_grad();
    let out = analytic_net.forward(inputs)?;
    let (base, gout) = loss(&out);
    let floor = REL_FLOOR * base.abs().max(1.0);
    let input_grads = analytic_net.backward(&gout.into_iter().map(Some).collect::<Vec<_>>())?;
    let param_grads: Vec<Vec<f64>> = analytic_net.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let eval = |net: Network<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut net = net;
        let out = net.forward(inputs)?;
        Ok(loss(&out).0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let record = |report: &mut GradCheckReport, a: f64, n: f64, what: String, idx: usize| {
        let e = relative_error(a, n, floor);
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((what, idx));
        }
    };

    for (pi, grads) in param_grads.iter().enumerate() {
        let len = grads.len();
        for idx in sample(&mut rng, len, per_tensor.min(len)).into_iter() {
            let probe = |delta: f64| -> Result<f64> {
                let mut n = net.clone();
                {
                    let mut ps = n.params_mut();
                    ps[pi].value.data_mut()[idx] += delta;
                }
                eval(n, inputs)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            record(&mut report, grads[idx], numeric, format!("param[{pi}]"), idx);
        }
    }
    for (ii, g) in input_grads.iter().enumerate() {
        let len = g.len();
        for idx in sample(&mut rng, len, per_tensor.min(len)).into_iter() {
            let probe = |delta: f64| -> Result<f64> {
                let mut xs = inputs.to_vec();
                xs[ii].data_mut()[idx] += delta;
                eval(net.clone(), &xs)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            record(&mut report, g.data()[idx], numeric, format!("input[{ii}]"), idx);
        }
    }
    Ok(report)
}
