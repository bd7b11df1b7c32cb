//! Finite-difference verification of the analytic gradients.
//!
//! The check lifts the network into an `f64` shadow copy, runs the same
//! generic forward/backward code there, and compares every parameter's
//! analytic gradient against central differences. Perturbing a parameter in
//! layer `l` only affects layers `l..`, so each probe re-runs the forward
//! pass from the cached input of that layer.

use super::loss::{cross_entropy, cross_entropy_grad, mse, mse_grad};
use super::tensor::{Tensor, TensorF};
use super::{Network, NnError};

/// Loss under which gradients are checked.
pub enum LossSpec<'a> {
    Mse(&'a TensorF),
    CrossEntropy(&'a [usize]),
}

enum Loss64 {
    Mse(Tensor<f64>),
    CrossEntropy(Vec<usize>),
}

impl Loss64 {
    fn value(&self, output: &Tensor<f64>) -> Result<f64, NnError> {
        match self {
            Loss64::Mse(target) => mse(output, target),
            Loss64::CrossEntropy(labels) => cross_entropy(output, labels),
        }
    }

    fn grad(&self, output: &Tensor<f64>) -> Result<Tensor<f64>, NnError> {
        match self {
            Loss64::Mse(target) => mse_grad(output, target),
            Loss64::CrossEntropy(labels) => cross_entropy_grad(output, labels),
        }
    }
}

/// Hard cap on the number of parameters the checker will probe.
pub const FD_PARAM_LIMIT: usize = 200_000;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `entry[index]` of the worst parameter.
    pub worst_entry: String,
    pub parameter_count: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks every parameter's analytic gradient against central finite
/// differences with the default step.
pub fn check_gradients(
    network: &Network<f32>,
    input: &TensorF,
    loss: LossSpec,
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    check_gradients_with_step(network, input, loss, tolerance, DEFAULT_FD_STEP)
}

/// As [`check_gradients`] with an explicit finite-difference step.
pub fn check_gradients_with_step(
    network: &Network<f32>,
    input: &TensorF,
    loss: LossSpec,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport, NnError> {
    let parameter_count = network.parameter_count();
    if parameter_count > FD_PARAM_LIMIT {
        return Err(NnError::TooLarge {
            params: parameter_count,
            limit: FD_PARAM_LIMIT,
        });
    }
    let net = network.cast::<f64>();
    let input = input.cast::<f64>();
    let loss = match loss {
        LossSpec::Mse(target) => Loss64::Mse(target.cast()),
        LossSpec::CrossEntropy(labels) => Loss64::CrossEntropy(labels.to_vec()),
    };
    let depth = net.train_depth();
    let (output, cache) = net.forward_cached(&input, depth)?;
    let grad_out = loss.grad(&output)?;
    let analytic = net.backward(&cache, &grad_out, depth)?;
    let (max_rel_error, worst_entry) = fd_max_rel_error(&net, &cache, &loss, &analytic, step)?;
    Ok(GradCheckReport {
        max_rel_error,
        worst_entry,
        parameter_count,
        tolerance,
    })
}

/// Central-difference sweep over every parameter; returns the worst relative
/// error `|a - n| / max(|a|, |n|, 1e-8)` and the parameter it occurred at.
fn fd_max_rel_error(
    network: &Network<f64>,
    cache: &[Tensor<f64>],
    loss: &Loss64,
    analytic: &[Tensor<f64>],
    step: f64,
) -> Result<(f64, String), NnError> {
    let depth = cache.len();
    let mut net = network.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (entry_idx, entry_grads) in analytic.iter().enumerate() {
        let layer = net.entry_layer(entry_idx);
        let start = &cache[layer];
        for i in 0..entry_grads.numel() {
            let orig = net.entries()[entry_idx].tensor.data()[i];
            net.entries_mut()[entry_idx].tensor.data_mut()[i] = orig + step;
            let plus = loss.value(&net.forward_range(layer, depth, start.clone())?)?;
            net.entries_mut()[entry_idx].tensor.data_mut()[i] = orig - step;
            let minus = loss.value(&net.forward_range(layer, depth, start.clone())?)?;
            net.entries_mut()[entry_idx].tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = entry_grads.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{i}]", net.entries()[entry_idx].name);
            }
        }
    }
    Ok((max_rel, worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(net: &mut Network<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in net.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = rng.random::<f32>() * 0.6 - 0.3;
            }
        }
    }

    fn three_layer_net(seed: u64) -> Network<f32> {
        let mut net = Network::new(
            vec![
                LayerSpec::new("conv", LayerKind::Conv1d { in_channels: 2, out_channels: 3, kernel: 3 }),
                LayerSpec::new("relu", LayerKind::ReLU),
                LayerSpec::new("pool", LayerKind::MaxPool1d { window: 2 }),
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new("lin", LayerKind::Linear { inputs: 12, outputs: 4 }),
            ],
            vec![2, 10],
        )
        .unwrap();
        randomize(&mut net, seed);
        net
    }

    fn random_input(shape: Vec<usize>, seed: u64) -> TensorF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn three_layer_network_passes_at_spec_step() {
        let net = three_layer_net(9);
        let input = random_input(vec![1, 2, 10], 10);
        let target = random_input(vec![1, 4], 11);
        let report =
            check_gradients(&net, &input, LossSpec::Mse(&target), 1e-4).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn identity_linear_network_is_exact_to_roundoff() {
        let mut net = Network::new(
            vec![LayerSpec::new("lin", LayerKind::Linear { inputs: 3, outputs: 3 })],
            vec![3],
        )
        .unwrap();
        for (i, v) in net.entries_mut()[0].tensor.data_mut().iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let input = random_input(vec![1, 3], 5);
        let target = random_input(vec![1, 3], 6);
        let report = check_gradients(&net, &input, LossSpec::Mse(&target), 1e-9).unwrap();
        assert!(
            report.max_rel_error < 1e-10,
            "quadratic loss should differentiate exactly, got {}",
            report.max_rel_error
        );
    }

    #[test]
    fn cross_entropy_path_passes() {
        let mut net = Network::new(
            vec![
                LayerSpec::new("lin1", LayerKind::Linear { inputs: 6, outputs: 8 }),
                LayerSpec::new("relu", LayerKind::ReLU),
                LayerSpec::new("lin2", LayerKind::Linear { inputs: 8, outputs: 3 }),
                LayerSpec::new("softmax", LayerKind::Softmax),
            ],
            vec![6],
        )
        .unwrap();
        randomize(&mut net, 21);
        let input = random_input(vec![2, 6], 22);
        let report =
            check_gradients(&net, &input, LossSpec::CrossEntropy(&[0, 2]), 1e-4).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_reported_as_failure() {
        let net = three_layer_net(33).cast::<f64>();
        let input = random_input(vec![1, 2, 10], 34).cast::<f64>();
        let target = random_input(vec![1, 4], 35).cast::<f64>();
        let loss = Loss64::Mse(target);
        let depth = net.train_depth();
        let (output, cache) = net.forward_cached(&input, depth).unwrap();
        let grad_out = loss.grad(&output).unwrap();
        let mut grads = net.backward(&cache, &grad_out, depth).unwrap();
        let (clean, _) = fd_max_rel_error(&net, &cache, &loss, &grads, DEFAULT_FD_STEP).unwrap();
        assert!(clean < 1e-4, "baseline should be clean, got {clean}");
        // Double one weight gradient: the sweep must notice.
        let v = grads[0].data()[0];
        grads[0].data_mut()[0] = v * 2.0;
        let (bad, worst) = fd_max_rel_error(&net, &cache, &loss, &grads, DEFAULT_FD_STEP).unwrap();
        assert!(bad > 0.3, "corruption went unnoticed: {bad} at {worst}");
        assert!(worst.starts_with("conv.weight"), "{worst}");
    }

    #[test]
    fn oversized_network_is_refused() {
        let net = Network::<f32>::new(
            vec![LayerSpec::new("lin", LayerKind::Linear { inputs: 600, outputs: 600 })],
            vec![600],
        )
        .unwrap();
        let input = random_input(vec![1, 600], 1);
        let target = random_input(vec![1, 600], 2);
        assert!(matches!(
            check_gradients(&net, &input, LossSpec::Mse(&target), 1e-3),
            Err(NnError::TooLarge { .. })
        ));
    }
}
