//! Central finite-difference checks of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{Layer, SoftmaxCrossEntropy};
use super::network::Network;
use super::{NnError, Result, Tensor};

/// Denominator floor for relative errors, so entries where both gradients
/// vanish do not divide by zero.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|a − n| / max(|a| + |n|, floor)` over all checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of compared entries (trainable parameters and inputs).
    pub checked: usize,
    /// Where the largest relative error occurred.
    pub worst: String,
    /// Largest analytic gradient magnitude on frozen parameters, if any.
    pub frozen_grad_max_abs: Option<f64>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: String::new(), frozen_grad_max_abs: None }
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, at: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (analytic.abs() + numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = at();
        }
    }

    fn record_frozen(&mut self, grads: &Tensor) {
        let m = grads.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.frozen_grad_max_abs = Some(self.frozen_grad_max_abs.map_or(m, |p| p.max(m)));
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NnError::Config(format!("epsilon {epsilon} must be positive")));
    }
    Ok(())
}

fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks one layer against the scalar loss `L = Σ r ⊙ layer(x)` with a
/// random weighting `r` drawn from `seed`. Every trainable parameter and
/// every input entry is perturbed by `±epsilon`.
pub fn check_layer(layer: &Layer, x: &Tensor, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let mut work = layer.clone();
    let out = work.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(out.shape(), |_| StandardNormal.sample(&mut rng));
    let grads = work.backward(&r)?;
    let mut report = GradCheckReport::new();
    let loss = |l: &Layer, input: &Tensor| -> Result<f64> { Ok(weighted_sum(&l.infer(input)?, &r)) };

    let gin = grads.input.as_ref().ok_or(NnError::NoForwardCache("input gradient"))?;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + epsilon;
        let up = loss(layer, &xp)?;
        xp.data_mut()[i] = v - epsilon;
        let down = loss(layer, &xp)?;
        xp.data_mut()[i] = v;
        report
            .record(gin.data()[i], (up - down) / (2.0 * epsilon), REL_FLOOR, || format!("{} input[{i}]", layer.name()));
    }

    let frozen = layer.is_frozen();
    let mut probe = layer.clone();
    for (p, g) in grads.params.iter().enumerate() {
        if frozen {
            report.record_frozen(g);
            continue;
        }
        for i in 0..g.len() {
            let v = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = v + epsilon;
            let up = loss(&probe, x)?;
            probe.params_mut()[p].data_mut()[i] = v - epsilon;
            let down = loss(&probe, x)?;
            probe.params_mut()[p].data_mut()[i] = v;
            report.record(g.data()[i], (up - down) / (2.0 * epsilon), REL_FLOOR, || {
                format!("{} param{p}[{i}]", layer.name())
            });
        }
    }
    Ok(report)
}

/// Checks a whole network under its mean cross-entropy loss, covering every
/// trainable parameter and the input.
pub fn check_network(net: &Network, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let mut work = net.clone();
    let grads = work.gradients(x, labels, true)?;
    let mut report = GradCheckReport::new();
    let loss =
        |n: &Network, input: &Tensor| -> Result<f64> { Ok(SoftmaxCrossEntropy::evaluate(&n.infer(input)?, labels)?.0) };

    let gin = grads.input.as_ref().ok_or(NnError::NoForwardCache("input gradient"))?;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + epsilon;
        let up = loss(net, &xp)?;
        xp.data_mut()[i] = v - epsilon;
        let down = loss(net, &xp)?;
        xp.data_mut()[i] = v;
        report.record(gin.data()[i], (up - down) / (2.0 * epsilon), REL_FLOOR, || format!("input[{i}]"));
    }

    let mut probe = net.clone();
    for (li, layer_grads) in grads.params.iter().enumerate() {
        let frozen = net.layers()[li].is_frozen();
        for (p, g) in layer_grads.iter().enumerate() {
            if frozen {
                report.record_frozen(g);
                continue;
            }
            for i in 0..g.len() {
                let v = probe.layers()[li].params()[p].data()[i];
                probe.layers_mut()[li].params_mut()[p].data_mut()[i] = v + epsilon;
                let up = loss(&probe, x)?;
                probe.layers_mut()[li].params_mut()[p].data_mut()[i] = v - epsilon;
                let down = loss(&probe, x)?;
                probe.layers_mut()[li].params_mut()[p].data_mut()[i] = v;
                report.record(g.data()[i], (up - down) / (2.0 * epsilon), REL_FLOOR, || {
                    format!("layer{li} {} param{p}[{i}]", net.layers()[li].name())
                });
            }
        }
    }
    Ok(report)
}

/// Checks the softmax cross-entropy gradient w.r.t. the logits.
pub fn check_softmax_xent(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let mut head = SoftmaxCrossEntropy::default();
    head.forward(logits, labels)?;
    let g = head.backward()?;
    let mut report = GradCheckReport::new();
    let mut lp = logits.clone();
    for i in 0..logits.len() {
        let v = logits.data()[i];
        lp.data_mut()[i] = v + epsilon;
        let up = SoftmaxCrossEntropy::evaluate(&lp, labels)?.0;
        lp.data_mut()[i] = v - epsilon;
        let down = SoftmaxCrossEntropy::evaluate(&lp, labels)?.0;
        lp.data_mut()[i] = v;
        report.record(g.data()[i], (up - down) / (2.0 * epsilon), REL_FLOOR, || format!("logit[{i}]"));
    }
    Ok(report)
}
