use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Init;
use super::network::{argmax_rows, Network};
use super::spec::NetworkSpec;
use super::{NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            weight_decay: 0.0,
            init: Init::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !self.init.is_valid() {
            return Err(NnError::Config(format!("invalid weight init {:?}", self.init)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(NnError::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Inputs `[N, C, H, W]` with one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 4 || inputs.batch() != labels.len() {
            return Err(NnError::Shape(format!("{:?} inputs for {} labels", inputs.shape(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed samples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Samples {
        let per = self.inputs.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Samples {
            inputs: Tensor::new(shape, data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on training batches as they were seen.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// SGD with momentum: `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        let velocity = net.layers().iter().map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect()).collect();
        Self { learning_rate: cfg.learning_rate, momentum: cfg.momentum, weight_decay: cfg.weight_decay, velocity }
    }

    /// Applies one update; frozen layers are left untouched.
    pub fn step(&mut self, net: &mut Network, grads: &[Vec<Tensor>]) {
        for ((layer, lg), lv) in net.layers_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if layer.is_frozen() {
                continue;
            }
            for ((p, g), v) in layer.params_mut().into_iter().zip(lg).zip(lv) {
                for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi - self.learning_rate * (gi + self.weight_decay * *w);
                    *w += *vi;
                }
            }
        }
    }
}

/// Trains a freshly initialized network on `data`.
///
/// Initialization and shuffling draw from separate streams derived from
/// `cfg.seed`, so equal seeds give bit-identical weights. A non-finite
/// batch loss aborts with [`NnError::Diverged`].
pub fn train(
    spec: &NetworkSpec,
    data: &Samples,
    cfg: &TrainConfig,
    validation: Option<&Samples>,
) -> Result<(Network, Vec<EpochStats>)> {
    cfg.validate()?;
    let net = Network::new(spec, cfg.init, cfg.seed)?;
    train_network(net, data, cfg, validation)
}

/// Continues training an existing network.
pub fn train_network(
    mut net: Network,
    data: &Samples,
    cfg: &TrainConfig,
    validation: Option<&Samples>,
) -> Result<(Network, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::Config("training set is empty".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= net.classes()) {
        return Err(NnError::Config(format!("label {bad} out of range for {} classes", net.classes())));
    }
    let mut opt = Sgd::new(&net, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.gather(idx);
            let g = net.gradients(&batch.inputs, &batch.labels, false)?;
            if !g.loss.is_finite() {
                return Err(NnError::Diverged { epoch, batch: b, loss: g.loss });
            }
            loss_sum += g.loss;
            batches += 1;
            correct += argmax_rows(&g.logits).iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            opt.step(&mut net, &g.params);
        }
        let val_accuracy = validation.map(|v| evaluate(&net, v)).transpose()?;
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            val_accuracy,
        });
    }
    Ok((net, history))
}

const EVAL_BATCH: usize = 500;

/// Fraction of samples whose highest logit (lowest index on ties) matches
/// the label.
pub fn evaluate(net: &Network, data: &Samples) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(predict(net, &data.inputs)?.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// Predicted class per sample.
pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.batch();
    let per = inputs.sample_len();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = inputs.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())?;
        out.extend(argmax_rows(&net.infer(&chunk)?));
    }
    Ok(out)
}

/// History as CSV: `epoch,loss,train_acc,val_acc`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,train_acc,val_acc\n");
    for h in history {
        let val = h.val_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{:.6},{}\n", h.epoch, h.loss, h.train_accuracy, val));
    }
    s
}
