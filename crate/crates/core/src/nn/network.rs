use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Gradients, Init, Layer, SoftmaxCrossEntropy};
use super::spec::{LayerSpec, NetworkSpec};
use super::{NnError, Result, Tensor};

/// Instantiated network: trainable layers followed by a softmax
/// cross-entropy head.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    head: SoftmaxCrossEntropy,
    classes: usize,
}

/// Loss, logits and per-layer parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub logits: Tensor,
    /// `params[i]` matches `layers()[i].params()`.
    pub params: Vec<Vec<Tensor>>,
    /// Gradient w.r.t. the network input, if requested.
    pub input: Option<Tensor>,
}

impl Network {
    /// Builds layers from `spec`, drawing weights per `init` from a stream
    /// seeded by `seed`. The network spec must end in a softmax-xent head.
    pub fn new(spec: &NetworkSpec, init: Init, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let (last, body) = spec.layers.split_last().ok_or_else(|| NnError::Spec("network has no layers".into()))?;
        let LayerSpec::SoftmaxXent { classes } = *last else {
            return Err(NnError::Spec("network must end with softmax-xent".into()));
        };
        if body.iter().any(|l| matches!(l, LayerSpec::SoftmaxXent { .. })) {
            return Err(NnError::Spec("softmax-xent must be the last layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = spec.input;
        let mut layers = Vec::with_capacity(body.len());
        for (l, out) in body.iter().zip(&shapes) {
            layers.push(Layer::from_spec(l, input, init, &mut rng)?);
            input = *out;
        }
        Ok(Self { spec: spec.clone(), layers, head: SoftmaxCrossEntropy::default(), classes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let i = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [i.c, i.h, i.w] {
            return Err(NnError::Shape(format!("network input: expected [N, {}, {}, {}], got {s:?}", i.c, i.h, i.w)));
        }
        Ok(())
    }

    /// Logits without caching.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_from(0, x)
    }

    /// Runs layers `start..` on `x` without caching. With `start = 1` this
    /// takes a precomputed first-layer output, such as a sensor capture.
    pub fn forward_from(&self, start: usize, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers[start..] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Softmax probabilities for a batch.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::layers::softmax(&self.infer(x)?))
    }

    /// Forward and backward pass for one labelled batch.
    pub fn gradients(&mut self, x: &Tensor, labels: &[usize], need_input: bool) -> Result<BatchGradients> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        let loss = self.head.forward(&h, labels)?;
        let mut grad = self.head.backward()?;
        let mut params = vec![Vec::new(); self.layers.len()];
        let mut input = None;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            // the first layer's input gradient is only needed on request
            let want = i > 0 || need_input;
            let Gradients { input: gi, params: gp } = layer.backward_with(&grad, want)?;
            params[i] = gp;
            match gi {
                Some(g) if i > 0 => grad = g,
                g => input = g,
            }
        }
        Ok(BatchGradients { loss, logits: h, params, input })
    }

    /// Copies every parameter tensor, in layer order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.params().into_iter().cloned()).collect()
    }

    /// Writes an `ASPM` checkpoint; layout in `docs/formats.md`.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let spec = serde_json::to_vec(&self.spec).map_err(|e| NnError::Spec(e.to_string()))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        out.write_all(&(spec.len() as u32).to_le_bytes())?;
        out.write_all(&spec)?;
        let params = self.parameters();
        out.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in &params {
            out.write_all(&[DTYPE_F64])?;
            out.write_all(&(p.shape().len() as u32).to_le_bytes())?;
            for d in p.shape() {
                out.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in p.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        let mut cur = Cursor { data: &data, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = cur.u32()? as usize;
        let spec: NetworkSpec =
            serde_json::from_slice(cur.take(len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut net = Network::new(&spec, Init::default(), 0)?;
        let count = cur.u32()? as usize;
        let mut slots: Vec<&mut Tensor> = net.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        if count != slots.len() {
            return Err(NnError::Checkpoint(format!("{count} tensors for {} parameters", slots.len())));
        }
        for slot in slots.iter_mut() {
            if cur.take(1)?[0] != DTYPE_F64 {
                return Err(NnError::Checkpoint("unsupported dtype".into()));
            }
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(NnError::Checkpoint(format!("shape {shape:?} != {:?}", slot.shape())));
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8)?;
            for (dst, c) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        if cur.pos != data.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ASPM";
const CHECKPOINT_VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.sample_len().max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
