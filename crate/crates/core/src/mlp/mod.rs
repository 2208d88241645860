//! Feedforward classifier: dense ReLU hidden layers, softmax output,
//! categorical cross-entropy, Adam and early stopping.

mod adam;
mod model;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{Model, MODEL_FORMAT_VERSION};
pub use train::{train, Example, History, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability fed to `ln` by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            hidden_layers,
            output_dim,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 2 → 128 → 64 → 32 → 16 → 7, for single reads.
    pub fn single_point(seed: u64) -> Self {
        NetworkSpec {
            input_dim: 2,
            hidden_layers: vec![128, 64, 32, 16],
            output_dim: 7,
            seed,
        }
    }

    /// 4 → 128 → 64 → 32 → 7, for one-second window statistics.
    pub fn one_second(seed: u64) -> Self {
        NetworkSpec {
            input_dim: 4,
            hidden_layers: vec![128, 64, 32],
            output_dim: 7,
            seed,
        }
    }

    /// 5 → 32 → 16 → 32 → 4, for window statistics plus distance.
    pub fn with_distance(seed: u64) -> Self {
        NetworkSpec {
            input_dim: 5,
            hidden_layers: vec![32, 16, 32],
            output_dim: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::domain("every layer width must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_layers.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_layers);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Σ (fan_in + 1) · fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// One fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.biases))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Dense>,
}

impl Network {
    /// He-uniform weights (bound `√(6 / fan_in)`) and zero biases, seeded by `spec.seed`.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                layer
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Ok(Network { spec, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn from_parts(spec: NetworkSpec, layers: Vec<Dense>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let ok = shapes.len() == layers.len()
            && shapes.iter().zip(&layers).all(|(&(i, o), l)| {
                l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.biases.len() == o
            });
        if !ok {
            return Err(Error::domain("layer shapes do not match the network spec"));
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::domain(format!(
                "network expects {} inputs, got {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.spec.output_dim {
            return Err(Error::domain(format!(
                "label {label} out of range for {} outputs",
                self.spec.output_dim
            )));
        }
        Ok(())
    }

    /// Runs the layers, leaving pre-activations and activations in `ws`.
    fn run(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.act.split_at_mut(l + 1);
            let input: &[f64] = if l == 0 { x } else { &before[l] };
            let z = &mut ws.pre[l];
            layer.affine(input, z);
            let a = &mut after[0];
            if l == last {
                a.copy_from_slice(z);
            } else {
                for (a, z) in a.iter_mut().zip(z.iter()) {
                    *a = z.max(0.0);
                }
            }
        }
    }

    /// Output-layer pre-activations.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.run(x, &mut ws);
        Ok(ws.pre.pop().expect("at least one layer"))
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Cross-entropy of one example, via log-sum-exp on the logits.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(cross_entropy_from_logits(&self.logits(x)?, label))
    }

    /// Loss and parameter gradients for one example.
    pub fn backward(&self, x: &[f64], label: usize) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut grads = Gradients::zeros_like(self);
        let mut ws = Workspace::new(self);
        let loss = self.accumulate_gradients(x, label, &mut grads, &mut ws);
        Ok((loss, grads))
    }

    /// Adds this example's gradients into `grads` and returns its loss.
    /// Inputs must already be checked.
    pub(crate) fn accumulate_gradients(&self, x: &[f64], label: usize, grads: &mut Gradients, ws: &mut Workspace) -> f64 {
        self.run(x, ws);
        let depth = self.layers.len();
        let logits = &ws.pre[depth - 1];
        let loss = cross_entropy_from_logits(logits, label);

        let mut delta = softmax(logits);
        delta[label] -= 1.0;
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let input: &[f64] = if l == 0 { x } else { &ws.act[l] };
            let g = &mut grads.layers[l];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] += d;
                if *d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
            }
            if l > 0 {
                let z_prev = &ws.pre[l - 1];
                let mut next = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                // ReLU subgradient at 0 is 0
                for (n, z) in next.iter_mut().zip(z_prev) {
                    if *z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        loss
    }

    /// Argmax class (lowest index wins ties) and the probability vector.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let p = self.forward(x)?;
        Ok((argmax(&p), p))
    }
}

/// Per-layer scratch buffers for one forward/backward pass.
pub(crate) struct Workspace {
    pre: Vec<Vec<f64>>,
    /// `act[0]` is unused; `act[l + 1]` is the output of layer `l`.
    act: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(net: &Network) -> Self {
        let pre: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let mut act = vec![Vec::new()];
        act.extend(pre.iter().cloned());
        Workspace { pre, act }
    }
}

/// Gradients shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// Same ordering as [`Network::parameters`].
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|g| *g *= k);
    }

    pub(crate) fn clear(&mut self) {
        self.values_mut().for_each(|g| *g = 0.0);
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−ln p[label]`, with `p[label]` floored at [`PROB_FLOOR`].
pub fn cross_entropy(pred: &[f64], label: usize) -> f64 {
    -pred[label].max(PROB_FLOOR).ln()
}

/// `logsumexp(z) − z[label]`.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (lse - logits[label]).max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
