//! Feed-forward Q-network: rectifier hidden layers, linear output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written into every model file.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QModel {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    /// Per layer, `outputs x inputs` in row-major order.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub step_counter: u64,
}

/// Gradient of a scalar loss with the same shape as a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &QModel) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Flattened view in the same order as [`QModel::param`].
    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

/// One regression sample: push `Q(state)[action]` towards `target`.
#[derive(Clone, Debug)]
pub struct QTarget<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub target: f64,
}

impl QModel {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output layer");
        let pairs = layer_sizes.windows(2);
        QModel {
            version: MODEL_FORMAT_VERSION,
            layer_sizes: layer_sizes.to_vec(),
            weights: pairs.clone().map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: pairs.map(|p| vec![0.0; p[1]]).collect(),
            step_counter: 0,
        }
    }

    /// He-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Self {
        let mut model = QModel::zeros(layer_sizes);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let limit = (6.0 / layer_sizes[l] as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.gen_range(-limit..limit);
            }
        }
        model
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, bool, usize) {
        for l in 0..self.weights.len() {
            if i < self.weights[l].len() {
                return (l, true, i);
            }
            i -= self.weights[l].len();
            if i < self.biases[l].len() {
                return (l, false, i);
            }
            i -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flattened order: layer 0 weights, layer 0 biases, ...
    pub fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (l, true, k) => self.weights[l][k],
            (l, false, k) => self.biases[l][k],
        }
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        match self.locate(i) {
            (l, true, k) => self.weights[l][k] = value,
            (l, false, k) => self.biases[l][k] = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|x| x.is_finite())
    }

    /// Activations of every layer, input first.
    fn trace(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for l in 0..layers {
            let n_in = self.layer_sizes[l];
            let prev = &acts[l];
            let out: Vec<f64> = self.weights[l]
                .chunks_exact(n_in)
                .zip(&self.biases[l])
                .map(|(row, b)| {
                    let z = row.iter().zip(prev).fold(*b, |acc, (w, x)| acc + w * x);
                    if l + 1 < layers {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.pop().unwrap())
    }

    /// Loss `1/(2B) * sum (Q(s_i)[a_i] - y_i)^2` and its gradient.
    pub fn loss_and_grad(&self, samples: &[QTarget<'_>]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let scale = 1.0 / samples.len().max(1) as f64;
        let layers = self.weights.len();
        let mut loss = 0.0;
        for sample in samples {
            if sample.action >= self.output_dim() {
                return Err(Error::Dimension {
                    expected: self.output_dim(),
                    found: sample.action,
                });
            }
            let acts = self.trace(sample.state)?;
            let err = acts[layers][sample.action] - sample.target;
            loss += 0.5 * err * err * scale;

            let mut delta = vec![0.0; self.output_dim()];
            delta[sample.action] = err * scale;
            for l in (0..layers).rev() {
                let n_in = self.layer_sizes[l];
                let input = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    grads.biases[l][o] += d;
                    let row = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
                if l == 0 {
                    break;
                }
                let mut next = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                // Rectifier derivative, taken as 0 at the kink.
                for (n, a) in next.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, samples: &[QTarget<'_>]) -> Result<f64> {
        let scale = 1.0 / samples.len().max(1) as f64;
        let mut loss = 0.0;
        for s in samples {
            let q = self.forward(s.state)?;
            let err = q[s.action] - s.target;
            loss += 0.5 * err * err * scale;
        }
        Ok(loss)
    }
}

/// Serialises a model to its versioned JSON container.
pub fn serialize_model(model: &QModel) -> Vec<u8> {
    serde_json::to_vec(model).expect("model serialisation cannot fail")
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn deserialize_model(bytes: &[u8]) -> Result<QModel> {
    let probe: VersionProbe =
        serde_json::from_slice(bytes).map_err(|e| Error::ModelLoad(format!("malformed model file: {e}")))?;
    if probe.version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelVersion {
            expected: MODEL_FORMAT_VERSION,
            found: probe.version,
        });
    }
    let model: QModel =
        serde_json::from_slice(bytes).map_err(|e| Error::ModelLoad(format!("malformed model file: {e}")))?;
    validate_shape(&model)?;
    Ok(model)
}

fn validate_shape(model: &QModel) -> Result<()> {
    let sizes = &model.layer_sizes;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::ModelLoad(format!("invalid layer sizes {sizes:?}")));
    }
    let layers = sizes.len() - 1;
    if model.weights.len() != layers || model.biases.len() != layers {
        return Err(Error::ModelLoad(format!(
            "expected {layers} weight and bias arrays, found {} and {}",
            model.weights.len(),
            model.biases.len()
        )));
    }
    for l in 0..layers {
        let expected = sizes[l] * sizes[l + 1];
        if model.weights[l].len() != expected {
            return Err(Error::ModelLoad(format!(
                "layer {l}: expected {expected} weights, found {}",
                model.weights[l].len()
            )));
        }
        if model.biases[l].len() != sizes[l + 1] {
            return Err(Error::ModelLoad(format!(
                "layer {l}: expected {} biases, found {}",
                sizes[l + 1],
                model.biases[l].len()
            )));
        }
    }
    if !model.is_finite() {
        return Err(Error::ModelLoad("non-finite parameter".into()));
    }
    Ok(())
}
