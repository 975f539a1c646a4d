//! Dense feed-forward Q-value approximator over a flat parameter vector.
//!
//! Parameters are flattened in a fixed canonical order: layer by layer,
//! each layer's weight matrix row-major (one row per output unit), then
//! that layer's biases. Hidden layers use ReLU, the output layer is
//! affine. All arithmetic is `f64`.

use crate::error::{Error, Result};
use crate::vecmath;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes of a dense network: input dim, hidden dims, action count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
}

impl NetworkSpec {
    /// Builds a spec from layer sizes. Needs at least two layers (input
    /// and output) and every size must be positive.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least two layers, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of outputs, one Q-value per action.
    pub fn num_actions(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total trainable parameter count: sum of `(fan_in + 1) * fan_out`
    /// over consecutive layer pairs (weights plus biases).
    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Flat vector of all trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn all_finite(&self) -> bool {
        vecmath::all_finite(&self.0)
    }

    /// `self + c * other` as a new vector.
    pub fn add_scaled(&self, c: f64, other: &ParamVector) -> ParamVector {
        ParamVector(vecmath::add_scaled(&self.0, c, &other.0))
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(vecmath::sub(&self.0, &other.0))
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        vecmath::dot(&self.0, &other.0)
    }

    pub fn norm2(&self) -> f64 {
        vecmath::norm2(&self.0)
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Deterministic weight initialization: per-layer weights uniform in
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, biases zero. Identical
/// `(spec, seed)` always produces the identical vector.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(spec.num_params());
    for pair in spec.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let u: f64 = rng.gen();
            w.push(-bound + 2.0 * bound * u);
        }
        // biases
        w.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector(w)
}

fn check_dims(spec: &NetworkSpec, w: &ParamVector, features: &[f64]) -> Result<()> {
    let n = spec.num_params();
    if w.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.len(),
        });
    }
    if features.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: features.len(),
        });
    }
    Ok(())
}

/// Forward pass: affine + ReLU per hidden layer, affine output. Returns
/// one Q-value per action.
pub fn forward(spec: &NetworkSpec, w: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    check_dims(spec, w, features)?;
    let sizes = spec.layer_sizes();
    let last = sizes.len() - 2; // index of the output layer pair
    let mut activation = features.to_vec();
    let mut offset = 0;
    for (l, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weights = &w[offset..offset + fan_in * fan_out];
        let biases = &w[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let mut next = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let z = vecmath::dot(row, &activation) + biases[o];
            next.push(if l < last { z.max(0.0) } else { z });
        }
        activation = next;
        offset += (fan_in + 1) * fan_out;
    }
    Ok(activation)
}

/// Gradient of `Q(features, action; w)` with respect to every parameter,
/// by reverse-mode accumulation through the stored forward pass. The ReLU
/// subgradient at exactly zero is taken to be zero.
pub fn grad_q(
    spec: &NetworkSpec,
    w: &ParamVector,
    features: &[f64],
    action: usize,
) -> Result<ParamVector> {
    check_dims(spec, w, features)?;
    if action >= spec.num_actions() {
        return Err(Error::InvalidInput(format!(
            "action index {action} out of range (num_actions = {})",
            spec.num_actions()
        )));
    }
    let sizes = spec.layer_sizes();
    let num_layers = sizes.len() - 1;
    let last = num_layers - 1;

    // Forward pass, keeping per-layer inputs and pre-activations.
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    let mut offsets = Vec::with_capacity(num_layers);
    let mut activation = features.to_vec();
    let mut offset = 0;
    for (l, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        offsets.push(offset);
        let weights = &w[offset..offset + fan_in * fan_out];
        let biases = &w[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let mut z = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            z.push(vecmath::dot(row, &activation) + biases[o]);
        }
        inputs.push(activation);
        activation = if l < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        preacts.push(z);
        offset += (fan_in + 1) * fan_out;
    }

    // Backward pass seeded with the selected output unit.
    let mut grad = vec![0.0; spec.num_params()];
    let mut delta = vec![0.0; spec.num_actions()];
    delta[action] = 1.0;
    for l in (0..num_layers).rev() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let off = offsets[l];
        let input = &inputs[l];
        for o in 0..fan_out {
            let d = delta[o];
            if d != 0.0 {
                let wrow = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for i in 0..fan_in {
                    wrow[i] = d * input[i];
                }
            }
            grad[off + fan_in * fan_out + o] = d;
        }
        if l > 0 {
            let weights = &w[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        prev[i] += d * row[i];
                    }
                }
            }
            // Gate through the ReLU of the previous layer (derivative 0 at z == 0).
            for (i, p) in prev.iter_mut().enumerate() {
                if preacts[l - 1][i] <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok(ParamVector(grad))
}
