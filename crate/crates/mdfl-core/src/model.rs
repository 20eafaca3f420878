//! Dense classifier, loss/gradient computation, Adam, and weight algebra.
//!
//! The model is a multilayer perceptron over flattened sensor windows with a
//! softmax head and categorical cross-entropy loss. Weights live in a single
//! flat `f64` vector (layer by layer, row-major weight matrix then bias) so
//! that aggregation and the proximal personalization term are plain vector
//! arithmetic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fx;
use crate::rng;

/// Loss clamp: predicted probabilities below this are clamped before the log
/// so a confident miss yields a large finite loss instead of infinity.
pub const PROB_CLAMP: f64 = 1e-12;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Network architecture: `input_dim -> hidden... -> num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_layers,
            num_classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if let Some(pos) = self.hidden_layers.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!(
                "hidden layer {pos} has size 0; sizes must be >= 1"
            )));
        }
        Ok(())
    }

    /// Layer widths including input and output: `[input, hidden..., classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.num_classes);
        dims
    }

    /// Total number of parameters (weights + biases).
    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector tied to its architecture.
///
/// Houses both the shared global model and the per-device personal models;
/// the two are never mixed, aggregation only ever consumes client copies of
/// the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    arch: ArchSpec,
    params: Vec<f64>,
}

impl ModelWeights {
    /// Wrap an existing parameter vector, checking length and finiteness.
    pub fn new(arch: ArchSpec, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, architecture implies {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("parameter vector contains non-finite entries".into()));
        }
        Ok(Self { arch, params })
    }

    /// All-zero weights (useful for tests and as an accumulator).
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            arch,
            params: vec![0.0; n],
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Serialized size used for transfer-time accounting: 8 bytes per `f64`.
    pub fn byte_size(&self) -> usize {
        self.params.len() * 8
    }

    /// Euclidean distance between two parameter vectors of the same shape.
    pub fn l2_distance(&self, other: &ModelWeights) -> Result<f64> {
        if self.arch != other.arch {
            return Err(Error::Shape("architectures differ".into()));
        }
        let sq: f64 = self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(fx::sqrt(sq))
    }
}

/// Adam state paired with a parameter vector of the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Fresh Adam state with the usual constants (beta1 0.9, beta2 0.999,
    /// epsilon 1e-8).
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Mini-batch of flattened windows plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    /// `inputs` is row-major `[len × input_dim]`.
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::Shape(format!(
                "inputs length {} does not equal {} rows x {input_dim} features",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Row-major `[rows × classes]` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    data: Vec<f64>,
    rows: usize,
    classes: usize,
}

impl Probabilities {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Predicted class per row (ties resolved to the lowest class id).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Deterministic weight initialization.
///
/// Per layer, weights are uniform in `[-s, s]` with
/// `s = sqrt(6 / (fan_in + fan_out))`; biases start at zero. The draw order
/// is fixed (layers in order, weight matrix row-major), so the result is a
/// pure function of `(arch, seed)`.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<ModelWeights> {
    arch.validate()?;
    let dims = arch.layer_dims();
    let mut params = Vec::with_capacity(arch.param_count());
    let mut r = rng::rng_from(rng::mix(seed, &[streams::INIT]));
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = fx::sqrt(6.0 / (fan_in + fan_out) as f64);
        for _ in 0..fan_in * fan_out {
            params.push(r.gen_range(-s..=s));
        }
        params.extend(core::iter::repeat(0.0).take(fan_out));
    }
    ModelWeights::new(arch.clone(), params)
}

/// Stream tags keeping this module's RNG streams disjoint from other modules'.
mod streams {
    pub const INIT: u64 = 0x4d44_464c_0001;
}

struct ForwardCache {
    /// Activations per layer, `activations[0]` is the input batch.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values for hidden layers (for the activation derivative).
    pre_activations: Vec<Vec<f64>>,
    probs: Probabilities,
}

fn layer_offsets(arch: &ArchSpec) -> Vec<(usize, usize, usize, usize)> {
    // (weight_offset, bias_offset, fan_in, fan_out) per layer
    let dims = arch.layer_dims();
    let mut out = Vec::with_capacity(dims.len() - 1);
    let mut off = 0;
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        out.push((off, off + fan_in * fan_out, fan_in, fan_out));
        off += fan_in * fan_out + fan_out;
    }
    out
}

fn forward_cached(m: &ModelWeights, b: &Batch) -> Result<ForwardCache> {
    if b.input_dim() != m.arch.input_dim {
        return Err(Error::Shape(format!(
            "batch input_dim {} does not match model input_dim {}",
            b.input_dim(),
            m.arch.input_dim
        )));
    }
    let rows = b.len();
    let layers = layer_offsets(&m.arch);
    let n_layers = layers.len();
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    activations.push(b.inputs.clone());
    let mut pre_activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers.saturating_sub(1));

    for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
        let prev = &activations[l];
        let mut z = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let x = &prev[r * fan_in..(r + 1) * fan_in];
            let zr = &mut z[r * fan_out..(r + 1) * fan_out];
            for (o, zo) in zr.iter_mut().enumerate() {
                let row_w = &m.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut acc = m.params[b_off + o];
                for (xi, wi) in x.iter().zip(row_w) {
                    acc += xi * wi;
                }
                *zo = acc;
            }
        }
        let is_output = l == n_layers - 1;
        if is_output {
            // Softmax with max subtraction for stability.
            let mut probs = z;
            for r in 0..rows {
                let row = &mut probs[r * fan_out..(r + 1) * fan_out];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = fx::exp(*v - max);
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            return Ok(ForwardCache {
                activations,
                pre_activations,
                probs: Probabilities {
                    data: probs,
                    rows,
                    classes: fan_out,
                },
            });
        }
        let mut a = z.clone();
        for v in a.iter_mut() {
            *v = match m.arch.activation {
                Activation::Relu => {
                    if *v > 0.0 {
                        *v
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => fx::tanh(*v),
            };
        }
        pre_activations.push(z);
        activations.push(a);
    }
    unreachable!("architectures always have at least one layer");
}

/// Class probabilities for every row of the batch. Rows are softmax outputs:
/// non-negative and summing to one. An empty batch yields an empty matrix.
pub fn forward(m: &ModelWeights, b: &Batch) -> Result<Probabilities> {
    if b.is_empty() {
        if b.input_dim() != m.arch.input_dim {
            return Err(Error::Shape(format!(
                "batch input_dim {} does not match model input_dim {}",
                b.input_dim(),
                m.arch.input_dim
            )));
        }
        return Ok(Probabilities {
            data: Vec::new(),
            rows: 0,
            classes: m.arch.num_classes,
        });
    }
    Ok(forward_cached(m, b)?.probs)
}

/// Mean cross-entropy loss, per-sample losses, and the gradient of the mean
/// loss with respect to the flat parameter vector.
///
/// The per-sample loss is `-ln(p_label)` with the probability clamped at
/// [`PROB_CLAMP`]; the reported mean is the arithmetic mean of the per-sample
/// values. The per-sample losses of the model a client receives feed its
/// statistical utility for the next round.
pub fn loss_and_grads(m: &ModelWeights, b: &Batch) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if b.is_empty() {
        return Err(Error::Domain("loss_and_grads requires a non-empty batch".into()));
    }
    if let Some(&bad) = b.labels().iter().find(|&&l| l >= m.arch.num_classes) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {} classes",
            m.arch.num_classes
        )));
    }
    let cache = forward_cached(m, b)?;
    let rows = b.len();
    let classes = m.arch.num_classes;

    let mut per_sample = Vec::with_capacity(rows);
    for (r, &label) in b.labels().iter().enumerate() {
        let p = cache.probs.row(r)[label].max(PROB_CLAMP);
        per_sample.push(-fx::ln(p));
    }
    let mean_loss = per_sample.iter().sum::<f64>() / rows as f64;

    // Backprop of the mean loss. delta starts as (p - onehot)/rows at the
    // softmax layer.
    let layers = layer_offsets(&m.arch);
    let n_layers = layers.len();
    let mut grads = vec![0.0; m.params.len()];
    let mut delta: Vec<f64> = cache.probs.data.clone();
    for (r, &label) in b.labels().iter().enumerate() {
        delta[r * classes + label] -= 1.0;
    }
    let inv_rows = 1.0 / rows as f64;
    for v in delta.iter_mut() {
        *v *= inv_rows;
    }

    for l in (0..n_layers).rev() {
        let (w_off, b_off, fan_in, fan_out) = layers[l];
        let prev = &cache.activations[l];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            let x = &prev[r * fan_in..(r + 1) * fan_in];
            for (o, &dv) in d.iter().enumerate() {
                let g_row = &mut grads[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (gi, xi) in g_row.iter_mut().zip(x) {
                    *gi += dv * xi;
                }
                grads[b_off + o] += dv;
            }
        }
        if l == 0 {
            break;
        }
        // delta for the previous layer: (W^T d) * act'(z)
        let z_prev = &cache.pre_activations[l - 1];
        let mut new_delta = vec![0.0; rows * fan_in];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            let nd = &mut new_delta[r * fan_in..(r + 1) * fan_in];
            for (o, &dv) in d.iter().enumerate() {
                let row_w = &m.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (ndi, wi) in nd.iter_mut().zip(row_w) {
                    *ndi += dv * wi;
                }
            }
            let z = &z_prev[r * fan_in..(r + 1) * fan_in];
            for (ndi, &zi) in nd.iter_mut().zip(z) {
                *ndi *= match m.arch.activation {
                    Activation::Relu => {
                        if zi > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => {
                        let t = fx::tanh(zi);
                        1.0 - t * t
                    }
                };
            }
        }
        delta = new_delta;
    }

    Ok((mean_loss, per_sample, grads))
}

/// One Adam step with bias correction. Consumes and returns the state and
/// weights so callers can thread them through a training loop.
pub fn optimizer_step(
    mut state: OptimizerState,
    mut m: ModelWeights,
    grads: &[f64],
) -> Result<(OptimizerState, ModelWeights)> {
    if grads.len() != m.params.len() || state.first_moment.len() != m.params.len() {
        return Err(Error::Shape(format!(
            "gradient length {} / moment length {} do not match parameter length {}",
            grads.len(),
            state.first_moment.len(),
            m.params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let bc1 = 1.0 - fx::pow(state.beta1, t as f64);
    let bc2 = 1.0 - fx::pow(state.beta2, t as f64);
    for i in 0..grads.len() {
        let g = grads[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        m.params[i] -= state.lr * m_hat / (fx::sqrt(v_hat) + state.epsilon);
    }
    Ok((state, m))
}

/// Sample-count-weighted average of client weights: `sum_i (n_i / n) w_i`.
///
/// Entries are summed in the order given; the simulator always passes them in
/// ascending device order, which makes the aggregate bit-reproducible. A
/// single entry is returned unchanged (exact identity).
pub fn weighted_average(entries: &[(ModelWeights, u64)]) -> Result<ModelWeights> {
    let Some(first) = entries.first() else {
        return Err(Error::Domain("weighted_average requires at least one entry".into()));
    };
    if entries.iter().any(|(_, n)| *n == 0) {
        return Err(Error::Domain("weighted_average counts must be positive".into()));
    }
    if entries.iter().any(|(w, _)| w.arch != first.0.arch) {
        return Err(Error::Shape("weighted_average entries have differing architectures".into()));
    }
    // Identical inputs aggregate to themselves exactly; coefficients that
    // only sum to 1 up to rounding would otherwise perturb the last ulp.
    if entries.len() == 1 || entries[1..].iter().all(|(w, _)| w.params == first.0.params) {
        return Ok(first.0.clone());
    }
    let total: u64 = entries.iter().map(|(_, n)| n).sum();
    let mut acc = vec![0.0; first.0.params.len()];
    for (w, n) in entries {
        let coef = *n as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(&w.params) {
            *a += coef * p;
        }
    }
    ModelWeights::new(first.0.arch.clone(), acc)
}

/// Proximal gradient for personalization: `grads + lambda * (v - w)`.
///
/// With `lambda == 0` the input gradient is returned bit-for-bit.
pub fn prox_grad(
    grads: &[f64],
    v: &ModelWeights,
    w: &ModelWeights,
    lambda: f64,
) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    if grads.len() != v.params.len() || v.params.len() != w.params.len() {
        return Err(Error::Shape(format!(
            "prox_grad lengths disagree: grads {}, v {}, w {}",
            grads.len(),
            v.params.len(),
            w.params.len()
        )));
    }
    if lambda == 0.0 {
        return Ok(grads.to_vec());
    }
    Ok(grads
        .iter()
        .zip(v.params.iter().zip(&w.params))
        .map(|(g, (vi, wi))| g + lambda * (vi - wi))
        .collect())
}

/// Convenience: label-aware batch from feature rows.
pub fn batch_from_rows(rows: &[(&[f64], usize)], input_dim: usize) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(rows.len() * input_dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (features, label) in rows {
        if features.len() != input_dim {
            return Err(Error::Shape(format!(
                "feature row has length {}, expected {input_dim}",
                features.len()
            )));
        }
        inputs.extend_from_slice(features);
        labels.push(*label);
    }
    Batch::new(inputs, labels, input_dim)
}

/// Debug label for shape errors in messages.
pub fn describe_arch(arch: &ArchSpec) -> String {
    format!(
        "[{} -> {:?} -> {}]",
        arch.input_dim, arch.hidden_layers, arch.num_classes
    )
}
