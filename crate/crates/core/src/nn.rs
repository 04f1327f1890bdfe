//! Small dense networks with exact reverse-mode gradients and Adam.
//!
//! Parameters live in one flat vector (per layer: row-major `out×in` weights
//! followed by `out` biases) so the optimiser and checkpoints see a single
//! buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::{map_slice, Execution};

/// Floor applied inside the logarithms of the KL loss.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and its output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// The output is split into `steps` equal blocks, each passed through a
    /// softmax.
    StepSoftmax { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Mean of squared errors over all outputs.
    Mse,
    /// `Σ_steps KL(target ‖ output)`; requires a softmax head.
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    head: Head,
    params: Vec<f64>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(dims: &[usize], activation: Activation, head: Head) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(shape_err(format!("layer dims {dims:?} must have >= 2 positive entries")));
        }
        if let Head::StepSoftmax { steps } = head {
            let out = *dims.last().unwrap();
            if steps == 0 || out % steps != 0 {
                return Err(shape_err(format!("output width {out} is not divisible into {steps} steps")));
            }
        }
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { dims: dims.to_vec(), activation, head, params: vec![0.0; count] })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation, head)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameter vector.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape_err(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.params = params;
        Ok(())
    }

    /// Checks internal consistency after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::zeros(&self.dims, self.activation, self.head)?;
        if fresh.params.len() != self.params.len() {
            return Err(shape_err("parameter count does not match layer dims"));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite network parameter"));
        }
        Ok(())
    }

    /// Zeroes the first-layer weights reading the given input positions.
    pub fn zero_input_weights(&mut self, inputs: std::ops::Range<usize>) {
        let (fan_in, fan_out) = (self.dims[0], self.dims[1]);
        for o in 0..fan_out {
            for i in inputs.clone() {
                self.params[o * fan_in + i] = 0.0;
            }
        }
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.dims.windows(2).map(move |w| {
            let start = off;
            off += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.output)
    }

    /// Forward pass keeping every layer's pre-activation and output.
    fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(shape_err(format!("network expects {} inputs, got {}", self.input_dim(), input.len())));
        }
        let n_layers = self.dims.len() - 1;
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        outs.push(input.to_vec());
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let x = &outs[l];
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let pre: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o]
                })
                .collect();
            let out = if l + 1 < n_layers {
                pre.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                match self.head {
                    Head::Linear => pre.clone(),
                    Head::StepSoftmax { steps } => step_softmax(&pre, steps),
                }
            };
            pres.push(pre);
            outs.push(out);
        }
        let output = outs.pop().unwrap();
        Ok(Trace { outs, pres, output })
    }

    /// Loss value and its exact gradient with respect to every parameter.
    pub fn backward(&self, input: &[f64], target: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let value = self.backward_into(input, target, loss, &mut grad)?;
        Ok((value, grad))
    }

    /// Like [`Mlp::backward`] but adds the gradient into `grad`.
    pub fn backward_into(&self, input: &[f64], target: &[f64], loss: Loss, grad: &mut [f64]) -> Result<f64> {
        if target.len() != self.output_dim() {
            return Err(shape_err(format!("target has length {}, network outputs {}", target.len(), self.output_dim())));
        }
        if grad.len() != self.params.len() {
            return Err(shape_err("gradient buffer does not match parameter count"));
        }
        let trace = self.trace(input)?;
        let (value, mut delta) = self.output_delta(&trace, target, loss)?;

        let layers: Vec<(usize, usize, usize)> = self.layers().collect();
        for l in (0..layers.len()).rev() {
            let (off, fan_in, fan_out) = layers[l];
            let x = &trace.outs[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, &wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *p += d * wi;
                        }
                    }
                }
                for (i, p) in prev.iter_mut().enumerate() {
                    *p *= self.activation.derivative(trace.pres[l - 1][i], trace.outs[l][i]);
                }
                delta = prev;
            }
        }
        Ok(value)
    }

    /// Loss value and its derivative with respect to the last pre-activation.
    fn output_delta(&self, trace: &Trace, target: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
        let y = &trace.output;
        match loss {
            Loss::Mse => {
                let n = y.len() as f64;
                let value = y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
                let dy: Vec<f64> = y.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
                let delta = match self.head {
                    Head::Linear => dy,
                    Head::StepSoftmax { steps } => softmax_vjp(y, &dy, steps),
                };
                Ok((value, delta))
            }
            Loss::Kl => {
                let Head::StepSoftmax { steps } = self.head else {
                    return Err(Error::InvalidTarget("KL loss requires a softmax head".into()));
                };
                let width = y.len() / steps;
                validate_step_simplex(target, steps)?;
                let mut value = 0.0;
                let mut delta = vec![0.0; y.len()];
                for h in 0..steps {
                    let ys = &y[h * width..(h + 1) * width];
                    let ts = &target[h * width..(h + 1) * width];
                    // dL/dy_j = -t_j / y_j where the floor is inactive, else 0.
                    let mut active_mass = 0.0;
                    for (&t, &yy) in ts.iter().zip(ys) {
                        if t > 0.0 {
                            value += t * (t.max(KL_EPS).ln() - yy.max(KL_EPS).ln());
                        }
                        if yy > KL_EPS {
                            active_mass += t;
                        }
                    }
                    for k in 0..width {
                        let own = if ys[k] > KL_EPS { ts[k] } else { 0.0 };
                        delta[h * width + k] = ys[k] * active_mass - own;
                    }
                }
                Ok((value, delta))
            }
        }
    }

    /// Loss without the gradient.
    pub fn loss(&self, input: &[f64], target: &[f64], loss: Loss) -> Result<f64> {
        let y = self.forward(input)?;
        match loss {
            Loss::Mse => Ok(y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64),
            Loss::Kl => {
                let Head::StepSoftmax { steps } = self.head else {
                    return Err(Error::InvalidTarget("KL loss requires a softmax head".into()));
                };
                validate_step_simplex(target, steps)?;
                Ok(kl_divergence(target, &y))
            }
        }
    }
}

struct Trace {
    /// `outs[0]` is the input, `outs[l]` the output of hidden layer `l`.
    outs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// `Σ t ln(t / y)` with the [`KL_EPS`] floor inside both logarithms.
pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> f64 {
    target
        .iter()
        .zip(predicted)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &y)| t * (t.max(KL_EPS).ln() - y.max(KL_EPS).ln()))
        .sum()
}

fn validate_step_simplex(target: &[f64], steps: usize) -> Result<()> {
    let width = target.len() / steps;
    for h in 0..steps {
        let block = &target[h * width..(h + 1) * width];
        let sum: f64 = block.iter().sum();
        if block.iter().any(|&t| !t.is_finite() || t < -1e-9) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidTarget(format!("target step {h} is not on the simplex (sum {sum})")));
        }
    }
    Ok(())
}

pub fn step_softmax(logits: &[f64], steps: usize) -> Vec<f64> {
    let width = logits.len() / steps;
    let mut out = vec![0.0; logits.len()];
    for h in 0..steps {
        let block = &logits[h * width..(h + 1) * width];
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (k, &z) in block.iter().enumerate() {
            let e = (z - max).exp();
            out[h * width + k] = e;
            sum += e;
        }
        for v in &mut out[h * width..(h + 1) * width] {
            *v /= sum;
        }
    }
    out
}

fn softmax_vjp(y: &[f64], dy: &[f64], steps: usize) -> Vec<f64> {
    let width = y.len() / steps;
    let mut out = vec![0.0; y.len()];
    for h in 0..steps {
        let r = h * width..(h + 1) * width;
        let inner: f64 = y[r.clone()].iter().zip(&dy[r.clone()]).map(|(a, b)| a * b).sum();
        for k in r {
            out[k] = y[k] * (dy[k] - inner);
        }
    }
    out
}

/// Mean loss and mean gradient over a batch. Per-example gradients are
/// computed independently and summed in batch order.
pub fn batch_gradient(
    net: &Mlp,
    batch: &[(Vec<f64>, Vec<f64>)],
    loss: Loss,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let parts = map_slice(exec, batch, |(x, t)| net.backward(x, t, loss));
    let mut total = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for part in parts {
        let (v, g) = part?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "adam state holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(invalid("non-finite gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
