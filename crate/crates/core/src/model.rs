//! A small dense classifier: `input -> ReLU hidden layer -> softmax`, trained
//! with cross-entropy. With `hidden_dim == 0` the hidden layer disappears and
//! the model is plain multinomial logistic regression.
//!
//! Parameters live in one flat vector in canonical order:
//!
//! ```text
//! W1 (hidden x input, row-major) | b1 (hidden) | W2 (classes x hidden, row-major) | b2 (classes)
//! ```
//!
//! For `hidden_dim == 0` only `W2 (classes x input)` and `b2` are present.
//! Gradients share the same layout.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelLayout {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
}

impl ModelLayout {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("layout", "input_dim must be at least 1"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("layout", "num_classes must be at least 2"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width of the layer feeding the output layer.
    fn penultimate(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.input_dim * self.hidden_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.num_classes * self.penultimate();
        Offsets {
            b1,
            w2,
            b2,
            end: b2 + self.num_classes,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().end
    }

    /// Multiply-accumulate operations of one forward pass.
    pub fn macs(&self) -> u64 {
        let (d, h, c) = (
            self.input_dim as u64,
            self.hidden_dim as u64,
            self.num_classes as u64,
        );
        if h == 0 {
            d * c
        } else {
            d * h + h * c
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ModelLayout,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: ModelLayout) -> Self {
        Self {
            layout,
            weights: vec![0.0; layout.num_params()],
        }
    }

    pub fn from_weights(layout: ModelLayout, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layout.num_params() {
            return Err(Error::invalid(
                "params",
                format!(
                    "expected {} weights, got {}",
                    layout.num_params(),
                    weights.len()
                ),
            ));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid(
                "params",
                format!("weight {i} is not finite"),
            ));
        }
        Ok(Self { layout, weights })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(layout: ModelLayout, seed: u64) -> Self {
        let mut rng = rng::rng(seed, &[rng::stream::INIT]);
        let mut params = Self::zeros(layout);
        let off = layout.offsets();
        if layout.hidden_dim > 0 {
            let bound = 1.0 / (layout.input_dim as f64).sqrt();
            for w in &mut params.weights[..off.b1] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        let bound = 1.0 / (layout.penultimate() as f64).sqrt();
        for w in &mut params.weights[off.w2..off.b2] {
            *w = rng.random_range(-bound..=bound);
        }
        params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable view of the flat weights; used by optimizers and tests.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Row `class` of the output-layer weight matrix.
    pub fn output_row_mut(&mut self, class: usize) -> &mut [f64] {
        let off = self.layout.offsets();
        let width = self.layout.penultimate();
        let start = off.w2 + class * width;
        &mut self.weights[start..start + width]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let off = self.layout.offsets();
        &mut self.weights[off.b2..off.end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(layout: &ModelLayout) -> Self {
        Self {
            values: vec![0.0; layout.num_params()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn output_bias(&self, layout: &ModelLayout) -> &[f64] {
        let off = layout.offsets();
        &self.values[off.b2..off.end]
    }

    fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One labeled example borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

/// Reusable buffers for the forward/backward pass.
#[derive(Debug, Clone)]
pub struct Scratch {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    delta_hidden: Vec<f64>,
}

impl Scratch {
    pub fn new(layout: &ModelLayout) -> Self {
        Self {
            hidden: vec![0.0; layout.hidden_dim],
            probs: vec![0.0; layout.num_classes],
            delta_hidden: vec![0.0; layout.hidden_dim],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_input(layout: &ModelLayout, x: &[f64]) -> Result<()> {
    if x.len() != layout.input_dim {
        return Err(Error::InputShape {
            expected: layout.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

fn check_label(layout: &ModelLayout, y: usize) -> Result<()> {
    if y >= layout.num_classes {
        return Err(Error::Label {
            label: y,
            num_classes: layout.num_classes,
        });
    }
    Ok(())
}

/// Forward pass into `scratch`; probabilities end up in `scratch.probs`.
/// Hidden activations are kept (post-ReLU) for the backward pass.
fn forward_into(params: &ModelParams, x: &[f64], scratch: &mut Scratch) {
    let layout = &params.layout;
    let off = layout.offsets();
    let w = &params.weights;

    let input: &[f64] = if layout.hidden_dim > 0 {
        let d = layout.input_dim;
        for (j, h) in scratch.hidden.iter_mut().enumerate() {
            let row = &w[j * d..(j + 1) * d];
            let z = w[off.b1 + j] + dot(row, x);
            *h = z.max(0.0);
        }
        &scratch.hidden
    } else {
        x
    };

    let width = input.len();
    let mut max = f64::NEG_INFINITY;
    for (c, p) in scratch.probs.iter_mut().enumerate() {
        let row = &w[off.w2 + c * width..off.w2 + (c + 1) * width];
        *p = w[off.b2 + c] + dot(row, input);
        max = max.max(*p);
    }
    let mut sum = 0.0;
    for p in scratch.probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in scratch.probs.iter_mut() {
        *p /= sum;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[inline]
fn loss_from_probs(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(f64::MIN_POSITIVE).ln()
}

/// Forward pass and backward pass of one sample. Adds `scale * dloss/dtheta`
/// to `grad` and returns the sample's loss at `params`.
fn accumulate_sample(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    scale: f64,
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> f64 {
    forward_into(params, x, scratch);
    let loss = loss_from_probs(&scratch.probs, y);

    let layout = &params.layout;
    let off = layout.offsets();
    let w = &params.weights;

    // dL/dlogits = p - onehot(y); reuse the probability buffer.
    scratch.probs[y] -= 1.0;
    let delta_out = &scratch.probs;

    let input: &[f64] = if layout.hidden_dim > 0 {
        &scratch.hidden
    } else {
        x
    };
    let width = input.len();
    for (c, &dc) in delta_out.iter().enumerate() {
        let g = scale * dc;
        grad[off.b2 + c] += g;
        let grow = &mut grad[off.w2 + c * width..off.w2 + (c + 1) * width];
        for (gw, &a) in grow.iter_mut().zip(input) {
            *gw += g * a;
        }
    }

    if layout.hidden_dim > 0 {
        let d = layout.input_dim;
        for (j, dh) in scratch.delta_hidden.iter_mut().enumerate() {
            // ReLU derivative is taken as 0 at the kink.
            if scratch.hidden[j] > 0.0 {
                let mut s = 0.0;
                for (c, &dc) in delta_out.iter().enumerate() {
                    s += w[off.w2 + c * width + j] * dc;
                }
                *dh = s;
            } else {
                *dh = 0.0;
            }
        }
        for (j, &dh) in scratch.delta_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            let g = scale * dh;
            grad[off.b1 + j] += g;
            for (gw, &xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
    }
    loss
}

/// Class probabilities for `x`.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(&params.layout, x)?;
    let mut scratch = Scratch::new(&params.layout);
    forward_into(params, x, &mut scratch);
    Ok(scratch.probs)
}

/// Cross-entropy `-ln p_y` of one sample.
pub fn sample_loss(params: &ModelParams, x: &[f64], y: usize) -> Result<f64> {
    check_label(&params.layout, y)?;
    let probs = forward(params, x)?;
    Ok(loss_from_probs(&probs, y))
}

/// Loss and predicted class (lowest index wins argmax ties) of one sample.
pub(crate) fn loss_and_prediction(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    scratch: &mut Scratch,
) -> (f64, usize) {
    forward_into(params, x, scratch);
    let probs = &scratch.probs;
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = c;
        }
    }
    (loss_from_probs(probs, y), best)
}

/// Gradient of the mean cross-entropy over `batch`, plus the mean loss.
pub fn batch_grad(params: &ModelParams, batch: &[Sample<'_>]) -> Result<(Gradient, f64)> {
    let mut grad = Gradient::zeros(&params.layout);
    let mut scratch = Scratch::new(&params.layout);
    let mean = batch_grad_into(
        params,
        batch.iter().copied(),
        &mut grad,
        &mut scratch,
        |_, _| {},
    )?;
    Ok((grad, mean))
}

/// Allocation-free form of [`batch_grad`].
///
/// `grad` is overwritten. `on_loss(position, loss)` receives every sample's
/// loss, evaluated at the same (pre-update) parameters as the gradient.
pub fn batch_grad_into<'a, I, F>(
    params: &ModelParams,
    batch: I,
    grad: &mut Gradient,
    scratch: &mut Scratch,
    mut on_loss: F,
) -> Result<f64>
where
    I: IntoIterator<Item = Sample<'a>>,
    I::IntoIter: ExactSizeIterator,
    F: FnMut(usize, f64),
{
    let batch = batch.into_iter();
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    grad.clear();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (pos, s) in batch.enumerate() {
        check_input(&params.layout, s.x)?;
        check_label(&params.layout, s.y)?;
        let loss = accumulate_sample(params, s.x, s.y, scale, scratch, &mut grad.values);
        on_loss(pos, loss);
        total += loss;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    ForwardBackward,
}

/// Per-sample FLOPs: `2 * MACs` forward, three times that for forward plus
/// backward. Activation and softmax costs are not counted.
pub fn flops_per_sample(layout: &ModelLayout, pass: Pass) -> u64 {
    let forward = 2 * layout.macs();
    match pass {
        Pass::Forward => forward,
        Pass::ForwardBackward => 3 * forward,
    }
}
