//! One training step written once over an abstract arithmetic backend, so
//! the cleartext reference and the two-party protocol share every
//! truncation point and message order.

use crate::error::{ensure, Error, Result};
use crate::linear::LinearLayer;
use crate::ring::{RingParams, RingTensor, ShareTensor};

use super::loss::loss_and_gradient;
use super::model::{Gradient, LayerSpec, Network};

/// What a backend's tensors must expose to the generic step.
pub trait Value: Clone {
    fn scale(&self) -> u32;
    fn dims(&self) -> &[usize];
    fn reshaped(self, shape: &[usize]) -> Result<Self>;
}

impl Value for RingTensor {
    fn scale(&self) -> u32 {
        self.scale
    }
    fn dims(&self) -> &[usize] {
        &self.shape
    }
    fn reshaped(self, shape: &[usize]) -> Result<Self> {
        self.reshape(shape)
    }
}

impl Value for ShareTensor {
    fn scale(&self) -> u32 {
        self.value.scale
    }
    fn dims(&self) -> &[usize] {
        &self.value.shape
    }
    fn reshaped(self, shape: &[usize]) -> Result<Self> {
        Ok(ShareTensor::new(self.role, self.value.reshape(shape)?))
    }
}

pub trait Engine {
    type T: Value;
    type Bits;

    fn ring(&self) -> RingParams;
    /// Called before any work on layer `index`.
    fn enter(&mut self, index: usize);
    /// The network input at scale f; `x` is present where the data lives.
    fn input(&mut self, x: Option<&RingTensor>, shape: &[usize]) -> Result<Self::T>;
    fn linear_forward(&mut self, layer: &LinearLayer, x: &Self::T) -> Result<Self::T>;
    fn linear_backward(&mut self, layer: &LinearLayer, gy: &Self::T) -> Result<Self::T>;
    /// Weight gradient at scale f, revealed where the model lives.
    fn grad_weight(&mut self, layer: &LinearLayer, x: &Self::T, gy: &Self::T) -> Result<Option<RingTensor>>;
    /// Bias gradient at the scale of `gy`, revealed where the model lives.
    fn grad_bias(&mut self, layer: &LinearLayer, gy: &Self::T) -> Result<Option<RingTensor>>;
    fn relu(&mut self, x: &Self::T) -> Result<(Self::T, Self::Bits)>;
    fn relu_backward(&mut self, bits: &Self::Bits, g: &Self::T) -> Result<Self::T>;
    /// Divide by `2^shift` and lower the scale accordingly.
    fn truncate(&mut self, x: &Self::T, shift: u32) -> Result<Self::T>;
    fn avgpool(&mut self, x: &Self::T) -> Result<Self::T>;
    fn avgpool_backward(&mut self, g: &Self::T, input_shape: &[usize]) -> Result<Self::T>;
    /// Open the output to the data side.
    fn reveal_output(&mut self, y: &Self::T) -> Result<Option<RingTensor>>;
    /// Install the output gradient known to the data side.
    fn output_gradient(&mut self, g: Option<RingTensor>, shape: &[usize], scale: u32) -> Result<Self::T>;
}

/// Intermediate state kept from the forward pass for the backward pass.
pub struct Trace<E: Engine> {
    /// Input of each linear layer (at scale f).
    inputs: Vec<Option<E::T>>,
    relu_bits: Vec<Option<E::Bits>>,
    /// Full activation shape entering each layer.
    shapes: Vec<Vec<usize>>,
}

/// Forward pass; returns logits at scale 2f.
pub fn forward<E: Engine>(e: &mut E, net: &Network, x: Option<&RingTensor>, batch: usize) -> Result<(E::T, Trace<E>)> {
    let ring = e.ring();
    let f = ring.frac_bits;
    let mut shape = vec![batch];
    shape.extend_from_slice(&net.spec.input);
    if let Some(x) = x {
        ensure!(
            x.shape == shape,
            Error::Shape(format!("batch {:?} for network input {:?}", x.shape, shape))
        );
    }
    let n = net.spec.layers.len();
    let mut trace = Trace {
        inputs: (0..n).map(|_| None).collect(),
        relu_bits: (0..n).map(|_| None).collect(),
        shapes: Vec::with_capacity(n),
    };
    let mut h = e.input(x, &shape)?;
    for (i, spec) in net.spec.layers.iter().enumerate() {
        e.enter(i);
        trace.shapes.push(h.dims().to_vec());
        h = match spec {
            LayerSpec::Linear(_) => {
                let layer = net.linear[i].as_ref().expect("linear slot");
                if h.scale() > f {
                    h = e.truncate(&h, h.scale() - f)?;
                }
                let y = e.linear_forward(layer, &h)?;
                trace.inputs[i] = Some(h);
                y
            }
            LayerSpec::Relu => {
                let (y, bits) = e.relu(&h)?;
                trace.relu_bits[i] = Some(bits);
                y
            }
            LayerSpec::AvgPool2 => e.avgpool(&h)?,
            LayerSpec::Flatten => {
                let len = h.dims()[1..].iter().product();
                h.reshaped(&[batch, len])?
            }
        };
    }
    Ok((h, trace))
}

/// Backward pass from the output gradient (scale f). Returns the revealed
/// per-layer gradients in layer order where the model lives.
pub fn backward<E: Engine>(e: &mut E, net: &Network, trace: Trace<E>, g: E::T) -> Result<Option<Vec<(RingTensor, RingTensor)>>> {
    let f = e.ring().frac_bits;
    let first = net.first_linear();
    let mut g = g;
    let mut grads = Vec::new();
    let mut revealed = true;
    for i in (first..net.spec.layers.len()).rev() {
        e.enter(i);
        match net.spec.layers[i] {
            LayerSpec::Linear(_) => {
                let layer = net.linear[i].as_ref().expect("linear slot");
                let x = trace.inputs[i].as_ref().expect("forward ran");
                let dw = e.grad_weight(layer, x, &g)?;
                let db = e.grad_bias(layer, &g)?;
                match (dw, db) {
                    (Some(dw), Some(db)) => grads.push((dw, db)),
                    _ => revealed = false,
                }
                if i > first {
                    let dx = e.linear_backward(layer, &g)?;
                    g = e.truncate(&dx, dx.scale() - f)?;
                }
            }
            LayerSpec::Relu => {
                g = e.relu_backward(trace.relu_bits[i].as_ref().expect("forward ran"), &g)?;
            }
            LayerSpec::AvgPool2 => g = e.avgpool_backward(&g, &trace.shapes[i])?,
            LayerSpec::Flatten => g = g.reshaped(&trace.shapes[i])?,
        }
    }
    if !revealed {
        return Ok(None);
    }
    grads.reverse();
    Ok(Some(grads))
}

/// Result of one step as seen by one side.
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    /// Mean batch loss, where the labels live.
    pub loss: Option<f64>,
    /// Revealed logits, where the labels live.
    pub logits: Option<RingTensor>,
    /// Ring gradients `(weight at f, bias at f)` per linear layer, where the model lives.
    pub grads: Option<Vec<(RingTensor, RingTensor)>>,
}

impl StepResult {
    /// Gradients decoded to doubles for the optimizer.
    pub fn decoded_grads(&self) -> Option<Vec<Gradient>> {
        self.grads.as_ref().map(|g| {
            g.iter()
                .map(|(w, b)| Gradient {
                    weight: w.decode(),
                    bias: b.decode(),
                })
                .collect()
        })
    }
}

/// A full forward/loss/backward step. `batch` carries `(x at scale f, labels)`
/// on the side that holds the data.
pub fn train_step<E: Engine>(e: &mut E, net: &Network, data: Option<(&RingTensor, &[u8])>, batch: usize) -> Result<StepResult> {
    let ring = e.ring();
    let (y, trace) = forward(e, net, data.map(|d| d.0), batch)?;
    e.enter(net.spec.layers.len());
    let logits = e.reveal_output(&y)?;
    let (loss, g) = match (&logits, data) {
        (Some(z), Some((_, labels))) => {
            let (loss, g) = loss_and_gradient(&ring, z, labels)?;
            (Some(loss), Some(g))
        }
        _ => (None, None),
    };
    let g = e.output_gradient(g, y.dims(), ring.frac_bits)?;
    let grads = backward(e, net, trace, g)?;
    Ok(StepResult { loss, logits, grads })
}
