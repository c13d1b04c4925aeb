//! Network descriptors, master parameters at the model owner, and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};
use crate::linear::{ConvShape, LinearLayer, LinearShape};
use crate::ring::{RingParams, RingTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Linear(LinearShape),
    Relu,
    AvgPool2,
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Linear(LinearShape::Dense { inputs, outputs })
    }

    pub fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, size: usize) -> Self {
        LayerSpec::Linear(LinearShape::Conv(ConvShape {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            size,
        }))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::Shape(format!("{self:?} cannot follow an activation of shape {input:?}"));
        match self {
            LayerSpec::Linear(shape) => {
                shape.check()?;
                let expect = &shape.input_shape(1)[1..];
                ensure!(input == expect, mismatch());
                Ok(shape.output_shape(1)[1..].to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool2 => {
                ensure!(
                    input.len() == 3 && input[1].is_multiple_of(2) && input[2].is_multiple_of(2),
                    mismatch()
                );
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

pub const MODEL_NAMES: [&str; 3] = ["mnist_mlp", "mnist_cnn", "cifar10_cnn"];

impl ModelSpec {
    pub fn new(name: &str, input: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = ModelSpec {
            name: name.to_string(),
            input,
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist_mlp" => Ok(Self::mnist_mlp()),
            "mnist_cnn" => Ok(Self::mnist_cnn()),
            "cifar10_cnn" => Ok(Self::cifar10_cnn()),
            _ => Err(Error::Config(format!(
                "unknown model {name:?}; expected one of {}",
                MODEL_NAMES.join(", ")
            ))),
        }
    }

    pub fn mnist_mlp() -> Self {
        use LayerSpec::*;
        ModelSpec {
            name: "mnist_mlp".into(),
            input: vec![1, 28, 28],
            layers: vec![
                Flatten,
                LayerSpec::dense(784, 128),
                Relu,
                LayerSpec::dense(128, 128),
                Relu,
                LayerSpec::dense(128, 10),
            ],
        }
    }

    pub fn mnist_cnn() -> Self {
        use LayerSpec::*;
        ModelSpec {
            name: "mnist_cnn".into(),
            input: vec![1, 28, 28],
            layers: vec![
                LayerSpec::conv(1, 5, 5, 2, 2, 28),
                Relu,
                Flatten,
                LayerSpec::dense(980, 100),
                Relu,
                LayerSpec::dense(100, 10),
            ],
        }
    }

    pub fn cifar10_cnn() -> Self {
        use LayerSpec::*;
        ModelSpec {
            name: "cifar10_cnn".into(),
            input: vec![3, 32, 32],
            layers: vec![
                LayerSpec::conv(3, 64, 5, 1, 2, 32),
                Relu,
                AvgPool2,
                LayerSpec::conv(64, 64, 5, 1, 2, 16),
                Relu,
                AvgPool2,
                LayerSpec::conv(64, 64, 3, 1, 1, 8),
                Relu,
                LayerSpec::conv(64, 64, 1, 1, 0, 8),
                Relu,
                LayerSpec::conv(64, 16, 1, 1, 0, 8),
                Relu,
                Flatten,
                LayerSpec::dense(1024, 10),
            ],
        }
    }

    /// Per-sample activation shapes: entry `i` is the input of layer `i`,
    /// the last entry the network output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![self.input.clone()];
        for l in &self.layers {
            let next = l.output_shape(out.last().unwrap())?;
            out.push(next);
        }
        ensure!(
            matches!(self.layers.last(), Some(LayerSpec::Linear(_))) && out.last().unwrap().len() == 1,
            Error::Shape("the network must end in a dense layer".into())
        );
        Ok(out)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear(s)) => s.outputs(),
            _ => 0,
        }
    }

    /// Indices of the linear layers, in order.
    pub fn linear_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::Linear(_)))
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

/// Wire tag of layer `index`; tag 0 stays free for session setup.
pub fn layer_tag(index: usize) -> u16 {
    (index + 1) as u16
}

/// Master copy of one linear layer in double precision, with momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_velocity: Vec<f64>,
    pub bias_velocity: Vec<f64>,
}

/// Gradients of one linear layer, decoded from the ring.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The model owner's copy of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    /// One entry per linear layer, in layer order.
    pub params: Vec<LinearParams>,
}

impl Model {
    /// Uniform `±sqrt(1/fan_in)` initialization of weights and biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.shapes()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = spec
            .linear_indices()
            .into_iter()
            .map(|i| {
                let LayerSpec::Linear(shape) = spec.layers[i] else { unreachable!() };
                let bound = (1.0 / shape.fan_in() as f64).sqrt();
                let nw: usize = shape.weight_shape().iter().product();
                let weight: Vec<f64> = (0..nw).map(|_| rng.random_range(-bound..bound)).collect();
                let bias: Vec<f64> = (0..shape.outputs()).map(|_| rng.random_range(-bound..bound)).collect();
                LinearParams {
                    weight_velocity: vec![0.0; nw],
                    bias_velocity: vec![0.0; bias.len()],
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(Model { spec, params })
    }

    /// Ring copies of the parameters: weights at scale f, biases at 2f.
    pub fn quantize(&self, ring: &RingParams) -> Result<Network> {
        let mut net = Network::peer(self.spec.clone())?;
        for (layer, p) in net.linear.iter_mut().flatten().zip(&self.params) {
            layer.weight = Some(RingTensor::encode(ring, &layer.shape.weight_shape(), &p.weight, ring.frac_bits)?);
            layer.bias = Some(RingTensor::encode(ring, &[layer.shape.outputs()], &p.bias, 2 * ring.frac_bits)?);
        }
        Ok(net)
    }

    /// Momentum SGD: `v = momentum*v + g; w -= lr*v`.
    pub fn sgd_update(&mut self, grads: &[Gradient], lr: f64, momentum: f64) -> Result<()> {
        ensure!(
            grads.len() == self.params.len(),
            Error::Shape(format!("{} gradients for {} layers", grads.len(), self.params.len()))
        );
        for (p, g) in self.params.iter_mut().zip(grads) {
            ensure!(
                g.weight.len() == p.weight.len() && g.bias.len() == p.bias.len(),
                Error::Shape("gradient does not match layer".into())
            );
            for ((w, v), &d) in p.weight.iter_mut().zip(p.weight_velocity.iter_mut()).zip(&g.weight) {
                *v = momentum * *v + d;
                *w -= lr * *v;
            }
            for ((b, v), &d) in p.bias.iter_mut().zip(p.bias_velocity.iter_mut()).zip(&g.bias) {
                *v = momentum * *v + d;
                *b -= lr * *v;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        w.write_u32::<LE>(self.spec.name.len() as u32)?;
        w.write_all(self.spec.name.as_bytes())?;
        w.write_u32::<LE>(self.spec.input.len() as u32)?;
        for &d in &self.spec.input {
            w.write_u64::<LE>(d as u64)?;
        }
        w.write_u32::<LE>(self.spec.layers.len() as u32)?;
        for l in &self.spec.layers {
            write_layer(w, l)?;
        }
        for p in &self.params {
            for v in [&p.weight, &p.bias, &p.weight_velocity, &p.bias_velocity] {
                for &x in v.iter() {
                    w.write_f64::<LE>(x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Model> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == CHECKPOINT_MAGIC, Error::Format("not a model checkpoint".into()));
        let version = r.read_u32::<LE>()?;
        ensure!(
            version == CHECKPOINT_VERSION,
            Error::Format(format!("checkpoint version {version}"))
        );
        let n = r.read_u32::<LE>()? as usize;
        ensure!(n <= 256, Error::Format("model name too long".into()));
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("model name is not UTF-8".into()))?;
        let dims = r.read_u32::<LE>()? as usize;
        ensure!(dims <= 8, Error::Format("input rank too large".into()));
        let input = (0..dims).map(|_| Ok(r.read_u64::<LE>()? as usize)).collect::<Result<Vec<_>>>()?;
        let count = r.read_u32::<LE>()? as usize;
        ensure!(count <= 1024, Error::Format("too many layers".into()));
        let layers = (0..count).map(|_| read_layer(r)).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec::new(&name, input, layers)?;
        let mut params = Vec::new();
        for i in spec.linear_indices() {
            let LayerSpec::Linear(shape) = spec.layers[i] else { unreachable!() };
            let nw: usize = shape.weight_shape().iter().product();
            let nb = shape.outputs();
            let mut read = |len: usize| -> Result<Vec<f64>> {
                (0..len).map(|_| Ok(r.read_f64::<LE>()?)).collect()
            };
            params.push(LinearParams {
                weight: read(nw)?,
                bias: read(nb)?,
                weight_velocity: read(nw)?,
                bias_velocity: read(nb)?,
            });
        }
        let mut rest = [0u8; 1];
        ensure!(
            r.read(&mut rest)? == 0,
            Error::Format("trailing bytes after checkpoint".into())
        );
        Ok(Model { spec, params })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMDL";
const CHECKPOINT_VERSION: u32 = 1;

fn write_layer<W: Write>(w: &mut W, l: &LayerSpec) -> Result<()> {
    match l {
        LayerSpec::Linear(LinearShape::Dense { inputs, outputs }) => {
            w.write_u8(0)?;
            w.write_u64::<LE>(*inputs as u64)?;
            w.write_u64::<LE>(*outputs as u64)?;
        }
        LayerSpec::Linear(LinearShape::Conv(c)) => {
            w.write_u8(1)?;
            for v in [c.c_in, c.c_out, c.kernel, c.stride, c.padding, c.size] {
                w.write_u64::<LE>(v as u64)?;
            }
        }
        LayerSpec::Relu => w.write_u8(2)?,
        LayerSpec::AvgPool2 => w.write_u8(3)?,
        LayerSpec::Flatten => w.write_u8(4)?,
    }
    Ok(())
}

fn read_layer<R: Read>(r: &mut R) -> Result<LayerSpec> {
    let kind = r.read_u8()?;
    let mut field = || -> Result<usize> { Ok(r.read_u64::<LE>()? as usize) };
    Ok(match kind {
        0 => LayerSpec::dense(field()?, field()?),
        1 => {
            let v = (0..6).map(|_| field()).collect::<Result<Vec<_>>>()?;
            LayerSpec::conv(v[0], v[1], v[2], v[3], v[4], v[5])
        }
        2 => LayerSpec::Relu,
        3 => LayerSpec::AvgPool2,
        4 => LayerSpec::Flatten,
        k => return Err(Error::Format(format!("unknown layer kind {k}"))),
    })
}

/// The layer list as seen by one party. Linear layers carry ring
/// parameters at the model owner and none at the data owner.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    /// Per-sample activation shapes (see [`ModelSpec::shapes`]).
    pub shapes: Vec<Vec<usize>>,
    /// `Some` exactly at the linear layer indices.
    pub linear: Vec<Option<LinearLayer>>,
}

impl Network {
    /// A parameterless view, as held by the data owner.
    pub fn peer(spec: ModelSpec) -> Result<Network> {
        let shapes = spec.shapes()?;
        let linear = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Linear(shape) => Some(LinearLayer {
                    id: layer_tag(i),
                    shape: *shape,
                    weight: None,
                    bias: None,
                }),
                _ => None,
            })
            .collect();
        Ok(Network { spec, shapes, linear })
    }

    /// Index of the first linear layer; its input gradient is never needed.
    pub fn first_linear(&self) -> usize {
        self.linear.iter().position(Option::is_some).expect("validated network has a linear layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_models_compose() {
        let mlp = ModelSpec::by_name("mnist_mlp").unwrap();
        assert_eq!(mlp.shapes().unwrap().last().unwrap(), &vec![10]);
        assert_eq!(mlp.linear_indices(), vec![1, 3, 5]);
        let cnn = ModelSpec::mnist_cnn().shapes().unwrap();
        assert_eq!(cnn[1], vec![5, 14, 14]);
        assert_eq!(cnn[3], vec![980]);
        let cifar = ModelSpec::cifar10_cnn().shapes().unwrap();
        assert_eq!(cifar[13], vec![1024]);
        assert!(ModelSpec::by_name("resnet").is_err());
    }

    #[test]
    fn bad_composition_rejected() {
        let err = ModelSpec::new("x", vec![1, 28, 28], vec![LayerSpec::dense(784, 10)]);
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = ModelSpec::new("x", vec![784], vec![LayerSpec::dense(784, 10), LayerSpec::Relu]);
        assert!(err.is_err());
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = Model::init(ModelSpec::mnist_mlp(), 3).unwrap();
        let b = Model::init(ModelSpec::mnist_mlp(), 3).unwrap();
        assert_eq!(a, b);
        let bound = (1.0f64 / 784.0).sqrt();
        assert!(a.params[0].weight.iter().all(|w| w.abs() <= bound));
        assert_eq!(a.params[0].weight.len(), 784 * 128);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut m = Model::init(ModelSpec::mnist_cnn(), 1).unwrap();
        let before = m.clone();
        let grads: Vec<Gradient> = m
            .params
            .iter()
            .map(|p| Gradient {
                weight: vec![1.0; p.weight.len()],
                bias: vec![1.0; p.bias.len()],
            })
            .collect();
        m.sgd_update(&grads, 0.0, 0.8).unwrap();
        for (p, q) in m.params.iter().zip(&before.params) {
            assert_eq!(p.weight, q.weight);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let spec = ModelSpec::new("tiny", vec![1], vec![LayerSpec::dense(1, 1)]).unwrap();
        let mut m = Model::init(spec, 0).unwrap();
        let w0 = m.params[0].weight[0];
        let g = vec![Gradient { weight: vec![1.0], bias: vec![0.0] }];
        m.sgd_update(&g, 0.1, 0.5).unwrap();
        m.sgd_update(&g, 0.1, 0.5).unwrap();
        assert!((m.params[0].weight[0] - (w0 - 0.1 - 0.15)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = Model::init(ModelSpec::cifar10_cnn(), 9).unwrap();
        m.params[2].weight_velocity[5] = 0.25;
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PMDL");
        assert_eq!(Model::read_from(&mut &buf[..]).unwrap(), m);
        buf.push(0);
        assert!(Model::read_from(&mut &buf[..]).is_err());
        buf[0] = b'X';
        assert!(Model::read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn quantized_scales() {
        let ring = RingParams::default();
        let m = Model::init(ModelSpec::mnist_mlp(), 1).unwrap();
        let net = m.quantize(&ring).unwrap();
        let l = net.linear[1].as_ref().unwrap();
        assert_eq!(l.id, 2);
        assert_eq!(l.weight.as_ref().unwrap().scale, ring.frac_bits);
        assert_eq!(l.bias.as_ref().unwrap().scale, 2 * ring.frac_bits);
        assert_eq!(net.first_linear(), 1);
    }
}
