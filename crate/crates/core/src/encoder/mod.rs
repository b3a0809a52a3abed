//! Small perceptron encoders with hand-written reverse-mode gradients.
//!
//! An encoder is a shared trunk followed by two heads: an FC matcher that maps
//! trunk features to the teacher's descriptor dimension, and a projector that
//! produces the final compact descriptor. Nothing is normalized here; losses
//! and the evaluator normalize.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Trunk,
    Matcher,
    Projector,
}

/// Fully connected layer `y = act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Layer widths for an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Trunk widths after the input, e.g. `[64, 64]`.
    pub trunk: Vec<usize>,
    pub trunk_activation: Activation,
    /// Teacher descriptor dimension; `None` builds no matcher.
    pub matcher_dim: Option<usize>,
    /// Projector widths, hidden layers first, descriptor dimension last.
    pub projector: Vec<usize>,
    pub projector_hidden_activation: Activation,
}

impl Architecture {
    pub fn descriptor_dim(&self) -> usize {
        self.projector
            .last()
            .or(self.trunk.last())
            .copied()
            .unwrap_or(self.input_dim)
    }
}

/// Draws Glorot-uniform layers for a chain of widths; `[8, 16, 4]` gives
/// weights of shape `16×8` and `4×16`. Biases start at zero.
pub fn init_params(
    sizes: &[usize],
    hidden: Activation,
    last: Activation,
    rng: &mut Rng,
) -> Result<Vec<Layer>> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::EmptySpec);
    }
    let n = sizes.len() - 1;
    Ok((0..n)
        .map(|l| {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Layer {
                weight: Mat::new(fan_out, fan_in, data).expect("sized above"),
                bias: vec![0.0; fan_out],
                activation: if l + 1 == n { last } else { hidden },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub trunk: Vec<Layer>,
    pub matcher: Option<Layer>,
    pub projector: Vec<Layer>,
}

/// Values retained by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    head: Head,
    /// Input to each traversed layer.
    inputs: Vec<Mat>,
    /// Pre-activation output of each traversed layer.
    pre: Vec<Mat>,
}

impl ForwardTrace {
    pub fn head(&self) -> Head {
        self.head
    }

    /// Pre-activation output of each traversed layer, input side first.
    pub fn pre_activations(&self) -> &[Mat] {
        &self.pre
    }

    /// Re-applies activations to the stored pre-activations of the last layer.
    pub fn output(&self, params: &EncoderParams) -> Mat {
        let layers = params.path(self.head);
        let last = layers.last().expect("trace from non-empty path");
        let mut out = self.pre.last().expect("non-empty trace").clone();
        out.data_mut()
            .iter_mut()
            .for_each(|x| *x = last.activation.apply(*x));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(l: &Layer) -> Self {
        Self {
            weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
            bias: vec![0.0; l.bias.len()],
        }
    }
}

/// Gradients shaped like an [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub trunk: Vec<LayerGrad>,
    pub matcher: Option<LayerGrad>,
    pub projector: Vec<LayerGrad>,
}

impl EncoderGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            trunk: p.trunk.iter().map(LayerGrad::zeros_like).collect(),
            matcher: p.matcher.as_ref().map(LayerGrad::zeros_like),
            projector: p.projector.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.trunk
            .iter()
            .chain(self.matcher.iter())
            .chain(self.projector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.trunk
            .iter_mut()
            .chain(self.matcher.iter_mut())
            .chain(self.projector.iter_mut())
    }

    /// Flat views of every gradient buffer, in the same order as
    /// [`EncoderParams::slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        if self.slices().iter().map(|s| s.len()).ne(other.slices().iter().map(|s| s.len())) {
            return Err(Error::ShapeMismatch("gradient layouts differ".into()));
        }
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.add_scaled(&b.weight, 1.0)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

impl EncoderParams {
    pub fn init(arch: &Architecture, rng: &Rng) -> Result<Self> {
        let mut sizes = vec![arch.input_dim];
        sizes.extend(&arch.trunk);
        let trunk = init_params(
            &sizes,
            arch.trunk_activation,
            arch.trunk_activation,
            &mut rng.split("trunk"),
        )?;
        let trunk_out = *sizes.last().expect("non-empty");
        let matcher = match arch.matcher_dim {
            Some(d) => Some(
                init_params(
                    &[trunk_out, d],
                    Activation::Identity,
                    Activation::Identity,
                    &mut rng.split("matcher"),
                )?
                .remove(0),
            ),
            None => None,
        };
        let projector = if arch.projector.is_empty() {
            Vec::new()
        } else {
            let mut sizes = vec![trunk_out];
            sizes.extend(&arch.projector);
            init_params(
                &sizes,
                arch.projector_hidden_activation,
                Activation::Identity,
                &mut rng.split("projector"),
            )?
        };
        Ok(Self {
            trunk,
            matcher,
            projector,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(0, Layer::in_dim)
    }

    pub fn trunk_out_dim(&self) -> usize {
        self.trunk.last().map_or(0, Layer::out_dim)
    }

    pub fn matcher_out_dim(&self) -> Option<usize> {
        self.matcher.as_ref().map(Layer::out_dim)
    }

    pub fn projector_out_dim(&self) -> usize {
        self.projector
            .last()
            .map_or(self.trunk_out_dim(), Layer::out_dim)
    }

    pub fn head_dim(&self, head: Head) -> Option<usize> {
        match head {
            Head::Trunk => Some(self.trunk_out_dim()),
            Head::Matcher => self.matcher_out_dim(),
            Head::Projector => Some(self.projector_out_dim()),
        }
    }

    /// Layers traversed for `head`, trunk first.
    fn path(&self, head: Head) -> Vec<&Layer> {
        let mut layers: Vec<&Layer> = self.trunk.iter().collect();
        match head {
            Head::Trunk => {}
            Head::Matcher => layers.extend(self.matcher.iter()),
            Head::Projector => layers.extend(self.projector.iter()),
        }
        layers
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk
            .iter()
            .chain(self.matcher.iter())
            .chain(self.projector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .iter_mut()
            .chain(self.matcher.iter_mut())
            .chain(self.projector.iter_mut())
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Batched forward pass; `x` holds one input per row.
    pub fn forward(&self, x: &Mat, head: Head) -> Result<(Mat, ForwardTrace)> {
        if head == Head::Matcher && self.matcher.is_none() {
            return Err(Error::ShapeMismatch("encoder has no matcher head".into()));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let path = self.path(head);
        let mut inputs = Vec::with_capacity(path.len());
        let mut pre = Vec::with_capacity(path.len());
        let mut h = x.clone();
        for layer in path {
            let mut z = h.matmul_t(&layer.weight)?;
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            a.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        Ok((h, ForwardTrace { head, inputs, pre }))
    }

    /// Single-vector forward pass.
    pub fn forward_vec(&self, x: &[f64], head: Head) -> Result<(Vec<f64>, ForwardTrace)> {
        let (y, trace) = self.forward(&Mat::new(1, x.len(), x.to_vec())?, head)?;
        Ok((y.into_data(), trace))
    }

    /// Reverse-mode pass for a trace from [`EncoderParams::forward`]. Returns
    /// parameter gradients (summed over the batch) and the input gradient.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Mat) -> Result<(EncoderGrads, Mat)> {
        let path = self.path(trace.head);
        if path.len() != trace.pre.len() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, head path has {}",
                trace.pre.len(),
                path.len()
            )));
        }
        for (layer, (inp, pre)) in path.iter().zip(trace.inputs.iter().zip(&trace.pre)) {
            if inp.cols() != layer.in_dim() || pre.cols() != layer.out_dim() {
                return Err(Error::TraceMismatch("layer shapes differ".into()));
            }
        }
        let last = trace.pre.last().expect("non-empty");
        if upstream.shape() != last.shape() {
            return Err(Error::TraceMismatch(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                last.shape()
            )));
        }

        let mut grads = EncoderGrads::zeros_like(self);
        let mut delta_out = upstream.clone();
        let n_trunk = self.trunk.len();
        for (idx, layer) in path.iter().enumerate().rev() {
            let pre = &trace.pre[idx];
            let mut delta = delta_out;
            for (d, z) in delta.data_mut().iter_mut().zip(pre.data()) {
                *d *= layer.activation.derivative(*z);
            }
            let gw = delta.t_matmul(&trace.inputs[idx])?;
            let mut gb = vec![0.0; layer.out_dim()];
            for r in delta.row_iter() {
                for (b, d) in gb.iter_mut().zip(r) {
                    *b += d;
                }
            }
            let slot = if idx < n_trunk {
                &mut grads.trunk[idx]
            } else {
                match trace.head {
                    Head::Matcher => grads.matcher.as_mut().expect("checked in forward"),
                    Head::Projector => &mut grads.projector[idx - n_trunk],
                    Head::Trunk => unreachable!("trunk path has only trunk layers"),
                }
            };
            slot.weight = gw;
            slot.bias = gb;
            delta_out = delta.matmul(&layer.weight)?;
        }
        Ok((grads, delta_out))
    }

    /// Copy without the matcher head, used as the momentum (key) encoder.
    pub fn without_matcher(&self) -> Self {
        Self {
            trunk: self.trunk.clone(),
            matcher: None,
            projector: self.projector.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

fn congruent(a: &[Layer], b: &[Layer]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.weight.shape() == y.weight.shape())
}

/// EMA update `θ_k ← m·θ_k + (1−m)·θ_q` of a key encoder toward a query encoder.
///
/// The matcher is updated only when the key encoder has one.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    let matcher_ok = match (&key.matcher, &query.matcher) {
        (Some(a), Some(b)) => a.weight.shape() == b.weight.shape(),
        (None, _) => true,
        (Some(_), None) => false,
    };
    if !congruent(&key.trunk, &query.trunk)
        || !congruent(&key.projector, &query.projector)
        || !matcher_ok
    {
        return Err(Error::ShapeMismatch("momentum encoder layout differs".into()));
    }
    let mut pairs: Vec<(&mut Layer, &Layer)> = key
        .trunk
        .iter_mut()
        .zip(&query.trunk)
        .chain(key.projector.iter_mut().zip(&query.projector))
        .collect();
    if let (Some(k), Some(q)) = (key.matcher.as_mut(), query.matcher.as_ref()) {
        pairs.push((k, q));
    }
    for (k, q) in pairs {
        for (a, b) in k.weight.data_mut().iter_mut().zip(q.weight.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
        for (a, b) in k.bias.iter_mut().zip(&q.bias) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}
