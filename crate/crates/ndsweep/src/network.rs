//! Declarative network descriptions and a sequential executor over the
//! layer primitives, with an optional nested-dropout attachment after a
//! chosen layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv_backward, conv_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax_xent, standard_dropout, standard_dropout_backward,
    ConvParams, FcParams,
};
use crate::nested::{nd_backward, nd_forward, NdMode, NestedDropoutState};
use crate::tensor::{ConvGeom, Tensor};

fn default_std() -> f64 {
    0.01
}

/// One layer of the architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        #[serde(default = "default_std")]
        init_std: f64,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Fc {
        out_features: usize,
        #[serde(default = "default_std")]
        init_std: f64,
    },
    Dropout {
        p: f64,
    },
}

/// Full architecture: input shape `[C, H, W]` plus an ordered layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Small MNIST network: conv(w@5x5, pad 2) - pool 2/2 - relu -
    /// fc(64) - fc(10).
    pub fn mnist_small(conv1_filters: usize) -> Self {
        NetworkSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: conv1_filters,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                    init_std: 0.05,
                },
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    out_features: 64,
                    init_std: 0.02,
                },
                LayerSpec::Fc {
                    out_features: 10,
                    init_std: 0.02,
                },
            ],
        }
    }

    /// CIFAR-10 "quick"-style network. Pooling uses 2x2/2 windows since
    /// this executor has no ceil-mode pooling; filter counts follow the
    /// 32-32-64 reference layout.
    pub fn cifar10_quick(conv1_filters: usize) -> Self {
        let conv = |out_channels, init_std| LayerSpec::Conv {
            out_channels,
            kernel: 5,
            stride: 1,
            pad: 2,
            init_std,
        };
        let pool = LayerSpec::MaxPool {
            window: 2,
            stride: 2,
        };
        NetworkSpec {
            input_shape: [3, 32, 32],
            layers: vec![
                conv(conv1_filters, 0.0001),
                pool.clone(),
                LayerSpec::Relu,
                conv(32, 0.01),
                LayerSpec::Relu,
                pool.clone(),
                conv(64, 0.01),
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    out_features: 64,
                    init_std: 0.1,
                },
                LayerSpec::Fc {
                    out_features: 10,
                    init_std: 0.1,
                },
            ],
        }
    }

    pub fn preset(name: &str, conv1_filters: Option<usize>) -> Result<Self> {
        match name {
            "mnist-small" => Ok(Self::mnist_small(conv1_filters.unwrap_or(16))),
            "cifar10-quick" => Ok(Self::cifar10_quick(conv1_filters.unwrap_or(32))),
            other => Err(Error::Config(format!("unknown network preset '{other}'"))),
        }
    }

    /// Per-layer output shapes (without the batch dimension); validates
    /// the whole geometry.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let [_c, h, w] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {idx}: conv needs a [C, H, W] input, got {shape:?}"
                        )));
                    };
                    let geom = ConvGeom::new((*kernel, *kernel), (*stride, *stride), (*pad, *pad));
                    let (ho, wo) = geom.output_size(h, w)?;
                    vec![*out_channels, ho, wo]
                }
                LayerSpec::MaxPool { window, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {idx}: maxpool needs a [C, H, W] input, got {shape:?}"
                        )));
                    };
                    let geom = ConvGeom::new((*window, *window), (*stride, *stride), (0, 0));
                    let (ho, wo) = geom.output_size(h, w)?;
                    vec![c, ho, wo]
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Fc { out_features, .. } => {
                    if shape.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {idx}: fc needs a flattened input, got {shape:?}"
                        )));
                    }
                    vec![*out_features]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Channel count produced by layer `idx`, for nested-dropout
    /// attachment validation.
    pub fn channels_at(&self, idx: usize) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let shape = shapes
            .get(idx)
            .ok_or_else(|| Error::Config(format!("layer index {idx} out of range")))?;
        Ok(shape[0])
    }
}

/// Parameters of one layer; `None` for parameterless layers. Indices
/// align with `NetworkSpec::layers`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv(ConvParams<f32>),
    Fc(FcParams<f32>),
    None,
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&Tensor<f32>> {
        match self {
            LayerParams::Conv(p) => vec![&p.weights, &p.bias],
            LayerParams::Fc(p) => vec![&p.weights, &p.bias],
            LayerParams::None => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        match self {
            LayerParams::Conv(p) => vec![&mut p.weights, &mut p.bias],
            LayerParams::Fc(p) => vec![&mut p.weights, &mut p.bias],
            LayerParams::None => vec![],
        }
    }
}

/// Per-layer parameter gradients (or momentum buffers, which share the
/// same shapes).
#[derive(Clone, Debug)]
pub enum ParamGrad {
    Pair { weights: Tensor<f32>, bias: Tensor<f32> },
    None,
}

/// Standard normal via Box-Muller; one value per call.
pub fn sample_gaussian<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian weights with per-layer std, zero biases; deterministic under
/// the seed of `rng`.
pub fn init_params<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Vec<LayerParams>> {
    let mut in_shape: Vec<usize> = spec.input_shape.to_vec();
    let shapes = spec.output_shapes()?;
    let mut params = Vec::with_capacity(spec.layers.len());
    for (idx, layer) in spec.layers.iter().enumerate() {
        let p = match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                init_std,
            } => {
                let n_in = in_shape[0];
                let mut weights =
                    Tensor::<f32>::zeros(&[*out_channels, n_in, *kernel, *kernel])?;
                for v in weights.data_mut() {
                    *v = sample_gaussian(rng, *init_std) as f32;
                }
                LayerParams::Conv(ConvParams {
                    weights,
                    bias: Tensor::zeros(&[*out_channels])?,
                    geom: ConvGeom::new((*kernel, *kernel), (*stride, *stride), (*pad, *pad)),
                })
            }
            LayerSpec::Fc {
                out_features,
                init_std,
            } => {
                let n_in = in_shape[0];
                let mut weights = Tensor::<f32>::zeros(&[*out_features, n_in])?;
                for v in weights.data_mut() {
                    *v = sample_gaussian(rng, *init_std) as f32;
                }
                LayerParams::Fc(FcParams {
                    weights,
                    bias: Tensor::zeros(&[*out_features])?,
                })
            }
            _ => LayerParams::None,
        };
        params.push(p);
        in_shape = shapes[idx].clone();
    }
    Ok(params)
}

/// Nested dropout attached after one layer of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdAttachment {
    pub layer: usize,
    pub state: NestedDropoutState,
}

/// Deterministic channel mask applied at a layer output during
/// evaluation. Used for truncated evaluation and the brain-damage
/// baseline; `kept[i]` keeps channel `i` (0-based).
#[derive(Clone, Debug)]
pub struct EvalMask {
    pub layer: usize,
    pub kept: Vec<bool>,
}

impl EvalMask {
    pub fn prefix(layer: usize, k: usize, n: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!(
                "prefix mask k={k} out of range [1, {n}]"
            )));
        }
        Ok(EvalMask {
            layer,
            kept: (0..n).map(|i| i < k).collect(),
        })
    }
}

/// A runnable network: spec, parameters, optional nested dropout.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
    pub nd: Option<NdAttachment>,
}

enum LayerCache {
    Conv { input: Tensor<f32> },
    Fc { input: Tensor<f32> },
    Relu { input: Tensor<f32> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Dropout { mask: Tensor<f32>, p: f64 },
    None,
}

/// Activations cached by a train-mode forward, consumed by `backward`.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Vec<LayerParams>, nd: Option<NdAttachment>) -> Result<Self> {
        if params.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter entries for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        if let Some(nd) = &nd {
            let n = spec.channels_at(nd.layer)?;
            if n != nd.state.n {
                return Err(Error::Config(format!(
                    "nested dropout expects {n} channels at layer {}, state has {}",
                    nd.layer, nd.state.n
                )));
            }
        }
        Ok(Network { spec, params, nd })
    }

    pub fn init<R: Rng>(spec: NetworkSpec, nd: Option<(usize, f64)>, rng: &mut R) -> Result<Self> {
        let params = init_params(&spec, rng)?;
        let nd = match nd {
            Some((layer, rho)) => {
                let n = spec.channels_at(layer)?;
                match spec.layers.get(layer) {
                    Some(LayerSpec::Conv { .. }) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "nested dropout must attach to a conv layer, layer {layer} is not one"
                        )))
                    }
                }
                Some(NdAttachment {
                    layer,
                    state: NestedDropoutState::new(n, rho)?,
                })
            }
            None => None,
        };
        Network::new(spec, params, nd)
    }

    fn forward_layer(
        &self,
        idx: usize,
        input: Tensor<f32>,
        train: bool,
        rng: Option<&mut dyn rand::RngCore>,
        cache: Option<&mut Vec<LayerCache>>,
    ) -> Result<Tensor<f32>> {
        match (&self.spec.layers[idx], &self.params[idx]) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => {
                let out = conv_forward(&input, p)?;
                if let Some(cache) = cache {
                    cache.push(LayerCache::Conv { input });
                }
                Ok(out)
            }
            (LayerSpec::Fc { .. }, LayerParams::Fc(p)) => {
                let out = fc_forward(&input, p)?;
                if let Some(cache) = cache {
                    cache.push(LayerCache::Fc { input });
                }
                Ok(out)
            }
            (LayerSpec::Relu, _) => {
                let out = relu_forward(&input);
                if let Some(cache) = cache {
                    cache.push(LayerCache::Relu { input });
                }
                Ok(out)
            }
            (LayerSpec::MaxPool { window, stride }, _) => {
                let (out, argmax) =
                    maxpool_forward(&input, (*window, *window), (*stride, *stride))?;
                if let Some(cache) = cache {
                    cache.push(LayerCache::MaxPool {
                        argmax,
                        input_shape: input.shape().to_vec(),
                    });
                }
                Ok(out)
            }
            (LayerSpec::Flatten, _) => {
                let batch = input.shape()[0];
                let rest: usize = input.shape()[1..].iter().product();
                let out = input.reshape(&[batch, rest])?;
                if let Some(cache) = cache {
                    cache.push(LayerCache::Flatten {
                        input_shape: input.shape().to_vec(),
                    });
                }
                Ok(out)
            }
            (LayerSpec::Dropout { p }, _) => {
                if train {
                    let mut rng = rng.ok_or_else(|| {
                        Error::ProtocolViolation("dropout in train mode needs an rng".into())
                    })?;
                    let (out, mask) = standard_dropout(&input, *p, &mut rng, true)?;
                    if let Some(cache) = cache {
                        cache.push(LayerCache::Dropout { mask, p: *p });
                    }
                    Ok(out)
                } else {
                    if let Some(cache) = cache {
                        cache.push(LayerCache::None);
                    }
                    Ok(input)
                }
            }
            (spec, _) => Err(Error::Config(format!(
                "layer {idx} ({spec:?}) has mismatched parameters"
            ))),
        }
    }

    /// Train-mode forward: caches activations, applies nested dropout
    /// with fresh draws (stored in the nd state for `backward`).
    pub fn forward_train<R: Rng>(
        &mut self,
        input: &Tensor<f32>,
        rng: &mut R,
    ) -> Result<(Tensor<f32>, ForwardCache)> {
        let mut cache = Vec::with_capacity(self.spec.layers.len());
        let mut x = input.clone();
        let nd_layer = self.nd.as_ref().map(|a| a.layer);
        for idx in 0..self.spec.layers.len() {
            x = self.forward_layer(
                idx,
                x,
                true,
                Some(&mut *rng as &mut dyn rand::RngCore),
                Some(&mut cache),
            )?;
            if nd_layer == Some(idx) {
                let att = self.nd.as_mut().unwrap();
                x = nd_forward(&x, &mut att.state, NdMode::Train, rng)?;
            }
        }
        Ok((x, ForwardCache { layers: cache }))
    }

    /// Evaluation forward: no dropout of any kind; optional deterministic
    /// channel mask at one layer output.
    pub fn forward_eval(&self, input: &Tensor<f32>, mask: Option<&EvalMask>) -> Result<Tensor<f32>> {
        let mut x = input.clone();
        for idx in 0..self.spec.layers.len() {
            x = self.forward_layer(idx, x, false, None, None)?;
            if let Some(m) = mask {
                if m.layer == idx {
                    x = apply_channel_mask(&x, &m.kept)?;
                }
            }
        }
        Ok(x)
    }

    /// Backward pass for the cached train-mode forward. Returns per-layer
    /// parameter gradients; nested-dropout masking is mirrored exactly.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        grad_logits: &Tensor<f32>,
    ) -> Result<Vec<ParamGrad>> {
        let mut grads = vec![ParamGrad::None; self.spec.layers.len()];
        let mut g = grad_logits.clone();
        let nd_layer = self.nd.as_ref().map(|a| a.layer);
        for idx in (0..self.spec.layers.len()).rev() {
            if nd_layer == Some(idx) {
                let att = self.nd.as_ref().unwrap();
                g = nd_backward(&g, &att.state)?;
            }
            g = match (&self.params[idx], &cache.layers[idx]) {
                (LayerParams::Conv(p), LayerCache::Conv { input }) => {
                    let lg = conv_backward(input, p, &g)?;
                    grads[idx] = ParamGrad::Pair {
                        weights: lg.grad_weights,
                        bias: lg.grad_bias,
                    };
                    lg.grad_input
                }
                (LayerParams::Fc(p), LayerCache::Fc { input }) => {
                    let lg = fc_backward(input, p, &g)?;
                    grads[idx] = ParamGrad::Pair {
                        weights: lg.grad_weights,
                        bias: lg.grad_bias,
                    };
                    lg.grad_input
                }
                (_, LayerCache::Relu { input }) => relu_backward(input, &g)?,
                (_, LayerCache::MaxPool { argmax, input_shape }) => {
                    maxpool_backward(argmax, &g, input_shape)?
                }
                (_, LayerCache::Flatten { input_shape }) => g.reshape(input_shape)?,
                (_, LayerCache::Dropout { mask, p }) => {
                    standard_dropout_backward(&g, mask, *p, true)?
                }
                (_, LayerCache::None) => g,
                _ => {
                    return Err(Error::ProtocolViolation(format!(
                        "cache/parameter mismatch at layer {idx}"
                    )))
                }
            };
        }
        Ok(grads)
    }

    /// One train step's loss and gradients on a minibatch.
    pub fn loss_and_grads<R: Rng>(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<(f32, Vec<ParamGrad>)> {
        let (logits, cache) = self.forward_train(images, rng)?;
        let (loss, grad_logits) = softmax_xent(&logits, labels)?;
        let grads = self.backward(&cache, &grad_logits)?;
        Ok((loss, grads))
    }

    /// Classification accuracy over `images`/`labels`, evaluated in
    /// batches, with an optional channel mask.
    pub fn accuracy(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        mask: Option<&EvalMask>,
    ) -> Result<f64> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::InvalidShape(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        let sample_len: usize = images.shape()[1..].iter().product();
        let chunk = 100usize;
        let mut correct = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let batch = Tensor::from_vec(
                &shape,
                images.data()[start * sample_len..end * sample_len].to_vec(),
            )?;
            let logits = self.forward_eval(&batch, mask)?;
            let k = logits.shape()[1];
            for (bi, &label) in labels[start..end].iter().enumerate() {
                let row = &logits.data()[bi * k..(bi + 1) * k];
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }
}

/// Zero out non-kept channels of a `[B, C, ...]` activation.
pub fn apply_channel_mask(x: &Tensor<f32>, kept: &[bool]) -> Result<Tensor<f32>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != kept.len() {
        return Err(Error::InvalidShape(format!(
            "mask over {} channels cannot apply to shape {shape:?}",
            kept.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut out = x.clone();
    for bi in 0..b {
        for (ci, &keep) in kept.iter().enumerate() {
            if !keep {
                out.data_mut()[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial]
                    .fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Build a physically narrowed copy of `net`: conv layer `layer_idx`
/// keeps only its first `k` filters, and the next parameterized layer
/// keeps exactly the weight slices fed by the surviving channels. The
/// result computes bit-identical logits to prefix-mask evaluation of the
/// original network.
pub fn physically_truncate(net: &Network, layer_idx: usize, k: usize) -> Result<Network> {
    let LayerSpec::Conv { out_channels, .. } = net.spec.layers[layer_idx] else {
        return Err(Error::Config(format!(
            "layer {layer_idx} is not a conv layer"
        )));
    };
    if k == 0 || k > out_channels {
        return Err(Error::InvalidParameter(format!(
            "k={k} out of range [1, {out_channels}]"
        )));
    }
    let shapes = net.spec.output_shapes()?;

    let mut spec = net.spec.clone();
    let LayerSpec::Conv { out_channels: oc, .. } = &mut spec.layers[layer_idx] else {
        unreachable!()
    };
    *oc = k;

    let mut params = net.params.clone();
    let LayerParams::Conv(cp) = &mut params[layer_idx] else {
        return Err(Error::Config("conv layer without conv parameters".into()));
    };
    let row = cp.weights.len() / out_channels;
    cp.weights = Tensor::from_vec(
        &[
            k,
            cp.weights.shape()[1],
            cp.weights.shape()[2],
            cp.weights.shape()[3],
        ],
        cp.weights.data()[..k * row].to_vec(),
    )?;
    cp.bias = Tensor::from_vec(&[k], cp.bias.data()[..k].to_vec())?;

    // Narrow the next parameterized layer's input slices. Between the
    // conv and that layer only channel-preserving ops (pool, relu,
    // flatten, dropout) are allowed.
    let mut next = None;
    for idx in layer_idx + 1..net.spec.layers.len() {
        match &net.spec.layers[idx] {
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => {
                next = Some(idx);
                break;
            }
            _ => {}
        }
    }
    if let Some(nidx) = next {
        match &mut params[nidx] {
            LayerParams::Conv(np) => {
                let [o, c_in, kh, kw] = *np.weights.shape() else {
                    unreachable!()
                };
                if c_in != out_channels {
                    return Err(Error::Config(
                        "channel count changes between conv layers; cannot truncate".into(),
                    ));
                }
                let mut w = Vec::with_capacity(o * k * kh * kw);
                for oi in 0..o {
                    let base = oi * c_in * kh * kw;
                    w.extend_from_slice(&np.weights.data()[base..base + k * kh * kw]);
                }
                np.weights = Tensor::from_vec(&[o, k, kh, kw], w)?;
            }
            LayerParams::Fc(np) => {
                // columns are channel-major after flatten
                let n_in = np.n_in();
                let spatial = n_in / out_channels;
                if spatial * out_channels != n_in {
                    return Err(Error::Config(
                        "fc input is not channel-aligned; cannot truncate".into(),
                    ));
                }
                let o = np.n_out();
                let keep = k * spatial;
                let mut w = Vec::with_capacity(o * keep);
                for oi in 0..o {
                    let base = oi * n_in;
                    w.extend_from_slice(&np.weights.data()[base..base + keep]);
                }
                np.weights = Tensor::from_vec(&[o, keep], w)?;
            }
            LayerParams::None => unreachable!(),
        }
    }

    // Sanity: the conv must be followed only by channel-preserving ops
    // until `next`, which output_shapes re-validates anyway.
    let _ = shapes;
    Network::new(spec, params, None)
}
