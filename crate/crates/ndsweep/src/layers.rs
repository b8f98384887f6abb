//! Forward and backward passes for the layer types the reference
//! networks need: convolution (lowered through im2col), fully-connected,
//! ReLU, max pooling, softmax cross-entropy, and standard dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{col2im_into, gemm, im2col_into, ConvGeom, Scalar, Tensor};

/// Convolution parameters: weights `[n_out, n_in, kh, kw]` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvParams<T> {
    pub fn n_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.weights.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        if self.weights.shape().len() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv weights must be [n_out, n_in, kh, kw], got {:?}",
                self.weights.shape()
            )));
        }
        let (kh, kw) = self.geom.kernel;
        if self.weights.shape()[2] != kh || self.weights.shape()[3] != kw {
            return Err(Error::InvalidShape(format!(
                "conv weights kernel {:?} disagrees with geometry {:?}",
                &self.weights.shape()[2..],
                self.geom.kernel
            )));
        }
        if self.bias.shape() != [self.n_out()] {
            return Err(Error::InvalidShape(format!(
                "conv bias must be [{}], got {:?}",
                self.n_out(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Fully-connected parameters: weights `[n_out, n_in]` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn n_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Gradients of a parameterized layer with respect to its input and
/// parameters; shapes mirror the primals exactly.
#[derive(Clone, Debug)]
pub struct LayerGrads<T: Scalar = f32> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn batch_shape4<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "expected [B, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

pub fn conv_forward<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let (b, c, h, w) = batch_shape4(input)?;
    if c != p.n_in() {
        return Err(Error::InvalidShape(format!(
            "conv expects {} input channels, got {c}",
            p.n_in()
        )));
    }
    let (ho, wo) = p.geom.output_size(h, w)?;
    let n_out = p.n_out();
    let (kh, kw) = p.geom.kernel;
    let ck = c * kh * kw;
    let cols_len = ck * ho * wo;

    let mut out = vec![T::ZERO; b * n_out * ho * wo];
    let mut cols = vec![T::ZERO; cols_len];
    let w_flat = p.weights.data();
    for bi in 0..b {
        let src = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
        im2col_into(src, c, h, w, &p.geom, (ho, wo), &mut cols);
        let dst = &mut out[bi * n_out * ho * wo..(bi + 1) * n_out * ho * wo];
        crate::tensor::gemm_accum(w_flat, &cols, dst, n_out, ck, ho * wo);
        for o in 0..n_out {
            let bias = p.bias.data()[o];
            for v in &mut dst[o * ho * wo..(o + 1) * ho * wo] {
                *v += bias;
            }
        }
    }
    Tensor::from_vec(&[b, n_out, ho, wo], out)
}

pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    p.validate()?;
    let (b, c, h, w) = batch_shape4(input)?;
    let (ho, wo) = p.geom.output_size(h, w)?;
    let n_out = p.n_out();
    if grad_out.shape() != [b, n_out, ho, wo] {
        return Err(Error::InvalidShape(format!(
            "grad_out must be [{b}, {n_out}, {ho}, {wo}], got {:?}",
            grad_out.shape()
        )));
    }
    let (kh, kw) = p.geom.kernel;
    let ck = c * kh * kw;
    let l = ho * wo;

    let mut grad_w = vec![T::ZERO; n_out * ck];
    let mut grad_b = vec![T::ZERO; n_out];
    let mut grad_in = vec![T::ZERO; b * c * h * w];

    let mut cols = vec![T::ZERO; ck * l];
    let mut cols_t = vec![T::ZERO; ck * l];
    let mut cols_grad = vec![T::ZERO; ck * l];
    let w_t = crate::tensor::transpose_copy(p.weights.data(), n_out, ck);

    for bi in 0..b {
        let src = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
        let g_out = &grad_out.data()[bi * n_out * l..(bi + 1) * n_out * l];

        im2col_into(src, c, h, w, &p.geom, (ho, wo), &mut cols);
        // grad_w += g_out [n_out, L] * cols^T [L, ck]
        for i in 0..ck {
            for j in 0..l {
                cols_t[j * ck + i] = cols[i * l + j];
            }
        }
        crate::tensor::gemm_accum(g_out, &cols_t, &mut grad_w, n_out, l, ck);
        for o in 0..n_out {
            let mut s = T::ZERO;
            for &g in &g_out[o * l..(o + 1) * l] {
                s += g;
            }
            grad_b[o] += s;
        }
        // grad_input = col2im(w^T [ck, n_out] * g_out [n_out, L])
        cols_grad.fill(T::ZERO);
        crate::tensor::gemm_accum(&w_t, g_out, &mut cols_grad, ck, n_out, l);
        col2im_into(
            &cols_grad,
            c,
            h,
            w,
            &p.geom,
            (ho, wo),
            &mut grad_in[bi * c * h * w..(bi + 1) * c * h * w],
        );
    }

    Ok(LayerGrads {
        grad_input: Tensor::from_vec(&[b, c, h, w], grad_in)?,
        grad_weights: Tensor::from_vec(p.weights.shape(), grad_w)?,
        grad_bias: Tensor::from_vec(&[n_out], grad_b)?,
    })
}

pub fn fc_forward<T: Scalar>(input: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    let &[b, n_in] = input.shape() else {
        return Err(Error::InvalidShape(format!(
            "fc expects [B, n_in], got {:?}",
            input.shape()
        )));
    };
    if n_in != p.n_in() {
        return Err(Error::InvalidShape(format!(
            "fc expects {} input features, got {n_in}",
            p.n_in()
        )));
    }
    let mut out = gemm(input, &p.weights, false, true)?;
    let n_out = p.n_out();
    for bi in 0..b {
        for o in 0..n_out {
            out.data_mut()[bi * n_out + o] += p.bias.data()[o];
        }
    }
    Ok(out)
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &FcParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let &[b, _n_in] = input.shape() else {
        return Err(Error::InvalidShape(format!(
            "fc expects [B, n_in], got {:?}",
            input.shape()
        )));
    };
    if grad_out.shape() != [b, p.n_out()] {
        return Err(Error::InvalidShape(format!(
            "fc grad_out must be [{b}, {}], got {:?}",
            p.n_out(),
            grad_out.shape()
        )));
    }
    let grad_input = gemm(grad_out, &p.weights, false, false)?;
    let grad_weights = gemm(grad_out, input, true, false)?;
    let mut grad_bias = vec![T::ZERO; p.n_out()];
    for bi in 0..b {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.data()[bi * p.n_out() + o];
        }
    }
    Ok(LayerGrads {
        grad_input,
        grad_weights,
        grad_bias: Tensor::from_vec(&[p.n_out()], grad_bias)?,
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::ZERO))
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::InvalidShape(format!(
            "relu_backward shapes disagree: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = batch_shape4(input)?;
    let geom = ConvGeom::new(window, stride, (0, 0));
    let (ho, wo) = geom.output_size(h, w)?;
    let mut out = vec![T::ZERO; b * c * ho * wo];
    let mut argmax = vec![0usize; b * c * ho * wo];
    let data = input.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane_off = (bi * c + ci) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let y0 = oy * stride.0;
                    let x0 = ox * stride.1;
                    // ties go to the lowest linear index
                    let mut best_idx = plane_off + y0 * w + x0;
                    let mut best = data[best_idx];
                    for wy in 0..window.0 {
                        for wx in 0..window.1 {
                            let idx = plane_off + (y0 + wy) * w + (x0 + wx);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((bi * c + ci) * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, argmax))
}

/// Routes each output gradient to the stored argmax position.
pub fn maxpool_backward<T: Scalar>(
    argmax: &[usize],
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::InvalidShape(format!(
            "argmax length {} disagrees with grad_out {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape)?;
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[idx] += g;
    }
    Ok(grad_in)
}

/// Mean softmax cross-entropy over the batch with max-subtraction for
/// stability. Returns the loss and the gradient with respect to logits,
/// `(softmax - onehot) / B`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::InvalidShape(format!(
            "softmax_xent expects [B, K], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(Error::InvalidShape(format!(
            "expected {b} labels, got {}",
            labels.len()
        )));
    }
    for (i, &lab) in labels.iter().enumerate() {
        if lab >= k {
            return Err(Error::InvalidLabel {
                label: lab,
                num_classes: k,
                index: i,
            });
        }
    }
    let inv_b = T::ONE / T::from_f64(b as f64);
    let mut grad = vec![T::ZERO; b * k];
    let mut loss = T::ZERO;
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let mut m = row[0];
        for &v in row {
            m = m.max(v);
        }
        let mut denom = T::ZERO;
        for &v in row {
            denom += (v - m).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[labels[bi]] - m - log_denom);
        for ki in 0..k {
            let p = (row[ki] - m).exp() / denom;
            let y = if ki == labels[bi] { T::ONE } else { T::ZERO };
            grad[bi * k + ki] = (p - y) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, k], grad)?))
}

/// Standard (inverted) dropout: in train mode each element is zeroed
/// independently with probability `p_drop` and survivors are scaled by
/// `1/(1-p_drop)`; eval mode is the identity. The returned mask holds
/// 1 for kept elements.
pub fn standard_dropout<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    p_drop: f64,
    rng: &mut R,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::InvalidParameter(format!(
            "p_drop must be in [0, 1), got {p_drop}"
        )));
    }
    if !train {
        let mask = Tensor::alloc(input.shape(), T::ONE)?;
        return Ok((input.clone(), mask));
    }
    let scale = T::from_f64(1.0 / (1.0 - p_drop));
    let mut mask = Tensor::alloc(input.shape(), T::ONE)?;
    let mut out = input.clone();
    for (m, o) in mask.data_mut().iter_mut().zip(out.data_mut()) {
        if rng.gen::<f64>() < p_drop {
            *m = T::ZERO;
            *o = T::ZERO;
        } else {
            *o *= scale;
        }
    }
    Ok((out, mask))
}

/// Backward of [`standard_dropout`]: kept elements pass the gradient
/// through with the same `1/(1-p)` scale, dropped ones get zero.
pub fn standard_dropout_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    mask: &Tensor<T>,
    p_drop: f64,
    train: bool,
) -> Result<Tensor<T>> {
    if !train {
        return Ok(grad_out.clone());
    }
    if grad_out.shape() != mask.shape() {
        return Err(Error::InvalidShape(
            "dropout mask and gradient shapes disagree".into(),
        ));
    }
    let scale = T::from_f64(1.0 / (1.0 - p_drop));
    let data = grad_out
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| g * m * scale)
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}
