//! Layer catalogue with forward and reverse-mode passes.
//!
//! Layers operate on one item at a time. Decoder layers own no parameters:
//! they borrow the weights of the encoder layer they are tied to and return
//! their weight gradient for that encoder address.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, PoolIndexMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Applies `kind` elementwise, or over the whole tensor for softmax.
pub fn activate(kind: Activation, z: &Tensor) -> Tensor {
    match kind {
        Activation::Sigmoid => z.map(sigmoid),
        Activation::Tanh => z.map(f64::tanh),
        Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Identity => z.clone(),
        Activation::Softmax => {
            let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut out = z.map(|v| (v - max).exp());
            let total = out.sum();
            out.scale(1.0 / total);
            out
        }
    }
}

/// Pulls `grad_out` back through the activation, given the pre-activation `z`
/// and the activation output `y`.
pub fn activation_backward(
    kind: Activation,
    z: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
) -> Result<Tensor> {
    match kind {
        Activation::Sigmoid => y.zip_map(grad_out, |y, g| g * y * (1.0 - y)),
        Activation::Tanh => y.zip_map(grad_out, |y, g| g * (1.0 - y * y)),
        Activation::Relu => z.zip_map(grad_out, |z, g| if z > 0.0 { g } else { 0.0 }),
        Activation::Identity => {
            y.expect_same_shape("activation_backward", grad_out)?;
            Ok(grad_out.clone())
        }
        Activation::Softmax => {
            let inner = y.dot(grad_out)?;
            y.zip_map(grad_out, |y, g| y * (g - inner))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        maps: usize,
        kh: usize,
        kw: usize,
        act: Activation,
    },
    MaxPool {
        ph: usize,
        pw: usize,
    },
    Dense {
        units: usize,
        act: Activation,
    },
    Dropout {
        p: f64,
    },
    /// Transposed weights of the tied dense layer, no bias.
    DenseDecode {
        tied_to: usize,
        act: Activation,
    },
    /// Full-mode correlation with the flipped kernels of the tied conv layer, no bias.
    ConvDecode {
        tied_to: usize,
        act: Activation,
    },
    /// Uses the argmax memory of the tied max-pooling layer.
    Unpool {
        tied_to: usize,
    },
}

impl LayerSpec {
    pub fn tied_to(&self) -> Option<usize> {
        match *self {
            LayerSpec::DenseDecode { tied_to, .. }
            | LayerSpec::ConvDecode { tied_to, .. }
            | LayerSpec::Unpool { tied_to } => Some(tied_to),
            _ => None,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match *self {
            LayerSpec::Conv { act, .. }
            | LayerSpec::Dense { act, .. }
            | LayerSpec::DenseDecode { act, .. }
            | LayerSpec::ConvDecode { act, .. } => Some(act),
            _ => None,
        }
    }

    /// Whether this layer owns a weight tensor and a bias.
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::DenseDecode { .. } => "dense_decode",
            LayerSpec::ConvDecode { .. } => "conv_decode",
            LayerSpec::Unpool { .. } => "unpool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters visible to one layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerParams<'a> {
    None,
    Own {
        weight: &'a Tensor,
        bias: &'a Tensor,
    },
    Tied {
        weight: &'a Tensor,
    },
}

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Own {
        weight: Tensor,
        bias: Tensor,
    },
    /// Gradient for the weight of the tied encoder layer.
    Tied {
        weight: Tensor,
    },
}

/// Structural information a layer needs from elsewhere in the network.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerContext<'a> {
    /// Argmax memory of the tied pooling layer (unpool only).
    pub switches: Option<&'a PoolIndexMap>,
    /// Shape to restore (dense decode and unpool).
    pub out_shape: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Option<Tensor>,
    pre_activation: Option<Tensor>,
    output: Option<Tensor>,
    mask: Option<Tensor>,
    /// Kept in both modes; unpooling reads it at evaluation time too.
    switches: Option<PoolIndexMap>,
}

impl ForwardCache {
    pub fn switches(&self) -> Option<&PoolIndexMap> {
        self.switches.as_ref()
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.output.as_ref()
    }

    pub fn is_trainable(&self) -> bool {
        self.input.is_some()
    }
}

fn own_params<'a>(spec: &LayerSpec, params: LayerParams<'a>) -> Result<(&'a Tensor, &'a Tensor)> {
    match params {
        LayerParams::Own { weight, bias } => Ok((weight, bias)),
        _ => Err(Error::Usage(format!(
            "{} layer requires its own parameters",
            spec.kind_name()
        ))),
    }
}

fn tied_weight<'a>(spec: &LayerSpec, params: LayerParams<'a>) -> Result<&'a Tensor> {
    match params {
        LayerParams::Tied { weight } => Ok(weight),
        _ => Err(Error::Usage(format!(
            "{} layer requires tied encoder weights",
            spec.kind_name()
        ))),
    }
}

fn required<'a, T: ?Sized>(value: Option<&'a T>, spec: &LayerSpec, what: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::Usage(format!("{} layer needs {what}", spec.kind_name())))
}

fn dense_affine(weight: &Tensor, x: &[f64], bias: Option<&Tensor>) -> Result<Tensor> {
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != fan_in {
        return Err(Error::Dimension {
            op: "dense",
            axis: "input length",
            expected: fan_in,
            found: x.len(),
        });
    }
    let w = weight.data();
    let z = (0..units)
        .map(|u| {
            let row = &w[u * fan_in..(u + 1) * fan_in];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b.data()[u])
        })
        .collect();
    Ok(Tensor::vector(z))
}

/// `W^T h` for `W` of shape `[units, fan_in]`.
fn dense_transpose(weight: &Tensor, h: &[f64]) -> Result<Vec<f64>> {
    let (units, fan_in) = (weight.shape()[0], weight.shape()[1]);
    if h.len() != units {
        return Err(Error::Dimension {
            op: "dense_transpose",
            axis: "input length",
            expected: units,
            found: h.len(),
        });
    }
    let w = weight.data();
    let mut out = vec![0.0; fan_in];
    for (u, &hv) in h.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[u * fan_in..(u + 1) * fan_in]) {
            *o += hv * wv;
        }
    }
    Ok(out)
}

/// Outer product `a ⊗ b` as a `[a.len(), b.len()]` tensor.
fn outer(a: &[f64], b: &[f64]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &av in a {
        out.extend(b.iter().map(|&bv| av * bv));
    }
    Tensor::new(vec![a.len(), b.len()], out)
}

fn decoder_kernel(weight: &Tensor) -> Result<Tensor> {
    tensor::swap_kernel_io(&tensor::flip2(weight)?)
}

pub fn forward<R: Rng + ?Sized>(
    spec: &LayerSpec,
    params: LayerParams<'_>,
    ctx: LayerContext<'_>,
    input: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, ForwardCache)> {
    let mut cache = ForwardCache::default();
    let (pre, act) = match *spec {
        LayerSpec::Conv { act, .. } => {
            let (kernel, bias) = own_params(spec, params)?;
            (tensor::conv2d_valid(input, kernel, Some(bias))?, act)
        }
        LayerSpec::Dense { act, .. } => {
            let (weight, bias) = own_params(spec, params)?;
            (dense_affine(weight, input.data(), Some(bias))?, act)
        }
        LayerSpec::DenseDecode { act, .. } => {
            let weight = tied_weight(spec, params)?;
            let shape = required(ctx.out_shape, spec, "the tied layer's input shape")?;
            let z = Tensor::vector(dense_transpose(weight, input.data())?).reshape(shape)?;
            (z, act)
        }
        LayerSpec::ConvDecode { act, .. } => {
            let weight = tied_weight(spec, params)?;
            (
                tensor::conv2d_full(input, &decoder_kernel(weight)?, None)?,
                act,
            )
        }
        LayerSpec::MaxPool { ph, pw } => {
            let (out, switches) = tensor::maxpool2d(input, (ph, pw))?;
            cache.switches = Some(switches);
            if mode == Mode::Train {
                cache.input = Some(input.clone());
            }
            return Ok((out, cache));
        }
        LayerSpec::Unpool { .. } => {
            let switches = required(ctx.switches, spec, "the tied pooling layer's index map")?;
            let shape = required(ctx.out_shape, spec, "the pre-pooling shape")?;
            let out = tensor::unpool2d(input, switches, shape)?;
            if mode == Mode::Train {
                cache.input = Some(input.clone());
                cache.switches = Some(switches.clone());
            }
            return Ok((out, cache));
        }
        LayerSpec::Dropout { p } => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "dropout probability {p} outside [0, 1)"
                )));
            }
            if mode == Mode::Eval {
                return Ok((input.clone(), cache));
            }
            let keep = 1.0 / (1.0 - p);
            let mask = Tensor::from_fn(input.shape(), |_| {
                if p == 0.0 || rng.gen::<f64>() >= p {
                    keep
                } else {
                    0.0
                }
            });
            let out = input.zip_map(&mask, |x, m| x * m)?;
            cache.input = Some(input.clone());
            cache.mask = Some(mask);
            return Ok((out, cache));
        }
    };
    let out = activate(act, &pre);
    if mode == Mode::Train {
        cache.input = Some(input.clone());
        cache.pre_activation = Some(pre);
        cache.output = Some(out.clone());
    }
    Ok((out, cache))
}

pub fn backward(
    spec: &LayerSpec,
    params: LayerParams<'_>,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<(Tensor, LayerGrads)> {
    let input = cache.input.as_ref().ok_or_else(|| {
        Error::Usage(format!(
            "{} backward without a training-mode cache",
            spec.kind_name()
        ))
    })?;
    let pre_grad = |act: Activation| -> Result<Tensor> {
        let z = required(
            cache.pre_activation.as_ref(),
            spec,
            "cached pre-activations",
        )?;
        let y = required(cache.output.as_ref(), spec, "cached outputs")?;
        activation_backward(act, z, y, grad_out)
    };
    match *spec {
        LayerSpec::Conv { act, .. } => {
            let (kernel, _) = own_params(spec, params)?;
            let gz = pre_grad(act)?;
            let (gx, gk, gb) = tensor::conv2d_valid_backward(input, kernel, &gz)?;
            Ok((
                gx,
                LayerGrads::Own {
                    weight: gk,
                    bias: gb,
                },
            ))
        }
        LayerSpec::Dense { act, .. } => {
            let (weight, _) = own_params(spec, params)?;
            let gz = pre_grad(act)?;
            let gw = outer(gz.data(), input.data())?;
            let gx = Tensor::vector(dense_transpose(weight, gz.data())?).reshape(input.shape())?;
            Ok((
                gx,
                LayerGrads::Own {
                    weight: gw,
                    bias: gz,
                },
            ))
        }
        LayerSpec::DenseDecode { act, .. } => {
            let weight = tied_weight(spec, params)?;
            let gz = pre_grad(act)?;
            let gw = outer(input.data(), gz.data())?;
            let gh = dense_affine(weight, gz.data(), None)?;
            Ok((gh, LayerGrads::Tied { weight: gw }))
        }
        LayerSpec::ConvDecode { act, .. } => {
            let weight = tied_weight(spec, params)?;
            let gz = pre_grad(act)?;
            let (gx, gd, _) = tensor::conv2d_full_backward(input, &decoder_kernel(weight)?, &gz)?;
            let gw = tensor::flip2(&tensor::swap_kernel_io(&gd)?)?;
            Ok((gx, LayerGrads::Tied { weight: gw }))
        }
        LayerSpec::MaxPool { .. } => {
            let switches = required(cache.switches.as_ref(), spec, "an index map")?;
            Ok((
                tensor::unpool2d(grad_out, switches, input.shape())?,
                LayerGrads::None,
            ))
        }
        LayerSpec::Unpool { .. } => {
            let switches = required(cache.switches.as_ref(), spec, "an index map")?;
            Ok((tensor::pool_gather(grad_out, switches)?, LayerGrads::None))
        }
        LayerSpec::Dropout { .. } => {
            let mask = required(cache.mask.as_ref(), spec, "a dropout mask")?;
            Ok((grad_out.zip_map(mask, |g, m| g * m)?, LayerGrads::None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn tanh_matches_scaled_sigmoid() {
        for y in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let z = Tensor::vector(vec![y]);
            let t = activate(Activation::Tanh, &z).data()[0];
            assert!((t - (2.0 * sigmoid(2.0 * y) - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = activate(Activation::Softmax, &Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn saturating_inputs_stay_finite_and_in_range() {
        let z = Tensor::vector((-500..=500).map(f64::from).collect());
        for kind in [Activation::Sigmoid, Activation::Tanh] {
            let y = activate(kind, &z);
            let lo = if kind == Activation::Sigmoid {
                0.0
            } else {
                -1.0
            };
            assert!(y
                .data()
                .iter()
                .all(|v| v.is_finite() && *v >= lo && *v <= 1.0));
        }
        let s = activate(Activation::Softmax, &z);
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_identity_is_passthrough_both_ways() {
        let spec = LayerSpec::Dense {
            units: 3,
            act: Activation::Identity,
        };
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        let params = LayerParams::Own {
            weight: &w,
            bias: &b,
        };
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let (y, cache) = forward(
            &spec,
            params,
            LayerContext::default(),
            &x,
            Mode::Train,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(y, x);
        let g = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let (gx, _) = backward(&spec, params, &cache, &g).unwrap();
        assert_eq!(gx, g);
    }

    #[test]
    fn relu_blocks_gradient_for_negative_preactivations() {
        let spec = LayerSpec::Dense {
            units: 2,
            act: Activation::Relu,
        };
        let w = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0])
            .reshape(&[2, 2])
            .unwrap();
        let b = Tensor::zeros(&[2]);
        let params = LayerParams::Own {
            weight: &w,
            bias: &b,
        };
        let x = Tensor::vector(vec![-1.0, -2.0]);
        let (_, cache) = forward(
            &spec,
            params,
            LayerContext::default(),
            &x,
            Mode::Train,
            &mut rng(),
        )
        .unwrap();
        let (gx, _) = backward(&spec, params, &cache, &Tensor::vector(vec![5.0, 7.0])).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_caches_nothing() {
        let spec = LayerSpec::Dropout { p: 0.5 };
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let (y, cache) = forward(
            &spec,
            LayerParams::None,
            LayerContext::default(),
            &x,
            Mode::Eval,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(y, x);
        assert!(!cache.is_trainable());
        assert!(matches!(
            backward(&spec, LayerParams::None, &cache, &x),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn dense_decode_restores_tied_input_shape() {
        let w = Tensor::from_fn(&[4, 18], |i| i as f64 * 0.01);
        let spec = LayerSpec::DenseDecode {
            tied_to: 0,
            act: Activation::Sigmoid,
        };
        let ctx = LayerContext {
            switches: None,
            out_shape: Some(&[2, 3, 3]),
        };
        let (y, _) = forward(
            &spec,
            LayerParams::Tied { weight: &w },
            ctx,
            &Tensor::vector(vec![1.0; 4]),
            Mode::Eval,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
    }

    #[test]
    fn layers_demand_matching_parameters() {
        let spec = LayerSpec::Conv {
            maps: 1,
            kh: 2,
            kw: 2,
            act: Activation::Relu,
        };
        let x = Tensor::zeros(&[1, 3, 3]);
        let err = forward(
            &spec,
            LayerParams::None,
            LayerContext::default(),
            &x,
            Mode::Eval,
            &mut rng(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
