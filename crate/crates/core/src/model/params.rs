use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

use super::spec::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    /// Convolution kernels or a dense weight matrix.
    Weight,
    Bias,
}

/// Stable address of a parameter tensor: owning layer id and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamAddr {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamAddr {
    pub const fn new(layer: usize, kind: ParamKind) -> Self {
        ParamAddr { layer, kind }
    }

    pub const fn weight(layer: usize) -> Self {
        ParamAddr::new(layer, ParamKind::Weight)
    }

    pub const fn bias(layer: usize) -> Self {
        ParamAddr::new(layer, ParamKind::Bias)
    }
}

impl fmt::Display for ParamAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        };
        write!(f, "layer {} {kind}", self.layer)
    }
}

/// Learnable parameters, iterated in address order (layer, then weight
/// before bias), which is also the checkpoint order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<ParamAddr, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn get(&self, addr: ParamAddr) -> Option<&Tensor> {
        self.tensors.get(&addr)
    }

    pub fn get_mut(&mut self, addr: ParamAddr) -> Option<&mut Tensor> {
        self.tensors.get_mut(&addr)
    }

    pub fn insert(&mut self, addr: ParamAddr, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(addr, value)
    }

    pub fn expect(&self, addr: ParamAddr) -> Result<&Tensor> {
        self.get(addr)
            .ok_or_else(|| Error::Usage(format!("parameter set has no {addr}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamAddr, &Tensor)> {
        self.tensors.iter().map(|(a, t)| (*a, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamAddr, &mut Tensor)> {
        self.tensors.iter_mut().map(|(a, t)| (*a, t))
    }

    pub fn addresses(&self) -> impl Iterator<Item = ParamAddr> + '_ {
        self.tensors.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(a, t)| (*a, Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Adds `scale * grad` into the tensor at `addr`.
    pub fn accumulate(&mut self, addr: ParamAddr, grad: &Tensor, scale: f64) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(&addr)
            .ok_or_else(|| Error::Usage(format!("no accumulator for {addr}")))?;
        slot.add_scaled(grad, scale)
    }

    /// Addresses whose tensors differ between `self` and `other` (bitwise),
    /// including addresses present in only one of them.
    pub fn differing_addresses(&self, other: &ParamSet) -> Vec<ParamAddr> {
        let mut out: Vec<ParamAddr> = self
            .tensors
            .iter()
            .filter(|(a, t)| other.tensors.get(a).map_or(true, |o| !bitwise_eq(t, o)))
            .map(|(a, _)| *a)
            .collect();
        out.extend(
            other
                .tensors
                .keys()
                .filter(|a| !self.tensors.contains_key(a)),
        );
        out.sort();
        out
    }

    /// Checks that the set holds exactly the tensors `spec` lays out.
    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.param_layout()?;
        if layout.len() != self.tensors.len() {
            return Err(Error::Usage(format!(
                "network expects {} parameter tensors, set has {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (addr, shape) in layout {
            let t = self.expect(addr)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Usage(format!(
                    "{addr} has shape {:?}, network expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Fan-in and fan-out used by the uniform initialiser.
fn fans(layer: &LayerSpec, weight_shape: &[usize]) -> (usize, usize) {
    match *layer {
        LayerSpec::Conv { .. } => {
            let field = weight_shape[2] * weight_shape[3];
            (weight_shape[1] * field, weight_shape[0] * field)
        }
        _ => (weight_shape[1], weight_shape[0]),
    }
}

/// Weights uniform on `±sqrt(6 / (fan_in + fan_out))`, biases zero. Draws come
/// from the `Init` stream of `seed`, in address order.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    let mut rng = seed::rng(seed, Stream::Init, 0);
    let mut params = ParamSet::new();
    for (addr, shape) in spec.param_layout()? {
        let t = match addr.kind {
            ParamKind::Bias => Tensor::zeros(&shape),
            ParamKind::Weight => {
                let (fan_in, fan_out) = fans(&spec.layers[addr.layer], &shape);
                let bound = glorot_bound(fan_in, fan_out);
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            }
        };
        params.insert(addr, t);
    }
    Ok(params)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
