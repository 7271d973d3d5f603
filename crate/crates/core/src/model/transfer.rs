//! Structural conversion between classifier, autoencoder and multi-task
//! networks sharing one encoder.
//!
//! The decoder mirrors the encoder in reverse: a dense layer becomes a tied
//! dense decoder, a convolution a tied flipped-kernel convolution, a max-pool
//! an unpooling layer; dropout layers have no mirror. Decoders carry no
//! biases. Each decoding layer uses the activation that produced the tensor
//! it reconstructs, and the last one (which reconstructs the input) uses a
//! sigmoid.

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};

use super::spec::{NetworkSpec, Task};

/// Activation of the nearest layer before `i` that has one; `Sigmoid` for the
/// network input.
fn reconstruction_activation(encoder: &[LayerSpec], i: usize) -> Activation {
    encoder[..i]
        .iter()
        .rev()
        .find_map(LayerSpec::activation)
        .unwrap_or(Activation::Sigmoid)
}

fn mirror(encoder: &[LayerSpec]) -> Vec<LayerSpec> {
    (0..encoder.len())
        .rev()
        .filter_map(|i| match encoder[i] {
            LayerSpec::Dense { .. } => Some(LayerSpec::DenseDecode {
                tied_to: i,
                act: reconstruction_activation(encoder, i),
            }),
            LayerSpec::Conv { .. } => Some(LayerSpec::ConvDecode {
                tied_to: i,
                act: reconstruction_activation(encoder, i),
            }),
            LayerSpec::MaxPool { .. } => Some(LayerSpec::Unpool { tied_to: i }),
            _ => None,
        })
        .collect()
}

fn head(num_classes: usize) -> LayerSpec {
    LayerSpec::Dense {
        units: num_classes,
        act: Activation::Softmax,
    }
}

/// Same encoder, restructured for `task`. `num_classes` sizes a new head
/// when the source network has none; an existing head is kept otherwise.
pub fn with_task(
    spec: &NetworkSpec,
    task: Task,
    num_classes: Option<usize>,
) -> Result<NetworkSpec> {
    spec.plan()?;
    let encoder = spec.encoder();
    let classes = num_classes.or_else(|| spec.num_classes());
    let mut layers = encoder.to_vec();
    if matches!(task, Task::Cl | Task::Mt) {
        let classes = classes.ok_or_else(|| {
            Error::Usage(format!(
                "converting a {} network to {task} needs a class count",
                spec.task
            ))
        })?;
        layers.push(head(classes));
    }
    if matches!(task, Task::Ae | Task::Mt) {
        layers.extend(mirror(encoder));
    }
    let out = NetworkSpec {
        input_shape: spec.input_shape.clone(),
        layers,
        task,
        alpha_mt: spec.alpha_mt,
        reg: spec.reg,
    };
    out.plan()?;
    Ok(out)
}

/// Drops the classifier output layer and appends the tied, bias-free mirror
/// of the remaining layers.
pub fn build_cae_from_cnn(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.task != Task::Cl {
        return Err(Error::Usage(format!(
            "expected a CL network, got {}",
            spec.task
        )));
    }
    with_task(spec, Task::Ae, None)
}

/// Removes the decoding layers and appends a softmax layer of `num_classes`
/// units. The new layer's parameters come from a fresh initialisation.
pub fn build_cnn_from_cae(spec: &NetworkSpec, num_classes: usize) -> Result<NetworkSpec> {
    if spec.task != Task::Ae {
        return Err(Error::Usage(format!(
            "expected an AE network, got {}",
            spec.task
        )));
    }
    if num_classes == 0 {
        return Err(Error::Usage("a classifier needs at least one class".into()));
    }
    with_task(spec, Task::Cl, Some(num_classes))
}

/// Classifier plus the mirrored decoder, reading the same code.
pub fn build_mt_from_cnn(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.task != Task::Cl {
        return Err(Error::Usage(format!(
            "expected a CL network, got {}",
            spec.task
        )));
    }
    with_task(spec, Task::Mt, None)
}
