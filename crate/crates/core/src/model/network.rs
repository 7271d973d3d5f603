//! Whole-network passes and the training objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{self, ForwardCache, LayerContext, LayerGrads, LayerParams, LayerSpec, Mode};
use crate::losses::{self, LossTerm};
use crate::tensor::Tensor;

use super::params::{ParamAddr, ParamKind, ParamSet};
use super::spec::{NetworkSpec, Plan, Task};

/// Items of one mini-batch with their class labels (ignored by pure
/// autoencoders).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension {
                op: "batch",
                axis: "labels",
                expected: inputs.len(),
                found: labels.len(),
            });
        }
        if inputs.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Prior regularisation around anchor tensors, keyed by parameter address.
#[derive(Debug, Clone, Copy)]
pub struct PriorTerm<'a> {
    pub lambda: f64,
    pub anchors: &'a ParamSet,
}

/// Result of one item's forward pass.
#[derive(Debug, Clone)]
pub struct ItemPass {
    pub caches: Vec<ForwardCache>,
    pub probs: Option<Tensor>,
    pub recon: Option<Tensor>,
    /// Output of the convolutional stage, for the sparsity regulariser.
    pub sparse_activation: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub items: Vec<ItemPass>,
}

impl NetworkOutput {
    pub fn probs(&self) -> Option<Vec<Tensor>> {
        self.items.iter().map(|p| p.probs.clone()).collect()
    }

    pub fn reconstructions(&self) -> Option<Vec<Tensor>> {
        self.items.iter().map(|p| p.recon.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Task loss alone: CCE, MSE or their scalarisation.
    pub task: f64,
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

fn layer_params<'p>(spec: &NetworkSpec, params: &'p ParamSet, i: usize) -> Result<LayerParams<'p>> {
    Ok(match spec.layers[i] {
        LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => LayerParams::Own {
            weight: params.expect(ParamAddr::weight(i))?,
            bias: params.expect(ParamAddr::bias(i))?,
        },
        LayerSpec::DenseDecode { tied_to, .. } | LayerSpec::ConvDecode { tied_to, .. } => {
            LayerParams::Tied {
                weight: params.expect(ParamAddr::weight(tied_to))?,
            }
        }
        _ => LayerParams::None,
    })
}

pub fn forward_item<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet,
    input: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<ItemPass> {
    if input.shape() != spec.input_shape.as_slice() {
        return Err(Error::shape(
            "forward",
            format!(
                "input shape {:?}, network expects {:?}",
                input.shape(),
                spec.input_shape
            ),
        ));
    }
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(spec.layers.len());
    let mut sparse_activation = None;
    let mut h = input.clone();
    for i in 0..plan.encoder_len {
        let (out, cache) = layers::forward(
            &spec.layers[i],
            layer_params(spec, params, i)?,
            LayerContext::default(),
            &h,
            mode,
            rng,
        )?;
        if plan.sparsity_layer == Some(i) {
            sparse_activation = Some(out.clone());
        }
        caches.push(cache);
        h = out;
    }
    let code = h;
    let mut probs = None;
    if let Some(head) = plan.head {
        let (out, cache) = layers::forward(
            &spec.layers[head],
            layer_params(spec, params, head)?,
            LayerContext::default(),
            &code,
            mode,
            rng,
        )?;
        caches.push(cache);
        probs = Some(out);
    }
    let decoder = plan.decoder();
    let mut recon = None;
    if !decoder.is_empty() {
        let mut h = code;
        for i in decoder {
            let layer = &spec.layers[i];
            let tied = layer.tied_to().expect("decoder layers are tied");
            let ctx = LayerContext {
                switches: caches[tied].switches(),
                out_shape: Some(&plan.io[tied].0),
            };
            let (out, cache) =
                layers::forward(layer, layer_params(spec, params, i)?, ctx, &h, mode, rng)?;
            caches.push(cache);
            h = out;
        }
        recon = Some(h);
    }
    Ok(ItemPass {
        caches,
        probs,
        recon,
        sparse_activation,
    })
}

fn accumulate(spec: &NetworkSpec, grads: &mut ParamSet, layer: usize, g: LayerGrads) -> Result<()> {
    match g {
        LayerGrads::None => Ok(()),
        LayerGrads::Own { weight, bias } => {
            grads.accumulate(ParamAddr::weight(layer), &weight, 1.0)?;
            grads.accumulate(ParamAddr::bias(layer), &bias, 1.0)
        }
        LayerGrads::Tied { weight } => {
            let tied = spec.layers[layer]
                .tied_to()
                .expect("tied gradients come from decoders");
            grads.accumulate(ParamAddr::weight(tied), &weight, 1.0)
        }
    }
}

/// Reverse pass of one item. Gradients with respect to the classifier output,
/// the reconstruction and the sparsity activation are all optional.
pub fn backward_item(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet,
    pass: &ItemPass,
    grad_probs: Option<Tensor>,
    grad_recon: Option<Tensor>,
    grad_sparse: Option<Tensor>,
    grads: &mut ParamSet,
) -> Result<()> {
    let mut grad_code = Tensor::zeros(plan.code_shape(&spec.input_shape));
    let decoder = plan.decoder();
    if let Some(mut g) = grad_recon {
        for i in decoder.clone().rev() {
            let (gi, gp) = layers::backward(
                &spec.layers[i],
                layer_params(spec, params, i)?,
                &pass.caches[i],
                &g,
            )?;
            accumulate(spec, grads, i, gp)?;
            g = gi;
        }
        grad_code.add_scaled(&g, 1.0)?;
    }
    if let (Some(head), Some(g)) = (plan.head, grad_probs) {
        let (gi, gp) = layers::backward(
            &spec.layers[head],
            layer_params(spec, params, head)?,
            &pass.caches[head],
            &g,
        )?;
        accumulate(spec, grads, head, gp)?;
        grad_code.add_scaled(&gi, 1.0)?;
    }
    let mut g = grad_code;
    for i in (0..plan.encoder_len).rev() {
        if plan.sparsity_layer == Some(i) {
            if let Some(gs) = &grad_sparse {
                g.add_scaled(gs, 1.0)?;
            }
        }
        let (gi, gp) = layers::backward(
            &spec.layers[i],
            layer_params(spec, params, i)?,
            &pass.caches[i],
            &g,
        )?;
        accumulate(spec, grads, i, gp)?;
        g = gi;
    }
    Ok(())
}

pub fn forward_network<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParamSet,
    inputs: &[&Tensor],
    mode: Mode,
    rng: &mut R,
) -> Result<NetworkOutput> {
    let plan = spec.plan()?;
    let items = inputs
        .iter()
        .map(|x| forward_item(spec, &plan, params, x, mode, rng))
        .collect::<Result<_>>()?;
    Ok(NetworkOutput { items })
}

pub fn one_hot(label: usize, classes: usize) -> Result<Tensor> {
    if label >= classes {
        return Err(Error::Usage(format!(
            "label {label} outside the {classes} output classes"
        )));
    }
    Ok(Tensor::from_fn(&[classes], |k| {
        if k == label {
            1.0
        } else {
            0.0
        }
    }))
}

fn objective<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch<'_>,
    prior: Option<PriorTerm<'_>>,
    mode: Mode,
    rng: &mut R,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamSet>)> {
    let plan = spec.plan()?;
    if spec.reg.prior_lambda > 0.0 && prior.is_none() {
        return Err(Error::Config(
            "prior_lambda is set but no prior snapshot is attached".into(),
        ));
    }
    let n = batch.len() as f64;
    let passes: Vec<ItemPass> = batch
        .inputs
        .iter()
        .map(|x| forward_item(spec, &plan, params, x, mode, rng))
        .collect::<Result<_>>()?;

    let (w_cl, w_ae) = match spec.task {
        Task::Cl => (1.0, 0.0),
        Task::Ae => (0.0, 1.0),
        Task::Mt => losses::multitask_weights(spec.alpha_mt)?,
    };
    let mut terms = Vec::new();
    let mut cce_grads = None;
    let mut mse_grads = None;
    let mut cce_value = 0.0;
    let mut mse_value = 0.0;
    if let Some(classes) = spec.num_classes() {
        let probs: Vec<Tensor> = passes
            .iter()
            .map(|p| p.probs.clone().expect("head output"))
            .collect();
        let targets = batch
            .labels
            .iter()
            .map(|&l| one_hot(l, classes))
            .collect::<Result<Vec<_>>>()?;
        cce_value = losses::cce(&probs, &targets)?;
        terms.push(LossTerm {
            name: "cce",
            value: cce_value,
        });
        if want_grad && w_cl != 0.0 {
            cce_grads = Some(losses::cce_grad(&probs, &targets)?);
        }
    }
    if matches!(spec.task, Task::Ae | Task::Mt) {
        let recon: Vec<Tensor> = passes
            .iter()
            .map(|p| p.recon.clone().expect("decoder output"))
            .collect();
        let targets: Vec<Tensor> = batch.inputs.iter().map(|&x| x.clone()).collect();
        mse_value = losses::mse(&recon, &targets)?;
        terms.push(LossTerm {
            name: "mse",
            value: mse_value,
        });
        if want_grad && w_ae != 0.0 {
            mse_grads = Some(losses::mse_grad(&recon, &targets)?);
        }
    }
    let task = match spec.task {
        Task::Cl => cce_value,
        Task::Ae => mse_value,
        Task::Mt => losses::multitask(cce_value, mse_value, spec.alpha_mt)?,
    };

    let reg = spec.reg;
    let weights = || {
        params
            .iter()
            .filter(|(a, _)| a.kind == ParamKind::Weight)
            .map(|(_, t)| t)
    };
    let l2 = losses::l2(weights(), reg.l2_lambda);
    terms.push(LossTerm {
        name: "l2",
        value: l2,
    });

    let sparsity_on = reg.sparsity_coeff > 0.0 && plan.sparsity_layer.is_some();
    let mut sparsity = 0.0;
    if sparsity_on {
        for p in &passes {
            let a = p.sparse_activation.as_ref().expect("sparsity layer output");
            sparsity += losses::hoyer_penalty(a.data(), reg.sparsity_coeff, reg.sparsity_target);
        }
        sparsity /= n;
    }
    terms.push(LossTerm {
        name: "sparsity",
        value: sparsity,
    });

    let mut prior_value = 0.0;
    let mut prior_pairs = Vec::new();
    if let Some(term) = prior {
        for (addr, anchor) in term.anchors.iter() {
            let current = params.get(addr).ok_or_else(|| {
                Error::Config(format!(
                    "prior snapshot covers {addr}, absent from the network"
                ))
            })?;
            prior_pairs.push((addr, current, anchor));
        }
        let theta: Vec<&Tensor> = prior_pairs.iter().map(|p| p.1).collect();
        let old: Vec<&Tensor> = prior_pairs.iter().map(|p| p.2).collect();
        prior_value = losses::prior_reg(&theta, &old, term.lambda)?;
        terms.push(LossTerm {
            name: "prior",
            value: prior_value,
        });
    }

    let breakdown = LossBreakdown {
        total: task + l2 + sparsity + prior_value,
        task,
        terms,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    let mut grads = params.zeros_like();
    for (idx, pass) in passes.iter().enumerate() {
        let g_probs = cce_grads.as_ref().map(|g| {
            let mut g = g[idx].clone();
            g.scale(w_cl);
            g
        });
        let g_recon = mse_grads.as_ref().map(|g| {
            let mut g = g[idx].clone();
            g.scale(w_ae);
            g
        });
        let g_sparse = if sparsity_on {
            let a = pass
                .sparse_activation
                .as_ref()
                .expect("sparsity layer output");
            let g = losses::hoyer_penalty_grad(a.data(), reg.sparsity_coeff, reg.sparsity_target);
            Some(Tensor::new(
                a.shape().to_vec(),
                g.into_iter().map(|v| v / n).collect(),
            )?)
        } else {
            None
        };
        backward_item(
            spec, &plan, params, pass, g_probs, g_recon, g_sparse, &mut grads,
        )?;
    }
    if reg.l2_lambda > 0.0 {
        for (addr, w) in params.iter().filter(|(a, _)| a.kind == ParamKind::Weight) {
            grads.accumulate(addr, w, reg.l2_lambda)?;
        }
    }
    if let Some(term) = prior {
        let theta: Vec<&Tensor> = prior_pairs.iter().map(|p| p.1).collect();
        let old: Vec<&Tensor> = prior_pairs.iter().map(|p| p.2).collect();
        for (g, (addr, _, _)) in losses::prior_reg_grad(&theta, &old, term.lambda)?
            .iter()
            .zip(&prior_pairs)
        {
            grads.accumulate(*addr, g, 1.0)?;
        }
    }
    Ok((breakdown, Some(grads)))
}

/// Total loss and its gradient for one training-mode pass over `batch`.
pub fn loss_and_grad<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch<'_>,
    prior: Option<PriorTerm<'_>>,
    rng: &mut R,
) -> Result<(LossBreakdown, ParamSet)> {
    let (loss, grads) = objective(spec, params, batch, prior, Mode::Train, rng, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

pub fn loss<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch<'_>,
    prior: Option<PriorTerm<'_>>,
    mode: Mode,
    rng: &mut R,
) -> Result<LossBreakdown> {
    Ok(objective(spec, params, batch, prior, mode, rng, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// CCE for classification, MSE for autoencoding.
    pub loss: f64,
    /// Fraction of items whose argmax prediction equals the label (CL only).
    pub accuracy: Option<f64>,
}

/// Evaluation-mode metrics of `spec` on the given items for `task` (CL or AE).
/// A multi-task network can be evaluated for either task.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamSet,
    inputs: &[&Tensor],
    labels: &[usize],
    task: Task,
) -> Result<EvalMetrics> {
    let supported = match task {
        Task::Cl => matches!(spec.task, Task::Cl | Task::Mt),
        Task::Ae => matches!(spec.task, Task::Ae | Task::Mt),
        Task::Mt => false,
    };
    if !supported {
        return Err(Error::Usage(format!(
            "cannot evaluate a {} network as {task}",
            spec.task
        )));
    }
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Usage(format!(
            "evaluation needs matching, non-empty inputs and labels ({} vs {})",
            inputs.len(),
            labels.len()
        )));
    }
    let plan = spec.plan()?;
    // Evaluation mode draws nothing from the generator.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let passes = inputs
        .iter()
        .map(|x| forward_item(spec, &plan, params, x, Mode::Eval, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    match task {
        Task::Cl => {
            let classes = spec.num_classes().expect("classifier head");
            let probs: Vec<Tensor> = passes
                .into_iter()
                .map(|p| p.probs.expect("head output"))
                .collect();
            let targets = labels
                .iter()
                .map(|&l| one_hot(l, classes))
                .collect::<Result<Vec<_>>>()?;
            let correct = probs
                .iter()
                .zip(labels)
                .filter(|(p, &l)| p.argmax() == l)
                .count();
            Ok(EvalMetrics {
                loss: losses::cce(&probs, &targets)?,
                accuracy: Some(correct as f64 / labels.len() as f64),
            })
        }
        _ => {
            let recon: Vec<Tensor> = passes
                .into_iter()
                .map(|p| p.recon.expect("decoder output"))
                .collect();
            let targets: Vec<Tensor> = inputs.iter().map(|&x| x.clone()).collect();
            Ok(EvalMetrics {
                loss: losses::mse(&recon, &targets)?,
                accuracy: None,
            })
        }
    }
}
