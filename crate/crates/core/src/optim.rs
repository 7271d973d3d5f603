//! RMSProp with Nesterov momentum, epoch iteration and early stopping.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{self, Batch, ParamSet, PriorTerm};
use crate::seed::{self, Stream};
use crate::{NetworkSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl OptimHyper {
    pub fn new(learning_rate: f64, momentum: f64, batch_size: usize) -> Self {
        OptimHyper {
            learning_rate,
            rms_decay: 0.9,
            momentum,
            epsilon: 1e-8,
            batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: OptimHyper,
    mean_square: ParamSet,
    velocity: ParamSet,
}

impl OptimState {
    pub fn new(hyper: OptimHyper, params: &ParamSet) -> Self {
        OptimState {
            hyper,
            mean_square: params.zeros_like(),
            velocity: params.zeros_like(),
        }
    }

    pub fn mean_square(&self) -> &ParamSet {
        &self.mean_square
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    /// One update, elementwise:
    ///
    /// ```text
    /// ms <- rho * ms + (1 - rho) * g^2
    /// s  <- g / sqrt(ms + eps)
    /// v  <- mu * v - lr * s
    /// θ  <- θ + mu * v - lr * s
    /// ```
    ///
    /// The gradient is checked for non-finite values before anything changes.
    pub fn step(&mut self, theta: &mut ParamSet, grad: &ParamSet) -> Result<()> {
        for (addr, g) in grad.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    param: addr.to_string(),
                });
            }
        }
        let OptimHyper {
            learning_rate: lr,
            rms_decay: rho,
            momentum: mu,
            epsilon: eps,
            ..
        } = self.hyper;
        for (addr, th) in theta.iter_mut() {
            let g = grad.expect(addr)?;
            let ms = self
                .mean_square
                .get_mut(addr)
                .ok_or_else(|| missing(addr))?;
            let v = self.velocity.get_mut(addr).ok_or_else(|| missing(addr))?;
            if g.shape() != th.shape() || ms.shape() != th.shape() {
                return Err(Error::Usage(format!(
                    "optimiser buffers for {addr} are not shape-congruent"
                )));
            }
            let iter = th
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(ms.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((t, &g), (m, v)) in iter {
                *m = rho * *m + (1.0 - rho) * g * g;
                let scaled = g / (*m + eps).sqrt();
                *v = mu * *v - lr * scaled;
                *t += mu * *v - lr * scaled;
            }
        }
        Ok(())
    }
}

fn missing(addr: model::ParamAddr) -> Error {
    Error::Usage(format!("optimiser has no state for {addr}"))
}

/// A labelled set of items, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// Item-weighted mean of the total training loss over the epoch's batches.
    pub mean_loss: f64,
    pub batch_sizes: Vec<usize>,
}

impl EpochMetrics {
    pub fn steps(&self) -> usize {
        self.batch_sizes.len()
    }
}

/// One pass over `data` in an order shuffled by the `Shuffle` stream of
/// `(run_seed, epoch)`. The last batch may be short.
pub fn run_epoch(
    spec: &NetworkSpec,
    params: &mut ParamSet,
    data: Samples<'_>,
    state: &mut OptimState,
    prior: Option<PriorTerm<'_>>,
    run_seed: u64,
    epoch: u64,
) -> Result<EpochMetrics> {
    if data.inputs.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if data.inputs.len() != data.labels.len() {
        return Err(Error::Config("inputs and labels differ in length".into()));
    }
    let batch_size = state.hyper.batch_size;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    order.shuffle(&mut seed::rng(run_seed, Stream::Shuffle, epoch));
    let mut dropout_rng = seed::rng(run_seed, Stream::Dropout, epoch);
    let mut weighted = 0.0;
    let mut batch_sizes = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let batch = Batch::new(
            chunk.iter().map(|&i| &data.inputs[i]).collect(),
            chunk.iter().map(|&i| data.labels[i]).collect(),
        )?;
        let (loss, grads) = model::loss_and_grad(spec, params, &batch, prior, &mut dropout_rng)?;
        state.step(params, &grads)?;
        weighted += loss.total * chunk.len() as f64;
        batch_sizes.push(chunk.len());
    }
    Ok(EpochMetrics {
        mean_loss: weighted / data.inputs.len() as f64,
        batch_sizes,
    })
}

/// Minimum decrease of the validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    best_validation_loss: f64,
    best_epoch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    best_params: Option<ParamSet>,
}

impl EarlyStopState {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        EarlyStopState {
            best_validation_loss: f64::INFINITY,
            best_epoch: 0,
            patience,
            max_epochs,
            best_params: None,
        }
    }

    pub fn best_validation_loss(&self) -> f64 {
        self.best_validation_loss
    }

    /// 1-based epoch of the best model so far, 0 before the first update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_params(&self) -> Option<&ParamSet> {
        self.best_params.as_ref()
    }

    pub fn into_best_params(self) -> Option<ParamSet> {
        self.best_params
    }

    /// Records the validation loss of 1-based `epoch` and reports whether to
    /// halt: once `patience` epochs have passed since the best one, or at the
    /// epoch cap. A non-finite loss never counts as an improvement.
    pub fn update(&mut self, epoch: usize, validation_loss: f64, params: &ParamSet) -> bool {
        if validation_loss.is_finite()
            && validation_loss <= self.best_validation_loss - MIN_IMPROVEMENT
        {
            self.best_validation_loss = validation_loss;
            self.best_epoch = epoch;
            self.best_params = Some(params.clone());
        }
        epoch.saturating_sub(self.best_epoch) >= self.patience || epoch >= self.max_epochs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamAddr;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(ParamAddr::weight(0), Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut theta = scalar(0.7);
        let mut state = OptimState::new(OptimHyper::new(0.1, 0.5, 1), &theta);
        state.step(&mut theta, &scalar(0.0)).unwrap();
        assert_eq!(theta, scalar(0.7));
    }

    #[test]
    fn single_step_by_hand() {
        let mut theta = scalar(1.0);
        let hyper = OptimHyper {
            learning_rate: 1.0,
            rms_decay: 0.9,
            momentum: 0.0,
            epsilon: 1e-8,
            batch_size: 1,
        };
        let mut state = OptimState::new(hyper, &theta);
        state.step(&mut theta, &scalar(1.0)).unwrap();
        let ms = state
            .mean_square()
            .get(ParamAddr::weight(0))
            .unwrap()
            .data()[0];
        assert!((ms - 0.1).abs() < 1e-15);
        let delta = theta.get(ParamAddr::weight(0)).unwrap().data()[0] - 1.0;
        assert!((delta + 1.0 / (0.1f64 + 1e-8).sqrt()).abs() < 1e-12);
        assert!((delta + 3.1623).abs() < 1e-4);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut theta = scalar(1.0);
        let mut state = OptimState::new(OptimHyper::new(0.1, 0.5, 1), &theta);
        let err = state.step(&mut theta, &scalar(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param } if param == "layer 0 weight"));
        assert_eq!(theta, scalar(1.0));
    }

    #[test]
    fn early_stop_flat_losses_halt_at_patience_expiry() {
        let p = scalar(0.0);
        let mut es = EarlyStopState::new(200, 2000);
        let halted_at = (1..=2000).find(|&e| es.update(e, 1.0, &p)).unwrap();
        assert_eq!(halted_at, 201);
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn early_stop_decreasing_losses_run_to_cap() {
        let p = scalar(0.0);
        let mut es = EarlyStopState::new(5, 50);
        let halted_at = (1..=100)
            .find(|&e| es.update(e, 100.0 - e as f64, &p))
            .unwrap();
        assert_eq!(halted_at, 50);
    }

    #[test]
    fn early_stop_keeps_best_snapshot() {
        let mut es = EarlyStopState::new(10, 100);
        for (epoch, loss) in [3.0, 2.0, 4.0, 4.0, 4.0].into_iter().enumerate() {
            es.update(epoch + 1, loss, &scalar(epoch as f64 + 1.0));
        }
        assert_eq!(es.best_epoch(), 2);
        assert_eq!(es.best_params(), Some(&scalar(2.0)));
        assert_eq!(es.best_validation_loss(), 2.0);
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let p = scalar(0.0);
        let mut es = EarlyStopState::new(3, 100);
        es.update(1, 1.0, &p);
        es.update(2, 1.0 - 1e-12, &p);
        assert_eq!(es.best_epoch(), 1);
        es.update(3, f64::NAN, &p);
        assert_eq!(es.best_epoch(), 1);
    }
}
