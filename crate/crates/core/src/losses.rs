//! Task losses, the multi-task scalarisation and the regularisers.
//!
//! Batch losses are means over the batch, so every per-item gradient returned
//! here already carries the `1 / N` factor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside the logarithm of the cross entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub l2_lambda: f64,
    pub prior_lambda: f64,
    pub sparsity_coeff: f64,
    pub sparsity_target: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            l2_lambda: 0.0,
            prior_lambda: 0.0,
            sparsity_coeff: 0.0,
            sparsity_target: 0.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l2_lambda", self.l2_lambda),
            ("prior_lambda", self.prior_lambda),
            ("sparsity_coeff", self.sparsity_coeff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sparsity_target) {
            return Err(Error::Config(format!(
                "sparsity_target must lie in [0, 1], got {}",
                self.sparsity_target
            )));
        }
        Ok(())
    }
}

/// One named contribution to the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
}

fn check_batch(op: &'static str, preds: &[Tensor], targets: &[Tensor]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Dimension {
            op,
            axis: "batch",
            expected: targets.len(),
            found: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Usage(format!("{op} of an empty batch")));
    }
    for (p, t) in preds.iter().zip(targets) {
        p.expect_same_shape(op, t)?;
    }
    Ok(())
}

/// Mean categorical cross entropy of probability vectors against one-hot targets.
pub fn cce(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    check_batch("cce", preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.data()
                .iter()
                .zip(t.data())
                .map(|(&y, &t)| {
                    if t == 0.0 {
                        0.0
                    } else {
                        -t * y.max(LOG_FLOOR).ln()
                    }
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Gradient of [`cce`] with respect to each prediction.
pub fn cce_grad(preds: &[Tensor], targets: &[Tensor]) -> Result<Vec<Tensor>> {
    check_batch("cce", preds, targets)?;
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.zip_map(t, |y, t| {
                if t == 0.0 || y < LOG_FLOOR {
                    0.0
                } else {
                    -t / (y * n)
                }
            })
        })
        .collect()
}

/// `(1/N) * sum_n ||t_n - y_n||^2`.
pub fn mse(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    check_batch("mse", preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.data()
                .iter()
                .zip(t.data())
                .map(|(y, t)| (t - y) * (t - y))
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn mse_grad(preds: &[Tensor], targets: &[Tensor]) -> Result<Vec<Tensor>> {
    check_batch("mse", preds, targets)?;
    let scale = 2.0 / preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p.zip_map(t, |y, t| scale * (y - t)))
        .collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "multi-task weight {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `(1 - alpha) * l_cl + alpha * l_ae`.
pub fn multitask(l_cl: f64, l_ae: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    // Exact at the endpoints: alpha = 0 reproduces the classifier loss bit for bit.
    Ok(if alpha == 0.0 {
        l_cl
    } else if alpha == 1.0 {
        l_ae
    } else {
        (1.0 - alpha) * l_cl + alpha * l_ae
    })
}

/// Weights `(w_cl, w_ae)` of the two task losses in [`multitask`].
pub fn multitask_weights(alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha, alpha))
}

/// `(lambda / 2) * sum ||w||^2`.
pub fn l2<'a>(weights: impl IntoIterator<Item = &'a Tensor>, lambda: f64) -> f64 {
    0.5 * lambda * weights.into_iter().map(Tensor::sq_norm).sum::<f64>()
}

/// `(lambda / 2) * ||theta_old - theta||^2` summed over paired tensors.
pub fn prior_reg(theta: &[&Tensor], theta_old: &[&Tensor], lambda: f64) -> Result<f64> {
    check_prior_pairs(theta, theta_old)?;
    let mut total = 0.0;
    for (t, o) in theta.iter().zip(theta_old) {
        total += t
            .data()
            .iter()
            .zip(o.data())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>();
    }
    Ok(0.5 * lambda * total)
}

/// `lambda * (theta - theta_old)` for each paired tensor.
pub fn prior_reg_grad(
    theta: &[&Tensor],
    theta_old: &[&Tensor],
    lambda: f64,
) -> Result<Vec<Tensor>> {
    check_prior_pairs(theta, theta_old)?;
    theta
        .iter()
        .zip(theta_old)
        .map(|(t, o)| t.zip_map(o, |a, b| lambda * (a - b)))
        .collect()
}

fn check_prior_pairs(theta: &[&Tensor], theta_old: &[&Tensor]) -> Result<()> {
    if theta.len() != theta_old.len() {
        return Err(Error::Config(format!(
            "prior snapshot covers {} tensors, parameters cover {}",
            theta_old.len(),
            theta.len()
        )));
    }
    for (t, o) in theta.iter().zip(theta_old) {
        if t.shape() != o.shape() {
            return Err(Error::Config(format!(
                "prior snapshot shape {:?} does not match parameter shape {:?}",
                o.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Hoyer's sparseness `(sqrt(n) - |a|_1 / |a|_2) / (sqrt(n) - 1)`, 1 for a
/// one-hot vector and 0 for a constant one. An all-zero vector scores 0.
pub fn hoyer_sparseness(a: &[f64]) -> f64 {
    let l2 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return 0.0;
    }
    if a.len() == 1 {
        return 1.0;
    }
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let root_n = (a.len() as f64).sqrt();
    (root_n - l1 / l2) / (root_n - 1.0)
}

/// `coeff * (target - s(a))^2`.
pub fn hoyer_penalty(a: &[f64], coeff: f64, target: f64) -> f64 {
    let gap = target - hoyer_sparseness(a);
    coeff * gap * gap
}

/// Gradient of [`hoyer_penalty`] with respect to `a`. Zero entries take the
/// zero subgradient of `|a_i|`.
pub fn hoyer_penalty_grad(a: &[f64], coeff: f64, target: f64) -> Vec<f64> {
    let l2sq: f64 = a.iter().map(|v| v * v).sum();
    if l2sq == 0.0 || a.len() == 1 {
        return vec![0.0; a.len()];
    }
    let l2 = l2sq.sqrt();
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let root_n = (a.len() as f64).sqrt();
    let s = (root_n - l1 / l2) / (root_n - 1.0);
    // d penalty / d s = -2 coeff (target - s); d s / d a_i = -(d ratio / d a_i) / (sqrt(n) - 1)
    let outer = 2.0 * coeff * (target - s) / (root_n - 1.0);
    a.iter()
        .map(|&v| {
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            outer * (sign / l2 - l1 * v / (l2 * l2sq))
        })
        .collect()
}
