//! Adaptation strategies: how a target model's starting parameters (and an
//! optional extra loss term) are built from a prior model.
//!
//! Every strategy starts from the same fresh initialisation for a given seed,
//! then overwrites some addresses from the prior:
//!
//! | label       | copied from the prior                     | extra loss          |
//! |-------------|-------------------------------------------|---------------------|
//! | `RESET`     | nothing                                   | none                |
//! | `RESET_PRF` | nothing                                   | pull towards filters|
//! | `REUSE_ALL` | every encoder parameter                   | none                |
//! | `REUSE_CF`  | convolution kernels only                  | none                |
//!
//! The output layer is never copied. Decoders are tied to the encoder, so a
//! copied encoder carries its decoder with it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{init_params, Checkpoint, NetworkSpec, ParamAddr, ParamSet, PriorTerm, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyKind {
    Reset,
    ResetPrf { lambda: f64 },
    ReuseAll,
    ReuseCf,
}

impl StrategyKind {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::Reset => "RESET",
            StrategyKind::ResetPrf { .. } => "RESET_PRF",
            StrategyKind::ReuseAll => "REUSE_ALL",
            StrategyKind::ReuseCf => "REUSE_CF",
        }
    }

    pub fn requires_prior(&self) -> bool {
        !matches!(self, StrategyKind::Reset)
    }

    /// Parses a label; `RESET_PRF` takes its coefficient from `prf_lambda`.
    pub fn from_label(label: &str, prf_lambda: f64) -> Result<Self> {
        match label.trim().to_ascii_uppercase().as_str() {
            "RESET" => Ok(StrategyKind::Reset),
            "RESET_PRF" => {
                if !(prf_lambda.is_finite() && prf_lambda > 0.0) {
                    return Err(Error::Config(format!(
                        "RESET_PRF needs a positive lambda, got {prf_lambda}"
                    )));
                }
                Ok(StrategyKind::ResetPrf { lambda: prf_lambda })
            }
            "REUSE_ALL" => Ok(StrategyKind::ReuseAll),
            "REUSE_CF" => Ok(StrategyKind::ReuseCf),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    /// Accepts `RESET_PRF` only with an explicit coefficient: `RESET_PRF:0.001`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((label, lambda)) if label.trim().eq_ignore_ascii_case("RESET_PRF") => {
                let lambda: f64 = lambda
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad RESET_PRF coefficient in `{s}`")))?;
                StrategyKind::from_label(label, lambda)
            }
            Some(_) => Err(Error::Config(format!("unknown strategy `{s}`"))),
            None if s.trim().eq_ignore_ascii_case("RESET_PRF") => Err(Error::Config(
                "RESET_PRF needs a coefficient, e.g. RESET_PRF:0.001".into(),
            )),
            None => StrategyKind::from_label(s, f64::NAN),
        }
    }
}

/// A strategy together with the task its prior was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationStrategy {
    pub kind: StrategyKind,
    pub prior_task: Option<Task>,
}

impl AdaptationStrategy {
    pub fn reset() -> Self {
        AdaptationStrategy {
            kind: StrategyKind::Reset,
            prior_task: None,
        }
    }

    pub fn new(kind: StrategyKind, prior_task: Option<Task>) -> Result<Self> {
        match (kind.requires_prior(), prior_task) {
            (true, None) => Err(Error::Config(format!("{kind} needs a prior task"))),
            (false, Some(t)) => Err(Error::Config(format!("{kind} takes no prior, got {t}"))),
            _ => Ok(AdaptationStrategy { kind, prior_task }),
        }
    }

    pub fn label(&self) -> &'static str {
        self.kind.label()
    }

    /// `CL`, `AE`, `MT`, or `none`.
    pub fn prior_label(&self) -> String {
        self.prior_task
            .map_or_else(|| "none".to_string(), |t| t.to_string())
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.prior_task {
            Some(t) => write!(f, "{}({t})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Convolution kernels of a prior model, keyed by encoder layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSnapshot {
    filters: BTreeMap<usize, Tensor>,
}

impl PriorSnapshot {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.filters.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.filters.iter().map(|(&l, t)| (l, t))
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// The kernels as weight entries of a parameter set.
    pub fn to_param_set(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (&layer, t) in &self.filters {
            out.insert(ParamAddr::weight(layer), t.clone());
        }
        out
    }
}

pub fn extract_prior_filters(prior: &Checkpoint) -> Result<PriorSnapshot> {
    let mut filters = BTreeMap::new();
    for layer in prior.spec.conv_layers() {
        filters.insert(
            layer,
            prior.params.expect(ParamAddr::weight(layer))?.clone(),
        );
    }
    if filters.is_empty() {
        return Err(Error::Transfer {
            layer: 0,
            reason: "prior model has no convolutional layers".into(),
        });
    }
    Ok(PriorSnapshot { filters })
}

/// The prior-regularisation term attached to a target run.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBinding {
    pub lambda: f64,
    pub anchors: ParamSet,
}

impl PriorBinding {
    pub fn term(&self) -> PriorTerm<'_> {
        PriorTerm {
            lambda: self.lambda,
            anchors: &self.anchors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTarget {
    pub params: ParamSet,
    pub prior: Option<PriorBinding>,
}

impl PreparedTarget {
    pub fn prior_term(&self) -> Option<PriorTerm<'_>> {
        self.prior.as_ref().map(PriorBinding::term)
    }
}

/// Builds the starting point of a target run. The prior is only read.
pub fn prepare_target(
    strategy: &AdaptationStrategy,
    prior: Option<&Checkpoint>,
    target_spec: &NetworkSpec,
    seed: u64,
) -> Result<PreparedTarget> {
    let mut params = init_params(target_spec, seed)?;
    if !strategy.kind.requires_prior() {
        return Ok(PreparedTarget {
            params,
            prior: None,
        });
    }
    let prior =
        prior.ok_or_else(|| Error::Config(format!("{strategy} needs a prior checkpoint")))?;
    if let Some(t) = strategy.prior_task {
        if prior.spec.task != t {
            return Err(Error::Config(format!(
                "{strategy} was given a {} prior",
                prior.spec.task
            )));
        }
    }
    check_encoders(&prior.spec, target_spec)?;
    match strategy.kind {
        StrategyKind::Reset => unreachable!("handled above"),
        StrategyKind::ResetPrf { lambda } => {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Config(format!(
                    "prior-regularisation lambda {lambda} is invalid"
                )));
            }
            let snapshot = extract_prior_filters(prior)?;
            Ok(PreparedTarget {
                params,
                prior: Some(PriorBinding {
                    lambda,
                    anchors: snapshot.to_param_set(),
                }),
            })
        }
        StrategyKind::ReuseAll => {
            for layer in 0..target_spec.encoder_len() {
                for addr in [ParamAddr::weight(layer), ParamAddr::bias(layer)] {
                    if let Some(dst) = params.get_mut(addr) {
                        *dst = prior.params.expect(addr)?.clone();
                    }
                }
            }
            Ok(PreparedTarget {
                params,
                prior: None,
            })
        }
        StrategyKind::ReuseCf => {
            let snapshot = extract_prior_filters(prior)?;
            for (layer, kernel) in snapshot.iter() {
                *params
                    .get_mut(ParamAddr::weight(layer))
                    .expect("checked encoder") = kernel.clone();
            }
            Ok(PreparedTarget {
                params,
                prior: None,
            })
        }
    }
}

/// The prior's encoder must match the target's layer for layer, so that every
/// copied tensor lands on an identically shaped slot.
fn check_encoders(prior: &NetworkSpec, target: &NetworkSpec) -> Result<()> {
    if prior.input_shape != target.input_shape {
        return Err(Error::Transfer {
            layer: 0,
            reason: format!(
                "input shape {:?} differs from the target's {:?}",
                prior.input_shape, target.input_shape
            ),
        });
    }
    let (p, t) = (prior.encoder(), target.encoder());
    for i in 0..p.len().max(t.len()) {
        let same = match (p.get(i), t.get(i)) {
            (Some(a), Some(b)) => structurally_equal(a, b),
            _ => false,
        };
        if !same {
            return Err(Error::Transfer {
                layer: i,
                reason: format!(
                    "prior layer {} does not match target layer {}",
                    describe(p.get(i)),
                    describe(t.get(i))
                ),
            });
        }
    }
    Ok(())
}

fn structurally_equal(a: &LayerSpec, b: &LayerSpec) -> bool {
    match (a, b) {
        // Dropout rates may differ between runs without changing any parameter.
        (LayerSpec::Dropout { .. }, LayerSpec::Dropout { .. }) => true,
        _ => a == b,
    }
}

fn describe(l: Option<&LayerSpec>) -> String {
    l.map_or_else(|| "(none)".into(), |l| format!("{l:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::losses::RegConfig;
    use crate::model::{build_cae_from_cnn, ParamKind};

    fn cnn() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv {
                    maps: 2,
                    kh: 3,
                    kw: 3,
                    act: Activation::Sigmoid,
                },
                LayerSpec::MaxPool { ph: 2, pw: 2 },
                LayerSpec::Dense {
                    units: 4,
                    act: Activation::Sigmoid,
                },
                LayerSpec::Dense {
                    units: 3,
                    act: Activation::Softmax,
                },
            ],
            task: Task::Cl,
            alpha_mt: 0.01,
            reg: RegConfig::default(),
        }
    }

    fn prior(spec: &NetworkSpec, seed: u64) -> Checkpoint {
        Checkpoint::new(
            spec.clone(),
            init_params(spec, seed).unwrap(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn labels_round_trip() {
        for s in ["RESET", "REUSE_ALL", "REUSE_CF", "RESET_PRF:0.001"] {
            let k: StrategyKind = s.parse().unwrap();
            assert!(s.starts_with(k.label()));
        }
        assert!("RESET_PRF".parse::<StrategyKind>().is_err());
        assert!("FREEZE".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn strategy_prior_rules() {
        assert!(AdaptationStrategy::new(StrategyKind::ReuseCf, None).is_err());
        assert!(AdaptationStrategy::new(StrategyKind::Reset, Some(Task::Cl)).is_err());
        let s = AdaptationStrategy::new(StrategyKind::ReuseAll, Some(Task::Ae)).unwrap();
        assert_eq!(s.to_string(), "REUSE_ALL(AE)");
    }

    #[test]
    fn reset_is_fresh_init() {
        let spec = cnn();
        let out = prepare_target(&AdaptationStrategy::reset(), None, &spec, 7).unwrap();
        assert_eq!(out.params, init_params(&spec, 7).unwrap());
        assert!(out.prior.is_none());
    }

    #[test]
    fn missing_prior_is_config_error() {
        let s = AdaptationStrategy::new(StrategyKind::ReuseAll, Some(Task::Cl)).unwrap();
        assert!(matches!(
            prepare_target(&s, None, &cnn(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reuse_cf_differs_from_reset_only_at_kernels() {
        let spec = cnn();
        let p = prior(&spec, 99);
        let cf = AdaptationStrategy::new(StrategyKind::ReuseCf, Some(Task::Cl)).unwrap();
        let a = prepare_target(&cf, Some(&p), &spec, 3).unwrap().params;
        let b = init_params(&spec, 3).unwrap();
        assert_eq!(a.differing_addresses(&b), vec![ParamAddr::weight(0)]);
    }

    #[test]
    fn reuse_all_cl_to_cl_replaces_only_the_head() {
        let spec = cnn();
        let mut p = prior(&spec, 99);
        for (addr, t) in p.params.iter_mut() {
            if addr.kind == ParamKind::Bias {
                *t = t.map(|_| 0.25);
            }
        }
        let s = AdaptationStrategy::new(StrategyKind::ReuseAll, Some(Task::Cl)).unwrap();
        let a = prepare_target(&s, Some(&p), &spec, 3).unwrap().params;
        assert_eq!(
            a.differing_addresses(&p.params),
            vec![ParamAddr::weight(3), ParamAddr::bias(3)]
        );
    }

    #[test]
    fn reuse_all_cl_prior_into_ae_target() {
        let spec = cnn();
        let p = prior(&spec, 99);
        let ae = build_cae_from_cnn(&spec).unwrap();
        let s = AdaptationStrategy::new(StrategyKind::ReuseAll, Some(Task::Cl)).unwrap();
        let a = prepare_target(&s, Some(&p), &ae, 3).unwrap().params;
        for (addr, t) in a.iter() {
            assert_eq!(t, p.params.get(addr).unwrap());
        }
    }

    #[test]
    fn prior_task_mismatch_is_rejected() {
        let spec = cnn();
        let p = prior(&spec, 99);
        let s = AdaptationStrategy::new(StrategyKind::ReuseCf, Some(Task::Ae)).unwrap();
        assert!(matches!(
            prepare_target(&s, Some(&p), &spec, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn incompatible_prior_names_the_layer() {
        let spec = cnn();
        let mut other = cnn();
        other.layers[0] = LayerSpec::Conv {
            maps: 3,
            kh: 3,
            kw: 3,
            act: Activation::Sigmoid,
        };
        let p = prior(&other, 1);
        let s = AdaptationStrategy::new(StrategyKind::ReuseCf, Some(Task::Cl)).unwrap();
        let err = prepare_target(&s, Some(&p), &spec, 1).unwrap_err();
        assert!(matches!(err, Error::Transfer { layer: 0, .. }));
    }

    #[test]
    fn reset_prf_binds_prior_filters() {
        let spec = cnn();
        let p = prior(&spec, 99);
        let s = AdaptationStrategy::new(StrategyKind::ResetPrf { lambda: 0.5 }, Some(Task::Cl))
            .unwrap();
        let out = prepare_target(&s, Some(&p), &spec, 3).unwrap();
        assert_eq!(out.params, init_params(&spec, 3).unwrap());
        let binding = out.prior.unwrap();
        assert_eq!(binding.lambda, 0.5);
        assert_eq!(
            binding.anchors.addresses().collect::<Vec<_>>(),
            vec![ParamAddr::weight(0)]
        );
        assert_eq!(
            binding.anchors.get(ParamAddr::weight(0)),
            p.params.get(ParamAddr::weight(0))
        );
    }

    #[test]
    fn extract_requires_a_conv_layer() {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::Dense {
                units: 2,
                act: Activation::Softmax,
            }],
            task: Task::Cl,
            alpha_mt: 0.0,
            reg: RegConfig::default(),
        };
        assert!(matches!(
            extract_prior_filters(&prior(&spec, 1)),
            Err(Error::Transfer { .. })
        ));
    }
}
