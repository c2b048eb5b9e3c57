//! Reported quantities: accuracies, sparsity, ensemble stability, and
//! improvement captured.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_search, AttackConfig};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{invalid, Result};
use crate::gates::GateConfig;
use crate::network::{Classifier, MlpParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub natural_acc: f64,
    /// Keyed by the radius formatted with `{:e}`, e.g. `"1e-2"`.
    pub adv_acc: BTreeMap<String, f64>,
    pub sparsity: f64,
    /// Only defined for ensembles of at least two models.
    pub stability_score: Option<f64>,
}

pub fn radius_key(rho: f64) -> String {
    format!("{rho:e}")
}

/// Mean over points of `sum_k p_k (1 - p_k)`, where `p_k` is the share of
/// models predicting class `k`. `predictions[m][i]` is model `m`'s class for
/// point `i`.
pub fn stability_score(predictions: &[Vec<usize>], num_classes: usize) -> Result<f64> {
    let s = predictions.len();
    if s < 2 {
        return Err(invalid(format!("stability score needs at least 2 models, got {s}")));
    }
    let n = predictions[0].len();
    if predictions.iter().any(|p| p.len() != n) {
        return Err(invalid("prediction rows have different lengths"));
    }
    if n == 0 {
        return Err(invalid("stability score needs at least one point"));
    }
    let mut counts = vec![0usize; num_classes];
    let mut total = 0.0;
    for i in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for row in predictions {
            let k = row[i];
            if k >= num_classes {
                return Err(invalid(format!("class {k} outside [0, {num_classes})")));
            }
            counts[k] += 1;
        }
        total += counts
            .iter()
            .map(|&c| {
                let p = c as f64 / s as f64;
                p * (1.0 - p)
            })
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Fraction of weights pruned at test time. Ungated models count stored
/// weights that are exactly zero.
pub fn sparsity_fraction<T: Scalar>(params: &MlpParams<T>, gate_cfg: &GateConfig) -> f64 {
    let total = params.num_weights();
    if total == 0 {
        return 0.0;
    }
    let zeros: usize = match params.test_masks(gate_cfg) {
        Some(masks) => masks.iter().map(|m| m.as_slice().iter().filter(|v| **v == T::zero()).count()).sum(),
        None => params
            .layers
            .iter()
            .map(|l| l.weight.as_slice().iter().filter(|v| **v == T::zero()).count())
            .sum(),
    };
    zeros as f64 / total as f64
}

pub fn improvement_captured(nominal_acc: f64, combined_acc: f64) -> Result<f64> {
    if nominal_acc >= 1.0 {
        return Err(invalid("improvement captured is undefined when the nominal accuracy is 1"));
    }
    Ok((combined_acc - nominal_acc) / (1.0 - nominal_acc))
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

pub fn natural_accuracy<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    Ok(accuracy(&model.predict(x)?, y))
}

pub fn adversarial_accuracy<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<f64> {
    let res = pgd_search(model, x, y, cfg)?;
    Ok(accuracy_from_fooled(&res.fooled))
}

fn accuracy_from_fooled(fooled: &[bool]) -> f64 {
    if fooled.is_empty() {
        return 0.0;
    }
    fooled.iter().filter(|f| !**f).count() as f64 / fooled.len() as f64
}

/// Adversarial accuracy at several radii. Radii are attacked in increasing
/// order and a point broken at a smaller radius stays broken, since the
/// smaller ball lies inside the larger one.
pub fn adversarial_curve<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: &[usize],
    radii: &[f64],
    base: &AttackConfig,
) -> Result<Vec<(f64, f64)>> {
    let mut order: Vec<f64> = radii.to_vec();
    order.sort_by(f64::total_cmp);
    order.dedup();
    let mut broken = vec![false; y.len()];
    let mut out = Vec::with_capacity(order.len());
    for rho in order {
        let cfg = base.with_radius(rho);
        let res = pgd_search(model, x, y, &cfg)?;
        for (b, f) in broken.iter_mut().zip(&res.fooled) {
            *b |= *f;
        }
        out.push((rho, accuracy_from_fooled(&broken)));
    }
    Ok(out)
}

/// Natural accuracy, adversarial curve, and sparsity of one trained model.
pub fn evaluate<T: Scalar>(
    params: &MlpParams<T>,
    gate_cfg: &GateConfig,
    x: &Tensor<T>,
    y: &[usize],
    radii: &[f64],
    attack: &AttackConfig,
) -> Result<MetricBundle> {
    let model = Classifier::new(params, gate_cfg);
    let natural_acc = natural_accuracy(&model, x, y)?;
    let adv_acc = adversarial_curve(&model, x, y, radii, attack)?
        .into_iter()
        .map(|(r, a)| (radius_key(r), a))
        .collect();
    Ok(MetricBundle { natural_acc, adv_acc, sparsity: sparsity_fraction(params, gate_cfg), stability_score: None })
}
