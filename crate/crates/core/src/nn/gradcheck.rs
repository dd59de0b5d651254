//! Finite-difference gradient verification.
//!
//! The numeric side always runs on an `f64` copy of the model with central
//! differences, so it is independent of the precision under test. Samples
//! whose ±step perturbation flips a ReLU input across zero are skipped, since
//! the function is not differentiable across that kink.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layer::Layer;
use super::loss::cross_entropy;
use super::model::{GradientSet, Model};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSlot {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamRef {
    pub layer: usize,
    pub slot: ParamSlot,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub step: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<ParamRef>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

/// Central-difference step: 1e-3 for 32-bit models, 1e-5 for 64-bit.
pub fn default_step(p: Precision) -> f64 {
    match p {
        Precision::F32 => 1e-3,
        Precision::F64 => 1e-5,
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both are exactly zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares analytic full-head cross-entropy gradients of `model` against
/// central differences on `n_samples` randomly chosen parameters.
pub fn numeric_grad_check<F: Scalar>(
    model: &Model<F>,
    batch: &Tensor<F>,
    labels: &[usize],
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (logits, cache) = model.forward(batch)?;
    let loss = cross_entropy(&logits, labels)?;
    let grads = model.backward(&cache, &loss.grad)?;
    check_gradients(model, batch, labels, &grads, n_samples, tol, seed)
}

/// Like [`numeric_grad_check`] but verifies caller-supplied gradients.
/// When `n_samples` covers every parameter, all of them are checked.
pub fn check_gradients<F: Scalar>(
    model: &Model<F>,
    batch: &Tensor<F>,
    labels: &[usize],
    grads: &GradientSet<F>,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    let params = enumerate_params(model);
    let chosen: Vec<ParamRef> = if n_samples >= params.len() {
        params
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, params.len(), n_samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| params[i]).collect()
    };

    let step = default_step(F::PRECISION);
    let mut probe = model.cast::<f64>();
    let batch64 = batch.cast::<f64>();
    let base_pattern = relu_pattern(&probe, &batch64)?;

    let mut report = GradCheckReport {
        precision: F::PRECISION,
        step,
        tolerance: tol,
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        pass: true,
    };
    for p in chosen {
        let original = param(&probe, p);
        set_param(&mut probe, p, original + step);
        let pattern_plus = relu_pattern(&probe, &batch64)?;
        let loss_plus = cross_entropy(&probe.predict(&batch64)?, labels)?.loss;
        set_param(&mut probe, p, original - step);
        let pattern_minus = relu_pattern(&probe, &batch64)?;
        let loss_minus = cross_entropy(&probe.predict(&batch64)?, labels)?.loss;
        set_param(&mut probe, p, original);

        if pattern_plus != base_pattern || pattern_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let analytic = grad_at(grads, p)?;
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(p);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

fn enumerate_params<F: Scalar>(model: &Model<F>) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (layer, l) in model.layers().iter().enumerate() {
        if let Some(w) = l.weight() {
            out.extend((0..w.len()).map(|index| ParamRef {
                layer,
                slot: ParamSlot::Weight,
                index,
            }));
        }
        if let Some(b) = l.bias() {
            out.extend((0..b.len()).map(|index| ParamRef {
                layer,
                slot: ParamSlot::Bias,
                index,
            }));
        }
    }
    out
}

fn param(model: &Model<f64>, p: ParamRef) -> f64 {
    let l = &model.layers()[p.layer];
    match p.slot {
        ParamSlot::Weight => l.weight().expect("weight").data()[p.index],
        ParamSlot::Bias => l.bias().expect("bias").data()[p.index],
    }
}

fn set_param(model: &mut Model<f64>, p: ParamRef, v: f64) {
    let l = &mut model.layers_mut()[p.layer];
    let t = match p.slot {
        ParamSlot::Weight => l.weight_mut().expect("weight"),
        ParamSlot::Bias => l.bias_mut().expect("bias"),
    };
    t.data_mut()[p.index] = v;
}

fn grad_at<F: Scalar>(grads: &GradientSet<F>, p: ParamRef) -> Result<f64> {
    let g = grads
        .layers
        .get(p.layer)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::Dimension(format!("no gradient for layer {}", p.layer)))?;
    let t = match p.slot {
        ParamSlot::Weight => &g.weight,
        ParamSlot::Bias => &g.bias,
    };
    t.data()
        .get(p.index)
        .map(|v| v.as_f64())
        .ok_or_else(|| Error::Dimension(format!("gradient index {} out of range", p.index)))
}

/// Sign pattern of every ReLU input.
fn relu_pattern(model: &Model<f64>, batch: &Tensor<f64>) -> Result<Vec<bool>> {
    let (_, cache) = model.forward(batch)?;
    Ok(model
        .layers()
        .iter()
        .zip(cache.layer_inputs())
        .filter(|(l, _)| matches!(l, Layer::Relu))
        .flat_map(|(_, x)| x.data().iter().map(|v| *v > 0.0))
        .collect())
}
