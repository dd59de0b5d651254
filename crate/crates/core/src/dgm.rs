//! Dynamic gradient masking: a gradient mask nested in the weight mask that
//! keeps only the most important gradients by continual gradient importance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{fraction_count, MaskPos, WeightMask};
use crate::nn::{GradientSet, Model};
use crate::rehearsal::RehearsalBuffer;
use crate::tdm::{gradient_magnitudes, GradientMagnitudes, ImportanceSample};
use crate::tensor::Scalar;

/// Continual gradient importance `α|g̃| + β|g_buf|` for every maskable position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgiScores {
    pub scores: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
}

pub fn cgi_from_magnitudes(mags: &GradientMagnitudes, alpha: f64, beta: f64) -> CgiScores {
    CgiScores {
        scores: mags.combine(alpha, beta),
        alpha,
        beta,
    }
}

pub fn compute_cgi<F: Scalar>(
    model: &Model<F>,
    sample: &ImportanceSample<F>,
    buffer: &RehearsalBuffer<F>,
    alpha: f64,
    beta: f64,
) -> Result<CgiScores> {
    Ok(cgi_from_magnitudes(&gradient_magnitudes(model, sample, buffer)?, alpha, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMask {
    bits: WeightMask,
    extra_sparsity: f64,
}

impl GradientMask {
    /// Gradient mask equal to `weight_mask` (no extra sparsity).
    pub fn identity(weight_mask: &WeightMask) -> Self {
        GradientMask {
            bits: weight_mask.clone(),
            extra_sparsity: 0.0,
        }
    }

    pub fn bits(&self) -> &WeightMask {
        &self.bits
    }

    pub fn extra_sparsity(&self) -> f64 {
        self.extra_sparsity
    }

    pub fn is_active(&self, pos: MaskPos) -> bool {
        self.bits.is_active(pos)
    }

    pub fn active_count(&self) -> usize {
        self.bits.active_count()
    }

    pub fn layer_active(&self, layer: usize) -> usize {
        self.bits.layer_active(layer)
    }

    pub fn sparsity(&self) -> f64 {
        self.bits.sparsity()
    }

    /// Whether the gradient mask never enables a position the weight mask prunes.
    pub fn is_nested_in(&self, weight_mask: &WeightMask) -> bool {
        self.bits.is_subset_of(weight_mask)
    }
}

/// Keeps the `active − round(q·N)` highest-CGI positions of `weight_mask`;
/// among equal scores the lowest positions are kept.
pub fn build_gradient_mask(weight_mask: &WeightMask, cgi: &CgiScores, q: f64) -> Result<GradientMask> {
    let s = weight_mask.target_sparsity();
    if q < 0.0 || s + q >= 1.0 {
        return Err(Error::Argument(format!(
            "gradient extra sparsity q = {q} must be >= 0 with s + q < 1 (s = {s})"
        )));
    }
    weight_mask.check_scores(&cgi.scores)?;
    let drop = fraction_count(q, weight_mask.total());
    let active = weight_mask.active_count();
    let keep = active.saturating_sub(drop);

    let mut ranked: Vec<(f64, MaskPos)> = weight_mask
        .active_positions()
        .map(|p| (cgi.scores[p.layer][p.index], p))
        .collect();
    if let Some((v, p)) = ranked.iter().find(|(v, _)| v.is_nan()) {
        return Err(Error::Numeric(format!("gradient importance {v} at {p:?}")));
    }
    ranked.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut bits: Vec<Vec<bool>> = weight_mask.layers().iter().map(|l| vec![false; l.len()]).collect();
    for (_, p) in ranked.into_iter().take(keep) {
        bits[p.layer][p.index] = true;
    }
    Ok(GradientMask {
        bits: WeightMask::from_bits(weight_mask.shapes(), bits, (s + q).min(1.0))?,
        extra_sparsity: q,
    })
}

/// Zeroes weight gradients outside `mask`; bias gradients are left alone.
pub fn apply_gradient_mask<F: Scalar>(grads: &mut GradientSet<F>, mask: &GradientMask) -> Result<()> {
    let layers = mask.bits.layers();
    let n = grads.maskable_weights().count();
    if n != layers.len() {
        return Err(Error::Dimension(format!(
            "gradient set has {n} maskable layers, mask has {}",
            layers.len()
        )));
    }
    for (g, bits) in grads.maskable_weights_mut().zip(layers) {
        if g.len() != bits.len() {
            return Err(Error::Dimension(format!(
                "gradient of {} entries against mask of {}",
                g.len(),
                bits.len()
            )));
        }
        for (v, &b) in g.data_mut().iter_mut().zip(bits) {
            if !b {
                *v = F::zero();
            }
        }
    }
    Ok(())
}
