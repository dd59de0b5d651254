use super::model::{GradientSet, Model};
use crate::error::{Error, Result};
use crate::mask::WeightMask;
use crate::tensor::Scalar;

/// Plain SGD restricted to the weight mask: `w ← w − lr·g` on active
/// positions, masked-out weights pinned to exactly zero, biases always updated.
pub fn sgd_step<F: Scalar>(
    model: &mut Model<F>,
    grads: &GradientSet<F>,
    lr: f64,
    weight_mask: &WeightMask,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    weight_mask.check_model(model)?;
    if grads.layers.len() != model.layers().len() {
        return Err(Error::Dimension(format!(
            "{} gradient slots for {} layers",
            grads.layers.len(),
            model.layers().len()
        )));
    }
    for ((layer, g), bits) in model
        .layers()
        .iter()
        .zip(&grads.layers)
        .filter(|(l, _)| l.is_maskable())
        .zip(weight_mask.layers())
    {
        let g = g.as_ref().ok_or_else(|| Error::Dimension("missing gradient for parametric layer".into()))?;
        let w = layer.weight().expect("maskable layer has weights");
        let b = layer.bias().expect("maskable layer has bias");
        if g.weight.shape() != w.shape() || g.bias.shape() != b.shape() || bits.len() != w.len() {
            return Err(Error::Dimension(format!(
                "gradient {:?} does not match weight {:?}",
                g.weight.shape(),
                w.shape()
            )));
        }
    }

    let lr_f = F::of(lr);
    let mut mask_iter = weight_mask.layers().iter();
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        let Some(g) = g else { continue };
        let bits = mask_iter.next().expect("mask congruent with layers");
        if let Some(w) = layer.weight_mut() {
            for ((wv, gv), &on) in w.data_mut().iter_mut().zip(g.weight.data()).zip(bits) {
                *wv = if on { *wv - lr_f * *gv } else { F::zero() };
            }
        }
        if let Some(b) = layer.bias_mut() {
            for (bv, gv) in b.data_mut().iter_mut().zip(g.bias.data()) {
                *bv = *bv - lr_f * *gv;
            }
        }
    }
    for w in model.maskable_weights() {
        w.ensure_finite("updated weights")?;
    }
    Ok(())
}
