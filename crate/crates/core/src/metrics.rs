//! Analytic training-cost accounting and Class-IL / Task-IL evaluation.
//!
//! FLOPs count one multiply and one add per multiply-accumulate of the
//! conv/linear layers at their actual mask density. A backward pass costs two
//! forward passes: one for the activation gradients and one for the weight
//! gradients; only the latter shrinks under a gradient mask.

use serde::{Deserialize, Serialize};

use crate::dgm::GradientMask;
use crate::error::{Error, Result};
use crate::harness::TaskStream;
use crate::mask::WeightMask;
use crate::nn::loss::argmax_in;
use crate::nn::{ClassRange, Layer, Model};
use crate::tensor::{Scalar, Tensor};

/// Forward FLOPs of one layer for `batch` examples at layer sparsity `s_l`.
/// `input` is the per-example input shape of the layer.
pub fn layer_forward_flops<F: Scalar>(layer: &Layer<F>, input: &[usize], s_l: f64, batch: u64) -> Result<u64> {
    if !(0.0..=1.0).contains(&s_l) {
        return Err(Error::Argument(format!("layer sparsity must lie in [0, 1], got {s_l}")));
    }
    let dense = match layer {
        Layer::Linear(l) => 2.0 * (l.in_dim() * l.out_dim()) as f64,
        Layer::Conv2d(c) => {
            let out = layer.output_shape(input)?;
            let k = c.kernel();
            2.0 * (k * k * c.in_ch() * c.out_ch() * out[1] * out[2]) as f64
        }
        Layer::Relu | Layer::Flatten => 0.0,
    };
    Ok((dense * (1.0 - s_l)).round() as u64 * batch)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer_name: String,
    pub forward: u64,
    pub backward: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub forward: u64,
    pub backward: u64,
    pub per_layer: Vec<LayerFlops>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }

    /// Adds one training step over `batch` rows. Under a gradient mask the
    /// weight-gradient half of each layer's backward cost is scaled by the
    /// ratio of gradient-mask to weight-mask active counts of that layer.
    pub fn accumulate_training_flops<F: Scalar>(
        &mut self,
        model: &Model<F>,
        weight_mask: &WeightMask,
        gradient_mask: Option<&GradientMask>,
        batch: u64,
    ) -> Result<()> {
        weight_mask.check_model(model)?;
        if self.per_layer.is_empty() {
            self.per_layer = model
                .layers()
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_maskable())
                .map(|(i, l)| LayerFlops {
                    layer_name: format!("{}.{i}", l.name()),
                    ..LayerFlops::default()
                })
                .collect();
        }
        let maskable = model.layers().iter().zip(model.layer_shapes()).filter(|(l, _)| l.is_maskable());
        for (m, ((layer, (input, _)), slot)) in maskable.zip(self.per_layer.iter_mut()).enumerate() {
            let s_l = 1.0 - weight_mask.layer_density(m);
            let fwd = layer_forward_flops(layer, &input, s_l, 1)?;
            let weight_grad = match gradient_mask {
                Some(g) => {
                    let active = weight_mask.layer_active(m);
                    if active == 0 {
                        0
                    } else {
                        (fwd as f64 * g.layer_active(m) as f64 / active as f64).round() as u64
                    }
                }
                None => fwd,
            };
            let (f, b) = (fwd * batch, (fwd + weight_grad) * batch);
            slot.forward += f;
            slot.backward += b;
            self.forward += f;
            self.backward += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub batch: usize,
    /// `Σ_l O_l·H_l·W_l` over the conv/linear outputs of one example.
    pub activation_count: usize,
    /// Maskable weight count.
    pub n: usize,
    pub s: f64,
    pub q: f64,
    pub bytes_per_number: usize,
}

impl MemoryReport {
    pub fn for_model<F: Scalar>(model: &Model<F>, batch: usize, s: f64, q: f64) -> Self {
        let activation_count = model
            .layers()
            .iter()
            .zip(model.layer_shapes())
            .filter(|(l, _)| l.is_maskable())
            .map(|(_, (_, out))| out.iter().product::<usize>())
            .sum();
        MemoryReport {
            batch,
            activation_count,
            n: model.maskable_shapes().iter().map(|s| s.iter().product::<usize>()).sum(),
            s,
            q,
            bytes_per_number: F::PRECISION.bytes(),
        }
    }

    /// `(2B·A + (1−s)N + (1−(s+q))N)·b_w`, rounded to whole bytes.
    pub fn footprint_bytes(&self) -> u64 {
        memory_footprint(self.batch, self.activation_count, self.n, self.s, self.q, self.bytes_per_number)
    }
}

/// `(2B·A + (1−s)N + (1−(s+q))N)·b_w`, rounded to whole bytes.
pub fn memory_footprint(batch: usize, activations: usize, n: usize, s: f64, q: f64, b_w: usize) -> u64 {
    let n = n as f64;
    let numbers = 2.0 * (batch * activations) as f64 + (1.0 - s) * n + (1.0 - (s + q)) * n;
    (numbers * b_w as f64).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ClassIl,
    TaskIl,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-il" => Ok(EvalMode::ClassIl),
            "task-il" => Ok(EvalMode::TaskIl),
            _ => Err(Error::Argument(format!("unknown mode {s:?}, expected class-il or task-il"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub mode: EvalMode,
    /// Percent correct on each task's test set.
    pub per_task: Vec<f64>,
    /// Unweighted mean of `per_task`.
    pub average: f64,
}

/// Rows per evaluation forward pass.
const EVAL_CHUNK: usize = 512;

/// Test accuracy on every task of `stream`. Class-IL predicts over all
/// classes the model has seen; Task-IL over the true task's classes only.
pub fn evaluate<F: Scalar>(model: &Model<F>, stream: &TaskStream<F>, mode: EvalMode) -> Result<AccuracyTable> {
    let seen = model
        .seen_classes()
        .ok_or_else(|| Error::State("model has not been trained on any task".into()))?;
    let mut per_task = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        let range = match mode {
            EvalMode::ClassIl => seen,
            EvalMode::TaskIl => task.class_range,
        };
        per_task.push(accuracy(model, &task.test.inputs, &task.test.labels, range)?);
    }
    let average = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
    Ok(AccuracyTable { mode, per_task, average })
}

/// Percent of rows whose argmax within `range` equals the label.
pub fn accuracy<F: Scalar>(model: &Model<F>, inputs: &Tensor<F>, labels: &[usize], range: ClassRange) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty set".into()));
    }
    let row_shape = model.input_shape().to_vec();
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let x = Tensor::stack_rows(&row_shape, (start..end).map(|r| inputs.row(r)))?;
        let logits = model.predict(&x)?;
        correct += (start..end)
            .filter(|&r| argmax_in(logits.row(r - start), range) == labels[r])
            .count();
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_memory_case() {
        assert_eq!(memory_footprint(3, 7, 50, 0.0, 0.0, 4), ((2 * 3 * 7 + 2 * 50) * 4) as u64);
        assert_eq!(memory_footprint(3, 7, 0, 0.9, 0.02, 4), (2 * 3 * 7 * 4) as u64);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("class-il".parse::<EvalMode>().unwrap(), EvalMode::ClassIl);
        assert_eq!("task-il".parse::<EvalMode>().unwrap(), EvalMode::TaskIl);
        assert!("both".parse::<EvalMode>().is_err());
    }
}
