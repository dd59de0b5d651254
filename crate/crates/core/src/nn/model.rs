use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Conv2d, Layer, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Half-open range of class indices `[start, end)` owned by one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassRange {
    pub start: usize,
    pub end: usize,
}

impl ClassRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Argument(format!("empty class range {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, class: usize) -> bool {
        class >= self.start && class < self.end
    }

    pub fn overlaps(&self, other: &ClassRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// An ordered stack of layers mapping `[B, ..input_shape]` to `[B, class_count]` logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Model<F> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<F>>,
    class_count: usize,
    task_class_ranges: Vec<ClassRange>,
    /// Bumped on every parameter mutation; used to reject stale caches.
    #[serde(skip)]
    generation: u64,
}

/// Compares architecture, parameters and task ranges; the cache generation is ignored.
impl<F: PartialEq> PartialEq for Model<F> {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.class_count == other.class_count
            && self.task_class_ranges == other.task_class_ranges
    }
}

/// Per-layer inputs recorded by [`Model::forward`], consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    inputs: Vec<Tensor<F>>,
    generation: u64,
}

impl<F> ForwardCache<F> {
    /// Inputs seen by each layer, in layer order.
    pub fn layer_inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }
}

/// Weight and bias gradient of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients for every layer of a model; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<F> {
    pub layers: Vec<Option<ParamGrad<F>>>,
}

impl<F: Scalar> GradientSet<F> {
    pub fn zeros_like(model: &Model<F>) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match (l.weight(), l.bias()) {
                (Some(w), Some(b)) => Some(ParamGrad {
                    weight: Tensor::zeros(w.shape()),
                    bias: Tensor::zeros(b.shape()),
                }),
                _ => None,
            })
            .collect();
        Self { layers }
    }

    /// Weight gradients of maskable layers, in mask order.
    pub fn maskable_weights(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.layers.iter().flatten().map(|p| &p.weight)
    }

    pub fn maskable_weights_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.layers.iter_mut().flatten().map(|p| &mut p.weight)
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|p| {
            p.weight.data().iter().all(|v| *v == F::zero())
                && p.bias.data().iter().all(|v| *v == F::zero())
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }
}

impl<F: Scalar> Model<F> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<F>>, class_count: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            layer.validate()?;
            shape = layer.output_shape(&shape)?;
        }
        if shape != [class_count] {
            return Err(Error::Dimension(format!(
                "model output {shape:?} does not match class count {class_count}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            class_count,
            task_class_ranges: Vec::new(),
            generation: 0,
        })
    }

    /// Flatten, then `Linear → ReLU` for each hidden width, then a linear head.
    pub fn mlp<R: Rng + ?Sized>(
        input_shape: &[usize],
        hidden: &[usize],
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(Layer::Linear(Linear::new(width, h, rng)?));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Linear(Linear::new(width, class_count, rng)?));
        Self::new(input_shape.to_vec(), layers, class_count)
    }

    /// `conv(in→channels, k) → ReLU → flatten → linear`.
    pub fn small_cnn<R: Rng + ?Sized>(
        input_shape: &[usize],
        channels: usize,
        kernel: usize,
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "cnn expects [C, H, W] input, got {input_shape:?}"
            )));
        }
        let conv = Conv2d::new(input_shape[0], channels, kernel, 1, 0, rng)?;
        let (ho, wo) = conv.output_hw(input_shape[1], input_shape[2])?;
        let head = Linear::new(channels * ho * wo, class_count, rng)?;
        Self::new(
            input_shape.to_vec(),
            vec![Layer::Conv2d(conv), Layer::Relu, Layer::Flatten, Layer::Linear(head)],
            class_count,
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn task_class_ranges(&self) -> &[ClassRange] {
        &self.task_class_ranges
    }

    /// Registers the class range of a newly started task.
    pub fn push_task_range(&mut self, range: ClassRange) -> Result<()> {
        if range.end > self.class_count {
            return Err(Error::Argument(format!(
                "class range {}..{} exceeds class count {}",
                range.start, range.end, self.class_count
            )));
        }
        if let Some(r) = self.task_class_ranges.iter().find(|r| r.overlaps(&range)) {
            return Err(Error::Argument(format!(
                "class range {}..{} overlaps existing {}..{}",
                range.start, range.end, r.start, r.end
            )));
        }
        self.task_class_ranges.push(range);
        Ok(())
    }

    /// Per-sample `(input, output)` shape of every layer.
    pub fn layer_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                let out = l.output_shape(&shape).expect("validated at construction");
                let io = (shape.clone(), out.clone());
                shape = out;
                io
            })
            .collect()
    }

    /// Shapes of maskable weight tensors, in mask order.
    pub fn maskable_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .filter_map(|l| l.weight().map(|w| w.shape().to_vec()))
            .collect()
    }

    pub fn maskable_weights(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.layers.iter().filter_map(|l| l.weight())
    }

    pub fn maskable_weights_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.generation += 1;
        self.layers.iter_mut().filter_map(|l| l.weight_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight().map_or(0, |w| w.len()) + l.bias().map_or(0, |b| b.len()))
            .sum()
    }

    fn check_batch(&self, batch: &Tensor<F>) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match model input [B, {:?}]",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass returning logits `[B, class_count]` and the activation cache.
    pub fn forward(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, ForwardCache<F>)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let y = layer.forward(&x)?;
            inputs.push(x);
            x = y;
        }
        x.ensure_finite("logits")?;
        Ok((
            x,
            ForwardCache {
                inputs,
                generation: self.generation,
            },
        ))
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        x.ensure_finite("logits")?;
        Ok(x)
    }

    /// Backpropagates `grad_logits` through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &Tensor<F>) -> Result<GradientSet<F>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "cache holds {} layer inputs, model has {} layers",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        if cache.generation != self.generation {
            return Err(Error::State(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.inputs.first().map_or(0, |t| t.rows());
        if grad_logits.shape() != [batch, self.class_count] {
            return Err(Error::Dimension(format!(
                "logit gradient {:?} does not match [{batch}, {}]",
                grad_logits.shape(),
                self.class_count
            )));
        }
        let mut layers = vec![None; self.layers.len()];
        let mut grad = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gi, params) = layer.backward(&cache.inputs[i], &grad)?;
            layers[i] = params.map(|(weight, bias)| ParamGrad { weight, bias });
            grad = gi;
        }
        Ok(GradientSet { layers })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            class_count: self.class_count,
            task_class_ranges: self.task_class_ranges.clone(),
            generation: 0,
        }
    }

    /// Smallest range covering every registered task range, `None` before the first task.
    pub fn seen_classes(&self) -> Option<ClassRange> {
        let start = self.task_class_ranges.iter().map(|r| r.start).min()?;
        let end = self.task_class_ranges.iter().map(|r| r.end).max()?;
        Some(ClassRange { start, end })
    }
}
