//! Fixed-capacity episodic memory filled by reservoir sampling, and the ER /
//! DER++ replay losses built on top of it.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::loss::{range_cross_entropy, LossOutput};
use crate::nn::{mse, ClassRange, GradientSet, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<F> {
    /// One example without the batch axis.
    pub input: Tensor<F>,
    pub label: usize,
    /// Logits of the model at insertion time, length `class_count`.
    pub stored_logits: Tensor<F>,
    pub task_id: usize,
    pub insertion_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer<F> {
    capacity: usize,
    entries: Vec<BufferEntry<F>>,
    seen_count: u64,
}

impl<F: Scalar> RehearsalBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        RehearsalBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen_count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry<F>] {
        &self.entries
    }

    /// Number of candidates offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    /// Reservoir step. Returns the slot the candidate was written to, if any.
    pub fn reservoir_insert<R: Rng + ?Sized>(&mut self, candidate: BufferEntry<F>, rng: &mut R) -> Option<usize> {
        let slot = if self.entries.len() < self.capacity {
            self.entries.push(candidate);
            Some(self.entries.len() - 1)
        } else {
            let j = rng.random_range(0..=self.seen_count);
            if (j as usize) < self.capacity {
                self.entries[j as usize] = candidate;
                Some(j as usize)
            } else {
                None
            }
        };
        self.seen_count += 1;
        slot
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&BufferEntry<F>>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.entries.is_empty() {
            return Err(Error::State("cannot sample from an empty buffer".into()));
        }
        Ok((0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect())
    }

    /// Writes one JSON object per entry: `{task_id, label, insertion_id}`,
    /// plus the flattened `input` when `with_inputs` is set.
    pub fn dump_jsonl<W: Write>(&self, mut out: W, with_inputs: bool) -> Result<()> {
        for e in &self.entries {
            let mut v = serde_json::json!({
                "task_id": e.task_id,
                "label": e.label,
                "insertion_id": e.insertion_id,
            });
            if with_inputs {
                v["input"] = serde_json::to_value(e.input.data())?;
            }
            writeln!(out, "{v}").map_err(|e| Error::io("<buffer dump>", e))?;
        }
        Ok(())
    }
}

/// Entries stacked into batch tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch<F> {
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
    pub stored_logits: Tensor<F>,
}

impl<F: Scalar> ReplayBatch<F> {
    pub fn from_entries(entries: &[&BufferEntry<F>]) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Argument("replay batch needs at least one entry".into()))?;
        Ok(ReplayBatch {
            inputs: Tensor::stack_rows(first.input.shape(), entries.iter().map(|e| e.input.data()))?,
            labels: entries.iter().map(|e| e.label).collect(),
            stored_logits: Tensor::stack_rows(
                first.stored_logits.shape(),
                entries.iter().map(|e| e.stored_logits.data()),
            )?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Result of one joint forward/backward pass over current and replayed data.
#[derive(Debug, Clone)]
pub struct ReplayOutput<F> {
    pub loss: f64,
    pub grads: GradientSet<F>,
    /// Logits of the current batch rows, before any update.
    pub current_logits: Tensor<F>,
    /// Rows that went through the forward pass, replay included.
    pub rows: usize,
}

type Term<'a, F> = (&'a Tensor<F>, Box<dyn Fn(&Tensor<F>) -> Result<LossOutput<F>> + 'a>);

/// Runs every term's inputs through one concatenated forward pass, sums the
/// term losses and backpropagates the stacked logit gradients.
fn joint_step<F: Scalar>(model: &Model<F>, terms: Vec<Term<'_, F>>) -> Result<ReplayOutput<F>> {
    let row_shape = &model.input_shape().to_vec();
    let rows: usize = terms.iter().map(|(x, _)| x.rows()).sum();
    let inputs = Tensor::stack_rows(
        row_shape,
        terms.iter().flat_map(|(x, _)| (0..x.rows()).map(move |r| x.row(r))),
    )?;
    let (logits, cache) = model.forward(&inputs)?;
    let c = logits.row_len();
    let mut grad = Vec::with_capacity(rows * c);
    let mut loss = 0.0;
    let mut current_logits = None;
    let mut at = 0;
    for (x, f) in &terms {
        let part = Tensor::stack_rows(&[c], (at..at + x.rows()).map(|r| logits.row(r)))?;
        let out = f(&part)?;
        loss += out.loss;
        grad.extend_from_slice(out.grad.data());
        current_logits.get_or_insert(part);
        at += x.rows();
    }
    let grads = model.backward(&cache, &Tensor::new(vec![rows, c], grad)?)?;
    Ok(ReplayOutput {
        loss,
        grads,
        current_logits: current_logits.expect("at least the current term"),
        rows,
    })
}

fn scaled<F: Scalar>(mut out: LossOutput<F>, coeff: f64) -> LossOutput<F> {
    out.loss *= coeff;
    let c = F::of(coeff);
    out.grad.data_mut().iter_mut().for_each(|g| *g = *g * c);
    out
}

fn seen_range<F: Scalar>(model: &Model<F>) -> Result<ClassRange> {
    model
        .seen_classes()
        .ok_or_else(|| Error::State("model has no registered task".into()))
}

/// Cross-entropy on the current batch restricted to `range`, without replay.
pub fn plain_loss<F: Scalar>(
    model: &Model<F>,
    current: &Tensor<F>,
    labels: &[usize],
    range: ClassRange,
) -> Result<ReplayOutput<F>> {
    joint_step(
        model,
        vec![(current, Box::new(move |l: &Tensor<F>| range_cross_entropy(l, labels, range)))],
    )
}

/// Single-head CE on the current batch plus full CE over seen classes on the
/// replay batch.
pub fn er_loss<F: Scalar>(
    model: &Model<F>,
    current: &Tensor<F>,
    labels: &[usize],
    buffer_batch: Option<&ReplayBatch<F>>,
    task_range: ClassRange,
) -> Result<ReplayOutput<F>> {
    let mut terms: Vec<Term<'_, F>> = vec![(
        current,
        Box::new(move |l: &Tensor<F>| range_cross_entropy(l, labels, task_range)),
    )];
    if let Some(b) = buffer_batch.filter(|b| !b.is_empty()) {
        let seen = seen_range(model)?;
        terms.push((&b.inputs, Box::new(move |l: &Tensor<F>| range_cross_entropy(l, &b.labels, seen))));
    }
    joint_step(model, terms)
}

/// Single-head CE on the current batch, `coeff_mse` times the logit MSE
/// against stored logits on `batch_a`, and `coeff_ce` times full CE over seen
/// classes on `batch_b`.
#[allow(clippy::too_many_arguments)]
pub fn derpp_loss<F: Scalar>(
    model: &Model<F>,
    current: &Tensor<F>,
    labels: &[usize],
    batch_a: Option<&ReplayBatch<F>>,
    batch_b: Option<&ReplayBatch<F>>,
    coeff_mse: f64,
    coeff_ce: f64,
    task_range: ClassRange,
) -> Result<ReplayOutput<F>> {
    if coeff_mse < 0.0 || coeff_ce < 0.0 {
        return Err(Error::Argument(format!(
            "replay coefficients must be >= 0, got {coeff_mse}, {coeff_ce}"
        )));
    }
    let mut terms: Vec<Term<'_, F>> = vec![(
        current,
        Box::new(move |l: &Tensor<F>| range_cross_entropy(l, labels, task_range)),
    )];
    if let Some(a) = batch_a.filter(|b| !b.is_empty() && coeff_mse > 0.0) {
        terms.push((
            &a.inputs,
            Box::new(move |l: &Tensor<F>| Ok(scaled(mse(l, &a.stored_logits)?, coeff_mse))),
        ));
    }
    if let Some(b) = batch_b.filter(|b| !b.is_empty() && coeff_ce > 0.0) {
        let seen = seen_range(model)?;
        terms.push((
            &b.inputs,
            Box::new(move |l: &Tensor<F>| Ok(scaled(range_cross_entropy(l, &b.labels, seen)?, coeff_ce))),
        ));
    }
    joint_step(model, terms)
}
