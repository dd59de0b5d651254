//! Task-aware dynamic masking: continual weight importance and the
//! intra-/inter-task shrink and expand events of the mask schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{fraction_count, MaskPos, WeightMask};
use crate::nn::loss::range_cross_entropy;
use crate::nn::{ClassRange, GradientSet, Model};
use crate::rehearsal::RehearsalBuffer;
use crate::tensor::{Scalar, Tensor};

/// Rows per forward pass when sweeping the buffer.
const BUFFER_CHUNK: usize = 256;

/// Current-task mini-batches used to estimate the importance gradients.
#[derive(Debug, Clone)]
pub struct ImportanceSample<F> {
    pub batches: Vec<(Tensor<F>, Vec<usize>)>,
    pub task_range: ClassRange,
}

/// Absolute gradients per maskable position: `|g̃|` from the current task and
/// `|g_buf|` from the buffer (`None` when the buffer is empty).
#[derive(Debug, Clone)]
pub struct GradientMagnitudes {
    pub current: Vec<Vec<f64>>,
    pub buffer: Option<Vec<Vec<f64>>>,
}

impl GradientMagnitudes {
    /// `α·|g̃| + β·|g_buf|` per position.
    pub fn combine(&self, alpha: f64, beta: f64) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .current
            .iter()
            .map(|l| l.iter().map(|g| alpha * g).collect())
            .collect();
        if let Some(buf) = &self.buffer {
            for (o, b) in out.iter_mut().zip(buf) {
                o.iter_mut().zip(b).for_each(|(o, b)| *o += beta * b);
            }
        }
        out
    }
}

fn accumulate<F: Scalar>(acc: &mut [Vec<f64>], grads: &GradientSet<F>, weight: f64) {
    for (a, g) in acc.iter_mut().zip(grads.maskable_weights()) {
        a.iter_mut().zip(g.data()).for_each(|(a, g)| *a += weight * g.as_f64());
    }
}

fn zeros_for<F: Scalar>(model: &Model<F>) -> Vec<Vec<f64>> {
    model.maskable_weights().map(|w| vec![0.0; w.len()]).collect()
}

fn absolute(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.iter_mut().flatten().for_each(|x| *x = x.abs());
    v
}

/// Gradient of the single-head loss averaged over the sample's batches and of
/// the full-head loss over seen classes averaged over the whole buffer.
pub fn gradient_magnitudes<F: Scalar>(
    model: &Model<F>,
    sample: &ImportanceSample<F>,
    buffer: &RehearsalBuffer<F>,
) -> Result<GradientMagnitudes> {
    if sample.batches.is_empty() {
        return Err(Error::Argument("importance sample has no batches".into()));
    }
    let mut current = zeros_for(model);
    let w = 1.0 / sample.batches.len() as f64;
    for (x, y) in &sample.batches {
        let (logits, cache) = model.forward(x)?;
        let loss = range_cross_entropy(&logits, y, sample.task_range)?;
        accumulate(&mut current, &model.backward(&cache, &loss.grad)?, w);
    }

    let buffer_grad = if buffer.is_empty() {
        None
    } else {
        let seen = model
            .seen_classes()
            .ok_or_else(|| Error::State("model has no registered task".into()))?;
        let entries = buffer.entries();
        let mut acc = zeros_for(model);
        let row_shape = model.input_shape().to_vec();
        for chunk in entries.chunks(BUFFER_CHUNK) {
            let x = Tensor::stack_rows(&row_shape, chunk.iter().map(|e| e.input.data()))?;
            let y: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let (logits, cache) = model.forward(&x)?;
            let loss = range_cross_entropy(&logits, &y, seen)?;
            let share = chunk.len() as f64 / entries.len() as f64;
            accumulate(&mut acc, &model.backward(&cache, &loss.grad)?, share);
        }
        Some(absolute(acc))
    };
    Ok(GradientMagnitudes {
        current: absolute(current),
        buffer: buffer_grad,
    })
}

/// Continual weight importance `|w| + α|g̃| + β|g_buf|` for every maskable
/// position. Only active positions are consulted by the mask operations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CwiScores {
    pub scores: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
}

pub fn cwi_from_magnitudes<F: Scalar>(
    model: &Model<F>,
    mags: &GradientMagnitudes,
    alpha: f64,
    beta: f64,
) -> CwiScores {
    let mut scores = mags.combine(alpha, beta);
    for (s, w) in scores.iter_mut().zip(model.maskable_weights()) {
        s.iter_mut().zip(w.data()).for_each(|(s, w)| *s += w.as_f64().abs());
    }
    CwiScores { scores, alpha, beta }
}

pub fn compute_cwi<F: Scalar>(
    model: &Model<F>,
    sample: &ImportanceSample<F>,
    buffer: &RehearsalBuffer<F>,
    alpha: f64,
    beta: f64,
) -> Result<CwiScores> {
    let mags = gradient_magnitudes(model, sample, buffer)?;
    Ok(cwi_from_magnitudes(model, &mags, alpha, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdmSchedule {
    /// Target sparsity `s`.
    pub sparsity: f64,
    /// Epochs per stage.
    pub delta_k: usize,
    /// Fraction of all maskable weights swapped by an intra-task event.
    pub p_intra: f64,
    /// Fraction of all maskable weights added for the warm-up of a new task.
    pub p_inter: f64,
}

impl TdmSchedule {
    pub fn new(sparsity: f64, delta_k: usize, p_intra: f64, p_inter: f64) -> Result<Self> {
        let s = TdmSchedule {
            sparsity,
            delta_k,
            p_intra,
            p_inter,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Argument(format!("sparsity must lie in [0, 1), got {}", self.sparsity)));
        }
        if self.delta_k == 0 {
            return Err(Error::Argument("delta_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_intra) {
            return Err(Error::Argument(format!("p_intra must lie in [0, 1], got {}", self.p_intra)));
        }
        if self.p_inter < 0.0 || self.p_inter > self.sparsity {
            return Err(Error::Argument(format!(
                "p_inter must lie in [0, s = {}], got {}",
                self.sparsity, self.p_inter
            )));
        }
        if self.delta_k == 1 && self.p_inter > 0.0 {
            return Err(Error::Argument(
                "delta_k = 1 leaves no warm-up window for p_inter > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn intra_count(&self, n: usize) -> usize {
        fraction_count(self.p_intra, n)
    }

    pub fn inter_count(&self, n: usize) -> usize {
        fraction_count(self.p_inter, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdmEvent {
    InterExpand,
    InterShrink,
    Intra,
}

impl TdmEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            TdmEvent::InterExpand => "inter-expand",
            TdmEvent::InterShrink => "inter-shrink",
            TdmEvent::Intra => "intra",
        }
    }
}

/// Event due at the start of `epoch` (1-based) of task `task` (1-based).
pub fn scheduled_event(task: usize, epoch: usize, delta_k: usize) -> Option<TdmEvent> {
    if task > 1 && epoch == 1 {
        Some(TdmEvent::InterExpand)
    } else if task > 1 && epoch == delta_k {
        Some(TdmEvent::InterShrink)
    } else if epoch % delta_k == 0 {
        Some(TdmEvent::Intra)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskChange {
    pub event: TdmEvent,
    pub removed: Vec<MaskPos>,
    pub grown: Vec<MaskPos>,
}

/// Shrinks `round(p_intra·N)` least-important weights, then grows as many at
/// random. Removed and grown weights are zero in `model` afterwards.
pub fn intra_adjust<F: Scalar, R: Rng + ?Sized>(
    mask: &mut WeightMask,
    model: &mut Model<F>,
    scores: &CwiScores,
    schedule: &TdmSchedule,
    rng: &mut R,
) -> Result<MaskChange> {
    mask.check_model(model)?;
    let count = schedule.intra_count(mask.total());
    if count > mask.active_count() {
        return Err(Error::Argument(format!(
            "intra adjustment of {count} exceeds {} active weights",
            mask.active_count()
        )));
    }
    let removed = mask.shrink_by_scores(&scores.scores, count)?;
    WeightMask::zero_positions(model, &removed);
    let grown = mask.grow_random(count, rng)?;
    WeightMask::zero_positions(model, &grown);
    Ok(MaskChange {
        event: TdmEvent::Intra,
        removed,
        grown,
    })
}

/// Grows `round(p_inter·N)` random unused weights, initialised to zero.
pub fn inter_expand<F: Scalar, R: Rng + ?Sized>(
    mask: &mut WeightMask,
    model: &mut Model<F>,
    schedule: &TdmSchedule,
    rng: &mut R,
) -> Result<MaskChange> {
    mask.check_model(model)?;
    let grown = mask.grow_random(schedule.inter_count(mask.total()), rng)?;
    WeightMask::zero_positions(model, &grown);
    Ok(MaskChange {
        event: TdmEvent::InterExpand,
        removed: Vec::new(),
        grown,
    })
}

/// Removes the `round(p_inter·N)` least-important weights, undoing a prior
/// [`inter_expand`]. Fails with a state error unless the mask is expanded.
pub fn inter_shrink<F: Scalar>(
    mask: &mut WeightMask,
    model: &mut Model<F>,
    scores: &CwiScores,
    schedule: &TdmSchedule,
) -> Result<MaskChange> {
    mask.check_model(model)?;
    let count = schedule.inter_count(mask.total());
    if mask.active_count() != mask.target_active() + count {
        return Err(Error::State(format!(
            "inter shrink expects {} active weights, found {}",
            mask.target_active() + count,
            mask.active_count()
        )));
    }
    let removed = mask.shrink_by_scores(&scores.scores, count)?;
    WeightMask::zero_positions(model, &removed);
    Ok(MaskChange {
        event: TdmEvent::InterShrink,
        removed,
        grown: Vec::new(),
    })
}

/// Runs the event scheduled for `(task, epoch)`, if any. `scores` is only
/// invoked for events that rank weights.
pub fn tdm_step<F: Scalar, R: Rng + ?Sized>(
    task: usize,
    epoch: usize,
    mask: &mut WeightMask,
    model: &mut Model<F>,
    schedule: &TdmSchedule,
    rng: &mut R,
    scores: impl FnOnce(&Model<F>) -> Result<CwiScores>,
) -> Result<Option<MaskChange>> {
    if task == 0 || epoch == 0 {
        return Err(Error::Argument("task and epoch are 1-based".into()));
    }
    let change = match scheduled_event(task, epoch, schedule.delta_k) {
        None => return Ok(None),
        Some(TdmEvent::InterExpand) => inter_expand(mask, model, schedule, rng)?,
        Some(TdmEvent::InterShrink) => {
            let s = scores(model)?;
            inter_shrink(mask, model, &s, schedule)?
        }
        Some(TdmEvent::Intra) => {
            let s = scores(model)?;
            intra_adjust(mask, model, &s, schedule, rng)?
        }
    };
    Ok(Some(change))
}
