//! The training loop wiring masks, replay, data removal and gradient masking.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Architecture, Method, TrainConfig};
use super::data::{TaskData, TaskStream};
use crate::ddr::{remove_easiest, CounterReset, MisclassCounter, RemovalPolicy};
use crate::dgm::{build_gradient_mask, compute_cgi, apply_gradient_mask, GradientMask};
use crate::error::{Error, Result};
use crate::mask::WeightMask;
use crate::metrics::{evaluate, AccuracyTable, EvalMode, FlopsLedger, MemoryReport};
use crate::nn::loss::argmax_in;
use crate::nn::{sgd_step, Model};
use crate::rehearsal::{derpp_loss, er_loss, plain_loss, BufferEntry, RehearsalBuffer, ReplayBatch, ReplayOutput};
use crate::tdm::{compute_cwi, tdm_step, ImportanceSample, MaskChange, TdmEvent};
use crate::tensor::{Scalar, Tensor};

/// State visible to a [`TrainObserver`]. Task and epoch are 1-based.
pub struct TrainView<'a, F> {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    pub model: &'a Model<F>,
    pub weight_mask: &'a WeightMask,
    pub gradient_mask: Option<&'a GradientMask>,
    pub buffer: &'a RehearsalBuffer<F>,
    pub active_examples: usize,
}

/// Hooks into [`run_experiment`]; every method defaults to doing nothing.
pub trait TrainObserver<F> {
    /// After each optimizer step.
    fn on_step(&mut self, _view: &TrainView<'_, F>) {}
    /// After a mask schedule event has changed the weight mask.
    fn on_mask_change(&mut self, _view: &TrainView<'_, F>, _change: &MaskChange) {}
    /// After the gradient mask has been rebuilt.
    fn on_gradient_mask_refresh(&mut self, _view: &TrainView<'_, F>) {}
    /// After the end-of-epoch bookkeeping.
    fn on_epoch_end(&mut self, _view: &TrainView<'_, F>, _row: &StageRow) {}
}

/// Observer that ignores every hook.
pub struct Quiet;

impl<F> TrainObserver<F> for Quiet {}

/// One row per epoch of the stage log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub task: usize,
    pub epoch: usize,
    /// Mask event at the start of the epoch, `none` if there was none.
    pub event: String,
    /// Weight sparsity while the epoch trained.
    pub sparsity: f64,
    pub removed_count: usize,
    pub grown_count: usize,
    /// Gradient-mask sparsity at epoch end, equal to `sparsity` without DGM.
    pub gradient_sparsity: f64,
    /// Training examples removed at the end of this epoch.
    pub examples_removed: usize,
    /// Training examples still active after this epoch.
    pub active_examples: usize,
    /// Cumulative training FLOPs (forward + backward).
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub task: usize,
    pub stage: usize,
    pub quota: usize,
    pub remaining_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub inter_expand: usize,
    pub inter_shrink: usize,
    pub intra: usize,
    pub gradient_mask_refresh: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub class_il: AccuracyTable,
    pub task_il: AccuracyTable,
    pub flops: FlopsLedger,
    pub memory: MemoryReport,
    pub memory_footprint_bytes: u64,
    pub final_sparsity: f64,
    pub events: EventCounts,
    pub stages: Vec<StageRow>,
    pub removals: Vec<RemovalRow>,
    pub buffer_len: usize,
    pub buffer_seen: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct Experiment<F> {
    pub report: RunReport,
    pub model: Model<F>,
    pub weight_mask: WeightMask,
    pub buffer: RehearsalBuffer<F>,
}

/// Independent random streams derived from the run seed.
struct Streams {
    shuffle: ChaCha8Rng,
    replay: ChaCha8Rng,
    reservoir: ChaCha8Rng,
    growth: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            shuffle: stream(1),
            replay: stream(2),
            reservoir: stream(3),
            growth: stream(4),
        }
    }
}

pub fn build_model<F: Scalar>(config: &TrainConfig, stream: &TaskStream<F>) -> Result<Model<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.architecture {
        Architecture::Mlp => Model::mlp(&stream.input_shape, &config.hidden, stream.class_count, &mut rng),
        Architecture::Cnn => Model::small_cnn(&stream.input_shape, config.cnn_channels, 3, stream.class_count, &mut rng),
    }
}

struct TaskRows {
    /// Example id to row of the task's training set.
    row_of: HashMap<usize, usize>,
}

impl TaskRows {
    fn new<F: Scalar>(task: &TaskData<F>) -> Self {
        TaskRows {
            row_of: task.train.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect(),
        }
    }

    fn batch<F: Scalar>(&self, task: &TaskData<F>, ids: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
        let rows: Vec<usize> = ids.iter().map(|id| self.row_of[id]).collect();
        let x = Tensor::stack_rows(task.train.example_shape(), rows.iter().map(|&r| task.train.inputs.row(r)))?;
        Ok((x, rows.iter().map(|&r| task.train.labels[r]).collect()))
    }
}

struct Trainer<'s, F> {
    config: TrainConfig,
    stream: &'s TaskStream<F>,
    model: Model<F>,
    mask: WeightMask,
    gmask: Option<GradientMask>,
    buffer: RehearsalBuffer<F>,
    rng: Streams,
    ledger: FlopsLedger,
    events: EventCounts,
    stages: Vec<StageRow>,
    removals: Vec<RemovalRow>,
    step: u64,
    next_insertion: u64,
}

impl<'s, F: Scalar> Trainer<'s, F> {
    fn view(&self, task: usize, epoch: usize, active: usize) -> TrainView<'_, F> {
        TrainView {
            task,
            epoch,
            step: self.step,
            model: &self.model,
            weight_mask: &self.mask,
            gradient_mask: self.gmask.as_ref(),
            buffer: &self.buffer,
            active_examples: active,
        }
    }

    fn importance_sample(&self, task: &TaskData<F>, rows: &TaskRows, order: &[usize]) -> Result<ImportanceSample<F>> {
        let batches = order
            .chunks(self.config.batch_size)
            .take(self.config.importance_batches)
            .map(|ids| rows.batch(task, ids))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImportanceSample {
            batches,
            task_range: task.class_range,
        })
    }

    fn refresh_gradient_mask(&mut self, sample: &ImportanceSample<F>) -> Result<()> {
        let cgi = compute_cgi(&self.model, sample, &self.buffer, self.config.alpha, self.config.beta)?;
        self.gmask = Some(build_gradient_mask(&self.mask, &cgi, self.config.extra_sparsity())?);
        self.events.gradient_mask_refresh += 1;
        Ok(())
    }

    fn replay_batch(&mut self) -> Result<Option<ReplayBatch<F>>> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let entries = self.buffer.sample_batch(self.config.batch_size, &mut self.rng.replay)?;
        ReplayBatch::from_entries(&entries).map(Some)
    }

    fn loss(&mut self, x: &Tensor<F>, y: &[usize], task: &TaskData<F>) -> Result<ReplayOutput<F>> {
        match self.config.method {
            Method::Sgd => {
                let seen = self.model.seen_classes().expect("task registered");
                plain_loss(&self.model, x, y, seen)
            }
            Method::Er | Method::SparclEr => {
                let b = self.replay_batch()?;
                er_loss(&self.model, x, y, b.as_ref(), task.class_range)
            }
            Method::Derpp | Method::SparclDerpp => {
                let a = self.replay_batch()?;
                let b = self.replay_batch()?;
                derpp_loss(
                    &self.model,
                    x,
                    y,
                    a.as_ref(),
                    b.as_ref(),
                    self.config.coeff_mse,
                    self.config.coeff_ce,
                    task.class_range,
                )
            }
        }
    }

    fn run_task(&mut self, t: usize, observer: &mut dyn TrainObserver<F>) -> Result<()> {
        let stream = self.stream;
        let task = &stream.tasks[t - 1];
        self.model.push_task_range(task.class_range)?;
        let rows = TaskRows::new(task);
        let n_t = task.train.len();
        let mut active: BTreeSet<usize> = task.train.ids.iter().copied().collect();
        let policy = RemovalPolicy::new(self.config.rho(), self.config.cutoff, n_t)?;
        let mut counter = MisclassCounter::new();
        let sparcl = self.config.method.is_sparcl();
        let (dgm, ddr) = (self.config.dgm_enabled(), self.config.ddr_enabled());
        let schedule = if sparcl { Some(self.config.schedule()?) } else { None };
        let delta_k = self.config.delta_k;

        for e in 1..=self.config.epochs_per_task {
            let mut order: Vec<usize> = active.iter().copied().collect();
            order.shuffle(&mut self.rng.shuffle);

            let (mut removed_count, mut grown_count, mut event) = (0, 0, "none");
            if let Some(schedule) = &schedule {
                let sample = self.importance_sample(task, &rows, &order)?;
                let (alpha, beta) = (self.config.alpha, self.config.beta);
                let buffer = &self.buffer;
                let change = tdm_step(t, e, &mut self.mask, &mut self.model, schedule, &mut self.rng.growth, |m| {
                    compute_cwi(m, &sample, buffer, alpha, beta)
                })?;
                if let Some(change) = &change {
                    match change.event {
                        TdmEvent::InterExpand => self.events.inter_expand += 1,
                        TdmEvent::InterShrink => self.events.inter_shrink += 1,
                        TdmEvent::Intra => self.events.intra += 1,
                    }
                    removed_count = change.removed.len();
                    grown_count = change.grown.len();
                    event = change.event.as_str();
                    observer.on_mask_change(&self.view(t, e, active.len()), change);
                }
                if dgm && (change.is_some() || e == 1) {
                    self.refresh_gradient_mask(&sample)?;
                    observer.on_gradient_mask_refresh(&self.view(t, e, active.len()));
                }
            }
            let sparsity = self.mask.sparsity();

            for ids in order.chunks(self.config.batch_size) {
                let (x, y) = rows.batch(task, ids)?;
                let out = self.loss(&x, &y, task)?;
                let mut grads = out.grads;
                if let Some(g) = &self.gmask {
                    apply_gradient_mask(&mut grads, g)?;
                }
                sgd_step(&mut self.model, &grads, self.config.lr, &self.mask)?;
                self.ledger
                    .accumulate_training_flops(&self.model, &self.mask, self.gmask.as_ref(), out.rows as u64)?;
                if ddr {
                    let preds: Vec<usize> = (0..ids.len())
                        .map(|r| argmax_in(out.current_logits.row(r), task.class_range))
                        .collect();
                    counter.record_misclassifications(&preds, &y, ids)?;
                }
                if self.buffer.capacity() > 0 {
                    for (r, &label) in y.iter().enumerate() {
                        let entry = BufferEntry {
                            input: Tensor::new(stream.input_shape.clone(), x.row(r).to_vec())?,
                            label,
                            stored_logits: Tensor::new(vec![stream.class_count], out.current_logits.row(r).to_vec())?,
                            task_id: t,
                            insertion_id: self.next_insertion,
                        };
                        self.next_insertion += 1;
                        self.buffer.reservoir_insert(entry, &mut self.rng.reservoir);
                    }
                }
                self.step += 1;
                observer.on_step(&self.view(t, e, active.len()));
            }

            let mut examples_removed = 0;
            if e % delta_k == 0 {
                let stage = e / delta_k;
                if ddr {
                    let quota = policy.removal_quota(stage);
                    examples_removed = remove_easiest(&mut active, &counter, quota)?.len();
                    self.removals.push(RemovalRow {
                        task: t,
                        stage,
                        quota,
                        remaining_count: active.len(),
                    });
                }
                if self.config.counter_reset == CounterReset::PerStage {
                    counter.reset();
                }
                if dgm && !active.is_empty() {
                    let order: Vec<usize> = order.into_iter().filter(|id| active.contains(id)).collect();
                    let sample = self.importance_sample(task, &rows, &order)?;
                    self.refresh_gradient_mask(&sample)?;
                    observer.on_gradient_mask_refresh(&self.view(t, e, active.len()));
                }
            }

            let row = StageRow {
                task: t,
                epoch: e,
                event: event.to_string(),
                sparsity,
                removed_count,
                grown_count,
                gradient_sparsity: self.gmask.as_ref().map_or(sparsity, GradientMask::sparsity),
                examples_removed,
                active_examples: active.len(),
                flops: self.ledger.total(),
            };
            observer.on_epoch_end(&self.view(t, e, active.len()), &row);
            self.stages.push(row);
            if active.is_empty() {
                return Err(Error::State("every training example was removed".into()).in_epoch(t, e));
            }
        }
        Ok(())
    }
}

/// Trains on every task of `stream` in order and evaluates the final model.
pub fn run_experiment<F: Scalar>(
    config: &TrainConfig,
    stream: &TaskStream<F>,
    observer: &mut dyn TrainObserver<F>,
) -> Result<Experiment<F>> {
    config.validate()?;
    let mut model = build_model(config, stream)?;
    let mask = WeightMask::init(&model.maskable_shapes(), config.sparsity(), config.seed)?;
    mask.apply_to(&mut model)?;
    let capacity = if config.method.uses_buffer() { config.buffer_capacity } else { 0 };
    let mut trainer = Trainer {
        config: config.clone(),
        stream,
        model,
        mask,
        gmask: None,
        buffer: RehearsalBuffer::new(capacity),
        rng: Streams::new(config.seed),
        ledger: FlopsLedger::new(),
        events: EventCounts::default(),
        stages: Vec::new(),
        removals: Vec::new(),
        step: 0,
        next_insertion: 0,
    };
    for t in 1..=stream.tasks.len() {
        let epoch = |tr: &Trainer<F>| tr.stages.last().filter(|r| r.task == t).map_or(1, |r| r.epoch + 1);
        if let Err(err) = trainer.run_task(t, observer) {
            let e = epoch(&trainer);
            return Err(err.in_epoch(t, e));
        }
    }

    let class_il = evaluate(&trainer.model, stream, EvalMode::ClassIl)?;
    let task_il = evaluate(&trainer.model, stream, EvalMode::TaskIl)?;
    let memory = MemoryReport::for_model(&trainer.model, config.batch_size, config.sparsity(), config.extra_sparsity());
    let report = RunReport {
        config: config.resolved(),
        seed: config.seed,
        class_il,
        task_il,
        flops: trainer.ledger,
        memory_footprint_bytes: memory.footprint_bytes(),
        memory,
        final_sparsity: trainer.mask.sparsity(),
        events: trainer.events,
        stages: trainer.stages,
        removals: trainer.removals,
        buffer_len: trainer.buffer.len(),
        buffer_seen: trainer.buffer.seen_count(),
    };
    Ok(Experiment {
        report,
        model: trainer.model,
        weight_mask: trainer.mask,
        buffer: trainer.buffer,
    })
}
