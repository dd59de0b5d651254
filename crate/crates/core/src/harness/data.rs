//! Labelled datasets, IDX ingestion and split-task streams.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ClassRange;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    /// `[n, ..example_shape]`.
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
    /// Identifiers unique within a task stream.
    pub ids: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(inputs: Tensor<F>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "dataset of shape {:?} with {} labels and {} ids",
                inputs.shape(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Dataset { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Rows `rows` in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let inputs = Tensor::stack_rows(self.example_shape(), rows.iter().map(|&r| self.inputs.row(r)))?;
        Dataset::new(
            inputs,
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.ids[r]).collect(),
        )
    }

    pub fn cast<G: Scalar>(&self) -> Dataset<G> {
        Dataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<F> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
    pub class_range: ClassRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream<F> {
    pub tasks: Vec<TaskData<F>>,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
}

impl<F: Scalar> TaskStream<F> {
    /// Checks disjoint class ranges, labels inside their task's range, one
    /// example shape, and ids unique across the whole stream.
    pub fn new(tasks: Vec<TaskData<F>>, class_count: usize) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Argument("a task stream needs at least one task".into()))?;
        let input_shape = first.train.example_shape().to_vec();
        let mut ids = HashSet::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.class_range.end > class_count {
                return Err(Error::Argument(format!("task {i} classes exceed {class_count}")));
            }
            if tasks[..i].iter().any(|u| u.class_range.overlaps(&t.class_range)) {
                return Err(Error::Argument(format!("task {i} class range overlaps an earlier task")));
            }
            for d in [&t.train, &t.test] {
                if d.example_shape() != input_shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "task {i} examples have shape {:?}, expected {input_shape:?}",
                        d.example_shape()
                    )));
                }
                if let Some(y) = d.labels.iter().find(|&&y| !t.class_range.contains(y)) {
                    return Err(Error::Argument(format!("task {i} holds label {y} outside its range")));
                }
                if let Some(id) = d.ids.iter().find(|&&id| !ids.insert(id)) {
                    return Err(Error::Argument(format!("example id {id} appears twice")));
                }
            }
        }
        Ok(TaskStream {
            tasks,
            class_count,
            input_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> TaskStream<G> {
        TaskStream {
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskData {
                    train: t.train.cast(),
                    test: t.test.cast(),
                    class_range: t.class_range,
                })
                .collect(),
            class_count: self.class_count,
            input_shape: self.input_shape.clone(),
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends inside the {what} field at byte {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, needed: usize) -> Result<()> {
    if bytes.len() < header + needed {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated payload: need {needed} bytes after the {header}-byte header"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label file pair. Images become `[n, 1, H, W]` scaled
/// to `[0, 1]`; ids are the row numbers.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset<f32>> {
    let img = read_file(images_path)?;
    check_magic(&img, IDX_IMAGES)?;
    let n = be_u32(&img, 4, "image count")? as usize;
    let h = be_u32(&img, 8, "row count")? as usize;
    let w = be_u32(&img, 12, "column count")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("empty image set {n}x{h}x{w}"),
        });
    }
    check_payload(&img, 16, n * h * w)?;

    let lab = read_file(labels_path)?;
    check_magic(&lab, IDX_LABELS)?;
    let m = be_u32(&lab, 4, "label count")? as usize;
    if m != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("label file holds {m} labels for {n} images"),
        });
    }
    check_payload(&lab, 8, n)?;

    let data = img[16..16 + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        lab[8..8 + n].iter().map(|&b| b as usize).collect(),
        (0..n).collect(),
    )
}

/// Loads `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte` from `dir`.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Rows of `d` whose label lies in `range`, shuffled.
fn rows_in(d: &Dataset<impl Scalar>, range: ClassRange, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..d.len()).filter(|&r| range.contains(d.labels[r])).collect();
    rows.shuffle(rng);
    rows
}

/// Task `t` receives classes `[t·cpt, (t+1)·cpt)`. Examples are shuffled
/// within each task and given stream-unique ids.
pub fn build_split_tasks<F: Scalar>(
    train: &Dataset<F>,
    test: &Dataset<F>,
    tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream<F>> {
    let available = train.labels.iter().max().map_or(0, |m| m + 1);
    let needed = tasks * classes_per_task;
    if tasks == 0 || classes_per_task == 0 || needed > available {
        return Err(Error::Argument(format!(
            "{tasks} tasks x {classes_per_task} classes need {needed} classes, dataset has {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = 0;
    let mut relabel = |d: Dataset<F>| {
        let n = d.len();
        let ids = (next_id..next_id + n).collect();
        next_id += n;
        Dataset { ids, ..d }
    };
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let range = ClassRange::new(t * classes_per_task, (t + 1) * classes_per_task)?;
        let tr = rows_in(train, range, &mut rng);
        let te = rows_in(test, range, &mut rng);
        if tr.is_empty() || te.is_empty() {
            return Err(Error::Argument(format!("task {t} has no train or test examples")));
        }
        out.push(TaskData {
            train: relabel(train.select(&tr)?),
            test: relabel(test.select(&te)?),
            class_range: range,
        });
    }
    TaskStream::new(out, needed)
}

/// Gaussian blobs: class `c` has mean `separation·e_c` in `dim` dimensions
/// and unit-variance noise. Each class is split 80/20 into train and test.
pub fn build_synthetic_tasks<F: Scalar>(
    tasks: usize,
    classes_per_task: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskStream<F>> {
    let classes = tasks * classes_per_task;
    if classes == 0 {
        return Err(Error::Argument("need at least one task and one class per task".into()));
    }
    if dim < classes {
        return Err(Error::Argument(format!("dim {dim} cannot hold {classes} orthogonal class means")));
    }
    if n_per_class < 5 {
        return Err(Error::Argument(format!("n_per_class {n_per_class} leaves no 80/20 split")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Argument(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (0.8 * n_per_class as f64).round() as usize;
    let mut next_id = 0;
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let range = ClassRange::new(t * classes_per_task, (t + 1) * classes_per_task)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in range.start..range.end {
            for i in 0..n_per_class {
                let x: Vec<F> = (0..dim)
                    .map(|d| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        F::of(if d == c { separation } else { 0.0 } + noise)
                    })
                    .collect();
                if i < n_train { &mut train } else { &mut test }.push((x, c));
            }
        }
        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
        let mut pack = |rows: Vec<(Vec<F>, usize)>| -> Result<Dataset<F>> {
            let n = rows.len();
            let inputs = Tensor::stack_rows(&[dim], rows.iter().map(|(x, _)| x.as_slice()))?;
            let ids = (next_id..next_id + n).collect();
            next_id += n;
            Dataset::new(inputs, rows.into_iter().map(|(_, y)| y).collect(), ids)
        };
        out.push(TaskData {
            train: pack(train)?,
            test: pack(test)?,
            class_range: range,
        });
    }
    TaskStream::new(out, classes)
}
