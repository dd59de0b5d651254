//! Dynamic data removal: per-stage misclassification counts and staged
//! pruning of the least-misclassified training examples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guards the floors below against `0.3 * 100 = 29.999…` style round-off.
const FLOOR_EPS: f64 = 1e-9;

fn floor_count(x: f64) -> usize {
    (x + FLOOR_EPS).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterReset {
    /// Counts restart at every stage boundary.
    #[default]
    PerStage,
    /// Counts accumulate over the whole task.
    Cumulative,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MisclassCounter {
    counts: BTreeMap<usize, u32>,
}

impl MisclassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count for `id`, zero if never misclassified.
    pub fn get(&self, id: usize) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    /// Adds one to the count of every example whose prediction differs from its label.
    pub fn record_misclassifications(
        &mut self,
        predictions: &[usize],
        labels: &[usize],
        example_ids: &[usize],
    ) -> Result<()> {
        if predictions.len() != labels.len() || labels.len() != example_ids.len() {
            return Err(Error::Dimension(format!(
                "misaligned inputs: {} predictions, {} labels, {} ids",
                predictions.len(),
                labels.len(),
                example_ids.len()
            )));
        }
        for ((p, y), id) in predictions.iter().zip(labels).zip(example_ids) {
            if p != y {
                *self.counts.entry(*id).or_insert(0) += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalPolicy {
    pub rho: f64,
    pub cutoff: usize,
    /// Training-set size of the task at its start.
    pub n_t: usize,
}

impl RemovalPolicy {
    pub fn new(rho: f64, cutoff: usize, n_t: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Argument(format!("rho must lie in [0, 1], got {rho}")));
        }
        if cutoff == 0 {
            return Err(Error::Argument("cutoff must be >= 1".into()));
        }
        Ok(RemovalPolicy { rho, cutoff, n_t })
    }

    /// Examples removed up to and including `stage`.
    pub fn cumulative(&self, stage: usize) -> usize {
        let i = stage.min(self.cutoff) as f64;
        floor_count(self.n_t as f64 * self.rho * i / self.cutoff as f64)
    }

    /// Examples to remove at the end of `stage` (1-based).
    pub fn removal_quota(&self, stage: usize) -> usize {
        if stage == 0 {
            return 0;
        }
        self.cumulative(stage) - self.cumulative(stage - 1)
    }

    /// Total over all stages, `floor(n_t · rho)`.
    pub fn total(&self) -> usize {
        self.cumulative(self.cutoff)
    }
}

/// Removes the `quota` examples with the smallest count, ties by ascending id.
/// Returns the removed ids in ascending order.
pub fn remove_easiest(
    active: &mut BTreeSet<usize>,
    counter: &MisclassCounter,
    quota: usize,
) -> Result<Vec<usize>> {
    if quota > active.len() {
        return Err(Error::Argument(format!(
            "cannot remove {quota} examples from an active set of {}",
            active.len()
        )));
    }
    let mut ranked: Vec<(u32, usize)> = active.iter().map(|&id| (counter.get(id), id)).collect();
    ranked.sort_unstable();
    let mut removed: Vec<usize> = ranked.into_iter().take(quota).map(|(_, id)| id).collect();
    for id in &removed {
        active.remove(id);
    }
    removed.sort_unstable();
    Ok(removed)
}

/// Single removal event of `floor(n_t · rho)` examples.
pub fn one_shot_remove(
    active: &mut BTreeSet<usize>,
    counter: &MisclassCounter,
    rho: f64,
    n_t: usize,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("rho must lie in [0, 1], got {rho}")));
    }
    remove_easiest(active, counter, floor_count(n_t as f64 * rho))
}
