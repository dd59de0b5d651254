//! Binary weight masks over the maskable (conv/linear) weight tensors.
//!
//! Positions are addressed globally as `(layer, flat_index)` where `layer`
//! counts maskable layers only. Global orderings (shrink tie-breaks, growth
//! sampling) always walk positions in ascending `(layer, flat_index)`.

mod csr;

pub use csr::{export_csr, import_csr, to_csr, CsrLayer, CsrMatrix};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MaskPos {
    pub layer: usize,
    pub index: usize,
}

/// Round-half-away-from-zero of `fraction · n`, the count convention used for
/// every sparsity budget.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMask {
    shapes: Vec<Vec<usize>>,
    bits: Vec<Vec<bool>>,
    target_sparsity: f64,
    /// Steady-state active count: Σ_l round((1 − s)·N_l).
    target_active: usize,
    seed: u64,
}

impl WeightMask {
    /// Uniform per-layer random mask holding `round((1 − s)·N_l)` active bits per layer.
    pub fn init(layer_shapes: &[Vec<usize>], sparsity: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Argument(format!(
                "sparsity must lie in [0, 1), got {sparsity}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = Vec::with_capacity(layer_shapes.len());
        let mut target_active = 0;
        for shape in layer_shapes {
            let n: usize = shape.iter().product();
            let keep = fraction_count(1.0 - sparsity, n);
            let mut layer = vec![false; n];
            for i in index::sample(&mut rng, n, keep) {
                layer[i] = true;
            }
            target_active += keep;
            bits.push(layer);
        }
        Ok(Self {
            shapes: layer_shapes.to_vec(),
            bits,
            target_sparsity: sparsity,
            target_active,
            seed,
        })
    }

    /// All positions active.
    pub fn dense(layer_shapes: &[Vec<usize>]) -> Self {
        let bits: Vec<Vec<bool>> = layer_shapes
            .iter()
            .map(|s| vec![true; s.iter().product()])
            .collect();
        let target_active = bits.iter().map(Vec::len).sum();
        Self {
            shapes: layer_shapes.to_vec(),
            bits,
            target_sparsity: 0.0,
            target_active,
            seed: 0,
        }
    }

    pub fn from_bits(layer_shapes: &[Vec<usize>], bits: Vec<Vec<bool>>, target_sparsity: f64) -> Result<Self> {
        if bits.len() != layer_shapes.len() {
            return Err(Error::Dimension(format!(
                "{} bit layers for {} shapes",
                bits.len(),
                layer_shapes.len()
            )));
        }
        let mut target_active = 0;
        for (b, s) in bits.iter().zip(layer_shapes) {
            let n: usize = s.iter().product();
            if b.len() != n {
                return Err(Error::Dimension(format!(
                    "bit layer of length {} for shape {s:?}",
                    b.len()
                )));
            }
            target_active += fraction_count(1.0 - target_sparsity, n);
        }
        Ok(Self {
            shapes: layer_shapes.to_vec(),
            bits,
            target_sparsity,
            target_active,
            seed: 0,
        })
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_count(&self) -> usize {
        self.bits.len()
    }

    pub fn layer_bits(&self, layer: usize) -> &[bool] {
        &self.bits[layer]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.bits
    }

    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn target_active(&self) -> usize {
        self.target_active
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_active(&self, pos: MaskPos) -> bool {
        self.bits[pos.layer][pos.index]
    }

    /// Total number of maskable weights `N`.
    pub fn total(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().map(|l| l.iter().filter(|&&b| b).count()).sum()
    }

    pub fn inactive_count(&self) -> usize {
        self.total() - self.active_count()
    }

    pub fn layer_active(&self, layer: usize) -> usize {
        self.bits[layer].iter().filter(|&&b| b).count()
    }

    /// `1 − active/N` over all maskable layers.
    pub fn sparsity(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        1.0 - self.active_count() as f64 / n as f64
    }

    pub fn layer_density(&self, layer: usize) -> f64 {
        let n = self.bits[layer].len();
        if n == 0 {
            return 0.0;
        }
        self.layer_active(layer) as f64 / n as f64
    }

    pub fn active_positions(&self) -> impl Iterator<Item = MaskPos> + '_ {
        self.positions(true)
    }

    pub fn inactive_positions(&self) -> impl Iterator<Item = MaskPos> + '_ {
        self.positions(false)
    }

    fn positions(&self, state: bool) -> impl Iterator<Item = MaskPos> + '_ {
        self.bits.iter().enumerate().flat_map(move |(layer, bits)| {
            bits.iter()
                .enumerate()
                .filter(move |(_, &b)| b == state)
                .map(move |(index, _)| MaskPos { layer, index })
        })
    }

    /// Activates exactly `count` inactive positions drawn uniformly from all
    /// inactive positions. Returns them in ascending order.
    pub fn grow_random<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<Vec<MaskPos>> {
        let inactive: Vec<MaskPos> = self.inactive_positions().collect();
        if count > inactive.len() {
            return Err(Error::Argument(format!(
                "cannot grow {count} weights, only {} inactive",
                inactive.len()
            )));
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let mut grown: Vec<MaskPos> = index::sample(rng, inactive.len(), count)
            .into_iter()
            .map(|i| inactive[i])
            .collect();
        grown.sort_unstable();
        for p in &grown {
            self.bits[p.layer][p.index] = true;
        }
        Ok(grown)
    }

    /// Deactivates the `count` active positions with the smallest score; ties
    /// resolve towards the lowest `(layer, index)`. Returns them in removal order.
    pub fn shrink_by_scores(&mut self, scores: &[Vec<f64>], count: usize) -> Result<Vec<MaskPos>> {
        self.check_scores(scores)?;
        let active = self.active_count();
        if count > active {
            return Err(Error::Argument(format!(
                "cannot shrink {count} weights, only {active} active"
            )));
        }
        let removed = lowest_scored(self.active_positions(), scores, count)?;
        for p in &removed {
            self.bits[p.layer][p.index] = false;
        }
        Ok(removed)
    }

    pub(crate) fn check_scores(&self, scores: &[Vec<f64>]) -> Result<()> {
        if scores.len() != self.bits.len()
            || scores.iter().zip(&self.bits).any(|(s, b)| s.len() != b.len())
        {
            return Err(Error::Dimension("scores are not congruent with the mask".into()));
        }
        Ok(())
    }

    /// Whether every active bit of `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &WeightMask) -> bool {
        self.bits.len() == other.bits.len()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    /// Sets every masked-out weight of `model` to zero.
    pub fn apply_to<F: Scalar>(&self, model: &mut Model<F>) -> Result<()> {
        self.check_model(model)?;
        for (w, bits) in model.maskable_weights_mut().zip(&self.bits) {
            for (v, &b) in w.data_mut().iter_mut().zip(bits) {
                if !b {
                    *v = F::zero();
                }
            }
        }
        Ok(())
    }

    /// Sets the given positions of `model` to zero.
    pub fn zero_positions<F: Scalar>(model: &mut Model<F>, positions: &[MaskPos]) {
        let mut weights: Vec<_> = model.maskable_weights_mut().collect();
        for p in positions {
            weights[p.layer].data_mut()[p.index] = F::zero();
        }
    }

    /// Number of masked-out weights of `model` that are not exactly zero.
    pub fn violations<F: Scalar>(&self, model: &Model<F>) -> usize {
        model
            .maskable_weights()
            .zip(&self.bits)
            .map(|(w, bits)| {
                w.data()
                    .iter()
                    .zip(bits)
                    .filter(|(v, &b)| !b && (**v != F::zero() || v.is_sign_negative()))
                    .count()
            })
            .sum()
    }

    pub fn check_model<F: Scalar>(&self, model: &Model<F>) -> Result<()> {
        if model.maskable_shapes() != self.shapes {
            return Err(Error::Dimension(format!(
                "mask shapes {:?} do not match model {:?}",
                self.shapes,
                model.maskable_shapes()
            )));
        }
        Ok(())
    }
}

/// The `count` positions with the smallest score, ties broken by ascending position.
pub(crate) fn lowest_scored(
    candidates: impl Iterator<Item = MaskPos>,
    scores: &[Vec<f64>],
    count: usize,
) -> Result<Vec<MaskPos>> {
    let mut ranked: Vec<(f64, MaskPos)> = candidates.map(|p| (scores[p.layer][p.index], p)).collect();
    if let Some((s, p)) = ranked.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} at {p:?}")));
    }
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(count).map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn shapes() -> Vec<Vec<usize>> {
        vec![vec![10, 10], vec![5, 4]]
    }

    #[test]
    fn dense_init_sets_every_bit() {
        let m = WeightMask::init(&shapes(), 0.0, 1).unwrap();
        assert_eq!(m.active_count(), 120);
        assert_eq!(m.sparsity(), 0.0);
    }

    #[test]
    fn init_holds_exact_per_layer_counts() {
        let m = WeightMask::init(&[vec![100]], 0.9, 7).unwrap();
        assert_eq!(m.active_count(), 10);
        let m = WeightMask::init(&shapes(), 0.75, 7).unwrap();
        assert_eq!(m.layer_active(0), 25);
        assert_eq!(m.layer_active(1), 5);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = WeightMask::init(&shapes(), 0.5, 42).unwrap();
        let b = WeightMask::init(&shapes(), 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = WeightMask::init(&shapes(), 0.5, 43).unwrap();
        assert_ne!(a.layers(), c.layers());
    }

    #[test]
    fn init_rejects_full_sparsity() {
        assert!(matches!(
            WeightMask::init(&shapes(), 1.0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sparsity_arithmetic() {
        let s = vec![vec![100]];
        let all = WeightMask::from_bits(&s, vec![vec![true; 100]], 0.0).unwrap();
        assert_eq!(all.sparsity(), 0.0);
        let none = WeightMask::from_bits(&s, vec![vec![false; 100]], 0.0).unwrap();
        assert_eq!(none.sparsity(), 1.0);
        let quarter = WeightMask::from_bits(&s, vec![(0..100).map(|i| i < 25).collect()], 0.0).unwrap();
        assert_eq!(quarter.sparsity(), 0.75);
    }

    #[test]
    fn grow_zero_is_noop_and_dense_only_allows_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = WeightMask::dense(&shapes());
        assert!(m.grow_random(0, &mut rng).unwrap().is_empty());
        assert!(matches!(m.grow_random(1, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn grow_adds_exactly_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = WeightMask::init(&[vec![100]], 0.9, 1).unwrap();
        let before = m.active_count();
        let grown = m.grow_random(10, &mut rng).unwrap();
        assert_eq!(m.active_count(), before + 10);
        assert_eq!(grown.iter().collect::<BTreeSet<_>>().len(), 10);
    }

    #[test]
    fn shrink_removes_lowest_scores_first() {
        let mut m = WeightMask::dense(&[vec![6]]);
        let scores = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]];
        let removed = m.shrink_by_scores(&scores, 3).unwrap();
        assert_eq!(removed.iter().map(|p| p.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(m.layer_bits(0), &[false, false, false, true, true, true]);
    }

    #[test]
    fn shrink_ties_break_by_layer_then_index() {
        let mut m = WeightMask::dense(&[vec![3], vec![3]]);
        let scores = vec![vec![1.0; 3], vec![1.0; 3]];
        let removed = m.shrink_by_scores(&scores, 4).unwrap();
        assert_eq!(
            removed,
            vec![
                MaskPos { layer: 0, index: 0 },
                MaskPos { layer: 0, index: 1 },
                MaskPos { layer: 0, index: 2 },
                MaskPos { layer: 1, index: 0 },
            ]
        );
    }

    #[test]
    fn shrink_too_many_is_argument_error() {
        let mut m = WeightMask::init(&[vec![10]], 0.5, 0).unwrap();
        let scores = vec![vec![0.0; 10]];
        assert!(matches!(m.shrink_by_scores(&scores, 6), Err(Error::Argument(_))));
        assert!(m.shrink_by_scores(&scores, 0).unwrap().is_empty());
        assert_eq!(m.active_count(), 5);
    }

    #[test]
    fn shrink_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = WeightMask::init(&shapes(), 0.4, 5).unwrap();
        let scores: Vec<Vec<f64>> = m
            .shapes()
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut oracle: Vec<(f64, usize, usize)> = Vec::new();
        for (l, bits) in m.layers().iter().enumerate() {
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    oracle.push((scores[l][i], l, i));
                }
            }
        }
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let removed = m.shrink_by_scores(&scores, 9).unwrap();
        let expect: Vec<MaskPos> = oracle[..9]
            .iter()
            .map(|&(_, layer, index)| MaskPos { layer, index })
            .collect();
        assert_eq!(removed, expect);
    }

    proptest! {
        #[test]
        fn grow_shrink_conserve_and_order(seed in 0u64..1000, s in 0.1f64..0.9, g in 0usize..20, k in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = WeightMask::init(&shapes(), s, seed).unwrap();
            let a0 = m.active_count();
            let g = g.min(m.inactive_count());
            m.grow_random(g, &mut rng).unwrap();
            let scores: Vec<Vec<f64>> = m.shapes().iter()
                .map(|sh| (0..sh.iter().product::<usize>()).map(|_| (rng.random::<f64>() * 8.0).floor()).collect())
                .collect();
            let k = k.min(m.active_count());
            let removed = m.shrink_by_scores(&scores, k).unwrap();
            prop_assert_eq!(m.active_count(), a0 + g - k);
            if let Some(max_removed) = removed.iter().map(|p| scores[p.layer][p.index]).reduce(f64::max) {
                for p in m.active_positions() {
                    prop_assert!(scores[p.layer][p.index] >= max_removed);
                }
            }
        }
    }
}
