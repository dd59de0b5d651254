use leancl_core::dgm::{apply_gradient_mask, build_gradient_mask, compute_cgi, CgiScores, GradientMask};
use leancl_core::nn::{single_head_cross_entropy, Layer, Linear};
use leancl_core::tdm::{compute_cwi, ImportanceSample};
use leancl_core::{BufferEntry, ClassRange, GradientSet, MaskPos, Model, RehearsalBuffer, Tensor, WeightMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(weights: Vec<f64>, inputs: usize, outputs: usize) -> Model<f64> {
    let lin = Linear::from_parts(Tensor::new(vec![outputs, inputs], weights).unwrap(), Tensor::zeros(&[outputs])).unwrap();
    Model::new(vec![inputs], vec![Layer::Linear(lin)], outputs).unwrap()
}

fn mlp(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::mlp(&[6], &[5], 4, &mut rng).unwrap();
    m.push_task_range(ClassRange::new(0, 2).unwrap()).unwrap();
    m.push_task_range(ClassRange::new(2, 4).unwrap()).unwrap();
    m
}

fn sample(seed: u64) -> ImportanceSample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImportanceSample {
        batches: (0..2)
            .map(|_| {
                (
                    Tensor::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0)),
                    (0..3).map(|_| rng.random_range(2..4)).collect(),
                )
            })
            .collect(),
        task_range: ClassRange::new(2, 4).unwrap(),
    }
}

fn buffer(seed: u64) -> RehearsalBuffer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = RehearsalBuffer::new(6);
    for i in 0..6 {
        b.reservoir_insert(
            BufferEntry {
                input: Tensor::from_fn(&[6], |_| rng.random_range(-1.0..1.0)),
                label: rng.random_range(0..2),
                stored_logits: Tensor::zeros(&[4]),
                task_id: 1,
                insertion_id: i,
            },
            &mut rng,
        );
    }
    b
}

#[test]
fn cgi_is_cwi_minus_magnitude() {
    let m = mlp(1);
    let (s, b) = (sample(2), buffer(3));
    let cgi = compute_cgi(&m, &s, &b, 0.5, 1.0).unwrap();
    let cwi = compute_cwi(&m, &s, &b, 0.5, 1.0).unwrap();
    for ((g, c), w) in cgi.scores.iter().zip(&cwi.scores).zip(m.maskable_weights()) {
        for ((g, c), w) in g.iter().zip(c).zip(w.data()) {
            assert!((g - (c - w.abs())).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_coefficients_give_zero_cgi() {
    let m = mlp(4);
    let cgi = compute_cgi(&m, &sample(5), &buffer(6), 0.0, 0.0).unwrap();
    assert!(cgi.scores.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn cgi_matches_finite_differences_on_two_weights() {
    let w0 = vec![0.3, -1.1];
    let m = linear(w0.clone(), 1, 2);
    let x = Tensor::new(vec![2, 1], vec![0.8, -0.5]).unwrap();
    let labels = vec![0, 1];
    let range = ClassRange::new(0, 2).unwrap();
    let s = ImportanceSample {
        batches: vec![(x.clone(), labels.clone())],
        task_range: range,
    };
    let cgi = compute_cgi(&m, &s, &RehearsalBuffer::new(0), 0.7, 1.0).unwrap();
    let h = 1e-6;
    for i in 0..2 {
        let loss = |d: f64| {
            let mut w = w0.clone();
            w[i] += d;
            single_head_cross_entropy(&linear(w, 1, 2).predict(&x).unwrap(), &labels, range).unwrap().loss
        };
        let fd = (loss(h) - loss(-h)) / (2.0 * h);
        assert!((cgi.scores[0][i] - 0.7 * fd.abs()).abs() < 1e-8);
    }
}

fn cgi(scores: Vec<Vec<f64>>) -> CgiScores {
    CgiScores {
        scores,
        alpha: 0.5,
        beta: 1.0,
    }
}

#[test]
fn eight_weights_half_sparse_quarter_extra_keeps_top_two() {
    let bits = vec![vec![true, false, true, true, false, false, true, false]];
    let wm = WeightMask::from_bits(&[vec![2, 4]], bits, 0.5).unwrap();
    let scores = cgi(vec![vec![0.4, 9.0, 0.1, 0.9, 8.0, 7.0, 0.5, 6.0]]);
    let gm = build_gradient_mask(&wm, &scores, 0.25).unwrap();
    // Full sort of the four active scores: 0.9 (3), 0.5 (6), 0.4 (0), 0.1 (2).
    let kept: Vec<usize> = gm.bits().active_positions().map(|p| p.index).collect();
    assert_eq!(kept, vec![3, 6]);
    assert!(gm.is_nested_in(&wm));
}

#[test]
fn equal_cgi_keeps_lowest_positions() {
    let wm = WeightMask::init(&[vec![10], vec![6]], 0.5, 3).unwrap();
    let scores = cgi(vec![vec![1.0; 10], vec![1.0; 6]]);
    let gm = build_gradient_mask(&wm, &scores, 0.25).unwrap();
    let keep = wm.active_count() - 4;
    let expect: Vec<MaskPos> = wm.active_positions().take(keep).collect();
    assert_eq!(gm.bits().active_positions().collect::<Vec<_>>(), expect);
}

fn grads(model: &Model<f64>, seed: u64) -> GradientSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GradientSet::zeros_like(model);
    for p in g.layers.iter_mut().flatten() {
        p.weight.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    g
}

#[test]
fn full_gradient_mask_is_identity() {
    let m = mlp(7);
    let g = grads(&m, 8);
    let mut h = g.clone();
    apply_gradient_mask(&mut h, &GradientMask::identity(&WeightMask::dense(&m.maskable_shapes()))).unwrap();
    assert_eq!(g, h);
}

#[test]
fn empty_gradient_mask_zeroes_weights_only() {
    let m = mlp(9);
    let g = grads(&m, 10);
    let mut h = g.clone();
    let shapes = m.maskable_shapes();
    let none = WeightMask::from_bits(&shapes, shapes.iter().map(|s| vec![false; s.iter().product()]).collect(), 0.0).unwrap();
    apply_gradient_mask(&mut h, &GradientMask::identity(&none)).unwrap();
    for (a, b) in g.layers.iter().flatten().zip(h.layers.iter().flatten()) {
        assert!(b.weight.data().iter().all(|v| *v == 0.0));
        assert_eq!(a.bias, b.bias);
    }
}

#[test]
fn gradient_mask_equals_scalar_loop() {
    let m = mlp(11);
    let g = grads(&m, 12);
    let wm = WeightMask::init(&m.maskable_shapes(), 0.5, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let scores = cgi(wm.layers().iter().map(|l| l.iter().map(|_| rng.random()).collect()).collect());
    let gm = build_gradient_mask(&wm, &scores, 0.1).unwrap();
    let mut h = g.clone();
    apply_gradient_mask(&mut h, &gm).unwrap();
    for (l, (a, b)) in g.maskable_weights().zip(h.maskable_weights()).enumerate() {
        for i in 0..a.len() {
            let keep = gm.is_active(MaskPos { layer: l, index: i });
            let expect = if keep { a.data()[i] } else { 0.0 };
            assert_eq!(b.data()[i], expect);
        }
    }
}

proptest! {
    #[test]
    fn gradient_mask_nests_and_meets_budget(
        seed in 0u64..1000,
        s in 0.0f64..0.9,
        q in 0.0f64..0.09,
    ) {
        let shapes = vec![vec![7, 9], vec![5, 3], vec![11]];
        let wm = WeightMask::init(&shapes, s, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let scores = cgi(wm.layers().iter().map(|l| l.iter().map(|_| rng.random_range(0.0..1.0)).collect()).collect());
        let gm = build_gradient_mask(&wm, &scores, q).unwrap();
        prop_assert!(gm.is_nested_in(&wm));
        let n = wm.total() as f64;
        let target = ((1.0 - (s + q)) * n).round() as i64;
        prop_assert!((gm.active_count() as i64 - target).abs() <= shapes.len() as i64 + 1);
        // Every kept score is at least every dropped active score.
        let kept_min = gm.bits().active_positions().map(|p| scores.scores[p.layer][p.index]).fold(f64::INFINITY, f64::min);
        let dropped_max = wm
            .active_positions()
            .filter(|p| !gm.is_active(*p))
            .map(|p| scores.scores[p.layer][p.index])
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }
}
