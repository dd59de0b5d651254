//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use leancl_core::harness::{emit_report, run_experiment, MetricsSummary, Quiet, TrainObserver, TrainView, METRICS_FILE};
use leancl_core::mask::{export_csr, import_csr, CsrMatrix};
use leancl_core::metrics::memory_footprint;
use leancl_core::nn::{numeric_grad_check, Checkpoint};
use leancl_core::{
    BufferEntry, MaskPos, Method, Model, RehearsalBuffer, RunReport, Scalar, TaskStream, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// 1. Gradient correctness.

fn grad_case<F: Scalar>(cnn: bool, tol: f64, seed: u64) -> (bool, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, x, labels) = if cnn {
        let m = Model::<F>::small_cnn(&[1, 8, 8], 4, 3, 5, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 1, 8, 8], |_| F::of(rng.random_range(-1.0..1.0)));
        (m, x, vec![0, 3, 4])
    } else {
        let m = Model::<F>::mlp(&[20], &[32, 16], 5, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 20], |_| F::of(rng.random_range(-1.0..1.0)));
        (m, x, vec![1, 2, 4])
    };
    let r = numeric_grad_check(&model, &x, &labels, 200, tol, seed).unwrap();
    (r.pass && r.checked >= 150, r.max_rel_error, r.checked)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cases = [
        ("mlp/f32", grad_case::<f32>(false, 1e-4, 1)),
        ("cnn/f32", grad_case::<f32>(true, 1e-4, 2)),
        ("mlp/f64", grad_case::<f64>(false, 1e-6, 3)),
        ("cnn/f64", grad_case::<f64>(true, 1e-6, 4)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let pass = cases.iter().all(|(_, c)| c.0) && secs < 60.0;
    let detail = cases
        .iter()
        .map(|(n, (_, e, k))| format!("{n} max rel {e:.2e} over {k}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("{detail}; {secs:.1}s"))
}

// 2-4. Invariants observed over a full five-task run.

#[derive(Default)]
struct InvariantProbe {
    s: f64,
    q: f64,
    p_inter: f64,
    delta_k: usize,
    budget_checks: usize,
    budget_violations: usize,
    steps: usize,
    pruned_violations: usize,
    nesting_violations: usize,
    gradient_budget_violations: usize,
    frozen: BTreeMap<MaskPos, f32>,
    frozen_changes: usize,
}

impl TrainObserver<f32> for InvariantProbe {
    fn on_step(&mut self, v: &TrainView<'_, f32>) {
        self.steps += 1;
        self.pruned_violations += v.weight_mask.violations(v.model);
        if let Some(g) = v.gradient_mask {
            if !g.is_nested_in(v.weight_mask) {
                self.nesting_violations += 1;
            }
        }
        let weights: Vec<&Tensor<f32>> = v.model.maskable_weights().collect();
        for (p, w) in &self.frozen {
            if weights[p.layer].data()[p.index].to_bits() != w.to_bits() {
                self.frozen_changes += 1;
            }
        }
    }

    fn on_gradient_mask_refresh(&mut self, v: &TrainView<'_, f32>) {
        let g = v.gradient_mask.expect("refresh without a gradient mask");
        let n = v.weight_mask.total() as f64;
        let expected = (1.0 - (v.weight_mask.sparsity() + self.q)) * n;
        let slack = v.weight_mask.layer_count() as f64 + 1.0;
        if (g.active_count() as f64 - expected).abs() > slack {
            self.gradient_budget_violations += 1;
        }
        let weights: Vec<&Tensor<f32>> = v.model.maskable_weights().collect();
        self.frozen = v
            .weight_mask
            .active_positions()
            .filter(|p| !g.is_active(*p))
            .map(|p| (p, weights[p.layer].data()[p.index]))
            .collect();
    }

    fn on_epoch_end(&mut self, v: &TrainView<'_, f32>, row: &leancl_core::harness::StageRow) {
        let warm_up = v.task > 1 && v.epoch < self.delta_k;
        let expected = if warm_up { self.s - self.p_inter } else { self.s };
        let slack = (v.weight_mask.layer_count() as f64 + 1.0) / v.weight_mask.total() as f64;
        self.budget_checks += 1;
        if (row.sparsity - expected).abs() > slack {
            self.budget_violations += 1;
        }
    }
}

fn invariant_config() -> TrainConfig {
    TrainConfig {
        method: Method::SparclDerpp,
        tasks: 5,
        epochs_per_task: 10,
        hidden: vec![64],
        synthetic_per_class: 60,
        p_intra: 0.02,
        p_inter: 0.05,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn invariant_run() -> InvariantProbe {
    let config = invariant_config();
    let stream = config.load_stream::<f32>().unwrap();
    let mut probe = InvariantProbe {
        s: config.sparsity(),
        q: config.extra_sparsity(),
        p_inter: config.p_inter,
        delta_k: config.delta_k,
        ..InvariantProbe::default()
    };
    run_experiment(&config, &stream, &mut probe).unwrap();
    probe
}

fn mask_budget(p: &InvariantProbe) -> Outcome {
    outcome(
        p.budget_violations == 0 && p.budget_checks == 50,
        format!("{} stage boundaries, {} off-trajectory", p.budget_checks, p.budget_violations),
    )
}

fn pruned_weights(p: &InvariantProbe) -> Outcome {
    outcome(
        p.pruned_violations == 0 && p.steps > 0,
        format!("{} optimizer steps, {} nonzero pruned weights", p.steps, p.pruned_violations),
    )
}

fn gradient_nesting(p: &InvariantProbe) -> Outcome {
    outcome(
        p.nesting_violations == 0 && p.gradient_budget_violations == 0 && p.frozen_changes == 0,
        format!(
            "nesting violations {}, budget violations {}, frozen-weight changes {}",
            p.nesting_violations, p.gradient_budget_violations, p.frozen_changes
        ),
    )
}

// 5. FLOPs proportionality.

fn flops_proportionality() -> Outcome {
    let base = TrainConfig {
        tasks: 2,
        epochs_per_task: 5,
        hidden: vec![64],
        synthetic_per_class: 60,
        gradient_extra_sparsity: Some(0.0),
        rho: Some(0.0),
        p_inter: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let stream = base.load_stream::<f32>().unwrap();
    let run = |method, s: f64| {
        let c = TrainConfig {
            method,
            sparsity: Some(s),
            ..base.clone()
        };
        run_experiment(&c, &stream, &mut Quiet).unwrap().report.flops.total() as f64
    };
    let dense = run(Method::Er, 0.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [0.0, 0.5, 0.9] {
        let total = if s == 0.0 { dense } else { run(Method::SparclEr, s) };
        let ratio = total / dense;
        let rel = (ratio / (1.0 - s) - 1.0).abs();
        pass &= rel <= 0.02;
        parts.push(format!("s={s}: {ratio:.4} (rel dev {rel:.2e})"));
    }
    outcome(pass, parts.join(", "))
}

// 6. Memory fixture.

fn memory_fixture() -> Outcome {
    let bytes = memory_footprint(2, 10, 100, 0.9, 0.02, 4);
    outcome(bytes == 232, format!("{bytes} bytes"))
}

// 7. Data-removal schedule.

fn ddr_schedule() -> Outcome {
    let config = |rho| TrainConfig {
        method: Method::SparclEr,
        tasks: 1,
        epochs_per_task: 30,
        delta_k: 5,
        rho: Some(rho),
        cutoff: 4,
        hidden: vec![32],
        synthetic_per_class: 63,
        seed: 5,
        ..TrainConfig::default()
    };
    let stream = config(0.3).load_stream::<f32>().unwrap();
    let n_t = stream.tasks[0].train.len();
    let on = run_experiment(&config(0.3), &stream, &mut Quiet).unwrap().report;
    let off = run_experiment(&config(0.0), &stream, &mut Quiet).unwrap().report;
    let removed: Vec<usize> = on
        .removals
        .windows(2)
        .map(|w| w[0].remaining_count - w[1].remaining_count)
        .collect();
    let first = n_t - on.removals[0].remaining_count;
    let per_stage: Vec<usize> = std::iter::once(first).chain(removed).collect();
    let final_active = on.removals.last().unwrap().remaining_count;
    let pass = n_t == 100
        && per_stage == [7, 8, 7, 8, 0, 0]
        && final_active == 70
        && on.flops.total() < off.flops.total();
    outcome(
        pass,
        format!(
            "n_t {n_t}, removals {per_stage:?}, final active {final_active}, flops {} vs {} without removal",
            on.flops.total(),
            off.flops.total()
        ),
    )
}

// 8. Reservoir uniformity.

fn reservoir_uniformity() -> Outcome {
    let trials = 10_000u64;
    let mut hits = vec![0u64; 100];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut buf = RehearsalBuffer::new(10);
        for id in 0..100u64 {
            let entry = BufferEntry {
                input: Tensor::<f32>::zeros(&[1]),
                label: 0,
                stored_logits: Tensor::zeros(&[1]),
                task_id: 1,
                insertion_id: id,
            };
            buf.reservoir_insert(entry, &mut rng);
        }
        for e in buf.entries() {
            hits[e.insertion_id as usize] += 1;
        }
    }
    let freqs: Vec<f64> = hits.iter().map(|h| *h as f64 / trials as f64).collect();
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(lo, hi), f| (lo.min(*f), hi.max(*f)));
    outcome(
        freqs.iter().all(|f| (f - 0.1).abs() <= 0.02),
        format!("inclusion frequency range [{lo:.4}, {hi:.4}]"),
    )
}

// 9. Desk-scale trend.

fn trend_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        tasks: 5,
        classes_per_task: 2,
        hidden: vec![256],
        buffer_capacity: 200,
        epochs_per_task: 20,
        synthetic_dim: 32,
        synthetic_per_class: 250,
        synthetic_separation: 4.0,
        seed,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale_trend() -> Outcome {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let variants: [(&str, Box<dyn Fn(u64) -> TrainConfig>); 4] = [
        ("sgd", Box::new(|s| trend_config(Method::Sgd, s))),
        ("er", Box::new(|s| trend_config(Method::Er, s))),
        (
            "sparcl-er",
            Box::new(|s| TrainConfig {
                sparsity: Some(0.75),
                rho: Some(0.0),
                ..trend_config(Method::SparclEr, s)
            }),
        ),
        (
            "sparcl-er+ddr",
            Box::new(|s| TrainConfig {
                sparsity: Some(0.75),
                rho: Some(0.3),
                cutoff: 4,
                ..trend_config(Method::SparclEr, s)
            }),
        ),
    ];
    let mut acc = BTreeMap::new();
    let mut flops = BTreeMap::new();
    for (name, make) in &variants {
        let (mut a, mut f) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let config = make(seed);
            let stream: TaskStream<f32> = config.load_stream().unwrap();
            let r = run_experiment(&config, &stream, &mut Quiet).unwrap().report;
            a.push(r.class_il.average);
            f.push(r.flops.total() as f64);
        }
        acc.insert(*name, mean(&a));
        flops.insert(*name, mean(&f));
    }
    let secs = start.elapsed().as_secs_f64();
    let gap_a = acc["er"] - acc["sgd"];
    let gap_b = acc["er"] - acc["sparcl-er"];
    let ratio_b = flops["sparcl-er"] / flops["er"];
    let delta_c = acc["sparcl-er+ddr"] - acc["sparcl-er"];
    let fewer_c = flops["sparcl-er+ddr"] < flops["sparcl-er"];
    let a = gap_a >= 15.0;
    let b = gap_b.abs() <= 3.0 && ratio_b <= 0.35;
    let c = delta_c >= -1.0 && fewer_c;
    let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c && secs < 900.0,
        format!(
            "(a) sgd {:.2} vs er {:.2}, gap {gap_a:.2} [{}]; (b) sparcl-er {:.2}, gap {gap_b:.2}, flops ratio {ratio_b:.3} [{}]; (c) +ddr {:.2}, delta {delta_c:.2}, flops {:.3e} vs {:.3e} [{}]; {secs:.0}s",
            acc["sgd"],
            acc["er"],
            verdict(a),
            acc["sparcl-er"],
            verdict(b),
            acc["sparcl-er+ddr"],
            flops["sparcl-er+ddr"],
            flops["sparcl-er"],
            verdict(c),
        ),
    )
}

// 10. Determinism.

fn determinism() -> Outcome {
    let config = TrainConfig {
        tasks: 3,
        epochs_per_task: 10,
        hidden: vec![32],
        synthetic_per_class: 40,
        seed: 9,
        ..TrainConfig::default()
    };
    let stream = config.load_stream::<f32>().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports: Vec<RunReport> = Vec::new();
    for d in &dirs {
        let exp = run_experiment(&config, &stream, &mut Quiet).unwrap();
        emit_report(&exp, d.path()).unwrap();
        reports.push(exp.report);
    }
    let a = std::fs::read(dirs[0].path().join(METRICS_FILE)).unwrap();
    let b = std::fs::read(dirs[1].path().join(METRICS_FILE)).unwrap();
    let parsed: MetricsSummary = serde_json::from_slice(&a).unwrap();
    outcome(
        a == b && reports[0] == reports[1] && parsed == MetricsSummary::from_report(&reports[0]),
        format!("{} metric bytes, identical: {}", a.len(), a == b),
    )
}

// 11. CSR round trip.

fn csr_round_trip() -> Outcome {
    let config = TrainConfig {
        method: Method::SparclEr,
        tasks: 2,
        epochs_per_task: 5,
        hidden: vec![48],
        synthetic_per_class: 40,
        seed: 13,
        ..TrainConfig::default()
    };
    let stream = config.load_stream::<f32>().unwrap();
    let exp = run_experiment(&config, &stream, &mut Quiet).unwrap();
    let text = Checkpoint::new(exp.model.clone()).to_json().unwrap();
    let restored = Checkpoint::<f32>::from_json(&text).unwrap().model;
    let layers = export_csr(&restored, &exp.weight_mask).unwrap();

    let mut rebuilt = restored.clone();
    for w in rebuilt.maskable_weights_mut() {
        w.data_mut().fill(f32::NAN);
    }
    import_csr(&mut rebuilt, &layers).unwrap();
    let exact = rebuilt
        .maskable_weights()
        .zip(exp.model.maskable_weights())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let n = exp.weight_mask.total();
    let nnz: usize = layers.iter().map(|l| l.values.len()).sum();
    let budget = ((1.0 - config.sparsity()) * n as f64).round() as usize;
    let (value_bytes, index_bytes) = (4, 8);
    let declared: usize = layers
        .iter()
        .map(|l| {
            CsrMatrix {
                n_rows: l.n_rows,
                n_cols: l.n_cols,
                row_ptr: l.row_ptr.clone(),
                col_idx: l.col_idx.clone(),
                values: l.values.clone(),
            }
            .storage_bytes(value_bytes, index_bytes)
        })
        .sum();
    let index_arrays: usize = layers.iter().map(|l| l.row_ptr.len() + l.col_idx.len()).sum();
    let bound = budget * value_bytes + index_arrays * index_bytes;
    outcome(
        exact && nnz <= budget && declared <= bound,
        format!("exact {exact}, {nnz} stored values for budget {budget} of {n}, {declared} bytes <= {bound}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let probe = catch_unwind(invariant_run).ok();
    let from_probe = |f: fn(&InvariantProbe) -> Outcome| match &probe {
        Some(p) => f(p),
        None => outcome(false, "invariant run panicked"),
    };
    let criteria: Vec<(u32, &str, Box<dyn FnOnce() -> Outcome>)> = vec![
        (1, "gradient correctness", Box::new(gradient_correctness)),
        (2, "mask budget trajectory", Box::new(|| from_probe(mask_budget))),
        (3, "pruned weights stay zero", Box::new(|| from_probe(pruned_weights))),
        (4, "gradient mask nesting", Box::new(|| from_probe(gradient_nesting))),
        (5, "flops proportionality", Box::new(flops_proportionality)),
        (6, "memory formula fixture", Box::new(memory_fixture)),
        (7, "data removal schedule", Box::new(ddr_schedule)),
        (8, "reservoir uniformity", Box::new(reservoir_uniformity)),
        (9, "desk-scale trend", Box::new(desk_scale_trend)),
        (10, "determinism", Box::new(determinism)),
        (11, "csr round trip", Box::new(csr_round_trip)),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let o = guarded(run);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
