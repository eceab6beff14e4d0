//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p cunet-core --test acceptance -- 9 10`.

mod common;

use std::time::Instant;

use common::*;
use cunet_core::data::{synth_guided_dataset, DatasetKind, SamplePair};
use cunet_core::io::{decode_pnm, encode_pnm, Checkpoint, CheckpointMeta};
use cunet_core::metrics::{psnr, rmse};
use cunet_core::model::{cunet_forward, decompose, init_params, CuNetParams, ModelConfig, Task};
use cunet_core::oracle::{
    csc_objective, ista_csc, mcsc_alternating_solve, mcsc_objective, CscProblem, McscProblem, SolverConfig,
};
use cunet_core::rng::SeededRng;
use cunet_core::train::{adam_step, batch_gradients, lr_at, train, AdamState, TrainConfig, TrainState};
use cunet_core::verify::{gradient_check, unrolled_equivalence, GradCheckConfig};
use cunet_core::{adjoint_conv, conv_same, Tensor};
use rand::Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn adjoint_identity() -> Outcome {
    let mut rng = SeededRng::new(100);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let (k, s, c) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..4));
        let bank = random_bank(&mut rng, k, s, c);
        let u = random_tensor(&mut rng, h, w, k);
        let r = random_tensor(&mut rng, h, w, c);
        let lhs = conv_same(&bank, &r).unwrap().dot(&u).unwrap();
        let rhs = r.dot(&adjoint_conv(&bank, &u).unwrap()).unwrap();
        worst = worst.max((lhs - rhs).abs());
    }
    (worst <= 1e-10, format!("max |<Wr,u> - <r,W'u>| = {worst:.3e} over 100 triples (limit 1e-10)"))
}

fn ista_monotone() -> Outcome {
    let mut rng = SeededRng::new(200);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let p =
            CscProblem::new(random_tensor(&mut rng, 8, 8, 1), random_bank(&mut rng, 2, 3, 1), rng.gen_range(0.01..0.3))
                .unwrap();
        let cfg = SolverConfig { inner_iters: 200, tolerance: 0.0, ..SolverConfig::default() };
        let out = ista_csc(&p, &cfg).unwrap();
        let mut prev = csc_objective(&p, &Tensor::zeros(8, 8, 2)).unwrap();
        for &f in &out.objective_trace {
            worst = worst.max((f - prev) / prev.abs());
            prev = f;
        }
    }
    (worst <= 1e-12, format!("largest relative increase {worst:.3e} over 20 problems x 200 iterations (limit 1e-12)"))
}

fn unrolled_matches_ista() -> Outcome {
    let mut worst = 0.0f64;
    for blocks in [1, 3, 6] {
        for seed in 0..3 {
            worst = worst.max(unrolled_equivalence(blocks, 2, 3, 1, 8, seed).unwrap().max_gap());
        }
    }
    (worst <= 1e-10, format!("max iterate gap {worst:.3e} for J in {{1,3,6}} (limit 1e-10)"))
}

fn alternating_solver() -> Outcome {
    let mut rng = SeededRng::new(400);
    let mut worst_rise = f64::NEG_INFINITY;
    let mut worst_gap = 0.0f64;
    for _ in 0..10 {
        let (x, y) = (random_tensor(&mut rng, 8, 8, 1), random_tensor(&mut rng, 8, 8, 1));
        let banks: Vec<_> = (0..4).map(|_| random_bank(&mut rng, 2, 3, 1)).collect();
        let p = McscProblem::new(x, y, banks[0].clone(), banks[1].clone(), banks[2].clone(), banks[3].clone(), 0.1)
            .unwrap();
        let cfg = SolverConfig {
            inner_iters: 50,
            outer_iters: 60,
            tolerance: 0.0,
            power_iters: 300,
            ..SolverConfig::default()
        };
        let sol = mcsc_alternating_solve(&p, &cfg).unwrap();
        let zero = Tensor::zeros(8, 8, 2);
        let mut prev = mcsc_objective(&p, &zero, &zero, &zero).unwrap();
        for &f in &sol.objective_trace {
            worst_rise = worst_rise.max((f - prev) / prev.abs());
            prev = f;
        }
        let best = mcsc_reference_minimum(&p, 20000);
        worst_gap = worst_gap.max((prev - best) / best);
    }
    (
        worst_rise <= 1e-12 && worst_gap <= 0.01,
        format!(
            "largest step increase {worst_rise:.3e}, worst gap to joint optimum {:.4}% (limit 1%)",
            100.0 * worst_gap
        ),
    )
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut groups = 0;
    for task in [Task::Mir, Task::Mif] {
        for outer_passes in [1, 2] {
            let r = gradient_check(task, &GradCheckConfig { outer_passes, ..GradCheckConfig::default() }, 0).unwrap();
            worst = worst.max(r.max_rel_error());
            groups += r.groups.len();
        }
    }
    (worst < 1e-4, format!("max relative error {worst:.3e} over {groups} parameter groups, both heads (limit 1e-4)"))
}

fn decomposition_identity() -> Outcome {
    let mut rng = SeededRng::new(600);
    let mut worst = 0.0f64;
    let mut forwards = 0;
    for task in [Task::Mir, Task::Mif] {
        for n in 0..50 {
            let cfg = ModelConfig {
                task,
                k: rng.gen_range(1..5),
                s: rng.gen_range(1..6),
                blocks: rng.gen_range(1..4),
                m: if n % 5 == 0 { 3 } else { 1 },
                outer_passes: rng.gen_range(1..3),
                residual: n % 7 != 0,
            };
            let params: CuNetParams<f64> = init_params(&cfg, n).unwrap();
            let (h, w) = (rng.gen_range(4..16), rng.gen_range(4..16));
            let x = random_tensor(&mut rng, h, w, cfg.m);
            let y = random_tensor(&mut rng, h, w, cfg.m);
            let (z, trace) = cunet_forward(&x, &y, &params).unwrap();
            let d = decompose(&trace).unwrap();
            worst = worst.max(d.component_sum().unwrap().max_abs_diff(&z).unwrap());
            forwards += 1;
        }
    }
    (worst == 0.0, format!("max |z - sum of points| = {worst:e} over {forwards} forwards"))
}

fn desk_model(task: Task) -> ModelConfig {
    ModelConfig { task, k: 8, s: 5, blocks: 2, m: 1, outer_passes: 1, residual: true }
}

fn desk_config() -> TrainConfig {
    TrainConfig { lr0: 3e-3, batch_size: 16, epochs: 30, seed: 7, ..TrainConfig::default() }
}

/// Trains on 2000 samples and returns mean held-out (input, model) scores.
fn desk_run(kind: DatasetKind, metric: fn(&Tensor<f32>, &Tensor<f32>) -> f64) -> (f64, f64) {
    let mut all = synth_guided_dataset(kind, 2100, 64, 11).unwrap();
    let val: Vec<SamplePair<f32>> = all.split_off(2000).iter().map(|s| s.cast()).collect();
    let train_set: Vec<SamplePair<f32>> = all.iter().map(|s| s.cast()).collect();
    let params: CuNetParams<f32> = init_params(&desk_model(kind.task()), 7).unwrap();
    let state = train(&desk_config(), &train_set, &[], TrainState::new(params), |_| Ok(())).unwrap();
    let n = val.len() as f64;
    let input = val.iter().map(|s| metric(&s.x, &s.z)).sum::<f64>() / n;
    let model = val.iter().map(|s| metric(&cunet_forward(&s.x, &s.y, &state.params).unwrap().0, &s.z)).sum::<f64>() / n;
    (input, model)
}

fn guided_sr() -> Outcome {
    let (bicubic, model) = desk_run(DatasetKind::GuidedSr, |a, b| rmse(a, b).unwrap());
    let reduction = 1.0 - model / bicubic;
    (
        reduction >= 0.2,
        format!("held-out RMSE {model:.3} vs bicubic {bicubic:.3}, {:.1}% lower (floor 20%)", 100.0 * reduction),
    )
}

fn guided_denoise() -> Outcome {
    let (noisy, model) = desk_run(DatasetKind::GuidedDenoise, |a, b| psnr(a, b).unwrap());
    let gain = model - noisy;
    (gain >= 3.0, format!("held-out PSNR {model:.2} dB vs noisy {noisy:.2} dB, gain {gain:.2} dB (floor 3 dB)"))
}

fn memorization() -> Outcome {
    let batch: Vec<SamplePair<f64>> = synth_guided_dataset(DatasetKind::GuidedSr, 4, 32, 900).unwrap();
    let refs: Vec<&SamplePair<f64>> = batch.iter().collect();
    let mut params: CuNetParams<f64> = init_params(&desk_model(Task::Mir), 9).unwrap();
    let mut adam = AdamState::new(&params);
    let (initial, _) = batch_gradients(&params, &refs).unwrap();
    for _ in 0..500 {
        let (_, g) = batch_gradients(&params, &refs).unwrap();
        adam_step(&mut params, &g, &mut adam, 5e-3).unwrap();
    }
    let (last, _) = batch_gradients(&params, &refs).unwrap();
    let ratio = last / initial;
    (ratio < 0.01, format!("loss {initial:.4e} -> {last:.4e} after 500 steps, ratio {:.3}% (limit 1%)", 100.0 * ratio))
}

fn persistence() -> Outcome {
    let params: CuNetParams<f32> = init_params(&desk_model(Task::Mif), 3).unwrap();
    let mut adam = AdamState::new(&params);
    adam.t = 12;
    let mut rng = SeededRng::new(1000);
    for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        for v in buf.iter_mut() {
            *v = rng.gen_range(0.0..1e-3);
        }
    }
    let ck = Checkpoint {
        params,
        adam: Some(adam),
        meta: CheckpointMeta { epoch: 12, seed: 3, loss_history: vec![0.1, 0.05] },
    };
    let bytes = ck.encode().unwrap();
    let again = Checkpoint::<f32>::decode(&bytes).unwrap().encode().unwrap();
    let ckpt_ok = bytes == again;

    let mut worst_ratio = 0.0f64;
    for (maxval, channels) in [(255u16, 1), (255, 3), (65535, 1), (65535, 3)] {
        let img = Tensor::from_fn(9, 7, channels, |_, _, _| rng.gen_range(0.0..1.0));
        let (back, _) = decode_pnm(&encode_pnm(&img, maxval).unwrap()).unwrap();
        worst_ratio = worst_ratio.max(back.max_abs_diff(&img).unwrap() * maxval as f64 / 0.5);
    }
    let pnm_ok = worst_ratio <= 1.0 + 1e-9;

    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = [0, 49, 50, 150].iter().map(|&e| lr_at(e, &cfg)).collect();
    let lr_ok = lrs == [1e-4, 1e-4, 9e-5, 7.29e-5];
    (
        ckpt_ok && pnm_ok && lr_ok,
        format!(
            "checkpoint byte-identical: {ckpt_ok}, pnm error {:.3} of 0.5/maxval, lr at epochs 0/49/50/150 = {lrs:?}",
            worst_ratio
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("adjoint correctness", adjoint_identity),
        ("ISTA monotonicity", ista_monotone),
        ("unrolled/ISTA equivalence", unrolled_matches_ista),
        ("alternating MCSC solver", alternating_solver),
        ("gradient check", gradients),
        ("decomposition identity", decomposition_identity),
        ("desk-scale guided SR", guided_sr),
        ("desk-scale guided denoising", guided_denoise),
        ("single-batch memorization", memorization),
        ("persistence and lr schedule", persistence),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let id = n + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        let secs = start.elapsed().as_secs_f64();
        println!("{} {id:>2} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
