//! Training-stack verification: regularizer value against a naive loop oracle
//! and finite differences, full-objective finite differences, batch
//! invariances, bit-exact determinism, and checkpoint/resume equivalence.

mod common;

use pdenet_core::adjoint::fd_check;
use pdenet_core::checkpoint::load_checkpoint;
use pdenet_core::data::{synth_dataset, DataSplit, SynthKind};
use pdenet_core::dynamics::{DynamicsSpec, Family};
use pdenet_core::layers::Activation;
use pdenet_core::rng::Rng;
use pdenet_core::tensor::Tensor;
use pdenet_core::training::{
    evaluate, moving_average, objective, phi_tau, regularizer, train, train_simple, RegParams,
    TrainConfig, TrainJob, TrainOutcome,
};
use pdenet_core::weights::{NetWeights, StepWeights};

fn step_flat(step: &StepWeights) -> Vec<f64> {
    let mut v = Vec::new();
    let mut push_layer = |w: &pdenet_core::layers::SymLayerWeights| {
        v.extend_from_slice(w.conv.weights());
        if let Some(n) = &w.norm {
            v.extend_from_slice(&n.scale);
            v.extend_from_slice(&n.bias);
        }
    };
    match step {
        StepWeights::Single(w) => push_layer(w),
        StepWeights::Pair { first, second } => {
            push_layer(first);
            push_layer(second);
        }
    }
    v
}

/// Naive loop re-implementation of the regularizer value.
fn regularizer_value_oracle(w: &NetWeights, spec: &DynamicsSpec, rp: &RegParams) -> f64 {
    let dt = spec.dt;
    let mut tv = 0.0;
    let mut tik = 0.0;
    for block in &w.blocks {
        let thetas: Vec<Vec<f64>> = block.steps.iter().map(step_flat).collect();
        let n = thetas.len();
        for j in 0..n {
            for &v in &thetas[j] {
                tik += dt * v * v;
            }
            if j + 1 < n {
                for (a, b) in thetas[j].iter().zip(&thetas[j + 1]) {
                    tv += dt * phi_tau((b - a) / dt, rp.tau);
                }
            } else {
                tv += dt * thetas[j].len() as f64 * phi_tau(0.0, rp.tau);
            }
        }
    }
    let mut cls = 0.0;
    for &v in w.classifier.weight.iter().chain(&w.classifier.bias) {
        cls += v * v;
    }
    rp.alpha1 * tv + 0.5 * rp.alpha2 * (tik + cls)
}

#[test]
fn regularizer_value_matches_naive_loop_and_gradient_passes_fd() {
    let spec = DynamicsSpec {
        steps_per_block: 3,
        ..DynamicsSpec::toy(Family::Parabolic)
    };
    let mut rng = Rng::seed_from_u64(60);
    for inst in 0..10 {
        let mut w = NetWeights::init(&spec, &mut rng).unwrap();
        for v in w.classifier.weight.iter_mut() {
            *v = rng.normal();
        }
        let rp = RegParams {
            alpha1: 0.3 + 0.1 * inst as f64,
            alpha2: 0.2,
            tau: 1e-3,
        };
        let (value, grads) = regularizer(&w, &spec, &rp).unwrap();
        let oracle = regularizer_value_oracle(&w, &spec, &rp);
        assert!(
            common::rel_err(value, oracle) < 1e-13,
            "inst {inst}: {value} vs {oracle}"
        );

        // FD on the regularizer gradient to 1e-8, probing along the gradient
        // itself so the directional derivative is well conditioned against
        // the value's summation roundoff.
        let flat = w.to_flat();
        let mut dir = grads.to_flat();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        for d in dir.iter_mut() {
            *d /= norm;
        }
        let analytic = norm;
        let (wl, specl) = (w.clone(), spec.clone());
        let mut f = move |p: &[f64]| {
            let mut w2 = wl.clone();
            w2.set_from_flat(p).unwrap();
            regularizer(&w2, &specl, &rp).unwrap().0
        };
        let best = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| fd_check(&mut f, &flat, &dir, analytic, h).relative_error)
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-8, "inst {inst}: fd error {best}");
    }
}

#[test]
fn regularizer_ignores_example_permutation() {
    // The regularizer depends on weights only; value is identical whatever
    // batch is being processed (checked through the objective's reg part).
    let spec = DynamicsSpec::toy(Family::Parabolic);
    let mut rng = Rng::seed_from_u64(61);
    let w = NetWeights::init(&spec, &mut rng).unwrap();
    let rp = RegParams::cifar();
    let x1 = Tensor::randn([3, 1, 8, 8], 1.0, &mut rng);
    let x2 = Tensor::randn([3, 1, 8, 8], 1.0, &mut rng);
    let a = objective(&w, &spec, &x1, &[0, 1, 0], &rp).unwrap();
    let b = objective(&w, &spec, &x2, &[1, 0, 1], &rp).unwrap();
    assert_eq!(a.reg, b.reg);
}

#[test]
fn full_objective_passes_fd() {
    let spec = DynamicsSpec {
        activation: Activation::Tanh,
        ..DynamicsSpec::toy(Family::SecondOrder)
    };
    let mut rng = Rng::seed_from_u64(62);
    let w = NetWeights::init(&spec, &mut rng).unwrap();
    let x = Tensor::randn([3, 1, 8, 8], 0.8, &mut rng);
    let labels = vec![0usize, 1, 0];
    let rp = RegParams {
        alpha1: 2e-4,
        alpha2: 2e-4,
        tau: 1e-3,
    };
    let eval = objective(&w, &spec, &x, &labels, &rp).unwrap();
    let flat = w.to_flat();
    let mut dir: Vec<f64> = (0..flat.len()).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    for d in dir.iter_mut() {
        *d /= norm;
    }
    let analytic: f64 = eval.grads.to_flat().iter().zip(&dir).map(|(g, d)| g * d).sum();
    let (wl, specl, xl, labelsl) = (w.clone(), spec.clone(), x.clone(), labels.clone());
    let mut f = move |p: &[f64]| {
        let mut w2 = wl.clone();
        w2.set_from_flat(p).unwrap();
        objective(&w2, &specl, &xl, &labelsl, &rp).unwrap().value
    };
    let best = [1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&h| fd_check(&mut f, &flat, &dir, analytic, h).relative_error)
        .fold(f64::INFINITY, f64::min);
    assert!(best <= 1e-6, "objective fd error {best}");
}

#[test]
fn duplicating_every_example_leaves_objective_unchanged() {
    let spec = DynamicsSpec::toy(Family::Parabolic);
    let mut rng = Rng::seed_from_u64(63);
    let w = NetWeights::init(&spec, &mut rng).unwrap();
    let x = Tensor::randn([2, 1, 8, 8], 1.0, &mut rng);
    let labels = vec![0usize, 1];
    let rp = RegParams::none();
    let single = objective(&w, &spec, &x, &labels, &rp).unwrap();
    // Duplicate the batch.
    let mut doubled = Tensor::zeros([4, 1, 8, 8]);
    for b in 0..2 {
        doubled.plane_mut(b, 0).copy_from_slice(x.plane(b, 0));
        doubled.plane_mut(b + 2, 0).copy_from_slice(x.plane(b, 0));
    }
    let both = objective(&w, &spec, &doubled, &[0, 1, 0, 1], &rp).unwrap();
    // Mean loss: duplication cannot change the value beyond roundoff. Batch
    // norm sees identical per-channel statistics for the doubled batch.
    assert!(
        (single.value - both.value).abs() < 1e-12,
        "{} vs {}",
        single.value,
        both.value
    );
}

fn toy_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage_epochs: vec![epochs],
        stage_lr: vec![0.05],
        momentum: 0.9,
        batch_size: 16,
        augment: false,
        seed,
        limit_epochs: None,
        early_stop_val_accuracy: None,
    }
}

fn toy_train(family: Family, epochs: usize, seed: u64) -> (TrainOutcome, DynamicsSpec, DataSplit) {
    let data = synth_dataset(SynthKind::Blobs, 40, 11).unwrap();
    let spec = DynamicsSpec {
        family,
        in_channels: 1,
        image_height: 8,
        image_width: 8,
        widths: vec![4],
        final_width: 4,
        steps_per_block: 2,
        dt: 1.0,
        num_classes: 2,
        activation: Activation::Relu,
        step_norm: pdenet_core::layers::StepNorm::Tv { eps: 1e-3 },
    };
    let cfg = toy_cfg(seed, epochs);
    let rp = RegParams {
        alpha1: 1e-4,
        alpha2: 1e-4,
        tau: 1e-3,
    };
    let outcome = train_simple(&spec, &cfg, &rp, &data.train, &data.val).unwrap();
    (outcome, spec, data.train)
}

#[test]
fn separable_toy_set_reaches_full_training_accuracy() {
    let (outcome, _, _) = toy_train(Family::Parabolic, 20, 7);
    let last = outcome.history.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0, "history: {:?}", outcome.history.len());
}

#[test]
fn objective_decreases_in_moving_average_on_toy_set() {
    let (outcome, _, _) = toy_train(Family::Parabolic, 20, 7);
    let losses: Vec<f64> = outcome.history.iter().map(|r| r.train_loss).collect();
    let ma = moving_average(&losses, 5);
    for pair in ma.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "moving average increased: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (a, spec, train_split) = toy_train(Family::Hamiltonian, 4, 9);
    let (b, _, _) = toy_train(Family::Hamiltonian, 4, 9);
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_weights, b.final_weights);
    assert_eq!(a.final_bn, b.final_bn);
    // Evaluation of the final weights is identical too.
    let ea = evaluate(&a.final_weights, &spec, &a.final_bn, &train_split, 16).unwrap();
    let eb = evaluate(&b.final_weights, &spec, &b.final_bn, &train_split, 16).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn resume_from_checkpoint_reproduces_uninterrupted_run() {
    let dir = std::env::temp_dir().join("pdenet-resume-test");
    std::fs::create_dir_all(&dir).unwrap();
    let ck_full = dir.join("full.ck");
    let ck_half = dir.join("half.ck");

    let data = synth_dataset(SynthKind::Rings, 30, 21).unwrap();
    let spec = DynamicsSpec {
        family: Family::SecondOrder,
        in_channels: 1,
        image_height: 8,
        image_width: 8,
        widths: vec![4],
        final_width: 4,
        steps_per_block: 2,
        dt: 1.0,
        num_classes: 2,
        activation: Activation::Relu,
        step_norm: pdenet_core::layers::StepNorm::Tv { eps: 1e-3 },
    };
    let rp = RegParams::cifar();

    // Uninterrupted: four epochs.
    let cfg4 = toy_cfg(33, 4);
    let full = train(TrainJob {
        spec: &spec,
        cfg: &cfg4,
        reg: &rp,
        train: &data.train,
        val: &data.val,
        data_stats: None,
        checkpoint_path: Some(ck_full.clone()),
        resume: None,
    })
    .unwrap();

    // Interrupted: stop after two epochs, then resume to four.
    let cfg2 = TrainConfig {
        limit_epochs: Some(2),
        ..toy_cfg(33, 4)
    };
    train(TrainJob {
        spec: &spec,
        cfg: &cfg2,
        reg: &rp,
        train: &data.train,
        val: &data.val,
        data_stats: None,
        checkpoint_path: Some(ck_half.clone()),
        resume: None,
    })
    .unwrap();
    let mid = load_checkpoint(&ck_half).unwrap();
    assert_eq!(mid.next_epoch, 2);
    let resumed = train(TrainJob {
        spec: &spec,
        cfg: &cfg4,
        reg: &rp,
        train: &data.train,
        val: &data.val,
        data_stats: None,
        checkpoint_path: Some(ck_half.clone()),
        resume: Some(mid),
    })
    .unwrap();

    // Bit-identical final weights, history, and checkpoint files.
    assert_eq!(full.final_weights, resumed.final_weights);
    assert_eq!(full.history, resumed.history);
    assert_eq!(
        std::fs::read(&ck_full).unwrap(),
        std::fs::read(&ck_half).unwrap()
    );
    std::fs::remove_file(&ck_full).ok();
    std::fs::remove_file(&ck_half).ok();
}

#[test]
fn confusion_matrix_accuracy_matches_trainer_eval_exactly() {
    let (outcome, spec, train_split) = toy_train(Family::Parabolic, 3, 13);
    let (_, acc) = evaluate(
        &outcome.final_weights,
        &spec,
        &outcome.final_bn,
        &train_split,
        16,
    )
    .unwrap();
    let cm = pdenet_core::analysis::confusion_matrix(
        &outcome.final_weights,
        &spec,
        &outcome.final_bn,
        &train_split,
        16,
    )
    .unwrap();
    assert_eq!(cm.accuracy, acc);
    assert_eq!(cm.trace() as f64 / cm.total() as f64, acc);
    // Row sums count the per-class examples.
    for class in 0..2 {
        let count = train_split.labels.iter().filter(|&&l| l == class).count();
        assert_eq!(cm.row_sum(class), count);
    }
}
