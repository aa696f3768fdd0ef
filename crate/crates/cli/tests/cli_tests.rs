//! End-to-end command tests driven through the library entry point.

use std::fs;
use std::path::PathBuf;

use pdenet_cli::run;
use pdenet_core::checkpoint::{load_checkpoint, save_checkpoint};

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pdenet-cli-{name}"));
    fs::remove_dir_all(&dir).ok();
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn toy_config(dir: &std::path::Path, epochs: usize) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"
[dynamics]
family = "parabolic"
in_channels = 1
image_size = 8
widths = [4]
final_width = 4
steps_per_block = 2
num_classes = 2

[training]
stage_epochs = [{epochs}]
stage_lr = [0.05]
momentum = 0.9
batch_size = 16
augment = false
val_fraction = 0.2

[regularization]
alpha1 = 1e-4
alpha2 = 1e-4
tau = 1e-3
"#
        ),
    )
    .unwrap();
    path
}

fn args(parts: &[&str]) -> Vec<String> {
    std::iter::once("pdenet".to_string())
        .chain(parts.iter().map(|s| s.to_string()))
        .collect()
}

#[test]
fn train_twice_produces_identical_history_and_checkpoint() {
    let dir = temp_dir("train-det");
    let cfg = toy_config(&dir, 3);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let code = run(args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--dataset",
            "blobs",
            "--synth-per-class",
            "30",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
    }
    let ha = fs::read(out_a.join("history.csv")).unwrap();
    let hb = fs::read(out_b.join("history.csv")).unwrap();
    assert_eq!(ha, hb, "history files differ");
    let ca = fs::read(out_a.join("checkpoint.ck")).unwrap();
    let cb = fs::read(out_b.join("checkpoint.ck")).unwrap();
    assert_eq!(ca, cb, "checkpoint files differ");
    assert!(String::from_utf8(ha).unwrap().starts_with("epoch,stage,lr,"));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_reads_a_trained_checkpoint() {
    let dir = temp_dir("eval");
    let cfg = toy_config(&dir, 2);
    let out = dir.join("run");
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--dataset",
            "blobs",
            "--synth-per-class",
            "20",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    let confusion = dir.join("confusion.csv");
    let code = run(args(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.ck").to_str().unwrap(),
        "--dataset",
        "blobs",
        "--synth-per-class",
        "20",
        "--seed",
        "3",
        "--split",
        "val",
        "--out",
        confusion.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let text = fs::read_to_string(&confusion).unwrap();
    assert!(text.starts_with("pred_0,pred_1"));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn derive_pde_recovers_diffusion_from_laplacian_stencil() {
    let dir = temp_dir("derive");
    let out = dir.join("beta.csv");
    let code = run(args(&[
        "derive-pde",
        "--stencil",
        "-1,2,-1",
        "--h",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().skip(1) {
        let (name, value) = line.split_once(',').unwrap();
        fields.insert(name.to_string(), value.parse::<f64>().unwrap());
    }
    assert_eq!(fields["reaction"], 0.0);
    assert_eq!(fields["convection"], 0.0);
    assert_eq!(fields["diffusion"], 1.0);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn analyze_stability_on_zero_weight_net_reports_unit_ratios() {
    let dir = temp_dir("analyze-zero");
    // Build a checkpoint whose weights are all zero: every block is then the
    // identity map and all perturbation ratios must be exactly 1.
    let spec = {
        use pdenet_core::dynamics::{DynamicsSpec, Family};
        use pdenet_core::layers::{Activation, StepNorm};
        DynamicsSpec {
            family: Family::Parabolic,
            in_channels: 1,
            image_height: 8,
            image_width: 8,
            widths: vec![4],
            final_width: 4,
            steps_per_block: 2,
            dt: 1.0,
            num_classes: 2,
            activation: Activation::Relu,
            step_norm: StepNorm::Tv { eps: 1e-3 },
        }
    };
    let zeros = {
        let mut w = pdenet_core::weights::NetWeights::init(
            &spec,
            &mut pdenet_core::rng::Rng::seed_from_u64(0),
        )
        .unwrap();
        for s in w.slices_mut() {
            s.fill(0.0);
        }
        w.to_flat()
    };
    let bn = pdenet_core::dynamics::BnRunningStats::init(&spec);
    let cp = pdenet_core::checkpoint::Checkpoint {
        spec,
        weights: zeros.clone(),
        velocity: zeros.clone(),
        rng_state: [1, 2, 3, 4],
        next_epoch: 0,
        best_epoch: 0,
        best_val_accuracy: 0.0,
        best_val_loss: 0.0,
        best_weights: zeros,
        bn: bn.clone(),
        best_bn: bn,
        data_stats: None,
        history: Vec::new(),
    };
    let ck = dir.join("zero.ck");
    save_checkpoint(&cp, &ck).unwrap();

    let out = dir.join("analysis");
    let code = run(args(&[
        "analyze",
        "--mode",
        "stability",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--seed",
        "5",
        "--trials",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("stability.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let ratio: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(ratio, 1.0, "line {line}");
        rows += 1;
    }
    assert!(rows >= 4);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn analyze_energy_writes_trace() {
    let dir = temp_dir("analyze-energy");
    let cfg = toy_config(&dir, 1);
    let out = dir.join("analysis");
    let code = run(args(&[
        "analyze",
        "--mode",
        "energy",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "2",
        "--steps",
        "16",
        "--dt",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(text.lines().count(), 17); // header + 16 steps
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn check_grad_passes_on_fresh_weights() {
    let dir = temp_dir("check-grad");
    let cfg = toy_config(&dir, 1);
    let code = run(args(&[
        "check-grad",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
    ]));
    assert_eq!(code, 0);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    // Unknown flag: usage error, exit 2.
    assert_eq!(run(args(&["train", "--bogus"])), 2);
    assert_eq!(run(args(&["frobnicate"])), 2);
    // Missing file: runtime error, exit 1.
    assert_eq!(
        run(args(&[
            "eval",
            "--checkpoint",
            "/nonexistent/never.ck",
            "--dataset",
            "blobs",
        ])),
        1
    );
    // Bad stencil arity: runtime error, exit 1.
    assert_eq!(run(args(&["derive-pde", "--stencil", "1,2"])), 1);
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = temp_dir("resume");
    let out = dir.join("run");
    // First leg: a config capped at 1 epoch.
    let cfg1 = dir.join("leg1.toml");
    fs::write(
        &cfg1,
        r#"
[dynamics]
family = "parabolic"
in_channels = 1
image_size = 8
widths = [4]
final_width = 4
steps_per_block = 2
num_classes = 2

[training]
stage_epochs = [3]
stage_lr = [0.05]
momentum = 0.9
batch_size = 16
augment = false
val_fraction = 0.2
limit_epochs = 1
"#,
    )
    .unwrap();
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            cfg1.to_str().unwrap(),
            "--dataset",
            "rings",
            "--synth-per-class",
            "20",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    let mid = load_checkpoint(&out.join("checkpoint.ck")).unwrap();
    assert_eq!(mid.next_epoch, 1);
    // Second leg: the uncapped config resumes to 3 epochs.
    let cfg2 = toy_config(&dir, 3);
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            cfg2.to_str().unwrap(),
            "--dataset",
            "rings",
            "--synth-per-class",
            "20",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            "--resume",
        ])),
        0
    );
    let done = load_checkpoint(&out.join("checkpoint.ck")).unwrap();
    assert_eq!(done.next_epoch, 3);
    assert_eq!(done.history.len(), 3);
    fs::remove_dir_all(&dir).ok();
}
