//! Command-line surface: `train`, `eval`, `analyze`, `check-grad`, and
//! `derive-pde`. Every run is deterministic under `--seed`; file outputs are
//! CSV, terminal outputs are aligned tables. Exit codes: 0 on success, 2 on
//! usage errors, 1 on runtime failures.

mod config;
mod report;

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pdenet_core::adjoint::fd_check;
use pdenet_core::analysis::{confusion_matrix, energy_trace, perturbation_stability};
use pdenet_core::checkpoint::{load_checkpoint, Checkpoint};
use pdenet_core::data::{
    channel_stats, load_cifar10, load_mnist_idx, normalize, synth_dataset, ChannelStats, DataSplit,
    Dataset, SynthKind,
};
use pdenet_core::dynamics::{BnRunningStats, DynamicsSpec, StoragePolicy};
use pdenet_core::layers::{softmax_cross_entropy, SymLayerWeights};
use pdenet_core::pde::{theta_to_beta_1d, theta_to_beta_2d, OPERATOR_NAMES_2D};
use pdenet_core::rng::Rng;
use pdenet_core::tensor::Tensor;
use pdenet_core::training::{evaluate, train, TrainJob};
use pdenet_core::weights::{NetWeights, StepWeights};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pdenet",
    version,
    about = "Train, evaluate, and analyze residual CNNs built as discretized PDE dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per a TOML config and write history + checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Stability, energy, or confusion diagnostics.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient verification per parameter group.
    CheckGrad(CheckGradArgs),
    /// Convert a convolution stencil into differential-operator coefficients.
    DerivePde(DerivePdeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset: cifar10 | mnist | blobs | xor | rings.
    #[arg(long)]
    dataset: String,
    /// Directory holding the dataset files (cifar10/mnist).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training examples per class for the synthetic datasets.
    #[arg(long, default_value_t = 100)]
    synth_per_class: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Seed for every random decision of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for history.csv and checkpoint.ck.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint in the output directory.
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which split to evaluate: test | val | train.
    #[arg(long, default_value = "test")]
    split: String,
    /// Seed for the dataset split (must match the training run).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path for the confusion matrix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the final weights instead of the validation-best ones.
    #[arg(long, default_value_t = false)]
    r#final: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// stability | energy | confusion.
    #[arg(long)]
    mode: String,
    /// Weights source: a trained checkpoint ...
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// ... or a config for freshly initialized weights.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset for inputs (confusion mode requires it).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    synth_per_class: usize,
    /// Perturbation trials per block (stability mode).
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Frobenius norm of the injected perturbation (stability mode).
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Time steps (energy mode).
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Step size (energy mode).
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Directory for CSV outputs; tables always go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradArgs {
    /// TOML run configuration describing the architecture to check.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative-error threshold per parameter group.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct DerivePdeArgs {
    /// Comma-separated stencil coefficients: 3 values (1D) or 9 (2D 3x3,
    /// row-major).
    #[arg(long, allow_hyphen_values = true)]
    stencil: String,
    /// Mesh width.
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs the chosen command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
        Command::DerivePde(args) => cmd_derive_pde(args),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    RunConfig::parse(&text)
}

fn load_dataset(args: &DataArgs, seed: u64, val_fraction: f64) -> Result<Dataset, String> {
    match args.dataset.as_str() {
        "cifar10" => {
            let dir = args
                .data
                .as_deref()
                .ok_or("--data DIR is required for cifar10")?;
            load_cifar10(dir, seed, val_fraction).map_err(|e| e.to_string())
        }
        "mnist" => {
            let dir = args
                .data
                .as_deref()
                .ok_or("--data DIR is required for mnist")?;
            load_mnist_idx(dir, seed, val_fraction).map_err(|e| e.to_string())
        }
        other => {
            let kind = SynthKind::parse(other).map_err(|e| e.to_string())?;
            synth_dataset(kind, args.synth_per_class, seed).map_err(|e| e.to_string())
        }
    }
}

fn check_dataset_matches(spec: &DynamicsSpec, ds: &Dataset) -> Result<(), String> {
    let [_, c, h, w] = ds.train.images.shape();
    if c != spec.in_channels || h != spec.image_height || w != spec.image_width {
        return Err(format!(
            "dataset images are {c}x{h}x{w} but the architecture expects {}x{}x{}",
            spec.in_channels, spec.image_height, spec.image_width
        ));
    }
    if ds.num_classes != spec.num_classes {
        return Err(format!(
            "dataset has {} classes but the architecture has {}",
            ds.num_classes, spec.num_classes
        ));
    }
    Ok(())
}

fn normalized(ds: &Dataset, stats: &ChannelStats) -> Dataset {
    Dataset {
        train: DataSplit {
            images: normalize(&ds.train.images, stats),
            labels: ds.train.labels.clone(),
        },
        val: DataSplit {
            images: normalize(&ds.val.images, stats),
            labels: ds.val.labels.clone(),
        },
        test: DataSplit {
            images: normalize(&ds.test.images, stats),
            labels: ds.test.labels.clone(),
        },
        num_classes: ds.num_classes,
    }
}

fn history_csv(history: &[pdenet_core::training::EpochRecord]) -> String {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.stage.to_string(),
                report::f(r.lr),
                report::f(r.train_objective),
                report::f(r.train_loss),
                report::f(r.train_accuracy),
                report::f(r.val_loss),
                report::f(r.val_accuracy),
            ]
        })
        .collect();
    report::csv(
        &[
            "epoch",
            "stage",
            "lr",
            "train_objective",
            "train_loss",
            "train_accuracy",
            "val_loss",
            "val_accuracy",
        ],
        &rows,
    )
}

fn cmd_train(args: TrainArgs) -> Result<(), String> {
    let cfg = read_config(&args.config)?;
    let spec = cfg.spec()?;
    let tc = cfg.train_config(args.seed)?;
    let rp = cfg.reg_params()?;
    let raw = load_dataset(&args.data, args.seed, cfg.val_fraction())?;
    check_dataset_matches(&spec, &raw)?;
    let stats = channel_stats(&raw.train);
    let ds = normalized(&raw, &stats);

    std::fs::create_dir_all(&args.out)
        .map_err(|e| format!("cannot create {}: {e}", args.out.display()))?;
    let ck_path = args.out.join("checkpoint.ck");
    let resume = if args.resume {
        Some(load_checkpoint(&ck_path).map_err(|e| e.to_string())?)
    } else {
        None
    };

    println!(
        "training {} network: {} blocks {:?}, {} steps/block, {} trainable weights",
        spec.family.name(),
        spec.widths.len(),
        spec.widths,
        spec.steps_per_block,
        spec.param_count()
    );
    let outcome = train(TrainJob {
        spec: &spec,
        cfg: &tc,
        reg: &rp,
        train: &ds.train,
        val: &ds.val,
        data_stats: Some(stats),
        checkpoint_path: Some(ck_path.clone()),
        resume,
    })
    .map_err(|e| e.to_string())?;

    let history_path = args.out.join("history.csv");
    std::fs::write(&history_path, history_csv(&outcome.history))
        .map_err(|e| format!("cannot write {}: {e}", history_path.display()))?;

    let rows: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.stage.to_string(),
                report::f6(r.lr),
                report::f6(r.train_loss),
                report::f6(r.train_accuracy),
                report::f6(r.val_loss),
                report::f6(r.val_accuracy),
            ]
        })
        .collect();
    println!(
        "{}",
        report::table(
            &["epoch", "stage", "lr", "train_loss", "train_acc", "val_loss", "val_acc"],
            &rows
        )
    );
    let (test_loss, test_acc) = evaluate(
        &outcome.best_weights,
        &spec,
        &outcome.best_bn,
        &ds.test,
        tc.batch_size,
    )
    .map_err(|e| e.to_string())?;
    println!(
        "best validation accuracy {:.4} at epoch {}; test accuracy {:.4} (loss {:.4})",
        outcome.best_val_accuracy, outcome.best_epoch, test_acc, test_loss
    );
    println!(
        "wrote {} and {}",
        history_path.display(),
        ck_path.display()
    );
    Ok(())
}

fn checkpoint_weights(cp: &Checkpoint, use_final: bool) -> Result<(NetWeights, BnRunningStats), String> {
    let mut w = NetWeights::init(&cp.spec, &mut Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    if use_final {
        w.set_from_flat(&cp.weights).map_err(|e| e.to_string())?;
        Ok((w, cp.bn.clone()))
    } else {
        w.set_from_flat(&cp.best_weights).map_err(|e| e.to_string())?;
        Ok((w, cp.best_bn.clone()))
    }
}

fn confusion_table(cm: &pdenet_core::analysis::ConfusionMatrix) -> String {
    let mut header: Vec<String> = vec!["true\\pred".into()];
    header.extend((0..cm.classes).map(|j| j.to_string()));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..cm.classes)
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend((0..cm.classes).map(|j| cm.at(i, j).to_string()));
            row
        })
        .collect();
    report::table(&header_refs, &rows)
}

fn cmd_eval(args: EvalArgs) -> Result<(), String> {
    let cp = load_checkpoint(&args.checkpoint).map_err(|e| e.to_string())?;
    let spec = cp.spec.clone();
    let (weights, bn) = checkpoint_weights(&cp, args.r#final)?;
    let raw = load_dataset(&args.data, args.seed, 0.2)?;
    check_dataset_matches(&spec, &raw)?;
    let stats = cp
        .data_stats
        .clone()
        .unwrap_or_else(|| channel_stats(&raw.train));
    let ds = normalized(&raw, &stats);
    let split = match args.split.as_str() {
        "test" => &ds.test,
        "val" => &ds.val,
        "train" => &ds.train,
        other => return Err(format!("unknown split '{other}' (expected test|val|train)")),
    };
    let cm = confusion_matrix(&weights, &spec, &bn, split, 125).map_err(|e| e.to_string())?;
    println!("{}", confusion_table(&cm));
    println!(
        "split: {}  examples: {}  accuracy: {:.4}  mean loss: {:.4}",
        args.split,
        cm.total(),
        cm.accuracy,
        cm.mean_loss
    );
    if let Some(out) = args.out {
        let rows: Vec<Vec<String>> = (0..cm.classes)
            .map(|i| (0..cm.classes).map(|j| cm.at(i, j).to_string()).collect())
            .collect();
        let header: Vec<String> = (0..cm.classes).map(|j| format!("pred_{j}")).collect();
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        std::fs::write(&out, report::csv(&header_refs, &rows))
            .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn analysis_weights(args: &AnalyzeArgs) -> Result<(DynamicsSpec, NetWeights, BnRunningStats), String> {
    match (&args.checkpoint, &args.config) {
        (Some(ck), _) => {
            let cp = load_checkpoint(ck).map_err(|e| e.to_string())?;
            let (w, bn) = checkpoint_weights(&cp, false)?;
            Ok((cp.spec, w, bn))
        }
        (None, Some(cfg_path)) => {
            let cfg = read_config(cfg_path)?;
            let spec = cfg.spec()?;
            let mut rng = Rng::seed_from_u64(args.seed);
            let w = NetWeights::init(&spec, &mut rng).map_err(|e| e.to_string())?;
            let bn = BnRunningStats::init(&spec);
            Ok((spec, w, bn))
        }
        (None, None) => Err("analyze needs --checkpoint or --config".into()),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), String> {
    let (spec, weights, bn) = analysis_weights(&args)?;
    let mut rng = Rng::seed_from_u64(args.seed.wrapping_add(1));
    match args.mode.as_str() {
        "stability" => {
            let inputs = match &args.dataset {
                Some(_) => {
                    let data_args = DataArgs {
                        dataset: args.dataset.clone().unwrap(),
                        data: args.data.clone(),
                        synth_per_class: args.synth_per_class,
                    };
                    let raw = load_dataset(&data_args, args.seed, 0.2)?;
                    check_dataset_matches(&spec, &raw)?;
                    let stats = channel_stats(&raw.train);
                    let n = raw.train.len().min(8);
                    let idx: Vec<usize> = (0..n).collect();
                    normalize(&raw.train.select(&idx).images, &stats)
                }
                // Seeded Gaussian inputs when no dataset is given.
                None => Tensor::randn(
                    [4, spec.in_channels, spec.image_height, spec.image_width],
                    1.0,
                    &mut rng,
                ),
            };
            let report_data =
                perturbation_stability(&weights, &spec, &inputs, args.noise, args.trials, &mut rng)
                    .map_err(|e| e.to_string())?;
            let rows: Vec<Vec<String>> = report_data
                .trials
                .iter()
                .map(|t| {
                    vec![
                        t.block.to_string(),
                        t.trial.to_string(),
                        report::f(t.ratio),
                    ]
                })
                .collect();
            let csv_text = report::csv(&["block", "trial", "ratio"], &rows);
            let summary_rows: Vec<Vec<String>> = report_data
                .max_ratio_per_block
                .iter()
                .enumerate()
                .map(|(b, r)| vec![b.to_string(), report::f6(*r)])
                .collect();
            println!(
                "{}",
                report::table(&["block", "max_ratio"], &summary_rows)
            );
            println!(
                "empirical growth constant at this horizon: {:.6} over {} trials/block",
                report_data.max_ratio, args.trials
            );
            if let Some(margin) = report_data.discrete_margin {
                println!("discrete forward-Euler margin max|1 + dt*lambda| = {margin:.6}");
            }
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
                let path = out.join("stability.csv");
                std::fs::write(&path, csv_text).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
        }
        "energy" => {
            // Time-constant second-order diagnostic on the first step's
            // convolution, without normalization.
            let first = &weights.blocks[0].steps[0];
            let conv = match first {
                StepWeights::Single(l) => l.conv.clone(),
                StepWeights::Pair { first, .. } => first.conv.clone(),
            };
            let layer = SymLayerWeights { conv, norm: None };
            let c = layer.conv.c_in();
            let (h, w) = spec.block_size(0);
            let y0 = Tensor::randn([1, c, h, w], 1.0, &mut rng);
            let trace = energy_trace(&layer, spec.activation, &y0, args.steps, args.dt)
                .map_err(|e| e.to_string())?;
            let rows: Vec<Vec<String>> = trace
                .energy
                .iter()
                .zip(&trace.linear_energy)
                .enumerate()
                .map(|(j, (e, el))| vec![j.to_string(), report::f(*e), report::f(*el)])
                .collect();
            let csv_text = report::csv(&["step", "energy", "linear_energy"], &rows);
            let show: Vec<Vec<String>> = rows
                .iter()
                .step_by((args.steps / 8).max(1))
                .cloned()
                .collect();
            println!("{}", report::table(&["step", "energy", "linear_energy"], &show));
            let worst = trace
                .energy
                .iter()
                .zip(&trace.linear_energy)
                .map(|(e, el)| if *el > 0.0 { e / el } else { 0.0 })
                .fold(0.0f64, f64::max);
            println!("max E/E_lin over {} steps at dt {}: {worst:.6}", args.steps, args.dt);
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
                let path = out.join("energy.csv");
                std::fs::write(&path, csv_text).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
        }
        "confusion" => {
            let dataset = args
                .dataset
                .clone()
                .ok_or("confusion mode needs --dataset")?;
            let data_args = DataArgs {
                dataset,
                data: args.data.clone(),
                synth_per_class: args.synth_per_class,
            };
            let raw = load_dataset(&data_args, args.seed, 0.2)?;
            check_dataset_matches(&spec, &raw)?;
            let stats = channel_stats(&raw.train);
            let ds = normalized(&raw, &stats);
            let cm = confusion_matrix(&weights, &spec, &bn, &ds.test, 125)
                .map_err(|e| e.to_string())?;
            println!("{}", confusion_table(&cm));
            println!("accuracy: {:.4}  mean loss: {:.4}", cm.accuracy, cm.mean_loss);
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
                let rows: Vec<Vec<String>> = (0..cm.classes)
                    .map(|i| (0..cm.classes).map(|j| cm.at(i, j).to_string()).collect())
                    .collect();
                let header: Vec<String> = (0..cm.classes).map(|j| format!("pred_{j}")).collect();
                let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
                let path = out.join("confusion.csv");
                std::fs::write(&path, report::csv(&header_refs, &rows))
                    .map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
        }
        other => return Err(format!("unknown mode '{other}' (expected stability|energy|confusion)")),
    }
    Ok(())
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<(), String> {
    let cfg = read_config(&args.config)?;
    let spec = cfg.spec()?;
    let mut rng = Rng::seed_from_u64(args.seed);
    let weights = NetWeights::init(&spec, &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::randn(
        [2, spec.in_channels, spec.image_height, spec.image_width],
        0.8,
        &mut rng,
    );
    let labels: Vec<usize> = (0..2).map(|i| i % spec.num_classes).collect();

    let (scores, cache) =
        pdenet_core::dynamics::forward_network_train(&weights, &spec, &x, StoragePolicy::Auto)
            .map_err(|e| e.to_string())?;
    let (_, gscores) = softmax_cross_entropy(&scores, &labels).map_err(|e| e.to_string())?;
    let grads = pdenet_core::adjoint::backprop_network(&weights, &spec, &cache, &gscores)
        .map_err(|e| e.to_string())?;

    let flat = weights.to_flat();
    let gflat = grads.to_flat();
    let groups = weights.param_groups();
    let mut rows = Vec::new();
    let mut failures = 0;
    let mut offset = 0;
    for group in &groups {
        let mut dir = vec![0.0; flat.len()];
        let mut norm = 0.0;
        for d in dir[offset..offset + group.len].iter_mut() {
            *d = rng.normal();
            norm += *d * *d;
        }
        let norm = norm.sqrt();
        for d in dir.iter_mut() {
            *d /= norm;
        }
        let analytic: f64 = gflat.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let (wl, specl, xl, labelsl) = (weights.clone(), spec.clone(), x.clone(), labels.clone());
        let mut f = move |p: &[f64]| {
            let mut w2 = wl.clone();
            w2.set_from_flat(p).unwrap();
            let (scores, _) =
                pdenet_core::dynamics::forward_network_train(&w2, &specl, &xl, StoragePolicy::Auto)
                    .unwrap();
            softmax_cross_entropy(&scores, &labelsl).unwrap().0
        };
        let mut best = fd_check(&mut f, &flat, &dir, analytic, 1e-6);
        for h in [1e-5, 1e-7] {
            let rep = fd_check(&mut f, &flat, &dir, analytic, h);
            if rep.relative_error < best.relative_error {
                best = rep;
            }
        }
        let ok = best.relative_error <= args.tolerance;
        if !ok {
            failures += 1;
        }
        rows.push(vec![
            group.name.clone(),
            group.len.to_string(),
            format!("{:.6e}", best.analytic),
            format!("{:.6e}", best.numeric),
            format!("{:.2e}", best.relative_error),
            format!("{:.0e}", best.step),
            if ok { "ok".into() } else { "FAIL".into() },
        ]);
        offset += group.len;
    }
    println!(
        "{}",
        report::table(
            &["group", "count", "analytic", "numeric", "rel_error", "step", "status"],
            &rows
        )
    );
    if failures > 0 {
        return Err(format!(
            "{failures} parameter group(s) exceeded the {:.0e} tolerance",
            args.tolerance
        ));
    }
    println!(
        "all {} parameter groups pass at tolerance {:.0e}",
        groups.len(),
        args.tolerance
    );
    Ok(())
}

fn cmd_derive_pde(args: DerivePdeArgs) -> Result<(), String> {
    let values: Vec<f64> = args
        .stencil
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad stencil entry '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    let (names, betas): (Vec<&str>, Vec<f64>) = match values.len() {
        3 => {
            let theta = [values[0], values[1], values[2]];
            let c = theta_to_beta_1d(theta, args.h).map_err(|e| e.to_string())?;
            (
                vec!["reaction", "convection", "diffusion"],
                c.beta.to_vec(),
            )
        }
        9 => {
            let mut theta = [0.0; 9];
            theta.copy_from_slice(&values);
            let c = theta_to_beta_2d(theta, args.h).map_err(|e| e.to_string())?;
            (OPERATOR_NAMES_2D.to_vec(), c.beta.to_vec())
        }
        n => {
            return Err(format!(
                "stencil needs 3 (1D) or 9 (2D) comma-separated values, got {n}"
            ))
        }
    };
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(&betas)
        .map(|(n, b)| vec![n.to_string(), report::f(*b)])
        .collect();
    println!("{}", report::table(&["coefficient", "value"], &rows));
    if let Some(out) = args.out {
        std::fs::write(&out, report::csv(&["coefficient", "value"], &rows))
            .map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

