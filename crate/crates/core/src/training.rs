//! The learning problem: cross-entropy plus a smoothed total-variation-in-time
//! and Tikhonov regularizer, minimized by box-constrained SGD with momentum
//! over a staged learning-rate schedule, with flip/pad/crop data augmentation.
//!
//! Training is bit-reproducible given (seed, dataset, config): everything runs
//! single-threaded with a fixed summation order and all randomness flows
//! through one generator whose state is checkpointed at epoch boundaries.

use std::path::PathBuf;

use crate::adjoint::backprop_network;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{ChannelStats, DataSplit};
use crate::dynamics::{
    forward_network_eval, forward_network_train, BnRunningStats, DynamicsSpec, StoragePolicy,
};
use crate::error::{Error, Result};
use crate::layers::{predict, softmax_cross_entropy, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weights::{Gradients, NetWeights, StepWeights};

/// Regularization parameters: alpha1 weights the smoothed-l1 penalty on the
/// time derivative of the per-step weights, alpha2 the Tikhonov term, and tau
/// conditions the smoothed absolute value `phi_tau(x) = sqrt(x^2 + tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
}

impl RegParams {
    pub fn none() -> Self {
        RegParams {
            alpha1: 0.0,
            alpha2: 0.0,
            tau: 1e-3,
        }
    }

    /// Defaults used for the 96x96 runs.
    pub fn stl10() -> Self {
        RegParams {
            alpha1: 4e-4,
            alpha2: 1e-4,
            tau: 1e-3,
        }
    }

    /// Defaults used for the 32x32 runs.
    pub fn cifar() -> Self {
        RegParams {
            alpha1: 2e-4,
            alpha2: 2e-4,
            tau: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::invalid("regularization weights must be nonnegative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        Ok(())
    }
}

#[inline]
pub fn phi_tau(x: f64, tau: f64) -> f64 {
    (x * x + tau).sqrt()
}

#[inline]
pub fn phi_tau_deriv(x: f64, tau: f64) -> f64 {
    x / (x * x + tau).sqrt()
}

fn step_param_slices(step: &StepWeights) -> Vec<&[f64]> {
    fn layer<'a>(w: &'a crate::layers::SymLayerWeights, v: &mut Vec<&'a [f64]>) {
        v.push(w.conv.weights());
        if let Some(n) = &w.norm {
            v.push(&n.scale);
            v.push(&n.bias);
        }
    }
    let mut v = Vec::new();
    match step {
        StepWeights::Single(w) => layer(w, &mut v),
        StepWeights::Pair { first, second } => {
            layer(first, &mut v);
            layer(second, &mut v);
        }
    }
    v
}

fn step_param_slices_mut(step: &mut StepWeights) -> Vec<&mut [f64]> {
    fn layer<'a>(w: &'a mut crate::layers::SymLayerWeights, v: &mut Vec<&'a mut [f64]>) {
        v.push(w.conv.weights_mut());
        if let Some(n) = w.norm.as_mut() {
            v.push(&mut n.scale);
            v.push(&mut n.bias);
        }
    }
    let mut v = Vec::new();
    match step {
        StepWeights::Single(w) => layer(w, &mut v),
        StepWeights::Pair { first, second } => {
            layer(first, &mut v);
            layer(second, &mut v);
        }
    }
    v
}

/// Value and exact gradient of the regularizer
///
/// ```text
/// R = alpha1 * sum_blocks sum_j dt * sum_k phi_tau(dtheta_jk)
///   + (alpha2/2) * (sum_blocks sum_j dt * |theta_j|^2 + |W|_F^2 + |mu|^2)
/// ```
///
/// with `dtheta_j = (theta_{j+1} - theta_j)/dt` as forward differences between
/// consecutive steps within a block (no coupling across connecting layers; the
/// last cell of the Riemann sum carries a zero difference). Opening and
/// connecting layer weights are not regularized.
pub fn regularizer(w: &NetWeights, spec: &DynamicsSpec, rp: &RegParams) -> Result<(f64, Gradients)> {
    rp.validate()?;
    let mut grads = w.zeros_like();
    let dt = spec.dt;
    let mut tv_value = 0.0;
    let mut tik_value = 0.0;

    for (bi, block) in w.blocks.iter().enumerate() {
        let n = block.steps.len();
        for j in 0..n {
            let cur = step_param_slices(&block.steps[j]);
            // Tikhonov on theta_j.
            let mut sq = 0.0;
            for s in &cur {
                for &v in s.iter() {
                    sq += v * v;
                }
            }
            tik_value += dt * sq;
            for (gi, s) in step_param_slices_mut(&mut grads.blocks[bi].steps[j])
                .into_iter()
                .zip(&cur)
            {
                for (g, &v) in gi.iter_mut().zip(s.iter()) {
                    *g += rp.alpha2 * dt * v;
                }
            }
            // Smoothed-l1 time difference against step j+1; the last cell of
            // the Riemann sum carries a zero difference and contributes
            // phi_tau(0) per component.
            if j + 1 < n {
                let next = step_param_slices(&block.steps[j + 1]);
                let mut cell = 0.0;
                let mut derivs: Vec<Vec<f64>> = Vec::with_capacity(cur.len());
                for (sc, sn) in cur.iter().zip(&next) {
                    let mut d = Vec::with_capacity(sc.len());
                    for (&a, &b) in sc.iter().zip(sn.iter()) {
                        let diff = (b - a) / dt;
                        cell += phi_tau(diff, rp.tau);
                        d.push(phi_tau_deriv(diff, rp.tau));
                    }
                    derivs.push(d);
                }
                tv_value += dt * cell;
                // d/dtheta_{j+1} [dt * phi((theta_{j+1}-theta_j)/dt)] = phi'
                for (gi, d) in step_param_slices_mut(&mut grads.blocks[bi].steps[j + 1])
                    .into_iter()
                    .zip(&derivs)
                {
                    for (g, &p) in gi.iter_mut().zip(d.iter()) {
                        *g += rp.alpha1 * p;
                    }
                }
                for (gi, d) in step_param_slices_mut(&mut grads.blocks[bi].steps[j])
                    .into_iter()
                    .zip(&derivs)
                {
                    for (g, &p) in gi.iter_mut().zip(d.iter()) {
                        *g -= rp.alpha1 * p;
                    }
                }
            } else {
                let count: usize = cur.iter().map(|s| s.len()).sum();
                tv_value += dt * count as f64 * rp.tau.sqrt();
            }
        }
    }

    // Tikhonov on the classifier.
    let mut cls = 0.0;
    for &v in &w.classifier.weight {
        cls += v * v;
    }
    for &v in &w.classifier.bias {
        cls += v * v;
    }
    for (g, &v) in grads.classifier.weight.iter_mut().zip(&w.classifier.weight) {
        *g += rp.alpha2 * v;
    }
    for (g, &v) in grads.classifier.bias.iter_mut().zip(&w.classifier.bias) {
        *g += rp.alpha2 * v;
    }

    let value = rp.alpha1 * tv_value + 0.5 * rp.alpha2 * (tik_value + cls);
    Ok((value, grads))
}

/// One evaluation of the learning objective on a mini-batch.
#[derive(Debug)]
pub struct ObjectiveEval {
    /// loss + regularizer.
    pub value: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub reg: f64,
    pub grads: Gradients,
    pub scores: Tensor,
    /// Batch statistics of every batch-norm layer, for the running EMA.
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Mean cross-entropy over the batch plus the regularizer, with gradients via
/// the adjoint pass (stored for parabolic blocks, reversible for hyperbolic).
pub fn objective(
    w: &NetWeights,
    spec: &DynamicsSpec,
    images: &Tensor,
    labels: &[usize],
    rp: &RegParams,
) -> Result<ObjectiveEval> {
    if labels.is_empty() {
        return Err(Error::invalid("objective on an empty batch"));
    }
    let (scores, cache) = forward_network_train(w, spec, images, StoragePolicy::Auto)?;
    let (loss, gscores) = softmax_cross_entropy(&scores, labels)?;
    let mut grads = backprop_network(w, spec, &cache, &gscores)?;
    let (reg, reg_grads) = regularizer(w, spec, rp)?;
    grads.axpy(1.0, &reg_grads)?;
    Ok(ObjectiveEval {
        value: loss + reg,
        loss,
        reg,
        grads,
        scores,
        bn_stats: cache.batch_stats(),
    })
}

/// Momentum state of the optimizer.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: NetWeights,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(w: &NetWeights, momentum: f64) -> Self {
        SgdState {
            velocity: w.zeros_like(),
            momentum,
        }
    }
}

/// One SGD-with-momentum step (`v <- m v + g`, `w <- w - lr v`) followed by
/// the componentwise projection of ResNet-block stencils onto [-1, 1].
pub fn sgd_step(w: &mut NetWeights, state: &mut SgdState, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let g = grads.slices();
    let mut v = state.velocity.slices_mut();
    let mut ws = w.slices_mut();
    if g.len() != v.len() || g.len() != ws.len() {
        return Err(Error::invalid("optimizer state does not match weights"));
    }
    for ((wv, vv), gv) in ws.iter_mut().zip(v.iter_mut()).zip(g) {
        for ((wi, vi), &gi) in wv.iter_mut().zip(vv.iter_mut()).zip(gv) {
            *vi = state.momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    w.project_block_stencils();
    Ok(())
}

// ---------------------------------------------------------------------------
// Data augmentation
// ---------------------------------------------------------------------------

/// Augmentation parameters for one image: horizontal flip and the crop offset
/// inside the zero-padded frame. Draw order is flip, then y, then x.
fn augment_params(pad: usize, rng: &mut Rng) -> (bool, usize, usize) {
    let flip = rng.uniform() < 0.5;
    let offy = rng.below(2 * pad + 1);
    let offx = rng.below(2 * pad + 1);
    (flip, offy, offx)
}

#[allow(clippy::too_many_arguments)]
fn augment_plane_into(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    pad: usize,
    flip: bool,
    offy: usize,
    offx: usize,
) {
    for y in 0..h {
        let sy = (y + offy) as isize - pad as isize;
        for x in 0..w {
            let sx = (x + offx) as isize - pad as isize;
            let v = if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                let col = if flip { w - 1 - sx as usize } else { sx as usize };
                src[sy as usize * w + col]
            } else {
                0.0
            };
            dst[y * w + x] = v;
        }
    }
}

/// Random horizontal flip (probability 1/2), zero-padding by ceil(dim/16) on
/// every side, and a random crop back to the original size. Applied
/// independently per example of the batch. With the centered crop and no flip
/// this is the identity away from the zeroed border.
pub fn augment(images: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let [n, c, h, w] = images.shape();
    if h != w {
        return Err(Error::invalid(format!(
            "augmentation expects square images, got {h}x{w}"
        )));
    }
    let pad = h.div_ceil(16);
    let mut out = Tensor::zeros([n, c, h, w]);
    for bi in 0..n {
        let (flip, offy, offx) = augment_params(pad, rng);
        for ci in 0..c {
            // Split borrows: read source plane before writing output plane.
            let src = images.plane(bi, ci).to_vec();
            augment_plane_into(&src, out.plane_mut(bi, ci), h, w, pad, flip, offy, offx);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Staged schedule, batch size, momentum, augmentation, and determinism seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage_epochs: Vec<usize>,
    pub stage_lr: Vec<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
    /// Hard cap on total epochs (smoke runs and resume tests).
    pub limit_epochs: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    pub early_stop_val_accuracy: Option<f64>,
}

impl TrainConfig {
    /// 60/20/20 epochs at 0.1/0.02/0.004, momentum 0.9, batches of 125.
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            stage_epochs: vec![60, 20, 20],
            stage_lr: vec![0.1, 0.02, 0.004],
            momentum: 0.9,
            batch_size: 125,
            augment: true,
            seed,
            limit_epochs: None,
            early_stop_val_accuracy: None,
        }
    }

    /// The longer five-stage schedule for the 100-class runs.
    pub fn cifar100(seed: u64) -> Self {
        TrainConfig {
            stage_epochs: vec![60, 40, 40, 40, 20],
            stage_lr: vec![0.1, 0.02, 0.004, 0.0008, 0.00016],
            momentum: 0.9,
            batch_size: 125,
            augment: true,
            seed,
            limit_epochs: None,
            early_stop_val_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.is_empty() || self.stage_epochs.len() != self.stage_lr.len() {
            return Err(Error::invalid(
                "stage_epochs and stage_lr must be nonempty and the same length",
            ));
        }
        if self.stage_lr.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::invalid("every stage step size must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        let full: usize = self.stage_epochs.iter().sum();
        match self.limit_epochs {
            Some(cap) => full.min(cap),
            None => full,
        }
    }

    /// (stage index, learning rate) of a global epoch index.
    pub fn stage_of(&self, epoch: usize) -> (usize, f64) {
        let mut acc = 0;
        for (i, &e) in self.stage_epochs.iter().enumerate() {
            acc += e;
            if epoch < acc {
                return (i, self.stage_lr[i]);
            }
        }
        let last = self.stage_epochs.len() - 1;
        (last, self.stage_lr[last])
    }
}

/// Per-epoch history record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    /// Mean total objective (loss + regularizer) over the epoch's batches.
    pub train_objective: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_weights: NetWeights,
    pub final_bn: BnRunningStats,
    /// Weights with the best validation accuracy (ties broken by lower
    /// validation loss).
    pub best_weights: NetWeights,
    pub best_bn: BnRunningStats,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Everything one training run needs.
pub struct TrainJob<'a> {
    pub spec: &'a DynamicsSpec,
    pub cfg: &'a TrainConfig,
    pub reg: &'a RegParams,
    pub train: &'a DataSplit,
    pub val: &'a DataSplit,
    /// Input normalization statistics to embed in checkpoints.
    pub data_stats: Option<ChannelStats>,
    /// Checkpoint file updated (atomically) after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

fn build_batch(
    split: &DataSplit,
    indices: &[usize],
    do_augment: bool,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let picked = split.select(indices);
    if do_augment {
        Ok((augment(&picked.images, rng)?, picked.labels))
    } else {
        Ok((picked.images, picked.labels))
    }
}

/// Eval-mode loss and accuracy over a split, in batches.
pub fn evaluate(
    w: &NetWeights,
    spec: &DynamicsSpec,
    bn: &BnRunningStats,
    split: &DataSplit,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = split.len();
    if n == 0 {
        return Err(Error::invalid("evaluating an empty split"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = split.select(&idx);
        let scores = forward_network_eval(w, spec, bn, &batch.images)?;
        let (loss, _) = softmax_cross_entropy(&scores, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
        for (p, &t) in predict(&scores).iter().zip(&batch.labels) {
            if *p == t {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Runs the staged schedule, evaluating validation accuracy each epoch and
/// keeping the weights that performed best on the validation data. The
/// returned history has one record per epoch; resumed runs continue the
/// history and the random stream exactly where the checkpoint left them.
pub fn train(job: TrainJob) -> Result<TrainOutcome> {
    let TrainJob {
        spec,
        cfg,
        reg,
        train,
        val,
        data_stats,
        checkpoint_path,
        resume,
    } = job;
    spec.validate()?;
    cfg.validate()?;
    reg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs nonempty train and val splits"));
    }

    let mut rng;
    let mut weights;
    let mut sgd;
    let mut bn;
    let mut history: Vec<EpochRecord>;
    let mut best_weights;
    let mut best_bn;
    let mut best_epoch;
    let mut best_val_accuracy;
    let mut best_val_loss;
    let start_epoch;

    match resume {
        Some(cp) => {
            if cp.spec != *spec {
                return Err(Error::invalid(
                    "checkpoint architecture does not match the requested one",
                ));
            }
            rng = Rng::from_state(cp.rng_state);
            weights = NetWeights::init(spec, &mut Rng::seed_from_u64(0))?;
            weights.set_from_flat(&cp.weights)?;
            let mut velocity = weights.zeros_like();
            velocity.set_from_flat(&cp.velocity)?;
            sgd = SgdState {
                velocity,
                momentum: cfg.momentum,
            };
            bn = cp.bn.clone();
            best_weights = weights.zeros_like();
            best_weights.set_from_flat(&cp.best_weights)?;
            best_bn = cp.best_bn.clone();
            best_epoch = cp.best_epoch;
            best_val_accuracy = cp.best_val_accuracy;
            best_val_loss = cp.best_val_loss;
            history = cp.history.clone();
            start_epoch = cp.next_epoch;
        }
        None => {
            rng = Rng::seed_from_u64(cfg.seed);
            weights = NetWeights::init(spec, &mut rng)?;
            sgd = SgdState::new(&weights, cfg.momentum);
            bn = BnRunningStats::init(spec);
            best_weights = weights.clone();
            best_bn = bn.clone();
            best_epoch = 0;
            best_val_accuracy = f64::NEG_INFINITY;
            best_val_loss = f64::INFINITY;
            history = Vec::new();
            start_epoch = 0;
        }
    }

    let total = cfg.total_epochs();
    let n = train.len();

    for epoch in start_epoch..total {
        let (stage, lr) = cfg.stage_of(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);

        let mut obj_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx = &order[start..end];
            let (images, labels) = build_batch(train, idx, cfg.augment, &mut rng)?;
            let eval = objective(&weights, spec, &images, &labels, reg)?;
            let bsz = labels.len() as f64;
            obj_sum += eval.value * bsz;
            loss_sum += eval.loss * bsz;
            for (p, &t) in predict(&eval.scores).iter().zip(&labels) {
                if *p == t {
                    correct += 1;
                }
            }
            bn.update(&eval.bn_stats, BN_MOMENTUM);
            sgd_step(&mut weights, &mut sgd, &eval.grads, lr)?;
            start = end;
        }

        let (val_loss, val_accuracy) = evaluate(&weights, spec, &bn, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            stage,
            lr,
            train_objective: obj_sum / n as f64,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss,
            val_accuracy,
        };
        history.push(record);

        let improved = val_accuracy > best_val_accuracy
            || (val_accuracy == best_val_accuracy && val_loss < best_val_loss);
        if improved {
            best_val_accuracy = val_accuracy;
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_weights = weights.clone();
            best_bn = bn.clone();
        }

        if let Some(path) = checkpoint_path.as_deref() {
            let cp = Checkpoint {
                spec: spec.clone(),
                weights: weights.to_flat(),
                velocity: sgd.velocity.to_flat(),
                rng_state: rng.state(),
                next_epoch: epoch + 1,
                best_epoch,
                best_val_accuracy,
                best_val_loss,
                best_weights: best_weights.to_flat(),
                bn: bn.clone(),
                best_bn: best_bn.clone(),
                data_stats: data_stats.clone(),
                history: history.clone(),
            };
            save_checkpoint(&cp, path)?;
        }

        if let Some(target) = cfg.early_stop_val_accuracy {
            if val_accuracy >= target {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        final_weights: weights,
        final_bn: bn,
        best_weights,
        best_bn,
        best_epoch,
        best_val_accuracy,
        best_val_loss,
        history,
    })
}

/// Convenience wrapper for jobs without checkpointing.
pub fn train_simple(
    spec: &DynamicsSpec,
    cfg: &TrainConfig,
    reg: &RegParams,
    train_split: &DataSplit,
    val_split: &DataSplit,
) -> Result<TrainOutcome> {
    train(TrainJob {
        spec,
        cfg,
        reg,
        train: train_split,
        val: val_split,
        data_stats: None,
        checkpoint_path: None,
        resume: None,
    })
}

/// Moving average with the given window; used to check the monotone decrease
/// of the first stage's training loss.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if values.len() < window || window == 0 {
        return Vec::new();
    }
    (0..=values.len() - window)
        .map(|i| values[i..i + window].iter().sum::<f64>() / window as f64)
        .collect()
}
