//! Stability and dynamics diagnostics: perturbation-growth measurement, power
//! iteration on the symmetric layer Jacobian, the discrete forward-Euler
//! stability margin, energy traces for the second-order dynamic, and the
//! confusion matrix.
//!
//! The perturbation diagnostics work per ResNet block: noise is injected at a
//! block's input and the Frobenius ratio measured at that block's output, so
//! the measured map is exactly the discretized dynamic (a zero-weight block is
//! the identity and yields ratio 1). The reported maximum ratio is the
//! empirical growth constant at the chosen finite horizon, never asserted to
//! be the horizon-independent constant.

use crate::dynamics::{
    block_forward, block_inputs_train, BnRunningStats, DynamicsSpec, Family,
};
use crate::dynamics::forward_parabolic;
use crate::error::{Error, Result};
use crate::layers::{predict, softmax_cross_entropy, Activation, StepNorm, SymLayerWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weights::{NetWeights, StepWeights};
use crate::data::DataSplit;

/// One perturbation trial: the ratio of output to input perturbation norms
/// for one block.
#[derive(Debug, Clone, Copy)]
pub struct StabilityTrial {
    pub block: usize,
    pub trial: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub trials: Vec<StabilityTrial>,
    pub max_ratio_per_block: Vec<f64>,
    /// Empirical growth constant at this horizon (max over all trials).
    pub max_ratio: f64,
    /// Leading Jacobian eigenvalue per block and step (parabolic family only).
    pub step_eigenvalues: Vec<Vec<f64>>,
    /// max |1 + dt*lambda| over all steps (parabolic family only).
    pub discrete_margin: Option<f64>,
}

/// Propagates clean and perturbed block inputs through each block's dynamics
/// and records the Frobenius perturbation ratios. The noise is i.i.d.
/// Gaussian rescaled to the target Frobenius norm.
pub fn perturbation_stability(
    w: &NetWeights,
    spec: &DynamicsSpec,
    inputs: &Tensor,
    noise_scale: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<StabilityReport> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    if !(noise_scale > 0.0) {
        return Err(Error::invalid("noise scale must be positive"));
    }
    let block_inputs = block_inputs_train(w, spec, inputs)?;
    let mut report_trials = Vec::with_capacity(trials * block_inputs.len());
    let mut max_ratio_per_block = vec![0.0f64; block_inputs.len()];
    for (bi, input) in block_inputs.iter().enumerate() {
        let clean_out = block_forward(&w.blocks[bi], input, spec)?;
        for t in 0..trials {
            let mut noise = Tensor::randn(input.shape(), 1.0, rng);
            let norm = noise.frobenius_norm();
            if norm == 0.0 {
                continue;
            }
            noise.scale_mut(noise_scale / norm);
            let mut perturbed = input.clone();
            perturbed.axpy(1.0, &noise)?;
            // The realized input perturbation, so an identity block yields a
            // ratio of exactly one.
            let input_diff = perturbed.sub(input)?.frobenius_norm();
            let out = block_forward(&w.blocks[bi], &perturbed, spec)?;
            let ratio = out.sub(&clean_out)?.frobenius_norm() / input_diff;
            report_trials.push(StabilityTrial {
                block: bi,
                trial: t,
                ratio,
            });
            max_ratio_per_block[bi] = max_ratio_per_block[bi].max(ratio);
        }
    }
    let max_ratio = max_ratio_per_block.iter().cloned().fold(0.0, f64::max);

    // Discrete forward-Euler diagnostics apply to the parabolic family.
    let (step_eigenvalues, discrete_margin) = if spec.family == Family::Parabolic {
        let mut eigs = Vec::with_capacity(block_inputs.len());
        let mut margin: f64 = 0.0;
        for (bi, input) in block_inputs.iter().enumerate() {
            let traj = forward_parabolic(&w.blocks[bi], input.clone(), spec)?;
            let states = match &traj {
                crate::dynamics::BlockTrajectory::ParabolicStored { states } => states,
                _ => unreachable!(),
            };
            let mut block_eigs = Vec::new();
            for (j, step) in w.blocks[bi].steps.iter().enumerate() {
                let layer = match step {
                    StepWeights::Single(l) => l,
                    _ => unreachable!("parabolic steps are single layers"),
                };
                let est = jacobian_spectrum(layer, spec.activation, &states[j], 500, 1e-8, rng)?;
                margin = margin.max((1.0 + spec.dt * est.eigenvalue).abs());
                block_eigs.push(est.eigenvalue);
            }
            eigs.push(block_eigs);
        }
        (eigs, Some(margin))
    } else {
        (Vec::new(), None)
    };

    Ok(StabilityReport {
        trials: report_trials,
        max_ratio_per_block,
        max_ratio,
        step_eigenvalues,
        discrete_margin,
    })
}

/// Power-iteration estimate of a dominant eigenvalue.
#[derive(Debug, Clone, Copy)]
pub struct SpectrumEstimate {
    pub eigenvalue: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn jacobian_apply(
    layer: &SymLayerWeights,
    deriv: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    // J v = -K^T (sigma'(K y) .* (K v))
    let kv = layer.conv.apply(v)?;
    let dv = kv.mul(deriv)?;
    let mut out = layer.conv.apply_transpose(&dv)?;
    out.scale_mut(-1.0);
    Ok(out)
}

/// Largest-magnitude eigenvalue of the symmetric layer Jacobian
/// `J = -K^T diag(sigma'(K y)) K` (normalization omitted, matching the
/// stability analysis), by power iteration on matrix-vector products built
/// from the convolution block. Symmetric structure keeps everything real.
pub fn jacobian_spectrum(
    layer: &SymLayerWeights,
    act: Activation,
    y: &Tensor,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<SpectrumEstimate> {
    let ky = layer.conv.apply(y)?;
    let deriv = ky.map(|v| act.deriv(v));
    let mut v = Tensor::randn(y.shape(), 1.0, rng);
    let norm = v.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::invalid("degenerate start vector"));
    }
    v.scale_mut(1.0 / norm);
    let mut lambda = 0.0;
    for it in 1..=max_iters {
        let u = jacobian_apply(layer, &deriv, &v)?;
        lambda = crate::tensor::inner_product(&v, &u)?;
        // Residual of the eigenpair (lambda, v).
        let mut r = u.clone();
        r.axpy(-lambda, &v)?;
        let residual = r.frobenius_norm();
        if residual <= tol * lambda.abs().max(1.0) {
            return Ok(SpectrumEstimate {
                eigenvalue: lambda,
                residual,
                iterations: it,
                converged: true,
            });
        }
        let un = u.frobenius_norm();
        if un == 0.0 {
            // J annihilates v: the operator is zero on this subspace.
            return Ok(SpectrumEstimate {
                eigenvalue: 0.0,
                residual: 0.0,
                iterations: it,
                converged: true,
            });
        }
        v = u.scale(1.0 / un);
    }
    // Flagged estimate: not converged within the iteration budget.
    let u = jacobian_apply(layer, &deriv, &v)?;
    let mut r = u;
    r.axpy(-lambda, &v)?;
    Ok(SpectrumEstimate {
        eigenvalue: lambda,
        residual: r.frobenius_norm(),
        iterations: max_iters,
        converged: false,
    })
}

/// Largest (closest to zero) eigenvalue of the symmetric layer Jacobian via a
/// shifted power iteration on `J + |lambda_min| I`. For a negative
/// semidefinite Jacobian this is <= 0 up to the iteration tolerance.
pub fn jacobian_max_eigenvalue(
    layer: &SymLayerWeights,
    act: Activation,
    y: &Tensor,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<SpectrumEstimate> {
    let extreme = jacobian_spectrum(layer, act, y, max_iters, tol, rng)?;
    let shift = extreme.eigenvalue.abs();
    if shift == 0.0 {
        return Ok(extreme);
    }
    let ky = layer.conv.apply(y)?;
    let deriv = ky.map(|v| act.deriv(v));
    let mut v = Tensor::randn(y.shape(), 1.0, rng);
    v.scale_mut(1.0 / v.frobenius_norm());
    let mut rayleigh = 0.0;
    for it in 1..=max_iters {
        // (J + shift I) v
        let mut u = jacobian_apply(layer, &deriv, &v)?;
        u.axpy(shift, &v)?;
        rayleigh = crate::tensor::inner_product(&v, &u)?;
        let mut r = u.clone();
        r.axpy(-rayleigh, &v)?;
        let residual = r.frobenius_norm();
        if residual <= tol * rayleigh.abs().max(1.0) {
            return Ok(SpectrumEstimate {
                eigenvalue: rayleigh - shift,
                residual,
                iterations: it,
                converged: true,
            });
        }
        let un = u.frobenius_norm();
        if un == 0.0 {
            return Ok(SpectrumEstimate {
                eigenvalue: -shift,
                residual: 0.0,
                iterations: it,
                converged: true,
            });
        }
        v = u.scale(1.0 / un);
    }
    Ok(SpectrumEstimate {
        eigenvalue: rayleigh - shift,
        residual: f64::NAN,
        iterations: max_iters,
        converged: false,
    })
}

/// Discrete energies of the second-order dynamic with time-constant weights.
#[derive(Debug, Clone)]
pub struct EnergyTrace {
    /// E_j = (|(Y_{j+1}-Y_j)/dt|^2 + <K Y_j, sigma(K Y_j)>) / 2.
    pub energy: Vec<f64>,
    /// Same quantity for the linear wave system d2u/dt2 = -K^T K u.
    pub linear_energy: Vec<f64>,
}

/// Runs the Leapfrog recursion with constant weights for the nonlinear system
/// and its linearization from the same initial state, recording both energy
/// sequences. Requires |sigma(x)| <= |x| (identity, tanh, ReLU) for the bound
/// to make sense; normalization is not part of the energy.
pub fn energy_trace(
    layer: &SymLayerWeights,
    act: Activation,
    y0: &Tensor,
    steps: usize,
    dt: f64,
) -> Result<EnergyTrace> {
    if layer.norm.is_some() {
        return Err(Error::invalid(
            "energy trace is defined for the unnormalized layer; drop the norm weights",
        ));
    }
    if steps == 0 || !(dt > 0.0) {
        return Err(Error::invalid("need steps >= 1 and dt > 0"));
    }
    let dt2 = dt * dt;
    let run = |activation: Activation| -> Result<Vec<Tensor>> {
        let mut states = vec![y0.clone()];
        let mut prev = y0.clone();
        let mut cur = y0.clone();
        for _ in 0..steps {
            let f = crate::layers::sym_layer_output(layer, &cur, StepNorm::None, activation)?;
            let mut next = cur.scale(2.0);
            next.axpy(-1.0, &prev)?;
            next.axpy(dt2, &f)?;
            prev = cur;
            cur = next;
            states.push(cur.clone());
        }
        Ok(states)
    };
    let nonlinear = run(act)?;
    let linear = run(Activation::Identity)?;

    let mut energy = Vec::with_capacity(steps);
    let mut linear_energy = Vec::with_capacity(steps);
    for j in 0..steps {
        let mut vel = nonlinear[j + 1].sub(&nonlinear[j])?;
        vel.scale_mut(1.0 / dt);
        let ky = layer.conv.apply(&nonlinear[j])?;
        let sig = act.apply(&ky);
        let potential = crate::tensor::inner_product(&ky, &sig)?;
        energy.push(0.5 * (vel.frobenius_norm().powi(2) + potential));

        let mut lvel = linear[j + 1].sub(&linear[j])?;
        lvel.scale_mut(1.0 / dt);
        let ku = layer.conv.apply(&linear[j])?;
        linear_energy.push(0.5 * (lvel.frobenius_norm().powi(2) + ku.frobenius_norm().powi(2)));
    }
    Ok(EnergyTrace {
        energy,
        linear_energy,
    })
}

/// m x m confusion counts with accuracy and mean loss.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    /// counts[true * classes + predicted]
    pub counts: Vec<usize>,
    pub classes: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

impl ConfusionMatrix {
    pub fn at(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|i| self.at(i, i)).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> usize {
        (0..self.classes).map(|j| self.at(true_class, j)).sum()
    }
}

/// Eval-mode predictions over a labeled split: the (i, j) entry counts the
/// examples of class i predicted as class j (argmax, ties to the lowest
/// index). Accuracy equals trace over total by construction.
pub fn confusion_matrix(
    w: &NetWeights,
    spec: &DynamicsSpec,
    bn: &BnRunningStats,
    split: &DataSplit,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let m = spec.num_classes;
    let n = split.len();
    if n == 0 {
        return Err(Error::invalid("confusion matrix of an empty split"));
    }
    let mut counts = vec![0usize; m * m];
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = split.select(&idx);
        let scores = crate::dynamics::forward_network_eval(w, spec, bn, &batch.images)?;
        let (loss, _) = softmax_cross_entropy(&scores, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
        for (p, &t) in predict(&scores).iter().zip(&batch.labels) {
            counts[t * m + *p] += 1;
        }
        start = end;
    }
    let trace: usize = (0..m).map(|i| counts[i * m + i]).sum();
    Ok(ConfusionMatrix {
        counts,
        classes: m,
        accuracy: trace as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
    })
}
