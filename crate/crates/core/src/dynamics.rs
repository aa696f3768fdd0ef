//! Time integrators realizing the three architectures, and the full network
//! forward pass.
//!
//! A residual block is a discretized initial value problem. The three
//! families differ in the dynamic and its discretization:
//!
//! * parabolic: forward Euler on `dY/dt = F_sym(theta(t), Y)` — dissipative,
//!   heat-equation-like; the trajectory is stored for the adjoint.
//! * Hamiltonian: the channels are partitioned into (Y, Z) and integrated by
//!   symplectic Verlet; exactly reversible, so only the endpoints are kept
//!   and the backward pass reconstructs earlier states.
//! * second-order: Leapfrog on `d2Y/dt2 = F_sym(theta(t), Y)` with zero
//!   initial velocity (Y_{-1} = Y_0); also reversible.
//!
//! The network is: opening layer, then per block the dynamics followed by a
//! connecting layer (interior connectors pool by two, the final one does
//! not), then channel averaging and the classifier.

use crate::error::{Error, Result};
use crate::layers::{
    classify, connecting_layer, connecting_layer_eval, global_average, opening_layer,
    opening_layer_eval, sym_layer_output, Activation, ConnectorCache, OpeningCache, StepNorm,
    TV_EPS_DEFAULT,
};
use crate::tensor::{concat_channels, split_channels, Tensor};
use crate::weights::{BlockWeights, NetWeights, StepWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Parabolic,
    Hamiltonian,
    SecondOrder,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Parabolic => "parabolic",
            Family::Hamiltonian => "hamiltonian",
            Family::SecondOrder => "second-order",
        }
    }

    pub fn reversible(self) -> bool {
        !matches!(self, Family::Parabolic)
    }
}

/// Architecture description: dynamic family, block widths, time steps per
/// block, step size, and the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSpec {
    pub family: Family,
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Channel width of each ResNet block.
    pub widths: Vec<usize>,
    /// Output width of the final connecting layer (the classifier input).
    pub final_width: usize,
    pub steps_per_block: usize,
    pub dt: f64,
    pub num_classes: usize,
    pub activation: Activation,
    pub step_norm: StepNorm,
}

impl DynamicsSpec {
    /// STL-10 architecture: four blocks of 16/32/64/128 channels on 96x96
    /// images, three time steps each.
    pub fn stl10(family: Family) -> DynamicsSpec {
        DynamicsSpec {
            family,
            in_channels: 3,
            image_height: 96,
            image_width: 96,
            widths: vec![16, 32, 64, 128],
            final_width: 128,
            steps_per_block: 3,
            dt: 1.0,
            num_classes: 10,
            activation: Activation::Relu,
            step_norm: StepNorm::Tv { eps: TV_EPS_DEFAULT },
        }
    }

    /// CIFAR-10 architecture: three blocks of 32/64/112 channels on 32x32.
    pub fn cifar10(family: Family) -> DynamicsSpec {
        DynamicsSpec {
            family,
            in_channels: 3,
            image_height: 32,
            image_width: 32,
            widths: vec![32, 64, 112],
            final_width: 112,
            steps_per_block: 3,
            dt: 1.0,
            num_classes: 10,
            activation: Activation::Relu,
            step_norm: StepNorm::Tv { eps: TV_EPS_DEFAULT },
        }
    }

    /// CIFAR-100 architecture: 32/64/128 channels with a final connector
    /// widening to 256.
    pub fn cifar100(family: Family) -> DynamicsSpec {
        DynamicsSpec {
            family,
            in_channels: 3,
            image_height: 32,
            image_width: 32,
            widths: vec![32, 64, 128],
            final_width: 256,
            steps_per_block: 3,
            dt: 1.0,
            num_classes: 100,
            activation: Activation::Relu,
            step_norm: StepNorm::Tv { eps: TV_EPS_DEFAULT },
        }
    }

    /// Small two-block architecture for tests.
    pub fn toy(family: Family) -> DynamicsSpec {
        DynamicsSpec {
            family,
            in_channels: 1,
            image_height: 8,
            image_width: 8,
            widths: vec![4, 8],
            final_width: 8,
            steps_per_block: 2,
            dt: 1.0,
            num_classes: 2,
            activation: Activation::Tanh,
            step_norm: StepNorm::Tv { eps: TV_EPS_DEFAULT },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("architecture needs at least one block"));
        }
        if self.steps_per_block == 0 {
            return Err(Error::invalid("steps per block must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.final_width == 0 {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        if let StepNorm::Tv { eps } = self.step_norm {
            if !(eps > 0.0) {
                return Err(Error::invalid("TV norm eps must be positive"));
            }
        }
        if self.family == Family::Hamiltonian {
            for &w in &self.widths {
                if w % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "Hamiltonian blocks need even widths for the (Y, Z) channel partition, got {w}"
                    )));
                }
            }
        }
        // The interior connectors pool by two; the whole size ladder must be
        // valid up front rather than failing mid-forward.
        let (mut h, mut w) = (self.image_height, self.image_width);
        for i in 0..self.widths.len().saturating_sub(1) {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(format!(
                    "connector {i} would pool odd spatial dims {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Output width of connector `i`: the next block's width, or the final
    /// width after the last block.
    pub fn connector_output_width(&self, i: usize) -> usize {
        if i + 1 < self.widths.len() {
            self.widths[i + 1]
        } else {
            self.final_width
        }
    }

    /// Whether connector `i` pools (all but the last).
    pub fn connector_pools(&self, i: usize) -> bool {
        i + 1 < self.widths.len()
    }

    /// Spatial size at the input of block `i`.
    pub fn block_size(&self, i: usize) -> (usize, usize) {
        (self.image_height >> i, self.image_width >> i)
    }

    /// Total trainable weight count, computed from the architecture alone.
    pub fn param_count(&self) -> usize {
        let norm_params = |channels: usize| match self.step_norm {
            StepNorm::None => 0,
            StepNorm::Tv { .. } => 2 * channels,
        };
        let mut count = self.in_channels * self.widths[0] * 9 + 2 * self.widths[0];
        for (i, &w) in self.widths.iter().enumerate() {
            let per_step = match self.family {
                Family::Parabolic | Family::SecondOrder => w * w * 9 + norm_params(w),
                Family::Hamiltonian => {
                    let half = w / 2;
                    2 * (half * half * 9 + norm_params(half))
                }
            };
            count += self.steps_per_block * per_step;
            let to = self.connector_output_width(i);
            count += w * to + 2 * to;
        }
        count += self.num_classes * self.final_width + self.num_classes;
        count
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Recorded or reconstructable state sequence of one block's dynamics.
#[derive(Debug, Clone)]
pub enum BlockTrajectory {
    /// Y_0..Y_N.
    ParabolicStored { states: Vec<Tensor> },
    /// Y_0..Y_N and Z_0..Z_N.
    HamiltonianStored { ys: Vec<Tensor>, zs: Vec<Tensor> },
    /// (Y_N, Z_N) only; earlier states are reconstructed backwards.
    HamiltonianEndpoints { y: Tensor, z: Tensor },
    /// Y_0..Y_N (Y_{-1} = Y_0 implicit).
    SecondOrderStored { states: Vec<Tensor> },
    /// (Y_N, Y_{N-1}) only.
    SecondOrderEndpoints { y_last: Tensor, y_prev: Tensor },
}

impl BlockTrajectory {
    /// The block output fed to the next connector (channel concatenation of
    /// Y and Z for the Hamiltonian family).
    pub fn final_full(&self) -> Result<Tensor> {
        match self {
            BlockTrajectory::ParabolicStored { states }
            | BlockTrajectory::SecondOrderStored { states } => Ok(states
                .last()
                .ok_or_else(|| Error::invalid("empty trajectory"))?
                .clone()),
            BlockTrajectory::HamiltonianStored { ys, zs } => {
                concat_channels(ys.last().unwrap(), zs.last().unwrap())
            }
            BlockTrajectory::HamiltonianEndpoints { y, z } => concat_channels(y, z),
            BlockTrajectory::SecondOrderEndpoints { y_last, .. } => Ok(y_last.clone()),
        }
    }

    /// Number of state tensors this trajectory keeps alive; O(N) when stored,
    /// O(1) in endpoint mode.
    pub fn retained_states(&self) -> usize {
        match self {
            BlockTrajectory::ParabolicStored { states }
            | BlockTrajectory::SecondOrderStored { states } => states.len(),
            BlockTrajectory::HamiltonianStored { ys, zs } => ys.len() + zs.len(),
            BlockTrajectory::HamiltonianEndpoints { .. } => 2,
            BlockTrajectory::SecondOrderEndpoints { .. } => 2,
        }
    }
}

fn expect_single(step: &StepWeights) -> Result<&crate::layers::SymLayerWeights> {
    match step {
        StepWeights::Single(w) => Ok(w),
        StepWeights::Pair { .. } => Err(Error::invalid(
            "this family uses one symmetric layer per step, got a Hamiltonian pair",
        )),
    }
}

fn expect_pair(
    step: &StepWeights,
) -> Result<(&crate::layers::SymLayerWeights, &crate::layers::SymLayerWeights)> {
    match step {
        StepWeights::Pair { first, second } => Ok((first, second)),
        StepWeights::Single(_) => Err(Error::invalid(
            "the Hamiltonian family uses a layer pair per step, got a single layer",
        )),
    }
}

// ---------------------------------------------------------------------------
// Integrators
// ---------------------------------------------------------------------------

/// Forward Euler with the symmetric layer: `Y_{j+1} = Y_j + dt F_sym(theta_j, Y_j)`.
/// Stores the full trajectory (the adjoint needs it).
pub fn forward_parabolic(
    block: &BlockWeights,
    y0: Tensor,
    spec: &DynamicsSpec,
) -> Result<BlockTrajectory> {
    let mut states = Vec::with_capacity(block.steps.len() + 1);
    states.push(y0);
    for step in &block.steps {
        let w = expect_single(step)?;
        let f = sym_layer_output(w, states.last().unwrap(), spec.step_norm, spec.activation)?;
        let mut next = states.last().unwrap().clone();
        next.axpy(spec.dt, &f)?;
        states.push(next);
    }
    Ok(BlockTrajectory::ParabolicStored { states })
}

/// Symplectic Verlet:
/// `Y_{j+1} = Y_j + dt F_sym(theta1_j, Z_j)`,
/// `Z_{j+1} = Z_j - dt F_sym(theta2_j, Y_{j+1})`.
pub fn forward_hamiltonian(
    block: &BlockWeights,
    y0: Tensor,
    z0: Tensor,
    spec: &DynamicsSpec,
    store_all: bool,
) -> Result<BlockTrajectory> {
    let mut ys = vec![y0];
    let mut zs = vec![z0];
    for step in &block.steps {
        let (first, second) = expect_pair(step)?;
        let fy = sym_layer_output(first, zs.last().unwrap(), spec.step_norm, spec.activation)?;
        let mut y_next = ys.last().unwrap().clone();
        y_next.axpy(spec.dt, &fy)?;
        let fz = sym_layer_output(second, &y_next, spec.step_norm, spec.activation)?;
        let mut z_next = zs.last().unwrap().clone();
        z_next.axpy(-spec.dt, &fz)?;
        if store_all {
            ys.push(y_next);
            zs.push(z_next);
        } else {
            ys[0] = y_next;
            zs[0] = z_next;
        }
    }
    if store_all {
        Ok(BlockTrajectory::HamiltonianStored { ys, zs })
    } else {
        Ok(BlockTrajectory::HamiltonianEndpoints {
            y: ys.pop().unwrap(),
            z: zs.pop().unwrap(),
        })
    }
}

/// Exact inverse of the Verlet recursion:
/// `Z_j = Z_{j+1} + dt F_sym(theta2_j, Y_{j+1})`,
/// `Y_j = Y_{j+1} - dt F_sym(theta1_j, Z_j)`.
/// Returns the full reconstructed sequences Y_0..Y_N, Z_0..Z_N.
pub fn reverse_hamiltonian(
    block: &BlockWeights,
    y_final: Tensor,
    z_final: Tensor,
    spec: &DynamicsSpec,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let n = block.steps.len();
    let mut ys = vec![y_final];
    let mut zs = vec![z_final];
    for j in (0..n).rev() {
        let (first, second) = expect_pair(&block.steps[j])?;
        let y_next = ys.last().unwrap();
        let fz = sym_layer_output(second, y_next, spec.step_norm, spec.activation)?;
        let mut z = zs.last().unwrap().clone();
        z.axpy(spec.dt, &fz)?;
        let fy = sym_layer_output(first, &z, spec.step_norm, spec.activation)?;
        let mut y = y_next.clone();
        y.axpy(-spec.dt, &fy)?;
        ys.push(y);
        zs.push(z);
    }
    ys.reverse();
    zs.reverse();
    Ok((ys, zs))
}

/// Leapfrog: `Y_{j+1} = 2 Y_j - Y_{j-1} + dt^2 F_sym(theta_j, Y_j)`, starting
/// from zero initial velocity (Y_{-1} = Y_0).
pub fn forward_second_order(
    block: &BlockWeights,
    y0: Tensor,
    spec: &DynamicsSpec,
    store_all: bool,
) -> Result<BlockTrajectory> {
    let dt2 = spec.dt * spec.dt;
    let mut states = vec![y0.clone()];
    let mut y_prev = y0.clone();
    let mut y = y0;
    for step in &block.steps {
        let w = expect_single(step)?;
        let f = sym_layer_output(w, &y, spec.step_norm, spec.activation)?;
        // y_next = 2y - y_prev + dt^2 f
        let mut y_next = y.scale(2.0);
        y_next.axpy(-1.0, &y_prev)?;
        y_next.axpy(dt2, &f)?;
        y_prev = y;
        y = y_next;
        if store_all {
            states.push(y.clone());
        }
    }
    if store_all {
        Ok(BlockTrajectory::SecondOrderStored { states })
    } else {
        Ok(BlockTrajectory::SecondOrderEndpoints {
            y_last: y,
            y_prev,
        })
    }
}

/// Exact inverse of the Leapfrog recursion:
/// `Y_{j-1} = 2 Y_j - Y_{j+1} + dt^2 F_sym(theta_j, Y_j)`.
/// Returns the full reconstructed sequence Y_0..Y_N.
pub fn reverse_second_order(
    block: &BlockWeights,
    y_last: Tensor,
    y_prev: Tensor,
    spec: &DynamicsSpec,
) -> Result<Vec<Tensor>> {
    let n = block.steps.len();
    let dt2 = spec.dt * spec.dt;
    let mut states = vec![y_last, y_prev]; // reverse order: Y_N, Y_{N-1}, ...
    for j in (1..n).rev() {
        let w = expect_single(&block.steps[j])?;
        let yj = states.last().unwrap();
        let yj1 = &states[states.len() - 2];
        let f = sym_layer_output(w, yj, spec.step_norm, spec.activation)?;
        let mut y_before = yj.scale(2.0);
        y_before.axpy(-1.0, yj1)?;
        y_before.axpy(dt2, &f)?;
        states.push(y_before);
    }
    states.reverse();
    Ok(states)
}

/// Run one block forward and return only the final state (concatenated for
/// the Hamiltonian family).
pub fn block_forward_last(
    block: &BlockWeights,
    input: &Tensor,
    spec: &DynamicsSpec,
) -> Result<Tensor> {
    match spec.family {
        Family::Parabolic => {
            forward_parabolic(block, input.clone(), spec)?.final_full()
        }
        Family::Hamiltonian => {
            let (y0, z0) = split_channels(input)?;
            forward_hamiltonian(block, y0, z0, spec, false)?.final_full()
        }
        Family::SecondOrder => {
            forward_second_order(block, input.clone(), spec, false)?.final_full()
        }
    }
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

/// Everything the backward pass and the batch-norm bookkeeping need from one
/// training-mode forward pass.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    pub input: Tensor,
    pub opening: OpeningCache,
    pub blocks: Vec<BlockTrajectory>,
    pub connectors: Vec<ConnectorCache>,
    pub features: Tensor,
    pub scores: Tensor,
}

impl NetworkCache {
    /// Batch statistics of every batch-norm layer (opening first, then the
    /// connectors) from this forward pass.
    pub fn batch_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut stats = vec![(self.opening.bn.mean.clone(), self.opening.bn.var.clone())];
        for c in &self.connectors {
            stats.push((c.bn.mean.clone(), c.bn.var.clone()));
        }
        stats
    }

    /// Total dynamic states retained across blocks (the reversible memory
    /// contract: O(1) per block instead of O(N)).
    pub fn retained_states(&self) -> usize {
        self.blocks.iter().map(|b| b.retained_states()).sum()
    }
}

/// Trajectory retention during a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    /// Parabolic blocks store their trajectory (their adjoint requires it);
    /// the reversible families keep endpoints only.
    Auto,
    /// Store everything (used to cross-check reversible backprop).
    StoreAll,
}

fn check_input(spec: &DynamicsSpec, x: &Tensor) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != spec.in_channels || h != spec.image_height || w != spec.image_width {
        return Err(Error::invalid(format!(
            "input shape {:?} does not match architecture ({} channels, {}x{})",
            x.shape(),
            spec.in_channels,
            spec.image_height,
            spec.image_width
        )));
    }
    Ok(())
}

/// Training-mode forward pass: batch-norm layers use current batch statistics
/// and the cache retains what the chosen adjoint strategy needs.
pub fn forward_network_train(
    w: &NetWeights,
    spec: &DynamicsSpec,
    x: &Tensor,
    policy: StoragePolicy,
) -> Result<(Tensor, NetworkCache)> {
    spec.validate()?;
    check_input(spec, x)?;
    let (mut cur, opening_cache) = opening_layer(&w.opening, x)?;
    let mut blocks = Vec::with_capacity(w.blocks.len());
    let mut connectors = Vec::with_capacity(w.connectors.len());
    for (i, block) in w.blocks.iter().enumerate() {
        let store_all = policy == StoragePolicy::StoreAll;
        let traj = match spec.family {
            Family::Parabolic => forward_parabolic(block, cur, spec)?,
            Family::Hamiltonian => {
                let (y0, z0) = split_channels(&cur)?;
                forward_hamiltonian(block, y0, z0, spec, store_all)?
            }
            Family::SecondOrder => forward_second_order(block, cur, spec, store_all)?,
        };
        let block_out = traj.final_full()?;
        blocks.push(traj);
        let (next, conn_cache) =
            connecting_layer(&w.connectors[i], &block_out, spec.connector_pools(i))?;
        connectors.push(conn_cache);
        cur = next;
    }
    let features = global_average(&cur);
    let scores = classify(&w.classifier, &features)?;
    Ok((
        scores.clone(),
        NetworkCache {
            input: x.clone(),
            opening: opening_cache,
            blocks,
            connectors,
            features,
            scores,
        },
    ))
}

/// Running batch-norm statistics, one entry per batch-norm layer (opening
/// first, then the connectors). Initialized to mean 0 / var 1 and updated by
/// exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl BnRunningStats {
    pub fn init(spec: &DynamicsSpec) -> Self {
        let mut layers = vec![(vec![0.0; spec.widths[0]], vec![1.0; spec.widths[0]])];
        for i in 0..spec.widths.len() {
            let c = spec.connector_output_width(i);
            layers.push((vec![0.0; c], vec![1.0; c]));
        }
        BnRunningStats { layers }
    }

    pub fn update(&mut self, batch_stats: &[(Vec<f64>, Vec<f64>)], momentum: f64) {
        assert_eq!(self.layers.len(), batch_stats.len());
        for ((rm, rv), (bm, bv)) in self.layers.iter_mut().zip(batch_stats) {
            for (r, b) in rm.iter_mut().zip(bm) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in rv.iter_mut().zip(bv) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

/// Eval-mode forward pass: batch norm uses the running statistics, nothing is
/// retained.
pub fn forward_network_eval(
    w: &NetWeights,
    spec: &DynamicsSpec,
    bn: &BnRunningStats,
    x: &Tensor,
) -> Result<Tensor> {
    check_input(spec, x)?;
    let mut cur = opening_layer_eval(&w.opening, x, &bn.layers[0].0, &bn.layers[0].1)?;
    for (i, block) in w.blocks.iter().enumerate() {
        let block_out = block_forward_last(block, &cur, spec)?;
        cur = connecting_layer_eval(
            &w.connectors[i],
            &block_out,
            &bn.layers[i + 1].0,
            &bn.layers[i + 1].1,
            spec.connector_pools(i),
        )?;
    }
    classify(&w.classifier, &global_average(&cur))
}

/// Inputs of every ResNet block under a training-mode pass (used by the
/// stability diagnostics, which perturb a block's input and watch its output).
pub fn block_inputs_train(
    w: &NetWeights,
    spec: &DynamicsSpec,
    x: &Tensor,
) -> Result<Vec<Tensor>> {
    check_input(spec, x)?;
    let (mut cur, _) = opening_layer(&w.opening, x)?;
    let mut inputs = Vec::with_capacity(w.blocks.len());
    for (i, block) in w.blocks.iter().enumerate() {
        inputs.push(cur.clone());
        let block_out = block_forward_last(block, &cur, spec)?;
        let (next, _) = connecting_layer(&w.connectors[i], &block_out, spec.connector_pools(i))?;
        cur = next;
    }
    Ok(inputs)
}

/// Eval-mode forward of a single block's dynamics on a given input.
pub fn block_forward(
    block: &BlockWeights,
    input: &Tensor,
    spec: &DynamicsSpec,
) -> Result<Tensor> {
    block_forward_last(block, input, spec)
}
