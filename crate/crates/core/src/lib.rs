//! Residual CNNs as discretized PDEs.
//!
//! Three architecture families built on the symmetric residual layer
//! `-K^T sigma(N(K y))`: a dissipative parabolic network (forward Euler), a
//! Hamiltonian network (symplectic Verlet on a channel-partitioned state), and
//! a second-order network (Leapfrog). The hyperbolic pair is exactly
//! reversible, which the backward pass exploits to avoid storing intermediate
//! states. Includes hand-derived adjoints with finite-difference verification,
//! stability and energy diagnostics, box-constrained SGD training with a
//! smoothed total-variation-in-time regularizer, and loaders for CIFAR-10
//! binary and MNIST IDX data.

// Index-based loops mirror the stencil arithmetic in the kernels, and the
// negated comparisons (`!(x > 0.0)`) reject NaN along with the sign check.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod analysis;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod layers;
pub mod pde;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod weights;

pub use conv::ConvBlock;
pub use dynamics::{BlockTrajectory, BnRunningStats, DynamicsSpec, Family, NetworkCache};
pub use error::{Error, Result};
pub use layers::{Activation, StepNorm};
pub use rng::Rng;
pub use tensor::Tensor;
pub use weights::{Gradients, NetWeights};
