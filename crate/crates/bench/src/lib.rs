//! Shared fixtures for the criterion benchmarks.

use pdenet_core::dynamics::{DynamicsSpec, Family};
use pdenet_core::layers::{Activation, StepNorm};
use pdenet_core::rng::Rng;
use pdenet_core::tensor::Tensor;
use pdenet_core::weights::NetWeights;

/// A mid-sized two-block network and a batch sized for benchmarking.
pub fn bench_setup(family: Family) -> (DynamicsSpec, NetWeights, Tensor) {
    let spec = DynamicsSpec {
        family,
        in_channels: 3,
        image_height: 32,
        image_width: 32,
        widths: vec![8, 16],
        final_width: 16,
        steps_per_block: 3,
        dt: 1.0,
        num_classes: 10,
        activation: Activation::Relu,
        step_norm: StepNorm::Tv { eps: 1e-3 },
    };
    let mut rng = Rng::seed_from_u64(1);
    let weights = NetWeights::init(&spec, &mut rng).unwrap();
    let batch = Tensor::randn([8, 3, 32, 32], 1.0, &mut rng);
    (spec, weights, batch)
}
