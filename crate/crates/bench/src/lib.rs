//! Shared inputs for the benchmarks.

use mpq_core::harness::experiments::{HarnessConfig, Task};
use mpq_core::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u32) -> Tensor {
    let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        // xorshift32
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state as f32 / u32::MAX as f32 * 2.0 - 1.0
    })
}

/// Default detector geometry with small splits.
pub fn small_task(scenes: usize) -> Task {
    let cfg = HarnessConfig {
        train_size: scenes,
        eval_size: scenes,
        pool_size: scenes,
        ..HarnessConfig::default()
    };
    Task::prepare(&cfg).expect("default harness config is valid")
}
