//! Tiny architectures and datasets shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sftn_core::arch::{LayerSpec, NetArch};
use sftn_core::data::{gen_synth_vision, Dataset, SynthTask};
use sftn_core::trainer::SgdConfig;
use sftn_core::CoreError;
use sftn_tensor::TensorError;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Lets core results flow through the tensor crate's grad-check closures.
pub fn tensor_err(e: CoreError) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

fn conv_block(c: usize, pools: usize) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec::conv3x3(c), LayerSpec::BatchNorm, LayerSpec::Relu];
    v.extend((0..pools).map(|_| LayerSpec::MaxPool {
        kernel: 2,
        stride: 2,
    }));
    v
}

/// 2×8×8 input, K=4: three single-conv blocks, spatial 8 → 4 → 2 → 1.
pub fn micro_teacher() -> NetArch {
    NetArch::new(
        "micro-t",
        [2, 8, 8],
        4,
        vec![conv_block(3, 1), conv_block(3, 1), conv_block(3, 1)],
    )
    .unwrap()
}

/// Student whose blocks 2 and 3 take inputs twice the size of the teacher's
/// taps, so both branches use the upsampling transform.
pub fn micro_student_up() -> NetArch {
    NetArch::new(
        "micro-su",
        [2, 8, 8],
        4,
        vec![conv_block(2, 0), conv_block(2, 1), conv_block(2, 1)],
    )
    .unwrap()
}

/// Student whose branch 1 downsamples and branch 2 projects.
pub fn micro_student_down() -> NetArch {
    NetArch::new(
        "micro-sd",
        [2, 8, 8],
        4,
        vec![conv_block(2, 2), conv_block(2, 0), conv_block(2, 1)],
    )
    .unwrap()
}

pub fn tiny_teacher() -> NetArch {
    NetArch::plain_cnn("tiny-t", [3, 16, 16], 10, &[6, 8, 12]).unwrap()
}

pub fn tiny_student() -> NetArch {
    NetArch::plain_cnn("tiny-s", [3, 16, 16], 10, &[3, 4, 6]).unwrap()
}

pub fn tiny_data(n: usize, seed: u64) -> Dataset {
    gen_synth_vision(SynthTask::Primary, n, seed).unwrap()
}

pub fn short_sgd(epochs: usize) -> SgdConfig {
    SgdConfig {
        epochs,
        milestones: if epochs > 1 { vec![epochs - 1] } else { vec![] },
        batch_size: 16,
        ..SgdConfig::default()
    }
}

/// Same block layout as [`micro_teacher`] with fewer channels.
pub fn micro_student() -> NetArch {
    NetArch::new(
        "micro-s",
        [2, 8, 8],
        4,
        vec![conv_block(2, 1), conv_block(2, 1), conv_block(2, 1)],
    )
    .unwrap()
}
