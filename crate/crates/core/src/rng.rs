//! Seed derivation. Every stream is a pure function of (master seed, stream
//! kind, index), so work can be split across threads without changing draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type LabRng = ChaCha8Rng;

/// Separate purposes must never share a stream, otherwise paired runs drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Trajectory = 1,
    Ablation = 2,
    Training = 3,
    Verification = 4,
    Task = 5,
    Reference = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, kind: Stream, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(kind as u64)));
    rng.set_stream(index);
    rng
}

/// Sub-seed for a named check or sub-experiment.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix(seed), |acc, b| splitmix(acc ^ b as u64))
}

pub fn normal_vec(rng: &mut LabRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform direction on the unit sphere.
pub fn unit_sphere(rng: &mut LabRng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let r = crate::linalg::norm(&v);
        if r > 1e-12 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}
