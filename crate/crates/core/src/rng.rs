//! Seeded random streams.
//!
//! Every particle owns independent streams keyed by `(master seed, particle
//! index, stage)`. Because the key is index based, simulating particles in any
//! order or on any number of workers yields identical draws. Separate stages
//! keep the initial-noise draw shared between ODE and SDE runs of the same
//! seed.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Initial noise `x` at the top of the grid.
    Init,
    /// Brownian increments of the SDE.
    Sde,
    /// Output perturbation of the teacher model.
    Teacher,
    /// Output perturbation of the student model.
    Student,
    /// Label shuffles of permutation tests.
    Permutation,
    /// Draws used by path sampling and oracles.
    Path,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Init => 0x494e_4954,
            Stage::Sde => 0x5344_4521,
            Stage::Teacher => 0x5445_4143,
            Stage::Student => 0x5354_5544,
            Stage::Permutation => 0x5045_524d,
            Stage::Path => 0x5041_5448,
        }
    }
}

const DOMAIN: u64 = 0x6f72_7468_6f66_6c77;

/// Independent stream for `(master, index, stage)`; the triple is the ChaCha key.
pub fn stream(master: u64, index: u64, stage: Stage) -> Stream {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&stage.tag().to_le_bytes());
    key[24..].copy_from_slice(&DOMAIN.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derive a child master seed, e.g. one per benchmark condition.
pub fn child_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(DOMAIN)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; dim];
    fill_standard_normal(rng, &mut v);
    v
}
