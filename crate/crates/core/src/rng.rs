//! Seeded, counter-based random streams.
//!
//! Every batch item draws from its own stream derived from `(seed, stream_id, index)`,
//! so results never depend on how work is split across threads.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSpec {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream for item `index`; distinct indices give independent streams.
    pub fn fork(&self, index: u64) -> RngSpec {
        RngSpec {
            seed: splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d_4c95_7f2d))),
            stream_id: index,
        }
    }

    /// A sibling stream reserved for a named purpose (training batches, evaluation, ...).
    pub fn with_stream(&self, stream_id: u64) -> RngSpec {
        RngSpec {
            seed: self.seed,
            stream_id,
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `d × count` matrix of i.i.d. standard normals; column `j` comes from `rng.fork(j)`.
pub fn sample_standard_gaussian(rng: RngSpec, d: usize, count: usize) -> Result<DMatrix<f64>> {
    if d == 0 || count == 0 {
        return Err(invalid(format!(
            "sample_standard_gaussian needs d >= 1 and count >= 1 (got d = {d}, count = {count})"
        )));
    }
    let columns = exec::map_indexed(count, |j| {
        let mut r = rng.fork(j as u64).rng();
        (0..d).map(|_| standard_normal(&mut r)).collect::<Vec<f64>>()
    });
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    Ok(DMatrix::from_vec(d, count, flat))
}
