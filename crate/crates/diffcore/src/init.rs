use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use siphasher::sip::SipHasher13;

use crate::tensor::Tensor;

/// Stable keyed 64-bit hash of a string.
pub fn keyed_hash(seed: u64, text: &str) -> u64 {
    let mut h = SipHasher13::new_with_keys(seed, 0x6d6d_6770_6c5f_6b31);
    h.write(text.as_bytes());
    h.finish()
}

/// Fans one master seed out into independent per-name generators.
#[derive(Clone, Copy, Debug)]
pub struct SeedFan {
    master: u64,
}

impl SeedFan {
    pub fn new(master: u64) -> Self {
        SeedFan { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        keyed_hash(self.master, name)
    }

    pub fn rng_for(&self, name: &str) -> Pcg64 {
        Pcg64::seed_from_u64(self.seed_for(name))
    }

    /// Glorot-uniform `rows×cols` matrix: U(-a, a) with a = sqrt(6 / (rows + cols)).
    pub fn glorot(&self, name: &str, rows: usize, cols: usize) -> Tensor {
        let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
        let mut rng = self.rng_for(name);
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
        Tensor::new(vec![rows, cols], data).expect("glorot shape")
    }
}
