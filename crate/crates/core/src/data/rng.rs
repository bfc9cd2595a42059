//! Named counter-based random streams derived from one run seed.
//!
//! A stream is ChaCha8 keyed by `sha256(seed ‖ name)`, positioned on the
//! ChaCha stream `index`. Every consumer asks for its own `(name, index)`
//! pair, so drawing more or fewer numbers in one place never shifts the
//! values another place sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATA_PRETRAIN: &str = "data/pretrain";
pub const DATA_TRAIN: &str = "data/train";
pub const DATA_VAL: &str = "data/val";
pub const MASKS: &str = "masks";
pub const INIT: &str = "init";
pub const PROBE: &str = "probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self, name: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        h.finalize().into()
    }

    pub fn get(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key(name));
        rng.set_stream(index);
        rng
    }
}
