//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for component `name` under `root`.
pub fn substream(root: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed)
}

/// Child seed for item `n` of component `name` under `root`.
pub fn derive_seed(root: u64, name: &str, n: u64) -> u64 {
    use rand::RngCore;
    let mut r = substream(root ^ n.rotate_left(32), name);
    r.next_u64()
}
