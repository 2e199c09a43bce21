//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (dataset synthesis, partitioning, each
//! device's local epochs, straggler sampling) gets its own ChaCha stream keyed
//! by a label and a short index path, so components can be re-seeded
//! independently and parallel execution never shares generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream(root: u64, label: &str, path: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}
