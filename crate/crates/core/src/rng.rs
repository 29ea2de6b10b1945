//! Independent random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator for one concern (`"init"`, `"crop"`, …). Streams with
/// different labels never overlap, so e.g. changing the batching does not
/// perturb initialization.
pub fn stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(u64::from(crc32fast::hash(label.as_bytes())));
    rng
}

/// Stream for one labelled concern and an index within it (e.g. an epoch).
pub fn indexed_stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15), label)
}
