//! Counter-keyed random streams: a stream is a pure function of its key, so
//! work can be split across threads without changing any drawn value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, key[0], key[1], ...)`.
pub fn keyed(seed: u64, key: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xA5A5_5A5A)));
    }
    let mut bytes = [0u8; 32];
    let mut s = h;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Domain tags so distinct consumers of one seed never share a stream.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const MIX: u64 = 3;
    pub const MASK: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const CORPUS: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const PROBE: u64 = 10;
    pub const FINETUNE: u64 = 11;
}
