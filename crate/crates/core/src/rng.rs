//! Deterministic seed derivation.
//!
//! Every random draw in a run is keyed by a base seed plus a path of
//! integers (client id, round, step, ...), so results never depend on
//! thread scheduling or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated draws that share the same path apart.
pub mod stream {
    pub const CLIENT_SAMPLING: u64 = 1;
    pub const LOCAL_BATCH: u64 = 2;
    pub const LOCAL_NOISE: u64 = 3;
    pub const MAML_SPLIT: u64 = 4;
    pub const PERSONALIZE: u64 = 5;
    pub const EVAL_NOISE: u64 = 6;
    pub const INIT_MODEL: u64 = 7;
    pub const INIT_HYPER: u64 = 8;
    pub const DATA: u64 = 9;
    pub const PARTITION: u64 = 10;
    pub const OOD: u64 = 11;
    pub const SPLIT: u64 = 12;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_order_matters() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[]), derive_seed(2, &[]));
    }
}
