//! Root-seed expansion.
//!
//! Every random stream in a run is derived from one root seed and a
//! component label: seed = first 8 LE bytes of SHA-256(root_le || label).
//! Reports can therefore cite a single seed per run.

use sha2::{Digest, Sha256};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "datagen"), derive_seed(7, "datagen"));
        assert_ne!(derive_seed(7, "datagen"), derive_seed(7, "blackbox"));
        assert_ne!(derive_seed(7, "datagen"), derive_seed(8, "datagen"));
    }
}
