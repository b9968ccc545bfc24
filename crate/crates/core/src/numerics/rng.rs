//! Splittable, path-addressed random streams.
//!
//! A [`SeededRng`] is a *key*, not a generator: a root seed plus a path of
//! `(label, index)` steps. Calling [`SeededRng::stream`] materializes a fresh
//! ChaCha8 generator for that key, so two workers that derive the same path get
//! the same numbers and nothing is shared between them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator handed out by [`SeededRng::stream`].
pub type RngStream = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    root_seed: u64,
    path: Vec<(String, u64)>,
}

impl SeededRng {
    pub fn new(root_seed: u64) -> Self {
        SeededRng {
            root_seed,
            path: Vec::new(),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    /// Child key one step further down the path.
    #[must_use]
    pub fn derive(&self, label: &str, index: u64) -> SeededRng {
        let mut path = self.path.clone();
        path.push((label.to_owned(), index));
        SeededRng {
            root_seed: self.root_seed,
            path,
        }
    }

    pub fn stream(&self) -> RngStream {
        let mut state = splitmix64(self.root_seed ^ 0x6a09_e667_f3bc_c908);
        for (label, index) in &self.path {
            state = splitmix64(state ^ fnv1a(label.as_bytes()));
            state = splitmix64(state ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(rng: &SeededRng) -> Vec<u64> {
        let mut s = rng.stream();
        (0..8).map(|_| s.random()).collect()
    }

    #[test]
    fn same_key_same_stream() {
        let a = SeededRng::new(7).derive("client", 3).derive("round", 1);
        let b = SeededRng::new(7).derive("client", 3).derive("round", 1);
        assert_eq!(draw(&a), draw(&b));
    }

    #[test]
    fn distinct_paths_diverge() {
        let root = SeededRng::new(7);
        let keys = [
            root.clone(),
            root.derive("client", 0),
            root.derive("client", 1),
            root.derive("round", 0),
            root.derive("client", 0).derive("round", 0),
            SeededRng::new(8),
        ];
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i + 1..] {
                assert_ne!(draw(a), draw(b), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn path_order_matters() {
        let root = SeededRng::new(1);
        let ab = root.derive("a", 0).derive("b", 0);
        let ba = root.derive("b", 0).derive("a", 0);
        assert_ne!(draw(&ab), draw(&ba));
    }
}
