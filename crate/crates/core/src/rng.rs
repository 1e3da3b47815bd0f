//! Seeded, forkable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(root seed, label path)`.
//! Forking appends a path component, so `fork(fork(s, "a"), "b")` and a stream
//! forked directly with label `"a/b"` from the same root produce the same values.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

/// Root stream for `seed`.
pub fn make_rng(seed: u64) -> RngStream {
    RngStream::keyed(seed, String::new())
}

impl RngStream {
    fn keyed(seed: u64, label: String) -> Self {
        let key = derive_key(seed, &label);
        Self {
            seed,
            label,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream determined only by this stream's key and `label`, never by
    /// how many values have been drawn from `self`.
    pub fn fork(&self, label: &str) -> RngStream {
        let path = if self.label.is_empty() {
            label.to_string()
        } else {
            format!("{}/{}", self.label, label)
        };
        RngStream::keyed(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut state = seed;
    let mut acc = splitmix(&mut state);
    for chunk in label.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(word) ^ acc.rotate_left(17);
        acc = splitmix(&mut state);
    }
    // Length is folded in so "a" and "a\0" differ.
    state ^= label.len() as u64;
    let mut key = [0u8; 32];
    for lane in key.chunks_mut(8) {
        lane.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    key
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_seed_same_sequence() {
        assert_eq!(draws(&mut make_rng(7), 100), draws(&mut make_rng(7), 100));
        assert_ne!(draws(&mut make_rng(7), 4), draws(&mut make_rng(8), 4));
    }

    #[test]
    fn labels_separate_streams() {
        let s = make_rng(7);
        assert_ne!(draws(&mut s.fork("a"), 16), draws(&mut s.fork("b"), 16));
    }

    #[test]
    fn fork_ignores_parent_position() {
        let mut s = make_rng(3);
        let before = draws(&mut s.fork("x"), 8);
        s.next_u64();
        assert_eq!(before, draws(&mut s.fork("x"), 8));
    }

    #[test]
    fn nested_fork_equals_path_label() {
        let s = make_rng(11);
        let nested = s.fork("a").fork("b");
        assert_eq!(nested.label(), "a/b");
        assert_eq!(draws(&mut nested.clone(), 10), draws(&mut s.fork("a/b"), 10));
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut s = make_rng(1);
        for _ in 0..1000 {
            let v = s.uniform(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&v));
        }
    }
}
