//! Seeded, addressable random streams.
//!
//! A stream is fully determined by the global seed and a [`StreamId`], so any
//! party can regenerate the same sequence without coordination.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// What a stream is used for. Distinct purposes never share sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Data = 3,
    Noise = 4,
    Test = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: Purpose,
    pub client: u32,
    /// Free slots for round/epoch or sample index addressing.
    pub a: u64,
    pub b: u64,
}

impl StreamId {
    pub fn new(purpose: Purpose, client: u32) -> Self {
        StreamId { purpose, client, a: 0, b: 0 }
    }

    pub fn with(mut self, a: u64, b: u64) -> Self {
        self.a = a;
        self.b = b;
        self
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        let words = [
            splitmix64(&mut state),
            splitmix64(&mut state) ^ (id.purpose as u64).rotate_left(56) ^ u64::from(id.client),
            splitmix64(&mut state) ^ id.a,
            splitmix64(&mut state) ^ id.b.rotate_left(17),
        ];
        // Second mixing pass so nearby ids land far apart.
        let mut mix = words[0] ^ words[1] ^ words[2] ^ words[3];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&(w ^ splitmix64(&mut mix)).to_le_bytes());
        }
        RngStream { inner: ChaCha12Rng::from_seed(key) }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn rng(&mut self) -> &mut ChaCha12Rng {
        &mut self.inner
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
