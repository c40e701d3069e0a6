//! Hierarchically keyed random streams.
//!
//! Every random draw in a simulation comes from a ChaCha8 generator whose
//! seed is derived from `(master seed, purpose, group, client, round)`. Two
//! streams with the same key always produce the same sequence no matter how
//! other streams were consumed, which is what makes paired-seed experiments
//! use common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key so that, e.g., the delay and
/// minibatch streams of the same group never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    LocalDelay = 2,
    GlobalDelay = 3,
    Minibatch = 4,
    Data = 5,
    Partition = 6,
    Probe = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub group: u64,
    pub client: u64,
    pub round: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose) -> Self {
        Self {
            purpose,
            group: 0,
            client: 0,
            round: 0,
        }
    }

    pub fn group(mut self, group: u64) -> Self {
        self.group = group;
        self
    }

    pub fn client(mut self, client: u64) -> Self {
        self.client = client;
        self
    }

    pub fn round(mut self, round: u64) -> Self {
        self.round = round;
        self
    }
}

/// Root of the stream hierarchy for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn substream(&self, key: StreamKey) -> ChaCha8Rng {
        let mut h = splitmix64(self.master_seed ^ 0x6a09_e667_f3bc_c908);
        for part in [key.purpose as u64, key.group, key.client, key.round] {
            h = splitmix64(h ^ part.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        let mut seed = [0u8; 32];
        let mut state = h;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
