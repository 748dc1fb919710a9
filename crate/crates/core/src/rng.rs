//! Seed derivation. Every random stream in a run comes from the single run
//! seed, either per task (`seed · 10007 + task_id`) or per component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Tasks,
    Calibration,
    Mix,
    WorldModelInit,
    WorldModelBatches,
    PolicyInit,
    PolicyBatches,
    Dropout,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Tasks => 1,
            Stream::Calibration => 2,
            Stream::Mix => 3,
            Stream::WorldModelInit => 4,
            Stream::WorldModelBatches => 5,
            Stream::PolicyInit => 6,
            Stream::PolicyBatches => 7,
            Stream::Dropout => 8,
            Stream::Eval => 9,
        }
    }
}

pub fn task_seed(seed: u64, task_id: usize) -> u64 {
    seed.wrapping_mul(10007).wrapping_add(task_id as u64)
}

pub fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(task_seed(seed, task_id))
}

/// splitmix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    mix64(seed ^ mix64(stream.tag()))
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

/// A per-item sub-stream of a component stream (e.g. one evaluation task).
pub fn sub_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(stream_seed(seed, stream) ^ mix64(index.wrapping_add(1))))
}
