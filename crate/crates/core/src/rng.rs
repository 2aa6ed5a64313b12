//! Seeded generator streams.
//!
//! Every stochastic entry point takes an explicit 64-bit seed. Independent
//! purposes (initialization, training scenes, held-out scenes, export) use
//! distinct ChaCha stream identifiers, so their sequences never overlap even
//! for equal seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Eval = 3,
    Export = 4,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for item `index` of `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(index)));
    rng.set_stream(stream as u64);
    rng
}
