//! Seeded random streams.
//!
//! Every pipeline stage draws from its own ChaCha8 stream, keyed by
//! `seed ^ purpose tag`. Per-item streams (one per episode, one per init) mix
//! an index in with SplitMix64 so that item `i` never depends on how many
//! items were drawn before it.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    DataGen,
    Episode,
    Clip,
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::DataGen => 0x4441_5441_4745_4e00, // "DATAGEN"
            Purpose::Episode => 0x4550_4953_4f44_4500, // "EPISODE"
            Purpose::Clip => 0x434c_4950_0000_0000,    // "CLIP"
            Purpose::Init => 0x494e_4954_0000_0000,    // "INIT"
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose) -> Stream {
    ChaCha8Rng::seed_from_u64(seed ^ purpose.tag())
}

/// Stream for item `index` of a sequence (e.g. the i-th episode).
pub fn indexed_stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(splitmix64((seed ^ purpose.tag()).wrapping_add(splitmix64(index))))
}
