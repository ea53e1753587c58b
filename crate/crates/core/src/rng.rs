//! Seed schedule for the per-node, per-channel and harness random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(seed, computation)` and
//! selected with `set_stream`, so the values a node or channel draws never
//! depend on how compute hooks were scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::NodeId;

/// Random generator used throughout the simulator.
pub type SimRng = ChaCha8Rng;

const HARNESS_STREAM: u64 = 1 << 62;
const CHANNEL_STREAM: u64 = 2 << 62;

/// Which stream of a computation a generator belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Node(NodeId),
    Channel(NodeId, NodeId),
    Harness,
}

impl Stream {
    fn index(self) -> u64 {
        match self {
            // Node ids are limited to 31 bits by topology validation.
            Stream::Node(id) => u64::from(id.0),
            Stream::Channel(from, to) => CHANNEL_STREAM | (u64::from(from.0) << 31) | u64::from(to.0),
            Stream::Harness => HARNESS_STREAM,
        }
    }
}

/// SplitMix64 finalizer over two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `stream` in computation `computation` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, computation: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, computation));
    rng.set_stream(stream.index());
    rng
}
