//! Named random streams derived from a single master seed.
//!
//! Every consumer of randomness (partitioner, model initialisation, each
//! client in each round, the controller, the SOM) draws from its own ChaCha
//! stream so that subsystems stay reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Identifies an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Partition,
    Split,
    Dataset,
    ModelInit,
    Client { client: usize, round: usize },
    Controller,
    Som,
    Projector,
}

impl Stream {
    fn id(self) -> u64 {
        let (tag, a, b) = match self {
            Stream::Partition => (1, 0, 0),
            Stream::Split => (2, 0, 0),
            Stream::Dataset => (3, 0, 0),
            Stream::ModelInit => (4, 0, 0),
            Stream::Client { client, round } => (5, client as u64, round as u64),
            Stream::Controller => (6, 0, 0),
            Stream::Som => (7, 0, 0),
            Stream::Projector => (8, 0, 0),
        };
        let mut h = splitmix64(tag);
        h = splitmix64(h ^ a);
        splitmix64(h ^ b.rotate_left(32))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the generator for `stream` under `master_seed`.
pub fn stream(master_seed: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream.id());
    rng
}

/// Serializable position of a stream generator, used by checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
