//! Named, independent random streams derived from one experiment seed.
//!
//! Stream seed = first 8 bytes (little endian) of SHA-256(stream name), XOR the
//! experiment seed, expanded into a ChaCha8 generator.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Data,
    Shuffle,
    ModelInit,
    Method,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Data, Stream::Shuffle, Stream::ModelInit, Stream::Method];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Shuffle => "shuffle",
            Stream::ModelInit => "model_init",
            Stream::Method => "method",
        }
    }
}

pub fn stream_key(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Generator for an arbitrary named stream under `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(name) ^ seed)
}

#[derive(Debug, Clone)]
pub struct SeedState {
    seed: u64,
    streams: BTreeMap<Stream, ChaCha8Rng>,
}

/// Serializable stream positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSnapshot {
    pub seed: u64,
    /// Word position per stream name, as decimal strings (u128).
    pub positions: BTreeMap<String, String>,
}

pub fn seed_all(seed: u64) -> SeedState {
    let streams = Stream::ALL.iter().map(|&s| (s, named_rng(seed, s.name()))).collect();
    SeedState { seed, streams }
}

impl SeedState {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, s: Stream) -> &mut ChaCha8Rng {
        self.streams.get_mut(&s).expect("all streams initialized")
    }

    /// Fresh generator for a sub-task, independent of the four main streams.
    pub fn derive(&self, name: &str) -> ChaCha8Rng {
        named_rng(self.seed, name)
    }

    pub fn snapshot(&self) -> SeedSnapshot {
        SeedSnapshot {
            seed: self.seed,
            positions: self
                .streams
                .iter()
                .map(|(s, rng)| (s.name().to_string(), rng.get_word_pos().to_string()))
                .collect(),
        }
    }

    pub fn restore(snap: &SeedSnapshot) -> Result<Self> {
        let mut state = seed_all(snap.seed);
        for s in Stream::ALL {
            let pos = snap
                .positions
                .get(s.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing rng stream `{}`", s.name())))?;
            let pos: u128 = pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad rng position `{pos}`")))?;
            state.stream(s).set_word_pos(pos);
        }
        Ok(state)
    }
}
