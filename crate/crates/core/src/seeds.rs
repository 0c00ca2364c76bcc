//! Seed derivation. Every random stream in a run is a pure function of the run
//! seed and the stream's coordinates, so results do not depend on the order in
//! which clients are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelInit = 1,
    Partition = 2,
    ClientUpdate = 3,
    ServerTrain = 4,
    LocalTrain = 5,
    ClientSampling = 6,
    Data = 7,
    TestData = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, round: u64, client: u64) -> u64 {
    [stream as u64, round, client]
        .into_iter()
        .fold(splitmix64(seed), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn rng(seed: u64, stream: Stream, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, round, client))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_change_the_seed() {
        let base = derive_seed(1, Stream::ClientUpdate, 2, 3);
        assert_eq!(base, derive_seed(1, Stream::ClientUpdate, 2, 3));
        assert_ne!(base, derive_seed(1, Stream::ClientUpdate, 3, 2));
        assert_ne!(base, derive_seed(1, Stream::ServerTrain, 2, 3));
        assert_ne!(base, derive_seed(2, Stream::ClientUpdate, 2, 3));
    }
}
