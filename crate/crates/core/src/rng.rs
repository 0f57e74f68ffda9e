//! Counter-based random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, purpose, a, b)`
//! so results do not depend on call order and independent consumers are
//! decorrelated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes; distinct tags give unrelated streams for the same keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    ShakeDropForward = 2,
    ShakeDropBackward = 3,
    Shuffle = 4,
    Augment = 5,
    CutMix = 6,
    Dataset = 7,
    Split = 8,
    Direction = 9,
    Tta = 10,
    Eval = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose as u64)));
    rng.set_stream(splitmix(splitmix(a) ^ b.rotate_left(17)));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(1, Purpose::Init, 2, 3).random();
        let b: u64 = stream(1, Purpose::Init, 2, 3).random();
        let c: u64 = stream(1, Purpose::Init, 3, 2).random();
        let d: u64 = stream(1, Purpose::Shuffle, 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
