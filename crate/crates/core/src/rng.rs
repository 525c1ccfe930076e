//! Counter-based random substreams.
//!
//! Every random draw is addressed by `(seed, unit, stream, position)`:
//! `unit` is a trajectory or bootstrap replicate index, `stream` encodes the
//! stage and the kind of draw, and `position` is the draw's index inside the
//! stream. The generator is ChaCha12, whose block function is a pure map of
//! key and counter, so any unit can be regenerated alone and results do not
//! depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the key of substream `index` under `seed`.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index).rotate_left(17))
}

/// Kinds of draws made at one stage of a simulated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Channel {
    Covariates = 0,
    Action = 1,
    Outcome = 2,
}

/// Generator for `channel` at 1-based `stage` of unit `index`.
pub fn substream(seed: u64, index: u64, stage: usize, channel: Channel) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(mix(seed, index));
    rng.set_stream(((stage as u64) << 8) | channel as u64);
    rng
}

/// Generator for a whole unit (e.g. one bootstrap replicate).
pub fn unit_stream(seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(seed, index))
}
