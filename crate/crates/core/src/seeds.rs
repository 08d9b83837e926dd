//! Seed derivation. A master seed expands into independent per-run and
//! per-stream seeds through splitmix64, so results never depend on the order
//! in which runs are scheduled.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 output for state `x` (Steele, Lea & Flood constants).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed number `index` derived from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_mul(GOLDEN_GAMMA)))
}

/// Random streams used inside one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Environment = 1,
    Policy = 2,
    Init = 3,
    Shuffle = 4,
    Slots = 5,
}

pub fn stream_seed(run_seed: u64, stream: Stream) -> u64 {
    derive_seed(run_seed, stream as u64)
}
