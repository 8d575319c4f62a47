use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed.
pub mod streams {
    pub const NET_INIT: u64 = 1;
    pub const BRANCH_INIT: u64 = 2;
    pub const REGRESSOR_INIT: u64 = 3;
    pub const PROBE_INIT: u64 = 4;
    pub const DATA: u64 = 5;
    /// Minibatch order for epoch `e` uses stream `SHUFFLE + e`.
    pub const SHUFFLE: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
