//! Deterministic seed tree.
//!
//! Every stochastic decision in a run derives from the root seed through
//! [`derive`], so a client's randomness depends only on (root, round,
//! client id) and never on scheduling order.

/// Stream tags used when deriving sub-seeds inside a local update.
pub mod tag {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const DROPOUT_ALT: u64 = 0x4452_4f51;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const PERTURB_ALT: u64 = 0x5045_5255;
    pub const MC: u64 = 0x4d43_4d43;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const DATA: u64 = 0x4441_5441;
    pub const SAMPLE: u64 = 0x5341_4d50;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a child index into a new, well-spread seed.
pub fn derive(parent: u64, child: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ child.rotate_left(17) ^ 0x2545_f491_4f6c_dd1d)
}

pub fn round_seed(root: u64, round: usize) -> u64 {
    derive(root, round as u64)
}

pub fn client_seed(round_seed: u64, client_id: usize) -> u64 {
    derive(round_seed, client_id as u64)
}
