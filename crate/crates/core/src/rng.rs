//! Named, counter-based PRNG streams (PCG64).
//!
//! Every stochastic subsystem draws from its own stream constant so that,
//! for example, calibration noise reproducibility never depends on how many
//! values weight initialization consumed.

use rand_pcg::Pcg64;

pub const STREAM_WEIGHT_INIT: u128 = 0xa02b_dbf7_bb3c_0a7a_c28f_a16a_63af_4e51;
pub const STREAM_NOISE: u128 = 0x7b1f_aad9_12f1_59d1_5bd1_e995_1d8b_38cd;
pub const STREAM_POSITION: u128 = 0x3c6e_f372_fe94_f82b_9e37_79b9_7f4a_7c15;
pub const STREAM_TASKGEN: u128 = 0x5851_f42d_4c95_7f2d_1405_7b7e_f767_814f;
pub const STREAM_DEMO_SAMPLER: u128 = 0x94d0_49bb_1331_11eb_bf58_476d_1ce4_e5b9;
pub const STREAM_PRETRAIN: u128 = 0xd6e8_feb8_6659_fd93_caf6_49a9_dd6e_1ae3;
pub const STREAM_NOISE_VECTOR: u128 = 0x2545_f491_4f6c_dd1d_8e51_0f4b_66b2_d8e7;

/// Build a PCG64 generator on the given named stream.
pub fn stream_rng(seed: u64, stream: u128) -> Pcg64 {
    Pcg64::new(seed as u128, stream)
}

/// Mix a base seed with an index into a fresh sub-seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(splitmix64(index ^ 0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent() {
        let mut a = stream_rng(7, STREAM_WEIGHT_INIT);
        let mut b = stream_rng(7, STREAM_NOISE);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn derive_seed_spreads_indices() {
        let s: Vec<u64> = (0..16).map(|i| derive_seed(42, i)).collect();
        let mut dedup = s.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), s.len());
    }
}
