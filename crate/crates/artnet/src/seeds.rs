//! Deterministic RNG derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from the run seed plus a purpose tag, so results are independent of
//! scheduling: masking episode 17 in epoch 3 uses the same stream whether
//! batches are processed in any order or a subset of the data is used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a tag chain into the seed; order-sensitive by construction.
fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    h
}

/// ChaCha8 stream for an arbitrary tag chain.
pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// World construction: vocabulary, affordances, prototypes.
pub fn world_rng(seed: u64) -> ChaCha8Rng {
    rng(seed, &[0])
}

/// Content of one episode (composition choice, regions, sentence).
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    rng(seed, &[1, episode])
}

/// Masking decisions for one episode in one epoch.
pub fn masking_rng(seed: u64, epoch: u64, episode: u64) -> ChaCha8Rng {
    rng(seed, &[2, epoch, episode])
}

/// Training-time retrieval pool sampled for one target episode.
pub fn pool_rng(seed: u64, epoch: u64, episode: u64) -> ChaCha8Rng {
    rng(seed, &[3, epoch, episode])
}

/// Evaluation-time retrieval pool; `split` distinguishes eval sets.
pub fn eval_pool_rng(seed: u64, split: u64, episode: u64) -> ChaCha8Rng {
    rng(seed, &[4, split, episode])
}

/// Dropout masks for one episode in one epoch.
pub fn dropout_rng(seed: u64, epoch: u64, episode: u64) -> ChaCha8Rng {
    rng(seed, &[5, epoch, episode])
}

/// Parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    rng(seed, &[6])
}

/// Epoch-level shuffling of the training episode order.
pub fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    rng(seed, &[7, epoch])
}

/// Choosing the training subset when a fraction below 1.0 is requested.
pub fn subsample_rng(seed: u64) -> ChaCha8Rng {
    rng(seed, &[8])
}

/// Assigning episodes to train/test splits and picking withheld pairs.
pub fn split_rng(seed: u64) -> ChaCha8Rng {
    rng(seed, &[9])
}

/// Pairing each masked visual token with negatives from the rest of a batch.
pub fn negatives_rng(seed: u64, epoch: u64, batch: u64) -> ChaCha8Rng {
    rng(seed, &[10, epoch, batch])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn first(mut r: ChaCha8Rng) -> u64 {
        r.next_u64()
    }

    #[test]
    fn same_tags_same_stream() {
        assert_eq!(first(rng(7, &[1, 2, 3])), first(rng(7, &[1, 2, 3])));
    }

    #[test]
    fn different_tags_different_streams() {
        let base = first(rng(7, &[1, 2, 3]));
        assert_ne!(base, first(rng(7, &[1, 2, 4])));
        assert_ne!(base, first(rng(7, &[1, 3, 2])));
        assert_ne!(base, first(rng(8, &[1, 2, 3])));
        assert_ne!(base, first(rng(7, &[1, 2])));
    }

    #[test]
    fn purpose_streams_are_disjoint() {
        let seed = 42;
        let vals = [
            first(world_rng(seed)),
            first(episode_rng(seed, 0)),
            first(masking_rng(seed, 0, 0)),
            first(pool_rng(seed, 0, 0)),
            first(eval_pool_rng(seed, 0, 0)),
            first(dropout_rng(seed, 0, 0)),
            first(init_rng(seed)),
            first(shuffle_rng(seed, 0)),
            first(subsample_rng(seed)),
            first(split_rng(seed)),
        ];
        for i in 0..vals.len() {
            for j in i + 1..vals.len() {
                assert_ne!(vals[i], vals[j], "streams {i} and {j} collide");
            }
        }
    }

    #[test]
    fn episode_streams_do_not_depend_on_order_of_use() {
        // Drawing for episode 5 never consumes state from episode 4's
        // stream; each is re-derived from scratch.
        let a = first(episode_rng(3, 5));
        let _ = episode_rng(3, 4).next_u64();
        let b = first(episode_rng(3, 5));
        assert_eq!(a, b);
    }
}
