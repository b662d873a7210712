//! Episodic memory retrieval.
//!
//! A masked target episode is scored against a pool of reference episodes
//! by a fixed (non-learned) multimodal relevance: the Jaccard index of the
//! unmasked word sets, averaged with the normalized mean cosine between all
//! region pairs. Scoring uses initial feature space only, so retrieval is
//! stable from the very first training step and needs no encoder pass.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{MaskedSequence, Modality, Payload};
use crate::tensor::cosine;
use crate::world::{Episode, TokenKind, Vocab};

#[derive(Debug, Error)]
pub enum AmmError {
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error("k = {k} exceeds pool size {pool}")]
    KTooLarge { k: usize, pool: usize },
}

/// Retrieval knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmmConfig {
    /// References sampled per target per epoch.
    pub pool_size: usize,
    /// References kept after ranking.
    pub k: usize,
    /// Count the whole-image token in the visual relevance mean.
    pub include_whole_image: bool,
}

impl Default for AmmConfig {
    fn default() -> Self {
        AmmConfig {
            pool_size: 200,
            k: 3,
            include_whole_image: false,
        }
    }
}

/// Relevance components for one (target, reference) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceScore {
    pub s_vl: f64,
    pub jaccard: f64,
    pub mean_cos: f64,
}

/// One retrieved reference.
#[derive(Debug, Clone, Copy)]
pub struct Retrieved {
    /// Index into the caller's reference slice.
    pub index: usize,
    pub episode_id: u64,
    pub score: RelevanceScore,
}

/// Precomputed relevance summary of one episode side.
///
/// The mean over all region cosine pairs factorizes as
/// `dot(sum of normalized target regions, sum of normalized ref regions) /
/// (|target| * |ref|)`, so each side only needs its normalized-region sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeKey {
    pub words: BTreeSet<usize>,
    pub region_sum: Vec<f64>,
    pub region_count: usize,
}

impl EpisodeKey {
    /// Key for an unmasked reference episode.
    pub fn for_reference(ep: &Episode, vocab: &Vocab, include_whole_image: bool) -> Self {
        let words = ep
            .tokens
            .iter()
            .copied()
            .filter(|&t| is_plain_word(t, vocab))
            .collect();
        let mut region_sum = vec![0.0; ep.regions.first().map_or(0, |r| r.len())];
        let mut region_count = 0;
        let mut push = |r: &[f64]| {
            add_normalized(&mut region_sum, r);
            region_count += 1;
        };
        if include_whole_image {
            push(&ep.mean_region());
        }
        for r in &ep.regions {
            push(r);
        }
        EpisodeKey {
            words,
            region_sum,
            region_count,
        }
    }

    /// Key for a masked target: only unmasked word positions count, and
    /// visual tokens enter as they appear after masking (zeroed vectors
    /// contribute nothing).
    pub fn for_masked_target(
        seq: &MaskedSequence,
        vocab: &Vocab,
        include_whole_image: bool,
    ) -> Self {
        let masked: BTreeSet<usize> = seq.text_targets.iter().map(|&(p, _)| p).collect();
        let mut words = BTreeSet::new();
        let mut region_sum = Vec::new();
        let mut region_count = 0;
        for (pos, tok) in seq.tokens.iter().enumerate() {
            match (&tok.kind, &tok.payload) {
                (Modality::Textual, Payload::Word(id)) => {
                    if !masked.contains(&pos) && is_plain_word(*id, vocab) {
                        words.insert(*id);
                    }
                }
                (Modality::Visual, Payload::Region(feat)) => {
                    if tok.position == 0 && !include_whole_image {
                        continue;
                    }
                    if region_sum.is_empty() {
                        region_sum = vec![0.0; feat.len()];
                    }
                    add_normalized(&mut region_sum, feat);
                    region_count += 1;
                }
                _ => {}
            }
        }
        EpisodeKey {
            words,
            region_sum,
            region_count,
        }
    }
}

fn is_plain_word(token: usize, vocab: &Vocab) -> bool {
    !matches!(vocab.kind(token), TokenKind::Special(_))
}

fn add_normalized(sum: &mut [f64], r: &[f64]) {
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    for (s, &v) in sum.iter_mut().zip(r) {
        *s += v / norm;
    }
}

/// Jaccard index of two word sets; 0 when both are empty.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Definitional mean pairwise cosine between two region lists; pairs with a
/// zero-norm side contribute 0. This is the brute-force form; scoring via
/// [`EpisodeKey`] must agree with it exactly up to float reassociation.
pub fn visual_relevance(target: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    assert!(!target.is_empty() && !reference.is_empty());
    let mut total = 0.0;
    for t in target {
        for r in reference {
            total += cosine(t, r);
        }
    }
    total / (target.len() * reference.len()) as f64
}

/// Mean pairwise cosine from two precomputed keys.
pub fn mean_cosine(a: &EpisodeKey, b: &EpisodeKey) -> f64 {
    if a.region_count == 0 || b.region_count == 0 {
        return 0.0;
    }
    let dot: f64 = a
        .region_sum
        .iter()
        .zip(&b.region_sum)
        .map(|(&x, &y)| x * y)
        .sum();
    dot / (a.region_count * b.region_count) as f64
}

/// Multimodal relevance: `s_vl = (jaccard + (1 + mean_cos) / 2) / 2`,
/// always in [0, 1].
pub fn relevance(a: &EpisodeKey, b: &EpisodeKey) -> RelevanceScore {
    let j = jaccard(&a.words, &b.words);
    let c = mean_cosine(a, b);
    RelevanceScore {
        s_vl: 0.5 * (j + (1.0 + c) / 2.0),
        jaccard: j,
        mean_cos: c,
    }
}

/// Samples `n` distinct reference indices from `0..available`, excluding
/// `exclude`; returns everything (in draw order) when fewer than `n` exist.
pub fn sample_pool(
    available: usize,
    exclude: Option<usize>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let candidates: Vec<usize> = (0..available).filter(|i| Some(*i) != exclude).collect();
    if candidates.len() <= n {
        return candidates;
    }
    rand::seq::index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Ranks references by relevance, descending; ties break toward the smaller
/// episode id. `refs` pairs each candidate's episode id with its key.
pub fn retrieve_topk(
    target: &EpisodeKey,
    refs: &[(u64, &EpisodeKey)],
    k: usize,
) -> Result<Vec<Retrieved>, AmmError> {
    if refs.is_empty() {
        return Err(AmmError::EmptyPool);
    }
    if k > refs.len() {
        return Err(AmmError::KTooLarge { k, pool: refs.len() });
    }
    let mut scored: Vec<Retrieved> = refs
        .iter()
        .enumerate()
        .map(|(index, (episode_id, key))| Retrieved {
            index,
            episode_id: *episode_id,
            score: relevance(target, key),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .s_vl
            .total_cmp(&a.score.s_vl)
            .then(a.episode_id.cmp(&b.episode_id))
    });
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{apply_mask_policy, tokenize, MaskMode};
    use crate::seeds;
    use crate::world::{gen_episodes, gen_world, WorldConfig};

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn jaccard_hand_cases() {
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&set(&[5, 6]), &set(&[5, 6])), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
    }

    #[test]
    fn visual_relevance_limit_cases() {
        let u = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!((visual_relevance(&u, &u) - 1.0).abs() < 1e-12);
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 2.0]];
        assert!((visual_relevance(&a, &b)).abs() < 1e-12);
        let z = vec![vec![0.0, 0.0]];
        assert_eq!(visual_relevance(&z, &a), 0.0);
    }

    #[test]
    fn key_based_mean_matches_brute_force() {
        let mut s = 12345u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let target: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| next()).collect()).collect();
        let reference: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| next()).collect()).collect();
        let brute = visual_relevance(&target, &reference);
        let ka = key_from_regions(&target);
        let kb = key_from_regions(&reference);
        assert!((mean_cosine(&ka, &kb) - brute).abs() < 1e-12);
    }

    fn key_from_regions(regions: &[Vec<f64>]) -> EpisodeKey {
        let mut sum = vec![0.0; regions[0].len()];
        for r in regions {
            add_normalized(&mut sum, r);
        }
        EpisodeKey {
            words: BTreeSet::new(),
            region_sum: sum,
            region_count: regions.len(),
        }
    }

    #[test]
    fn relevance_closed_form_points() {
        // J=0, cos=0 -> 0.25; J=1, cos=1 -> 1.0; J=0, cos=-1 -> 0.
        let a = EpisodeKey {
            words: set(&[1]),
            region_sum: vec![1.0, 0.0],
            region_count: 1,
        };
        let orth = EpisodeKey {
            words: set(&[2]),
            region_sum: vec![0.0, 1.0],
            region_count: 1,
        };
        let s = relevance(&a, &orth);
        assert!((s.s_vl - 0.25).abs() < 1e-12);

        let s = relevance(&a, &a);
        assert!((s.s_vl - 1.0).abs() < 1e-12);

        let anti = EpisodeKey {
            words: set(&[2]),
            region_sum: vec![-1.0, 0.0],
            region_count: 1,
        };
        let s = relevance(&a, &anti);
        assert!(s.s_vl.abs() < 1e-12);
    }

    #[test]
    fn relevance_is_symmetric_and_bounded() {
        let mut rng_state = 7u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            rng_state
        };
        for _ in 0..200 {
            let wa: BTreeSet<usize> = (0..(next() % 5)).map(|_| (next() % 9) as usize).collect();
            let wb: BTreeSet<usize> = (0..(next() % 5)).map(|_| (next() % 9) as usize).collect();
            let ra: Vec<Vec<f64>> = (0..1 + next() % 3)
                .map(|_| (0..4).map(|_| (next() % 1000) as f64 / 500.0 - 1.0).collect())
                .collect();
            let rb: Vec<Vec<f64>> = (0..1 + next() % 3)
                .map(|_| (0..4).map(|_| (next() % 1000) as f64 / 500.0 - 1.0).collect())
                .collect();
            let mut ka = key_from_regions(&ra);
            ka.words = wa;
            let mut kb = key_from_regions(&rb);
            kb.words = wb;
            let ab = relevance(&ka, &kb);
            let ba = relevance(&kb, &ka);
            assert!((ab.s_vl - ba.s_vl).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&ab.s_vl), "{}", ab.s_vl);
        }
    }

    #[test]
    fn topk_ranks_duplicate_first_and_matches_brute_force() {
        let cfg = WorldConfig {
            verbs: 4,
            nouns: 6,
            context_words: 4,
            d_vis: 8,
            affordance_density: 0.7,
            sigma: 0.15,
        };
        let w = gen_world(&cfg, 5).unwrap();
        let eps = gen_episodes(&w, 50, 5);
        let keys: Vec<EpisodeKey> = eps
            .iter()
            .map(|e| EpisodeKey::for_reference(e, &w.vocab, false))
            .collect();
        let target = keys[17].clone();
        let refs: Vec<(u64, &EpisodeKey)> =
            eps.iter().map(|e| e.id).zip(keys.iter()).map(|(i, k)| (i, k)).collect();

        let top = retrieve_topk(&target, &refs, refs.len()).unwrap();
        // The duplicate maxes the word term; the visual term averages over
        // *all* region pairs, so even self-relevance stays below 1.
        let self_score = relevance(&target, &keys[17]);
        assert_eq!(self_score.jaccard, 1.0);
        assert!(self_score.s_vl < 1.0);

        // Brute-force ordering oracle.
        let mut brute: Vec<(u64, f64)> = refs
            .iter()
            .map(|(id, k)| (*id, relevance(&target, k).s_vl))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (got, want) in top.iter().zip(&brute) {
            assert_eq!(got.episode_id, want.0);
        }

        let top3 = retrieve_topk(&target, &refs, 3).unwrap();
        assert_eq!(top3.len(), 3);
        for (a, b) in top3.iter().zip(&top[..3]) {
            assert_eq!(a.episode_id, b.episode_id);
        }
    }

    #[test]
    fn topk_breaks_ties_by_smaller_id() {
        let k1 = EpisodeKey {
            words: set(&[1, 2]),
            region_sum: vec![1.0, 0.0],
            region_count: 1,
        };
        let dup = k1.clone();
        let target = k1.clone();
        let refs = vec![(42u64, &dup), (7u64, &k1)];
        let top = retrieve_topk(&target, &refs, 2).unwrap();
        assert_eq!(top[0].episode_id, 7);
        assert_eq!(top[1].episode_id, 42);
    }

    #[test]
    fn topk_rejects_bad_inputs() {
        let k1 = EpisodeKey {
            words: set(&[1]),
            region_sum: vec![1.0],
            region_count: 1,
        };
        assert!(matches!(
            retrieve_topk(&k1, &[], 1),
            Err(AmmError::EmptyPool)
        ));
        let refs = vec![(0u64, &k1)];
        assert!(matches!(
            retrieve_topk(&k1, &refs, 2),
            Err(AmmError::KTooLarge { .. })
        ));
    }

    #[test]
    fn pool_excludes_target_and_is_distinct() {
        let mut rng = seeds::pool_rng(1, 0, 5);
        let pool = sample_pool(300, Some(5), 200, &mut rng);
        assert_eq!(pool.len(), 200);
        assert!(!pool.contains(&5));
        let distinct: BTreeSet<usize> = pool.iter().copied().collect();
        assert_eq!(distinct.len(), pool.len());

        // Small populations return everything except the target.
        let mut rng = seeds::pool_rng(1, 0, 2);
        let all = sample_pool(4, Some(2), 200, &mut rng);
        assert_eq!(all, vec![0, 1, 3]);
    }

    #[test]
    fn masked_target_key_drops_masked_words_and_specials() {
        let cfg = WorldConfig {
            verbs: 3,
            nouns: 4,
            context_words: 4,
            d_vis: 6,
            affordance_density: 0.8,
            sigma: 0.1,
        };
        let w = gen_world(&cfg, 2).unwrap();
        let eps = gen_episodes(&w, 30, 2);
        let ep = eps.iter().find(|e| e.tokens.len() >= 4).unwrap();
        let toks = tokenize(ep);
        let mode = MaskMode::TestComposition {
            verb_token: w.vocab.verb_token(ep.verb),
            noun_token: w.vocab.noun_token(ep.noun),
        };
        let mut rng = seeds::masking_rng(2, 0, ep.id);
        let seq = apply_mask_policy(&toks, mode, &w.vocab, &mut rng).unwrap();
        let key = EpisodeKey::for_masked_target(&seq, &w.vocab, false);
        assert!(!key.words.contains(&w.vocab.verb_token(ep.verb)));
        assert!(!key.words.contains(&w.vocab.noun_token(ep.noun)));
        for &t in &key.words {
            assert!(matches!(w.vocab.kind(t), TokenKind::Context(_)));
        }
        assert_eq!(key.region_count, ep.regions.len(), "whole image excluded");

        let with_whole = EpisodeKey::for_masked_target(&seq, &w.vocab, true);
        assert_eq!(with_whole.region_count, ep.regions.len() + 1);
    }
}
