//! Shows how episodic retrieval ranks past episodes for a masked target.
//!
//! Relevance is half word-set Jaccard, half mean region cosine (mapped to
//! [0, 1]); references sharing the target's words and visual prototypes rise
//! to the top. Masked words are excluded from the target's key so retrieval
//! cannot peek at what the model must predict.
//!
//! Run with `cargo run --example retrieval_relevance`.

use artnet::amm::{relevance, retrieve_topk, EpisodeKey};
use artnet::backbone::{apply_mask_policy, tokenize, MaskMode};
use artnet::world::{gen_episodes, gen_world, WorldConfig};
use artnet::seeds;

fn main() {
    let world = gen_world(
        &WorldConfig {
            verbs: 5,
            nouns: 8,
            context_words: 6,
            d_vis: 12,
            affordance_density: 0.5,
            sigma: 0.1,
        },
        23,
    )
    .expect("config is valid");
    let vocab = &world.vocab;
    let episodes = gen_episodes(&world, 60, 23);

    // Mask the target episode the way training would, then build its key
    // from what is left visible.
    let target = &episodes[0];
    let tokens = tokenize(target);
    let mut rng = seeds::masking_rng(23, 1, 0);
    let masked = apply_mask_policy(&tokens, MaskMode::Training, vocab, &mut rng)
        .expect("masking cannot fail on a tokenized episode");
    let target_key = EpisodeKey::for_masked_target(&masked, vocab, false);

    let words: Vec<&str> = target.tokens.iter().map(|&t| vocab.token_name(t)).collect();
    println!(
        "target #{}: \"{}\" with {} masked words, {} zeroed regions",
        target.id,
        words.join(" "),
        masked.text_targets.len(),
        masked.visual_targets.len(),
    );
    println!("visible key words: {:?}\n", key_names(&target_key, vocab));

    let refs: Vec<(u64, EpisodeKey)> = episodes[1..]
        .iter()
        .map(|ep| (ep.id, EpisodeKey::for_reference(ep, vocab, false)))
        .collect();
    let borrowed: Vec<(u64, &EpisodeKey)> = refs.iter().map(|(id, k)| (*id, k)).collect();
    let top = retrieve_topk(&target_key, &borrowed, 5).expect("pool is non-empty");

    println!("top 5 of {} references:", borrowed.len());
    for r in &top {
        let ep = &episodes[r.index + 1];
        let sentence: Vec<&str> = ep.tokens.iter().map(|&t| vocab.token_name(t)).collect();
        println!(
            "  #{:<3} s_vl {:.4} (jaccard {:.3}, mean cos {:+.3})  \"{}\"",
            r.episode_id,
            r.score.s_vl,
            r.score.jaccard,
            r.score.mean_cos,
            sentence.join(" "),
        );
    }

    // The same scores by brute force over every pair, as a sanity check.
    let mut best = (0u64, f64::MIN);
    for (id, key) in &refs {
        let s = relevance(&target_key, key).s_vl;
        if s > best.1 {
            best = (*id, s);
        }
    }
    println!(
        "\nbrute-force best reference: #{} at s_vl {:.4} (matches the ranked head)",
        best.0, best.1
    );
}

fn key_names<'a>(key: &EpisodeKey, vocab: &'a artnet::world::Vocab) -> Vec<&'a str> {
    key.words.iter().map(|&w| vocab.token_name(w)).collect()
}
