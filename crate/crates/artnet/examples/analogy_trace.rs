//! Traces one analogical prediction end to end: retrieve references for a
//! masked composition, run the model, and print the pair-attention weights
//! that show which reference fragments the reasoning stack leaned on.
//!
//! The model here is freshly initialized — the point is the mechanics and
//! the shapes, not the quality of the guesses.
//!
//! Run with `cargo run --example analogy_trace`.

use artnet::amm::{retrieve_topk, EpisodeKey};
use artnet::backbone::{apply_mask_policy, tokenize, MaskMode};
use artnet::model::{Model, ModelConfig, Variant};
use artnet::params::ParamStore;
use artnet::seeds;
use artnet::world::{gen_episodes, gen_world, WorldConfig};

fn main() {
    let world = gen_world(
        &WorldConfig {
            verbs: 5,
            nouns: 8,
            context_words: 5,
            d_vis: 12,
            affordance_density: 0.6,
            sigma: 0.1,
        },
        3,
    )
    .expect("world config is valid");
    let vocab = &world.vocab;
    let episodes = gen_episodes(&world, 80, 3);
    let target = &episodes[0];

    let mut cfg = ModelConfig::desk(Variant::Artnet, vocab.num_tokens(), 12);
    cfg.encoder.layers = 1;
    cfg.encoder.hidden = 32;
    cfg.encoder.heads = 2;
    cfg.arn.hidden = 32;
    cfg.arn.query_dim = 32;
    let mut store = ParamStore::new();
    let mut init = seeds::init_rng(3);
    let model = Model::new(cfg, &mut store, &mut init).expect("config is consistent");

    // Mask exactly the gold composition, the way evaluation does.
    let tokens = tokenize(target);
    let mut rng = seeds::eval_pool_rng(3, 1, target.id);
    let masked = apply_mask_policy(
        &tokens,
        MaskMode::TestComposition {
            verb_token: vocab.verb_token(target.verb),
            noun_token: vocab.noun_token(target.noun),
        },
        vocab,
        &mut rng,
    )
    .expect("gold words are present");

    let sentence: Vec<&str> = target.tokens.iter().map(|&t| vocab.token_name(t)).collect();
    println!(
        "target #{}: \"{}\"  gold composition = ({} {})\n",
        target.id,
        sentence.join(" "),
        vocab.token_name(vocab.verb_token(target.verb)),
        vocab.token_name(vocab.noun_token(target.noun)),
    );

    // Retrieve the 3 most relevant of the remaining episodes.
    let target_key = EpisodeKey::for_masked_target(&masked, vocab, false);
    let keys: Vec<(u64, EpisodeKey)> = episodes[1..]
        .iter()
        .map(|ep| (ep.id, EpisodeKey::for_reference(ep, vocab, false)))
        .collect();
    let borrowed: Vec<(u64, &EpisodeKey)> = keys.iter().map(|(id, k)| (*id, k)).collect();
    let top = retrieve_topk(&target_key, &borrowed, 3).expect("pool is non-empty");
    let refs: Vec<&artnet::world::Episode> =
        top.iter().map(|r| &episodes[r.index + 1]).collect();

    println!("retrieved references:");
    for (r, ep) in top.iter().zip(&refs) {
        let words: Vec<&str> = ep.tokens.iter().map(|&t| vocab.token_name(t)).collect();
        println!(
            "  #{:<3} s_vl {:.4}  \"{}\" ({} regions)",
            r.episode_id,
            r.score.s_vl,
            words.join(" "),
            ep.num_regions(),
        );
    }

    let g = artnet::tensor::Graph::new();
    let bind = store.bind(&g);
    let fwd = model
        .forward(&g, &bind, &masked, &refs, None)
        .expect("forward on a masked episode");

    println!("\npair attention per reference:");
    println!("(text scores adjacent word pairs; vision scores all ordered region pairs)");
    for ((trace, r), ep) in fwd.traces.iter().zip(&top).zip(&refs) {
        println!("  reference #{}:", r.episode_id);
        let words: Vec<&str> = ep.tokens.iter().map(|&t| vocab.token_name(t)).collect();
        for (i, &a) in trace.alpha_text.iter().enumerate() {
            println!("    text  ({} {})  alpha {:.3}", words[i], words[i + 1], a);
        }
        let (ia, ib) = artnet::arn::ordered_pair_indices(ep.num_regions());
        let show = trace.alpha_vis.len().min(4);
        for (i, &a) in trace.alpha_vis.iter().take(show).enumerate() {
            println!("    vision (region {} region {})  alpha {:.3}", ia[i], ib[i], a);
        }
        if trace.alpha_vis.len() > show {
            println!("    ... {} more region pairs", trace.alpha_vis.len() - show);
        }
    }

    println!("\nmasked-slot guesses (untrained, so near-uniform):");
    for w in &fwd.words {
        let logits = g.value(w.logits);
        let top = artnet::cce::top_n(logits.data(), 3);
        let names: Vec<String> = top
            .iter()
            .map(|&t| format!("{} ({:+.2})", vocab.token_name(t), logits.data()[t]))
            .collect();
        println!(
            "  slot for {:<4} -> {}",
            vocab.token_name(w.target),
            names.join(", ")
        );
    }
}
