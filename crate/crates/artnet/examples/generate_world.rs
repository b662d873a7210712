//! Builds a small synthetic world and prints what lives inside it: the
//! vocabulary, the affordance matrix, the withheld compositions, and a few
//! rendered episodes.
//!
//! Run with `cargo run --example generate_world`.

use artnet::world::{
    gen_episodes, gen_world, make_split, SplitTag, WorldConfig, WorldError,
};

fn main() -> Result<(), WorldError> {
    let cfg = WorldConfig {
        verbs: 5,
        nouns: 8,
        context_words: 6,
        d_vis: 12,
        affordance_density: 0.5,
        sigma: 0.1,
    };
    let seed = 17;
    let world = gen_world(&cfg, seed)?;
    let vocab = &world.vocab;

    println!(
        "vocabulary: {} verbs, {} nouns, {} context words, {} tokens total\n",
        vocab.num_verbs(),
        vocab.num_nouns(),
        vocab.context_words.len(),
        vocab.num_tokens(),
    );

    // Affordance matrix, verbs as rows.
    print!("{:>6}", "");
    for n in 0..vocab.num_nouns() {
        print!("{:>5}", vocab.token_name(vocab.noun_token(n)));
    }
    println!();
    for v in 0..vocab.num_verbs() {
        print!("{:>6}", vocab.token_name(vocab.verb_token(v)));
        for n in 0..vocab.num_nouns() {
            print!("{:>5}", if vocab.affordable(v, n) { "x" } else { "." });
        }
        println!();
    }
    println!(
        "\n{} affordable compositions out of {}",
        vocab.affordable_pairs().len(),
        vocab.num_verbs() * vocab.num_nouns(),
    );

    let mut episodes = gen_episodes(&world, 200, seed);
    let split = make_split(&mut episodes, vocab, 0.2, 0.15, seed)?;
    println!(
        "\n200 episodes split into {} train / {} test_seen / {} test_new",
        split.train.len(),
        split.test_seen.len(),
        split.test_new.len(),
    );
    let withheld: Vec<String> = split
        .withheld
        .iter()
        .map(|&(v, n)| {
            format!(
                "({} {})",
                vocab.token_name(vocab.verb_token(v)),
                vocab.token_name(vocab.noun_token(n))
            )
        })
        .collect();
    println!("withheld compositions: {}", withheld.join(" "));

    println!("\nsample episodes:");
    for tag in [SplitTag::Train, SplitTag::TestSeen, SplitTag::TestNew] {
        let Some(ep) = episodes.iter().find(|e| e.split == tag) else {
            continue;
        };
        let words: Vec<&str> = ep.tokens.iter().map(|&t| vocab.token_name(t)).collect();
        println!(
            "  #{:<4} {:<9}  \"{}\"  gold = ({} {}), {} regions of dim {}",
            ep.id,
            tag.as_str(),
            words.join(" "),
            vocab.token_name(vocab.verb_token(ep.verb)),
            vocab.token_name(vocab.noun_token(ep.noun)),
            ep.num_regions(),
            cfg.d_vis,
        );
    }
    Ok(())
}
