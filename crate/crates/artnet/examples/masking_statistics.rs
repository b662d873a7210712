//! Empirically measures the masking policy against its configured rates.
//!
//! Words are selected at rate 1/3 and then 80/10/10 split between the mask
//! token, a random word, and staying unchanged; regions are zeroed at rate
//! 1/6. This example counts what actually happens over many episodes.
//!
//! Run with `cargo run --example masking_statistics`.

use artnet::backbone::{apply_mask_policy, tokenize, MaskMode, Modality, Payload};
use artnet::world::{gen_episodes, gen_world, WorldConfig, MASK};
use artnet::seeds;

fn main() {
    let world = gen_world(&WorldConfig::default(), 7).expect("default world is valid");
    let episodes = gen_episodes(&world, 4000, 7);

    let mut words = 0usize;
    let mut selected = 0usize;
    let mut to_mask = 0usize;
    let mut to_random = 0usize;
    let mut unchanged = 0usize;
    let mut regions = 0usize;
    let mut zeroed = 0usize;

    for (i, ep) in episodes.iter().enumerate() {
        let tokens = tokenize(ep);
        let mut rng = seeds::masking_rng(7, 1, i as u64);
        let masked =
            apply_mask_policy(&tokens, MaskMode::Training, &world.vocab, &mut rng).unwrap();
        words += ep.tokens.len();
        regions += ep.num_regions() + 1; // +1 whole-image token
        selected += masked.text_targets.len();
        zeroed += masked.visual_targets.len();
        for &(pos, original) in &masked.text_targets {
            match masked.tokens[pos] {
                ref t if t.kind == Modality::Textual => match t.payload {
                    Payload::Word(w) if w == MASK => to_mask += 1,
                    Payload::Word(w) if w == original => unchanged += 1,
                    Payload::Word(_) => to_random += 1,
                    Payload::Region(_) => unreachable!("text target holds a region"),
                },
                _ => unreachable!("text target outside the sentence"),
            }
        }
    }

    let pct = |a: usize, b: usize| 100.0 * a as f64 / b as f64;
    println!("{} episodes, {} sentence words, {} region tokens", episodes.len(), words, regions);
    println!(
        "words selected:   {:>7} / {:<7} = {:5.2}%  (configured 33.33%)",
        selected, words, pct(selected, words)
    );
    println!(
        "  -> [MASK]:      {:>7} / {:<7} = {:5.2}%  (configured 80%)",
        to_mask, selected, pct(to_mask, selected)
    );
    println!(
        "  -> random word: {:>7} / {:<7} = {:5.2}%  (configured 10%)",
        to_random, selected, pct(to_random, selected)
    );
    println!(
        "  -> unchanged:   {:>7} / {:<7} = {:5.2}%  (configured 10%)",
        unchanged, selected, pct(unchanged, selected)
    );
    println!(
        "regions zeroed:   {:>7} / {:<7} = {:5.2}%  (configured 16.67%)",
        zeroed, regions, pct(zeroed, regions)
    );
}
