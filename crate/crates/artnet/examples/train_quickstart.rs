//! End-to-end quickstart: synthesize a tiny world, train the full model for
//! a few epochs, and evaluate both test splits — all through the library API.
//!
//! Artifacts (archived config, per-epoch checkpoint, metrics CSV, retrieval
//! dump) land in a temp directory printed at the end.
//!
//! Run with `cargo run --release --example train_quickstart`.

use artnet::harness::{train_and_eval, HarnessError, RunConfig};
use artnet::world::{gen_episodes, gen_world, make_split, save_episodes, WorldConfig};

fn main() -> Result<(), HarnessError> {
    let dir = std::env::temp_dir().join("artnet-quickstart");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");

    // A small world keeps this example under a minute on one core.
    let world_cfg = WorldConfig {
        verbs: 5,
        nouns: 8,
        context_words: 5,
        d_vis: 12,
        affordance_density: 0.6,
        sigma: 0.1,
    };
    let seed = 11;
    let world = gen_world(&world_cfg, seed).expect("world config is valid");
    let mut episodes = gen_episodes(&world, 600, seed);
    make_split(&mut episodes, &world.vocab, 0.2, 0.15, seed).expect("split fractions are valid");
    let data = dir.join("episodes.jsonl");
    save_episodes(&data, &world.vocab, world_cfg.d_vis, &episodes).expect("write episodes");

    let mut cfg = RunConfig::default();
    cfg.data = data;
    cfg.out_dir = dir.join("runs");
    cfg.seed = seed;
    cfg.epochs = 8;
    cfg.encoder.layers = 1;
    cfg.encoder.hidden = 32;
    cfg.encoder.heads = 2;
    cfg.retrieval.pool_size = 100;
    cfg.retrieval.k = 5;

    println!("training {} for {} epochs...", cfg.variant.as_str(), cfg.epochs);
    let report = train_and_eval(&cfg)?;

    let first = report.epoch_mean_loss.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    println!("loss: {first:.3} (epoch 1) -> {last:.3} (epoch {})", cfg.epochs);
    for outcome in [&report.seen, &report.new] {
        println!(
            "{:<9}: {} episodes, top1 {:.3}, top5 {:.3}, affordance {:.3}",
            outcome.split.as_str(),
            outcome.episodes,
            outcome.top1,
            outcome.top5,
            outcome.affordance,
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("artifacts in {}", report.run_dir.display());
    Ok(())
}
