//! The masked-acquisition training loop and the runs built on top of it.
//!
//! Gradients are batch-exact despite per-episode graphs: the masking pass
//! runs first so the cross-entropy and triplet term counts of the whole
//! batch are known, each episode's loss is pre-scaled by them, and the
//! accumulated gradient equals the one a single batch graph would give.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use crate::amm::{retrieve_topk, sample_pool, EpisodeKey};
use crate::backbone::{apply_mask_policy, MaskMode, MaskedSequence};
use crate::model::Model;
use crate::objectives::{AdamW, GradAccumulator};
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::{Graph, Tensor};
use crate::world::{load_episodes, Episode, SplitTag, Vocab};

use super::eval::{evaluate, EvalOutcome};
use super::{
    io_err, prepare_run_dir, save_checkpoint, HarnessError, MetricsWriter, RunConfig,
};

/// Everything a finished training run hands to evaluation.
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub d_vis: usize,
    /// Training episodes actually used (after fraction subsampling); these
    /// are also the only episodes evaluation pools may draw from.
    pub train: Vec<Episode>,
    pub test_seen: Vec<Episode>,
    pub test_new: Vec<Episode>,
    /// Mean optimizer-step loss per epoch.
    pub epoch_mean_loss: Vec<f64>,
    pub warnings: Vec<String>,
    pub(super) metrics: MetricsWriter,
}

/// Summary of one full train + evaluate cycle.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub fraction: f64,
    pub epoch_mean_loss: Vec<f64>,
    pub seen: EvalOutcome,
    pub new: EvalOutcome,
    pub warnings: Vec<String>,
}

/// Splits episodes into train / test_seen / test_new piles.
fn partition(episodes: Vec<Episode>) -> (Vec<Episode>, Vec<Episode>, Vec<Episode>) {
    let mut train = Vec::new();
    let mut seen = Vec::new();
    let mut new = Vec::new();
    for ep in episodes {
        match ep.split {
            SplitTag::Train => train.push(ep),
            SplitTag::TestSeen => seen.push(ep),
            SplitTag::TestNew => new.push(ep),
        }
    }
    (train, seen, new)
}

/// Keeps `fraction` of the training set (seeded, order-preserving) and
/// reports every vocabulary word the cut left unrepresented.
fn subsample(
    train: Vec<Episode>,
    fraction: f64,
    seed: u64,
    vocab: &Vocab,
    warnings: &mut Vec<String>,
) -> Vec<Episode> {
    if fraction >= 1.0 {
        return train;
    }
    let keep = ((train.len() as f64 * fraction).round() as usize).max(1);
    let mut rng = seeds::subsample_rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, train.len(), keep).into_vec();
    picked.sort_unstable();
    let kept: Vec<Episode> = {
        let mut train = train;
        let mut out = Vec::with_capacity(keep);
        // Drain in ascending index order; offsets shift as we remove.
        for (removed, idx) in picked.into_iter().enumerate() {
            out.push(train.remove(idx - removed));
        }
        out
    };
    let specials = vocab.special_tokens.len();
    let mut present = vec![false; vocab.num_tokens()];
    for ep in &kept {
        for &t in &ep.tokens {
            present[t] = true;
        }
    }
    for (token, seen) in present.iter().enumerate().skip(specials) {
        if !seen {
            warnings.push(format!(
                "fraction {fraction} leaves word \"{}\" unrepresented in training",
                vocab.token_name(token)
            ));
        }
    }
    kept
}

/// Longest token layout the encoder must fit.
fn longest_layout(model: &Model, episodes: &[&Vec<Episode>]) -> usize {
    episodes
        .iter()
        .flat_map(|pile| pile.iter())
        .map(|ep| model.layout(ep).len())
        .max()
        .unwrap_or(0)
}

struct MaskedTarget {
    /// Index into the training set.
    index: usize,
    seq: MaskedSequence,
    /// Indices of retrieved references, empty for the baselines.
    refs: Vec<usize>,
}

/// Trains per the config; creates the run directory (resolved config,
/// per-step metrics rows, a checkpoint per epoch) only after the config
/// and dataset have fully validated. A non-finite loss aborts the run and
/// leaves the previous epoch's checkpoint in place.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (vocab, d_vis, episodes) = load_episodes(&cfg.data)?;
    let (train_all, test_seen, test_new) = partition(episodes);
    if train_all.is_empty() {
        return Err(HarnessError::Config(
            "dataset holds no training episodes".into(),
        ));
    }
    let mut warnings = Vec::new();
    let train = subsample(train_all, cfg.fraction, cfg.seed, &vocab, &mut warnings);

    let model_cfg = cfg.model_config(vocab.num_tokens(), d_vis);
    let uses_analogy = cfg.variant.uses_analogy();
    if uses_analogy && train.len() < 2 {
        return Err(HarnessError::Config(
            "analogical retrieval needs at least 2 training episodes".into(),
        ));
    }
    let mut store = ParamStore::new();
    let mut init = seeds::init_rng(cfg.seed);
    let model = Model::new(model_cfg, &mut store, &mut init)?;
    let needed = longest_layout(&model, &[&train, &test_seen, &test_new]);
    if needed > cfg.encoder.max_positions {
        return Err(HarnessError::Config(format!(
            "encoder: max_positions {} but the longest episode layout needs {needed}",
            cfg.encoder.max_positions
        )));
    }
    let mut optimizer = AdamW::new(cfg.optimizer.config(), &store);

    // Everything fallible-by-configuration is behind us; now touch disk.
    let run_dir = prepare_run_dir(cfg)?;
    let mut metrics = MetricsWriter::create(&run_dir, cfg)?;

    // Reference keys are mask-independent, so one pass serves every epoch.
    let ref_keys: Vec<EpisodeKey> = if uses_analogy {
        train
            .iter()
            .map(|ep| EpisodeKey::for_reference(ep, &vocab, cfg.retrieval.include_whole_image))
            .collect()
    } else {
        Vec::new()
    };

    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut seeds::shuffle_rng(cfg.seed, epoch as u64));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;

        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Masking pass: fix targets, pools and references for the batch.
            let mut targets = Vec::with_capacity(batch.len());
            for &index in batch {
                let ep = &train[index];
                assert!(
                    !matches!(ep.split, SplitTag::TestNew),
                    "withheld composition leaked into a training batch"
                );
                let layout = model.layout(ep);
                let mut mask_rng = seeds::masking_rng(cfg.seed, epoch as u64, ep.id);
                let seq =
                    apply_mask_policy(&layout, MaskMode::Training, &vocab, &mut mask_rng)?;
                if seq.text_targets.is_empty() && seq.visual_targets.is_empty() {
                    continue;
                }
                let refs = if uses_analogy {
                    let mut pool_rng = seeds::pool_rng(cfg.seed, epoch as u64, ep.id);
                    let pool = sample_pool(
                        train.len(),
                        Some(index),
                        cfg.retrieval.pool_size,
                        &mut pool_rng,
                    );
                    let target_key = EpisodeKey::for_masked_target(
                        &seq,
                        &vocab,
                        cfg.retrieval.include_whole_image,
                    );
                    let candidates: Vec<(u64, &EpisodeKey)> = pool
                        .iter()
                        .map(|&i| (train[i].id, &ref_keys[i]))
                        .collect();
                    let k = cfg.retrieval.k.min(candidates.len());
                    retrieve_topk(&target_key, &candidates, k)?
                        .into_iter()
                        .map(|r| pool[r.index])
                        .collect()
                } else {
                    Vec::new()
                };
                targets.push(MaskedTarget { index, seq, refs });
            }

            let total_anchors: usize = targets.iter().map(|t| t.seq.visual_targets.len()).sum();
            let negatives_on = total_anchors >= 2 && cfg.loss.negatives > 0;
            targets.retain(|t| {
                !t.seq.text_targets.is_empty() || (negatives_on && !t.seq.visual_targets.is_empty())
            });
            if targets.is_empty() {
                continue;
            }
            let c_ce: usize = targets.iter().map(|t| t.seq.text_targets.len()).sum();
            let c_tr = if negatives_on { total_anchors } else { 0 };
            let ce_scale = if c_ce > 0 { 1.0 / c_ce as f64 } else { 0.0 };
            let triplet_scale = if c_tr > 0 { 1.0 / c_tr as f64 } else { 0.0 };
            if c_ce == 0 && c_tr == 0 {
                continue;
            }

            // Each anchor's negatives come from the other masked visual
            // tokens of the batch, in deterministic batch order.
            let positives: Vec<&Vec<f64>> = targets
                .iter()
                .flat_map(|t| t.seq.visual_targets.iter().map(|(_, v)| v))
                .collect();
            let mut negatives: Vec<Vec<Vec<Tensor>>> = Vec::with_capacity(targets.len());
            if negatives_on {
                let mut neg_rng =
                    seeds::negatives_rng(cfg.seed, epoch as u64, batch_index as u64);
                let mut flat = 0usize;
                for t in &targets {
                    let mut per_episode = Vec::with_capacity(t.seq.visual_targets.len());
                    for _ in &t.seq.visual_targets {
                        let others: Vec<usize> =
                            (0..positives.len()).filter(|&j| j != flat).collect();
                        let want = cfg.loss.negatives.min(others.len());
                        let picked =
                            rand::seq::index::sample(&mut neg_rng, others.len(), want);
                        per_episode.push(
                            picked
                                .into_iter()
                                .map(|j| Tensor::vector(positives[others[j]].clone()))
                                .collect(),
                        );
                        flat += 1;
                    }
                    negatives.push(per_episode);
                }
            } else {
                for t in &targets {
                    negatives.push(vec![Vec::new(); t.seq.visual_targets.len()]);
                }
            }

            // Forward/backward pass, one graph per episode.
            let mut acc = GradAccumulator::new(&store);
            let mut batch_loss = 0.0;
            for (t, negs) in targets.iter().zip(&negatives) {
                let g = Graph::new();
                let bind = store.bind(&g);
                let refs: Vec<&Episode> = t.refs.iter().map(|&i| &train[i]).collect();
                let mut drop_rng =
                    seeds::dropout_rng(cfg.seed, epoch as u64, train[t.index].id);
                let out = model.episode_loss(
                    &g,
                    &bind,
                    &t.seq,
                    &refs,
                    negs,
                    ce_scale,
                    triplet_scale,
                    Some(&mut drop_rng),
                )?;
                let value = g.value(out.loss).item();
                if !value.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        step: batch_index,
                    });
                }
                batch_loss += value;
                g.backward(out.loss)?;
                acc.add(&bind.gradients(&g));
            }
            optimizer.step(&mut store, &acc.take())?;
            metrics.train_row(epoch, batch_loss)?;
            epoch_loss += batch_loss;
            epoch_steps += 1;
        }

        epoch_mean_loss.push(if epoch_steps > 0 {
            epoch_loss / epoch_steps as f64
        } else {
            f64::NAN
        });
        save_checkpoint(&store, &run_dir)?;
    }

    Ok(TrainOutcome {
        run_dir,
        model,
        store,
        vocab,
        d_vis,
        train,
        test_seen,
        test_new,
        epoch_mean_loss,
        warnings,
        metrics,
    })
}

/// Trains, evaluates both test splits, and finishes the run directory:
/// eval rows appended to the metrics CSV, retrieval diagnostics written as
/// JSON lines, warnings (if any) to their own file.
pub fn train_and_eval(cfg: &RunConfig) -> Result<MetricsReport, HarnessError> {
    let mut outcome = train(cfg)?;
    let seen = evaluate(
        &outcome.model,
        &outcome.store,
        &outcome.vocab,
        &outcome.train,
        &outcome.test_seen,
        SplitTag::TestSeen,
        &cfg.retrieval,
        cfg.seed,
    )?;
    let new = evaluate(
        &outcome.model,
        &outcome.store,
        &outcome.vocab,
        &outcome.train,
        &outcome.test_new,
        SplitTag::TestNew,
        &cfg.retrieval,
        cfg.seed,
    )?;
    outcome
        .metrics
        .eval_row(SplitTag::TestSeen, cfg.epochs, seen.top1, seen.top5, seen.affordance)?;
    outcome
        .metrics
        .eval_row(SplitTag::TestNew, cfg.epochs, new.top1, new.top5, new.affordance)?;
    outcome.metrics.finish()?;

    let diag = outcome.run_dir.join("retrieval.jsonl");
    let mut w = fs::File::create(&diag).map_err(io_err(&diag))?;
    for record in seen.records.iter().chain(&new.records) {
        serde_json::to_writer(&mut w, record).expect("record serialization");
        w.write_all(b"\n").map_err(io_err(&diag))?;
    }
    if !outcome.warnings.is_empty() {
        let path = outcome.run_dir.join("warnings.log");
        fs::write(&path, outcome.warnings.join("\n") + "\n").map_err(io_err(&path))?;
    }

    Ok(MetricsReport {
        run_id: cfg.run_id(),
        run_dir: outcome.run_dir,
        seed: cfg.seed,
        fraction: cfg.fraction,
        epoch_mean_loss: outcome.epoch_mean_loss,
        seen,
        new,
        warnings: outcome.warnings,
    })
}

/// One full train + evaluate cycle per fraction, same seed handling
/// throughout; each cycle gets its own run directory.
pub fn sweep(base: &RunConfig, fractions: &[f64]) -> Result<Vec<MetricsReport>, HarnessError> {
    let mut reports = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut cfg = base.clone();
        cfg.fraction = fraction;
        reports.push(train_and_eval(&cfg)?);
    }
    Ok(reports)
}
