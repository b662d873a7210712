//! Evaluation protocol: both-word Top-1/Top-5 and affordance accuracy.
//!
//! Each test episode has its gold verb-noun composition masked, references
//! are retrieved from training episodes only, and the two words are
//! predicted independently over the full token space. A composition counts
//! as correct only when both words are correct; a Top-1 pair counts as
//! affordable only when the verb slot holds a verb, the noun slot holds a
//! noun, and the world's affordance matrix allows the pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amm::{retrieve_topk, sample_pool, AmmConfig, EpisodeKey};
use crate::arn::RefTrace;
use crate::backbone::{apply_mask_policy, MaskMode};
use crate::cce::top_n;
use crate::model::Model;
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::Graph;
use crate::world::{load_episodes, Episode, SplitTag, TokenKind, Vocab};

use super::{HarnessError, RunConfig};

/// Aggregate accuracy over one split.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub split: SplitTag,
    pub episodes: usize,
    /// Both-word Top-1 accuracy.
    pub top1: f64,
    /// Both-word Top-5 accuracy.
    pub top5: f64,
    /// Fraction of Top-1 pairs the affordance matrix allows.
    pub affordance: f64,
    pub verb_top1: f64,
    pub noun_top1: f64,
    pub records: Vec<RetrievalRecord>,
}

/// Retrieval diagnostics for one evaluated episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub target: u64,
    pub split: SplitTag,
    /// Retrieved reference episode ids, best first.
    pub references: Vec<u64>,
    /// Relevance score per reference, parallel to `references`.
    pub scores: Vec<f64>,
    /// Pair attention weights per reference, parallel to `references`.
    pub traces: Vec<RefTrace>,
}

/// Per-episode scoring outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeScore {
    pub verb_top1: bool,
    pub noun_top1: bool,
    pub both_top1: bool,
    pub both_top5: bool,
    pub affordable: bool,
}

/// Scores one episode from its two logit vectors. `verb_token` and
/// `noun_token` are the gold global token ids.
pub fn score_episode(
    vocab: &Vocab,
    verb_token: usize,
    noun_token: usize,
    verb_logits: &[f64],
    noun_logits: &[f64],
) -> EpisodeScore {
    let verb_top = top_n(verb_logits, 5);
    let noun_top = top_n(noun_logits, 5);
    let verb_top1 = verb_top[0] == verb_token;
    let noun_top1 = noun_top[0] == noun_token;
    EpisodeScore {
        verb_top1,
        noun_top1,
        both_top1: verb_top1 && noun_top1,
        both_top5: verb_top.contains(&verb_token) && noun_top.contains(&noun_token),
        affordable: pair_affordable(vocab, verb_top[0], noun_top[0]),
    }
}

fn pair_affordable(vocab: &Vocab, verb_slot: usize, noun_slot: usize) -> bool {
    match (vocab.kind(verb_slot), vocab.kind(noun_slot)) {
        (TokenKind::Verb(v), TokenKind::Noun(n)) => vocab.affordable(v, n),
        // A type-mismatched composition is unaffordable by definition.
        _ => false,
    }
}

/// Fraction of Top-1 (verb-slot token, noun-slot token) pairs that are
/// affordable; 0 for an empty prediction list.
pub fn affordance_accuracy(vocab: &Vocab, predictions: &[(usize, usize)]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .filter(|&&(v, n)| pair_affordable(vocab, v, n))
        .count();
    hits as f64 / predictions.len() as f64
}

fn split_stream(split: SplitTag) -> u64 {
    match split {
        SplitTag::Train => 0,
        SplitTag::TestSeen => 1,
        SplitTag::TestNew => 2,
    }
}

/// Evaluates frozen parameters on `targets`. Reference pools draw from
/// `train_refs` only; the baselines skip retrieval entirely.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocab,
    train_refs: &[Episode],
    targets: &[Episode],
    split: SplitTag,
    retrieval: &AmmConfig,
    seed: u64,
) -> Result<EvalOutcome, HarnessError> {
    let uses_analogy = model.config().variant.uses_analogy();
    let ref_keys: Vec<EpisodeKey> = if uses_analogy {
        train_refs
            .iter()
            .map(|ep| EpisodeKey::for_reference(ep, vocab, retrieval.include_whole_image))
            .collect()
    } else {
        Vec::new()
    };

    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut verb1 = 0usize;
    let mut noun1 = 0usize;
    let mut affordable = 0usize;
    let mut records = Vec::new();

    for ep in targets {
        let verb_token = vocab.verb_token(ep.verb);
        let noun_token = vocab.noun_token(ep.noun);
        let layout = model.layout(ep);
        let mut rng = seeds::eval_pool_rng(seed, split_stream(split), ep.id);
        let seq = apply_mask_policy(
            &layout,
            MaskMode::TestComposition {
                verb_token,
                noun_token,
            },
            vocab,
            &mut rng,
        )?;

        let (ref_indices, scores) = if uses_analogy {
            let pool = sample_pool(train_refs.len(), None, retrieval.pool_size, &mut rng);
            let target_key =
                EpisodeKey::for_masked_target(&seq, vocab, retrieval.include_whole_image);
            let candidates: Vec<(u64, &EpisodeKey)> = pool
                .iter()
                .map(|&i| (train_refs[i].id, &ref_keys[i]))
                .collect();
            let k = retrieval.k.min(candidates.len());
            let ranked = retrieve_topk(&target_key, &candidates, k)?;
            let scores: Vec<f64> = ranked.iter().map(|r| r.score.s_vl).collect();
            let indices: Vec<usize> = ranked.iter().map(|r| pool[r.index]).collect();
            (indices, scores)
        } else {
            (Vec::new(), Vec::new())
        };
        let refs: Vec<&Episode> = ref_indices.iter().map(|&i| &train_refs[i]).collect();

        let g = Graph::new();
        let bind = store.bind(&g);
        let fwd = model.forward(&g, &bind, &seq, &refs, None)?;
        let mut verb_logits = None;
        let mut noun_logits = None;
        for w in &fwd.words {
            let logits = g.value(w.logits);
            match vocab.kind(w.target) {
                TokenKind::Verb(_) => verb_logits = Some(logits),
                TokenKind::Noun(_) => noun_logits = Some(logits),
                _ => {}
            }
        }
        // TestComposition masking guarantees both slots are present.
        let verb_logits = verb_logits.expect("masked verb slot");
        let noun_logits = noun_logits.expect("masked noun slot");
        let score = score_episode(
            vocab,
            verb_token,
            noun_token,
            verb_logits.data(),
            noun_logits.data(),
        );
        hits1 += score.both_top1 as usize;
        hits5 += score.both_top5 as usize;
        verb1 += score.verb_top1 as usize;
        noun1 += score.noun_top1 as usize;
        affordable += score.affordable as usize;

        if uses_analogy {
            records.push(RetrievalRecord {
                target: ep.id,
                split,
                references: refs.iter().map(|r| r.id).collect(),
                scores,
                traces: fwd.traces,
            });
        }
    }

    let n = targets.len();
    let frac = |count: usize| if n > 0 { count as f64 / n as f64 } else { 0.0 };
    Ok(EvalOutcome {
        split,
        episodes: n,
        top1: frac(hits1),
        top5: frac(hits5),
        affordance: frac(affordable),
        verb_top1: frac(verb1),
        noun_top1: frac(noun1),
        records,
    })
}

/// Re-evaluates a finished run from its directory: archived config plus
/// newest checkpoint. Nothing is written; a missing checkpoint fails
/// before any model work. `data` overrides the archived dataset path.
pub fn evaluate_run(
    run_dir: &Path,
    data: Option<&Path>,
) -> Result<(RunConfig, Vec<EvalOutcome>), HarnessError> {
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let checkpoint = run_dir.join("checkpoint.json");
    if !checkpoint.exists() {
        return Err(HarnessError::Io {
            path: checkpoint.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint in run dir"),
        });
    }
    let data_path: PathBuf = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.data.clone());
    let (vocab, d_vis, episodes) = load_episodes(&data_path)?;

    let mut store = ParamStore::new();
    let mut init = seeds::init_rng(cfg.seed);
    let model = Model::new(cfg.model_config(vocab.num_tokens(), d_vis), &mut store, &mut init)?;
    store.load(&checkpoint)?;

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
    let mut outcomes = Vec::new();
    for (targets, split) in [(&seen, SplitTag::TestSeen), (&new, SplitTag::TestNew)] {
        outcomes.push(evaluate(
            &model,
            &store,
            &vocab,
            &train,
            targets,
            split,
            &cfg.retrieval,
            cfg.seed,
        )?);
    }
    Ok((cfg, outcomes))
}

/// Writes outcomes as `eval-report.csv` under the run directory, using the
/// same header as the metrics file. The epoch column carries the configured
/// final epoch (the checkpoint on disk is the last one written).
pub fn write_eval_report(
    run_dir: &Path,
    cfg: &RunConfig,
    outcomes: &[EvalOutcome],
) -> Result<PathBuf, HarnessError> {
    let path = run_dir.join("eval-report.csv");
    let mut out = String::from(super::METRICS_HEADER);
    out.push('\n');
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},\n",
            cfg.run_id(),
            cfg.seed,
            cfg.variant.as_str(),
            o.split.as_str(),
            cfg.fraction,
            o.top1,
            o.top5,
            o.affordance,
            cfg.epochs,
        ));
    }
    std::fs::write(&path, out).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_world, WorldConfig};

    fn world() -> crate::world::World {
        gen_world(
            &WorldConfig {
                verbs: 3,
                nouns: 4,
                context_words: 3,
                d_vis: 6,
                affordance_density: 0.6,
                sigma: 0.1,
            },
            21,
        )
        .unwrap()
    }

    fn one_hot(vocab: &Vocab, token: usize, value: f64) -> Vec<f64> {
        let mut v = vec![0.0; vocab.num_tokens()];
        v[token] = value;
        v
    }

    #[test]
    fn gold_logits_score_perfectly() {
        let w = world();
        let verb = w.vocab.verb_token(1);
        let noun = w.vocab.noun_token(2);
        let s = score_episode(
            &w.vocab,
            verb,
            noun,
            &one_hot(&w.vocab, verb, 3.0),
            &one_hot(&w.vocab, noun, 3.0),
        );
        assert!(s.both_top1 && s.both_top5 && s.verb_top1 && s.noun_top1);
        // Gold compositions are affordable by construction.
        assert!(s.affordable);
    }

    #[test]
    fn top5_catches_a_near_miss_that_top1_rejects() {
        let w = world();
        let verb = w.vocab.verb_token(0);
        let noun = w.vocab.noun_token(0);
        let mut verb_logits = one_hot(&w.vocab, verb, 2.0);
        // Another token outscores gold, but gold stays inside the top 5.
        verb_logits[w.vocab.verb_token(2)] = 5.0;
        let s = score_episode(&w.vocab, verb, noun, &verb_logits, &one_hot(&w.vocab, noun, 2.0));
        assert!(!s.both_top1);
        assert!(s.both_top5);
    }

    #[test]
    fn type_mismatch_counts_as_unaffordable() {
        let w = world();
        let verb = w.vocab.verb_token(0);
        let noun = w.vocab.noun_token(0);
        // A noun wins the verb slot.
        let s = score_episode(
            &w.vocab,
            verb,
            noun,
            &one_hot(&w.vocab, w.vocab.noun_token(1), 4.0),
            &one_hot(&w.vocab, noun, 4.0),
        );
        assert!(!s.affordable);
        assert!(!s.verb_top1);
    }

    #[test]
    fn affordance_accuracy_matches_a_hand_count() {
        let w = world();
        // Find one affordable and one unaffordable (verb, noun) pair.
        let mut yes = None;
        let mut no = None;
        for v in 0..w.vocab.num_verbs() {
            for n in 0..w.vocab.num_nouns() {
                if w.vocab.affordable(v, n) {
                    yes.get_or_insert((v, n));
                } else {
                    no.get_or_insert((v, n));
                }
            }
        }
        let (av, an) = yes.unwrap();
        let (uv, un) = no.unwrap();
        let good = (w.vocab.verb_token(av), w.vocab.noun_token(an));
        let bad = (w.vocab.verb_token(uv), w.vocab.noun_token(un));
        // Noun in the verb slot: type mismatch.
        let mismatch = (w.vocab.noun_token(0), w.vocab.noun_token(an));
        // 7 of 10 affordable.
        let preds = vec![
            good, good, good, good, good, good, good, bad, mismatch, bad,
        ];
        assert_eq!(affordance_accuracy(&w.vocab, &preds), 0.7);
        assert_eq!(affordance_accuracy(&w.vocab, &[]), 0.0);
        assert_eq!(affordance_accuracy(&w.vocab, &[good]), 1.0);
    }

    #[test]
    fn missing_checkpoint_fails_before_touching_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            data: dir.path().join("absent.jsonl"),
            ..RunConfig::default()
        };
        std::fs::write(dir.path().join("config.toml"), cfg.to_toml_string()).unwrap();
        match evaluate_run(dir.path(), None) {
            Err(HarnessError::Io { path, .. }) => assert!(path.contains("checkpoint")),
            other => panic!("expected missing-checkpoint error, got {other:?}"),
        }
    }
}
