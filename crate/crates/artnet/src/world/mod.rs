//! Synthetic world of image-sentence episodes.
//!
//! A world is a small vocabulary of verbs, nouns and filler context words, a
//! binary verb-noun affordance matrix, and one unit-norm visual prototype
//! per verb and per noun. Episodes pair a sentence (context words around a
//! verb-noun composition) with a bag of region feature vectors containing a
//! noisy copy of the noun's and verb's prototypes plus distractors. Splits
//! withhold a subset of affordable compositions entirely from training so
//! test_new measures composition, not memorization.

mod io;

pub use io::{load_episodes, save_episodes, DataError};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::tensor::{cosine, Tensor};

/// Token ids 0..5 are reserved, in this order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[IMG]"];
pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const IMG: usize = 4;

/// Maximum cosine similarity allowed between two distinct prototypes.
pub const PROTO_MAX_COS: f64 = 0.8;

/// Region count bounds per episode.
pub const MIN_REGIONS: usize = 3;
pub const MAX_REGIONS: usize = 4;

/// Context words prepended/appended to the composition, each in 0..=2.
const MAX_CTX_SIDE: usize = 2;

const AFFORDANCE_RETRIES: usize = 1000;
const PROTO_RETRIES: usize = 10000;
const WITHHELD_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("need at least 2 verbs and 2 nouns, got {verbs}x{nouns}")]
    TooSmall { verbs: usize, nouns: usize },
    #[error("affordance density {density} must be in (0, 1]")]
    BadDensity { density: f64 },
    #[error(
        "could not sample an affordance matrix without orphan words after {retries} tries \
         (density {density} too low for {verbs}x{nouns})"
    )]
    OrphanedAffordance {
        retries: usize,
        density: f64,
        verbs: usize,
        nouns: usize,
    },
    #[error("could not sample prototype {index} below cosine {max_cos} after {retries} tries")]
    ProtoSeparation {
        index: usize,
        max_cos: f64,
        retries: usize,
    },
    #[error(
        "could not withhold {want} compositions without orphaning a word after {retries} tries"
    )]
    InfeasibleWithholding { want: usize, retries: usize },
    #[error("withheld fraction {0} must be in [0, 1)")]
    BadWithheldFraction(f64),
}

/// Vocabulary and affordance knowledge shared by generation and training;
/// this is exactly what the episode file header carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub context_words: Vec<String>,
    pub special_tokens: Vec<String>,
    /// A[v][n] = 1 when verb v affords noun n.
    pub affordance: Vec<Vec<u8>>,
}

impl Vocab {
    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    /// Total token-id space: specials, verbs, nouns, context words.
    pub fn num_tokens(&self) -> usize {
        self.special_tokens.len() + self.verbs.len() + self.nouns.len() + self.context_words.len()
    }

    pub fn verb_token(&self, v: usize) -> usize {
        self.special_tokens.len() + v
    }

    pub fn noun_token(&self, n: usize) -> usize {
        self.special_tokens.len() + self.verbs.len() + n
    }

    pub fn context_token(&self, c: usize) -> usize {
        self.special_tokens.len() + self.verbs.len() + self.nouns.len() + c
    }

    pub fn kind(&self, token: usize) -> TokenKind {
        let s = self.special_tokens.len();
        let v = self.verbs.len();
        let n = self.nouns.len();
        if token < s {
            TokenKind::Special(token)
        } else if token < s + v {
            TokenKind::Verb(token - s)
        } else if token < s + v + n {
            TokenKind::Noun(token - s - v)
        } else {
            TokenKind::Context(token - s - v - n)
        }
    }

    pub fn affordable(&self, verb: usize, noun: usize) -> bool {
        self.affordance[verb][noun] == 1
    }

    /// All (verb, noun) pairs with A = 1, row-major order.
    pub fn affordable_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for v in 0..self.verbs.len() {
            for n in 0..self.nouns.len() {
                if self.affordance[v][n] == 1 {
                    out.push((v, n));
                }
            }
        }
        out
    }

    pub fn token_name(&self, token: usize) -> &str {
        match self.kind(token) {
            TokenKind::Special(i) => &self.special_tokens[i],
            TokenKind::Verb(v) => &self.verbs[v],
            TokenKind::Noun(n) => &self.nouns[n],
            TokenKind::Context(c) => &self.context_words[c],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(usize),
    Verb(usize),
    Noun(usize),
    Context(usize),
}

/// Full generative world: vocabulary plus the visual prototypes episodes
/// are rendered from. Only the [`Vocab`] part is serialized with episodes.
#[derive(Debug, Clone)]
pub struct World {
    pub vocab: Vocab,
    pub d_vis: usize,
    pub sigma: f64,
    pub noun_protos: Vec<Tensor>,
    pub verb_protos: Vec<Tensor>,
}

/// Knobs for [`gen_world`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub verbs: usize,
    pub nouns: usize,
    pub context_words: usize,
    pub d_vis: usize,
    pub affordance_density: f64,
    pub sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            verbs: 12,
            nouns: 20,
            context_words: 10,
            d_vis: 32,
            affordance_density: 0.5,
            sigma: 0.1,
        }
    }
}

/// Which split an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    TestSeen,
    TestNew,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::TestSeen => "test_seen",
            SplitTag::TestNew => "test_new",
        }
    }
}

/// One image-sentence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub split: SplitTag,
    /// R region feature vectors, each of length d_vis.
    pub regions: Vec<Vec<f64>>,
    /// Sentence as global token ids: context words around verb then noun.
    pub tokens: Vec<usize>,
    /// Gold composition as vocabulary-local indices.
    pub verb: usize,
    pub noun: usize,
}

impl Episode {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Regions stacked as an [R, d_vis] matrix.
    pub fn region_matrix(&self) -> Tensor {
        let r = self.regions.len();
        let d = self.regions.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * d);
        for reg in &self.regions {
            data.extend_from_slice(reg);
        }
        Tensor::matrix(r, d, data)
    }

    /// Mean of the region vectors (the whole-image feature).
    pub fn mean_region(&self) -> Vec<f64> {
        let d = self.regions[0].len();
        let mut out = vec![0.0; d];
        for reg in &self.regions {
            for (o, &x) in out.iter_mut().zip(reg) {
                *o += x;
            }
        }
        let r = self.regions.len() as f64;
        for o in out.iter_mut() {
            *o /= r;
        }
        out
    }
}

/// Where the gold regions ended up after shuffling, for diagnostics and
/// learnability checks; not part of the episode file format.
#[derive(Debug, Clone, Copy)]
pub struct RegionProvenance {
    pub noun_region: usize,
    pub verb_region: usize,
}

/// Split membership by episode id plus the withheld composition set.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<u64>,
    pub test_seen: Vec<u64>,
    pub test_new: Vec<u64>,
    pub withheld: Vec<(usize, usize)>,
}

/// Builds vocabulary, affordances and prototypes; pure in (config, seed).
pub fn gen_world(cfg: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    if cfg.verbs < 2 || cfg.nouns < 2 {
        return Err(WorldError::TooSmall {
            verbs: cfg.verbs,
            nouns: cfg.nouns,
        });
    }
    if !(cfg.affordance_density > 0.0 && cfg.affordance_density <= 1.0) {
        return Err(WorldError::BadDensity {
            density: cfg.affordance_density,
        });
    }
    let mut rng = seeds::world_rng(seed);

    let affordance = sample_affordance(cfg, &mut rng)?;

    // One shared prototype pool so verb and noun prototypes are mutually
    // separated as well.
    let mut protos: Vec<Tensor> = Vec::with_capacity(cfg.verbs + cfg.nouns);
    for index in 0..cfg.verbs + cfg.nouns {
        let mut placed = false;
        for _ in 0..PROTO_RETRIES {
            let cand = random_unit(cfg.d_vis, &mut rng);
            let ok = protos
                .iter()
                .all(|p| cosine(p.data(), cand.data()) < PROTO_MAX_COS);
            if ok {
                protos.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::ProtoSeparation {
                index,
                max_cos: PROTO_MAX_COS,
                retries: PROTO_RETRIES,
            });
        }
    }
    let noun_protos = protos.split_off(cfg.verbs);
    let verb_protos = protos;

    let vocab = Vocab {
        verbs: (0..cfg.verbs).map(|i| format!("v{i:02}")).collect(),
        nouns: (0..cfg.nouns).map(|i| format!("n{i:02}")).collect(),
        context_words: (0..cfg.context_words).map(|i| format!("c{i:02}")).collect(),
        special_tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        affordance,
    };
    Ok(World {
        vocab,
        d_vis: cfg.d_vis,
        sigma: cfg.sigma,
        noun_protos,
        verb_protos,
    })
}

fn sample_affordance(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u8>>, WorldError> {
    for _ in 0..AFFORDANCE_RETRIES {
        let a: Vec<Vec<u8>> = (0..cfg.verbs)
            .map(|_| {
                (0..cfg.nouns)
                    .map(|_| u8::from(rng.gen_bool(cfg.affordance_density)))
                    .collect()
            })
            .collect();
        let rows_ok = a.iter().all(|row| row.iter().any(|&x| x == 1));
        let cols_ok = (0..cfg.nouns).all(|n| a.iter().any(|row| row[n] == 1));
        if rows_ok && cols_ok {
            return Ok(a);
        }
    }
    Err(WorldError::OrphanedAffordance {
        retries: AFFORDANCE_RETRIES,
        density: cfg.affordance_density,
        verbs: cfg.verbs,
        nouns: cfg.nouns,
    })
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::vector(data).normalized()
}

/// Generates `count` episodes, each from its own derived stream so content
/// is independent of generation order. All episodes start tagged `Train`;
/// [`make_split`] assigns the final tags.
pub fn gen_episodes(world: &World, count: usize, seed: u64) -> Vec<Episode> {
    gen_episodes_with_provenance(world, count, seed).0
}

/// Same as [`gen_episodes`] but also reports which region carries the gold
/// noun and verb prototype.
pub fn gen_episodes_with_provenance(
    world: &World,
    count: usize,
    seed: u64,
) -> (Vec<Episode>, Vec<RegionProvenance>) {
    let pairs = world.vocab.affordable_pairs();
    assert!(!pairs.is_empty(), "world has no affordable compositions");
    let mut episodes = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seeds::episode_rng(seed, i as u64);
        let (verb, noun) = pairs[rng.gen_range(0..pairs.len())];
        let r = rng.gen_range(MIN_REGIONS..=MAX_REGIONS);

        // Gold regions first, then distractors drawn from the full
        // prototype pool, then a shuffle that we track.
        let mut regions: Vec<Vec<f64>> = Vec::with_capacity(r);
        regions.push(noisy(&world.noun_protos[noun], world.sigma, &mut rng));
        regions.push(noisy(&world.verb_protos[verb], world.sigma, &mut rng));
        let total_protos = world.verb_protos.len() + world.noun_protos.len();
        for _ in 2..r {
            let pick = rng.gen_range(0..total_protos);
            let proto = if pick < world.verb_protos.len() {
                &world.verb_protos[pick]
            } else {
                &world.noun_protos[pick - world.verb_protos.len()]
            };
            regions.push(noisy(proto, world.sigma, &mut rng));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&j| regions[j].clone()).collect();
        let pos_of = |orig: usize| order.iter().position(|&j| j == orig).unwrap();
        provenance.push(RegionProvenance {
            noun_region: pos_of(0),
            verb_region: pos_of(1),
        });

        let prefix = rng.gen_range(0..=MAX_CTX_SIDE);
        let suffix = rng.gen_range(0..=MAX_CTX_SIDE);
        let ctx_count = world.vocab.context_words.len();
        let mut tokens = Vec::with_capacity(prefix + suffix + 2);
        for _ in 0..prefix {
            tokens.push(world.vocab.context_token(rng.gen_range(0..ctx_count)));
        }
        tokens.push(world.vocab.verb_token(verb));
        tokens.push(world.vocab.noun_token(noun));
        for _ in 0..suffix {
            tokens.push(world.vocab.context_token(rng.gen_range(0..ctx_count)));
        }

        episodes.push(Episode {
            id: i as u64,
            split: SplitTag::Train,
            regions: shuffled,
            tokens,
            verb,
            noun,
        });
    }
    (episodes, provenance)
}

fn noisy(proto: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return proto.data().to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be non-negative");
    let data: Vec<f64> = proto.data().iter().map(|&x| x + normal.sample(rng)).collect();
    Tensor::vector(data).normalized().data().to_vec()
}

/// Tags every episode and returns the split. Withheld compositions send all
/// their episodes to test_new; test_seen is sampled from the rest while
/// keeping at least one training episode per surviving composition.
pub fn make_split(
    episodes: &mut [Episode],
    vocab: &Vocab,
    withheld_fraction: f64,
    test_seen_fraction: f64,
    seed: u64,
) -> Result<Split, WorldError> {
    if !(0.0..1.0).contains(&withheld_fraction) {
        return Err(WorldError::BadWithheldFraction(withheld_fraction));
    }
    let mut rng = seeds::split_rng(seed);
    let pairs = vocab.affordable_pairs();
    let want = (withheld_fraction * pairs.len() as f64).round() as usize;

    let withheld = pick_withheld(&pairs, want, vocab, &mut rng)?;
    let is_withheld =
        |v: usize, n: usize| withheld.iter().any(|&(wv, wn)| wv == v && wn == n);

    // Composition-keyed counts of episodes still in train.
    let mut train_count: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::new();
    for ep in episodes.iter_mut() {
        if is_withheld(ep.verb, ep.noun) {
            ep.split = SplitTag::TestNew;
        } else {
            ep.split = SplitTag::Train;
            *train_count.entry((ep.verb, ep.noun)).or_insert(0) += 1;
        }
    }

    // Move a sample of train episodes to test_seen, never draining a
    // composition completely.
    let mut train_idx: Vec<usize> = episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == SplitTag::Train)
        .map(|(i, _)| i)
        .collect();
    let target = (test_seen_fraction * train_idx.len() as f64).round() as usize;
    train_idx.shuffle(&mut rng);
    let mut moved = 0;
    for &i in &train_idx {
        if moved >= target {
            break;
        }
        let key = (episodes[i].verb, episodes[i].noun);
        let cnt = train_count.get_mut(&key).expect("counted above");
        if *cnt > 1 {
            *cnt -= 1;
            episodes[i].split = SplitTag::TestSeen;
            moved += 1;
        }
    }

    let mut split = Split {
        train: Vec::new(),
        test_seen: Vec::new(),
        test_new: Vec::new(),
        withheld,
    };
    for ep in episodes.iter() {
        match ep.split {
            SplitTag::Train => split.train.push(ep.id),
            SplitTag::TestSeen => split.test_seen.push(ep.id),
            SplitTag::TestNew => split.test_new.push(ep.id),
        }
    }
    Ok(split)
}

/// Chooses `want` pairs to withhold such that every verb and noun keeps at
/// least one affordable pair in training.
fn pick_withheld(
    pairs: &[(usize, usize)],
    want: usize,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, WorldError> {
    if want == 0 {
        return Ok(Vec::new());
    }
    for _ in 0..WITHHELD_RETRIES {
        let mut shuffled = pairs.to_vec();
        shuffled.shuffle(rng);
        let mut verb_left = vec![0usize; vocab.num_verbs()];
        let mut noun_left = vec![0usize; vocab.num_nouns()];
        for &(v, n) in pairs {
            verb_left[v] += 1;
            noun_left[n] += 1;
        }
        let mut picked = Vec::with_capacity(want);
        for &(v, n) in &shuffled {
            if picked.len() == want {
                break;
            }
            if verb_left[v] > 1 && noun_left[n] > 1 {
                verb_left[v] -= 1;
                noun_left[n] -= 1;
                picked.push((v, n));
            }
        }
        if picked.len() == want {
            picked.sort_unstable();
            return Ok(picked);
        }
    }
    Err(WorldError::InfeasibleWithholding {
        want,
        retries: WITHHELD_RETRIES,
    })
}
