//! Episode files: one JSON header line, then one JSON line per episode.
//!
//! The header pins the format version, region dimension and full
//! vocabulary, so a file is self-describing and externally produced
//! features can be ingested through the same path. Values are `f64` and
//! survive a round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Episode, Vocab};

/// Episode file format version written and required back.
pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing header line in {path}")]
    MissingHeader { path: String },
    #[error("bad header in {path}: {source}")]
    BadHeader {
        path: String,
        source: serde_json::Error,
    },
    #[error("episode file format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("record {index}: {source}")]
    BadRecord {
        index: usize,
        source: serde_json::Error,
    },
    #[error("record {index}: field {field}: {detail}")]
    BadField {
        index: usize,
        field: &'static str,
        detail: String,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    d_vis: usize,
    #[serde(flatten)]
    vocab: Vocab,
}

/// Writes header + episodes; overwrites `path`.
pub fn save_episodes(
    path: &Path,
    vocab: &Vocab,
    d_vis: usize,
    episodes: &[Episode],
) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: EPISODE_FORMAT_VERSION,
        d_vis,
        vocab: vocab.clone(),
    };
    serde_json::to_writer(&mut w, &header).expect("header serialization");
    w.write_all(b"\n").map_err(io_err)?;
    for ep in episodes {
        serde_json::to_writer(&mut w, ep).expect("episode serialization");
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads and validates an episode file. Every record is checked against the
/// header (region dimension, token range, gold indices, affordance) and
/// errors name the record index and field.
pub fn load_episodes(path: &Path) -> Result<(Vocab, usize, Vec<Episode>), DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(source)) => {
            return Err(DataError::Io {
                path: path.display().to_string(),
                source,
            })
        }
        None => {
            return Err(DataError::MissingHeader {
                path: path.display().to_string(),
            })
        }
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|source| DataError::BadHeader {
            path: path.display().to_string(),
            source,
        })?;
    if header.format_version != EPISODE_FORMAT_VERSION {
        return Err(DataError::Version {
            found: header.format_version,
            expected: EPISODE_FORMAT_VERSION,
        });
    }

    let vocab = header.vocab;
    let mut episodes = Vec::new();
    for (index, line) in lines.enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode =
            serde_json::from_str(&line).map_err(|source| DataError::BadRecord { index, source })?;
        validate_episode(&ep, &vocab, header.d_vis, index)?;
        episodes.push(ep);
    }
    Ok((vocab, header.d_vis, episodes))
}

fn validate_episode(
    ep: &Episode,
    vocab: &Vocab,
    d_vis: usize,
    index: usize,
) -> Result<(), DataError> {
    let bad = |field: &'static str, detail: String| DataError::BadField {
        index,
        field,
        detail,
    };
    if ep.regions.is_empty() {
        return Err(bad("regions", "no regions".into()));
    }
    for (r, reg) in ep.regions.iter().enumerate() {
        if reg.len() != d_vis {
            return Err(bad(
                "regions",
                format!("region {r} has dim {}, header says {d_vis}", reg.len()),
            ));
        }
        if reg.iter().any(|v| !v.is_finite()) {
            return Err(bad("regions", format!("region {r} holds non-finite value")));
        }
    }
    if ep.tokens.len() < 2 {
        return Err(bad(
            "tokens",
            format!("sentence length {} below 2", ep.tokens.len()),
        ));
    }
    for &t in &ep.tokens {
        if t >= vocab.num_tokens() {
            return Err(bad(
                "tokens",
                format!("token id {t} outside vocabulary of {}", vocab.num_tokens()),
            ));
        }
    }
    if ep.verb >= vocab.num_verbs() {
        return Err(bad("verb", format!("verb index {} of {}", ep.verb, vocab.num_verbs())));
    }
    if ep.noun >= vocab.num_nouns() {
        return Err(bad("noun", format!("noun index {} of {}", ep.noun, vocab.num_nouns())));
    }
    if !vocab.affordable(ep.verb, ep.noun) {
        return Err(bad(
            "verb",
            format!("composition ({}, {}) is not affordable", ep.verb, ep.noun),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_episodes, gen_world, make_split, WorldConfig};

    fn sample() -> (crate::world::World, Vec<Episode>) {
        let cfg = WorldConfig {
            verbs: 4,
            nouns: 5,
            context_words: 3,
            d_vis: 8,
            affordance_density: 0.7,
            sigma: 0.1,
        };
        let w = gen_world(&cfg, 1).unwrap();
        let mut eps = gen_episodes(&w, 100, 1);
        make_split(&mut eps, &w.vocab, 0.2, 0.1, 1).unwrap();
        (w, eps)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (w, eps) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        let (vocab, d_vis, loaded) = load_episodes(&path).unwrap();
        assert_eq!(vocab, w.vocab);
        assert_eq!(d_vis, w.d_vis);
        assert_eq!(loaded.len(), eps.len());
        for (a, b) in eps.iter().zip(&loaded) {
            assert_eq!(a, b);
            for (ra, rb) in a.regions.iter().zip(&b.regions) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_record_names_index() {
        let (w, eps) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        let mut content = fs::read_to_string(&path).unwrap();
        // Chop the third record (index 2) in half.
        let lines: Vec<&str> = content.lines().collect();
        let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        broken[3] = broken[3][..broken[3].len() / 2].to_string();
        content = broken.join("\n");
        fs::write(&path, content).unwrap();
        match load_episodes(&path) {
            Err(DataError::BadRecord { index: 2, .. }) => {}
            other => panic!("expected BadRecord at 2, got {other:?}"),
        }
    }

    #[test]
    fn region_dim_mismatch_is_rejected_with_field() {
        let (w, mut eps) = sample();
        eps[5].regions[1].push(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        match load_episodes(&path) {
            Err(DataError::BadField {
                index: 5,
                field: "regions",
                ..
            }) => {}
            other => panic!("expected BadField regions at 5, got {other:?}"),
        }
    }

    #[test]
    fn unaffordable_gold_is_rejected() {
        let (w, mut eps) = sample();
        // Force some episode onto a zero cell if one exists.
        let mut target = None;
        'outer: for v in 0..w.vocab.num_verbs() {
            for n in 0..w.vocab.num_nouns() {
                if !w.vocab.affordable(v, n) {
                    target = Some((v, n));
                    break 'outer;
                }
            }
        }
        let Some((v, n)) = target else { return };
        eps[0].verb = v;
        eps[0].noun = n;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        assert!(matches!(
            load_episodes(&path),
            Err(DataError::BadField { index: 0, .. })
        ));
    }

    #[test]
    fn missing_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            load_episodes(&path),
            Err(DataError::MissingHeader { .. })
        ));
    }

    #[test]
    fn wrong_version_is_reported() {
        let (w, eps) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        let content = fs::read_to_string(&path).unwrap();
        let content = content.replacen("\"format_version\":1", "\"format_version\":9", 1);
        fs::write(&path, content).unwrap();
        assert!(matches!(
            load_episodes(&path),
            Err(DataError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let (w, mut eps) = sample();
        eps[7].tokens[0] = w.vocab.num_tokens() + 3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        save_episodes(&path, &w.vocab, w.d_vis, &eps).unwrap();
        match load_episodes(&path) {
            Err(DataError::BadField {
                index: 7,
                field: "tokens",
                ..
            }) => {}
            other => panic!("expected BadField tokens at 7, got {other:?}"),
        }
    }
}
