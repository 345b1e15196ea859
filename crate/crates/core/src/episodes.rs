//! N-way K~2K-shot episode construction and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, OUTSIDE};
use crate::error::{Error, Result};

const MAX_RETRIES: usize = 100;

/// Class label -> indices of corpus sentences mentioning that class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassIndex {
    pub by_class: BTreeMap<String, Vec<usize>>,
}

impl ClassIndex {
    pub fn classes(&self) -> impl Iterator<Item = &String> {
        self.by_class.keys()
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

pub fn build_class_index(corpus: &Corpus) -> ClassIndex {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        let present: BTreeSet<&String> = s.labels.iter().filter(|l| *l != OUTSIDE).collect();
        for l in present {
            by_class.entry(l.clone()).or_default().push(i);
        }
    }
    ClassIndex { by_class }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub way: usize,
    pub shot_lo: usize,
    pub shot_hi: usize,
    pub query_per_class: usize,
}

impl EpisodeParams {
    /// The usual K~2K window.
    pub fn k_2k(way: usize, k: usize, query_per_class: usize) -> Self {
        EpisodeParams {
            way,
            shot_lo: k,
            shot_hi: 2 * k,
            query_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Episode classes, sorted.
    pub classes: Vec<String>,
    pub way: usize,
    pub shot_lo: usize,
    pub shot_hi: usize,
    pub query_per_class: usize,
    pub support: Vec<Sentence>,
    pub query: Vec<Sentence>,
    /// Corpus indices of `support`/`query`; empty for hand-built episodes.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    /// Training-time support extension produced by entity replacement.
    /// Shot-window validation only looks at `support`.
    #[serde(default)]
    pub augmented: Vec<Sentence>,
}

impl Episode {
    pub fn params(&self) -> EpisodeParams {
        EpisodeParams {
            way: self.way,
            shot_lo: self.shot_lo,
            shot_hi: self.shot_hi,
            query_per_class: self.query_per_class,
        }
    }

    pub fn class_set(&self) -> BTreeSet<String> {
        self.classes.iter().cloned().collect()
    }

    /// Original support followed by any augmentation.
    pub fn full_support(&self) -> impl Iterator<Item = &Sentence> {
        self.support.iter().chain(self.augmented.iter())
    }

    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            classes: self.classes.clone(),
            way: self.way,
            shot_lo: self.shot_lo,
            shot_hi: self.shot_hi,
            query_per_class: self.query_per_class,
            support: self.support_ids.clone(),
            query: self.query_ids.clone(),
        }
    }
}

fn mention_counts(s: &Sentence, classes: &BTreeSet<String>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for span in s.spans() {
        if classes.contains(&span.label) {
            *out.entry(span.label).or_insert(0) += 1;
        }
    }
    out
}

enum Attempt {
    Done(Episode),
    Blocked(String),
}

fn try_sample(
    corpus: &Corpus,
    index: &ClassIndex,
    params: &EpisodeParams,
    rng: &mut ChaCha8Rng,
) -> Attempt {
    let all: Vec<&String> = index.classes().collect();
    let mut classes: Vec<String> = all
        .choose_multiple(rng, params.way)
        .map(|c| (*c).clone())
        .collect();
    classes.sort();
    let class_set: BTreeSet<String> = classes.iter().cloned().collect();

    let mut counts: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
    let mut support_ids: Vec<usize> = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();

    let mut order = classes.clone();
    order.shuffle(rng);
    for c in &order {
        let mut candidates: Vec<usize> = index.by_class[c]
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .collect();
        candidates.shuffle(rng);
        for i in candidates {
            if counts[c] >= params.shot_lo {
                break;
            }
            let add = mention_counts(&corpus.sentences[i], &class_set);
            let overshoots = add
                .iter()
                .any(|(k, n)| counts[k] + n > params.shot_hi);
            if overshoots {
                continue;
            }
            for (k, n) in add {
                *counts.get_mut(&k).expect("episode class") += n;
            }
            used.insert(i);
            support_ids.push(i);
        }
        if counts[c] < params.shot_lo {
            return Attempt::Blocked(c.clone());
        }
    }

    let mut query_ids = Vec::new();
    for c in &classes {
        let mut candidates: Vec<usize> = index.by_class[c]
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .collect();
        if candidates.len() < params.query_per_class {
            return Attempt::Blocked(c.clone());
        }
        candidates.shuffle(rng);
        for &i in candidates.iter().take(params.query_per_class) {
            used.insert(i);
            query_ids.push(i);
        }
    }

    let mask = |ids: &[usize]| -> Vec<Sentence> {
        ids.iter()
            .map(|&i| corpus.sentences[i].masked(&class_set))
            .collect()
    };
    Attempt::Done(Episode {
        support: mask(&support_ids),
        query: mask(&query_ids),
        classes,
        way: params.way,
        shot_lo: params.shot_lo,
        shot_hi: params.shot_hi,
        query_per_class: params.query_per_class,
        support_ids,
        query_ids,
        augmented: Vec::new(),
    })
}

/// Samples one episode with a greedy Few-NERD style procedure.
///
/// Candidate sentences for each class are shuffled and added while the
/// class is below `shot_lo`; a sentence whose co-occurring mentions would push
/// any episode class past `shot_hi` is skipped. An attempt that leaves a class
/// short is retried with fresh randomness up to 100 times.
pub fn sample_episode(
    corpus: &Corpus,
    index: &ClassIndex,
    params: &EpisodeParams,
    seed: u64,
) -> Result<Episode> {
    if params.way == 0 || params.shot_lo == 0 || params.shot_lo > params.shot_hi {
        return Err(Error::Sampling(format!(
            "invalid episode parameters {params:?}"
        )));
    }
    if index.len() < params.way {
        return Err(Error::Sampling(format!(
            "{}-way episode requested but only {} classes are available",
            params.way,
            index.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocking = String::new();
    for _ in 0..MAX_RETRIES {
        match try_sample(corpus, index, params, &mut rng) {
            Attempt::Done(e) => return Ok(e),
            Attempt::Blocked(c) => blocking = c,
        }
    }
    Err(Error::Sampling(format!(
        "class {blocking:?} cannot satisfy a {}~{}-shot window with {} query sentences after {MAX_RETRIES} retries",
        params.shot_lo, params.shot_hi, params.query_per_class
    )))
}

/// Every violated episode invariant, as human-readable strings.
pub fn validate_episode(e: &Episode) -> Vec<String> {
    let mut out = Vec::new();
    let class_set = e.class_set();
    if e.classes.len() != e.way {
        out.push(format!(
            "class count mismatch: {} classes for {}-way",
            e.classes.len(),
            e.way
        ));
    }
    if class_set.len() != e.classes.len() {
        out.push("duplicate classes".to_string());
    }
    if class_set.contains(OUTSIDE) {
        out.push("\"O\" listed as an episode class".to_string());
    }
    if e.shot_lo == 0 || e.shot_lo > e.shot_hi {
        out.push(format!("invalid shot window [{}, {}]", e.shot_lo, e.shot_hi));
    }

    let ids_usable =
        e.support_ids.len() == e.support.len() && e.query_ids.len() == e.query.len();
    if !(e.support_ids.is_empty() && e.query_ids.is_empty()) && !ids_usable {
        out.push("sentence id lists do not match sentence lists".to_string());
    }
    let overlap = if ids_usable && !(e.support_ids.is_empty() && e.query_ids.is_empty()) {
        let s: BTreeSet<usize> = e.support_ids.iter().copied().collect();
        e.query_ids.iter().any(|i| s.contains(i))
    } else {
        e.query.iter().any(|q| e.support.contains(q))
    };
    if overlap {
        out.push("support/query overlap".to_string());
    }

    let mut counts: BTreeMap<&String, usize> = e.classes.iter().map(|c| (c, 0)).collect();
    for s in &e.support {
        for span in s.spans() {
            if let Some(n) = counts.get_mut(&span.label) {
                *n += 1;
            }
        }
    }
    for (c, n) in counts {
        if n < e.shot_lo || n > e.shot_hi {
            out.push(format!(
                "class {c:?} has {n} support mentions, outside [{}, {}]",
                e.shot_lo, e.shot_hi
            ));
        }
    }

    let unmasked: BTreeSet<&String> = e
        .support
        .iter()
        .chain(&e.query)
        .flat_map(|s| s.labels.iter())
        .filter(|l| *l != OUTSIDE && !class_set.contains(*l))
        .collect();
    for l in unmasked {
        out.push(format!("unmasked out-of-episode label {l:?}"));
    }

    if e.query.len() != e.way * e.query_per_class {
        out.push(format!(
            "query size mismatch: {} sentences for {}x{}",
            e.query.len(),
            e.way,
            e.query_per_class
        ));
    }
    for c in &e.classes {
        let n = e
            .query
            .iter()
            .filter(|s| s.labels.iter().any(|l| l == c))
            .count();
        if n < e.query_per_class {
            out.push(format!(
                "class {c:?} appears in {n} query sentences, expected {}",
                e.query_per_class
            ));
        }
    }
    out
}

/// Replayable form of an episode: classes plus corpus sentence indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub classes: Vec<String>,
    pub way: usize,
    pub shot_lo: usize,
    pub shot_hi: usize,
    pub query_per_class: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl EpisodeRecord {
    /// Rebuilds the episode against the corpus it was sampled from.
    pub fn replay(&self, corpus: &Corpus) -> Result<Episode> {
        let class_set: BTreeSet<String> = self.classes.iter().cloned().collect();
        let fetch = |ids: &[usize]| -> Result<Vec<Sentence>> {
            ids.iter()
                .map(|&i| {
                    corpus
                        .sentences
                        .get(i)
                        .map(|s| s.masked(&class_set))
                        .ok_or_else(|| Error::invalid(format!("sentence index {i} out of range")))
                })
                .collect()
        };
        Ok(Episode {
            classes: self.classes.clone(),
            way: self.way,
            shot_lo: self.shot_lo,
            shot_hi: self.shot_hi,
            query_per_class: self.query_per_class,
            support: fetch(&self.support)?,
            query: fetch(&self.query)?,
            support_ids: self.support.clone(),
            query_ids: self.query.clone(),
            augmented: Vec::new(),
        })
    }
}

pub fn write_episode_records<W: Write>(mut w: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, &e.to_record())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode_records<R: BufRead>(r: R) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
