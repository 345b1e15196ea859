//! Context intervention by same-class entity replacement, and prototype
//! intervention by a cross-episode prototype memory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::corpus::{Sentence, OUTSIDE};
use crate::encoder::{put_str, put_u32, ByteReader};
use crate::episodes::Episode;
use crate::error::{Error, Result};

/// Class label -> distinct entity surface forms, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplacementPool {
    pub by_class: BTreeMap<String, Vec<Vec<String>>>,
}

impl ReplacementPool {
    pub fn forms(&self, class: &str) -> &[Vec<String>] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collects entity surface forms from `scope`, restricted to `classes` when
/// given.
pub fn build_pool<'a>(
    scope: impl IntoIterator<Item = &'a Sentence>,
    classes: Option<&BTreeSet<String>>,
) -> ReplacementPool {
    let mut by_class: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for s in scope {
        for span in s.spans() {
            if classes.is_some_and(|cs| !cs.contains(&span.label)) {
                continue;
            }
            let form = s.tokens[span.start..span.end].to_vec();
            let forms = by_class.entry(span.label).or_default();
            if !forms.contains(&form) {
                forms.push(form);
            }
        }
    }
    ReplacementPool { by_class }
}

/// Every single-span substitution of a same-class alternative form.
///
/// One output per (span, alternative form); the original sentence is not
/// included. Spliced tokens all take the span's label, and outputs longer than
/// `max_len` are truncated.
pub fn enumerate_replacements(
    sentence: &Sentence,
    pool: &ReplacementPool,
    max_len: usize,
) -> Vec<Sentence> {
    let mut out = Vec::new();
    for span in sentence.spans() {
        let original = &sentence.tokens[span.start..span.end];
        for form in pool.forms(&span.label) {
            if form.as_slice() == original {
                continue;
            }
            let mut tokens = sentence.tokens[..span.start].to_vec();
            let mut labels = sentence.labels[..span.start].to_vec();
            tokens.extend(form.iter().cloned());
            labels.extend(std::iter::repeat_n(span.label.clone(), form.len()));
            tokens.extend(sentence.tokens[span.end..].iter().cloned());
            labels.extend(sentence.labels[span.end..].iter().cloned());
            tokens.truncate(max_len);
            labels.truncate(max_len);
            out.push(Sentence { tokens, labels });
        }
    }
    out
}

/// Where replacement candidates come from.
#[derive(Debug, Clone, Copy)]
pub enum PoolScope<'a> {
    /// The episode's own support sentences.
    Support,
    /// A prebuilt pool, e.g. over the whole training corpus.
    Fixed(&'a ReplacementPool),
}

/// Extends the support with all replacements when `train_mode` is set;
/// otherwise returns the episode unchanged.
pub fn augment_support(
    episode: &Episode,
    scope: PoolScope<'_>,
    max_len: usize,
    train_mode: bool,
) -> Episode {
    let mut out = episode.clone();
    if !train_mode {
        return out;
    }
    let classes = episode.class_set();
    let local;
    let pool = match scope {
        PoolScope::Support => {
            local = build_pool(&episode.support, Some(&classes));
            &local
        }
        PoolScope::Fixed(p) => p,
    };
    for s in &episode.support {
        out.augmented.extend(enumerate_replacements(s, pool, max_len));
    }
    out
}

/// Per-class prototypes carried across episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    /// Stored values are rounded to `f32` so checkpoints round-trip exactly.
    pub protos: BTreeMap<String, Vec<f64>>,
    pub lambda: f64,
}

impl PrototypeMemory {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("memory lambda {lambda} outside [0, 1]")));
        }
        Ok(PrototypeMemory {
            protos: BTreeMap::new(),
            lambda,
        })
    }

    pub fn get(&self, class: &str) -> Option<&Vec<f64>> {
        self.protos.get(class)
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

/// Blends each current prototype with its remembered value and stores the
/// result. Returns the combined prototypes and the updated memory; classes not
/// in `current` keep their memory entry.
pub fn update_memory(
    memory: &PrototypeMemory,
    current: &BTreeMap<String, Vec<f64>>,
) -> (BTreeMap<String, Vec<f64>>, PrototypeMemory) {
    let mut next = memory.clone();
    let mut combined = BTreeMap::new();
    for (c, cur) in current {
        let v = match memory.protos.get(c) {
            Some(prev) if prev.len() == cur.len() => crate::protonet::blend(memory.lambda, prev, cur),
            _ => cur.clone(),
        };
        next.protos.insert(c.clone(), round_f32(&v));
        combined.insert(c.clone(), v);
    }
    (combined, next)
}

const MEMORY_MAGIC: &[u8; 4] = b"PNMM";

impl PrototypeMemory {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MEMORY_MAGIC);
        put_u32(&mut out, crate::encoder::CHECKPOINT_VERSION);
        out.extend_from_slice(&self.lambda.to_bits().to_le_bytes());
        put_u32(&mut out, self.protos.len() as u32);
        for (label, v) in &self.protos {
            put_str(&mut out, label);
            put_u32(&mut out, v.len() as u32);
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.header(MEMORY_MAGIC)?;
        let lambda = f64::from_bits(r.u64()?);
        let mut mem = PrototypeMemory::new(lambda)
            .map_err(|e| Error::Checkpoint(format!("invalid stored lambda: {e}")))?;
        let n = r.u32()?;
        for _ in 0..n {
            let label = r.string()?;
            if label == OUTSIDE {
                return Err(Error::Checkpoint("memory entry for \"O\"".into()));
            }
            let d = r.u32()? as usize;
            let v = (0..d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            mem.protos.insert(label, v);
        }
        r.finish()?;
        Ok(mem)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
