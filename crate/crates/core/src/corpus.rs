//! Labeled NER corpora: the Few-NERD text format, span extraction, and a
//! synthetic generator with a planted context/label confounder.
//!
//! A sentence is a pre-tokenized sequence with one class label per token.
//! Labels are plain type strings (no BIO prefixes), so entity spans are the
//! maximal runs of identical non-`O` labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of non-entity tokens.
pub const OUTSIDE: &str = "O";

const FIELD_SEP: char = '\t';

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("sentence has no tokens"));
        }
        if tokens.len() != labels.len() {
            return Err(Error::invalid(format!(
                "sentence has {} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Sentence { tokens, labels })
    }

    /// Builds a sentence from `(token, label)` pairs.
    pub fn from_pairs<T: AsRef<str>, L: AsRef<str>>(pairs: &[(T, L)]) -> Result<Self> {
        let (tokens, labels) = pairs
            .iter()
            .map(|(t, l)| (t.as_ref().to_string(), l.as_ref().to_string()))
            .unzip();
        Sentence::new(tokens, labels)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Vec<Span> {
        extract_spans(self)
    }

    /// Copy of the sentence with every entity label outside `keep` set to `O`.
    pub fn masked(&self, keep: &BTreeSet<String>) -> Sentence {
        let labels = self
            .labels
            .iter()
            .map(|l| {
                if l == OUTSIDE || keep.contains(l) {
                    l.clone()
                } else {
                    OUTSIDE.to_string()
                }
            })
            .collect();
        Sentence {
            tokens: self.tokens.clone(),
            labels,
        }
    }
}

/// A typed entity mention covering tokens `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub label_set: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus whose label set is every entity label observed.
    pub fn new(sentences: Vec<Sentence>) -> Self {
        let label_set = sentences
            .iter()
            .flat_map(|s| s.labels.iter())
            .filter(|l| *l != OUTSIDE)
            .cloned()
            .collect();
        Corpus {
            sentences,
            label_set,
        }
    }

    /// Builds a corpus with a declared label set, rejecting undeclared labels.
    pub fn with_labels(sentences: Vec<Sentence>, label_set: BTreeSet<String>) -> Result<Self> {
        if label_set.contains(OUTSIDE) {
            return Err(Error::invalid("label set must not contain \"O\""));
        }
        for (i, s) in sentences.iter().enumerate() {
            if let Some(l) = s
                .labels
                .iter()
                .find(|l| *l != OUTSIDE && !label_set.contains(*l))
            {
                return Err(Error::invalid(format!(
                    "sentence {i} uses undeclared label {l:?}"
                )));
            }
        }
        Ok(Corpus {
            sentences,
            label_set,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    FewNerd,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fewnerd" | "few-nerd" => Ok(CorpusFormat::FewNerd),
            other => Err(Error::invalid(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Reads a corpus file. Sentences end at blank lines; a trailing sentence
/// without a terminating blank line is accepted.
pub fn parse_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    match format {
        CorpusFormat::FewNerd => parse_fewnerd(&text, path),
    }
}

pub(crate) fn parse_fewnerd(text: &str, path: &Path) -> Result<Corpus> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence {
                    tokens: std::mem::take(&mut tokens),
                    labels: std::mem::take(&mut labels),
                });
            }
            continue;
        }
        let mut fields = line.split(FIELD_SEP);
        match (fields.next(), fields.next(), fields.next()) {
            (Some(tok), Some(label), None) if !tok.is_empty() && !label.is_empty() => {
                tokens.push(tok.to_string());
                labels.push(label.to_string());
            }
            _ => {
                return Err(parse_err(
                    idx + 1,
                    format!("expected `<token>\\t<label>`, got {line:?}"),
                ))
            }
        }
    }
    if !tokens.is_empty() {
        sentences.push(Sentence { tokens, labels });
    }
    if sentences.is_empty() {
        return Err(parse_err(0, "corpus file contains no sentences".into()));
    }
    Ok(Corpus::new(sentences))
}

fn check_field(kind: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid(format!("empty {kind}")));
    }
    if value.contains(FIELD_SEP) || value.contains('\n') || value.contains('\r') {
        return Err(Error::invalid(format!(
            "{kind} {value:?} contains the field separator or a line break"
        )));
    }
    Ok(())
}

/// Renders a corpus in Few-NERD format. Fields containing the separator are
/// rejected, never escaped.
pub fn render_corpus(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for s in &corpus.sentences {
        if s.tokens.is_empty() || s.tokens.len() != s.labels.len() {
            return Err(Error::invalid("malformed sentence in corpus"));
        }
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            check_field("token", t)?;
            check_field("label", l)?;
            out.push_str(t);
            out.push(FIELD_SEP);
            out.push_str(l);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let text = render_corpus(corpus)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Maximal runs of identical non-`O` labels, in order.
pub fn extract_spans(sentence: &Sentence) -> Vec<Span> {
    spans_from_labels(&sentence.labels)
}

pub fn spans_from_labels<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let label = labels[i].as_ref();
        if label == OUTSIDE {
            i += 1;
            continue;
        }
        let start = i;
        while i < labels.len() && labels[i].as_ref() == label {
            i += 1;
        }
        spans.push(Span::new(start, i, label));
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Entity mentions per class; every declared class is present.
    pub class_counts: BTreeMap<String, usize>,
    pub sentences: usize,
    pub tokens: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut class_counts: BTreeMap<String, usize> =
        corpus.label_set.iter().map(|l| (l.clone(), 0)).collect();
    let mut tokens = 0;
    for s in &corpus.sentences {
        tokens += s.len();
        for span in extract_spans(s) {
            *class_counts.entry(span.label).or_insert(0) += 1;
        }
    }
    CorpusStats {
        class_counts,
        sentences: corpus.sentences.len(),
        tokens,
    }
}

/// Parameters of the planted-confounder corpus.
///
/// Every sentence has the shape `[ctx, ctx, ENTITY, ctx, ctx]`, with a one or
/// two token entity. With probability `rho` the four context tokens come from
/// a vocabulary tied to the sentence's class; otherwise they come from a
/// neutral vocabulary shared by all classes and splits. Test class `c` uses
/// the context vocabulary of train class `c`, so context words carry over
/// between splits while entity words never do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub entities_per_class: usize,
    pub context_vocab_per_class: usize,
    pub rho: f64,
    pub sentences: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 5,
            entities_per_class: 4,
            context_vocab_per_class: 6,
            rho: 0.8,
            sentences: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.n_classes == 0
            || self.entities_per_class == 0
            || self.context_vocab_per_class == 0
            || self.sentences == 0
        {
            return Err(Error::invalid("synthetic corpus counts must be >= 1"));
        }
        Ok(())
    }
}

/// Where a synthetic sentence's context tokens were drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    Neutral,
    /// Context vocabulary of the class with this index (within the split).
    Class(usize),
}

/// Name of the class with index `c` in the train (`src`) or test (`tgt`) split.
pub fn synthetic_label(test_split: bool, c: usize) -> String {
    format!("{}-c{c}", if test_split { "tgt" } else { "src" })
}

fn split_prefix(test_split: bool) -> &'static str {
    if test_split {
        "te"
    } else {
        "tr"
    }
}

/// Recovers the context source of a generated sentence from its first token.
pub fn synthetic_context_source(sentence: &Sentence) -> Option<ContextSource> {
    let tok = sentence.tokens.first()?;
    if tok.starts_with('w') {
        return Some(ContextSource::Neutral);
    }
    let (class, _) = tok.strip_prefix("ctx")?.split_once('_')?;
    class.parse().ok().map(ContextSource::Class)
}

struct Vocab {
    entities: Vec<Vec<Vec<String>>>,
    contexts: Vec<Vec<String>>,
    neutral: Vec<String>,
}

fn build_vocab(spec: &SyntheticSpec, test_split: bool, rng: &mut ChaCha8Rng) -> Vocab {
    let p = split_prefix(test_split);
    let entities = (0..spec.n_classes)
        .map(|c| {
            (0..spec.entities_per_class)
                .map(|j| {
                    let head = format!("{p}{c}_e{j}");
                    if rng.random_bool(0.5) {
                        vec![head.clone(), format!("{head}x")]
                    } else {
                        vec![head]
                    }
                })
                .collect()
        })
        .collect();
    let contexts = (0..spec.n_classes)
        .map(|c| {
            (0..spec.context_vocab_per_class)
                .map(|j| format!("ctx{c}_{j}"))
                .collect()
        })
        .collect();
    let neutral = (0..spec.context_vocab_per_class)
        .map(|j| format!("w{j}"))
        .collect();
    Vocab {
        entities,
        contexts,
        neutral,
    }
}

#[derive(Clone, Copy)]
enum ContextMode {
    Correlated,
    Flipped,
}

fn generate_split(
    spec: &SyntheticSpec,
    vocab: &Vocab,
    test_split: bool,
    mode: ContextMode,
    rng: &mut ChaCha8Rng,
) -> Corpus {
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let class = rng.random_range(0..spec.n_classes);
        let label = synthetic_label(test_split, class);
        let form = vocab.entities[class]
            .choose(rng)
            .expect("entities_per_class >= 1");
        let use_class_vocab = rng.random_bool(spec.rho);
        let ctx_vocab = match (use_class_vocab, mode) {
            (false, _) => &vocab.neutral,
            (true, ContextMode::Correlated) => &vocab.contexts[class],
            (true, ContextMode::Flipped) if spec.n_classes > 1 => {
                let mut other = rng.random_range(0..spec.n_classes - 1);
                if other >= class {
                    other += 1;
                }
                &vocab.contexts[other]
            }
            (true, ContextMode::Flipped) => &vocab.neutral,
        };
        let mut ctx = || ctx_vocab.choose(rng).expect("vocab non-empty").clone();
        let (l0, l1) = (ctx(), ctx());
        let (r0, r1) = (ctx(), ctx());
        let mut tokens = vec![l0, l1];
        let mut labels = vec![OUTSIDE.to_string(), OUTSIDE.to_string()];
        for t in form {
            tokens.push(t.clone());
            labels.push(label.clone());
        }
        tokens.extend([r0, r1]);
        labels.extend([OUTSIDE.to_string(), OUTSIDE.to_string()]);
        sentences.push(Sentence { tokens, labels });
    }
    let label_set = (0..spec.n_classes)
        .map(|c| synthetic_label(test_split, c))
        .collect();
    Corpus {
        sentences,
        label_set,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub train: Corpus,
    pub test_confounded: Corpus,
    pub test_anticonfounded: Corpus,
}

/// Generates the train split and two test splits over disjoint test classes.
///
/// The train and confounded test splits draw context from the sentence's own
/// class vocabulary with probability `rho`; the anti-confounded split draws it
/// from a uniformly chosen *other* class with probability `rho`.
pub fn synth_confounded_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };
    let mut vocab_rng = stream(0);
    let train_vocab = build_vocab(spec, false, &mut vocab_rng);
    let test_vocab = build_vocab(spec, true, &mut vocab_rng);

    let train = generate_split(spec, &train_vocab, false, ContextMode::Correlated, &mut stream(1));
    let test_confounded =
        generate_split(spec, &test_vocab, true, ContextMode::Correlated, &mut stream(2));
    let test_anticonfounded =
        generate_split(spec, &test_vocab, true, ContextMode::Flipped, &mut stream(3));
    Ok(SyntheticCorpora {
        train,
        test_confounded,
        test_anticonfounded,
    })
}
