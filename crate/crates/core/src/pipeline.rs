//! Episodic training, evaluation, the ablation matrix and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Flags, MmdTarget, PoolScopeKind, RunConfig};
use crate::corpus::{spans_from_labels, Corpus, Sentence, Span, OUTSIDE};
use crate::encoder::{init_encoder, EncoderState, TokenEncoder, TokenEmbeddings};
use crate::episodes::{build_class_index, sample_episode, Episode, EpisodeParams};
use crate::error::{Error, Result};
use crate::intervention::{augment_support, build_pool, update_memory, PoolScope, PrototypeMemory};
use crate::objective::{loss_grads, mmd, MmdConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::plot::FeatureDump;
use crate::protonet::{log_softmax, ClassifyOptions, PrototypeSet, SupportSet};

const TRAIN_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `idx` of a named stream.
pub fn derive_seed(seed: u64, stream: u64, idx: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EpisodeMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EpisodeMetrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(&self, other: &EpisodeMetrics) -> Self {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Exact-match span metrics, micro-aggregated over aligned sentences.
pub fn span_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<EpisodeMetrics> {
    if gold.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&Span> = g.iter().collect();
        let p: BTreeSet<&Span> = p.iter().collect();
        let hit = g.intersection(&p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(EpisodeMetrics::from_counts(tp, fp, fn_))
}

/// Token-level metrics over non-`O` labels.
pub fn token_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<EpisodeMetrics> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    if gold.len() != pred.len() {
        return Err(Error::shape("sentence count mismatch"));
    }
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::shape("token count mismatch"));
        }
        for (g, p) in g.iter().zip(p) {
            let (ge, pe) = (g != OUTSIDE, p != OUTSIDE);
            if ge && pe && g == p {
                tp += 1;
            } else {
                fp += usize::from(pe);
                fn_ += usize::from(ge);
            }
        }
    }
    Ok(EpisodeMetrics::from_counts(tp, fp, fn_))
}

fn padded(pred: &[String], len: usize) -> Vec<String> {
    let mut out = pred.to_vec();
    out.resize(len, OUTSIDE.to_string());
    out
}

fn episode_metrics(query: &[Sentence], pred: &[Vec<String>]) -> Result<(EpisodeMetrics, EpisodeMetrics)> {
    let gold_labels: Vec<Vec<String>> = query.iter().map(|s| s.labels.clone()).collect();
    let pred_labels: Vec<Vec<String>> = query.iter().zip(pred).map(|(s, p)| padded(p, s.len())).collect();
    let gold: Vec<Vec<Span>> = gold_labels.iter().map(|l| spans_from_labels(l)).collect();
    let spans: Vec<Vec<Span>> = pred_labels.iter().map(|l| spans_from_labels(l)).collect();
    Ok((span_f1(&gold, &spans)?, token_f1(&gold_labels, &pred_labels)?))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// `train`, `eval` or `abort`.
    pub phase: String,
    pub step: usize,
    pub episode_id: usize,
    pub ce: Option<f64>,
    pub mmd: Option<f64>,
    pub total: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub flags: String,
    pub seed: u64,
}

impl MetricRecord {
    fn new(phase: &str, step: usize, episode_id: usize, m: &EpisodeMetrics, config: &RunConfig) -> Self {
        MetricRecord {
            phase: phase.to_string(),
            step,
            episode_id,
            ce: None,
            mmd: None,
            total: None,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            p: m.precision,
            r: m.recall,
            f1: m.f1,
            flags: config.flags.code(),
            seed: config.seed,
        }
    }
}

pub fn render_log(records: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_log(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trained state: encoder, prototype memory, the run configuration and the
/// training label set used for the disjointness check.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub encoder: EncoderState,
    pub memory: PrototypeMemory,
    pub train_labels: BTreeSet<String>,
}

impl Model {
    pub fn init(config: &RunConfig, train_labels: BTreeSet<String>) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            encoder: init_encoder(&config.encoder_config())?,
            memory: PrototypeMemory::new(config.lambda)?,
            train_labels,
        })
    }
}

/// Writes `encoder.bin`, `memory.bin`, `run.cfg` and `labels.txt` into `dir`.
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    model.encoder.save(dir.join("encoder.bin"))?;
    model.memory.save(dir.join("memory.bin"))?;
    model.config.save(dir.join("run.cfg"))?;
    let mut labels = String::new();
    for l in &model.train_labels {
        labels.push_str(l);
        labels.push('\n');
    }
    fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config = RunConfig::load(dir.join("run.cfg"))?;
    let encoder = EncoderState::load(dir.join("encoder.bin"))?;
    let memory = PrototypeMemory::load(dir.join("memory.bin"))?;
    let train_labels = fs::read_to_string(dir.join("labels.txt"))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    Ok(Model {
        config,
        encoder,
        memory,
        train_labels,
    })
}

fn check_disjoint(train: &BTreeSet<String>, test: &BTreeSet<String>) -> Result<()> {
    let shared: Vec<&String> = train.intersection(test).filter(|l| *l != OUTSIDE).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "training and evaluation classes overlap: {shared:?}"
        )))
    }
}

fn entity_labels(c: &Corpus) -> BTreeSet<String> {
    c.label_set.iter().filter(|l| *l != OUTSIDE).cloned().collect()
}

fn episode_params(config: &RunConfig) -> EpisodeParams {
    EpisodeParams {
        way: config.way,
        shot_lo: config.shot_lo,
        shot_hi: config.shot_hi,
        query_per_class: config.query_per_class,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<MetricRecord>,
}

/// Episodic training. `test` is needed only for the transductive MMD target
/// and is checked for class disjointness when given.
pub fn train(config: &RunConfig, corpus: &Corpus, test: Option<&Corpus>) -> Result<TrainOutput> {
    let mut log = Vec::new();
    let model = train_with(config, corpus, test, &mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutput { model, log })
}

/// [`train`], streaming each log record to `sink` as it is produced. On a
/// non-finite loss an `abort` record is emitted before the error returns.
pub fn train_with(
    config: &RunConfig,
    corpus: &Corpus,
    test: Option<&Corpus>,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<Model> {
    config.validate()?;
    let train_labels = entity_labels(corpus);
    if let Some(t) = test {
        check_disjoint(&train_labels, &entity_labels(t))?;
    }
    let opts = config.loss_options();
    let transductive = config.mmd_target == MmdTarget::TestSupport && opts.mmd_weight != 0.0;
    let test_index = match (transductive, test) {
        (false, _) => None,
        (true, Some(t)) => Some((t, build_class_index(t))),
        (true, None) => {
            return Err(Error::Config("mmd_target = test_support needs a test corpus".into()))
        }
    };

    let mut model = Model::init(config, train_labels)?;
    if config.episodes_train == 0 {
        return Ok(model);
    }
    let index = build_class_index(corpus);
    let params = episode_params(config);
    let corpus_pool = (config.flags.context_intervention && config.pool_scope == PoolScopeKind::Corpus)
        .then(|| build_pool(&corpus.sentences, None));
    let scope = match &corpus_pool {
        Some(p) => PoolScope::Fixed(p),
        None => PoolScope::Support,
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &model.encoder,
    );

    let steps = config.episodes_train.div_ceil(config.batch_size);
    for step in 0..steps {
        let lo = step * config.batch_size;
        let hi = (lo + config.batch_size).min(config.episodes_train);
        let mut episodes = Vec::with_capacity(hi - lo);
        let mut targets = Vec::new();
        let mut dropout = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            let mut ep = sample_episode(corpus, &index, &params, derive_seed(config.seed, TRAIN_STREAM, i as u64))?;
            if config.flags.context_intervention {
                ep = augment_support(&ep, scope, config.max_len, true);
            }
            episodes.push(ep);
            if let Some((t, ti)) = &test_index {
                let tep = sample_episode(t, ti, &params, derive_seed(config.seed, TARGET_STREAM, i as u64))?;
                targets.push(Some(tep.support));
            }
            dropout.push(derive_seed(config.seed, DROPOUT_STREAM, i as u64));
        }
        let result = loss_grads(&model.encoder, &episodes, &targets, &model.memory, &opts, Some(&dropout));
        let lg = match result {
            Ok(lg) if lg.loss.total.is_finite() && lg.grads.max_abs().is_finite() => lg,
            other => {
                let detail = match other {
                    Err(e) => e.to_string(),
                    Ok(lg) => format!("ce={} mmd={} total={}", lg.loss.ce, lg.loss.mmd, lg.loss.total),
                };
                let mut rec = MetricRecord::new("abort", step, hi - 1, &EpisodeMetrics::default(), config);
                rec.total = Some(f64::NAN);
                sink(&rec)?;
                return Err(Error::NonFinite { step, detail });
            }
        };
        if !config.freeze_encoder {
            opt.step(&mut model.encoder, &lg.grads)?;
        }
        model.memory = lg.memory;

        let mut m = EpisodeMetrics::default();
        for (ep, pred) in episodes.iter().zip(&lg.predictions) {
            m = m.merge(&episode_metrics(&ep.query, pred)?.0);
        }
        let mut rec = MetricRecord::new("train", step, hi - 1, &m, config);
        rec.ce = Some(lg.loss.ce);
        rec.mmd = Some(lg.loss.mmd);
        rec.total = Some(lg.loss.total);
        sink(&rec)?;
    }
    Ok(model)
}

/// Predicted labels for every query sentence of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrediction {
    pub labels: Vec<Vec<String>>,
    pub ce: Option<f64>,
    pub mmd: Option<f64>,
}

/// Anything that labels an episode's query given its support. Predictors may
/// carry state across episodes (the prototype memory does).
pub trait Predictor {
    fn predict(&mut self, episode: &Episode) -> Result<EpisodePrediction>;
}

/// Prototype classifier over a token encoder, with optional memory.
pub struct ProtoPredictor<'a> {
    pub encoder: &'a dyn TokenEncoder,
    pub memory: PrototypeMemory,
    pub flags: Flags,
    pub tau: f64,
    pub memory_at_test: bool,
    /// Classes the memory may contribute when absent from the support.
    pub recall: BTreeSet<String>,
    pub mmd: MmdConfig,
}

impl<'a> ProtoPredictor<'a> {
    pub fn new(encoder: &'a dyn TokenEncoder, memory: PrototypeMemory, config: &RunConfig) -> Self {
        ProtoPredictor {
            encoder,
            memory,
            flags: config.flags,
            tau: config.tau,
            memory_at_test: config.memory_at_test,
            recall: BTreeSet::new(),
            mmd: MmdConfig::default(),
        }
    }

    fn prototypes(&mut self, support: &SupportSet) -> Result<PrototypeSet> {
        let mut protos = PrototypeSet::from_support(support)?;
        if !self.flags.prototype_intervention {
            return Ok(protos);
        }
        let current: BTreeMap<String, Vec<f64>> = protos
            .class_protos
            .iter()
            .filter(|(c, _)| *c != OUTSIDE)
            .map(|(c, v)| (c.clone(), v.clone()))
            .collect();
        let (combined, next) = update_memory(&self.memory, &current);
        protos.prior = current
            .keys()
            .filter_map(|c| self.memory.get(c).map(|p| (c.clone(), p.clone())))
            .collect();
        protos.prior_weight = self.memory.lambda;
        protos.class_protos.extend(combined);
        for c in &self.recall {
            if !protos.class_protos.contains_key(c) {
                if let Some(p) = self.memory.get(c) {
                    protos.class_protos.insert(c.clone(), p.clone());
                }
            }
        }
        if self.memory_at_test {
            self.memory = next;
        }
        Ok(protos)
    }
}

impl Predictor for ProtoPredictor<'_> {
    fn predict(&mut self, episode: &Episode) -> Result<EpisodePrediction> {
        let mut support = SupportSet::default();
        let mut sup_rows = Vec::new();
        for s in &episode.support {
            let emb = self.encoder.encode(s)?;
            for (l, v) in s.labels.iter().zip(emb.rows) {
                sup_rows.push(v.clone());
                support.push(l, v);
            }
        }
        let protos = self.prototypes(&support)?;
        let opts = ClassifyOptions {
            reweight_tau: self.flags.sample_reweighting.then_some(self.tau),
            span_detection: self.flags.span_detection,
        };
        let mut labels = Vec::with_capacity(episode.query.len());
        let mut q_rows = Vec::new();
        let (mut ce, mut n) = (0.0, 0usize);
        for s in &episode.query {
            let emb: TokenEmbeddings = self.encoder.encode(s)?;
            let preds = crate::protonet::classify_tokens(&emb, &protos, &support, opts)?;
            for (p, gold) in preds.iter().zip(&s.labels) {
                let keys: Vec<&String> = p.scores.keys().collect();
                let vals: Vec<f64> = p.scores.values().copied().collect();
                let lp = log_softmax(&vals);
                if let Some(k) = keys.iter().position(|k| *k == gold) {
                    ce -= lp[k];
                    n += 1;
                }
            }
            labels.push(preds.into_iter().map(|p| p.label).collect());
            q_rows.extend(emb.rows);
        }
        Ok(EpisodePrediction {
            labels,
            ce: (n > 0).then(|| ce / n as f64),
            mmd: Some(mmd(&sup_rows, &q_rows, &self.mmd)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro span metrics over all episodes.
    pub span: EpisodeMetrics,
    /// Micro token metrics over all episodes.
    pub token: EpisodeMetrics,
    /// Mean and standard deviation of episode-level span F1.
    pub f1_mean: f64,
    pub f1_std: f64,
    pub episodes: Vec<MetricRecord>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Samples `episodes_eval` episodes from `corpus` and scores `predictor` on
/// them. No augmentation is applied.
pub fn evaluate_predictor(
    predictor: &mut dyn Predictor,
    config: &RunConfig,
    train_labels: &BTreeSet<String>,
    corpus: &Corpus,
) -> Result<EvalReport> {
    config.validate()?;
    check_disjoint(train_labels, &entity_labels(corpus))?;
    let index = build_class_index(corpus);
    let params = episode_params(config);
    let (mut span, mut token) = (EpisodeMetrics::default(), EpisodeMetrics::default());
    let mut records = Vec::with_capacity(config.episodes_eval);
    let mut f1s = Vec::with_capacity(config.episodes_eval);
    for i in 0..config.episodes_eval {
        let ep = sample_episode(corpus, &index, &params, derive_seed(config.seed, EVAL_STREAM, i as u64))?;
        let pred = predictor.predict(&ep)?;
        if pred.labels.len() != ep.query.len() {
            return Err(Error::shape("predictor returned wrong number of sentences"));
        }
        let (s, t) = episode_metrics(&ep.query, &pred.labels)?;
        span = span.merge(&s);
        token = token.merge(&t);
        f1s.push(s.f1);
        let mut rec = MetricRecord::new("eval", 0, i, &s, config);
        rec.ce = pred.ce;
        rec.mmd = pred.mmd;
        rec.total = pred.ce;
        records.push(rec);
    }
    let (f1_mean, f1_std) = mean_std(&f1s);
    Ok(EvalReport {
        span,
        token,
        f1_mean,
        f1_std,
        episodes: records,
    })
}

/// Evaluates a trained model; memory may be updated across test episodes
/// but the model itself is left untouched.
pub fn evaluate(model: &Model, config: &RunConfig, corpus: &Corpus) -> Result<EvalReport> {
    let mut p = ProtoPredictor::new(&model.encoder, model.memory.clone(), config);
    p.recall = entity_labels(corpus);
    evaluate_predictor(&mut p, config, &model.train_labels, corpus)
}

/// Evaluation-mode features of up to `limit` sentences.
pub fn dump_features(encoder: &dyn TokenEncoder, sentences: &[Sentence], limit: usize) -> Result<FeatureDump> {
    let mut dump = FeatureDump::default();
    for s in sentences.iter().take(limit) {
        let emb = encoder.encode(s)?;
        dump.labels.extend(s.labels[..emb.len()].iter().cloned());
        dump.rows.extend(emb.rows);
    }
    Ok(dump)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotBlock {
    OneTwo,
    FiveTen,
}

impl ShotBlock {
    pub fn window(&self) -> (usize, usize) {
        match self {
            ShotBlock::OneTwo => (1, 2),
            ShotBlock::FiveTen => (5, 10),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShotBlock::OneTwo => "1~2",
            ShotBlock::FiveTen => "5~10",
        }
    }

    pub fn from_shots(lo: usize, hi: usize) -> Result<Self> {
        match (lo, hi) {
            (1, 2) => Ok(ShotBlock::OneTwo),
            (5, 10) => Ok(ShotBlock::FiveTen),
            _ => Err(Error::Config(format!("no ablation rows for shots {lo}~{hi}"))),
        }
    }

    /// Flag rows in table order; the first row is the full method.
    pub fn rows(&self) -> Vec<Flags> {
        let f = |e, c, r, p| Flags {
            span_detection: e,
            context_intervention: c,
            sample_reweighting: r,
            prototype_intervention: p,
        };
        match self {
            ShotBlock::OneTwo => vec![
                f(true, false, true, true),
                f(true, false, true, false),
                f(false, false, true, true),
                f(false, false, false, true),
                f(false, false, true, false),
            ],
            ShotBlock::FiveTen => vec![f(true, true, false, false), f(false, true, false, false), f(true, false, false, false)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub shots: String,
    pub flags: Flags,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub seeds: Vec<u64>,
    pub f1_per_seed: Vec<f64>,
}

/// One train + evaluate per (row, seed), micro span F1 per seed.
pub fn ablate(
    base: &RunConfig,
    train_corpus: &Corpus,
    test_corpus: &Corpus,
    blocks: &[ShotBlock],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for block in blocks {
        let (lo, hi) = block.window();
        for flags in block.rows() {
            let mut f1s = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let cfg = RunConfig {
                    shot_lo: lo,
                    shot_hi: hi,
                    flags,
                    seed,
                    ..base.clone()
                };
                let out = train(&cfg, train_corpus, Some(test_corpus))?;
                f1s.push(evaluate(&out.model, &cfg, test_corpus)?.span.f1);
            }
            let (f1_mean, f1_std) = mean_std(&f1s);
            rows.push(AblationRow {
                shots: block.name().to_string(),
                flags,
                f1_mean,
                f1_std,
                seeds: seeds.to_vec(),
                f1_per_seed: f1s,
            });
        }
    }
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "shots\tspan_detection\tcontext_intervention\tsample_reweighting\tprototype_intervention\tf1_mean\tf1_std\tseeds\n",
    );
    for r in rows {
        let b = |x: bool| u8::from(x);
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            r.shots,
            b(r.flags.span_detection),
            b(r.flags.context_intervention),
            b(r.flags.sample_reweighting),
            b(r.flags.prototype_intervention),
            r.f1_mean,
            r.f1_std,
            seeds.join(",")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let a = vec![vec![Span::new(1, 2, "a")]];
        let m = span_f1(&a, &a).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let p = vec![vec![Span::new(1, 2, "a"), Span::new(3, 4, "b")]];
        let m = span_f1(&a, &p).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let z = EpisodeMetrics::from_counts(0, 0, 0);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn seeds_differ_by_stream_and_index() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(5, 1, 9), derive_seed(5, 1, 9));
    }

    #[test]
    fn ablation_row_counts() {
        assert_eq!(ShotBlock::OneTwo.rows().len(), 5);
        assert_eq!(ShotBlock::FiveTen.rows().len(), 3);
        assert_eq!(ShotBlock::OneTwo.rows()[0], Flags::full_for(2));
        assert_eq!(ShotBlock::FiveTen.rows()[0], Flags::full_for(10));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
