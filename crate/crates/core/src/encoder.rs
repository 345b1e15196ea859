//! Token encoders.
//!
//! [`EncoderState`] is a small trainable contextual encoder: hashed token
//! embeddings, a window mixing layer over `±context_window` neighbours with a
//! `tanh` nonlinearity, and a linear output projection. Parameters are stored
//! as `f32`; all arithmetic runs in `f64`.
//!
//! [`PrecomputedEncoder`] adapts a table of fixed per-token vectors (for
//! example 768-wide vectors exported from a pretrained model) to the same
//! [`TokenEncoder`] contract. It has no trainable parameters.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub vocab_hash_buckets: usize,
    pub context_window: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            max_len: 32,
            vocab_hash_buckets: 4096,
            context_window: 2,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid("encoder dim must be >= 2"));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be >= 2"));
        }
        if self.vocab_hash_buckets == 0 {
            return Err(Error::invalid("vocab_hash_buckets must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.context_window + 1
    }
}

/// A row-major `f32` parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c] as f64
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Gradient buffers laid out like [`EncoderState::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(state: &EncoderState) -> Self {
        EncoderGrads {
            tensors: state.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|g| *g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// One vector per (possibly truncated) token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub rows: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Anything that maps a sentence to per-token vectors.
pub trait TokenEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Deterministic (evaluation-mode) encoding.
    fn encode(&self, sentence: &Sentence) -> Result<TokenEmbeddings>;
}

const TENSOR_NAMES: [&str; 5] = ["embedding", "mix_weight", "mix_bias", "out_weight", "out_bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    /// `vocab_hash_buckets x dim`
    pub embedding: Tensor,
    /// `dim x (window_len * dim)`
    pub mix_weight: Tensor,
    pub mix_bias: Tensor,
    /// `dim x dim`
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

/// Per-sentence activations needed by [`EncoderState::backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    buckets: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<f64>>>,
}

impl EncodeCache {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// 64-bit FNV-1a.
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderState> {
    config.validate()?;
    let d = config.dim;
    let fan_in = config.window_len() * d;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut embedding = Tensor::zeros("embedding", config.vocab_hash_buckets, d);
    let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
    for v in &mut embedding.data {
        *v = normal.sample(&mut rng) as f32;
    }
    let mut mix_weight = Tensor::zeros("mix_weight", d, fan_in);
    let a = (6.0 / (fan_in + d) as f64).sqrt();
    for v in &mut mix_weight.data {
        *v = rng.random_range(-a..a) as f32;
    }
    let mut out_weight = Tensor::zeros("out_weight", d, d);
    let a = (6.0 / (2 * d) as f64).sqrt();
    for v in &mut out_weight.data {
        *v = rng.random_range(-a..a) as f32;
    }
    Ok(EncoderState {
        config: config.clone(),
        embedding,
        mix_weight,
        mix_bias: Tensor::zeros("mix_bias", d, 1),
        out_weight,
        out_bias: Tensor::zeros("out_bias", d, 1),
    })
}

impl EncoderState {
    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.embedding,
            &self.mix_weight,
            &self.mix_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.embedding,
            &mut self.mix_weight,
            &mut self.mix_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn bucket(&self, token: &str) -> usize {
        (token_hash(token) % self.config.vocab_hash_buckets as u64) as usize
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Forward pass. Passing an RNG switches on training-mode dropout.
    pub fn forward(
        &self,
        sentence: &Sentence,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TokenEmbeddings, EncodeCache)> {
        if sentence.is_empty() {
            return Err(Error::invalid("cannot encode an empty sentence"));
        }
        let cfg = &self.config;
        let d = cfg.dim;
        let w = cfg.context_window;
        let len = sentence.len().min(cfg.max_len);
        let buckets: Vec<usize> = sentence.tokens[..len].iter().map(|t| self.bucket(t)).collect();

        let mut inputs = Vec::with_capacity(len);
        for i in 0..len {
            let mut x = vec![0.0; cfg.window_len() * d];
            for slot in 0..cfg.window_len() {
                let pos = i as isize + slot as isize - w as isize;
                if pos < 0 || pos >= len as isize {
                    continue;
                }
                let row = self.embedding.row(buckets[pos as usize]);
                for (dst, src) in x[slot * d..(slot + 1) * d].iter_mut().zip(row) {
                    *dst = *src as f64;
                }
            }
            inputs.push(x);
        }

        let mask = match dropout_rng {
            Some(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 - cfg.dropout;
                let mask: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|x| {
                        x.iter()
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect()
                    })
                    .collect();
                for (x, m) in inputs.iter_mut().zip(&mask) {
                    for (v, k) in x.iter_mut().zip(m) {
                        *v *= k;
                    }
                }
                Some(mask)
            }
            _ => None,
        };

        let mut hidden = Vec::with_capacity(len);
        let mut rows = Vec::with_capacity(len);
        for x in &inputs {
            let z: Vec<f64> = (0..d)
                .map(|r| {
                    let wr = self.mix_weight.row(r);
                    let mut a = self.mix_bias.data[r] as f64;
                    for (wv, xv) in wr.iter().zip(x) {
                        a += *wv as f64 * xv;
                    }
                    a.tanh()
                })
                .collect();
            let h: Vec<f64> = (0..d)
                .map(|r| {
                    let wr = self.out_weight.row(r);
                    let mut a = self.out_bias.data[r] as f64;
                    for (wv, zv) in wr.iter().zip(&z) {
                        a += *wv as f64 * zv;
                    }
                    a
                })
                .collect();
            hidden.push(z);
            rows.push(h);
        }
        Ok((
            TokenEmbeddings { rows },
            EncodeCache {
                buckets,
                inputs,
                hidden,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/dh` for each encoded token.
    pub fn backward(
        &self,
        cache: &EncodeCache,
        upstream: &[Vec<f64>],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let d = self.config.dim;
        if upstream.len() != cache.len() {
            return Err(Error::shape(format!(
                "{} upstream rows for {} encoded tokens",
                upstream.len(),
                cache.len()
            )));
        }
        if let Some(bad) = upstream.iter().find(|g| g.len() != d) {
            return Err(Error::shape(format!(
                "upstream row of width {} for dim {d}",
                bad.len()
            )));
        }
        let wl = self.config.window_len();
        let wc = self.config.context_window;
        let len = cache.len();
        let [g_emb, g_mix_w, g_mix_b, g_out_w, g_out_b] = &mut grads.tensors[..] else {
            return Err(Error::shape("gradient buffer has wrong tensor count"));
        };
        for i in 0..len {
            let dh = &upstream[i];
            if dh.iter().all(|v| *v == 0.0) {
                continue;
            }
            let z = &cache.hidden[i];
            let mut da = vec![0.0; d];
            for r in 0..d {
                g_out_b[r] += dh[r];
                let row = &mut g_out_w[r * d..(r + 1) * d];
                for (g, zv) in row.iter_mut().zip(z) {
                    *g += dh[r] * zv;
                }
            }
            for (c, dav) in da.iter_mut().enumerate() {
                let mut dz = 0.0;
                for (r, dhr) in dh.iter().enumerate() {
                    dz += self.out_weight.at(r, c) * dhr;
                }
                *dav = dz * (1.0 - z[c] * z[c]);
            }
            let x = &cache.inputs[i];
            let fan = wl * d;
            let mut dx = vec![0.0; fan];
            for (r, dar) in da.iter().enumerate() {
                g_mix_b[r] += dar;
                let grow = &mut g_mix_w[r * fan..(r + 1) * fan];
                for (g, xv) in grow.iter_mut().zip(x) {
                    *g += dar * xv;
                }
                let wrow = self.mix_weight.row(r);
                for (dxv, wv) in dx.iter_mut().zip(wrow) {
                    *dxv += dar * *wv as f64;
                }
            }
            if let Some(mask) = &cache.mask {
                for (v, m) in dx.iter_mut().zip(&mask[i]) {
                    *v *= m;
                }
            }
            for slot in 0..wl {
                let pos = i as isize + slot as isize - wc as isize;
                if pos < 0 || pos >= len as isize {
                    continue;
                }
                let b = cache.buckets[pos as usize];
                let dst = &mut g_emb[b * d..(b + 1) * d];
                for (g, v) in dst.iter_mut().zip(&dx[slot * d..(slot + 1) * d]) {
                    *g += v;
                }
            }
        }
        Ok(())
    }
}

impl TokenEncoder for EncoderState {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn encode(&self, sentence: &Sentence) -> Result<TokenEmbeddings> {
        self.forward(sentence, None).map(|(e, _)| e)
    }
}

/// Encodes a sentence; `dropout_rng` selects training mode.
pub fn encode_tokens(
    state: &EncoderState,
    sentence: &Sentence,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TokenEmbeddings> {
    state.forward(sentence, dropout_rng).map(|(e, _)| e)
}

/// Parameter gradients of `Σ <upstream, encode(sentence)>` over a batch,
/// with evaluation-mode encoding.
pub fn encoder_grads(
    state: &EncoderState,
    sentences: &[Sentence],
    upstream: &[Vec<Vec<f64>>],
) -> Result<EncoderGrads> {
    if sentences.len() != upstream.len() {
        return Err(Error::shape(format!(
            "{} sentences but {} upstream blocks",
            sentences.len(),
            upstream.len()
        )));
    }
    let mut grads = EncoderGrads::zeros_like(state);
    for (s, up) in sentences.iter().zip(upstream) {
        let (_, cache) = state.forward(s, None)?;
        state.backward(&cache, up, &mut grads)?;
    }
    Ok(grads)
}

const ENCODER_MAGIC: &[u8; 4] = b"PNEC";
pub(crate) const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }

    pub(crate) fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {got:?}, expected {magic:?} (unsupported checkpoint version)"
            )));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl EncoderState {
    /// Versioned little-endian container: config, then each tensor with its
    /// name and shape followed by `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(ENCODER_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for v in [c.dim, c.max_len, c.vocab_hash_buckets, c.context_window] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_bits().to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        let tensors = self.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, 2);
            put_u32(&mut out, t.rows as u32);
            put_u32(&mut out, t.cols as u32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.header(ENCODER_MAGIC)?;
        let config = EncoderConfig {
            dim: r.u64()? as usize,
            max_len: r.u64()? as usize,
            vocab_hash_buckets: r.u64()? as usize,
            context_window: r.u64()? as usize,
            dropout: f64::from_bits(r.u64()?),
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
        let mut state = init_shapes(&config);
        let n = r.u32()? as usize;
        if n != TENSOR_NAMES.len() {
            return Err(Error::Checkpoint(format!("expected 5 tensors, found {n}")));
        }
        for t in state.tensors_mut() {
            let name = r.string()?;
            let ndim = r.u32()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if name != t.name || ndim != 2 || rows != t.rows || cols != t.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} {rows}x{cols} does not match expected {:?} {}x{}",
                    t.name, t.rows, t.cols
                )));
            }
            for v in &mut t.data {
                *v = r.f32()?;
            }
        }
        r.finish()?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn init_shapes(c: &EncoderConfig) -> EncoderState {
    let d = c.dim;
    EncoderState {
        config: c.clone(),
        embedding: Tensor::zeros(TENSOR_NAMES[0], c.vocab_hash_buckets, d),
        mix_weight: Tensor::zeros(TENSOR_NAMES[1], d, c.window_len() * d),
        mix_bias: Tensor::zeros(TENSOR_NAMES[2], d, 1),
        out_weight: Tensor::zeros(TENSOR_NAMES[3], d, d),
        out_bias: Tensor::zeros(TENSOR_NAMES[4], d, 1),
    }
}

/// Frozen lookup-table encoder over precomputed vectors.
///
/// Tokens missing from the table encode as the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEncoder {
    dim: usize,
    max_len: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    pub fn new(dim: usize, max_len: usize, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        if dim < 2 || max_len < 2 {
            return Err(Error::invalid("precomputed encoder needs dim >= 2 and max_len >= 2"));
        }
        if let Some((tok, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(format!(
                "vector for {tok:?} has {} entries, expected {dim}",
                v.len()
            )));
        }
        Ok(PrecomputedEncoder {
            dim,
            max_len,
            table,
        })
    }

    /// Reads whitespace-separated `token v1 .. vd` lines.
    pub fn from_file(path: impl AsRef<Path>, max_len: usize) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {} values, found {}", dim.unwrap_or(0), v.len()),
                });
            }
            table.insert(tok.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::invalid("embedding file is empty"))?;
        Self::new(dim, max_len, table)
    }
}

impl TokenEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, sentence: &Sentence) -> Result<TokenEmbeddings> {
        if sentence.is_empty() {
            return Err(Error::invalid("cannot encode an empty sentence"));
        }
        let rows = sentence
            .tokens
            .iter()
            .take(self.max_len)
            .map(|t| self.table.get(t).cloned().unwrap_or_else(|| vec![0.0; self.dim]))
            .collect();
        Ok(TokenEmbeddings { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(n: usize) -> Sentence {
        let toks: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
        let labels = vec!["O".to_string(); n];
        Sentence::new(toks, labels).unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            dim: 6,
            max_len: 8,
            vocab_hash_buckets: 64,
            context_window: 1,
            dropout: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn same_seed_same_state() {
        let c = EncoderConfig::default();
        assert_eq!(init_encoder(&c).unwrap(), init_encoder(&c).unwrap());
        assert_eq!(init_encoder(&c).unwrap().embedding.cols, 32);
    }

    #[test]
    fn init_means_are_small() {
        for seed in 0..10 {
            let s = init_encoder(&EncoderConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let all: Vec<f64> = s.tensors().iter().flat_map(|t| t.data.iter().map(|v| *v as f64)).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            assert!(mean.abs() < 0.05, "seed {seed} mean {mean}");
        }
    }

    #[test]
    fn shape_and_truncation() {
        let s = init_encoder(&EncoderConfig::default()).unwrap();
        let e = s.encode(&sentence(5)).unwrap();
        assert_eq!((e.len(), e.dim()), (5, 32));
        let e = s.encode(&sentence(40)).unwrap();
        assert_eq!(e.len(), 32);
    }

    #[test]
    fn empty_sentence_errors() {
        let s = init_encoder(&small()).unwrap();
        let empty = Sentence {
            tokens: vec![],
            labels: vec![],
        };
        assert!(s.encode(&empty).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let s = init_encoder(&EncoderConfig::default()).unwrap();
        let x = sentence(7);
        assert_eq!(s.encode(&x).unwrap(), s.encode(&x).unwrap());
    }

    #[test]
    fn dropout_changes_training_output() {
        let s = init_encoder(&EncoderConfig::default()).unwrap();
        let x = sentence(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = encode_tokens(&s, &x, Some(&mut rng)).unwrap();
        assert_ne!(a, s.encode(&x).unwrap());
    }

    #[test]
    fn context_changes_embedding() {
        let s = init_encoder(&EncoderConfig::default()).unwrap();
        let a = Sentence::from_pairs(&[("x", "O"), ("pigeons", "O"), ("y", "O")]).unwrap();
        let b = Sentence::from_pairs(&[("z", "O"), ("pigeons", "O"), ("y", "O")]).unwrap();
        assert_ne!(s.encode(&a).unwrap().rows[1], s.encode(&b).unwrap().rows[1]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let s = init_encoder(&small()).unwrap();
        let x = sentence(4);
        let g = encoder_grads(&s, &[x], &[vec![vec![0.0; 6]; 4]]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn shape_mismatch_errors() {
        let s = init_encoder(&small()).unwrap();
        let x = sentence(4);
        assert!(encoder_grads(&s, &[x.clone()], &[vec![vec![0.0; 6]; 3]]).is_err());
        assert!(encoder_grads(&s, &[x], &[vec![vec![0.0; 5]; 4]]).is_err());
    }

    #[test]
    fn untouched_buckets_get_no_gradient() {
        let s = init_encoder(&small()).unwrap();
        let x = sentence(3);
        let up = vec![vec![1.0; 6]; 3];
        let g = encoder_grads(&s, &[x.clone()], &[up]).unwrap();
        let used: Vec<usize> = x.tokens.iter().map(|t| s.bucket(t)).collect();
        for b in 0..64 {
            let row = &g.tensors[0][b * 6..(b + 1) * 6];
            if !used.contains(&b) {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn truncated_tokens_get_no_gradient() {
        let mut c = small();
        c.max_len = 3;
        let s = init_encoder(&c).unwrap();
        let x = sentence(6);
        let g = encoder_grads(&s, &[x.clone()], &[vec![vec![1.0; 6]; 3]]).unwrap();
        let kept: Vec<usize> = x.tokens[..3].iter().map(|t| s.bucket(t)).collect();
        for t in &x.tokens[3..] {
            let b = s.bucket(t);
            if !kept.contains(&b) {
                assert!(g.tensors[0][b * 6..(b + 1) * 6].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = init_encoder(&EncoderConfig::default()).unwrap();
        let back = EncoderState::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EncoderState::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = s.to_bytes();
        bytes[4] = 9;
        assert!(matches!(EncoderState::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn precomputed_768() {
        let mut table = HashMap::new();
        table.insert("a".to_string(), vec![0.5; 768]);
        let enc = PrecomputedEncoder::new(768, 32, table).unwrap();
        let e = enc
            .encode(&Sentence::from_pairs(&[("a", "O"), ("b", "O")]).unwrap())
            .unwrap();
        assert_eq!(e.dim(), 768);
        assert_eq!(e.rows[1], vec![0.0; 768]);
    }
}
