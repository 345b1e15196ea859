//! Training objective: token cross-entropy plus a Gaussian-kernel MMD between
//! source and target feature batches, with hand-written gradients through
//! prototypes, support reweighting, entity detection fusion and the MMD.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, OUTSIDE};
use crate::encoder::{EncodeCache, EncoderGrads, EncoderState};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::intervention::{update_memory, PrototypeMemory};
use crate::protonet::{self, blend, log_softmax, softmax, sq_dist, Vector, LOG_CLAMP};

/// Mean over tokens of `-score[gold]`.
pub fn cross_entropy(scores: &[BTreeMap<String, f64>], gold: &[String]) -> Result<f64> {
    if scores.len() != gold.len() {
        return Err(Error::shape(format!(
            "{} score rows for {} gold labels",
            scores.len(),
            gold.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("cross-entropy over zero tokens"));
    }
    let mut total = 0.0;
    for (row, g) in scores.iter().zip(gold) {
        let s = row
            .get(g)
            .ok_or_else(|| Error::invalid(format!("gold label {g:?} missing from scores")))?;
        total -= s;
    }
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bandwidths {
    /// Kernel widths `sigma`.
    Fixed(Vec<f64>),
    /// `sigma_k^2 = m_k^2 * median(pairwise squared distances)` over the
    /// pooled batch, recomputed per call.
    Median { multipliers: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidths: Bandwidths,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidths: Bandwidths::Median {
                multipliers: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            },
        }
    }
}

impl MmdConfig {
    pub fn fixed(sigmas: Vec<f64>) -> Self {
        MmdConfig {
            bandwidths: Bandwidths::Fixed(sigmas),
        }
    }

    fn validate(&self) -> Result<()> {
        let vals = match &self.bandwidths {
            Bandwidths::Fixed(v) => v,
            Bandwidths::Median { multipliers } => multipliers,
        };
        if vals.is_empty() || vals.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("MMD bandwidths must be a non-empty list of positive values"));
        }
        Ok(())
    }
}

/// Loss terms for one episode or a batch average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mmd: f64,
    pub total: f64,
    pub mmd_weight: f64,
}

pub fn total_loss(ce: f64, mmd: f64, mmd_weight: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        mmd,
        total: ce + mmd_weight * mmd,
        mmd_weight,
    }
}

/// Median of pairwise squared distances plus the pair(s) that realise it.
fn median_sq_distance(points: &[&Vector]) -> (f64, Vec<(usize, usize, f64)>) {
    let mut pairs = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            pairs.push((sq_dist(points[i], points[j]), i, j));
        }
    }
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    let n = pairs.len();
    let (lower, &mut upper, _) = pairs.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        let (d, i, j) = upper;
        (d, vec![(i, j, 1.0)])
    } else {
        let (d0, i0, j0) = *lower.iter().max_by(|a, b| cmp(a, b)).expect("at least two pairs");
        let (d1, i1, j1) = upper;
        (0.5 * (d0 + d1), vec![(i0, j0, 0.5), (i1, j1, 0.5)])
    }
}

const MIN_BANDWIDTH_SQ: f64 = 1e-12;

struct Kernels {
    sigma_sq: Vec<f64>,
    /// Base squared width and its realising pairs, for the median heuristic.
    median: Option<(f64, Vec<(usize, usize, f64)>, Vec<f64>)>,
}

fn kernels(pooled: &[&Vector], cfg: &MmdConfig) -> Kernels {
    match &cfg.bandwidths {
        Bandwidths::Fixed(s) => Kernels {
            sigma_sq: s.iter().map(|x| x * x).collect(),
            median: None,
        },
        Bandwidths::Median { multipliers } => {
            let (base, pairs) = median_sq_distance(pooled);
            if base <= MIN_BANDWIDTH_SQ {
                Kernels {
                    sigma_sq: multipliers.iter().map(|m| m * m).collect(),
                    median: None,
                }
            } else {
                let m2: Vec<f64> = multipliers.iter().map(|m| m * m).collect();
                Kernels {
                    sigma_sq: m2.iter().map(|m| m * base).collect(),
                    median: Some((base, pairs, m2)),
                }
            }
        }
    }
}

/// Biased squared-MMD estimate, averaged over bandwidths and clamped at 0.
pub fn mmd(source: &[Vector], target: &[Vector], cfg: &MmdConfig) -> Result<f64> {
    mmd_with_grad(source, target, cfg, false).map(|(v, _, _)| v)
}

/// [`mmd`] plus its gradient with respect to every source and target point
/// (including the dependence of median-heuristic widths on the points).
pub fn mmd_with_grad(
    source: &[Vector],
    target: &[Vector],
    cfg: &MmdConfig,
    want_grad: bool,
) -> Result<(f64, Vec<Vector>, Vec<Vector>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("MMD needs non-empty source and target batches"));
    }
    cfg.validate()?;
    let d = source[0].len();
    if source.iter().chain(target).any(|v| v.len() != d) {
        return Err(Error::shape("MMD batches of differing dimension"));
    }
    let pooled: Vec<&Vector> = source.iter().chain(target).collect();
    let n = source.len();
    let m = target.len();
    let np = n + m;
    let ker = kernels(&pooled, cfg);
    let nk = ker.sigma_sq.len() as f64;

    // weight of each ordered pair in the estimate
    let pair_w = |i: usize, j: usize| -> f64 {
        match (i < n, j < n) {
            (true, true) => 1.0 / (n * n) as f64,
            (false, false) => 1.0 / (m * m) as f64,
            _ => -1.0 / (n * m) as f64,
        }
    };

    let mut value = 0.0;
    let mut grads: Vec<Vector> = if want_grad { vec![vec![0.0; d]; np] } else { Vec::new() };
    let mut d_sigma_sq = vec![0.0; ker.sigma_sq.len()];
    for i in 0..np {
        value += pair_w(i, i) * nk;
        for j in i + 1..np {
            // (i, j) and (j, i) contribute equally
            let w = 2.0 * pair_w(i, j);
            let dist = sq_dist(pooled[i], pooled[j]);
            let mut coef = 0.0;
            for (k, s2) in ker.sigma_sq.iter().enumerate() {
                let kv = (-dist / (2.0 * s2)).exp();
                value += w * kv;
                if want_grad {
                    coef -= w * kv / s2 / nk;
                    d_sigma_sq[k] += w * kv * dist / (2.0 * s2 * s2);
                }
            }
            if want_grad {
                for t in 0..d {
                    let g = coef * (pooled[i][t] - pooled[j][t]);
                    grads[i][t] += g;
                    grads[j][t] -= g;
                }
            }
        }
    }
    value /= nk;

    if value < 0.0 {
        let zero = |len| vec![vec![0.0; d]; len];
        return Ok((0.0, zero(if want_grad { n } else { 0 }), zero(if want_grad { m } else { 0 })));
    }

    if want_grad {
        if let Some((_, pairs, m2)) = &ker.median {
            let d_base: f64 = d_sigma_sq.iter().zip(m2).map(|(g, m)| g * m).sum::<f64>() / nk;
            for &(i, j, share) in pairs {
                let c = d_base * share * 2.0;
                let (xi, xj) = (pooled[i].clone(), pooled[j].clone());
                for t in 0..d {
                    let diff = xi[t] - xj[t];
                    grads[i][t] += c * diff;
                    grads[j][t] -= c * diff;
                }
            }
        }
    }
    let tgt = if want_grad { grads.split_off(n) } else { Vec::new() };
    Ok((value, grads, tgt))
}

/// Options for the differentiable episode loss.
#[derive(Debug, Clone)]
pub struct GraphOptions<'a> {
    pub reweight_tau: Option<f64>,
    pub span_detection: bool,
    /// Memory prototypes blended into each class prototype.
    pub prior: &'a BTreeMap<String, Vector>,
    pub prior_weight: f64,
    pub mmd_weight: f64,
    pub mmd: &'a MmdConfig,
}

/// Flattened token features of one episode.
#[derive(Debug, Clone, Default)]
pub struct GraphInput {
    pub support_labels: Vec<String>,
    pub support: Vec<Vector>,
    pub query_gold: Vec<String>,
    pub query: Vec<Vector>,
    /// MMD target features; the query features are used when `None`.
    pub target: Option<Vec<Vector>>,
}

#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub loss: LossBreakdown,
    /// Per query token: normalised log-probabilities over the episode labels.
    pub query_log_probs: Vec<BTreeMap<String, f64>>,
    pub support_grads: Vec<Vector>,
    pub query_grads: Vec<Vector>,
    pub target_grads: Vec<Vector>,
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Forward and backward pass of the episode loss over token features.
///
/// Class log-scores are a log-softmax over `-|q - p_c|^2`. With entity
/// detection on, clamped class and detector log-probabilities are added and
/// renormalised; the cross-entropy is taken over that distribution.
pub fn episode_graph(input: &GraphInput, opts: &GraphOptions<'_>) -> Result<GraphOutput> {
    let ns = input.support.len();
    let nq = input.query.len();
    if ns != input.support_labels.len() || nq != input.query_gold.len() {
        return Err(Error::shape("feature and label counts differ"));
    }
    if nq == 0 {
        return Err(Error::invalid("episode has no query tokens"));
    }
    let d = input.query[0].len();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in input.support_labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    if !groups.contains_key(OUTSIDE) {
        return Err(Error::invalid("support has no \"O\" tokens"));
    }
    let labels: Vec<&str> = groups.keys().copied().collect();
    let gold_idx: Vec<usize> = input
        .query_gold
        .iter()
        .map(|g| {
            labels
                .iter()
                .position(|l| l == g)
                .ok_or_else(|| Error::invalid(format!("gold label {g:?} missing from scores")))
        })
        .collect::<Result<_>>()?;
    let o_idx = labels.iter().position(|l| *l == OUTSIDE).expect("O present");

    let means: Vec<Vector> = groups
        .values()
        .map(|ix| {
            let refs: Vec<&Vector> = ix.iter().map(|&i| &input.support[i]).collect();
            protonet::mean(&refs)
        })
        .collect();
    let priors: Vec<Option<&Vector>> = labels
        .iter()
        .map(|l| opts.prior.get(*l).filter(|p| p.len() == d))
        .collect();

    let (ent_ix, non_ix): (Vec<usize>, Vec<usize>) =
        (0..ns).partition(|&i| input.support_labels[i] != OUTSIDE);
    let span_protos = if opts.span_detection {
        if ent_ix.is_empty() {
            return Err(Error::invalid("entity detection needs entity support tokens"));
        }
        let e: Vec<&Vector> = ent_ix.iter().map(|&i| &input.support[i]).collect();
        let o: Vec<&Vector> = non_ix.iter().map(|&i| &input.support[i]).collect();
        Some((protonet::mean(&e), protonet::mean(&o)))
    } else {
        None
    };

    let mut g_support = vec![vec![0.0; d]; ns];
    let mut g_query = vec![vec![0.0; d]; nq];
    let mut g_means = vec![vec![0.0; d]; labels.len()];
    let mut g_span = (vec![0.0; d], vec![0.0; d]);
    let mut ce = 0.0;
    let mut query_log_probs = Vec::with_capacity(nq);
    let inv_nq = 1.0 / nq as f64;

    for (qi, q) in input.query.iter().enumerate() {
        // prototypes for this query token
        let mut weights: Vec<Option<Vec<f64>>> = Vec::with_capacity(labels.len());
        let mut protos: Vec<Vector> = Vec::with_capacity(labels.len());
        for (ci, ix) in groups.values().enumerate() {
            let (r, w) = match opts.reweight_tau {
                Some(tau) if ix.len() > 1 => {
                    let logits: Vec<f64> =
                        ix.iter().map(|&i| -sq_dist(q, &input.support[i]) / tau).collect();
                    let a = softmax(&logits);
                    let vs: Vec<Vector> = ix.iter().map(|&i| input.support[i].clone()).collect();
                    (protonet::weighted_sum(&a, &vs), Some(a))
                }
                Some(_) => (input.support[ix[0]].clone(), None),
                None => (means[ci].clone(), None),
            };
            protos.push(match priors[ci] {
                Some(p) => blend(opts.prior_weight, p, &r),
                None => r,
            });
            weights.push(w);
        }
        let logits: Vec<f64> = protos.iter().map(|p| -sq_dist(q, p)).collect();
        let logp = log_softmax(&logits);

        let mut g_logp;
        let out;
        if let Some((e, o)) = &span_protos {
            let span_logits = [-sq_dist(q, e), -sq_dist(q, o)];
            let span_lp = log_softmax(&span_logits);
            let pe = span_lp[0].max(LOG_CLAMP);
            let pn = span_lp[1].max(LOG_CLAMP);
            let fused: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(c, s)| s.max(LOG_CLAMP) + if c == o_idx { pn } else { pe })
                .collect();
            out = log_softmax(&fused);
            let pf = softmax(&fused);
            // dCE/dfused for a single gold target
            let mut g_f: Vec<f64> = pf.iter().map(|p| p * inv_nq).collect();
            g_f[gold_idx[qi]] -= inv_nq;
            g_logp = g_f
                .iter()
                .zip(&logp)
                .map(|(g, s)| if *s > LOG_CLAMP { *g } else { 0.0 })
                .collect::<Vec<_>>();
            let mut g_pe = 0.0;
            let mut g_pn = 0.0;
            for (c, g) in g_f.iter().enumerate() {
                if c == o_idx {
                    g_pn += g;
                } else {
                    g_pe += g;
                }
            }
            if span_lp[0] <= LOG_CLAMP {
                g_pe = 0.0;
            }
            if span_lp[1] <= LOG_CLAMP {
                g_pn = 0.0;
            }
            let sp = softmax(&span_logits);
            let tot = g_pe + g_pn;
            let g_sl = [g_pe - sp[0] * tot, g_pn - sp[1] * tot];
            // span logit = -|q - proto|^2
            for t in 0..d {
                let de = q[t] - e[t];
                let dn = q[t] - o[t];
                g_query[qi][t] += -2.0 * (g_sl[0] * de + g_sl[1] * dn);
                g_span.0[t] += 2.0 * g_sl[0] * de;
                g_span.1[t] += 2.0 * g_sl[1] * dn;
            }
        } else {
            out = logp.clone();
            g_logp = vec![0.0; labels.len()];
            g_logp[gold_idx[qi]] = -inv_nq;
        }
        ce -= out[gold_idx[qi]] * inv_nq;
        query_log_probs.push(
            labels
                .iter()
                .map(|l| l.to_string())
                .zip(out.iter().copied())
                .collect(),
        );

        // log-softmax over class logits
        let p = softmax(&logits);
        let sum_g: f64 = g_logp.iter().sum();
        for (gl, pc) in g_logp.iter_mut().zip(&p) {
            *gl -= pc * sum_g;
        }
        let g_logits = g_logp;

        for (ci, ix) in groups.values().enumerate() {
            let gc = g_logits[ci];
            if gc == 0.0 {
                continue;
            }
            let proto = &protos[ci];
            let mut g_r = vec![0.0; d];
            for t in 0..d {
                let diff = q[t] - proto[t];
                g_query[qi][t] -= 2.0 * gc * diff;
                g_r[t] = 2.0 * gc * diff;
            }
            if priors[ci].is_some() {
                for v in &mut g_r {
                    *v *= 1.0 - opts.prior_weight;
                }
            }
            match (&weights[ci], opts.reweight_tau) {
                (Some(a), Some(tau)) => {
                    let g_a: Vec<f64> = ix
                        .iter()
                        .map(|&i| input.support[i].iter().zip(&g_r).map(|(x, g)| x * g).sum())
                        .collect();
                    let dot: f64 = a.iter().zip(&g_a).map(|(x, y)| x * y).sum();
                    for (k, &i) in ix.iter().enumerate() {
                        axpy(&mut g_support[i], a[k], &g_r);
                        let g_z = a[k] * (g_a[k] - dot);
                        let g_dist = -g_z / tau;
                        for t in 0..d {
                            let diff = q[t] - input.support[i][t];
                            g_query[qi][t] += 2.0 * g_dist * diff;
                            g_support[i][t] -= 2.0 * g_dist * diff;
                        }
                    }
                }
                (None, Some(_)) => axpy(&mut g_support[ix[0]], 1.0, &g_r),
                _ => axpy(&mut g_means[ci], 1.0, &g_r),
            }
        }
    }

    for (ci, ix) in groups.values().enumerate() {
        let inv = 1.0 / ix.len() as f64;
        for &i in ix {
            axpy(&mut g_support[i], inv, &g_means[ci]);
        }
    }
    if span_protos.is_some() {
        let inv_e = 1.0 / ent_ix.len() as f64;
        for &i in &ent_ix {
            axpy(&mut g_support[i], inv_e, &g_span.0);
        }
        let inv_n = 1.0 / non_ix.len() as f64;
        for &i in &non_ix {
            axpy(&mut g_support[i], inv_n, &g_span.1);
        }
    }

    let target = input.target.as_ref().unwrap_or(&input.query);
    let want = opts.mmd_weight != 0.0;
    let (mmd_value, g_src, g_tgt) = mmd_with_grad(&input.support, target, opts.mmd, want)?;
    let mut g_target = Vec::new();
    if want {
        for (g, s) in g_support.iter_mut().zip(&g_src) {
            axpy(g, opts.mmd_weight, s);
        }
        if input.target.is_some() {
            g_target = g_tgt.into_iter().map(|v| v.into_iter().map(|x| x * opts.mmd_weight).collect()).collect();
        } else {
            for (g, s) in g_query.iter_mut().zip(&g_tgt) {
                axpy(g, opts.mmd_weight, s);
            }
        }
    }
    if input.target.is_some() && g_target.is_empty() {
        g_target = vec![vec![0.0; d]; target.len()];
    }

    let loss = total_loss(ce, mmd_value, opts.mmd_weight);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("ce={} mmd={}", loss.ce, loss.mmd),
        });
    }
    Ok(GraphOutput {
        loss,
        query_log_probs,
        support_grads: g_support,
        query_grads: g_query,
        target_grads: g_target,
    })
}

/// Switches for [`loss_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    pub span_detection: bool,
    pub reweight_tau: Option<f64>,
    pub prototype_memory: bool,
    pub mmd_weight: f64,
    pub mmd: MmdConfig,
    pub freeze_encoder: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            span_detection: true,
            reweight_tau: Some(1.0),
            prototype_memory: true,
            mmd_weight: 1.0,
            mmd: MmdConfig::default(),
            freeze_encoder: false,
        }
    }
}

/// Batch-averaged loss and encoder gradients.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: LossBreakdown,
    pub per_episode: Vec<LossBreakdown>,
    pub grads: EncoderGrads,
    /// Memory after folding in every episode of the batch, in order.
    pub memory: PrototypeMemory,
    /// Predicted label per query token, per episode.
    pub predictions: Vec<Vec<Vec<String>>>,
}

struct Encoded {
    rows: Vec<Vector>,
    labels: Vec<String>,
    caches: Vec<(usize, EncodeCache)>,
}

fn encode_all<'a>(
    state: &EncoderState,
    sentences: impl Iterator<Item = &'a Sentence>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let mut out = Encoded {
        rows: Vec::new(),
        labels: Vec::new(),
        caches: Vec::new(),
    };
    for s in sentences {
        let (emb, cache) = state.forward(s, rng.as_deref_mut())?;
        out.labels.extend(s.labels[..emb.len()].iter().cloned());
        out.caches.push((emb.len(), cache));
        out.rows.extend(emb.rows);
    }
    Ok(out)
}

fn backprop(state: &EncoderState, enc: &Encoded, grads_rows: &[Vector], out: &mut EncoderGrads) -> Result<()> {
    let mut offset = 0;
    for (n, cache) in &enc.caches {
        state.backward(cache, &grads_rows[offset..offset + n], out)?;
        offset += n;
    }
    Ok(())
}

/// Loss and gradients for a batch of episodes, averaged over episodes.
///
/// `targets[i]`, when present, replaces the query features as the MMD target
/// of episode `i` (and receives gradient). `dropout_seeds` switches the
/// encoder to training mode with one dropout stream per episode. The memory
/// is consulted and updated episode by episode when prototype memory is on;
/// `O` is never stored.
pub fn loss_grads(
    state: &EncoderState,
    episodes: &[Episode],
    targets: &[Option<Vec<Sentence>>],
    memory: &PrototypeMemory,
    opts: &LossOptions,
    dropout_seeds: Option<&[u64]>,
) -> Result<LossGrads> {
    if episodes.is_empty() {
        return Err(Error::invalid("empty episode batch"));
    }
    if !targets.is_empty() && targets.len() != episodes.len() {
        return Err(Error::shape("one MMD target per episode expected"));
    }
    let mut grads = EncoderGrads::zeros_like(state);
    let mut memory = memory.clone();
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut predictions = Vec::with_capacity(episodes.len());
    let empty = BTreeMap::new();
    for (k, ep) in episodes.iter().enumerate() {
        let mut rng = dropout_seeds.map(|s| ChaCha8Rng::seed_from_u64(s[k]));
        let sup = encode_all(state, ep.full_support(), rng.as_mut())?;
        let qry = encode_all(state, ep.query.iter(), rng.as_mut())?;
        let tgt = match targets.get(k).and_then(Option::as_ref) {
            Some(t) => Some(encode_all(state, t.iter(), rng.as_mut())?),
            None => None,
        };

        let (prior, next_memory) = if opts.prototype_memory {
            let mut groups: BTreeMap<String, Vec<Vector>> = BTreeMap::new();
            for (l, v) in sup.labels.iter().zip(&sup.rows) {
                if l != OUTSIDE {
                    groups.entry(l.clone()).or_default().push(v.clone());
                }
            }
            let current = protonet::class_prototypes(&groups)?;
            let prior: BTreeMap<String, Vector> = current
                .keys()
                .filter_map(|c| memory.get(c).map(|p| (c.clone(), p.clone())))
                .collect();
            (prior, Some(update_memory(&memory, &current).1))
        } else {
            (BTreeMap::new(), None)
        };

        let input = GraphInput {
            support_labels: sup.labels.clone(),
            support: sup.rows.clone(),
            query_gold: qry.labels.clone(),
            query: qry.rows.clone(),
            target: tgt.as_ref().map(|t| t.rows.clone()),
        };
        let gopts = GraphOptions {
            reweight_tau: opts.reweight_tau,
            span_detection: opts.span_detection,
            prior: if opts.prototype_memory { &prior } else { &empty },
            prior_weight: memory.lambda,
            mmd_weight: opts.mmd_weight,
            mmd: &opts.mmd,
        };
        let out = episode_graph(&input, &gopts)?;
        if !opts.freeze_encoder {
            backprop(state, &sup, &out.support_grads, &mut grads)?;
            backprop(state, &qry, &out.query_grads, &mut grads)?;
            if let Some(t) = &tgt {
                backprop(state, t, &out.target_grads, &mut grads)?;
            }
        }
        if let Some(m) = next_memory {
            memory = m;
        }
        let mut offset = 0;
        let mut preds = Vec::with_capacity(ep.query.len());
        for (n, _) in &qry.caches {
            preds.push(
                out.query_log_probs[offset..offset + n]
                    .iter()
                    .map(|row| protonet::argmax(row).to_string())
                    .collect(),
            );
            offset += n;
        }
        predictions.push(preds);
        per_episode.push(out.loss);
    }
    let inv = 1.0 / episodes.len() as f64;
    grads.scale(inv);
    let mean = |f: fn(&LossBreakdown) -> f64| per_episode.iter().map(f).sum::<f64>() * inv;
    let loss = total_loss(mean(|l| l.ce), mean(|l| l.mmd), opts.mmd_weight);
    Ok(LossGrads {
        loss,
        per_episode,
        grads,
        memory,
        predictions,
    })
}
