//! Prototype construction, distance-based token classification, per-query
//! support reweighting, and class-agnostic entity detection.
//!
//! Class order is always lexicographic (`BTreeMap` order), which also fixes
//! how argmax ties are broken.

use std::collections::BTreeMap;

use crate::corpus::OUTSIDE;
use crate::encoder::TokenEmbeddings;
use crate::error::{Error, Result};

/// Log-probabilities below this are clamped before span/class fusion.
pub const LOG_CLAMP: f64 = -30.0;

pub type Vector = Vec<f64>;

/// Support token embeddings grouped by (masked) label, `O` included.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportSet {
    pub by_class: BTreeMap<String, Vec<Vector>>,
}

impl SupportSet {
    pub fn push(&mut self, label: &str, v: Vector) {
        self.by_class.entry(label.to_string()).or_default().push(v);
    }

    /// Entity tokens (any non-`O` label) and non-entity tokens.
    pub fn entity_split(&self) -> (Vec<&Vector>, Vec<&Vector>) {
        let mut ent = Vec::new();
        let mut non = Vec::new();
        for (label, vs) in &self.by_class {
            if label == OUTSIDE {
                non.extend(vs.iter());
            } else {
                ent.extend(vs.iter());
            }
        }
        (ent, non)
    }

    pub fn dim(&self) -> Option<usize> {
        self.by_class.values().flatten().next().map(Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrototypes {
    pub entity: Vector,
    pub non_entity: Vector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    /// One prototype per candidate label, `O` included.
    pub class_protos: BTreeMap<String, Vector>,
    pub span_protos: Option<SpanPrototypes>,
    /// Memory prototypes blended into query-conditioned prototypes:
    /// `prior_weight * prior[c] + (1 - prior_weight) * reweighted[c]`.
    pub prior: BTreeMap<String, Vector>,
    pub prior_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPrediction {
    pub scores: BTreeMap<String, f64>,
    pub label: String,
}

impl TokenPrediction {
    pub fn from_scores(scores: BTreeMap<String, f64>) -> Self {
        let label = argmax(&scores).to_string();
        TokenPrediction { scores, label }
    }
}

/// First maximal key in lexicographic order.
pub fn argmax(scores: &BTreeMap<String, f64>) -> &str {
    let mut best: Option<(&str, f64)> = None;
    for (k, v) in scores {
        match best {
            Some((_, b)) if *v <= b => {}
            _ => best = Some((k, *v)),
        }
    }
    best.map_or(OUTSIDE, |(k, _)| k)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sq_euclid(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(sq_dist(a, b))
}

pub(crate) fn mean(vs: &[&Vector]) -> Vector {
    let d = vs[0].len();
    let mut out = vec![0.0; d];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vs.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Per-class arithmetic means.
pub fn class_prototypes(groups: &BTreeMap<String, Vec<Vector>>) -> Result<BTreeMap<String, Vector>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (label, vs) in groups {
        if vs.is_empty() {
            return Err(Error::invalid(format!("class {label:?} has no support tokens")));
        }
        for v in vs {
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::shape("support vectors of differing dimension"));
            }
        }
        let refs: Vec<&Vector> = vs.iter().collect();
        out.insert(label.clone(), mean(&refs));
    }
    Ok(out)
}

/// `softmax_i(-|q - s_i|^2 / tau)`.
pub fn reweight_supports(query: &[f64], supports: &[Vector], tau: f64) -> Result<Vec<f64>> {
    if supports.is_empty() {
        return Err(Error::invalid("cannot reweight an empty support group"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let logits = supports
        .iter()
        .map(|s| sq_euclid(query, s).map(|d| -d / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

pub(crate) fn weighted_sum(weights: &[f64], vs: &[Vector]) -> Vector {
    let mut out = vec![0.0; vs[0].len()];
    for (w, v) in weights.iter().zip(vs) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Query-conditioned prototypes: each class's supports weighted by
/// [`reweight_supports`].
pub fn reweighted_prototypes(
    query: &[f64],
    groups: &BTreeMap<String, Vec<Vector>>,
    tau: f64,
) -> Result<BTreeMap<String, Vector>> {
    groups
        .iter()
        .map(|(label, vs)| {
            if vs.len() == 1 {
                sq_euclid(query, &vs[0])?;
                return Ok((label.clone(), vs[0].clone()));
            }
            let w = reweight_supports(query, vs, tau)?;
            Ok((label.clone(), weighted_sum(&w, vs)))
        })
        .collect()
}

/// Means of all entity tokens and of all non-entity tokens.
pub fn span_prototypes(entity: &[&Vector], non_entity: &[&Vector]) -> Result<SpanPrototypes> {
    if entity.is_empty() || non_entity.is_empty() {
        return Err(Error::invalid(
            "span prototypes need both entity and non-entity tokens",
        ));
    }
    Ok(SpanPrototypes {
        entity: mean(entity),
        non_entity: mean(non_entity),
    })
}

/// `(log p_entity, log p_non_entity)` from a two-way softmax over negative
/// squared distances.
pub fn span_scores(token: &[f64], protos: &SpanPrototypes) -> (f64, f64) {
    let ls = log_softmax(&[
        -sq_dist(token, &protos.entity),
        -sq_dist(token, &protos.non_entity),
    ]);
    (ls[0], ls[1])
}

/// Log-softmax over negative squared distances to each prototype.
pub fn class_log_scores(token: &[f64], protos: &BTreeMap<String, Vector>) -> BTreeMap<String, f64> {
    let labels: Vec<&String> = protos.keys().collect();
    let logits: Vec<f64> = protos.values().map(|p| -sq_dist(token, p)).collect();
    labels
        .into_iter()
        .cloned()
        .zip(log_softmax(&logits))
        .collect()
}

/// Adds `log p_entity` to every entity class and `log p_non_entity` to `O`,
/// after clamping each log-probability at [`LOG_CLAMP`].
pub fn fuse_logits(
    class_scores: &[BTreeMap<String, f64>],
    span: &[(f64, f64)],
) -> Result<Vec<TokenPrediction>> {
    if class_scores.len() != span.len() {
        return Err(Error::shape(format!(
            "{} class score rows but {} span score rows",
            class_scores.len(),
            span.len()
        )));
    }
    Ok(class_scores
        .iter()
        .zip(span)
        .map(|(scores, &(pe, pn))| {
            let pe = pe.max(LOG_CLAMP);
            let pn = pn.max(LOG_CLAMP);
            let fused = scores
                .iter()
                .map(|(c, s)| {
                    let add = if c == OUTSIDE { pn } else { pe };
                    (c.clone(), s.max(LOG_CLAMP) + add)
                })
                .collect();
            TokenPrediction::from_scores(fused)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    /// Reweighting temperature; `None` uses plain means.
    pub reweight_tau: Option<f64>,
    pub span_detection: bool,
}

impl PrototypeSet {
    /// Plain prototypes from a support set, with span prototypes when both
    /// entity and non-entity tokens exist.
    pub fn from_support(support: &SupportSet) -> Result<Self> {
        let class_protos = class_prototypes(&support.by_class)?;
        if !class_protos.contains_key(OUTSIDE) {
            return Err(Error::invalid("support has no \"O\" tokens"));
        }
        let (ent, non) = support.entity_split();
        let span_protos = if ent.is_empty() || non.is_empty() {
            None
        } else {
            Some(span_prototypes(&ent, &non)?)
        };
        Ok(PrototypeSet {
            class_protos,
            span_protos,
            prior: BTreeMap::new(),
            prior_weight: 0.0,
        })
    }

    /// Prototypes conditioned on one query token.
    pub fn for_query(
        &self,
        query: &[f64],
        support: &SupportSet,
        tau: f64,
    ) -> Result<BTreeMap<String, Vector>> {
        let mut out = BTreeMap::new();
        for (label, proto) in &self.class_protos {
            let v = match support.by_class.get(label) {
                Some(vs) if !vs.is_empty() => {
                    let rw = if vs.len() == 1 {
                        vs[0].clone()
                    } else {
                        weighted_sum(&reweight_supports(query, vs, tau)?, vs)
                    };
                    match self.prior.get(label) {
                        Some(p) => blend(self.prior_weight, p, &rw),
                        None => rw,
                    }
                }
                _ => proto.clone(),
            };
            out.insert(label.clone(), v);
        }
        Ok(out)
    }
}

/// `w * prior + (1 - w) * current`
pub fn blend(w: f64, prior: &[f64], current: &[f64]) -> Vector {
    prior
        .iter()
        .zip(current)
        .map(|(p, c)| w * p + (1.0 - w) * c)
        .collect()
}

/// Labels every query token by its nearest prototype, optionally using
/// query-conditioned prototypes and fusing the entity detector.
pub fn classify_tokens(
    query: &TokenEmbeddings,
    protos: &PrototypeSet,
    support: &SupportSet,
    opts: ClassifyOptions,
) -> Result<Vec<TokenPrediction>> {
    let dim = protos
        .class_protos
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty prototype set"))?;
    if let Some(bad) = query.rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape(format!(
            "query vector of length {} for prototypes of length {dim}",
            bad.len()
        )));
    }
    let mut class_rows = Vec::with_capacity(query.len());
    for q in &query.rows {
        let scores = match opts.reweight_tau {
            Some(tau) => class_log_scores(q, &protos.for_query(q, support, tau)?),
            None => class_log_scores(q, &protos.class_protos),
        };
        class_rows.push(scores);
    }
    if !opts.span_detection {
        return Ok(class_rows.into_iter().map(TokenPrediction::from_scores).collect());
    }
    let sp = protos
        .span_protos
        .as_ref()
        .ok_or_else(|| Error::invalid("span detection requested without span prototypes"))?;
    let span: Vec<(f64, f64)> = query.rows.iter().map(|q| span_scores(q, sp)).collect();
    fuse_logits(&class_rows, &span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn groups(items: &[(&str, Vec<Vector>)]) -> BTreeMap<String, Vec<Vector>> {
        items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn prototype_examples() {
        let g = groups(&[("a", vec![vec![0.0, 0.0], vec![2.0, 2.0]]), ("b", vec![vec![5.0, 1.0]])]);
        let p = class_prototypes(&g).unwrap();
        assert_eq!(p["a"], vec![1.0, 1.0]);
        assert_eq!(p["b"], vec![5.0, 1.0]);
        assert!(class_prototypes(&groups(&[("a", vec![])])).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(sq_euclid(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sq_euclid(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(sq_euclid(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn reweight_examples() {
        let q = vec![0.0, 0.0];
        let eq = vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        for w in reweight_supports(&q, &eq, 1.0).unwrap() {
            assert_relative_eq!(w, 0.25, max_relative = 1e-12);
        }
        let two = vec![vec![0.0, 0.0], vec![2f64.ln().sqrt(), 0.0]];
        let w = reweight_supports(&q, &two, 1.0).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(w[1], 1.0 / 3.0, max_relative = 1e-12);
        assert!(reweight_supports(&q, &[], 1.0).is_err());
        assert!(reweight_supports(&q, &two, 0.0).is_err());
    }

    #[test]
    fn reweighted_equals_mean_for_single_or_equidistant() {
        let g = groups(&[("a", vec![vec![3.0, 1.0]]), ("b", vec![vec![1.0, 0.0], vec![-1.0, 0.0]])]);
        let rw = reweighted_prototypes(&[0.0, 0.0], &g, 1.0).unwrap();
        let plain = class_prototypes(&g).unwrap();
        assert_eq!(rw["a"], plain["a"]);
        for (x, y) in rw["b"].iter().zip(&plain["b"]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn span_examples() {
        let e = vec![1.0, 0.0];
        let n = vec![0.0, 1.0];
        let sp = span_prototypes(&[&e], &[&n]).unwrap();
        assert_eq!(sp.entity, e);
        assert_eq!(sp.non_entity, n);
        let (pe, pn) = span_scores(&[0.5, 0.5], &sp);
        assert_relative_eq!(pe, 0.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(pn, 0.5f64.ln(), max_relative = 1e-12);

        let far = SpanPrototypes {
            entity: vec![0.0, 0.0],
            non_entity: vec![10f64.sqrt(), 0.0],
        };
        let (pe, _) = span_scores(&[0.0, 0.0], &far);
        assert_relative_eq!(pe.exp(), 1.0 / (1.0 + (-10f64).exp()), max_relative = 1e-12);
        assert!(span_prototypes(&[], &[&n]).is_err());
    }

    #[test]
    fn fusion_with_uniform_span_keeps_argmax() {
        let scores = BTreeMap::from([
            ("O".to_string(), -0.4),
            ("a".to_string(), -1.6),
            ("b".to_string(), -2.0),
        ]);
        let h = 0.5f64.ln();
        let fused = fuse_logits(&[scores.clone()], &[(h, h)]).unwrap();
        assert_eq!(fused[0].label, "O");
        assert_eq!(TokenPrediction::from_scores(scores).label, "O");
        assert!(fuse_logits(&[], &[(h, h)]).is_err());
    }

    #[test]
    fn fusion_with_certain_entity_picks_entity() {
        let scores = BTreeMap::from([("O".to_string(), -0.01), ("a".to_string(), -5.0)]);
        let fused = fuse_logits(&[scores], &[(0.0, -1e9)]).unwrap();
        assert_eq!(fused[0].label, "a");
        assert_eq!(fused[0].scores["O"], -0.01 + LOG_CLAMP);
    }

    #[test]
    fn ties_break_lexicographically() {
        let s = BTreeMap::from([("b".to_string(), 0.0), ("a".to_string(), 0.0)]);
        assert_eq!(argmax(&s), "a");
    }

    #[test]
    fn nearest_prototype_wins() {
        let mut support = SupportSet::default();
        support.push("O", vec![0.0, 10.0]);
        support.push("a", vec![1.0, 1.0]);
        support.push("b", vec![-10.0, 0.0]);
        let protos = PrototypeSet::from_support(&support).unwrap();
        let q = TokenEmbeddings {
            rows: vec![vec![1.0, 1.0]],
        };
        for span_detection in [false, true] {
            for reweight_tau in [None, Some(1.0)] {
                let p = classify_tokens(
                    &q,
                    &protos,
                    &support,
                    ClassifyOptions {
                        reweight_tau,
                        span_detection,
                    },
                )
                .unwrap();
                assert_eq!(p[0].label, "a");
            }
        }
    }
}
