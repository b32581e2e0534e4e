//! Query sets, answer encodings and the masked-history representation.
//!
//! Every network input in the crate is a vector of length `|Q|` holding the
//! encoded answers of the queries asked so far and `0.0` everywhere else.
//! The mask is always carried next to the values, so a `Binary01` "no"
//! (encoded as `0.0`) is still distinguishable from an unasked query.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Encoding used for the answers of one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerDomain {
    /// `{0, 1}`: no / yes.
    Binary01,
    /// `{-1, +1}`: absent / present.
    BinaryPM1,
    /// Yes / No / Can't say, remapped to `{+1, -1, 0.5}` so that `0` stays
    /// reserved for "unasked".
    TernaryPM10,
}

const BINARY01: [f64; 2] = [0.0, 1.0];
const BINARY_PM1: [f64; 2] = [-1.0, 1.0];
const TERNARY: [f64; 3] = [-1.0, 0.5, 1.0];

impl AnswerDomain {
    /// Encoded answer values in ascending order. Conditional tables in the
    /// oracle model index answers in this order.
    pub fn values(self) -> &'static [f64] {
        match self {
            AnswerDomain::Binary01 => &BINARY01,
            AnswerDomain::BinaryPM1 => &BINARY_PM1,
            AnswerDomain::TernaryPM10 => &TERNARY,
        }
    }

    pub fn arity(self) -> usize {
        self.values().len()
    }

    /// Position of an encoded value in [`AnswerDomain::values`].
    pub fn index_of(self, value: f64) -> Option<usize> {
        self.values().iter().position(|&v| v == value)
    }

    pub fn contains(self, value: f64) -> bool {
        self.index_of(value).is_some()
    }

    /// Parses a raw dataset token.
    ///
    /// Ternary columns follow the source coding `1` = yes, `0` = no,
    /// `-1` = can't say, and are remapped on the way in.
    pub fn encode(self, raw: &str) -> Result<f64> {
        let token = raw.trim().to_ascii_lowercase();
        let value = match self {
            AnswerDomain::Binary01 => match token.as_str() {
                "1" | "yes" | "true" => Some(1.0),
                "0" | "no" | "false" => Some(0.0),
                _ => None,
            },
            AnswerDomain::BinaryPM1 => match token.as_str() {
                "1" | "+1" | "present" | "yes" => Some(1.0),
                "-1" | "absent" | "no" => Some(-1.0),
                _ => None,
            },
            AnswerDomain::TernaryPM10 => match token.as_str() {
                "1" | "yes" => Some(1.0),
                "0" | "no" => Some(-1.0),
                "-1" | "cant_say" | "can't say" | "cantsay" => Some(0.5),
                _ => None,
            },
        };
        value.ok_or_else(|| Error::IllegalRawValue {
            raw: raw.to_string(),
            domain: self.to_string(),
        })
    }

    /// Canonical raw token for an encoded value; inverse of [`AnswerDomain::encode`].
    pub fn raw_token(self, value: f64) -> Option<&'static str> {
        match (self, self.index_of(value)?) {
            (AnswerDomain::Binary01, 0) => Some("0"),
            (AnswerDomain::Binary01, _) => Some("1"),
            (AnswerDomain::BinaryPM1, 0) => Some("-1"),
            (AnswerDomain::BinaryPM1, _) => Some("1"),
            (AnswerDomain::TernaryPM10, 0) => Some("0"),
            (AnswerDomain::TernaryPM10, 1) => Some("-1"),
            (AnswerDomain::TernaryPM10, _) => Some("1"),
        }
    }

    /// Whether an encoded value reads as "yes"/"present".
    pub fn is_positive(self, value: f64) -> bool {
        value == 1.0
    }
}

impl fmt::Display for AnswerDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AnswerDomain::Binary01 => "Binary01",
            AnswerDomain::BinaryPM1 => "BinaryPM1",
            AnswerDomain::TernaryPM10 => "TernaryPM10",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: usize,
    pub name: String,
    pub domain: AnswerDomain,
}

/// Encodes one raw dataset value for `spec`.
pub fn encode_answer(raw: &str, spec: &QuerySpec) -> Result<f64> {
    spec.domain.encode(raw)
}

/// An ordered, non-empty set of queries with dense ids `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuerySetRepr", into = "QuerySetRepr")]
pub struct QuerySet {
    queries: Vec<QuerySpec>,
}

#[derive(Serialize, Deserialize)]
struct QuerySetRepr {
    queries: Vec<QuerySpec>,
}

impl TryFrom<QuerySetRepr> for QuerySet {
    type Error = Error;

    fn try_from(repr: QuerySetRepr) -> Result<Self> {
        QuerySet::new(repr.queries)
    }
}

impl From<QuerySet> for QuerySetRepr {
    fn from(set: QuerySet) -> Self {
        QuerySetRepr {
            queries: set.queries,
        }
    }
}

impl QuerySet {
    pub fn new(queries: Vec<QuerySpec>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::InvalidQuerySet("query set is empty".into()));
        }
        let mut names = HashSet::new();
        for (i, q) in queries.iter().enumerate() {
            if q.id != i {
                return Err(Error::InvalidQuerySet(format!(
                    "query at position {i} has id {}; ids must be dense and ordered",
                    q.id
                )));
            }
            if !names.insert(q.name.as_str()) {
                return Err(Error::InvalidQuerySet(format!("duplicate query name {:?}", q.name)));
            }
        }
        Ok(QuerySet { queries })
    }

    /// Builds a query set from names, all sharing one domain.
    pub fn uniform<S: Into<String>>(names: impl IntoIterator<Item = S>, domain: AnswerDomain) -> Result<Self> {
        let queries = names
            .into_iter()
            .enumerate()
            .map(|(id, name)| QuerySpec {
                id,
                name: name.into(),
                domain,
            })
            .collect();
        QuerySet::new(queries)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&QuerySpec> {
        self.queries.get(id)
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.queries.iter().position(|q| q.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// The answers of every query evaluated on one data point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerVector(pub Vec<f64>);

impl AnswerVector {
    pub fn new(values: Vec<f64>) -> Self {
        AnswerVector(values)
    }

    /// Checks width and per-query domains.
    pub fn validate(&self, queries: &QuerySet) -> Result<()> {
        if self.0.len() != queries.len() {
            return Err(Error::ShapeMismatch {
                op: "answer_vector",
                lhs: vec![self.0.len()],
                rhs: vec![queries.len()],
            });
        }
        for (spec, &v) in queries.queries().iter().zip(&self.0) {
            if !spec.domain.contains(v) {
                return Err(Error::IllegalRawValue {
                    raw: v.to_string(),
                    domain: spec.domain.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, q: usize) -> f64 {
        self.0[q]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Query-answer pairs observed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    values: Vec<f64>,
    mask: Vec<bool>,
    order: Vec<usize>,
}

impl History {
    pub fn empty(num_queries: usize) -> Self {
        History {
            values: vec![0.0; num_queries],
            mask: vec![false; num_queries],
            order: Vec::new(),
        }
    }

    /// History containing the answers of `ids` on `x`, asked in that order.
    pub fn from_queries(x: &AnswerVector, ids: &[usize]) -> Result<Self> {
        let mut h = History::empty(x.len());
        for &q in ids {
            h.push(q, x.get(q))?;
        }
        Ok(h)
    }

    /// History with every query answered, in id order.
    pub fn full(x: &AnswerVector) -> Self {
        History {
            values: x.0.clone(),
            mask: vec![true; x.len()],
            order: (0..x.len()).collect(),
        }
    }

    /// Returns a copy with `(q, answer)` appended.
    pub fn append_answer(&self, q: usize, answer: f64) -> Result<History> {
        let mut next = self.clone();
        next.push(q, answer)?;
        Ok(next)
    }

    /// In-place form of [`History::append_answer`].
    pub fn push(&mut self, q: usize, answer: f64) -> Result<()> {
        if q >= self.values.len() {
            return Err(Error::UnknownQuery {
                id: q,
                size: self.values.len(),
            });
        }
        if self.mask[q] {
            return Err(Error::DuplicateQuery(q));
        }
        self.mask[q] = true;
        self.values[q] = answer;
        self.order.push(q);
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.values.len()
    }

    /// Number of answered queries.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_asked(&self, q: usize) -> bool {
        self.mask[q]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Answered `(query, value)` pairs in ask order.
    pub fn answers(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.order.iter().map(move |&q| (q, self.values[q]))
    }

    pub fn unasked(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i)
    }

    /// The network input: answers where asked, zero elsewhere.
    pub fn to_masked_vector(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// Entropy in bits, with `0 log 0 = 0`.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.max(0.0)
}

/// A distribution over labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Posterior {
    probs: Vec<f64>,
}

impl Posterior {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPosterior("no labels".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidPosterior(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidPosterior(format!("entries sum to {sum}")));
        }
        Ok(Posterior { probs })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Posterior::new(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn uniform(num_labels: usize) -> Self {
        Posterior {
            probs: vec![1.0 / num_labels as f64; num_labels],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_labels(&self) -> usize {
        self.probs.len()
    }

    /// Entropy in bits.
    pub fn entropy(&self) -> f64 {
        entropy_bits(&self.probs)
    }

    /// Most probable label, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Labels sorted by decreasing probability, truncated to `k`.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.probs.iter().cloned().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// Entropy of a posterior in bits.
pub fn posterior_entropy(p: &Posterior) -> f64 {
    p.entropy()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Why a pursuit run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    FixedBudget,
    MapThreshold,
    StabilityThreshold,
    QueriesExhausted,
    /// Exact IP only: no remaining query carries more than the configured
    /// mutual information.
    InformationExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub query: usize,
    pub answer: f64,
    pub posterior: Posterior,
}

/// The explanation produced by one pursuit run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Posterior on the empty history.
    pub prior: Posterior,
    pub steps: Vec<Step>,
    pub prediction: usize,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn queries(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.query).collect()
    }

    /// Posterior after the last step, or the prior for an empty trajectory.
    pub fn final_posterior(&self) -> &Posterior {
        self.steps.last().map(|s| &s.posterior).unwrap_or(&self.prior)
    }

    /// Prior followed by every per-step posterior.
    pub fn posteriors(&self) -> impl Iterator<Item = &Posterior> {
        std::iter::once(&self.prior).chain(self.steps.iter().map(|s| &s.posterior))
    }

    /// Histories seen before each step: empty, then every strict prefix.
    pub fn visited_histories(&self, num_queries: usize) -> Vec<History> {
        let mut out = Vec::with_capacity(self.steps.len());
        let mut h = History::empty(num_queries);
        for step in &self.steps {
            out.push(h.clone());
            // trajectories never repeat queries
            h.push(step.query, step.answer).expect("trajectory repeats a query");
        }
        out
    }

    pub fn to_record(&self, queries: &QuerySet, labels: &[String]) -> TrajectoryRecord {
        TrajectoryRecord {
            prior: self.prior.probs().to_vec(),
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    query: queries
                        .get(s.query)
                        .map(|q| q.name.clone())
                        .unwrap_or_else(|| s.query.to_string()),
                    query_id: s.query,
                    answer: s.answer,
                    posterior: s.posterior.probs().to_vec(),
                })
                .collect(),
            prediction: labels
                .get(self.prediction)
                .cloned()
                .unwrap_or_else(|| self.prediction.to_string()),
            stop_reason: self.stop_reason,
        }
    }
}

/// JSON form of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub prediction: String,
    pub stop_reason: StopReason,
    #[serde(default)]
    pub prior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub query: String,
    #[serde(default)]
    pub query_id: usize,
    pub answer: f64,
    pub posterior: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(domain: AnswerDomain) -> QuerySpec {
        QuerySpec {
            id: 0,
            name: "fever".into(),
            domain,
        }
    }

    #[test]
    fn encodes_raw_answers() {
        assert_eq!(encode_answer("present", &spec(AnswerDomain::BinaryPM1)).unwrap(), 1.0);
        assert_eq!(encode_answer("absent", &spec(AnswerDomain::BinaryPM1)).unwrap(), -1.0);
        assert_eq!(encode_answer("yes", &spec(AnswerDomain::Binary01)).unwrap(), 1.0);
        assert_eq!(encode_answer("no", &spec(AnswerDomain::Binary01)).unwrap(), 0.0);
        assert_eq!(encode_answer("-1", &spec(AnswerDomain::TernaryPM10)).unwrap(), 0.5);
        assert_eq!(encode_answer("0", &spec(AnswerDomain::TernaryPM10)).unwrap(), -1.0);
        assert!(matches!(
            encode_answer("2", &spec(AnswerDomain::Binary01)),
            Err(Error::IllegalRawValue { .. })
        ));
        assert!(encode_answer("0", &spec(AnswerDomain::BinaryPM1)).is_err());
    }

    #[test]
    fn raw_tokens_invert_encoding() {
        for domain in [AnswerDomain::Binary01, AnswerDomain::BinaryPM1, AnswerDomain::TernaryPM10] {
            for &v in domain.values() {
                assert_eq!(domain.encode(domain.raw_token(v).unwrap()).unwrap(), v);
            }
            assert!(!domain.contains(0.0) || domain == AnswerDomain::Binary01);
        }
    }

    #[test]
    fn query_set_validation_and_json() {
        let qs = QuerySet::uniform(["fever", "cough"], AnswerDomain::Binary01).unwrap();
        let json = serde_json::to_string(&qs).unwrap();
        assert_eq!(
            json,
            r#"{"queries":[{"id":0,"name":"fever","domain":"Binary01"},{"id":1,"name":"cough","domain":"Binary01"}]}"#
        );
        assert_eq!(QuerySet::from_json(&json).unwrap(), qs);
        assert!(QuerySet::new(vec![]).is_err());
        assert!(QuerySet::from_json(r#"{"queries":[{"id":1,"name":"a","domain":"Binary01"}]}"#).is_err());
        assert!(QuerySet::uniform(["a", "a"], AnswerDomain::Binary01).is_err());
    }

    #[test]
    fn append_answer_builds_history() {
        let h = History::empty(4).append_answer(3, 1.0).unwrap();
        assert_eq!(h.to_masked_vector(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(h.order(), &[3]);

        let h2 = h.append_answer(1, -1.0).unwrap();
        assert_eq!(h2.order(), &[3, 1]);
        assert_eq!(h2.len(), 2);
        assert!(matches!(h2.append_answer(3, 1.0), Err(Error::DuplicateQuery(3))));
        assert!(matches!(h2.append_answer(9, 1.0), Err(Error::UnknownQuery { .. })));
    }

    #[test]
    fn masked_vector_cases() {
        assert_eq!(History::empty(4).to_masked_vector(), vec![0.0; 4]);
        let x = AnswerVector::new(vec![-1.0, 1.0, -1.0]);
        let h = History::from_queries(&x, &[1]).unwrap();
        assert_eq!(h.to_masked_vector(), vec![0.0, 1.0, 0.0]);
        assert_eq!(History::full(&x).to_masked_vector(), x.0);
    }

    #[test]
    fn entropy_examples() {
        let h = |p: Vec<f64>| Posterior::new(p).unwrap().entropy();
        assert_eq!(h(vec![1.0, 0.0]), 0.0);
        assert_abs_diff_eq!(h(vec![0.5, 0.5]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h(vec![0.9, 0.1]), 0.469, epsilon = 1e-3);
    }

    #[test]
    fn posterior_validation() {
        assert!(Posterior::new(vec![0.5, 0.6]).is_err());
        assert!(Posterior::new(vec![-0.1, 1.1]).is_err());
        assert!(Posterior::new(vec![f64::NAN, 1.0]).is_err());
        let p = Posterior::from_logits(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn visited_histories_are_prefixes() {
        let prior = Posterior::uniform(2);
        let t = Trajectory {
            prior: prior.clone(),
            steps: vec![
                Step { query: 2, answer: 1.0, posterior: prior.clone() },
                Step { query: 0, answer: -1.0, posterior: prior.clone() },
            ],
            prediction: 0,
            stop_reason: StopReason::FixedBudget,
        };
        let hs = t.visited_histories(3);
        assert_eq!(hs.len(), 2);
        assert!(hs[0].is_empty());
        assert_eq!(hs[1].order(), &[2]);
    }

    proptest! {
        #[test]
        fn masked_vector_zero_exactly_where_unasked(
            answers in prop::collection::vec(prop::bool::ANY, 1..10),
            picks in prop::collection::vec(0usize..10, 0..10),
        ) {
            let x = AnswerVector::new(answers.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect());
            let mut h = History::empty(x.len());
            for q in picks.into_iter().filter(|&q| q < x.len()) {
                let _ = h.push(q, x.get(q));
            }
            let v = h.to_masked_vector();
            for i in 0..x.len() {
                prop_assert_eq!(v[i] == 0.0, !h.is_asked(i));
            }
            let mut sorted = h.order().to_vec();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), h.len());
        }

        #[test]
        fn masked_vector_is_order_insensitive(a in 0usize..6, b in 0usize..6) {
            prop_assume!(a != b);
            let x = AnswerVector::new(vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
            let ab = History::from_queries(&x, &[a, b]).unwrap();
            let ba = History::from_queries(&x, &[b, a]).unwrap();
            prop_assert_eq!(ab.to_masked_vector(), ba.to_masked_vector());
            prop_assert_ne!(ab.order(), ba.order());
        }

        #[test]
        fn entropy_is_maximal_at_uniform(weights in prop::collection::vec(0.0f64..1.0, 2..=8)) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-6);
            let n = weights.len();
            let p = Posterior::new(weights.iter().map(|w| w / total).collect()).unwrap();
            let max = (n as f64).log2();
            prop_assert!(p.entropy() <= max + 1e-12);
            prop_assert!(p.entropy() >= 0.0);
            prop_assert!((Posterior::uniform(n).entropy() - max).abs() < 1e-12);
        }
    }
}
