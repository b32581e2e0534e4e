//! Exact greedy information pursuit on discrete models whose query answers
//! are conditionally independent given the label.
//!
//! For such a model the posterior after any history is
//! `P(y | h) ∝ π(y) · Π_{q ∈ h} P(q = a_q | y)`, and the conditional mutual
//! information of an unasked query is an exact sum over its answer values.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Row};
use crate::pursuit::{pursue, QueryPolicy, StoppingRule};
use crate::query::{entropy_bits, AnswerDomain, AnswerVector, History, Posterior, QuerySet, Trajectory};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Default termination threshold on the best remaining mutual information.
pub const DEFAULT_EPSILON_MI: f64 = 1e-6;

/// Two informations closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

fn default_domain() -> AnswerDomain {
    AnswerDomain::BinaryPM1
}

/// One query's conditional answer table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTable {
    pub name: String,
    #[serde(default = "default_domain")]
    pub domain: AnswerDomain,
    /// `cond[y][a]` is `P(q = domain.values()[a] | Y = y)`.
    pub cond: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct DiscreteJointModel {
    prior: Vec<f64>,
    queries: Vec<QueryTable>,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    prior: Vec<f64>,
    queries: Vec<QueryTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl TryFrom<ModelRepr> for DiscreteJointModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        DiscreteJointModel::new(r.prior, r.queries, r.labels)
    }
}

impl From<DiscreteJointModel> for ModelRepr {
    fn from(m: DiscreteJointModel) -> Self {
        ModelRepr {
            prior: m.prior,
            queries: m.queries,
            labels: Some(m.labels),
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidModel(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidModel(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteJointModel {
    pub fn new(prior: Vec<f64>, queries: Vec<QueryTable>, labels: Option<Vec<String>>) -> Result<Self> {
        let c = prior.len();
        if c == 0 {
            return Err(Error::InvalidModel("empty prior".into()));
        }
        if queries.is_empty() {
            return Err(Error::InvalidModel("no queries".into()));
        }
        check_distribution(&prior, "prior")?;
        for q in &queries {
            if q.cond.len() != c {
                return Err(Error::InvalidModel(format!(
                    "query {:?} has {} rows for {c} labels",
                    q.name,
                    q.cond.len()
                )));
            }
            for (y, row) in q.cond.iter().enumerate() {
                if row.len() != q.domain.arity() {
                    return Err(Error::InvalidModel(format!(
                        "query {:?} row {y} has {} entries for a {}-valued domain",
                        q.name,
                        row.len(),
                        q.domain.arity()
                    )));
                }
                check_distribution(row, &format!("query {:?} row {y}", q.name))?;
            }
        }
        let labels = labels.unwrap_or_else(|| default_label_names(c));
        if labels.len() != c {
            return Err(Error::InvalidModel(format!("{} label names for {c} labels", labels.len())));
        }
        Ok(DiscreteJointModel { prior, queries, labels })
    }

    pub fn num_labels(&self) -> usize {
        self.prior.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn tables(&self) -> &[QueryTable] {
        &self.queries
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn query_set(&self) -> QuerySet {
        let specs = self
            .queries
            .iter()
            .enumerate()
            .map(|(id, q)| crate::query::QuerySpec {
                id,
                name: q.name.clone(),
                domain: q.domain,
            })
            .collect();
        QuerySet::new(specs).expect("model query names are unique")
    }

    /// `P(q = value | Y = y)`.
    pub fn likelihood(&self, q: usize, value: f64, y: usize) -> Result<f64> {
        let table = &self.queries[q];
        let a = table.domain.index_of(value).ok_or_else(|| Error::IllegalRawValue {
            raw: value.to_string(),
            domain: table.domain.to_string(),
        })?;
        Ok(table.cond[y][a])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn check_history(&self, h: &History) -> Result<()> {
        if h.num_queries() != self.num_queries() {
            return Err(Error::QuerySetMismatch(format!(
                "history over {} queries, model has {}",
                h.num_queries(),
                self.num_queries()
            )));
        }
        Ok(())
    }
}

pub(crate) fn default_label_names(c: usize) -> Vec<String> {
    let width = c.saturating_sub(1).to_string().len();
    (0..c).map(|i| format!("y{i:0width$}")).collect()
}

/// Bayes rule under conditional independence; the empty history gives the prior.
pub fn exact_posterior(m: &DiscreteJointModel, h: &History) -> Result<Posterior> {
    m.check_history(h)?;
    let mut log_w: Vec<f64> = m.prior.iter().map(|p| p.ln()).collect();
    for (q, value) in h.answers() {
        for (y, lw) in log_w.iter_mut().enumerate() {
            *lw += m.likelihood(q, value, y)?.ln();
        }
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ZeroProbabilityHistory);
    }
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Posterior::new(w.into_iter().map(|v| v / z).collect())
}

/// `I(q; Y | h)` in bits given the posterior `P(Y | h)`.
pub fn information_given_posterior(m: &DiscreteJointModel, q: usize, posterior: &[f64]) -> f64 {
    let table = &m.queries[q];
    let mut expected = 0.0;
    let mut joint = vec![0.0; posterior.len()];
    for a in 0..table.domain.arity() {
        for (y, j) in joint.iter_mut().enumerate() {
            *j = posterior[y] * table.cond[y][a];
        }
        let pa: f64 = joint.iter().sum();
        if pa <= 0.0 {
            continue;
        }
        for j in joint.iter_mut() {
            *j /= pa;
        }
        expected += pa * entropy_bits(&joint);
    }
    (entropy_bits(posterior) - expected).max(0.0)
}

/// `I(q(X); Y | h) = H(Y | h) - Σ_a P(q = a | h) H(Y | h, q = a)`, in bits.
pub fn conditional_mutual_information(m: &DiscreteJointModel, q: usize, h: &History) -> Result<f64> {
    m.check_history(h)?;
    if q >= m.num_queries() {
        return Err(Error::UnknownQuery {
            id: q,
            size: m.num_queries(),
        });
    }
    if h.is_asked(q) {
        return Err(Error::QueryAlreadyAsked(q));
    }
    let p = exact_posterior(m, h)?;
    Ok(information_given_posterior(m, q, p.probs()))
}

/// Mutual information of every query given `h`; `None` for asked queries.
pub fn information_profile(m: &DiscreteJointModel, h: &History) -> Result<Vec<Option<f64>>> {
    let p = exact_posterior(m, h)?;
    Ok((0..m.num_queries())
        .map(|q| (!h.is_asked(q)).then(|| information_given_posterior(m, q, p.probs())))
        .collect())
}

/// The most informative unasked query and its information. The lowest index
/// wins among queries within [`TIE_TOLERANCE`] of each other.
pub fn ip_choice(m: &DiscreteJointModel, h: &History) -> Result<(usize, f64)> {
    let profile = information_profile(m, h)?;
    let mut best: Option<(usize, f64)> = None;
    for (q, mi) in profile.into_iter().enumerate() {
        let Some(mi) = mi else { continue };
        if best.is_none_or(|(_, b)| mi > b + TIE_TOLERANCE) {
            best = Some((q, mi));
        }
    }
    best.ok_or(Error::QueriesExhausted)
}

pub fn ip_next_query(m: &DiscreteJointModel, h: &History) -> Result<usize> {
    ip_choice(m, h).map(|(q, _)| q)
}

/// Greedy IP as a [`QueryPolicy`]. With `epsilon_mi` set, the policy stops
/// once no unasked query carries more than that many bits.
#[derive(Clone, Debug)]
pub struct IpPolicy<'a> {
    pub model: &'a DiscreteJointModel,
    pub epsilon_mi: Option<f64>,
}

impl<'a> IpPolicy<'a> {
    pub fn new(model: &'a DiscreteJointModel) -> Self {
        IpPolicy { model, epsilon_mi: None }
    }

    pub fn with_epsilon(model: &'a DiscreteJointModel, epsilon_mi: f64) -> Self {
        IpPolicy {
            model,
            epsilon_mi: Some(epsilon_mi),
        }
    }
}

impl QueryPolicy for IpPolicy<'_> {
    fn choose(&mut self, history: &History) -> Result<Option<usize>> {
        let (q, mi) = ip_choice(self.model, history)?;
        match self.epsilon_mi {
            Some(eps) if mi <= eps => Ok(None),
            _ => Ok(Some(q)),
        }
    }
}

/// Greedy IP on `x` with exact posteriors.
pub fn run_exact_ip(m: &DiscreteJointModel, x: &AnswerVector, stop: StoppingRule) -> Result<Trajectory> {
    run_exact_ip_with(m, x, stop, None)
}

/// [`run_exact_ip`] that also stops, with
/// [`StopReason::InformationExhausted`](crate::query::StopReason), when the best
/// remaining query carries at most `epsilon_mi` bits.
pub fn run_exact_ip_with(
    m: &DiscreteJointModel,
    x: &AnswerVector,
    stop: StoppingRule,
    epsilon_mi: Option<f64>,
) -> Result<Trajectory> {
    let mut policy = IpPolicy { model: m, epsilon_mi };
    pursue(x, &mut policy, &mut |h: &History| exact_posterior(m, h), stop)
}

fn sample_categorical<R: rand::Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last nonzero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `n` labeled rows: `y ~ π`, then each answer from its table.
pub fn sample_from_model(m: &DiscreteJointModel, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream_rng(seed, 0);
    let rows = (0..n)
        .map(|_| {
            let y = sample_categorical(&m.prior, &mut rng);
            let answers = m
                .queries
                .iter()
                .map(|t| t.domain.values()[sample_categorical(&t.cond[y], &mut rng)])
                .collect();
            Row {
                answers: AnswerVector::new(answers),
                label: y,
            }
        })
        .collect();
    Dataset::new(m.query_set(), m.labels.clone(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::StopReason;
    use approx::assert_abs_diff_eq;

    fn binary(name: &str, p_pos_y0: f64, p_pos_y1: f64) -> QueryTable {
        // BinaryPM1 order is [-1, +1]
        QueryTable {
            name: name.into(),
            domain: AnswerDomain::BinaryPM1,
            cond: vec![vec![1.0 - p_pos_y0, p_pos_y0], vec![1.0 - p_pos_y1, p_pos_y1]],
        }
    }

    fn two_query_model() -> DiscreteJointModel {
        DiscreteJointModel::new(vec![0.5, 0.5], vec![binary("a", 0.9, 0.1), binary("b", 0.6, 0.4)], None).unwrap()
    }

    fn h2(x: f64) -> f64 {
        -(x * x.log2() + (1.0 - x) * (1.0 - x).log2())
    }

    #[test]
    fn posterior_examples() {
        let m = two_query_model();
        assert_eq!(exact_posterior(&m, &History::empty(2)).unwrap().probs(), &[0.5, 0.5]);
        let h = History::empty(2).append_answer(0, 1.0).unwrap();
        let p = exact_posterior(&m, &h).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[1], 0.1, epsilon = 1e-12);

        let flat = DiscreteJointModel::new(vec![0.3, 0.7], vec![binary("f", 0.4, 0.4)], None).unwrap();
        let h = History::empty(1).append_answer(0, -1.0).unwrap();
        let p = exact_posterior(&flat, &h).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn zero_probability_history() {
        let m = DiscreteJointModel::new(vec![0.5, 0.5], vec![binary("d", 1.0, 1.0)], None).unwrap();
        let h = History::empty(1).append_answer(0, -1.0).unwrap();
        assert!(matches!(exact_posterior(&m, &h), Err(Error::ZeroProbabilityHistory)));
    }

    #[test]
    fn information_examples() {
        let m = two_query_model();
        let empty = History::empty(2);
        let ia = conditional_mutual_information(&m, 0, &empty).unwrap();
        let ib = conditional_mutual_information(&m, 1, &empty).unwrap();
        assert_abs_diff_eq!(ia, 1.0 - h2(0.9), epsilon = 1e-12);
        assert_abs_diff_eq!(ia, 0.531, epsilon = 1e-3);
        assert_abs_diff_eq!(ib, 0.029, epsilon = 1e-3);
        assert_eq!(ip_next_query(&m, &empty).unwrap(), 0);

        let asked = empty.append_answer(0, 1.0).unwrap();
        assert!(matches!(
            conditional_mutual_information(&m, 0, &asked),
            Err(Error::QueryAlreadyAsked(0))
        ));
        let full = asked.append_answer(1, 1.0).unwrap();
        assert!(matches!(ip_next_query(&m, &full), Err(Error::QueriesExhausted)));
    }

    #[test]
    fn uninformative_queries_tie_to_lowest_index() {
        let m = DiscreteJointModel::new(
            vec![0.5, 0.5],
            vec![binary("a", 0.3, 0.3), binary("b", 0.7, 0.7), binary("c", 0.5, 0.5)],
            None,
        )
        .unwrap();
        let h = History::empty(3).append_answer(0, 1.0).unwrap();
        let (q, mi) = ip_choice(&m, &h).unwrap();
        assert_eq!(q, 1);
        assert_eq!(mi, 0.0);
    }

    #[test]
    fn determining_query_zeroes_information() {
        let m = DiscreteJointModel::new(
            vec![0.5, 0.5],
            vec![binary("det", 0.0, 1.0), binary("a", 0.9, 0.2), binary("b", 0.6, 0.3)],
            None,
        )
        .unwrap();
        let h = History::empty(3).append_answer(0, 1.0).unwrap();
        for mi in information_profile(&m, &h).unwrap().into_iter().flatten() {
            assert_eq!(mi, 0.0);
        }
    }

    #[test]
    fn exact_ip_runs() {
        let m = DiscreteJointModel::new(
            vec![0.5, 0.5],
            vec![binary("noise", 0.5, 0.5), binary("planted", 0.0, 1.0), binary("weak", 0.6, 0.4)],
            None,
        )
        .unwrap();
        let x = AnswerVector::new(vec![1.0, 1.0, -1.0]);
        let t = run_exact_ip(&m, &x, StoppingRule::FixedBudget(3)).unwrap();
        assert_eq!(t.steps[0].query, 1);
        assert_eq!(t.len(), 3);
        assert_eq!(t.prediction, 1);
        let one = run_exact_ip(&m, &x, StoppingRule::FixedBudget(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.stop_reason, StopReason::FixedBudget);
        let early = run_exact_ip_with(&m, &x, StoppingRule::FixedBudget(3), Some(DEFAULT_EPSILON_MI)).unwrap();
        assert_eq!(early.len(), 1);
        assert_eq!(early.stop_reason, StopReason::InformationExhausted);
    }

    #[test]
    fn sampling_examples() {
        let m = two_query_model();
        assert!(sample_from_model(&m, 0, 1).is_err());
        let n = 10_000;
        let ds = sample_from_model(&m, n, 3).unwrap();
        let ones = ds.rows().iter().filter(|r| r.label == 1).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() < 3.0 * sigma);
        assert_eq!(sample_from_model(&m, 50, 9).unwrap(), sample_from_model(&m, 50, 9).unwrap());

        let det = DiscreteJointModel::new(vec![0.5, 0.5], vec![binary("d", 0.0, 1.0), binary("e", 1.0, 0.0)], None)
            .unwrap();
        for r in sample_from_model(&det, 200, 4).unwrap().rows() {
            let expect = if r.label == 1 { vec![1.0, -1.0] } else { vec![-1.0, 1.0] };
            assert_eq!(r.answers.0, expect);
        }
    }

    #[test]
    fn model_json_round_trip_and_validation() {
        let m = two_query_model();
        let json = m.to_json().unwrap();
        assert_eq!(DiscreteJointModel::from_json(&json).unwrap(), m);
        let plain = r#"{"prior":[0.5,0.5],"queries":[{"name":"a","cond":[[0.1,0.9],[0.9,0.1]]}]}"#;
        let parsed = DiscreteJointModel::from_json(plain).unwrap();
        assert_eq!(parsed.tables()[0].domain, AnswerDomain::BinaryPM1);
        assert!(DiscreteJointModel::from_json(r#"{"prior":[0.5,0.6],"queries":[{"name":"a","cond":[[0.1,0.9],[0.9,0.1]]}]}"#).is_err());
        assert!(DiscreteJointModel::from_json(r#"{"prior":[0.5,0.5],"queries":[{"name":"a","cond":[[0.2,0.9],[0.9,0.1]]}]}"#).is_err());
    }
}
