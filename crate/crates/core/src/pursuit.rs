//! Sequential inference: ask, observe, classify, and decide whether to stop.

use std::fmt;
use std::str::FromStr;

use rand::seq::IteratorRandom;
use serde::{Deserialize, Serialize};

use crate::data::Row;
use crate::networks::{ClassifierNet, QuerierNet};
use crate::query::{AnswerVector, History, Posterior, Step, StopReason, Trajectory};
use crate::rng::{stream_rng, Rng};
use crate::{Error, Result};

/// When a pursuit run ends. Every run also ends once all queries are asked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StoppingRule {
    /// Stop after exactly this many queries.
    FixedBudget(usize),
    /// Stop once the largest posterior probability reaches `1 - epsilon`.
    Map { epsilon: f64 },
    /// Stop once the posterior entropy has dropped by at most `epsilon` bits
    /// on `patience` consecutive steps.
    Stability { epsilon: f64, patience: usize },
}

impl StoppingRule {
    pub fn map(epsilon: f64) -> Self {
        StoppingRule::Map { epsilon }
    }

    pub fn stability(epsilon: f64) -> Self {
        StoppingRule::Stability { epsilon, patience: 1 }
    }

    pub fn validate(&self, num_queries: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidStoppingRule(msg));
        match *self {
            StoppingRule::FixedBudget(n) if n == 0 || n > num_queries => {
                bad(format!("budget {n} outside [1, {num_queries}]"))
            }
            StoppingRule::Map { epsilon } if !(epsilon > 0.0 && epsilon < 1.0) => {
                bad(format!("map epsilon {epsilon} outside (0, 1)"))
            }
            StoppingRule::Stability { epsilon, .. } if !(epsilon >= 0.0) || !epsilon.is_finite() => {
                bad(format!("stability epsilon {epsilon} must be nonnegative"))
            }
            StoppingRule::Stability { patience: 0, .. } => bad("stability patience must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoppingRule::FixedBudget(n) => write!(f, "budget:{n}"),
            StoppingRule::Map { epsilon } => write!(f, "map:{epsilon}"),
            StoppingRule::Stability { epsilon, patience } => write!(f, "stability:{epsilon}:{patience}"),
        }
    }
}

/// Parses `budget:N`, `map:EPS`, `stability:EPS` or `stability:EPS:PATIENCE`.
/// Range checks need `|Q|` and happen in [`StoppingRule::validate`].
impl FromStr for StoppingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidStoppingRule(format!("cannot parse {s:?}"));
        let mut parts = s.trim().split(':');
        let kind = parts.next().ok_or_else(bad)?.to_ascii_lowercase();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<f64> { args.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
        let int = |i: usize| -> Result<usize> { args.get(i).ok_or_else(bad)?.parse::<usize>().map_err(|_| bad()) };
        let rule = match (kind.as_str(), args.len()) {
            ("budget" | "fixed", 1) => StoppingRule::FixedBudget(int(0)?),
            ("map", 1) => StoppingRule::Map { epsilon: num(0)? },
            ("stability", 1) => StoppingRule::Stability {
                epsilon: num(0)?,
                patience: 1,
            },
            ("stability", 2) => StoppingRule::Stability {
                epsilon: num(0)?,
                patience: int(1)?,
            },
            _ => return Err(bad()),
        };
        Ok(rule)
    }
}

/// Tracks one run against a [`StoppingRule`].
#[derive(Clone, Debug)]
pub struct StopMonitor {
    rule: StoppingRule,
    last_entropy: f64,
    streak: usize,
}

impl StopMonitor {
    pub fn new(rule: StoppingRule, prior: &Posterior) -> Self {
        StopMonitor {
            rule,
            last_entropy: prior.entropy(),
            streak: 0,
        }
    }

    pub fn rule(&self) -> StoppingRule {
        self.rule
    }

    /// Feeds the posterior after the `asked`-th query; returns the reason if
    /// the run should stop here.
    pub fn observe(&mut self, posterior: &Posterior, asked: usize, num_queries: usize) -> Option<StopReason> {
        let entropy = posterior.entropy();
        let drop = self.last_entropy - entropy;
        self.last_entropy = entropy;
        let fired = match self.rule {
            StoppingRule::FixedBudget(n) => (asked >= n).then_some(StopReason::FixedBudget),
            StoppingRule::Map { epsilon } => (posterior.max_prob() >= 1.0 - epsilon).then_some(StopReason::MapThreshold),
            StoppingRule::Stability { epsilon, patience } => {
                // an entropy increase is not a small drop and resets the streak
                if (0.0..=epsilon).contains(&drop) {
                    self.streak += 1;
                } else {
                    self.streak = 0;
                }
                (self.streak >= patience).then_some(StopReason::StabilityThreshold)
            }
        };
        fired.or_else(|| (asked >= num_queries).then_some(StopReason::QueriesExhausted))
    }
}

/// Chooses queries during a run.
pub trait QueryPolicy {
    /// The next query to ask, or `None` to end the run early. Must never
    /// return an asked query.
    fn choose(&mut self, history: &History) -> Result<Option<usize>>;
}

/// Masked argmax of the querier scores.
#[derive(Clone, Copy, Debug)]
pub struct LearnedPolicy<'a>(pub &'a QuerierNet);

impl QueryPolicy for LearnedPolicy<'_> {
    fn choose(&mut self, history: &History) -> Result<Option<usize>> {
        self.0.choose(history).map(Some)
    }
}

/// Uniform over unasked queries, ignoring the answers.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64, stream: u64) -> Self {
        RandomPolicy {
            rng: stream_rng(seed, stream),
        }
    }
}

impl QueryPolicy for RandomPolicy {
    fn choose(&mut self, history: &History) -> Result<Option<usize>> {
        history
            .unasked()
            .choose(&mut self.rng)
            .map(Some)
            .ok_or(Error::QueriesExhausted)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Strategy<'a> {
    Learned(&'a QuerierNet),
    Random { seed: u64 },
}

impl<'a> Strategy<'a> {
    /// Policy for the data point with index `stream`; random strategies draw
    /// an independent stream per data point.
    pub fn policy(&self, stream: u64) -> Box<dyn QueryPolicy + 'a> {
        match *self {
            Strategy::Learned(q) => Box::new(LearnedPolicy(q)),
            Strategy::Random { seed } => Box::new(RandomPolicy::new(seed, stream)),
        }
    }
}

/// One decision of `policy`; fails when nothing is left to ask.
pub fn next_query(policy: &mut dyn QueryPolicy, history: &History) -> Result<usize> {
    if history.unasked().next().is_none() {
        return Err(Error::QueriesExhausted);
    }
    policy.choose(history)?.ok_or(Error::QueriesExhausted)
}

/// Generic pursuit loop shared by the learned, random and exact strategies.
/// `posterior_of` maps a history to the current belief.
pub fn pursue(
    x: &AnswerVector,
    policy: &mut dyn QueryPolicy,
    posterior_of: &mut dyn FnMut(&History) -> Result<Posterior>,
    stop: StoppingRule,
) -> Result<Trajectory> {
    let n = x.len();
    stop.validate(n)?;
    let mut history = History::empty(n);
    let prior = posterior_of(&history)?;
    let mut monitor = StopMonitor::new(stop, &prior);
    let mut steps: Vec<Step> = Vec::new();
    let stop_reason = loop {
        let Some(q) = policy.choose(&history)? else {
            break StopReason::InformationExhausted;
        };
        let answer = x.get(q);
        history.push(q, answer)?;
        let posterior = posterior_of(&history)?;
        let reason = monitor.observe(&posterior, history.len(), n);
        steps.push(Step { query: q, answer, posterior });
        if let Some(reason) = reason {
            break reason;
        }
    };
    let prediction = steps.last().map(|s| &s.posterior).unwrap_or(&prior).argmax();
    Ok(Trajectory {
        prior,
        steps,
        prediction,
        stop_reason,
    })
}

pub fn run_pursuit(
    x: &AnswerVector,
    strategy: &Strategy<'_>,
    classifier: &ClassifierNet,
    stop: StoppingRule,
) -> Result<Trajectory> {
    run_pursuit_indexed(x, 0, strategy, classifier, stop)
}

/// [`run_pursuit`] for the data point with index `stream`.
pub fn run_pursuit_indexed(
    x: &AnswerVector,
    stream: u64,
    strategy: &Strategy<'_>,
    classifier: &ClassifierNet,
    stop: StoppingRule,
) -> Result<Trajectory> {
    check_widths(x, strategy, classifier)?;
    let mut policy = strategy.policy(stream);
    pursue(x, policy.as_mut(), &mut |h: &History| classifier.posterior(h), stop)
}

fn check_widths(x: &AnswerVector, strategy: &Strategy<'_>, classifier: &ClassifierNet) -> Result<()> {
    let q = x.len();
    let querier_ok = match strategy {
        Strategy::Learned(net) => net.num_queries() == q,
        Strategy::Random { .. } => true,
    };
    if classifier.num_queries() != q || !querier_ok {
        return Err(Error::QuerySetMismatch(format!(
            "data point has {q} answers, networks expect {}",
            classifier.num_queries()
        )));
    }
    Ok(())
}

/// Runs every row to completion under `stop`, stepping all rows together so
/// each step costs one batched forward pass per network. Row `i` uses policy
/// stream `i`; results equal [`run_pursuit_indexed`] row by row.
pub fn run_pursuit_batch(
    xs: &[&AnswerVector],
    strategy: &Strategy<'_>,
    classifier: &ClassifierNet,
    stop: StoppingRule,
) -> Result<Vec<Trajectory>> {
    let Some(first) = xs.first() else { return Ok(Vec::new()) };
    let n = first.len();
    for x in xs {
        check_widths(x, strategy, classifier)?;
    }
    stop.validate(n)?;
    let mut random: Vec<Option<RandomPolicy>> = xs
        .iter()
        .enumerate()
        .map(|(i, _)| match strategy {
            Strategy::Random { seed } => Some(RandomPolicy::new(*seed, i as u64)),
            Strategy::Learned(_) => None,
        })
        .collect();

    let mut histories: Vec<History> = xs.iter().map(|_| History::empty(n)).collect();
    let priors = classifier.posteriors(&histories)?;
    let mut monitors: Vec<StopMonitor> = priors.iter().map(|p| StopMonitor::new(stop, p)).collect();
    let mut steps: Vec<Vec<Step>> = vec![Vec::new(); xs.len()];
    let mut reasons: Vec<Option<StopReason>> = vec![None; xs.len()];

    loop {
        let active: Vec<usize> = (0..xs.len()).filter(|&i| reasons[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let picks: Vec<usize> = match strategy {
            Strategy::Learned(q) => {
                let refs: Vec<&History> = active.iter().map(|&i| &histories[i]).collect();
                q.choose_batch(&refs)?
            }
            Strategy::Random { .. } => active
                .iter()
                .map(|&i| next_query(random[i].as_mut().expect("random policy"), &histories[i]))
                .collect::<Result<_>>()?,
        };
        for (&i, &q) in active.iter().zip(&picks) {
            histories[i].push(q, xs[i].get(q))?;
        }
        let current: Vec<History> = active.iter().map(|&i| histories[i].clone()).collect();
        let posteriors = classifier.posteriors(&current)?;
        for ((&i, &q), posterior) in active.iter().zip(&picks).zip(posteriors) {
            reasons[i] = monitors[i].observe(&posterior, histories[i].len(), n);
            steps[i].push(Step {
                query: q,
                answer: xs[i].get(q),
                posterior,
            });
        }
    }

    Ok(priors
        .into_iter()
        .zip(steps)
        .zip(reasons)
        .map(|((prior, steps), reason)| {
            let prediction = steps.last().map(|s| &s.posterior).unwrap_or(&prior).argmax();
            Trajectory {
                prior,
                steps,
                prediction,
                stop_reason: reason.expect("every row stopped"),
            }
        })
        .collect())
}

/// Accuracy after exactly `b` queries for every `b` in `budgets`, from one
/// pass of fixed-budget runs to the largest budget.
pub fn batch_evaluate(
    rows: &[Row],
    strategy: &Strategy<'_>,
    classifier: &ClassifierNet,
    budgets: &[usize],
) -> Result<Vec<f64>> {
    let Some(&max_budget) = budgets.iter().max() else { return Ok(Vec::new()) };
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows[0].answers.len();
    if budgets.contains(&0) || max_budget > n {
        return Err(Error::InvalidStoppingRule(format!("budgets must lie in [1, {n}]")));
    }
    let xs: Vec<&AnswerVector> = rows.iter().map(|r| &r.answers).collect();
    let runs = run_pursuit_batch(&xs, strategy, classifier, StoppingRule::FixedBudget(max_budget))?;
    Ok(budgets
        .iter()
        .map(|&b| {
            let correct = runs
                .iter()
                .zip(rows)
                .filter(|(t, r)| t.steps[b - 1].posterior.argmax() == r.label)
                .count();
            correct as f64 / rows.len() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn nets(q: usize, c: usize, seed: u64) -> (ClassifierNet, QuerierNet) {
        let mut rng = stream_rng(seed, 0);
        (
            ClassifierNet::new(q, &[16], c, &mut rng).unwrap(),
            QuerierNet::new(q, &[16], &mut rng).unwrap(),
        )
    }

    /// Policy with fixed scores, for exercising the masked argmax.
    struct Scores(Vec<f64>);

    impl QueryPolicy for Scores {
        fn choose(&mut self, h: &History) -> Result<Option<usize>> {
            Ok(crate::networks::masked_argmax(&self.0, h.mask()))
        }
    }

    #[test]
    fn next_query_examples() {
        let mut p = Scores(vec![5.0, 1.0, 0.0]);
        let empty = History::empty(3);
        assert_eq!(next_query(&mut p, &empty).unwrap(), 0);
        let h = empty.append_answer(0, 1.0).unwrap();
        assert_eq!(next_query(&mut p, &h).unwrap(), 1);
        let h2 = h.append_answer(1, 1.0).unwrap();
        assert_eq!(next_query(&mut p, &h2).unwrap(), 2);
        assert_eq!(next_query(&mut RandomPolicy::new(1, 0), &h2).unwrap(), 2);
        let full = h2.append_answer(2, 1.0).unwrap();
        assert!(matches!(next_query(&mut p, &full), Err(Error::QueriesExhausted)));
    }

    #[test]
    fn stopping_rule_parsing_and_validation() {
        assert_eq!("map:0.05".parse::<StoppingRule>().unwrap(), StoppingRule::map(0.05));
        assert_eq!("budget:3".parse::<StoppingRule>().unwrap(), StoppingRule::FixedBudget(3));
        assert_eq!(
            "stability:0.1:2".parse::<StoppingRule>().unwrap(),
            StoppingRule::Stability { epsilon: 0.1, patience: 2 }
        );
        assert!("map".parse::<StoppingRule>().is_err());
        assert!("wat:1".parse::<StoppingRule>().is_err());
        assert!(StoppingRule::map(2.0).validate(4).is_err());
        assert!(StoppingRule::map(0.0).validate(4).is_err());
        assert!(StoppingRule::FixedBudget(0).validate(4).is_err());
        assert!(StoppingRule::FixedBudget(5).validate(4).is_err());
        assert!(StoppingRule::Stability { epsilon: 0.1, patience: 0 }.validate(4).is_err());
        for rule in [StoppingRule::map(0.25), StoppingRule::FixedBudget(2), StoppingRule::stability(0.5)] {
            assert_eq!(rule.to_string().parse::<StoppingRule>().unwrap(), rule);
        }
    }

    #[test]
    fn loose_map_stops_after_one_query() {
        let (c, q) = nets(4, 3, 1);
        let x = AnswerVector::new(vec![1.0, -1.0, 1.0, 1.0]);
        let t = run_pursuit(&x, &Strategy::Learned(&q), &c, StoppingRule::map(0.999)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.stop_reason, StopReason::MapThreshold);
    }

    #[test]
    fn full_budget_asks_everything() {
        let (c, q) = nets(4, 3, 2);
        let x = AnswerVector::new(vec![1.0, -1.0, 1.0, 1.0]);
        for strategy in [Strategy::Learned(&q), Strategy::Random { seed: 4 }] {
            let t = run_pursuit(&x, &strategy, &c, StoppingRule::FixedBudget(4)).unwrap();
            let mut ids = t.queries();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3]);
            assert_eq!(t.stop_reason, StopReason::FixedBudget);
            assert_eq!(t.prediction, t.final_posterior().argmax());
        }
    }

    #[test]
    fn unreachable_rule_exhausts_queries() {
        let (c, q) = nets(3, 2, 3);
        let x = AnswerVector::new(vec![1.0, -1.0, 1.0]);
        let t = run_pursuit(&x, &Strategy::Learned(&q), &c, StoppingRule::map(1e-300)).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.stop_reason, StopReason::QueriesExhausted);
    }

    #[test]
    fn stability_streak() {
        let p = |v: Vec<f64>| Posterior::new(v).unwrap();
        let rule = StoppingRule::Stability { epsilon: 0.05, patience: 2 };
        let mut m = StopMonitor::new(rule, &p(vec![0.5, 0.5]));
        assert_eq!(m.observe(&p(vec![0.9, 0.1]), 1, 10), None); // big drop
        assert_eq!(m.observe(&p(vec![0.905, 0.095]), 2, 10), None); // small drop, streak 1
        assert_eq!(m.observe(&p(vec![0.8, 0.2]), 3, 10), None); // increase resets
        assert_eq!(m.observe(&p(vec![0.801, 0.199]), 4, 10), None);
        assert_eq!(m.observe(&p(vec![0.802, 0.198]), 5, 10), Some(StopReason::StabilityThreshold));
    }

    #[test]
    fn batch_runs_match_single_runs() {
        let (c, q) = nets(5, 3, 4);
        let xs: Vec<AnswerVector> = (0..7)
            .map(|i| AnswerVector::new((0..5).map(|j| if (i * 3 + j) % 4 < 2 { 1.0 } else { -1.0 }).collect()))
            .collect();
        let refs: Vec<&AnswerVector> = xs.iter().collect();
        for strategy in [Strategy::Learned(&q), Strategy::Random { seed: 9 }] {
            for rule in [StoppingRule::map(0.3), StoppingRule::FixedBudget(3), StoppingRule::stability(0.01)] {
                let batch = run_pursuit_batch(&refs, &strategy, &c, rule).unwrap();
                for (i, t) in batch.iter().enumerate() {
                    let single = run_pursuit_indexed(&xs[i], i as u64, &strategy, &c, rule).unwrap();
                    assert_eq!(*t, single);
                }
            }
        }
    }

    #[test]
    fn batch_evaluate_ranges() {
        let (c, q) = nets(4, 2, 5);
        let rows: Vec<Row> = (0..20)
            .map(|i| Row {
                answers: AnswerVector::new((0..4).map(|j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }).collect()),
                label: i % 2,
            })
            .collect();
        let acc = batch_evaluate(&rows, &Strategy::Learned(&q), &c, &[1, 2, 4]).unwrap();
        assert_eq!(acc.len(), 3);
        assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
        // with every query asked the strategy no longer matters
        let full_random = batch_evaluate(&rows, &Strategy::Random { seed: 1 }, &c, &[4]).unwrap();
        let direct = rows
            .iter()
            .filter(|r| c.posterior(&History::full(&r.answers)).unwrap().argmax() == r.label)
            .count() as f64
            / rows.len() as f64;
        assert_eq!(acc[2], direct);
        assert_eq!(full_random[0], direct);
        assert!(batch_evaluate(&rows, &Strategy::Learned(&q), &c, &[5]).is_err());
    }
}
