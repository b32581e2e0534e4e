//! Accuracy curves, normalized AUC and agreement with the exact oracle.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Row;
use crate::networks::ClassifierNet;
use crate::oracle::{information_profile, DiscreteJointModel};
use crate::pursuit::{batch_evaluate, run_pursuit_batch, QueryPolicy, StoppingRule, Strategy};
use crate::query::{AnswerVector, History, Trajectory};
use crate::{Error, Result};

/// Default tolerance, in bits, for counting a choice as MI-optimal.
pub const DEFAULT_AGREEMENT_EPSILON: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub mean_length: f64,
    pub accuracy: f64,
}

/// Which stopping rule an ε sweep parameterizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepRule {
    Map,
    Stability { patience: usize },
}

impl SweepRule {
    pub fn rule(self, epsilon: f64) -> StoppingRule {
        match self {
            SweepRule::Map => StoppingRule::Map { epsilon },
            SweepRule::Stability { patience } => StoppingRule::Stability { epsilon, patience },
        }
    }
}

/// One pursuit pass over `rows` per ε; points come back sorted by mean length.
pub fn accuracy_vs_length_curve(
    rows: &[Row],
    strategy: &Strategy<'_>,
    classifier: &ClassifierNet,
    rule: SweepRule,
    sweep: &[f64],
) -> Result<Vec<CurvePoint>> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs: Vec<&AnswerVector> = rows.iter().map(|r| &r.answers).collect();
    let mut points = Vec::with_capacity(sweep.len());
    for &epsilon in sweep {
        let runs = run_pursuit_batch(&xs, strategy, classifier, rule.rule(epsilon))?;
        let correct = runs.iter().zip(rows).filter(|(t, r)| t.prediction == r.label).count();
        let total_len: usize = runs.iter().map(Trajectory::len).sum();
        points.push(CurvePoint {
            epsilon,
            mean_length: total_len as f64 / rows.len() as f64,
            accuracy: correct as f64 / rows.len() as f64,
        });
    }
    points.sort_by(|a, b| a.mean_length.total_cmp(&b.mean_length).then(a.epsilon.total_cmp(&b.epsilon)));
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: usize,
    pub accuracy: f64,
}

/// Accuracy at every budget `1..=|Q|`.
pub fn budget_curve(rows: &[Row], strategy: &Strategy<'_>, classifier: &ClassifierNet) -> Result<Vec<BudgetPoint>> {
    let budgets: Vec<usize> = (1..=classifier.num_queries()).collect();
    let acc = batch_evaluate(rows, strategy, classifier, &budgets)?;
    Ok(budgets
        .into_iter()
        .zip(acc)
        .map(|(budget, accuracy)| BudgetPoint { budget, accuracy })
        .collect())
}

/// Trapezoidal area under accuracy over budgets `1..=num_queries`, divided
/// by the span `num_queries - 1`. A single-query curve returns its accuracy.
pub fn normalized_auc(curve: &[BudgetPoint], num_queries: usize) -> Result<f64> {
    let mut acc = vec![None; num_queries];
    for p in curve {
        if (1..=num_queries).contains(&p.budget) {
            acc[p.budget - 1] = Some(p.accuracy);
        }
    }
    let found = acc.iter().filter(|a| a.is_some()).count();
    if num_queries == 0 || found != num_queries {
        return Err(Error::IncompleteCurve {
            expected: num_queries,
            found,
        });
    }
    let acc: Vec<f64> = acc.into_iter().map(Option::unwrap).collect();
    if num_queries == 1 {
        return Ok(acc[0]);
    }
    let area: f64 = acc.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / (num_queries - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Histories where the choice was within ε of the best available MI.
    pub agreeing: usize,
    /// Histories with at least one unasked query.
    pub total: usize,
    /// Choices that were exactly the lowest-index maximizer.
    pub exact: usize,
    pub epsilon_mi: f64,
}

impl Agreement {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.agreeing as f64 / self.total as f64
        }
    }
}

/// Scores `policy`'s choice at each history against the exact conditional
/// mutual information under `model`.
pub fn oracle_agreement(
    policy: &mut dyn QueryPolicy,
    model: &DiscreteJointModel,
    histories: &[History],
    epsilon_mi: f64,
) -> Result<Agreement> {
    let mut out = Agreement {
        agreeing: 0,
        total: 0,
        exact: 0,
        epsilon_mi,
    };
    for h in histories {
        if h.num_queries() != model.num_queries() {
            return Err(Error::QuerySetMismatch(format!(
                "history has {} queries, model has {}",
                h.num_queries(),
                model.num_queries()
            )));
        }
        if h.len() == h.num_queries() {
            continue;
        }
        let profile = information_profile(model, h)?;
        let Some(q) = policy.choose(h)? else { continue };
        let chosen = profile[q].ok_or(Error::QueryAlreadyAsked(q))?;
        let best = profile.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first_best = profile.iter().position(|m| *m == Some(best));
        out.total += 1;
        if chosen >= best - epsilon_mi {
            out.agreeing += 1;
        }
        if first_best == Some(q) {
            out.exact += 1;
        }
    }
    Ok(out)
}

/// Every history at which a query was chosen along `trajectories`.
pub fn visited_histories(trajectories: &[Trajectory], num_queries: usize) -> Vec<History> {
    trajectories.iter().flat_map(|t| t.visited_histories(num_queries)).collect()
}

/// gnuplot-friendly CSV: `epsilon,mean_length,accuracy`.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with a header `budget,<name>,...`, one column per curve.
pub fn write_budget_csv<W: Write>(curves: &[(&str, &[BudgetPoint])], out: W) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = std::iter::once("budget").chain(curves.iter().map(|(n, _)| *n)).collect();
    w.write_record(&header).map_err(to_io)?;
    let len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for i in 0..len {
        let budget = curves
            .iter()
            .find_map(|(_, c)| c.get(i).map(|p| p.budget))
            .expect("some curve has point i");
        let mut record = vec![budget.to_string()];
        for (_, c) in curves {
            record.push(c.get(i).map(|p| p.accuracy.to_string()).unwrap_or_default());
        }
        w.write_record(&record).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{run_exact_ip, IpPolicy, QueryTable};
    use crate::query::AnswerDomain;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn curve(acc: &[f64]) -> Vec<BudgetPoint> {
        acc.iter()
            .enumerate()
            .map(|(i, &accuracy)| BudgetPoint { budget: i + 1, accuracy })
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert!((normalized_auc(&curve(&[0.7; 5]), 5).unwrap() - 0.7).abs() < 1e-15);
        assert!((normalized_auc(&curve(&[0.0, 0.25, 0.5, 0.75, 1.0]), 5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(normalized_auc(&curve(&[0.4]), 1).unwrap(), 0.4);
        assert!(matches!(
            normalized_auc(&curve(&[0.1, 0.2]), 3),
            Err(Error::IncompleteCurve { expected: 3, found: 2 })
        ));
    }

    proptest! {
        #[test]
        fn auc_is_bounded_and_monotone(
            acc in prop::collection::vec(0.0f64..=1.0, 1..12),
            bump in prop::collection::vec(0.0f64..=1.0, 12),
        ) {
            let n = acc.len();
            let base = normalized_auc(&curve(&acc), n).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let higher: Vec<f64> = acc.iter().zip(&bump).map(|(a, b)| a + (1.0 - a) * b).collect();
            prop_assert!(normalized_auc(&curve(&higher), n).unwrap() >= base - 1e-15);
        }
    }

    fn random_model(seed: u64, c: usize, q: usize) -> DiscreteJointModel {
        let mut rng = stream_rng(seed, 0);
        let mut prior: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= z);
        let tables = (0..q)
            .map(|i| QueryTable {
                name: format!("q{i}"),
                domain: AnswerDomain::BinaryPM1,
                cond: (0..c)
                    .map(|_| {
                        let p = rng.gen_range(0.05..0.95);
                        vec![1.0 - p, p]
                    })
                    .collect(),
            })
            .collect();
        DiscreteJointModel::new(prior, tables, None).unwrap()
    }

    fn all_histories(x: &AnswerVector) -> Vec<History> {
        let n = x.len();
        (0..(1u32 << n))
            .map(|bits| {
                let ids: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
                History::from_queries(x, &ids).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_agrees_with_itself() {
        let m = random_model(1, 3, 4);
        let x = AnswerVector::new(vec![1.0, -1.0, -1.0, 1.0]);
        let hs = all_histories(&x);
        let a = oracle_agreement(&mut IpPolicy::new(&m), &m, &hs, 0.0).unwrap();
        assert_eq!(a.rate(), 1.0);
        assert_eq!(a.exact, a.total);
        assert_eq!(a.total, hs.len() - 1);

        let t = run_exact_ip(&m, &x, StoppingRule::FixedBudget(4)).unwrap();
        let visited = visited_histories(&[t], 4);
        assert_eq!(visited.len(), 4);
        assert_eq!(oracle_agreement(&mut IpPolicy::new(&m), &m, &visited, 0.0).unwrap().rate(), 1.0);
    }

    /// Picks the lowest unasked index, as a querier with constant scores does.
    struct Lowest;

    impl QueryPolicy for Lowest {
        fn choose(&mut self, h: &History) -> Result<Option<usize>> {
            Ok(h.unasked().next())
        }
    }

    #[test]
    fn constant_scores_agree_one_in_unasked() {
        // queries are exchangeable across random models, so the lowest index
        // is the strict maximizer with probability 1/4 on the empty history
        let trials = 400;
        let mut agreeing = 0;
        for seed in 0..trials {
            let m = random_model(100 + seed, 3, 4);
            agreeing += oracle_agreement(&mut Lowest, &m, &[History::empty(4)], 0.0).unwrap().agreeing;
        }
        let rate = agreeing as f64 / trials as f64;
        let sigma = (0.25f64 * 0.75 / trials as f64).sqrt();
        assert!((rate - 0.25).abs() < 4.0 * sigma, "rate {rate}");
    }

    #[test]
    fn agreement_rejects_mismatched_width() {
        let m = random_model(2, 2, 3);
        assert!(matches!(
            oracle_agreement(&mut Lowest, &m, &[History::empty(4)], 0.02),
            Err(Error::QuerySetMismatch(_))
        ));
    }

    #[test]
    fn csv_writers() {
        let mut buf = Vec::new();
        write_curve_csv(
            &[CurvePoint {
                epsilon: 0.1,
                mean_length: 2.5,
                accuracy: 0.75,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epsilon,mean_length,accuracy\n0.1,2.5,0.75\n");
        let mut buf = Vec::new();
        let a = curve(&[0.5, 1.0]);
        let b = curve(&[0.25, 0.5]);
        write_budget_csv(&[("learned", &a), ("random", &b)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "budget,learned,random\n1,0.5,0.25\n2,1,0.5\n");
    }
}
