//! Stopping-rule contracts checked independently on generated trajectories.

use proptest::prelude::*;
use rand::Rng;
use vip_core::networks::{ClassifierNet, QuerierNet};
use vip_core::pursuit::{run_pursuit, run_pursuit_batch, StoppingRule, Strategy};
use vip_core::query::{AnswerVector, History, StopReason, Trajectory};
use vip_core::rng::stream_rng;

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

fn max_prob(p: &[f64]) -> f64 {
    p.iter().cloned().fold(0.0, f64::max)
}

struct Case {
    classifier: ClassifierNet,
    querier: QuerierNet,
    x: AnswerVector,
}

/// Random nets with weights scaled up so that confident posteriors, and
/// hence early MAP stops, actually occur.
fn case(seed: u64, q: usize, c: usize) -> Case {
    let mut rng = stream_rng(seed, 21);
    let scale = rng.gen_range(1.0..6.0);
    let mut classifier = ClassifierNet::new(q, &[12], c, &mut rng).unwrap();
    for p in classifier.mlp_mut().parameters_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let querier = QuerierNet::new(q, &[12], &mut rng).unwrap();
    let x = AnswerVector::new((0..q).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect());
    Case { classifier, querier, x }
}

fn check_contract(t: &Trajectory, rule: StoppingRule, case: &Case) -> Result<(), TestCaseError> {
    let n = case.x.len();
    let len = t.steps.len();
    prop_assert!(len >= 1 && len <= n);

    let mut seen = vec![false; n];
    let mut h = History::empty(n);
    prop_assert_eq!(&t.prior, &case.classifier.posterior(&h).unwrap());
    for s in &t.steps {
        prop_assert!(!seen[s.query], "query {} asked twice", s.query);
        seen[s.query] = true;
        prop_assert_eq!(s.answer, case.x.get(s.query));
        h.push(s.query, s.answer).unwrap();
        prop_assert_eq!(&s.posterior, &case.classifier.posterior(&h).unwrap());
    }
    prop_assert_eq!(t.prediction, t.final_posterior().argmax());

    let probs: Vec<&[f64]> = std::iter::once(t.prior.probs()).chain(t.steps.iter().map(|s| s.posterior.probs())).collect();
    // fired[k] says whether the rule is satisfied right after query k + 1
    let fired: Vec<bool> = match rule {
        StoppingRule::FixedBudget(b) => (1..=len).map(|k| k == b).collect(),
        StoppingRule::Map { epsilon } => probs[1..].iter().map(|p| max_prob(p) >= 1.0 - epsilon).collect(),
        StoppingRule::Stability { epsilon, patience } => {
            let mut streak = 0;
            (1..=len)
                .map(|k| {
                    let drop = entropy_bits(probs[k - 1]) - entropy_bits(probs[k]);
                    streak = if (0.0..=epsilon).contains(&drop) { streak + 1 } else { 0 };
                    streak >= patience
                })
                .collect()
        }
    };
    prop_assert!(fired[..len - 1].iter().all(|f| !f), "run continued past a satisfied rule");
    let expected = match (fired[len - 1], rule) {
        (true, StoppingRule::FixedBudget(_)) => StopReason::FixedBudget,
        (true, StoppingRule::Map { .. }) => StopReason::MapThreshold,
        (true, StoppingRule::Stability { .. }) => StopReason::StabilityThreshold,
        (false, _) => {
            prop_assert_eq!(len, n);
            StopReason::QueriesExhausted
        }
    };
    prop_assert_eq!(t.stop_reason, expected);
    if let StoppingRule::FixedBudget(b) = rule {
        prop_assert_eq!(len, b);
    }
    Ok(())
}

fn rule_strategy() -> impl proptest::strategy::Strategy<Value = (u8, f64, usize)> {
    (0u8..3, 0.001f64..0.6, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trajectories_honor_their_stopping_rule(
        seed in 0u64..1_000_000,
        q in 2usize..=10,
        c in 2usize..=5,
        (kind, eps, patience) in rule_strategy(),
        budget_frac in 0.0f64..1.0,
        random in any::<bool>(),
    ) {
        let case = case(seed, q, c);
        let rule = match kind {
            0 => StoppingRule::FixedBudget(1 + (budget_frac * q as f64) as usize % q),
            1 => StoppingRule::map(eps),
            _ => StoppingRule::Stability { epsilon: eps * 0.2, patience },
        };
        let strategy = if random { Strategy::Random { seed } } else { Strategy::Learned(&case.querier) };
        let t = run_pursuit(&case.x, &strategy, &case.classifier, rule).unwrap();
        check_contract(&t, rule, &case)?;
        let again = run_pursuit(&case.x, &strategy, &case.classifier, rule).unwrap();
        prop_assert_eq!(t, again);
    }
}

#[test]
fn every_rule_kind_terminates_early_somewhere() {
    let mut early = [0usize; 3];
    for seed in 0..300 {
        let case = case(seed, 8, 3);
        let rules = [StoppingRule::FixedBudget(3), StoppingRule::map(0.1), StoppingRule::stability(0.05)];
        for (i, rule) in rules.into_iter().enumerate() {
            let t = run_pursuit(&case.x, &Strategy::Learned(&case.querier), &case.classifier, rule).unwrap();
            if t.stop_reason != StopReason::QueriesExhausted {
                early[i] += 1;
            }
        }
    }
    assert!(early.iter().all(|&e| e > 10), "{early:?}");
}

#[test]
fn batched_runs_obey_the_same_contracts() {
    let c0 = case(1, 6, 4);
    let cases: Vec<Case> = (0..50)
        .map(|s| {
            let mut rng = stream_rng(s, 5);
            Case {
                classifier: c0.classifier.clone(),
                querier: c0.querier.clone(),
                x: AnswerVector::new((0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()),
            }
        })
        .collect();
    let xs: Vec<&AnswerVector> = cases.iter().map(|c| &c.x).collect();
    for rule in [StoppingRule::FixedBudget(4), StoppingRule::map(0.2), StoppingRule::Stability { epsilon: 0.05, patience: 2 }] {
        let runs = run_pursuit_batch(&xs, &Strategy::Learned(&c0.querier), &c0.classifier, rule).unwrap();
        for (t, case) in runs.iter().zip(&cases) {
            check_contract(t, rule, case).unwrap();
        }
    }
}
