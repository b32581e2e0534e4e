//! Training-time history sampling.
//!
//! Both schemes first draw a history size `k` uniformly from `{0, ..., |Q|}`.
//! The random scheme then picks `k` distinct queries uniformly; the biased
//! scheme asks the first `k` queries the current querier would ask.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::networks::QuerierNet;
use crate::query::{AnswerVector, History};
use crate::rng::stream_rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    InitialRandom,
    Biased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn random(seed: u64) -> Self {
        SamplerConfig {
            mode: SamplingMode::InitialRandom,
            seed,
        }
    }

    pub fn biased(seed: u64) -> Self {
        SamplerConfig {
            mode: SamplingMode::Biased,
            seed,
        }
    }
}

/// `k ~ Uniform{0, ..., num_queries}`.
pub fn draw_size<R: Rng>(num_queries: usize, rng: &mut R) -> usize {
    rng.gen_range(0..=num_queries)
}

pub fn sample_history_random<R: Rng>(x: &AnswerVector, rng: &mut R) -> History {
    let k = draw_size(x.len(), rng);
    random_history_of_size(x, k, rng)
}

/// `k` distinct queries chosen uniformly, asked in the sampled order.
pub fn random_history_of_size<R: Rng>(x: &AnswerVector, k: usize, rng: &mut R) -> History {
    let ids = index::sample(rng, x.len(), k).into_vec();
    History::from_queries(x, &ids).expect("sampled ids are distinct and in range")
}

pub fn sample_history_biased<R: Rng>(x: &AnswerVector, querier: &QuerierNet, rng: &mut R) -> Result<History> {
    let k = draw_size(x.len(), rng);
    rollout(x, querier, k)
}

/// The first `k` queries the querier asks on `x`, never repeating one.
pub fn rollout(x: &AnswerVector, querier: &QuerierNet, k: usize) -> Result<History> {
    check_width(x, querier)?;
    let mut h = History::empty(x.len());
    for _ in 0..k.min(x.len()) {
        let q = querier.choose(&h)?;
        h.push(q, x.get(q))?;
    }
    Ok(h)
}

/// Batched [`rollout`]: each step runs one querier forward pass over the
/// rows that still need queries.
pub fn rollout_batch(xs: &[&AnswerVector], querier: &QuerierNet, ks: &[usize]) -> Result<Vec<History>> {
    assert_eq!(xs.len(), ks.len(), "one size per example");
    for x in xs {
        check_width(x, querier)?;
    }
    let mut histories: Vec<History> = xs.iter().map(|x| History::empty(x.len())).collect();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    for step in 0..max_k {
        let active: Vec<usize> = (0..xs.len()).filter(|&i| ks[i].min(xs[i].len()) > step).collect();
        if active.is_empty() {
            break;
        }
        let picks = {
            let refs: Vec<&History> = active.iter().map(|&i| &histories[i]).collect();
            querier.choose_batch(&refs)?
        };
        for (&i, q) in active.iter().zip(picks) {
            histories[i].push(q, xs[i].get(q))?;
        }
    }
    Ok(histories)
}

fn check_width(x: &AnswerVector, querier: &QuerierNet) -> Result<()> {
    if x.len() != querier.num_queries() {
        return Err(Error::ShapeMismatch {
            op: "sampler",
            lhs: vec![x.len()],
            rhs: vec![querier.num_queries()],
        });
    }
    Ok(())
}

/// Samples one history per example. Example `i` draws from stream
/// `first_index + i` of `config.seed`, so a batch is reproducible and its
/// rows do not depend on how the data was partitioned.
pub fn sample_batch(
    xs: &[&AnswerVector],
    config: &SamplerConfig,
    querier: Option<&QuerierNet>,
    first_index: u64,
) -> Result<Vec<History>> {
    match config.mode {
        SamplingMode::InitialRandom => Ok(xs
            .iter()
            .enumerate()
            .map(|(i, x)| sample_history_random(x, &mut stream_rng(config.seed, first_index + i as u64)))
            .collect()),
        SamplingMode::Biased => {
            let querier = querier.ok_or(Error::MissingQuerier)?;
            let ks: Vec<usize> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| draw_size(x.len(), &mut stream_rng(config.seed, first_index + i as u64)))
                .collect();
            rollout_batch(xs, querier, &ks)
        }
    }
}
