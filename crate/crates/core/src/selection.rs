//! Turning scores or gradient embeddings into the exemplar set of an
//! iteration.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{GradEmbedding, Score};
use crate::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Argmax,
    SoftmaxSample,
    Badge,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRule {
    /// Hard iff teacher score minus student score reaches the threshold.
    LionEasyHard,
    /// Pools of correctly and incorrectly answered samples.
    EvokdCorrectIncorrect,
}

/// Where the first k-means++ pick is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadgeAnchor {
    /// First pick proportional to squared norm.
    Origin,
    /// First pick uniform.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub m: usize,
    pub direction: Direction,
    pub temperature: f64,
    pub pool_rule: Option<PoolRule>,
    pub lion_threshold: f64,
    /// Shuffle candidates before the stable argmax so equal scores are
    /// broken at random rather than by position.
    pub shuffle_ties: bool,
    pub badge_anchor: BadgeAnchor,
    /// Dimension gradient embeddings are projected to.
    pub projection_dim: usize,
    /// Drop ids selected in earlier iterations from the candidate pool.
    pub exclude_previous: bool,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::Argmax,
            m: 1000,
            direction: Direction::High,
            temperature: 1.0,
            pool_rule: None,
            lion_threshold: 1.0,
            shuffle_ties: false,
            badge_anchor: BadgeAnchor::Origin,
            projection_dim: crate::scoring::DEFAULT_PROJECTION_DIM,
            exclude_previous: false,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::validation("selection size m must be >= 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::validation("softmax temperature must be > 0"));
        }
        if self.strategy == Strategy::Pooled && self.pool_rule.is_none() {
            return Err(Error::validation("pooled selection needs a pool_rule"));
        }
        if self.projection_dim == 0 {
            return Err(Error::validation("projection_dim must be >= 1"));
        }
        Ok(())
    }
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::validation(format!(
            "cannot select m={m} from {n} candidates"
        )));
    }
    Ok(())
}

/// Ids of the `m` highest (or lowest) scores; ties keep input order.
pub fn select_argmax(scores: &[Score], m: usize, direction: Direction) -> Result<Vec<String>> {
    check_m(m, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (scores[a].value, scores[b].value);
        match direction {
            Direction::High => y.total_cmp(&x),
            Direction::Low => x.total_cmp(&y),
        }
    });
    Ok(order[..m]
        .iter()
        .map(|&i| scores[i].sample_id.clone())
        .collect())
}

/// Argmax after a seeded shuffle, so equal scores are ordered at random.
pub fn select_argmax_shuffled(
    scores: &[Score],
    m: usize,
    direction: Direction,
    seed: u64,
) -> Result<Vec<String>> {
    let mut shuffled = scores.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed));
    select_argmax(&shuffled, m, direction)
}

/// `m` distinct ids drawn one at a time without replacement, each draw
/// with probability proportional to `exp(score / temperature)` among the
/// ids still left. Implemented with Gumbel-perturbed keys, which gives the
/// same distribution as sequential draws.
pub fn select_softmax_sample(
    scores: &[Score],
    m: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<String>> {
    check_m(m, scores.len())?;
    if !(temperature > 0.0) {
        return Err(Error::validation("softmax temperature must be > 0"));
    }
    let mut rng = seeded_rng(seed);
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (s.value / temperature - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed[..m]
        .iter()
        .map(|&(_, i)| scores[i].sample_id.clone())
        .collect())
}

/// Uniform sample of `m` ids without replacement.
pub fn select_random(ids: &[String], m: usize, seed: u64) -> Result<Vec<String>> {
    check_m(m, ids.len())?;
    let mut rng = seeded_rng(seed);
    let mut pool = ids.to_vec();
    let (picked, _) = pool.partial_shuffle(&mut rng, m);
    Ok(picked.to_vec())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn weighted_pick(weights: &[f64], alive: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights
        .iter()
        .zip(alive)
        .filter(|(_, a)| **a)
        .map(|(w, _)| *w)
        .sum();
    if total > 0.0 && total.is_finite() {
        let mut r = rng.random::<f64>() * total;
        let mut last = None;
        for (i, (&w, &a)) in weights.iter().zip(alive).enumerate() {
            if !a || w <= 0.0 {
                continue;
            }
            last = Some(i);
            if r < w {
                return i;
            }
            r -= w;
        }
        if let Some(i) = last {
            return i;
        }
    }
    // No mass left: uniform over the remaining candidates.
    let remaining: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    remaining[rng.random_range(0..remaining.len())]
}

/// k-means++ seeding over gradient embeddings. With the origin anchor the
/// first pick is proportional to squared norm; each later pick is
/// proportional to the squared distance to the nearest pick so far. When
/// every remaining distance is zero the rest is filled uniformly.
pub fn select_badge(
    embeddings: &[GradEmbedding],
    m: usize,
    seed: u64,
    anchor: BadgeAnchor,
) -> Result<Vec<String>> {
    check_m(m, embeddings.len())?;
    let dim = embeddings[0].vector.len();
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != dim) {
        return Err(Error::validation(format!(
            "embedding {} has dimension {}, expected {dim}",
            e.sample_id,
            e.vector.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let n = embeddings.len();
    let mut alive = vec![true; n];
    let mut nearest: Vec<f64> = match anchor {
        BadgeAnchor::Origin => embeddings
            .iter()
            .map(|e| e.vector.iter().map(|v| v * v).sum())
            .collect(),
        BadgeAnchor::Random => vec![1.0; n],
    };
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let i = weighted_pick(&nearest, &alive, &mut rng);
        alive[i] = false;
        picked.push(embeddings[i].sample_id.clone());
        let c = &embeddings[i].vector;
        for (j, e) in embeddings.iter().enumerate() {
            if alive[j] {
                let d = sq_dist(&e.vector, c);
                if picked.len() == 1 || d < nearest[j] {
                    nearest[j] = d;
                }
            }
        }
    }
    Ok(picked)
}

/// Half the batch from each pool (the extra one from `pool_a`), uniformly
/// without replacement; a pool that runs short is topped up from the other.
pub fn select_pooled(
    pool_a: &[String],
    pool_b: &[String],
    m: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let a_set: HashSet<&String> = pool_a.iter().collect();
    if let Some(dup) = pool_b.iter().find(|id| a_set.contains(id)) {
        return Err(Error::validation(format!("id {dup:?} is in both pools")));
    }
    check_m(m, pool_a.len() + pool_b.len())?;
    let mut from_a = m.div_ceil(2).min(pool_a.len());
    let from_b = (m - from_a).min(pool_b.len());
    from_a = m - from_b;
    let mut rng = seeded_rng(seed);
    let mut a = pool_a.to_vec();
    let mut b = pool_b.to_vec();
    let mut out: Vec<String> = a.partial_shuffle(&mut rng, from_a).0.to_vec();
    out.extend_from_slice(b.partial_shuffle(&mut rng, from_b).0);
    Ok(out)
}

/// Splits pairwise-judge scores into (hard, easy) pools.
pub fn lion_pools(scores: &[Score], threshold: f64) -> Result<(Vec<String>, Vec<String>)> {
    let mut hard = Vec::new();
    let mut easy = Vec::new();
    for s in scores {
        let (t, st) = s.aux.ok_or_else(|| {
            Error::validation(format!("score for {} lacks judge pair", s.sample_id))
        })?;
        if t - st >= threshold {
            hard.push(s.sample_id.clone());
        } else {
            easy.push(s.sample_id.clone());
        }
    }
    Ok((hard, easy))
}

/// Splits correctness scores into (incorrect, correct) pools.
pub fn correctness_pools(scores: &[Score]) -> (Vec<String>, Vec<String>) {
    let (wrong, right): (Vec<&Score>, Vec<&Score>) = scores.iter().partition(|s| s.value < 0.5);
    (
        wrong.into_iter().map(|s| s.sample_id.clone()).collect(),
        right.into_iter().map(|s| s.sample_id.clone()).collect(),
    )
}

/// Runs the configured strategy. `embeddings` is only consulted by BADGE.
pub fn select(
    cfg: &SelectionConfig,
    scores: &[Score],
    embeddings: &[GradEmbedding],
    seed: u64,
) -> Result<Vec<String>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Random => {
            let ids: Vec<String> = scores.iter().map(|s| s.sample_id.clone()).collect();
            select_random(&ids, cfg.m, seed)
        }
        Strategy::Argmax if cfg.shuffle_ties => {
            select_argmax_shuffled(scores, cfg.m, cfg.direction, seed)
        }
        Strategy::Argmax => select_argmax(scores, cfg.m, cfg.direction),
        Strategy::SoftmaxSample => {
            let signed: Vec<Score> = scores
                .iter()
                .map(|s| Score {
                    value: if cfg.direction == Direction::Low {
                        -s.value
                    } else {
                        s.value
                    },
                    ..s.clone()
                })
                .collect();
            select_softmax_sample(&signed, cfg.m, cfg.temperature, seed)
        }
        Strategy::Badge => select_badge(embeddings, cfg.m, seed, cfg.badge_anchor),
        Strategy::Pooled => {
            let (a, b) = match cfg.pool_rule.expect("validated") {
                PoolRule::LionEasyHard => lion_pools(scores, cfg.lion_threshold)?,
                PoolRule::EvokdCorrectIncorrect => correctness_pools(scores),
            };
            select_pooled(&a, &b, cfg.m, seed)
        }
    }
}
