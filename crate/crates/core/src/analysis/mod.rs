//! Data-efficiency analyses over finished runs: learning curves, pairwise
//! winrates, sample complexity, score-fidelity correlations, cumulative
//! accuracy differences and token distribution shift.

pub mod report;
pub mod svg;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::util::{seeded_rng, whitespace_tokens};

pub use report::{emit_report, ReportFiles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    pub replicates: usize,
}

/// Performance as a function of training-set size for one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(label: impl Into<String>, points: Vec<CurvePoint>) -> Result<Self> {
        let c = LearningCurve {
            label: label.into(),
            points,
        };
        c.validate()?;
        Ok(c)
    }

    /// Aggregates replicate runs, each a list of (n, performance) on the
    /// same grid. Standard error is sample sd / sqrt(r), 0 for one replicate.
    pub fn from_replicates(label: impl Into<String>, runs: &[Vec<(usize, f64)>]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::validation("learning curve needs at least one replicate"))?;
        let grid: Vec<usize> = first.iter().map(|p| p.0).collect();
        for r in runs {
            if r.iter().map(|p| p.0).collect::<Vec<_>>() != grid {
                return Err(Error::validation(
                    "replicates disagree on the training-size grid",
                ));
            }
        }
        let points = grid
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let xs: Vec<f64> = runs.iter().map(|r| r[i].1).collect();
                let (mean, std_err) = mean_se(&xs);
                CurvePoint {
                    n,
                    mean,
                    std_err,
                    replicates: xs.len(),
                }
            })
            .collect();
        Self::new(label, points)
    }

    /// Like [`LearningCurve::from_replicates`] but for replicates that may
    /// stop at different sizes: each point averages the replicates that
    /// measured that size.
    pub fn pooled(label: impl Into<String>, runs: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in runs {
            for &(n, v) in r {
                by_n.entry(n).or_default().push(v);
            }
        }
        let points = by_n
            .into_iter()
            .map(|(n, xs)| {
                let (mean, std_err) = mean_se(&xs);
                CurvePoint {
                    n,
                    mean,
                    std_err,
                    replicates: xs.len(),
                }
            })
            .collect();
        Self::new(label, points)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::validation(format!(
                "learning curve {:?} is empty",
                self.label
            )));
        }
        for w in self.points.windows(2) {
            if w[1].n <= w[0].n {
                return Err(Error::validation(format!(
                    "learning curve {:?}: sizes must strictly increase ({} then {})",
                    self.label, w[0].n, w[1].n
                )));
            }
        }
        if let Some(p) = self
            .points
            .iter()
            .find(|p| !(p.std_err >= 0.0) || !p.mean.is_finite())
        {
            return Err(Error::validation(format!(
                "learning curve {:?}: bad point at n={}",
                self.label, p.n
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.n).collect()
    }

    pub fn at(&self, n: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.n == n)
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Smallest measured size whose mean performance reaches `tau`. No
/// interpolation between grid points.
pub fn sample_complexity(curve: &LearningCurve, tau: f64) -> Option<usize> {
    curve.points.iter().find(|p| p.mean >= tau).map(|p| p.n)
}

/// Whether `a` is more data-efficient than `b` at level `tau`: it reaches
/// `tau` with strictly fewer samples, or (when `n` is given) performs
/// strictly better at that size.
pub fn more_data_efficient(
    a: &LearningCurve,
    b: &LearningCurve,
    tau: f64,
    n: Option<usize>,
) -> bool {
    let by_tau = match (sample_complexity(a, tau), sample_complexity(b, tau)) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    };
    let by_n = n
        .and_then(|n| Some(a.at(n)?.mean > b.at(n)?.mean))
        .unwrap_or(false);
    by_tau || by_n
}

/// Pairwise count of statistically separated wins: `counts[i][j]` is how
/// often algorithm `i` beat `j` by more than `alpha` standard errors on
/// each side, over every (dataset, size) where both were measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u32>>,
    pub comparisons: Vec<Vec<u32>>,
    pub alpha: f64,
}

impl WinrateMatrix {
    /// Mean of each column over the other algorithms' rows: how often an
    /// algorithm is outperformed on average. Lower is better.
    pub fn column_means(&self) -> Vec<f64> {
        let k = self.labels.len();
        (0..k)
            .map(|j| {
                if k < 2 {
                    return 0.0;
                }
                let s: u32 = (0..k).filter(|&i| i != j).map(|i| self.counts[i][j]).sum();
                s as f64 / (k - 1) as f64
            })
            .collect()
    }
}

pub const DEFAULT_WINRATE_ALPHA: f64 = 1.0;

/// Builds the winrate matrix from per-dataset curve sets. Within a dataset
/// every curve must share one grid. Labels are sorted.
pub fn winrate(
    datasets: &BTreeMap<String, Vec<LearningCurve>>,
    alpha: f64,
) -> Result<WinrateMatrix> {
    if !(alpha >= 0.0) {
        return Err(Error::validation("winrate alpha must be >= 0"));
    }
    let mut labels: Vec<String> = datasets
        .values()
        .flatten()
        .map(|c| c.label.clone())
        .collect();
    labels.sort();
    labels.dedup();
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let k = labels.len();
    let mut counts = vec![vec![0u32; k]; k];
    let mut comparisons = vec![vec![0u32; k]; k];
    for (name, curves) in datasets {
        let Some(first) = curves.first() else {
            continue;
        };
        let grid = first.grid();
        for c in curves {
            c.validate()?;
            if c.grid() != grid {
                return Err(Error::validation(format!(
                    "dataset {name:?}: curve {:?} has a different size grid than {:?}",
                    c.label, first.label
                )));
            }
        }
        for a in curves {
            for b in curves {
                let (i, j) = (index[a.label.as_str()], index[b.label.as_str()]);
                if i == j {
                    continue;
                }
                for (pa, pb) in a.points.iter().zip(&b.points) {
                    comparisons[i][j] += 1;
                    if pa.mean - alpha * pa.std_err > pb.mean + alpha * pb.std_err {
                        counts[i][j] += 1;
                    }
                }
            }
        }
    }
    Ok(WinrateMatrix {
        labels,
        counts,
        comparisons,
        alpha,
    })
}

/// Ranks from 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::validation(format!(
            "spearman needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::validation("spearman needs at least 3 pairs"));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Spearman rank correlation with a two-sided p-value from the Student t
/// approximation on n - 2 degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    let rho = spearman_rho(xs, ys)?;
    let n = xs.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { rho, p_value, n })
}

pub const EXACT_SPEARMAN_MAX_N: usize = 10;

/// Spearman correlation with an exact two-sided permutation p-value: the
/// share of all orderings of `ys` whose |rho| reaches the observed one.
pub fn spearman_exact(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    let rho = spearman_rho(xs, ys)?;
    let n = xs.len();
    if n > EXACT_SPEARMAN_MAX_N {
        return Err(Error::validation(format!(
            "exact spearman p-values are limited to n <= {EXACT_SPEARMAN_MAX_N}, got {n}"
        )));
    }
    let rx = average_ranks(xs);
    let mut ry = average_ranks(ys);
    let target = rho.abs() - 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    permute(&mut ry, 0, &mut |perm| {
        total += 1;
        if pearson(&rx, perm).abs() >= target {
            hits += 1;
        }
    });
    Ok(Correlation {
        rho,
        p_value: hits as f64 / total as f64,
        n,
    })
}

fn permute(v: &mut [f64], k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::validation(format!(
            "order has {} entries for {n} samples",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::validation(format!(
                "order is not a permutation (index {i})"
            )));
        }
    }
    Ok(())
}

fn prefix_accuracy(correct: &[bool], order: &[usize]) -> Vec<f64> {
    let mut hits = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            hits += correct[i] as usize;
            hits as f64 / (k + 1) as f64
        })
        .collect()
}

/// Cumulative accuracy of a seeded random ordering minus that of `order`,
/// in percentage points, for every prefix length 1..=n.
pub fn cumulative_accuracy_diff(correct: &[bool], order: &[usize], seed: u64) -> Result<Vec<f64>> {
    check_permutation(order, correct.len())?;
    let mut random: Vec<usize> = (0..correct.len()).collect();
    random.shuffle(&mut seeded_rng(seed));
    let r = prefix_accuracy(correct, &random);
    let s = prefix_accuracy(correct, order);
    Ok(r.iter().zip(&s).map(|(a, b)| 100.0 * (a - b)).collect())
}

/// Same curve with the random ordering replaced by its expectation: any
/// prefix of a uniform random order has expected accuracy equal to the
/// overall accuracy.
pub fn expected_cumulative_accuracy_diff(correct: &[bool], order: &[usize]) -> Result<Vec<f64>> {
    check_permutation(order, correct.len())?;
    let overall = correct.iter().filter(|c| **c).count() as f64 / correct.len().max(1) as f64;
    Ok(prefix_accuracy(correct, order)
        .iter()
        .map(|s| 100.0 * (overall - s))
        .collect())
}

/// Normalized token histogram.
pub fn token_distribution<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    tokenize: &dyn Fn(&str) -> Vec<String>,
) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for t in texts {
        for tok in tokenize(t) {
            *counts.entry(tok).or_default() += 1.0;
        }
    }
    let total: f64 = counts.values().sum();
    if total > 0.0 {
        counts.values_mut().for_each(|v| *v /= total);
    }
    counts
}

/// Half the L1 distance between two distributions over tokens.
pub fn tvd(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, a) in p {
        sum += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in q {
        if !p.contains_key(k) {
            sum += b;
        }
    }
    (0.5 * sum).clamp(0.0, 1.0)
}

fn default_tokenize(text: &str) -> Vec<String> {
    whitespace_tokens(text).map(str::to_string).collect()
}

/// Total variation distance between the whitespace-token distributions of
/// two corpora's question and answer text.
pub fn token_tvd(a: &Corpus, b: &Corpus) -> Result<f64> {
    token_tvd_with(a, b, &default_tokenize)
}

/// As [`token_tvd`] with a caller-supplied tokenizer.
pub fn token_tvd_with(
    a: &Corpus,
    b: &Corpus,
    tokenize: &dyn Fn(&str) -> Vec<String>,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("token TVD needs two non-empty corpora"));
    }
    let texts = |c: &'_ Corpus| -> Vec<String> {
        c.iter()
            .map(|s| format!("{}\n{}", s.question, s.answer))
            .collect()
    };
    let ta = texts(a);
    let tb = texts(b);
    let p = token_distribution(ta.iter().map(String::as_str), tokenize);
    let q = token_distribution(tb.iter().map(String::as_str), tokenize);
    Ok(tvd(&p, &q))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}
