//! Representation diagnostics: pairwise KL divergence and distance,
//! uniformity, embedding variance, variance-based feature ranking and
//! Kendall's τ.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{read_container, write_container, ModelState};
use crate::numeric::{softmax, Real, Tensor};
use crate::par::{map_indexed, Parallelism};

/// Pairwise metrics are exact up to this many rows and subsampled above.
pub const DEFAULT_PAIR_CAP: usize = 2000;

/// Floor applied to `Q` before taking its logarithm.
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Softmax of a flattened representation, treated as a discrete
/// distribution over its entries.
pub fn to_distribution(v: &[f64]) -> Vec<f64> {
    softmax(v)
}

/// `Σ P(x) log(P(x)/Q(x))` in nats, with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, dist) in [("P", p), ("Q", q)] {
        if dist.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Data(format!("{name} has negative or non-finite entries")));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("{name} sums to {total}, not 1")));
        }
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_Q_FLOOR)).ln())
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMetric {
    Kl,
    Euclidean,
}

/// Unordered pairs to visit: all of them for `n <= cap`, otherwise
/// `cap(cap-1)/2` uniformly drawn pairs of distinct rows.
fn pair_plan(n: usize, cap: usize, seed: u64) -> Option<Vec<(usize, usize)>> {
    if n <= cap {
        return None;
    }
    let count = cap * (cap.max(2) - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect(),
    )
}

/// Applies `f` to every planned pair and returns the per-chunk results in a
/// fixed order.
fn over_pairs<R: Send>(
    n: usize,
    cap: usize,
    seed: u64,
    par: Parallelism,
    f: impl Fn(usize, usize) -> f64 + Sync + Send,
    fold: impl Fn(&mut dyn Iterator<Item = f64>) -> R + Sync + Send,
) -> (Vec<R>, usize) {
    match pair_plan(n, cap, seed) {
        None => {
            let parts = map_indexed(par, n, |i| fold(&mut (i + 1..n).map(|j| f(i, j))));
            (parts, n * (n - 1) / 2)
        }
        Some(pairs) => {
            const CHUNK: usize = 4096;
            let chunks = pairs.len().div_ceil(CHUNK);
            let parts = map_indexed(par, chunks, |c| {
                let slice = &pairs[c * CHUNK..((c + 1) * CHUNK).min(pairs.len())];
                fold(&mut slice.iter().map(|&(i, j)| f(i, j)))
            });
            (parts, pairs.len())
        }
    }
}

/// Mean of `metric` over unordered row pairs of `e[n×D]`. KL is taken from
/// the lower-indexed row's distribution to the other's.
pub fn mean_pairwise(metric: PairwiseMetric, e: &Tensor<f64>, cap: usize, seed: u64, par: Parallelism) -> Result<f64> {
    let n = e.rows();
    if n < 2 {
        return Err(Error::Data(format!("pairwise metrics need at least 2 rows, got {n}")));
    }
    let dists: Vec<Vec<f64>> = match metric {
        PairwiseMetric::Kl => map_indexed(par, n, |i| to_distribution(e.row(i))),
        PairwiseMetric::Euclidean => Vec::new(),
    };
    let f = |i: usize, j: usize| match metric {
        PairwiseMetric::Kl => kl_unchecked(&dists[i], &dists[j]),
        PairwiseMetric::Euclidean => sq_dist(e.row(i), e.row(j)).sqrt(),
    };
    let (parts, count) = over_pairs(n, cap, seed, par, f, |it| it.sum::<f64>());
    Ok(parts.into_iter().sum::<f64>() / count as f64)
}

/// `-log mean_{pairs} exp(-t‖u−v‖²)` on raw rows, evaluated through a
/// log-sum-exp so well-spread embeddings do not underflow.
pub fn uniformity(e: &Tensor<f64>, t: f64, cap: usize, seed: u64, par: Parallelism) -> Result<f64> {
    let n = e.rows();
    if n < 2 {
        return Err(Error::Data(format!("uniformity needs at least 2 rows, got {n}")));
    }
    if t <= 0.0 {
        return Err(Error::Config(format!("uniformity temperature t = {t} must be > 0")));
    }
    let f = |i: usize, j: usize| -t * sq_dist(e.row(i), e.row(j));
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let vals: Vec<f64> = it.collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return (m, 0.0);
        }
        (m, vals.iter().map(|v| (v - m).exp()).sum::<f64>())
    };
    let (parts, count) = over_pairs(n, cap, seed, par, f, lse);
    let m = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = parts
        .iter()
        .filter(|p| p.0 > f64::NEG_INFINITY)
        .map(|&(pm, ps)| ps * (pm - m).exp())
        .sum();
    Ok(-(m + s.ln() - (count as f64).ln()))
}

/// `σ_i = Var_j(H[i,j] − μ_j)` with `μ_j` the mean of column `j` over the
/// `d` feature rows.
pub fn embedding_variance(h: &Tensor<f64>) -> Vec<f64> {
    let (d, w) = (h.rows(), h.cols());
    let mu: Vec<f64> = (0..w)
        .map(|j| (0..d).map(|i| h.row(i)[j]).sum::<f64>() / d as f64)
        .collect();
    (0..d)
        .map(|i| {
            let c: Vec<f64> = h.row(i).iter().zip(&mu).map(|(x, m)| x - m).collect();
            let mean = c.iter().sum::<f64>() / w as f64;
            c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMethod {
    EmbeddingVariance,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// Feature indices, most salient first.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub method: RankingMethod,
}

impl FeatureRanking {
    /// Descending by score; ties go to the lower feature index.
    pub fn from_scores(scores: Vec<f64>, method: RankingMethod) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        FeatureRanking { order, scores, method }
    }

    /// Rank position of every feature (0 = most salient).
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (pos, &f) in self.order.iter().enumerate() {
            r[f] = pos;
        }
        r
    }
}

/// Flattened `n × (d·h)` representations of the given samples.
pub fn representations<T: Real>(
    model: &ModelState<T>,
    samples: &[EncodedSample<T>],
    par: Parallelism,
) -> Result<Tensor<f64>> {
    let reps = map_indexed(par, samples.len(), |i| model.represent(&samples[i]));
    let mut data = Vec::new();
    let mut width = 0;
    for r in reps {
        let r = r?;
        width = r.numel();
        data.extend(r.data().iter().map(|x| x.f64()));
    }
    Tensor::new(vec![samples.len(), width], data)
}

/// Per-sample embedding variance averaged over samples, then ranked.
pub fn rank_by_variance<T: Real>(
    model: &ModelState<T>,
    samples: &[EncodedSample<T>],
    par: Parallelism,
) -> Result<FeatureRanking> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to rank features on".into()));
    }
    let per = map_indexed(par, samples.len(), |i| {
        model.represent(&samples[i]).map(|h| embedding_variance(&h.cast()))
    });
    let mut acc = vec![0.0; model.d()];
    for s in per {
        for (a, v) in acc.iter_mut().zip(s?) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(FeatureRanking::from_scores(acc, RankingMethod::EmbeddingVariance))
}

fn check_permutation(r: &[usize]) -> Result<()> {
    let base = r.iter().copied().min().unwrap_or(0);
    if base > 1 {
        return Err(Error::Data(format!("ranking {r:?} is not a permutation")));
    }
    let mut seen = vec![false; r.len()];
    for &x in r {
        let k = x.wrapping_sub(base);
        if k >= r.len() || seen[k] {
            return Err(Error::Data(format!("ranking {r:?} is not a permutation")));
        }
        seen[k] = true;
    }
    Ok(())
}

/// Kendall's τ_a between two rankings (permutations of `0..n` or `1..n`)
/// and its two-sided p-value under the normal approximation.
pub fn kendall_tau(a: &[usize], b: &[usize]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("rankings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data("Kendall's tau needs at least 2 items".into()));
    }
    check_permutation(a)?;
    check_permutation(b)?;
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] as i64 - a[j] as i64).signum() * (b[i] as i64 - b[j] as i64).signum();
            score += s;
        }
    }
    let nf = n as f64;
    let tau = score as f64 / (nf * (nf - 1.0) / 2.0);
    let var = 2.0 * (2.0 * nf + 5.0) / (9.0 * nf * (nf - 1.0));
    let z = tau / var.sqrt();
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok((tau, p))
}

pub const EMBEDDING_FORMAT: &str = "tjepa-embeddings-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub hidden: usize,
    pub checkpoint: Option<String>,
    pub epoch: Option<usize>,
}

/// Flattened representations with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub data: Tensor<f32>,
    pub meta: EmbeddingMeta,
}

pub fn export_embeddings(e: &EmbeddingMatrix, manifest: &Path) -> Result<()> {
    if e.data.rows() == 0 || e.data.numel() == 0 {
        return Err(Error::Data("refusing to export an empty embedding matrix".into()));
    }
    write_container(manifest, EMBEDDING_FORMAT, &[("embeddings", &e.data)], &e.meta)
}

pub fn read_embeddings(manifest: &Path) -> Result<EmbeddingMatrix> {
    let (m, mut tensors) = read_container::<EmbeddingMeta>(manifest, EMBEDDING_FORMAT)?;
    let data = tensors
        .pop()
        .ok_or_else(|| Error::Parse("embedding container holds no tensor".into()))?;
    Ok(EmbeddingMatrix { data, meta: m.meta })
}
