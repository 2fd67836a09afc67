//! Disentanglement scores over a trained model's representations: the
//! pair-difference linear-classifier score, the majority-vote score, the
//! importance-entropy score, and the mutual-information modularity score.
//!
//! Representations are posterior means (no sampling); factors are the
//! categorical ground-truth levels attached to every synthetic graph, so no
//! factor binning is needed anywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{Dataset, FactorLabel, FACTOR_COUNT, FACTOR_LEVELS};
use crate::model::Model;
use crate::tape::TapeError;

#[derive(Error, Debug)]
pub enum MetricError {
    #[error("factor {0} has a single observed level; metrics need at least 2")]
    SingleLevel(usize),
    #[error("all representation dimensions were pruned (std below threshold)")]
    AllDimsPruned,
    #[error("representation is empty")]
    Empty,
    #[error(transparent)]
    Forward(#[from] TapeError),
}

/// Row-major `samples x dims` representation with aligned factor labels.
#[derive(Clone, Debug)]
pub struct RepresentationMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
    pub labels: Vec<FactorLabel>,
}

impl RepresentationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, labels: Vec<FactorLabel>) -> Self {
        assert_eq!(rows * cols, data.len(), "representation shape mismatch");
        assert_eq!(rows, labels.len(), "row and label counts disagree");
        RepresentationMatrix {
            rows,
            cols,
            data,
            labels,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Column-permuted copy: new column `j` = old column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.cols);
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for (j, &p) in perm.iter().enumerate() {
                data[r * self.cols + j] = self.at(r, p);
            }
        }
        RepresentationMatrix::new(self.rows, self.cols, data, self.labels.clone())
    }

    /// Copy with every column scaled by a positive factor.
    pub fn scale_columns(&self, scales: &[f64]) -> Self {
        assert_eq!(scales.len(), self.cols);
        let mut data = self.data.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[r * self.cols + c] *= scales[c];
            }
        }
        RepresentationMatrix::new(self.rows, self.cols, data, self.labels.clone())
    }

    fn column_stds(&self) -> Vec<f64> {
        let mut stds = vec![0.0; self.cols];
        for c in 0..self.cols {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for r in 0..self.rows {
                let v = self.at(r, c);
                sum += v;
                sq += v * v;
            }
            let mean = sum / self.rows as f64;
            stds[c] = (sq / self.rows as f64 - mean * mean).max(0.0).sqrt();
        }
        stds
    }

    /// Rows grouped by `(factor, level)`.
    fn level_pools(&self) -> Vec<Vec<Vec<usize>>> {
        let mut pools = vec![vec![Vec::new(); FACTOR_LEVELS]; FACTOR_COUNT];
        for (r, label) in self.labels.iter().enumerate() {
            for f in 0..FACTOR_COUNT {
                pools[f][label.level(f) as usize].push(r);
            }
        }
        pools
    }

    fn check_factor_levels(&self) -> Result<Vec<Vec<Vec<usize>>>, MetricError> {
        if self.rows == 0 {
            return Err(MetricError::Empty);
        }
        let pools = self.level_pools();
        for (f, levels) in pools.iter().enumerate() {
            let observed = levels.iter().filter(|p| !p.is_empty()).count();
            if observed < 2 {
                return Err(MetricError::SingleLevel(f));
            }
        }
        Ok(pools)
    }
}

/// Posterior-mean representation of every graph in the dataset, columns
/// ordered `[mu_e; mu_f; mu_g]`.
pub fn represent(ds: &Dataset, model: &Model<f32>) -> Result<RepresentationMatrix, MetricError> {
    let cols = model.config.latent_dim();
    let rows_data: Result<Vec<Vec<f64>>, TapeError> = ds
        .records
        .par_iter()
        .map(|(graph, _)| {
            let posterior = model.encode(graph)?;
            Ok(posterior.mu_concat().iter().map(|v| *v as f64).collect())
        })
        .collect();
    let rows_data = rows_data?;
    let mut data = Vec::with_capacity(ds.len() * cols);
    for row in rows_data {
        data.extend_from_slice(&row);
    }
    Ok(RepresentationMatrix::new(
        ds.len(),
        cols,
        data,
        ds.labels().copied().collect(),
    ))
}

fn default_trials() -> usize {
    500
}
fn default_votes() -> usize {
    64
}
fn default_test_trials() -> usize {
    100
}
fn default_prune_std() -> f64 {
    0.05
}
fn default_bins() -> usize {
    20
}
fn default_dci_rounds() -> usize {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DciImportance {
    /// Gradient-boosted regression stumps; importance is total split gain.
    #[default]
    BoostedStumps,
    /// L1-regularized linear regression; importance is `|weight|`.
    LassoLinear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricParams {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_votes")]
    pub votes: usize,
    #[serde(default = "default_test_trials")]
    pub test_trials: usize,
    #[serde(default = "default_prune_std")]
    pub prune_std: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_dci_rounds")]
    pub dci_rounds: usize,
    #[serde(default)]
    pub dci_importance: DciImportance,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            trials: default_trials(),
            votes: default_votes(),
            test_trials: default_test_trials(),
            prune_std: default_prune_std(),
            bins: default_bins(),
            dci_rounds: default_dci_rounds(),
            dci_importance: DciImportance::default(),
        }
    }
}

// ---- pair-difference linear-classifier score --------------------------------

/// Accuracy (x100) of a multinomial linear classifier predicting which
/// factor was held fixed, from averaged per-dimension `|z1 - z2|` features
/// over pairs sharing that factor's level.
pub fn beta_metric(
    rep: &RepresentationMatrix,
    params: &MetricParams,
    seed: u64,
) -> Result<f64, MetricError> {
    let pools = rep.check_factor_levels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.trials + params.test_trials;
    let mut features = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    for _ in 0..total {
        let factor = rng.random_range(0..FACTOR_COUNT);
        let usable: Vec<&Vec<usize>> = pools[factor].iter().filter(|p| p.len() >= 2).collect();
        let mut feature = vec![0.0; rep.cols];
        for _ in 0..params.votes {
            let pool = usable[rng.random_range(0..usable.len())];
            let i1 = pool[rng.random_range(0..pool.len())];
            let i2 = loop {
                let c = pool[rng.random_range(0..pool.len())];
                if c != i1 {
                    break c;
                }
            };
            for (fd, (a, b)) in feature.iter_mut().zip(rep.row(i1).iter().zip(rep.row(i2))) {
                *fd += (a - b).abs();
            }
        }
        for fd in feature.iter_mut() {
            *fd /= params.votes as f64;
        }
        features.push(feature);
        targets.push(factor);
    }
    let accuracy = multinomial_accuracy(
        &features[..params.trials],
        &targets[..params.trials],
        &features[params.trials..],
        &targets[params.trials..],
        rep.cols,
    );
    Ok(accuracy * 100.0)
}

/// Softmax regression on standardized features, full-batch gradient descent.
fn multinomial_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    dims: usize,
) -> f64 {
    let n = train_x.len();
    let classes = FACTOR_COUNT;
    let mut mean = vec![0.0; dims];
    let mut std = vec![0.0; dims];
    for x in train_x {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for x in train_x {
        for d in 0..dims {
            std[d] += (x[d] - mean[d]) * (x[d] - mean[d]);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt().max(1e-9);
    }
    let norm = |x: &[f64], d: usize| (x[d] - mean[d]) / std[d];

    let mut w = vec![0.0; classes * dims];
    let mut b = vec![0.0; classes];
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0; classes * dims];
        let mut gb = vec![0.0; classes];
        for (x, &y) in train_x.iter().zip(train_y) {
            let mut logits = b.clone();
            for c in 0..classes {
                for d in 0..dims {
                    logits[c] += w[c * dims + d] * norm(x, d);
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in exps.iter_mut() {
                *e /= z;
            }
            for c in 0..classes {
                let err = exps[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for d in 0..dims {
                    gw[c * dims + d] += err * norm(x, d);
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= lr * g / n as f64;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= lr * g / n as f64;
        }
    }
    let mut correct = 0;
    for (x, &y) in test_x.iter().zip(test_y) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut s = b[c];
            for d in 0..dims {
                s += w[c * dims + d] * norm(x, d);
            }
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / test_x.len() as f64
}

// ---- majority-vote score ------------------------------------------------

/// Accuracy (x100) of the majority-vote table from argmin-variance votes on
/// std-normalized representations. Dimensions with raw std below
/// `prune_std` are dropped first.
pub fn factor_metric(
    rep: &RepresentationMatrix,
    params: &MetricParams,
    seed: u64,
) -> Result<f64, MetricError> {
    let pools = rep.check_factor_levels()?;
    let stds = rep.column_stds();
    let kept: Vec<usize> = (0..rep.cols).filter(|&c| stds[c] >= params.prune_std).collect();
    if kept.is_empty() {
        return Err(MetricError::AllDimsPruned);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vote = |rng: &mut ChaCha8Rng| -> (usize, usize) {
        let factor = rng.random_range(0..FACTOR_COUNT);
        let usable: Vec<&Vec<usize>> = pools[factor].iter().filter(|p| p.len() >= 2).collect();
        let pool = usable[rng.random_range(0..usable.len())];
        let mut sum = vec![0.0; kept.len()];
        let mut sq = vec![0.0; kept.len()];
        for _ in 0..params.votes {
            let r = pool[rng.random_range(0..pool.len())];
            for (j, &c) in kept.iter().enumerate() {
                let v = rep.at(r, c) / stds[c];
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let mut best = 0;
        let mut best_var = f64::INFINITY;
        for j in 0..kept.len() {
            let mean = sum[j] / params.votes as f64;
            let var = sq[j] / params.votes as f64 - mean * mean;
            if var < best_var {
                best_var = var;
                best = j;
            }
        }
        (kept[best], factor)
    };
    let mut table = vec![[0usize; FACTOR_COUNT]; rep.cols];
    for _ in 0..params.trials {
        let (dim, factor) = vote(&mut rng);
        table[dim][factor] += 1;
    }
    let prediction: Vec<Option<usize>> = table
        .iter()
        .map(|counts| {
            let total: usize = counts.iter().sum();
            if total == 0 {
                None
            } else {
                Some(
                    counts
                        .iter()
                        .enumerate()
                        .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
                        .map(|(i, _)| i)
                        .unwrap(),
                )
            }
        })
        .collect();
    let mut correct = 0;
    for _ in 0..params.test_trials {
        let (dim, factor) = vote(&mut rng);
        if prediction[dim] == Some(factor) {
            correct += 1;
        }
    }
    Ok(correct as f64 / params.test_trials as f64 * 100.0)
}

// ---- importance-entropy score ----------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct DciScore {
    pub score: f64,
    /// Set when the representation carried no usable signal at all.
    pub degenerate: bool,
}

/// Per-dimension disentanglement from the entropy of normalized predictor
/// importances: `D_i = 1 - H(P_i) / ln(#factors)`, weighted by each
/// dimension's share of the total importance mass.
pub fn dci_metric(
    rep: &RepresentationMatrix,
    params: &MetricParams,
    _seed: u64,
) -> Result<DciScore, MetricError> {
    rep.check_factor_levels()?;
    let mut importance = vec![vec![0.0; FACTOR_COUNT]; rep.cols];
    for factor in 0..FACTOR_COUNT {
        let targets: Vec<f64> = rep.labels.iter().map(|l| l.level(factor) as f64).collect();
        let per_dim = match params.dci_importance {
            DciImportance::BoostedStumps => boosted_stump_importance(rep, &targets, params.dci_rounds),
            DciImportance::LassoLinear => lasso_importance(rep, &targets),
        };
        for (d, v) in per_dim.into_iter().enumerate() {
            importance[d][factor] = v;
        }
    }
    let total_mass: f64 = importance.iter().flatten().sum();
    if total_mass <= 1e-12 {
        return Ok(DciScore {
            score: 0.0,
            degenerate: true,
        });
    }
    let ln_f = (FACTOR_COUNT as f64).ln();
    let mut score = 0.0;
    for row in &importance {
        let row_mass: f64 = row.iter().sum();
        if row_mass <= 0.0 {
            continue;
        }
        let mut entropy = 0.0;
        for &v in row {
            if v > 0.0 {
                let p = v / row_mass;
                entropy -= p * p.ln();
            }
        }
        let d_i = 1.0 - entropy / ln_f;
        score += (row_mass / total_mass) * d_i;
    }
    Ok(DciScore {
        score,
        degenerate: false,
    })
}

/// Gradient-boosted regression stumps; returns each dimension's accumulated
/// squared-error reduction. Thresholds come from per-dimension quantile
/// buckets, so one round costs `O(dims * rows)`.
fn boosted_stump_importance(rep: &RepresentationMatrix, targets: &[f64], rounds: usize) -> Vec<f64> {
    let n = rep.rows;
    let dims = rep.cols;
    let buckets = 16usize.min(n.max(2));
    // bucket id per (dim, row) from the rank order; a cut between two
    // buckets is usable only if the value strictly increases across it,
    // otherwise tied values would be separated by arbitrary row order
    let mut bucket_of = vec![0u16; dims * n];
    let mut cut_valid = vec![false; dims * (buckets - 1)];
    for d in 0..dims {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            rep.at(a, d)
                .partial_cmp(&rep.at(b, d))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (rank, &row) in idx.iter().enumerate() {
            bucket_of[d * n + row] = (rank * buckets / n) as u16;
        }
        for cut in 0..buckets - 1 {
            // first rank of bucket cut+1
            let boundary = ((cut + 1) * n).div_ceil(buckets);
            if boundary > 0 && boundary < n {
                cut_valid[d * (buckets - 1) + cut] =
                    rep.at(idx[boundary - 1], d) < rep.at(idx[boundary], d);
            }
        }
    }
    let mean0 = targets.iter().sum::<f64>() / n as f64;
    let mut pred = vec![mean0; n];
    let mut importance = vec![0.0; dims];
    let shrink = 0.3;
    for _ in 0..rounds {
        let residual: Vec<f64> = targets.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let res_sum: f64 = residual.iter().sum();
        let mut best: Option<(usize, usize, f64, f64, f64)> = None; // dim, cut, gain, mean_l, mean_r
        for d in 0..dims {
            let mut bucket_sum = vec![0.0; buckets];
            let mut bucket_cnt = vec![0usize; buckets];
            for r in 0..n {
                let b = bucket_of[d * n + r] as usize;
                bucket_sum[b] += residual[r];
                bucket_cnt[b] += 1;
            }
            let mut left_sum = 0.0;
            let mut left_cnt = 0usize;
            for cut in 0..buckets - 1 {
                left_sum += bucket_sum[cut];
                left_cnt += bucket_cnt[cut];
                let right_cnt = n - left_cnt;
                if left_cnt == 0 || right_cnt == 0 || !cut_valid[d * (buckets - 1) + cut] {
                    continue;
                }
                let right_sum = res_sum - left_sum;
                // SSE reduction of splitting at this boundary
                let gain = left_sum * left_sum / left_cnt as f64
                    + right_sum * right_sum / right_cnt as f64
                    - res_sum * res_sum / n as f64;
                if best.map_or(true, |(_, _, g, _, _)| gain > g) {
                    best = Some((
                        d,
                        cut,
                        gain,
                        left_sum / left_cnt as f64,
                        right_sum / right_cnt as f64,
                    ));
                }
            }
        }
        let Some((d, cut, gain, mean_l, mean_r)) = best else {
            break;
        };
        if gain <= 0.0 {
            break;
        }
        importance[d] += gain;
        for r in 0..n {
            let value = if (bucket_of[d * n + r] as usize) <= cut {
                mean_l
            } else {
                mean_r
            };
            pred[r] += shrink * value;
        }
    }
    importance
}

/// Coordinate-descent lasso on standardized columns; importance `|w_d|`.
fn lasso_importance(rep: &RepresentationMatrix, targets: &[f64]) -> Vec<f64> {
    let n = rep.rows;
    let dims = rep.cols;
    let stds = rep.column_stds();
    let mut means = vec![0.0; dims];
    for d in 0..dims {
        for r in 0..n {
            means[d] += rep.at(r, d);
        }
        means[d] /= n as f64;
    }
    let x = |r: usize, d: usize| (rep.at(r, d) - means[d]) / stds[d].max(1e-9);
    let t_mean = targets.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = targets.iter().map(|t| t - t_mean).collect();
    let lambda = 0.05 * n as f64;
    let mut w = vec![0.0; dims];
    let mut residual = y.clone();
    for _ in 0..100 {
        for d in 0..dims {
            let mut rho = 0.0;
            let mut xx = 0.0;
            for r in 0..n {
                let xv = x(r, d);
                rho += xv * (residual[r] + w[d] * xv);
                xx += xv * xv;
            }
            let new_w = soft_threshold(rho, lambda) / xx.max(1e-12);
            if new_w != w[d] {
                let delta = new_w - w[d];
                for r in 0..n {
                    residual[r] -= delta * x(r, d);
                }
                w[d] = new_w;
            }
        }
    }
    w.into_iter().map(f64::abs).collect()
}

fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

// ---- mutual-information modularity -------------------------------------------

/// Modularity from the mutual information between equal-count-binned latent
/// dimensions and factor levels: a dimension scores high when its MI
/// concentrates on one factor. Dimensions with no MI signal score zero; the
/// score is the mean over dimensions carrying signal.
pub fn modularity_metric(
    rep: &RepresentationMatrix,
    params: &MetricParams,
    _seed: u64,
) -> Result<f64, MetricError> {
    rep.check_factor_levels()?;
    let n = rep.rows;
    let bins = params.bins.max(2).min(n);
    let mut scores = Vec::new();
    for d in 0..rep.cols {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            rep.at(a, d)
                .partial_cmp(&rep.at(b, d))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut bin_of = vec![0usize; n];
        for (rank, &row) in idx.iter().enumerate() {
            bin_of[row] = rank * bins / n;
        }
        let mut mi = [0.0; FACTOR_COUNT];
        for (f, mi_f) in mi.iter_mut().enumerate() {
            *mi_f = discrete_mi(&bin_of, bins, rep.labels.iter().map(|l| l.level(f) as usize), n);
        }
        let theta = mi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if theta <= 1e-6 {
            scores.push(None);
            continue;
        }
        let best = mi
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut delta = 0.0;
        for (f, &m) in mi.iter().enumerate() {
            if f != best {
                delta += (m / theta) * (m / theta);
            }
        }
        delta /= (FACTOR_COUNT - 1) as f64;
        scores.push(Some(1.0 - delta));
    }
    let qualifying: Vec<f64> = scores.iter().filter_map(|s| *s).collect();
    if qualifying.is_empty() {
        return Ok(0.0);
    }
    Ok(qualifying.iter().sum::<f64>() / qualifying.len() as f64)
}

/// Plug-in mutual information (nats) between two discrete variables.
fn discrete_mi(
    bin_of: &[usize],
    bins: usize,
    levels: impl Iterator<Item = usize>,
    n: usize,
) -> f64 {
    let mut joint = vec![0usize; bins * FACTOR_LEVELS];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; FACTOR_LEVELS];
    for (row, level) in levels.enumerate() {
        let b = bin_of[row];
        joint[b * FACTOR_LEVELS + level] += 1;
        px[b] += 1;
        py[level] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for b in 0..bins {
        for l in 0..FACTOR_LEVELS {
            let c = joint[b * FACTOR_LEVELS + l];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / nf;
            let p_x = px[b] as f64 / nf;
            let p_y = py[l] as f64 / nf;
            mi += pxy * (pxy / (p_x * p_y)).ln();
        }
    }
    mi
}

// ---- report ------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub beta_m: f64,
    pub factor_m: f64,
    pub dci: f64,
    pub modularity: f64,
    pub dci_degenerate: bool,
    pub trials: usize,
    pub test_trials: usize,
    pub seed: u64,
}

/// All four scores at once.
pub fn evaluate_metrics(
    rep: &RepresentationMatrix,
    params: &MetricParams,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    let beta_m = beta_metric(rep, params, seed)?;
    let factor_m = factor_metric(rep, params, seed.wrapping_add(1))?;
    let dci = dci_metric(rep, params, seed.wrapping_add(2))?;
    let modularity = modularity_metric(rep, params, seed.wrapping_add(3))?;
    Ok(MetricReport {
        beta_m,
        factor_m,
        dci: dci.score,
        modularity,
        dci_degenerate: dci.degenerate,
        trials: params.trials,
        test_trials: params.test_trials,
        seed,
    })
}

/// Append one row to `runs.csv`, creating the header on first write.
pub fn append_runs_csv(
    path: impl AsRef<std::path::Path>,
    dataset: &str,
    variant: &str,
    seed: u64,
    report: &MetricReport,
) -> std::io::Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "dataset,variant,seed,beta_m,factor_m,dci,modularity")?;
    }
    writeln!(
        file,
        "{dataset},{variant},{seed},{:.4},{:.4},{:.6},{:.6}",
        report.beta_m, report.factor_m, report.dci, report.modularity
    )?;
    Ok(())
}

// ---- synthetic reference representations -------------------------------------

/// Representation that copies each factor's level into exactly one
/// dimension, plus small Gaussian jitter.
pub fn oracle_representation(
    labels: &[FactorLabel],
    noise_std: f64,
    seed: u64,
) -> RepresentationMatrix {
    use rand_distr::Distribution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, noise_std).expect("positive std");
    let mut data = Vec::with_capacity(labels.len() * FACTOR_COUNT);
    for label in labels {
        for f in 0..FACTOR_COUNT {
            data.push(label.level(f) as f64 + normal.sample(&mut rng));
        }
    }
    RepresentationMatrix::new(labels.len(), FACTOR_COUNT, data, labels.to_vec())
}

/// Representation independent of the factors: pure unit Gaussian noise.
pub fn noise_representation(labels: &[FactorLabel], dims: usize, seed: u64) -> RepresentationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..labels.len() * dims)
        .map(|_| f64::standard_normal(&mut rng))
        .collect();
    RepresentationMatrix::new(labels.len(), dims, data, labels.to_vec())
}

use crate::tensor::Scalar as _;
