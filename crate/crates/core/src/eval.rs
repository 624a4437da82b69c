//! Clustering and representation metrics: NMI, partition statistics, the
//! frozen-feature linear probe and prototypical few-shot episodes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelAssignment;
use crate::error::{Error, Result};
use crate::optim::{sgd_step, ParamSet, SgdConfig};
use crate::rng::{tags, Rng};
use crate::tensor::{self, Tensor};

/// Sum with a canonical order, so permuted inputs give bit-identical sums.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    canonical_sum(
        counts
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

/// Normalized mutual information `I(A;B) / sqrt(H(A) H(B))` (natural logs).
///
/// When either labeling has zero entropy the result is 1 if both induce the
/// same partition (both constant) and 0 otherwise. Exactly symmetric and
/// invariant to relabeling: every sum is taken in a canonical order.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "labelings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("nmi of empty labelings"));
    }
    let n = a.len();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy_of_counts(ca.values().copied(), n);
    let hb = entropy_of_counts(cb.values().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    let nf = n as f64;
    let mi = canonical_sum(
        joint
            .iter()
            .map(|(&(x, y), &nij)| {
                let outer = (ca[&x] * cb[&y]) as f64;
                (nij as f64 / nf) * ((nij * n) as f64 / outer).ln()
            })
            .collect(),
    );
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// `H(counts / N) / ln k`
    pub normalized_entropy: f64,
    pub min_count: usize,
    pub max_count: usize,
    pub empty_count: usize,
}

pub fn partition_stats(assignment: &LabelAssignment) -> Result<PartitionStats> {
    let k = assignment.k();
    if k < 2 {
        return Err(Error::invalid("partition statistics need k >= 2"));
    }
    let counts = assignment.counts();
    let n = assignment.len();
    let normalized_entropy = if n == 0 {
        0.0
    } else {
        (entropy_of_counts(counts.iter().copied(), n) / (k as f64).ln()).clamp(0.0, 1.0)
    };
    Ok(PartitionStats {
        normalized_entropy,
        min_count: counts.iter().copied().min().unwrap_or(0),
        max_count: counts.iter().copied().max().unwrap_or(0),
        empty_count: counts.iter().filter(|&&c| c == 0).count(),
    })
}

// ---------------------------------------------------------------------------
// linear probe

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 32,
            lr: 0.1,
            batch_size: 64,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "probe needs epochs >= 1, batch_size >= 1 and lr > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for `epoch`: divided by ten at 10/32, 20/32 and 30/32 of
    /// the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = [10, 20, 30]
            .iter()
            .filter(|&&m| epoch * 32 >= m * self.epochs)
            .count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub final_train_loss: f64,
}

fn standardizer(features: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (features.rows(), features.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut()
            .zip(features.row(i))
            .for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| (s / n as f64).sqrt().max(1e-8))
        .collect();
    (mean, std)
}

fn standardize(features: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = features.clone();
    let d = features.row_len();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn check_features(features: &Tensor, labels: &[usize], what: &str) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{what} features {:?} vs {} labels",
            features.shape(),
            labels.len()
        )));
    }
    Ok(())
}

/// Train an affine softmax classifier on frozen features by SGD (momentum
/// 0.9) and report top-1 test accuracy. Features are standardized with the
/// training-set mean and standard deviation; weights start at zero.
pub fn linear_probe(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check_features(train_features, train_labels, "train")?;
    check_features(test_features, test_labels, "test")?;
    let d = train_features.row_len();
    if test_features.row_len() != d {
        return Err(Error::invalid("train and test feature widths differ"));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |m| m + 1)
        .max(2);
    let mut present = vec![false; classes];
    train_labels.iter().for_each(|&l| present[l] = true);
    for (c, _) in present.iter().enumerate().filter(|(_, p)| !**p) {
        log::warn!("linear probe: class {c} has no training samples");
    }

    let (mean, std) = standardizer(train_features);
    let train = standardize(train_features, &mean, &std);
    let test = standardize(test_features, &mean, &std);

    let mut params = ParamSet::new();
    params.insert("probe.weight", Tensor::zeros(&[d, classes]))?;
    params.insert("probe.bias", Tensor::zeros(&[classes]))?;
    let mut rng = Rng::new(cfg.seed).derive(&[tags::PROBE]);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let sgd = SgdConfig {
            lr: cfg.lr_at(epoch),
            momentum: 0.9,
            weight_decay: cfg.weight_decay,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Tensor::zeros(&[chunk.len(), d]);
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(train.row(i));
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let logits =
                tensor::affine_forward(&xb, &params.param(0).value, Some(&params.param(1).value))?;
            let (loss, dlogits) =
                tensor::cross_entropy_batch(&logits, &yb, 1.0 / chunk.len() as f64)?;
            loss_sum += loss;
            let g = tensor::affine_backward(&xb, &params.param(0).value, &dlogits)?;
            params.param_mut(0).grad = g.dw;
            params.param_mut(1).grad = g.db;
            sgd_step(&mut params, &sgd)?;
        }
        last_loss = loss_sum / train.rows() as f64;
    }

    let logits =
        tensor::affine_forward(&test, &params.param(0).value, Some(&params.param(1).value))?;
    let correct = (0..logits.rows())
        .filter(|&i| tensor::argmax(logits.row(i)) == test_labels[i])
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test_labels.len() as f64,
        final_train_loss: last_loss,
    })
}

// ---------------------------------------------------------------------------
// prototypical few-shot evaluation

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Ground-truth class of each way.
    pub ways: Vec<usize>,
    /// `support[w]` holds the `k_shot` sample indices of way `w`.
    pub support: Vec<Vec<usize>>,
    /// `query[w]` holds the `n_query` sample indices of way `w`.
    pub query: Vec<Vec<usize>>,
}

/// Draw one episode: `n_way` distinct classes, and for each a disjoint set
/// of `k_shot` support and `n_query` query samples.
pub fn sample_episode(
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let by_class = class_members(labels);
    sample_from(&by_class, n_way, k_shot, n_query, rng)
}

fn class_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn sample_from(
    by_class: &[Vec<usize>],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way < 2 || k_shot == 0 || n_query == 0 {
        return Err(Error::invalid(
            "episodes need n_way >= 2, k_shot >= 1, n_query >= 1",
        ));
    }
    let present: Vec<usize> = (0..by_class.len())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if present.len() < n_way {
        return Err(Error::invalid(format!(
            "{n_way}-way episodes need {n_way} classes, only {} present",
            present.len()
        )));
    }
    if let Some(&c) = present
        .iter()
        .find(|&&c| by_class[c].len() < k_shot + n_query)
    {
        return Err(Error::invalid(format!(
            "class {c} has {} samples, episodes need {}",
            by_class[c].len(),
            k_shot + n_query
        )));
    }
    let ways: Vec<usize> = rand::seq::index::sample(rng, present.len(), n_way)
        .into_iter()
        .map(|i| present[i])
        .collect();
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for &c in &ways {
        let picks = rand::seq::index::sample(rng, by_class[c].len(), k_shot + n_query);
        let picked: Vec<usize> = picks.into_iter().map(|i| by_class[c][i]).collect();
        support.push(picked[..k_shot].to_vec());
        query.push(picked[k_shot..].to_vec());
    }
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        ways,
        support,
        query,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of the episode's queries assigned to their own way's prototype
/// (mean support embedding) by squared Euclidean distance.
pub fn episode_accuracy(features: &Tensor, episode: &Episode) -> f64 {
    let d = features.row_len();
    let prototypes: Vec<Vec<f64>> = episode
        .support
        .iter()
        .map(|s| {
            let mut p = vec![0.0; d];
            for &i in s {
                p.iter_mut().zip(features.row(i)).for_each(|(a, v)| *a += v);
            }
            p.iter_mut().for_each(|a| *a /= s.len() as f64);
            p
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for (way, queries) in episode.query.iter().enumerate() {
        for &q in queries {
            let dists: Vec<f64> = prototypes
                .iter()
                .map(|p| -squared_distance(features.row(q), p))
                .collect();
            correct += usize::from(tensor::argmax(&dists) == way);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub mean_accuracy: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Mean prototypical-network accuracy over `episodes` episodes, each drawn
/// from its own stream derived from `rng`.
pub fn prototypical_eval(
    features: &Tensor,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    episodes: usize,
    rng: &Rng,
) -> Result<FewShotResult> {
    check_features(features, labels, "few-shot")?;
    if episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let by_class = class_members(labels);
    let accs = (0..episodes)
        .map(|e| {
            let mut r = rng.derive(&[tags::EPISODES, e as u64]);
            let ep = sample_from(&by_class, n_way, k_shot, n_query, &mut r)?;
            Ok(episode_accuracy(features, &ep))
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = accs.iter().sum::<f64>() / episodes as f64;
    let stderr = if episodes > 1 {
        let var = accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (episodes - 1) as f64;
        (var / episodes as f64).sqrt()
    } else {
        0.0
    };
    Ok(FewShotResult {
        mean_accuracy: m,
        stderr,
        episodes,
    })
}
