//! DeepCluster baseline: embed the whole dataset, run k-means on the
//! embeddings, train on the cluster ids with a freshly initialized
//! classifier, repeat.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::View;
use crate::dataset::{Dataset, LabelAssignment};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::optim::linear_decay_lr;
use crate::parallel::Parallelism;
use rand::RngCore;

use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use crate::uic::{
    epoch_metrics, fix_empty_classes, render_views, run_fft, train_epoch, EpochTrace, Phase,
    TrainingRun, UicConfig, INFERENCE_CHUNK,
};

pub const DEFAULT_KMEANS_ITERS: usize = 20;

/// Cluster centers stored column-wise, d×k.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub matrix: Tensor,
    pub iteration_count: usize,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn center(&self, c: usize) -> Vec<f64> {
        let k = self.k();
        (0..self.dim())
            .map(|j| self.matrix.data()[j * k + c])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Centroids,
    pub assignment: Vec<usize>,
    /// Mean squared distance of each point to its center.
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: the first center uniformly, each further center with
/// probability proportional to its squared distance to the nearest chosen
/// center. Duplicate points make zero-distance mass; if all remaining mass
/// is zero the next center is drawn uniformly.
fn seed_centers(points: &Tensor, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centers = vec![points.row(rng.below(n)).to_vec()];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding on the rows of `points` (N×d).
/// Stops when assignments no longer change or after `max_iters` update
/// steps. A cluster that loses all points is moved onto the point farthest
/// from its current center.
pub fn kmeans(points: &Tensor, k: usize, max_iters: usize, rng: &mut Rng) -> Result<KMeansResult> {
    if points.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "k-means expects N×d, got {:?}",
            points.shape()
        )));
    }
    let (n, d) = (points.rows(), points.row_len());
    if k < 1 || k > n {
        return Err(Error::invalid(format!("k = {k} with {n} points")));
    }
    if !points.is_finite() {
        return Err(Error::invalid("non-finite embedding"));
    }
    let mut centers = seed_centers(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for i in 0..n {
            let (c, dist) = nearest(points.row(i), &centers);
            changed |= assignment[i] != c;
            assignment[i] = c;
            dists[i] = dist;
        }
        inertia_trace.push(dists.iter().sum::<f64>() / n as f64);
        if !changed || iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            sums[assignment[i]]
                .iter_mut()
                .zip(points.row(i))
                .for_each(|(s, x)| *s += x);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s * inv).collect();
            } else {
                // farthest point from its own center, not already used
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("k <= n");
                taken[far] = true;
                centers[c] = points.row(far).to_vec();
                log::debug!("k-means: cluster {c} empty, reseeded at point {far}");
            }
        }
    }
    let mut matrix = Tensor::zeros(&[d, k]);
    for (c, center) in centers.iter().enumerate() {
        for (j, v) in center.iter().enumerate() {
            matrix.data_mut()[j * k + c] = *v;
        }
    }
    Ok(KMeansResult {
        inertia: *inertia_trace.last().expect("one assignment step"),
        centroids: Centroids {
            matrix,
            iteration_count: iterations,
        },
        assignment,
        inertia_trace,
        iterations,
    })
}

/// N×d embeddings of the whole dataset under the center-eval view.
pub fn embed_dataset(
    dataset: &Dataset,
    encoder: &EncoderState,
    par: &Parallelism,
) -> Result<Tensor> {
    let n = dataset.len();
    let d = encoder.config().embedding_dim;
    let chunks = n.div_ceil(INFERENCE_CHUNK);
    let parts = par.map(chunks, |c| -> Result<Tensor> {
        let idx: Vec<usize> = (c * INFERENCE_CHUNK..((c + 1) * INFERENCE_CHUNK).min(n)).collect();
        let batch = render_views(dataset, &idx, View::CenterEval, |_| Rng::new(0));
        Ok(encoder.forward(&batch)?.0)
    });
    let mut out = Tensor::zeros(&[n, d]);
    let mut row = 0;
    for part in parts {
        let part = part?;
        let len = part.len();
        out.data_mut()[row * d..row * d + len].copy_from_slice(part.data());
        row += part.rows();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepClusterConfig {
    pub uic: UicConfig,
    pub kmeans_iters: usize,
}

impl Default for DeepClusterConfig {
    fn default() -> Self {
        DeepClusterConfig {
            uic: UicConfig::default(),
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

fn cluster(
    dataset: &Dataset,
    encoder: &EncoderState,
    config: &DeepClusterConfig,
    root: &Rng,
    epoch: usize,
    par: &Parallelism,
) -> Result<(LabelAssignment, usize)> {
    let features = embed_dataset(dataset, encoder, par)?;
    let mut rng = root.derive(&[tags::KMEANS, epoch as u64]);
    let result = kmeans(&features, config.uic.k, config.kmeans_iters, &mut rng)?;
    log::debug!(
        "k-means epoch {epoch}: {} iterations, inertia {:.4}",
        result.iterations,
        result.inertia
    );
    let raw = LabelAssignment::new(result.assignment, config.uic.k, epoch)?;
    // only duplicate embeddings can leave a cluster empty after reseeding
    fix_empty_classes(raw, &mut root.derive(&[tags::REPAIR, epoch as u64]))
}

/// Alternate k-means on center-eval embeddings with supervised epochs. The
/// classifier is reinitialized before every epoch because cluster ids carry
/// no meaning from one clustering to the next.
pub fn run_deepcluster(
    dataset: &Dataset,
    mut encoder: EncoderState,
    config: &DeepClusterConfig,
    par: &Parallelism,
) -> Result<TrainingRun> {
    let uic = &config.uic;
    uic.validate()?;
    if config.kmeans_iters < 1 {
        return Err(Error::Config("kmeans_iters >= 1 required".into()));
    }
    if encoder.config().num_classes != uic.k {
        return Err(Error::Config(format!(
            "encoder emits {} classes but k = {}",
            encoder.config().num_classes,
            uic.k
        )));
    }
    let root = Rng::new(uic.seed);
    let truth = dataset.truth();
    let (mut labels, mut pending_fixes) = cluster(dataset, &encoder, config, &root, 0, par)?;
    let mut trace = Vec::with_capacity(uic.epochs + uic.fft_epochs);
    for epoch in 0..uic.epochs {
        let started = Instant::now();
        let lr = linear_decay_lr(uic.sgd.lr, epoch, uic.epochs);
        encoder.reinit_classifier(
            root.derive(&[tags::CLASSIFIER_INIT, epoch as u64])
                .next_u64(),
        );
        let outcome = train_epoch(
            dataset,
            &labels,
            &mut encoder,
            &uic.policy_train,
            uic.batch_size,
            &uic.sgd.with_lr(lr),
            &root.derive(&[tags::TRAIN_AUG, epoch as u64]),
            par,
        )?;
        let (next, fixes) = cluster(dataset, &encoder, config, &root, epoch + 1, par)?;
        let (nmi_vs_prev, nmi_vs_truth, partition_entropy) = epoch_metrics(&next, &labels, truth)?;
        let row = EpochTrace {
            epoch,
            phase: Phase::Main,
            mean_loss: outcome.mean_loss,
            nmi_vs_prev,
            nmi_vs_truth,
            partition_entropy,
            empty_class_fixes: fixes + pending_fixes,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "deepcluster epoch {epoch}: loss {:.4} nmi/prev {:.3} nmi/truth {} entropy {:.3}",
            row.mean_loss,
            row.nmi_vs_prev,
            row.nmi_vs_truth.map_or("-".into(), |v| format!("{v:.3}")),
            row.partition_entropy
        );
        trace.push(row);
        pending_fixes = 0;
        labels = next;
    }
    if uic.fft_epochs > 0 {
        run_fft(
            dataset,
            &mut encoder,
            &mut labels,
            &mut trace,
            uic,
            &root,
            par,
        )?;
    }
    Ok(TrainingRun {
        trace,
        labels,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_vec(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn two_obvious_clusters() {
        let p = points(&[
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [5.0, 5.0],
            [5.1, 5.0],
            [5.0, 5.1],
        ]);
        let r = kmeans(&p, 2, 20, &mut Rng::new(3)).unwrap();
        let a = &r.assignment;
        assert!(a[0] == a[1] && a[1] == a[2]);
        assert!(a[3] == a[4] && a[4] == a[5]);
        assert_ne!(a[0], a[3]);
        let c = r.centroids.center(a[0]);
        assert!((c[0] - 0.1 / 3.0).abs() < 1e-12 && (c[1] - 0.1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn inertia_is_monotone() {
        let mut rng = Rng::new(9);
        let data: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
        let p = Tensor::from_vec(&[200, 2], data).unwrap();
        let r = kmeans(&p, 7, 50, &mut Rng::new(1)).unwrap();
        for w in r.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", r.inertia_trace);
        }
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let p = points(&[[1.0, 1.0]; 6]);
        let r = kmeans(&p, 3, 5, &mut Rng::new(0)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.assignment.len(), 6);
    }

    #[test]
    fn rejects_bad_k() {
        let p = points(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(kmeans(&p, 3, 5, &mut Rng::new(0)).is_err());
        assert!(kmeans(&p, 0, 5, &mut Rng::new(0)).is_err());
    }
}
