//! Clustering evaluation: K-means on embeddings, scored against labels
//! with NMI, ARI and Hungarian-matched accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const KMEANS_RESTARTS: u64 = 10;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;
const EMBED_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub k: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

/// One Lloyd run from a given seeding. `history` holds the inertia after
/// every assignment step.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub result: ClusterAssignment,
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_f64<T: Scalar>(points: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    if points.shape().len() != 2 {
        return Err(Error::dim("kmeans", points.shape(), &[0, 0]));
    }
    let (m, d) = (points.rows(), points.cols());
    Ok((points.data().iter().map(|v| v.as_f64()).collect(), m, d))
}

fn plus_plus(x: &[f64], m: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(row(rng.gen_range(0..m)));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        let c = row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn assign(x: &[f64], d: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in x.chunks_exact(d).enumerate() {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (c, cen) in centers.chunks_exact(d).enumerate() {
            let dd = sq_dist(p, cen);
            if dd < best_d {
                best = c;
                best_d = dd;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Lloyd iterations from k-means++ seeding drawn from `rng`. A centroid
/// left without points is moved to the point farthest from its centroid.
pub fn lloyd<T: Scalar>(points: &Tensor<T>, k: usize, rng: &mut ChaCha8Rng) -> Result<LloydRun> {
    let (x, m, d) = rows_f64(points)?;
    if k == 0 || m < k {
        return Err(Error::Contract(format!("kmeans needs 1 <= k <= points, got k={k}, points={m}")));
    }
    let mut centers = plus_plus(&x, m, d, k, rng);
    let mut labels = vec![0usize; m];
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        history.push(assign(&x, d, &centers, &mut labels, &mut dists));
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, p) in x.chunks_exact(d).enumerate() {
            counts[labels[i]] += 1;
            sums[labels[i] * d..(labels[i] + 1) * d]
                .iter_mut()
                .zip(p)
                .for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..m)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("m >= 1");
                dists[far] = 0.0;
                x[far * d..(far + 1) * d].to_vec()
            };
            shift = shift.max(sq_dist(&new, &centers[c * d..(c + 1) * d]).sqrt());
            centers[c * d..(c + 1) * d].copy_from_slice(&new);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(&x, d, &centers, &mut labels, &mut dists);
    history.push(inertia);
    Ok(LloydRun {
        result: ClusterAssignment {
            assignments: labels,
            k,
            inertia,
        },
        history,
    })
}

/// Best of [`KMEANS_RESTARTS`] Lloyd runs, restart `r` seeded from
/// `(seed, r)`.
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, &mut rng_for(seed, r))?.result;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn check_lengths(labels: &[usize], preds: &[usize], min: usize) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(Error::Contract(format!(
            "labels ({}) and predictions ({}) differ in length",
            labels.len(),
            preds.len()
        )));
    }
    if labels.len() < min {
        return Err(Error::Contract(format!("need at least {min} samples")));
    }
    Ok(())
}

/// Counts per distinct id, keyed by id.
fn counts<K: Ord + Copy>(ids: impl Iterator<Item = K>) -> BTreeMap<K, u64> {
    let mut m = BTreeMap::new();
    for id in ids {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}

/// Entropy of a count histogram. Terms are summed in sorted order so the
/// value depends only on the multiset of counts.
fn entropy(hist: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut terms: Vec<f64> = hist
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(labels: &[usize], preds: &[usize]) -> Result<f64> {
    check_lengths(labels, preds, 1)?;
    let n = labels.len() as f64;
    let hu = entropy(counts(labels.iter().copied()).into_values(), n);
    let hv = entropy(counts(preds.iter().copied()).into_values(), n);
    let huv = entropy(counts(labels.iter().copied().zip(preds.iter().copied())).into_values(), n);
    let denom = 0.5 * (hu + hv);
    if denom == 0.0 {
        return Ok(1.0);
    }
    let mi = (hu + hv - huv).max(0.0);
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

/// Adjusted Rand index from the contingency table.
pub fn ari(labels: &[usize], preds: &[usize]) -> Result<f64> {
    check_lengths(labels, preds, 2)?;
    let index: u64 = counts(labels.iter().copied().zip(preds.iter().copied()))
        .into_values()
        .map(pairs)
        .sum();
    let a: u64 = counts(labels.iter().copied()).into_values().map(pairs).sum();
    let b: u64 = counts(preds.iter().copied()).into_values().map(pairs).sum();
    let total = pairs(labels.len() as u64);
    // (index − a·b/total) / ((a+b)/2 − a·b/total), scaled by 2·total so
    // everything before the final division is integral.
    let (index, a, b, total) = (index as i128, a as i128, b as i128, total as i128);
    let num = 2 * index * total - 2 * a * b;
    let den = (a + b) * total - 2 * a * b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Minimum-cost perfect assignment on a square matrix; returns the column
/// chosen for each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Accuracy under the best one-to-one mapping of clusters to classes.
pub fn acc(labels: &[usize], preds: &[usize]) -> Result<f64> {
    check_lengths(labels, preds, 1)?;
    let index = |ids: &[usize]| -> BTreeMap<usize, usize> {
        counts(ids.iter().copied()).keys().enumerate().map(|(i, &id)| (id, i)).collect()
    };
    let (li, pi) = (index(labels), index(preds));
    let n = li.len().max(pi.len());
    let mut cost = vec![vec![0i64; n]; n];
    for (l, p) in labels.iter().zip(preds) {
        cost[pi[p]][li[l]] -= 1;
    }
    let matched: i64 = hungarian(&cost).iter().enumerate().map(|(r, &c)| -cost[r][c]).sum();
    Ok(matched as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    FinalOutput,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::FinalOutput => "final_output",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "final_output" => Ok(Stage::FinalOutput),
            _ => Err(format!("unknown stage `{s}` (expected backbone or final_output)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusteringReport {
    pub stage: Stage,
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
}

pub const REPORT_CSV_HEADER: &str = "stage,nmi,ari,acc";

impl ClusteringReport {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.stage, self.nmi, self.ari, self.acc)
    }
}

impl fmt::Display for ClusteringReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<13} NMI {:.4}  ARI {:.4}  ACC {:.4}",
            self.stage.name(),
            self.nmi,
            self.ari,
            self.acc
        )
    }
}

/// Clusters `embeddings` into `k` groups and scores them against `labels`.
pub fn score_embeddings(
    embeddings: &Tensor<f64>,
    labels: &[usize],
    k: usize,
    stage: Stage,
    kmeans_seed: u64,
) -> Result<ClusteringReport> {
    let km = kmeans(embeddings, k, kmeans_seed)?;
    let preds = &km.assignments;
    Ok(ClusteringReport {
        stage,
        nmi: nmi(labels, preds)?,
        ari: ari(labels, preds)?,
        acc: acc(labels, preds)?,
    })
}

/// Eval-mode embeddings of every sample: `h` for the backbone stage; for
/// the final stage the predictor output `y`, or the projection `z` when the
/// run trained without a feature head.
pub fn embed_stage(ckpt: &Checkpoint, ds: &LabeledDataset, stage: Stage) -> Result<Tensor<f64>> {
    if ds.samples().shape() != ckpt.sample_shape {
        return Err(Error::Contract(format!(
            "dataset samples {:?} do not match checkpoint input {:?}",
            ds.samples().shape(),
            ckpt.sample_shape
        )));
    }
    let model = ckpt.model()?;
    let (h, z, y) = model.embed(&ds.samples().to_tensor(), EMBED_CHUNK)?;
    Ok(match stage {
        Stage::Backbone => h,
        Stage::FinalOutput if ckpt.config.train.use_feature_head => y,
        Stage::FinalOutput => z,
    })
}

/// K-means with `k` = number of classes on one stage's embeddings.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    ds: &LabeledDataset,
    stage: Stage,
    kmeans_seed: u64,
) -> Result<ClusteringReport> {
    let emb = embed_stage(ckpt, ds, stage)?;
    score_embeddings(&emb, ds.labels(), ds.num_classes(), stage, kmeans_seed)
}

pub fn embeddings_csv(emb: &Tensor<f64>, labels: &[usize]) -> Result<String> {
    if emb.rows() != labels.len() {
        return Err(Error::Contract("one label per embedding row required".into()));
    }
    let d = emb.cols();
    let mut s: String = (0..d).map(|j| format!("e{j},")).collect();
    s.push_str("label\n");
    for (i, l) in labels.iter().enumerate() {
        for v in emb.row(i) {
            s.push_str(&v.to_string());
            s.push(',');
        }
        s.push_str(&l.to_string());
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(ckpt: &Checkpoint, ds: &LabeledDataset, stage: Stage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = embeddings_csv(&embed_stage(ckpt, ds, stage)?, ds.labels())?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_metric_cases() {
        let l = [0, 0, 1, 1];
        let p = [0, 1, 0, 1];
        assert_eq!(nmi(&l, &p).unwrap(), 0.0);
        assert_eq!(ari(&l, &p).unwrap(), -0.5);
        assert_eq!(acc(&l, &p).unwrap(), 0.5);
        assert_eq!(nmi(&l, &l).unwrap(), 1.0);
        assert_eq!(nmi(&l, &[7, 7, 3, 3]).unwrap(), 1.0);
        assert_eq!(ari(&l, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(acc(&l, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!((acc(&[0, 0, 1, 1, 2, 2], &[0; 6]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(nmi(&l, &[0]), Err(Error::Contract(_))));
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn hungarian_rectangular_padding() {
        // Two classes, three clusters: the best map takes the two largest.
        let labels = [0, 0, 0, 1, 1, 1];
        let preds = [0, 0, 2, 1, 1, 2];
        assert!((acc(&labels, &preds).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = hungarian(&cost);
        let total: i64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn kmeans_edge_cases() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap();
        let one = kmeans(&pts, 1, 0).unwrap();
        assert!(one.assignments.iter().all(|&a| a == 0));
        // total variance·M = Σ‖x − mean‖² = 4·(25 + 0.25)
        assert!((one.inertia - 101.0).abs() < 1e-12);
        let all = kmeans(&pts, 4, 0).unwrap();
        assert_eq!(all.inertia, 0.0);
        let two = kmeans(&pts, 2, 0).unwrap();
        assert_eq!(two.assignments[0], two.assignments[1]);
        assert_eq!(two.assignments[2], two.assignments[3]);
        assert_ne!(two.assignments[0], two.assignments[2]);
        assert!((two.inertia - 1.0).abs() < 1e-12);
        assert!(matches!(kmeans(&pts, 5, 0), Err(Error::Contract(_))));
        assert_eq!(kmeans(&pts, 2, 3).unwrap(), kmeans(&pts, 2, 3).unwrap());
    }

    #[test]
    fn kmeans_duplicate_points() {
        let pts = Tensor::from_rows(&[[1.0], [1.0], [1.0], [2.0]]).unwrap();
        let r = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn report_line() {
        let r = ClusteringReport {
            stage: Stage::FinalOutput,
            nmi: 1.0,
            ari: 0.5,
            acc: 0.25,
        };
        assert_eq!(r.csv_line(), "final_output,1,0.5,0.25");
        assert_eq!("backbone".parse::<Stage>().unwrap(), Stage::Backbone);
        assert!("head".parse::<Stage>().is_err());
    }

    #[test]
    fn separated_embeddings_score_perfectly() {
        let rows: Vec<[f64; 2]> = (0..30).map(|i| [(i % 3) as f64 * 10.0, (i / 3) as f64 * 0.01]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let emb = Tensor::from_rows(&rows).unwrap();
        let r = score_embeddings(&emb, &labels, 3, Stage::Backbone, 0).unwrap();
        assert_eq!((r.nmi, r.ari, r.acc), (1.0, 1.0, 1.0));
    }
}
