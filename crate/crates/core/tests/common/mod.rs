#![allow(dead_code)]

use cdkit::config::RunConfig;
use cdkit::losses::{
    concat_feature, concat_instance, cosine_similarity_matrix, normalized_entropy, nt_xent,
};
use cdkit::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn inst_loss(z1: &Mat, z2: &Mat, tau: f64) -> f64 {
    let tape = Tape::new();
    let (z, p) = concat_instance(tape.constant(&tensor(z1)), tape.constant(&tensor(z2))).unwrap();
    nt_xent(cosine_similarity_matrix(z).unwrap(), &p, tau).unwrap().item().unwrap()
}

pub fn feat_loss(y1: &Mat, y2: &Mat, tau: f64) -> f64 {
    let tape = Tape::new();
    let (y, p) = concat_feature(tape.constant(&tensor(y1)), tape.constant(&tensor(y2))).unwrap();
    nt_xent(cosine_similarity_matrix(y).unwrap(), &p, tau).unwrap().item().unwrap()
}

pub fn entropy_loss(y1: &Mat, y2: &Mat) -> f64 {
    let tape = Tape::new();
    let (y, _) = concat_feature(tape.constant(&tensor(y1)), tape.constant(&tensor(y2))).unwrap();
    normalized_entropy(y).unwrap().item().unwrap()
}

/// Direct transcription of NT-Xent over the rows of `rows` (`2H` rows,
/// positive of `i` is `i ± H`), with plain loops and no stabilization.
pub fn nt_xent_oracle(rows: &Mat, tau: f64) -> f64 {
    let m = rows.len();
    let h = m / 2;
    let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    let mut total = 0.0;
    for i in 0..m {
        let pos = if i < h { i + h } else { i - h };
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (cos(&rows[i], &rows[k]) / tau).exp();
            }
        }
        total += -((cos(&rows[i], &rows[pos]) / tau).exp() / denom).ln();
    }
    total / m as f64
}

pub fn transpose(m: &Mat) -> Mat {
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

pub fn stack(a: &Mat, b: &Mat) -> Mat {
    a.iter().chain(b).cloned().collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(lo..hi)).collect()).collect()
}

/// Random rows whose norms stay well away from zero.
pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    loop {
        let m = random_mat(rng, rows, cols, -2.0, 2.0);
        if m.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.25) {
            return m;
        }
    }
}

pub fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| m[i].clone()).collect()
}

pub fn permute_cols(m: &Mat, perm: &[usize]) -> Mat {
    m.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect()
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// ARI by enumerating every unordered pair of samples.
pub fn ari_by_pairs(labels: &[usize], preds: &[usize]) -> f64 {
    let n = labels.len();
    let (mut both, mut same_l, mut same_p, mut total) = (0i128, 0i128, 0i128, 0i128);
    for i in 0..n {
        for j in i + 1..n {
            let sl = labels[i] == labels[j];
            let sp = preds[i] == preds[j];
            both += (sl && sp) as i128;
            same_l += sl as i128;
            same_p += sp as i128;
            total += 1;
        }
    }
    // (RI_adj) = (both − E) / (mean − E), E = same_l·same_p/total.
    let num = 2 * both * total - 2 * same_l * same_p;
    let den = (same_l + same_p) * total - 2 * same_l * same_p;
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

/// ACC by trying every mapping of cluster ids onto class ids (ids are
/// `0..k`, unmatched clusters count as wrong).
pub fn acc_brute(labels: &[usize], preds: &[usize], k: usize) -> f64 {
    let mut all = Vec::new();
    permutations(&mut (0..k).collect(), 0, &mut all);
    let best = all
        .iter()
        .map(|map| labels.iter().zip(preds).filter(|(l, p)| map[**p] == **l).count())
        .max()
        .unwrap();
    best as f64 / labels.len() as f64
}

/// The toy benchmark of the ablation checks: four 16-dimensional Gaussian
/// clusters, 256 each, centers 4 apart along the axes; 100 epochs of batch 64.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.num_classes = 4;
    c.data.n_per_class = 256;
    c.data.dim = 16;
    c.data.separation = 4.0;
    c.train.epochs = 100;
    c.train.batch_size = 64;
    c.seeds.master = seed;
    c
}

/// A configuration small enough for quick end-to-end tests.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n_per_class = 24;
    c.data.dim = 8;
    c.train.batch_size = 16;
    c.train.epochs = 5;
    c.model.hidden_dims = vec![32];
    c.model.backbone_dim = 16;
    c.model.latent_dim = 8;
    c.seeds.master = seed;
    c
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
