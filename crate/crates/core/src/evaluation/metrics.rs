//! Distribution, retrieval and alignment metrics over embedded motions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::motion_repr::MotionSequence;
use crate::{Error, Result};

pub const FID_EPS: f64 = 1e-6;
pub const DEFAULT_PAIRS: usize = 300;
pub const RETRIEVAL_BATCH: usize = 32;
pub const DEFAULT_BEAT_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Generated,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Hands,
    WholeBody,
}

/// `M × D_e` embedded samples.
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub data: Mat,
    pub provenance: Provenance,
    pub region: Option<Region>,
}

impl FeatureCloud {
    pub fn new(data: Mat, provenance: Provenance) -> Self {
        Self { data, provenance, region: None }
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = Some(region);
        self
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn moments(m: &Mat) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = m.dim();
    let x = DMatrix::from_row_iterator(n, d, m.iter().copied());
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += FID_EPS;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussian fits of two clouds.
pub fn fid(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("cloud dims differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientPool { needed: 2, got: a.len().min(b.len()) });
    }
    check_finite(&a.data, "cloud a")?;
    check_finite(&b.data, "cloud b")?;
    let (mu_a, cov_a) = moments(&a.data);
    let (mu_b, cov_b) = moments(&b.data);
    let root_a = psd_sqrt(&cov_a);
    let mut inner = &root_a * &cov_b * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    if !value.is_finite() {
        return Err(Error::Numeric("fid is not finite".into()));
    }
    Ok(value.max(0.0))
}

fn row_dist(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Decodes a linear index into the `k`-th unordered pair `(i, j)`, `i < j`.
fn pair_at(mut k: usize, m: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= m - 1 - i {
        k -= m - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Mean distance over `pairs` seeded distinct unordered pairs; exhaustive
/// when `pairs` covers every pair.
pub fn diversity(cloud: &FeatureCloud, pairs: usize, seed: u64) -> Result<f64> {
    let m = cloud.len();
    if m < 2 {
        return Err(Error::InsufficientPool { needed: 2, got: m });
    }
    let total = m * (m - 1) / 2;
    let x = &cloud.data;
    let chosen: Vec<usize> = if pairs >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, total, pairs).into_vec();
        v.sort_unstable();
        v
    };
    if chosen.is_empty() {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    let sum: f64 = chosen
        .iter()
        .map(|&k| {
            let (i, j) = pair_at(k, m);
            row_dist(x, i, x, j)
        })
        .sum();
    Ok(sum / chosen.len() as f64)
}

/// Top-k hit rates for `k = 1..=max_k` over seeded 32-sample batches.
///
/// Within a batch each caption ranks every motion by Euclidean distance; a
/// motion tied with the true one outranks it when its batch position is
/// lower.
pub fn r_precision_topk(motion: &Mat, text: &Mat, max_k: usize, seed: u64) -> Result<Vec<f64>> {
    if motion.dim() != text.dim() {
        return Err(Error::shape(format!(
            "motion {:?} and text {:?} embeddings are not row-paired",
            motion.dim(),
            text.dim()
        )));
    }
    let m = motion.nrows();
    if m < RETRIEVAL_BATCH {
        return Err(Error::InsufficientPool { needed: RETRIEVAL_BATCH, got: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hits = vec![0usize; max_k];
    let mut count = 0usize;
    for batch in order.chunks_exact(RETRIEVAL_BATCH) {
        for (pos, &item) in batch.iter().enumerate() {
            let d: Vec<f64> = batch.iter().map(|&j| row_dist(text, item, motion, j)).collect();
            let own = d[pos];
            let rank = d
                .iter()
                .enumerate()
                .filter(|&(q, &v)| v < own || (v == own && q < pos))
                .count();
            for (k, h) in hits.iter_mut().enumerate() {
                if rank <= k {
                    *h += 1;
                }
            }
            count += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / count as f64).collect())
}

pub fn r_precision(motion: &Mat, text: &Mat, k: usize, seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(r_precision_topk(motion, text, k, seed)?[k - 1])
}

/// Mean Euclidean distance between paired rows.
pub fn mm_dist(motion: &Mat, text: &Mat) -> Result<f64> {
    if motion.dim() != text.dim() || motion.nrows() == 0 {
        return Err(Error::shape(format!(
            "motion {:?} and text {:?} embeddings are not row-paired",
            motion.dim(),
            text.dim()
        )));
    }
    let n = motion.nrows();
    Ok((0..n).map(|i| row_dist(motion, i, text, i)).sum::<f64>() / n as f64)
}

/// Mean Gaussian kernel of each motion beat's distance to the nearest audio beat.
pub fn beat_align(motion_beats: &[f64], audio_beats: &[f64], sigma: f64) -> Result<f64> {
    if motion_beats.is_empty() || audio_beats.is_empty() {
        return Err(Error::UndefinedMetric("beat alignment needs non-empty beat lists".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let total: f64 = motion_beats
        .iter()
        .map(|&b| {
            let d2 = audio_beats
                .iter()
                .map(|&a| (b - a) * (b - a))
                .fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion_beats.len() as f64)
}

/// Heuristic motion beats: strict local minima of per-frame rotation speed,
/// ignoring frames whose speed is below `floor`.
pub fn extract_motion_beats(seq: &MotionSequence, floor: f64) -> Vec<f64> {
    let x = seq.to_f64();
    let rots = seq.layout.joint_rots();
    let root = seq.layout.root_rot();
    let f = x.nrows();
    if f < 3 {
        return Vec::new();
    }
    let speed: Vec<f64> = (1..f)
        .map(|i| {
            root.clone()
                .chain(rots.clone())
                .map(|c| (x[[i, c]] - x[[i - 1, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (1..speed.len() - 1)
        .filter(|&i| speed[i] < speed[i - 1] && speed[i] <= speed[i + 1] && speed[i - 1] > floor)
        .map(|i| i as f64 + 0.5)
        .collect()
}

/// Mean squared expression error; channels invalid in the reference are
/// zeroed on both sides.
pub fn face_l2(generated: &MotionSequence, reference: &MotionSequence) -> Result<f64> {
    if generated.frames() != reference.frames() {
        return Err(Error::Length(format!(
            "frame counts differ: {} vs {}",
            generated.frames(),
            reference.frames()
        )));
    }
    let g_range = generated.layout.face_expr();
    let r_range = reference.layout.face_expr();
    if g_range.len() != r_range.len() || g_range.is_empty() {
        return Err(Error::Layout("face expression channels missing or mismatched".into()));
    }
    let mut sum = 0.0;
    for f in 0..reference.frames() {
        for (gc, rc) in g_range.clone().zip(r_range.clone()) {
            if !reference.validity[rc] {
                continue;
            }
            let d = generated.data[[f, gc]] as f64 - reference.data[[f, rc]] as f64;
            sum += d * d;
        }
    }
    Ok(sum / (reference.frames() * r_range.len()) as f64)
}
