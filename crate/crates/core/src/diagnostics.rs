//! Embedding geometry: eigendecomposition, isotropy score, cosine-similarity
//! histograms and a 2-D PCA projection.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_BINS: usize = 40;
pub const MAX_EIGEN_DIM: usize = 512;
const SYMMETRY_TOLERANCE: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    /// Descending.
    pub values: Array1<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> Result<EigenDecomposition> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Shape(format!("matrix is {}x{}, expected square", d, a.ncols())));
    }
    if d > MAX_EIGEN_DIM {
        return Err(Error::Shape(format!("dimension {d} exceeds {MAX_EIGEN_DIM}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    for i in 0..d {
        for j in i + 1..d {
            let diff = (a[[i, j]] - a[[j, i]]).abs();
            if diff > SYMMETRY_TOLERANCE {
                return Err(Error::Symmetry { row: i, col: j, diff });
            }
        }
    }

    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * norm;
    let off = |m: &[f64]| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += m[i * d + j] * m[i * d + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (kp, kq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * kp - s * kq;
                    m[k * d + q] = s * kp + c * kq;
                }
                for k in 0..d {
                    let (pk, qk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * pk - s * qk;
                    m[q * d + k] = s * pk + c * qk;
                }
                m[p * d + q] = 0.0;
                m[q * d + p] = 0.0;
                for k in 0..d {
                    let (kp, kq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * kp - s * kq;
                    v[k * d + q] = s * kp + c * kq;
                }
            }
        }
    }
    if !converged && off(&m) > tol {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].total_cmp(&m[i * d + i]));
    let values = Array1::from_iter(order.iter().map(|&i| m[i * d + i]));
    let mut vectors = Array2::zeros((d, d));
    for (col, &src) in order.iter().enumerate() {
        let sign = (0..d)
            .map(|k| v[k * d + src])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for k in 0..d {
            vectors[[k, col]] = sign * v[k * d + src];
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// `XᵀX`, mirrored so the result is exactly symmetric.
fn gram(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let mut g = Array2::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            let s = x.column(i).dot(&x.column(j));
            g[[i, j]] = s;
            g[[j, i]] = s;
        }
    }
    g
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsotropyResult {
    /// `min Z / max Z` over the candidate directions, in (0, 1].
    pub score: f64,
    /// `max Z / min Z`.
    pub reciprocal: f64,
    pub candidate_count: usize,
    /// Eigenvalues of `VᵀV` whose eigenvectors were kept.
    pub eigenvalues: Vec<f64>,
    /// `Z(c) = Σ_i exp(c·x_i)` for `+u_0, -u_0, +u_1, -u_1, ...`.
    pub partition_values: Vec<f64>,
}

pub fn isotropy_score(embeddings: ArrayView2<f64>) -> Result<IsotropyResult> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("isotropy needs at least 2 embeddings, got {n}")));
    }
    for (i, row) in embeddings.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateEmbedding(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    let eig = symmetric_eigen(gram(embeddings).view())?;
    let lambda_max = eig.values[0];
    let kept: Vec<usize> = (0..eig.values.len())
        .filter(|&j| lambda_max > 0.0 && eig.values[j] > 1e-10 * lambda_max)
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateEmbedding("no eigenvector of VᵀV above threshold".into()));
    }
    let mut log_z = Vec::with_capacity(2 * kept.len());
    for &j in &kept {
        let proj = embeddings.dot(&eig.vectors.column(j));
        log_z.push(log_sum_exp(proj.iter().copied()));
        log_z.push(log_sum_exp(proj.iter().map(|p| -p)));
    }
    let lo = log_z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(IsotropyResult {
        score: (lo - hi).exp(),
        reciprocal: (hi - lo).exp(),
        candidate_count: log_z.len(),
        eigenvalues: kept.iter().map(|&j| eig.values[j]).collect(),
        partition_values: log_z.iter().map(|l| l.exp()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityHistogram {
    pub class: usize,
    pub bin_edges: Vec<f64>,
    pub positive_counts: Vec<u64>,
    pub negative_counts: Vec<u64>,
    /// Pairs binned after subsampling.
    pub positive_pairs: u64,
    pub negative_pairs: u64,
    /// Pairs available before subsampling.
    pub positive_available: u64,
    pub negative_available: u64,
}

pub fn cosine_distribution(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    target_class: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<SimilarityHistogram> {
    cosine_distribution_binned(embeddings, labels, target_class, max_pairs, seed, DEFAULT_BINS)
}

/// Index of the `k`-th unordered pair `(a, b)`, `a < b < m`, in row-major order.
fn unordered_pair(k: usize, m: usize) -> (usize, usize) {
    // Row a starts at a·m − a(a+1)/2.
    let start = |a: usize| a * m - a * (a + 1) / 2;
    let (mut lo, mut hi) = (0, m - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if start(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + k - start(lo))
}

fn sampled(total: usize, max_pairs: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    if total <= max_pairs {
        (0..total).collect()
    } else {
        let mut picks = index::sample(rng, total, max_pairs).into_vec();
        picks.sort_unstable();
        picks
    }
}

pub fn cosine_distribution_binned(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    target_class: usize,
    max_pairs: usize,
    seed: u64,
    bins: usize,
) -> Result<SimilarityHistogram> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if bins == 0 || max_pairs == 0 {
        return Err(Error::Config("bins and max_pairs must be >= 1".into()));
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == target_class).collect();
    let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != target_class).collect();
    if members.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "class {target_class} has {} members, need at least 2",
            members.len()
        )));
    }
    let (unit, _) = crate::loss::normalize_rows(embeddings)?;
    let bin_of = |c: f64| (((c + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let cos = |a: usize, b: usize| unit.row(a).dot(&unit.row(b));

    let m = members.len();
    let pos_total = m * (m - 1) / 2;
    let neg_total = m * others.len();
    let mut rng = rng_for(seed, &[]);
    let mut positive_counts = vec![0u64; bins];
    let pos = sampled(pos_total, max_pairs, &mut rng);
    for &k in &pos {
        let (a, b) = unordered_pair(k, m);
        positive_counts[bin_of(cos(members[a], members[b]))] += 1;
    }
    let mut negative_counts = vec![0u64; bins];
    let neg = sampled(neg_total, max_pairs, &mut rng);
    for &k in &neg {
        let (a, b) = (k / others.len(), k % others.len());
        negative_counts[bin_of(cos(members[a], others[b]))] += 1;
    }
    Ok(SimilarityHistogram {
        class: target_class,
        bin_edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
        positive_counts,
        negative_counts,
        positive_pairs: pos.len() as u64,
        negative_pairs: neg.len() as u64,
        positive_available: pos_total as u64,
        negative_available: neg_total as u64,
    })
}

/// Projects mean-centred rows onto the top two principal axes.
pub fn pca_project_2d(embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = embeddings.dim();
    if n < 3 || d < 2 {
        return Err(Error::InsufficientData(format!("projection needs n >= 3 and d >= 2, got {n}x{d}")));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("n >= 3");
    let centred = &embeddings - &mean;
    let cov = gram(centred.view()) / (n - 1) as f64;
    let eig = symmetric_eigen(cov.view())?;
    let axes = eig.vectors.slice(ndarray::s![.., 0..2]);
    Ok(centred.dot(&axes))
}
