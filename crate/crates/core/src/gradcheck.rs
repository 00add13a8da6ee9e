//! Seeded grid of finite-difference checks over batch shapes and loss settings.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{
    clce_gradient, finite_difference_check_against, ClceGradient, EmbeddingBatch, FdReport,
    LogitsBatch, LossConfig,
};
use crate::rng::rng_for;

/// Maximum relative error accepted by [`run_grid`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Samples per batch; each contributes two views.
    pub batch_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub classes: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub hnm: Vec<bool>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            batch_sizes: vec![2, 4, 8],
            dims: vec![4, 16],
            classes: vec![2, 4],
            lambdas: vec![0.0, 0.5, 0.9, 1.0],
            taus: vec![0.1, 0.5, 1.0],
            hnm: vec![true],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCase {
    pub index: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub classes: usize,
    pub lambda: f64,
    pub tau: f64,
    pub hnm: bool,
    pub seed: u64,
}

impl GridSpec {
    pub fn cases(&self, seed: u64) -> Vec<GridCase> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &dim in &self.dims {
                for &classes in &self.classes {
                    for &lambda in &self.lambdas {
                        for &tau in &self.taus {
                            for &hnm in &self.hnm {
                                let index = out.len();
                                out.push(GridCase {
                                    index,
                                    batch_size,
                                    dim,
                                    classes,
                                    lambda,
                                    tau,
                                    hnm,
                                    seed: crate::rng::derive_seed(seed, &[index as u64]),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// A two-view batch of `batch_size` samples: each sample's views are noisy
/// copies of one Gaussian vector, normalized to the sphere; logits are
/// standard normal.
pub fn random_fixture(batch_size: usize, dim: usize, classes: usize, seed: u64) -> (EmbeddingBatch, LogitsBatch) {
    let mut rng = rng_for(seed, &[]);
    let rows = 2 * batch_size;
    let mut raw = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut ids = Vec::with_capacity(rows);
    for s in 0..batch_size {
        let label = rng.random_range(0..classes);
        let base: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for v in 0..2 {
            for (c, b) in base.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                raw[[2 * s + v, c]] = b + 0.3 * noise;
            }
            labels.push(label);
            ids.push(s);
        }
    }
    let logits = Array2::from_shape_fn((rows, classes), |_| rng.sample::<f64, _>(StandardNormal));
    let emb = EmbeddingBatch::from_raw(raw.view(), labels.clone(), ids).expect("gaussian rows are non-degenerate");
    let logits = LogitsBatch::new(logits, labels).expect("labels drawn below class count");
    (emb, logits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub case: GridCase,
    pub report: FdReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRADCHECK_TOLERANCE
    }
}

pub fn config_for(case: &GridCase) -> LossConfig {
    LossConfig {
        tau: case.tau,
        lambda: case.lambda,
        hnm_enabled: case.hnm,
        ..LossConfig::default()
    }
}

/// Runs one case. `tamper` may modify the analytic gradient before the
/// comparison; it exists so callers can run a negative control.
pub fn run_case(case: &GridCase, h: f64, tamper: impl Fn(&mut ClceGradient)) -> Result<CaseResult> {
    let (emb, logits) = random_fixture(case.batch_size, case.dim, case.classes, case.seed);
    let cfg = config_for(case);
    let mut grad = clce_gradient(&emb, &logits, &cfg)?;
    tamper(&mut grad);
    let report = finite_difference_check_against(emb.embeddings(), logits.logits(), logits.labels(), &cfg, h, &grad)?;
    Ok(CaseResult { case: *case, report })
}

pub fn run_grid(spec: &GridSpec, seed: u64, h: f64) -> Result<Vec<CaseResult>> {
    spec.cases(seed).iter().map(|c| run_case(c, h, |_| {})).collect()
}
