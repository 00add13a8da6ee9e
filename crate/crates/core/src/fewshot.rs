//! Episodic N-way K-shot evaluation of frozen embeddings with a
//! nearest-centroid (cosine) classifier.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    /// Query items per class.
    pub query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.way < 1 || self.shot < 1 || self.query < 1 {
            return Err(Error::Config(format!("way, shot and query must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// One sampled task. Labels are remapped to `[0, way)` in the order the
/// classes were drawn; `classes[c]` is the original label of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub support: Array2<f64>,
    pub support_labels: Vec<usize>,
    pub query: Array2<f64>,
    pub query_labels: Vec<usize>,
}

/// Item indices of every class, classes in ascending label order.
fn class_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    members
}

fn check_supply(members: &BTreeMap<usize, Vec<usize>>, spec: &EpisodeSpec) -> Result<()> {
    spec.validate()?;
    if members.len() < spec.way {
        return Err(Error::InsufficientData(format!(
            "{}-way episodes need {} classes, data has {}",
            spec.way,
            spec.way,
            members.len()
        )));
    }
    let need = spec.shot + spec.query;
    if let Some((class, items)) = members.iter().find(|(_, items)| items.len() < need) {
        return Err(Error::InsufficientData(format!(
            "class {class} has {} items, each class needs shot + query = {need}",
            items.len()
        )));
    }
    Ok(())
}

pub fn sample_episode(embeddings: ArrayView2<f64>, labels: &[usize], spec: EpisodeSpec, seed: u64) -> Result<Episode> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let members = class_members(labels);
    check_supply(&members, &spec)?;
    Ok(sample_from(&members, embeddings, spec, seed))
}

fn sample_from(
    members: &BTreeMap<usize, Vec<usize>>,
    embeddings: ArrayView2<f64>,
    spec: EpisodeSpec,
    seed: u64,
) -> Episode {
    let class_list: Vec<usize> = members.keys().copied().collect();
    let mut rng = rng_for(seed, &[]);
    let chosen: Vec<usize> = index::sample(&mut rng, class_list.len(), spec.way)
        .into_iter()
        .map(|i| class_list[i])
        .collect();
    let mut support_indices = Vec::with_capacity(spec.way * spec.shot);
    let mut query_indices = Vec::with_capacity(spec.way * spec.query);
    let mut support_labels = Vec::with_capacity(spec.way * spec.shot);
    let mut query_labels = Vec::with_capacity(spec.way * spec.query);
    for (new_label, class) in chosen.iter().enumerate() {
        let items = &members[class];
        let picks = index::sample(&mut rng, items.len(), spec.shot + spec.query);
        for (n, i) in picks.into_iter().enumerate() {
            if n < spec.shot {
                support_indices.push(items[i]);
                support_labels.push(new_label);
            } else {
                query_indices.push(items[i]);
                query_labels.push(new_label);
            }
        }
    }
    Episode {
        spec,
        seed,
        classes: chosen,
        support: embeddings.select(Axis(0), &support_indices),
        query: embeddings.select(Axis(0), &query_indices),
        support_indices,
        query_indices,
        support_labels,
        query_labels,
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

/// Fraction of queries whose most cosine-similar class centroid is their own
/// class. Ties go to the lowest class index.
pub fn nearest_centroid_classify(episode: &Episode) -> f64 {
    let way = episode.spec.way;
    let dim = episode.support.ncols();
    let mut centroids = Array2::<f64>::zeros((way, dim));
    let mut counts = vec![0usize; way];
    for (row, &l) in episode.support.outer_iter().zip(&episode.support_labels) {
        let mut c = centroids.row_mut(l);
        c += &unit(row.to_owned());
        counts[l] += 1;
    }
    for (mut c, &n) in centroids.outer_iter_mut().zip(&counts) {
        let mean = c.mapv(|v| v / n as f64);
        c.assign(&unit(mean));
    }
    let mut correct = 0usize;
    for (q, &truth) in episode.query.outer_iter().zip(&episode.query_labels) {
        let q = unit(q.to_owned());
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, centroid) in centroids.outer_iter().enumerate() {
            let sim = centroid.dot(&q);
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        if best == truth {
            correct += 1;
        }
    }
    correct as f64 / episode.query_labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub spec: EpisodeSpec,
    pub seed: u64,
    pub episodes: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// `1.96 · stddev / √episodes`, with the sample standard deviation. Zero
    /// when only one episode ran.
    pub ci95: f64,
    pub single_episode: bool,
}

impl EpisodeReport {
    pub fn from_accuracies(spec: EpisodeSpec, seed: u64, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let mut sorted = accuracies.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let ci95 = if n > 1 {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            spec,
            seed,
            episodes: n,
            accuracies,
            mean,
            median,
            ci95,
            single_episode: n == 1,
        }
    }
}

/// Seed of episode `e` under master seed `seed`.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    derive_seed(seed, &[e as u64])
}

/// Runs `episodes` independent tasks. With `parallel`, episodes are spread
/// over the current rayon pool; the report is identical either way.
pub fn run_evaluation(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    spec: EpisodeSpec,
    episodes: usize,
    seed: u64,
    parallel: bool,
) -> Result<EpisodeReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let members = class_members(labels);
    check_supply(&members, &spec)?;
    let one = |e: usize| nearest_centroid_classify(&sample_from(&members, embeddings, spec, episode_seed(seed, e)));
    let accuracies: Vec<f64> = if parallel {
        (0..episodes).into_par_iter().map(one).collect()
    } else {
        (0..episodes).map(one).collect()
    };
    Ok(EpisodeReport::from_accuracies(spec, seed, accuracies))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i / per_class).collect()
    }

    #[test]
    fn episode_shapes() {
        let labels = grid_labels(8, 20);
        let emb = Array2::from_shape_fn((160, 4), |(i, j)| ((i * 7 + j) % 5) as f64 + 1.0);
        let ep = sample_episode(emb.view(), &labels, EpisodeSpec::default(), 3).unwrap();
        assert_eq!(ep.support.nrows(), 5);
        assert_eq!(ep.query.nrows(), 75);
        assert_eq!(ep, sample_episode(emb.view(), &labels, EpisodeSpec::default(), 3).unwrap());
    }

    #[test]
    fn small_class_is_reported() {
        let mut labels = grid_labels(5, 20);
        labels.extend([5, 5, 5]);
        let emb = Array2::ones((labels.len(), 3));
        let spec = EpisodeSpec {
            way: 5,
            shot: 2,
            query: 15,
        };
        match sample_episode(emb.view(), &labels, spec, 0) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("class 5"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let few = grid_labels(3, 30);
        assert!(matches!(
            sample_episode(Array2::ones((90, 3)).view(), &few, EpisodeSpec::default(), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let labels = grid_labels(6, 20);
        let emb = Array2::from_shape_fn((120, 6), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let ep = sample_episode(emb.view(), &labels, EpisodeSpec::default(), 1).unwrap();
        assert_eq!(nearest_centroid_classify(&ep), 1.0);
    }

    #[test]
    fn identical_embeddings_tie_to_class_zero() {
        let labels = grid_labels(5, 16);
        let emb = Array2::from_elem((80, 3), 0.5);
        let ep = sample_episode(emb.view(), &labels, EpisodeSpec::default(), 9).unwrap();
        assert_eq!(nearest_centroid_classify(&ep), 1.0 / 5.0);
    }

    #[test]
    fn report_statistics() {
        let r = EpisodeReport::from_accuracies(EpisodeSpec::default(), 0, vec![0.8, 1.0]);
        assert!((r.mean - 0.9).abs() < 1e-15);
        assert!((r.median - 0.9).abs() < 1e-15);
        let sd = (0.02f64).sqrt();
        assert!((r.ci95 - 1.96 * sd / 2f64.sqrt()).abs() < 1e-15);
        let single = EpisodeReport::from_accuracies(EpisodeSpec::default(), 0, vec![0.4]);
        assert!(single.single_episode);
        assert_eq!(single.ci95, 0.0);
        assert_eq!(single.median, 0.4);
    }

    #[test]
    fn parallel_matches_serial() {
        let labels = grid_labels(7, 20);
        let emb = Array2::from_shape_fn((140, 5), |(i, j)| ((i * 13 + j * 7) % 11) as f64 - 5.0);
        let a = run_evaluation(emb.view(), &labels, EpisodeSpec::default(), 50, 4, false).unwrap();
        let b = run_evaluation(emb.view(), &labels, EpisodeSpec::default(), 50, 4, true).unwrap();
        assert_eq!(a, b);
    }
}
