//! k-means pixel clustering baseline (k-means++ seeding, Lloyd iterations).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Channel intensities only.
    #[default]
    Rgb,
    /// Channel intensities plus row/column scaled to [0, 1].
    RgbXy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub feature_mode: FeatureMode,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig {
            k,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            feature_mode: FeatureMode::Rgb,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Row-major `n x dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn pixel_features<T: Float>(image: &Tensor<T>, mode: FeatureMode) -> Result<Features> {
    let (c, h, w) = image.dims3("pixel_features")?;
    let hw = h * w;
    let dim = match mode {
        FeatureMode::Rgb => c,
        FeatureMode::RgbXy => c + 2,
    };
    let mut data = Vec::with_capacity(hw * dim);
    let scale = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
    for p in 0..hw {
        data.extend((0..c).map(|ch| image.data()[ch * hw + p].as_f64()));
        if mode == FeatureMode::RgbXy {
            data.push(scale(p / w, h));
            data.push(scale(p % w, w));
        }
    }
    Ok(Features { dim, data })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each further centre is a point drawn with probability
/// proportional to its squared distance to the nearest chosen centre.
pub fn kmeans_plus_plus(features: &Features, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = features.len();
    let mut centroids = Vec::with_capacity(k * features.dim);
    centroids.extend_from_slice(features.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), &centroids[..])).collect();
    while centroids.len() < k * features.dim {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(features.row(pick));
        let c = &centroids[start..];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), c));
        }
    }
    centroids
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub initial_centroids: Vec<f64>,
    /// Inertia after every assignment step, final assignment included.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

/// Nearest centroid for every point (ties to the lower index); returns the
/// assignment, its inertia and each point's squared distance.
fn assign(features: &Features, centroids: &[f64]) -> (Vec<usize>, f64, Vec<f64>) {
    let dim = features.dim;
    let k = centroids.len() / dim;
    let mut labels = Vec::with_capacity(features.len());
    let mut dists = Vec::with_capacity(features.len());
    for i in 0..features.len() {
        let x = features.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for j in 0..k {
            let d = sq_dist(x, &centroids[j * dim..(j + 1) * dim]);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        labels.push(best);
        dists.push(best_d);
    }
    let inertia = dists.iter().sum();
    (labels, inertia, dists)
}

/// Lloyd iterations from the given centroids. Stops when no centroid moves
/// by `tol` or more, or after `max_iters` updates. An emptied cluster is
/// moved onto the point currently farthest from its centroid.
pub fn lloyd(features: &Features, initial: Vec<f64>, max_iters: usize, tol: f64) -> KMeansFit {
    let dim = features.dim;
    let k = initial.len() / dim;
    let mut centroids = initial.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let (labels, inertia, mut dists) = assign(features, &centroids);
        history.push(inertia);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            let slot = &mut next[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                for (c, s) in slot.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                let far = (0..dists.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                slot.copy_from_slice(features.row(far));
                dists[far] = 0.0;
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist(&centroids[j * dim..(j + 1) * dim], &next[j * dim..(j + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        iterations += 1;
        if shift < tol {
            converged = true;
            break;
        }
    }
    let (labels, inertia, _) = assign(features, &centroids);
    history.push(inertia);
    KMeansFit {
        labels,
        centroids,
        initial_centroids: initial,
        inertia_history: history,
        iterations,
        converged,
    }
}

pub fn kmeans_fit<T: Float>(image: &Tensor<T>, config: &KMeansConfig) -> Result<KMeansFit> {
    let features = pixel_features(image, config.feature_mode)?;
    let n = features.len();
    if config.k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if config.k > n {
        return Err(Error::TooManyClusters { k: config.k, pixels: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = kmeans_plus_plus(&features, config.k, &mut rng);
    Ok(lloyd(&features, init, config.max_iters, config.tol))
}

/// Clusters pixels of `image` into at most `k` labels.
pub fn kmeans_segment<T: Float>(image: &Tensor<T>, config: &KMeansConfig) -> Result<LabelMap> {
    let (_, h, w) = image.dims3("kmeans_segment")?;
    LabelMap::new(h, w, kmeans_fit(image, config)?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_colours() {
        let colours = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.1], [0.5, 0.5, 0.5]];
        let (h, w) = (6, 6);
        let which = |p: usize| (p * 7 + p / 5) % 3;
        let img = Tensor::from_fn([3, h, w], |i| colours[which(i % (h * w))][i / (h * w)]);
        let fit = kmeans_fit(&img, &KMeansConfig::new(3).with_seed(2)).unwrap();
        assert!(fit.inertia() < 1e-20);
        for p in 0..h * w {
            for q in 0..h * w {
                assert_eq!(which(p) == which(q), fit.labels[p] == fit.labels[q]);
            }
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let img = Tensor::from_fn([1, 4, 4], |i| i as f64 / 16.0);
        let fit = kmeans_fit(&img, &KMeansConfig::new(1)).unwrap();
        assert!(fit.labels.iter().all(|&l| l == 0));
        assert!((fit.centroids[0] - 7.5 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_clusters() {
        let img = Tensor::<f64>::zeros([1, 2, 2]);
        assert!(matches!(
            kmeans_segment(&img, &KMeansConfig::new(5)),
            Err(Error::TooManyClusters { k: 5, pixels: 4 })
        ));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let features = Features { dim: 1, data: vec![0.0, 0.1, 1.0, 1.1] };
        // the third centre starts far from every point
        let fit = lloyd(&features, vec![0.0, 1.0, 50.0], 10, 1e-9);
        let mut seen = fit.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert!(fit.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn xy_features_are_scaled() {
        let img = Tensor::<f64>::zeros([1, 3, 5]);
        let f = pixel_features(&img, FeatureMode::RgbXy).unwrap();
        assert_eq!(f.dim, 3);
        assert_eq!(f.row(14), &[0.0, 1.0, 1.0]);
        assert_eq!(f.row(7), &[0.0, 0.5, 0.5]);
    }
}
