//! Gaussian-blob fixtures standing in for real encoder output.
//!
//! Class `c` is centred at `a * e_{p(c)}`, where `p` is a seeded permutation
//! of the coordinate axes and `a = separation * sigma / sqrt(2)`, so every
//! pair of class means is exactly `separation * sigma` apart. Samples add
//! isotropic Gaussian noise whose root-mean-square norm is `sigma` (each
//! coordinate has standard deviation `sigma / sqrt(dim)`), so `sigma` is the
//! radius of a blob in the embedding space. The default puts class means at
//! unit norm, the scale of typical sentence-encoder output.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::dataset::Dataset;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance between class means in units of `sigma`.
    pub separation: f64,
    /// RMS norm of the per-sample noise.
    pub sigma: f64,
}

impl BlobSpec {
    pub fn new(classes: usize, dim: usize, train_per_class: usize) -> Self {
        Self {
            classes,
            dim,
            train_per_class,
            test_per_class: train_per_class,
            separation: 10.0,
            sigma: std::f64::consts::SQRT_2 / 10.0,
        }
    }

    pub fn with_test_per_class(mut self, n: usize) -> Self {
        self.test_per_class = n;
        self
    }

    fn mean_axes(&self, rng: &mut SeededRng) -> Vec<usize> {
        assert!(self.classes <= self.dim, "needs one axis per class");
        let axes: Vec<usize> = (0..self.dim).collect();
        rng.choose_distinct(&axes, self.classes)
    }

    fn mean_scale(&self) -> f64 {
        self.separation * self.sigma / std::f64::consts::SQRT_2
    }

    /// `classes x dim` matrix of the class centres used by `generate(seed)`.
    pub fn class_means(&self, seed: u64) -> Array2<f64> {
        let axes = self.mean_axes(&mut SeededRng::new(seed));
        let mut means = Array2::zeros((self.classes, self.dim));
        for (c, &axis) in axes.iter().enumerate() {
            means[[c, axis]] = self.mean_scale();
        }
        means
    }

    pub fn generate(&self, seed: u64) -> Blobs {
        let mut rng = SeededRng::new(seed);
        let axes = self.mean_axes(&mut rng);
        let scale = self.mean_scale();
        let coord_sd = self.sigma / (self.dim as f64).sqrt();

        let mut draw = |per_class: usize| {
            let n = per_class * self.classes;
            let mut x = Array2::<f32>::zeros((n, self.dim));
            let mut y = Vec::with_capacity(n);
            // Interleave classes so row order carries no label information.
            for i in 0..n {
                let class = i % self.classes;
                for v in x.row_mut(i).iter_mut() {
                    *v = (coord_sd * rng.normal()) as f32;
                }
                x[[i, axes[class]]] += scale as f32;
                y.push(class);
            }
            (x, y)
        };
        let (train_x, train_y) = draw(self.train_per_class);
        let (test_x, test_y) = draw(self.test_per_class);
        Blobs {
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Blobs {
    pub train_x: Array2<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f32>,
    pub test_y: Vec<usize>,
}

/// Class labels sort in id order (`intent_000`, `intent_001`, ...).
pub fn class_label(class: usize) -> String {
    format!("intent_{class:03}")
}

/// Paths of a fixture written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub train_store: PathBuf,
    pub test_store: PathBuf,
}

/// Writes a dataset directory in the layout the experiment runner expects:
/// `train.csv`, `test.csv`, `stores/train/<tag>.embs`, `stores/test/<tag>.embs`.
pub fn write_fixture(dir: &Path, spec: &BlobSpec, seed: u64, tag: &str) -> Result<FixturePaths> {
    let blobs = spec.generate(seed);
    let stores = dir.join("stores");
    for sub in ["train", "test"] {
        let d = stores.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let write_split = |name: &str, x: &Array2<f32>, y: &[usize]| -> Result<(PathBuf, PathBuf)> {
        let pairs = y
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("{name} utterance {i} about {}", class_label(c)), class_label(c)));
        let ds = Dataset::from_pairs(name, pairs)?;
        let csv = dir.join(format!("{name}.csv"));
        ds.write_canonical_csv(&csv)?;
        let store = EmbeddingStore::new(
            ds.digest(),
            x.ncols(),
            tag,
            x.iter().copied().collect(),
        )?;
        let store_path = stores.join(name).join(format!("{tag}.embs"));
        store.write(&store_path)?;
        Ok((csv, store_path))
    };
    let (train, train_store) = write_split("train", &blobs.train_x, &blobs.train_y)?;
    let (test, test_store) = write_split("test", &blobs.test_x, &blobs.test_y)?;
    Ok(FixturePaths {
        dir: dir.to_path_buf(),
        train,
        test,
        train_store,
        test_store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let b = BlobSpec::new(5, 16, 3).with_test_per_class(4).generate(0);
        assert_eq!(b.train_x.dim(), (15, 16));
        assert_eq!(b.test_x.dim(), (20, 16));
        for c in 0..5 {
            assert_eq!(b.train_y.iter().filter(|&&y| y == c).count(), 3);
        }
    }

    #[test]
    fn deterministic() {
        let s = BlobSpec::new(4, 8, 2);
        assert_eq!(s.generate(5).train_x, s.generate(5).train_x);
        assert_ne!(s.generate(5).train_x, s.generate(6).train_x);
    }

    #[test]
    fn means_are_separated() {
        let s = BlobSpec::new(6, 32, 1);
        let means = s.class_means(1);
        let target = s.separation * s.sigma;
        for i in 0..6 {
            for j in (i + 1)..6 {
                let d = (&means.row(i) - &means.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((d - target).abs() < 1e-12, "{d} vs {target}");
            }
        }
        // Sample averages sit near their centres.
        let b = BlobSpec::new(6, 32, 400).generate(1);
        for c in 0..6 {
            let rows: Vec<usize> = (0..b.train_y.len()).filter(|&i| b.train_y[i] == c).collect();
            let mut avg = ndarray::Array1::<f64>::zeros(32);
            for &r in &rows {
                avg += &b.train_x.row(r).mapv(|v| v as f64);
            }
            avg /= rows.len() as f64;
            let err = (&avg - &means.row(c)).mapv(|v| v * v).sum().sqrt();
            assert!(err < 0.5 * target, "class {c}: {err}");
        }
    }

    #[test]
    fn fixture_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &BlobSpec::new(3, 4, 2), 0, "blob").unwrap();
        let train = Dataset::load(&p.train).unwrap();
        let store = EmbeddingStore::read_for(&p.train_store, &train).unwrap();
        assert_eq!(store.count(), 6);
        assert_eq!(store.dim(), 4);
        assert_eq!(train.rows()[0].label, "intent_000");
    }
}
