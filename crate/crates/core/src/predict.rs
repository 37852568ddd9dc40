//! Task-time classifiers for fixed features: one-vs-rest linear SVM trained
//! by Pegasos-style SGD, and nearest class mean.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, squared_distance, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    /// One row per class.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 30,
            seed: 0,
        }
    }
}

/// `λ/2·‖w‖² + mean(max(0, 1 − y·(w·x + b)))` for one binary problem.
pub fn hinge_objective(w: &[f64], b: f64, xs: &Matrix, ys: &[f64], lambda: f64) -> f64 {
    let loss: f64 = xs
        .iter_rows()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * lambda * dot(w, w) + loss / xs.rows() as f64
}

/// Pegasos SGD on one binary problem. Returns the average of the iterates of
/// the second half of training, which is far less noisy than the last one.
fn pegasos(xs: &Matrix, ys: &[f64], lambda: f64, epochs: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let d = xs.cols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut averaged = 0usize;
    let mut order: Vec<usize> = (0..xs.rows()).collect();
    let mut t = 1usize;
    let radius = 1.0 / lambda.sqrt();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for &i in &order {
            let x = xs.row(i);
            let eta = 1.0 / (lambda * t as f64);
            let margin = ys[i] * (dot(&w, x) + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                w.iter_mut().zip(x).for_each(|(v, xi)| *v += eta * ys[i] * xi);
                b += eta * ys[i];
            }
            let norm = dot(&w, &w).sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            if 2 * epoch >= epochs {
                averaged += 1;
                avg_w.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                avg_b += b;
            }
            t += 1;
        }
    }
    if averaged == 0 {
        return (w, b);
    }
    avg_w.iter_mut().for_each(|a| *a /= averaged as f64);
    (avg_w, avg_b / averaged as f64)
}

/// One-vs-rest linear SVM over classes `0..classes`.
pub fn train_linear_svm(features: &Matrix, labels: &[usize], classes: usize, config: &SvmConfig) -> Result<LinearSvmModel> {
    if classes < 2 {
        return Err(Error::invalid("linear SVM needs at least 2 classes"));
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            found: labels.len(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::invalid("no training samples"));
    }
    if !(config.lambda > 0.0) || config.epochs == 0 {
        return Err(Error::invalid("lambda and epochs must be positive"));
    }
    let mut present = vec![false; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("training labels contain a single class"));
    }
    let per_class: Vec<(Vec<f64>, f64)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels.iter().map(|&y| if y == c { 1.0 } else { -1.0 }).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(c as u64));
            pegasos(features, &ys, config.lambda, config.epochs, &mut rng)
        })
        .collect();
    let mut weights = Matrix::zeros(classes, features.cols());
    let mut biases = vec![0.0; classes];
    for (c, (w, b)) in per_class.into_iter().enumerate() {
        weights.row_mut(c).copy_from_slice(&w);
        biases[c] = b;
    }
    Ok(LinearSvmModel {
        weights,
        biases,
        lambda: config.lambda,
    })
}

impl LinearSvmModel {
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.weights.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.cols(),
                found: x.len(),
            });
        }
        Ok(self
            .weights
            .iter_rows()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }
}

/// Trains one model per λ in `grid` and keeps the one with the best accuracy
/// on the validation set; ties keep the earlier λ.
pub fn select_svm_lambda(
    train: (&Matrix, &[usize]),
    validation: (&Matrix, &[usize]),
    classes: usize,
    grid: &[f64],
    config: &SvmConfig,
) -> Result<(LinearSvmModel, f64)> {
    let mut best: Option<(LinearSvmModel, f64)> = None;
    for &lambda in grid {
        let model = train_linear_svm(train.0, train.1, classes, &SvmConfig { lambda, ..config.clone() })?;
        let mut correct = 0usize;
        for (x, &y) in validation.0.iter_rows().zip(validation.1) {
            correct += usize::from(svm_predict(x, &model)? == y);
        }
        let acc = correct as f64 / validation.1.len().max(1) as f64;
        if best.as_ref().map_or(true, |(_, a)| acc > *a) {
            best = Some((model, acc));
        }
    }
    best.ok_or_else(|| Error::invalid("empty lambda grid"))
}

/// Default λ grid for [`select_svm_lambda`].
pub const LAMBDA_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Highest-scoring class; ties go to the lowest class id.
pub fn svm_predict(x: &[f64], model: &LinearSvmModel) -> Result<usize> {
    Ok(crate::mlp::argmax(&model.scores(x)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcmModel {
    /// Class ids in ascending order, one per centroid row.
    pub class_ids: Vec<usize>,
    pub centroids: Matrix,
}

/// Class means of the classes present in `labels`.
pub fn ncm_fit(features: &Matrix, labels: &[usize]) -> Result<NcmModel> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            found: labels.len(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::invalid("no training samples"));
    }
    let mut class_ids: Vec<usize> = labels.to_vec();
    class_ids.sort_unstable();
    class_ids.dedup();
    let mut centroids = Matrix::zeros(class_ids.len(), features.cols());
    let mut counts = vec![0usize; class_ids.len()];
    for (x, y) in features.iter_rows().zip(labels) {
        let k = class_ids.binary_search(y).expect("id collected above");
        counts[k] += 1;
        centroids.row_mut(k).iter_mut().zip(x).for_each(|(c, v)| *c += v);
    }
    for (k, &n) in counts.iter().enumerate() {
        centroids.row_mut(k).iter_mut().for_each(|c| *c /= n as f64);
    }
    Ok(NcmModel {
        class_ids,
        centroids,
    })
}

/// Like [`ncm_fit`] but requires every class in `0..classes` to be present.
pub fn ncm_fit_classes(features: &Matrix, labels: &[usize], classes: usize) -> Result<NcmModel> {
    let model = ncm_fit(features, labels)?;
    if let Some(missing) = (0..classes).find(|c| model.class_ids.binary_search(c).is_err()) {
        return Err(Error::invalid(format!("class {missing} has no examples")));
    }
    Ok(model)
}

/// Class of the nearest centroid (Euclidean); ties go to the lowest class id.
pub fn ncm_predict(x: &[f64], model: &NcmModel) -> Result<usize> {
    if x.len() != model.centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: model.centroids.cols(),
            found: x.len(),
        });
    }
    let mut best = (f64::INFINITY, 0);
    for (k, c) in model.centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(model.class_ids[best.1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn two_points_in_one_dimension() {
        let xs = Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap();
        let m = train_linear_svm(&xs, &[0, 1], 2, &SvmConfig { lambda: 1e-2, epochs: 50, seed: 0 }).unwrap();
        assert_eq!(svm_predict(&[-1.0], &m).unwrap(), 0);
        assert_eq!(svm_predict(&[1.0], &m).unwrap(), 1);
    }

    #[test]
    fn single_class_rejected() {
        let xs = random(4, 2, 0);
        assert!(train_linear_svm(&xs, &[1, 1, 1, 1], 2, &SvmConfig::default()).is_err());
        assert!(train_linear_svm(&xs, &[0, 0, 0, 0], 1, &SvmConfig::default()).is_err());
    }

    /// Full-batch subgradient descent with a decaying step, tracking the best
    /// objective seen.
    fn batch_oracle(xs: &Matrix, ys: &[f64], lambda: f64) -> f64 {
        let d = xs.cols();
        let (mut w, mut b) = (vec![0.0; d], 0.0);
        let mut best = hinge_objective(&w, b, xs, ys, lambda);
        for it in 1..=200_000 {
            let mut gw: Vec<f64> = w.iter().map(|v| lambda * v).collect();
            let mut gb = 0.0;
            for (x, &y) in xs.iter_rows().zip(ys) {
                if y * (dot(&w, x) + b) < 1.0 {
                    gw.iter_mut().zip(x).for_each(|(g, xi)| *g -= y * xi / xs.rows() as f64);
                    gb -= y / xs.rows() as f64;
                }
            }
            let step = 0.5 / (it as f64).sqrt();
            w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= step * g);
            b -= step * gb;
            best = best.min(hinge_objective(&w, b, xs, ys, lambda));
        }
        best
    }

    #[test]
    fn objective_close_to_batch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let y = i % 2;
            let c = if y == 1 { 0.7 } else { -0.7 };
            rows.push(vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            labels.push(y);
        }
        let xs = Matrix::from_rows(&rows).unwrap();
        let lambda = 0.05;
        let m = train_linear_svm(&xs, &labels, 2, &SvmConfig { lambda, epochs: 2000, seed: 3 }).unwrap();
        let ys: Vec<f64> = labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
        let got = hinge_objective(m.weights.row(1), m.biases[1], &xs, &ys, lambda);
        let oracle = batch_oracle(&xs, &ys, lambda);
        assert!(got <= oracle * 1.05, "sgd {got} vs oracle {oracle}");
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let xs = random(30, 3, 4);
        let labels: Vec<usize> = (0..30).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let m = train_linear_svm(&xs, &labels, 2, &SvmConfig { lambda: 1e4, epochs: 20, seed: 0 }).unwrap();
        assert!(m.weights.as_slice().iter().all(|w| w.abs() < 1e-2));
        let majority = (0..30).filter(|&i| svm_predict(xs.row(i), &m).unwrap() == 0).count();
        assert_eq!(majority, 30);
    }

    #[test]
    fn svm_predict_examples() {
        let m = LinearSvmModel {
            weights: Matrix::zeros(2, 3),
            biases: vec![1.0, 0.0],
            lambda: 1.0,
        };
        assert_eq!(svm_predict(&[5.0, -1.0, 2.0], &m).unwrap(), 0);
        let tie = LinearSvmModel {
            weights: Matrix::zeros(3, 1),
            biases: vec![0.5, 0.5, 0.5],
            lambda: 1.0,
        };
        assert_eq!(svm_predict(&[1.0], &tie).unwrap(), 0);
        assert!(svm_predict(&[1.0, 2.0], &tie).is_err());
    }

    #[test]
    fn ncm_examples() {
        let xs = Matrix::new(2, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        let m = ncm_fit(&xs, &[0, 1]).unwrap();
        assert_eq!(m.centroids, xs);
        let xs = Matrix::new(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let m = ncm_fit(&xs, &[5, 5]).unwrap();
        assert_eq!(m.centroids.row(0), &[1.0, 1.0]);
        assert_eq!(m.class_ids, vec![5]);

        let xs = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let m = ncm_fit(&xs, &[3, 1]).unwrap();
        assert_eq!(ncm_predict(&[2.0], &m).unwrap(), 1);
        assert_eq!(ncm_predict(&[0.0], &m).unwrap(), 3);
        assert_eq!(ncm_predict(&[1.0], &m).unwrap(), 1);
        assert!(ncm_fit_classes(&xs, &[3, 1], 4).is_err());
        assert!(ncm_fit(&Matrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn centroids_match_streaming_mean() {
        let xs = random(200, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let m = ncm_fit(&xs, &labels).unwrap();
        for (k, &c) in m.class_ids.iter().enumerate() {
            let mut mean = vec![0.0; 4];
            let mut n = 0.0;
            for (x, &y) in xs.iter_rows().zip(&labels) {
                if y == c {
                    n += 1.0;
                    mean.iter_mut().zip(x).for_each(|(m, v)| *m += (v - *m) / n);
                }
            }
            for (a, b) in m.centroids.row(k).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ncm_matches_exhaustive_scan() {
        let xs = random(40, 3, 7);
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = ncm_fit(&xs, &labels).unwrap();
        let queries = random(30, 3, 8);
        for q in queries.iter_rows() {
            let dists: Vec<f64> = m.centroids.iter_rows().map(|c| squared_distance(q, c)).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = m.class_ids[dists.iter().position(|&d| d == min).unwrap()];
            assert_eq!(ncm_predict(q, &m).unwrap(), expect);
        }
    }

    #[test]
    fn svm_matches_brute_force_argmax() {
        let xs = random(60, 4, 9);
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let m = train_linear_svm(&xs, &labels, 3, &SvmConfig::default()).unwrap();
        for x in random(20, 4, 10).iter_rows() {
            let scores: Vec<f64> = (0..3).map(|c| dot(m.weights.row(c), x) + m.biases[c]).collect();
            let best = (0..3).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
            assert_eq!(svm_predict(x, &m).unwrap(), best);
        }
    }

    proptest! {
        #[test]
        fn ncm_translation_invariant(seed in any::<u64>(), shift in proptest::collection::vec(-5f64..5.0, 3)) {
            let xs = random(12, 3, seed);
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let moved = Matrix::from_rows(xs.iter_rows().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>())).unwrap();
            let a = ncm_fit(&xs, &labels).unwrap();
            let b = ncm_fit(&moved, &labels).unwrap();
            let q = random(5, 3, seed ^ 0xff);
            for x in q.iter_rows() {
                let xm: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
                prop_assert_eq!(ncm_predict(x, &a).unwrap(), ncm_predict(&xm, &b).unwrap());
            }
        }

        #[test]
        fn svm_argmax_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(4, 3, seed);
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = LinearSvmModel { weights: w.clone(), biases: b.clone(), lambda: 1.0 };
            let scaled = LinearSvmModel {
                weights: Matrix::new(4, 3, w.as_slice().iter().map(|v| v * c).collect()).unwrap(),
                biases: b.iter().map(|v| v * c).collect(),
                lambda: 1.0,
            };
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert_eq!(svm_predict(&x, &m).unwrap(), svm_predict(&x, &scaled).unwrap());
        }
    }
}
