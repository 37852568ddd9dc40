//! Diagonal-covariance Gaussian mixture vocabulary, fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{squared_distance, Matrix};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Points per block of the E-step. Blocks are reduced in order so the result
/// does not depend on the thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    /// `-0.5·(D·ln 2π + Σ_d ln var)` per component.
    log_norm: Vec<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("GMM needs at least one component"));
        }
        if means.rows() != n || variances.rows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: means.rows().min(variances.rows()),
            });
        }
        if means.cols() != variances.cols() || means.cols() == 0 {
            return Err(Error::DimensionMismatch {
                expected: means.cols(),
                found: variances.cols(),
            });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("GMM weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("GMM weights sum to {total}, not 1")));
        }
        if variances.as_slice().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("GMM variances must be positive and finite"));
        }
        if means.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("GMM means must be finite"));
        }
        let d = means.cols() as f64;
        let log_norm = variances
            .iter_rows()
            .map(|v| -0.5 * (d * LN_2PI + v.iter().map(|s| s.ln()).sum::<f64>()))
            .collect();
        Ok(DiagonalGmm {
            weights,
            means,
            variances,
            log_norm,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn log_density_unchecked(&self, x: &[f64], n: usize) -> f64 {
        let mu = self.means.row(n);
        let var = self.variances.row(n);
        let mut q = 0.0;
        for d in 0..x.len() {
            let diff = x[d] - mu[d];
            q += diff * diff / var[d];
        }
        self.log_norm[n] - 0.5 * q
    }

    /// `log N(x | μ_n, diag(var_n))`.
    pub fn log_component_density(&self, x: &[f64], n: usize) -> Result<f64> {
        self.check_dim(x)?;
        if n >= self.components() {
            return Err(Error::invalid(format!("component {n} out of range")));
        }
        Ok(self.log_density_unchecked(x, n))
    }

    /// Writes posteriors into `out` and returns `log p(x)`.
    pub(crate) fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (n, o) in out.iter_mut().enumerate() {
            *o = self.weights[n].ln() + self.log_density_unchecked(x, n);
            max = max.max(*o);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        max + sum.ln()
    }

    /// Component responsibilities `γ_n(x)`; sums to 1.
    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.components()];
        self.posteriors_into(x, &mut out);
        Ok(out)
    }

    /// `log Σ_n w_n N(x | μ_n, Σ_n)`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.components()];
        Ok(self.posteriors_into(x, &mut buf))
    }

    /// Mean per-point log-likelihood of a data set.
    pub fn average_log_likelihood(&self, data: &Matrix) -> Result<f64> {
        if data.rows() == 0 {
            return Err(Error::invalid("empty data set"));
        }
        let mut total = 0.0;
        for r in data.iter_rows() {
            total += self.log_likelihood(r)?;
        }
        Ok(total / data.rows() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub rel_tol: f64,
    /// Variance floor as a fraction of the average per-dimension data variance.
    pub variance_floor: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            rel_tol: 1e-6,
            variance_floor: 1e-4,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: DiagonalGmm,
    /// Average log-likelihood at the start of every iteration.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    /// Iterations at which an empty component was re-seeded.
    pub reseeded: Vec<usize>,
}

struct Stats {
    ll: f64,
    mass: Vec<f64>,
    /// `Σ γ (x − μ_old)`
    s1: Vec<f64>,
    /// `Σ γ (x − μ_old)²`
    s2: Vec<f64>,
    worst: (f64, usize),
}

impl Stats {
    fn zeros(n: usize, d: usize) -> Self {
        Stats {
            ll: 0.0,
            mass: vec![0.0; n],
            s1: vec![0.0; n * d],
            s2: vec![0.0; n * d],
            worst: (f64::INFINITY, usize::MAX),
        }
    }

    fn merge(mut self, other: Stats) -> Stats {
        self.ll += other.ll;
        self.mass.iter_mut().zip(&other.mass).for_each(|(a, b)| *a += b);
        self.s1.iter_mut().zip(&other.s1).for_each(|(a, b)| *a += b);
        self.s2.iter_mut().zip(&other.s2).for_each(|(a, b)| *a += b);
        if other.worst.0 < self.worst.0 {
            self.worst = other.worst;
        }
        self
    }
}

fn e_step(gmm: &DiagonalGmm, data: &Matrix) -> Stats {
    let (n, d) = (gmm.components(), gmm.dim());
    let rows: Vec<usize> = (0..data.rows()).collect();
    let parts: Vec<Stats> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = Stats::zeros(n, d);
            let mut gamma = vec![0.0; n];
            for &t in chunk {
                let x = data.row(t);
                let lp = gmm.posteriors_into(x, &mut gamma);
                st.ll += lp;
                if lp < st.worst.0 {
                    st.worst = (lp, t);
                }
                for (k, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    st.mass[k] += g;
                    let mu = gmm.means.row(k);
                    let s1 = &mut st.s1[k * d..(k + 1) * d];
                    let s2 = &mut st.s2[k * d..(k + 1) * d];
                    for j in 0..d {
                        let diff = x[j] - mu[j];
                        s1[j] += g * diff;
                        s2[j] += g * diff * diff;
                    }
                }
            }
            st
        })
        .collect();
    parts
        .into_iter()
        .fold(Stats::zeros(n, d), |acc, s| acc.merge(s))
}

fn data_variance(data: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for r in data.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for r in data.iter_rows() {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
    }
    var.iter_mut().for_each(|v| *v /= t as f64);
    (mean, var)
}

/// k-means++ seeding followed by Lloyd iterations. Returns centers and the
/// assignment of every point.
pub fn kmeans(data: &Matrix, k: usize, iters: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
    let (t, d) = (data.rows(), data.cols());
    let mut centers = Matrix::zeros(k, d);
    let first = rng.gen_range(0..t);
    centers.row_mut(0).copy_from_slice(data.row(first));
    let mut nearest: Vec<f64> = data
        .iter_rows()
        .map(|x| squared_distance(x, centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = t - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..t)
        };
        centers.row_mut(c).copy_from_slice(data.row(pick));
        for (i, x) in data.iter_rows().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(x, centers.row(c)));
        }
    }

    let mut assign = vec![0usize; t];
    for it in 0..=iters {
        for (i, x) in data.iter_rows().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = squared_distance(x, centers.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assign[i] = best.1;
        }
        if it == iters {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, x) in data.iter_rows().enumerate() {
            counts[assign[i]] += 1;
            sums.row_mut(assign[i])
                .iter_mut()
                .zip(x)
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    (centers, assign)
}

/// Fits a diagonal GMM with `n_components` by EM from a k-means start.
pub fn fit_em(data: &Matrix, n_components: usize, config: &EmConfig) -> Result<EmFit> {
    let (t, d) = (data.rows(), data.cols());
    if n_components == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    if t < n_components {
        return Err(Error::invalid(format!(
            "{t} points cannot support {n_components} components"
        )));
    }
    if d == 0 {
        return Err(Error::invalid("data has zero dimensions"));
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("data contains non-finite values"));
    }

    let (_, global_var) = data_variance(data);
    let avg_var = global_var.iter().sum::<f64>() / d as f64;
    let floor = (config.variance_floor * avg_var).max(1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (centers, assign) = kmeans(data, n_components, config.kmeans_iters, &mut rng);

    let mut counts = vec![0usize; n_components];
    let mut sq = Matrix::zeros(n_components, d);
    for (i, x) in data.iter_rows().enumerate() {
        let c = assign[i];
        counts[c] += 1;
        let mu = centers.row(c);
        for j in 0..d {
            sq.row_mut(c)[j] += (x[j] - mu[j]) * (x[j] - mu[j]);
        }
    }
    let mut variances = Matrix::zeros(n_components, d);
    for c in 0..n_components {
        for j in 0..d {
            let v = if counts[c] > 0 {
                sq.get(c, j) / counts[c] as f64
            } else {
                global_var[j]
            };
            variances.row_mut(c)[j] = v.max(floor);
        }
    }
    let denom: usize = counts.iter().map(|&c| c.max(1)).sum();
    let weights = counts
        .iter()
        .map(|&c| c.max(1) as f64 / denom as f64)
        .collect();
    let mut model = DiagonalGmm::new(weights, centers, variances)?;

    let mut history = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    for iter in 0..config.max_iters {
        let st = e_step(&model, data);
        let ll = st.ll / t as f64;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "log-likelihood became {ll} at EM iteration {iter}"
            )));
        }
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            if ll - prev < config.rel_tol * prev.abs() {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        let mut means = model.means.clone();
        let mut vars = model.variances.clone();
        let mut weights = vec![0.0; n_components];
        let mut reseed_used = false;
        for k in 0..n_components {
            let mass = st.mass[k];
            if mass < 1e-8 {
                let idx = if !reseed_used && st.worst.1 < t {
                    reseed_used = true;
                    st.worst.1
                } else {
                    rng.gen_range(0..t)
                };
                means.row_mut(k).copy_from_slice(data.row(idx));
                for j in 0..d {
                    vars.row_mut(k)[j] = global_var[j].max(floor);
                }
                weights[k] = 1.0 / t as f64;
                if reseeded.last() != Some(&iter) {
                    reseeded.push(iter);
                }
                continue;
            }
            weights[k] = mass / t as f64;
            let old = model.means.row(k);
            for j in 0..d {
                let shift = st.s1[k * d + j] / mass;
                let v = st.s2[k * d + j] / mass - shift * shift;
                means.row_mut(k)[j] = old[j] + shift;
                vars.row_mut(k)[j] = v.max(floor);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        model = DiagonalGmm::new(weights, means, vars)?;
    }

    Ok(EmFit {
        model,
        log_likelihoods: history,
        converged,
        reseeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn one_d(weights: &[f64], means: &[f64], vars: &[f64]) -> DiagonalGmm {
        DiagonalGmm::new(
            weights.to_vec(),
            Matrix::new(means.len(), 1, means.to_vec()).unwrap(),
            Matrix::new(vars.len(), 1, vars.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn random_gmm(n: usize, d: usize, seed: u64) -> DiagonalGmm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let means = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let vars = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        DiagonalGmm::new(raw.iter().map(|w| w / s).collect(), means, vars).unwrap()
    }

    #[test]
    fn standard_normal_density() {
        let g = one_d(&[1.0], &[0.0], &[1.0]);
        assert!((g.log_component_density(&[0.0], 0).unwrap() + 0.918_938_533_204_672_8).abs() < 1e-12);
        assert!((g.log_component_density(&[1.0], 0).unwrap() + 1.418_938_533_204_672_8).abs() < 1e-12);
    }

    #[test]
    fn diagonal_density_factorizes() {
        let g = DiagonalGmm::new(
            vec![1.0],
            Matrix::new(1, 2, vec![0.5, -1.0]).unwrap(),
            Matrix::new(1, 2, vec![2.0, 0.3]).unwrap(),
        )
        .unwrap();
        let a = one_d(&[1.0], &[0.5], &[2.0]);
        let b = one_d(&[1.0], &[-1.0], &[0.3]);
        let joint = g.log_component_density(&[0.1, 0.4], 0).unwrap();
        let split = a.log_component_density(&[0.1], 0).unwrap() + b.log_component_density(&[0.4], 0).unwrap();
        assert!((joint - split).abs() < 1e-12);
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(one_d(&[1.0], &[3.0], &[1.0]).posteriors(&[100.0]).unwrap(), vec![1.0]);
        let sym = one_d(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]);
        let p = sym.posteriors(&[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        // far in the tail the direct ratio underflows; log-sum-exp must not
        let p = sym.posteriors(&[1e4]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posteriors_match_direct_density_oracle() {
        for seed in 0..20 {
            let g = random_gmm(3, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dens: Vec<f64> = (0..3)
                .map(|n| {
                    let mut p = g.weights()[n];
                    for d in 0..4 {
                        let v = g.variances().get(n, d);
                        let diff = x[d] - g.means().get(n, d);
                        p *= (-diff * diff / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = dens.iter().sum();
            let post = g.posteriors(&x).unwrap();
            for n in 0..3 {
                assert!((post[n] - dens[n] / total).abs() < 1e-10);
            }
            assert!((g.log_likelihood(&x).unwrap() - total.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(DiagonalGmm::new(vec![0.6, 0.6], Matrix::zeros(2, 1), Matrix::new(2, 1, vec![1.0, 1.0]).unwrap()).is_err());
        assert!(DiagonalGmm::new(vec![1.0], Matrix::zeros(1, 1), Matrix::zeros(1, 1)).is_err());
        let g = one_d(&[1.0], &[0.0], &[1.0]);
        assert!(g.posteriors(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..200).map(|_| noise.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..200).map(|_| 100.0 + noise.sample(&mut rng)).collect();
        let data = Matrix::new(400, 1, a.iter().chain(&b).copied().collect()).unwrap();
        let fit = fit_em(&data, 2, &EmConfig::default()).unwrap();
        // per-cluster sample means as oracle
        let ma = a.iter().sum::<f64>() / 200.0;
        let mb = b.iter().sum::<f64>() / 200.0;
        let mut got = [fit.model.means().get(0, 0), fit.model.means().get(1, 0)];
        got.sort_by(f64::total_cmp);
        assert!((got[0] - ma).abs() < 0.1);
        assert!((got[1] - mb).abs() < 0.1);
        assert!(fit.converged);
    }

    #[test]
    fn distinct_points_fit_to_floor() {
        let data = Matrix::new(3, 2, vec![0.0, 0.0, 5.0, 1.0, -3.0, 4.0]).unwrap();
        let fit = fit_em(&data, 3, &EmConfig::default()).unwrap();
        let mut means: Vec<Vec<f64>> = fit.model.means().iter_rows().map(|r| r.to_vec()).collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(means, vec![vec![-3.0, 4.0], vec![0.0, 0.0], vec![5.0, 1.0]]);
        let ll = *fit.log_likelihoods.last().unwrap();
        assert!(ll.is_finite());
        let (_, var) = data_variance(&data);
        let floor = 1e-4 * var.iter().sum::<f64>() / 2.0;
        // upper bound: every point at the mode of a floor-variance component
        let bound = (1.0f64 / 3.0).ln() - (LN_2PI + floor.ln());
        assert!(ll <= bound + 1e-9);
        assert!(fit.model.variances().as_slice().iter().all(|&v| v >= floor));
    }

    #[test]
    fn too_many_components() {
        let data = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(fit_em(&data, 3, &EmConfig::default()).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Matrix::new(300, 3, (0..900).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let cfg = EmConfig { seed: 9, ..EmConfig::default() };
        let a = fit_em(&data, 4, &cfg).unwrap();
        let b = fit_em(&data, 4, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn posteriors_sum_to_one(seed in any::<u64>(), x in proptest::collection::vec(-50f64..50.0, 3)) {
            let g = random_gmm(5, 3, seed);
            let s: f64 = g.posteriors(&x).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn em_is_monotone(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Matrix::new(120, 2, (0..240).map(|i| rng.gen_range(-1.0..1.0) + (i % 3) as f64 * 2.0).collect()).unwrap();
            let fit = fit_em(&data, n, &EmConfig { seed, ..EmConfig::default() }).unwrap();
            for w in fit.log_likelihoods.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9);
            }
        }
    }
}
