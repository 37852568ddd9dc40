//! Fisher-Vector encoding of local descriptor sets under a diagonal GMM.
//!
//! Only mean and standard-deviation gradients are kept. The raw vector is laid
//! out as all mean gradients for components `0..N` followed by all deviation
//! gradients for `0..N`, each component contributing `D` contiguous values.

use serde::{Deserialize, Serialize};

use crate::gmm::DiagonalGmm;
use crate::linalg::{self, PcaModel};
use crate::patchdesc::LocalDescriptor;
use crate::{Error, Result};

/// A finalized Fisher-Vector, possibly the concatenation of a `grid × grid`
/// spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub grid: Option<usize>,
}

/// Raw normalized gradients of the descriptor set, length `2·N·D`.
/// An empty set encodes to the zero vector.
pub fn fv_raw<R: AsRef<[f64]>>(descriptors: &[R], gmm: &DiagonalGmm) -> Result<Vec<f64>> {
    let (n, d) = (gmm.components(), gmm.dim());
    let mut out = vec![0.0; 2 * n * d];
    if descriptors.is_empty() {
        return Ok(out);
    }
    let stdev: Vec<f64> = gmm.variances().as_slice().iter().map(|v| v.sqrt()).collect();
    let (mean_block, dev_block) = out.split_at_mut(n * d);
    let mut gamma = vec![0.0; n];
    for x in descriptors {
        let x = x.as_ref();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        gmm.posteriors_into(x, &mut gamma);
        for (k, &g) in gamma.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let mu = gmm.means().row(k);
            let s = &stdev[k * d..(k + 1) * d];
            let gm = &mut mean_block[k * d..(k + 1) * d];
            let gs = &mut dev_block[k * d..(k + 1) * d];
            for j in 0..d {
                let z = (x[j] - mu[j]) / s[j];
                gm[j] += g * z;
                gs[j] += g * (z * z - 1.0);
            }
        }
    }
    let t = descriptors.len() as f64;
    for (k, &w) in gmm.weights().iter().enumerate() {
        let cm = 1.0 / (t * w.sqrt());
        let cs = 1.0 / (t * (2.0 * w).sqrt());
        mean_block[k * d..(k + 1) * d].iter_mut().for_each(|v| *v *= cm);
        dev_block[k * d..(k + 1) * d].iter_mut().for_each(|v| *v *= cs);
    }
    Ok(out)
}

/// Signed square root then L2 normalization; zero stays zero.
pub fn fv_finalize(raw: &[f64]) -> Vec<f64> {
    let mut v = linalg::power_normalize(raw);
    linalg::l2_normalize_in_place(&mut v);
    v
}

/// Named grid/vocabulary pairings that all give `40960` dims with `D = 80`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FvVariant {
    Fv4,
    Fv16,
    Fv256,
}

impl FvVariant {
    pub fn grid(self) -> usize {
        match self {
            FvVariant::Fv4 => 8,
            FvVariant::Fv16 => 4,
            FvVariant::Fv256 => 1,
        }
    }

    pub fn components(self) -> usize {
        match self {
            FvVariant::Fv4 => 4,
            FvVariant::Fv16 => 16,
            FvVariant::Fv256 => 256,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FvVariant::Fv4 => "fv4",
            FvVariant::Fv16 => "fv16",
            FvVariant::Fv256 => "fv256",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fv4" => Some(FvVariant::Fv4),
            "fv16" => Some(FvVariant::Fv16),
            "fv256" => Some(FvVariant::Fv256),
            _ => None,
        }
    }

    /// Total length for local descriptors of dimension `dim`.
    pub fn len(self, dim: usize) -> usize {
        self.grid() * self.grid() * 2 * self.components() * dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub grid: usize,
    /// Re-L2-normalize the concatenation of per-cell vectors.
    pub renormalize: bool,
}

impl GridConfig {
    pub fn new(grid: usize) -> Self {
        GridConfig {
            grid,
            renormalize: true,
        }
    }
}

/// Per-cell Fisher-Vectors over a `grid × grid` partition of the page,
/// concatenated row-major. Cells without descriptors contribute zeros.
pub fn fv_grid_encode(
    descriptors: &[LocalDescriptor],
    gmm: &DiagonalGmm,
    config: GridConfig,
) -> Result<FisherVector> {
    let g = config.grid;
    if g == 0 {
        return Err(Error::invalid("grid must be >= 1"));
    }
    let cell_of = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
    let mut cells: Vec<Vec<&[f64]>> = vec![Vec::new(); g * g];
    for ld in descriptors {
        cells[cell_of(ld.norm_y) * g + cell_of(ld.norm_x)].push(&ld.values);
    }
    let mut values = Vec::with_capacity(g * g * 2 * gmm.components() * gmm.dim());
    for cell in &cells {
        values.extend(fv_finalize(&fv_raw(cell, gmm)?));
    }
    if g > 1 && config.renormalize {
        linalg::l2_normalize_in_place(&mut values);
    }
    Ok(FisherVector {
        values,
        grid: Some(g),
    })
}

/// PCA projection of a finalized FV, re-L2-normalized.
pub fn fv_pca_reduce(fv: &[f64], pca: &PcaModel) -> Result<Vec<f64>> {
    let mut out = pca.project(fv)?;
    linalg::l2_normalize_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gmm(n: usize, d: usize, rng: &mut impl Rng) -> DiagonalGmm {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        DiagonalGmm::new(
            raw.iter().map(|w| w / s).collect(),
            Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap(),
        )
        .unwrap()
    }

    fn random_points(t: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    fn ld(values: Vec<f64>, x: f64, y: f64) -> LocalDescriptor {
        LocalDescriptor {
            values,
            norm_x: x,
            norm_y: y,
            norm_s: 0.0,
        }
    }

    #[test]
    fn single_gaussian_at_mean() {
        let g = DiagonalGmm::new(
            vec![1.0],
            Matrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap(),
            Matrix::new(1, 3, vec![1.0, 0.5, 3.0]).unwrap(),
        )
        .unwrap();
        let raw = fv_raw(&[vec![0.5, -1.0, 2.0]], &g).unwrap();
        assert_eq!(&raw[..3], &[0.0; 3]);
        for v in &raw[3..] {
            assert!((v + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_set_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_gmm(2, 3, &mut rng);
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(fv_raw(&empty, &g).unwrap(), vec![0.0; 12]);
        assert_eq!(fv_finalize(&[0.0; 12]), vec![0.0; 12]);
    }

    #[test]
    fn lengths() {
        assert_eq!(FvVariant::Fv256.len(80), 40960);
        assert_eq!(FvVariant::Fv16.len(80), 40960);
        assert_eq!(FvVariant::Fv4.len(80), 40960);
    }

    #[test]
    fn finalize_examples() {
        let out = fv_finalize(&[2.5; 16]);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let raw = [-3.0, 0.5, 0.0, 7.0, -0.01];
        let out = fv_finalize(&raw);
        for (o, r) in out.iter().zip(&raw) {
            if *r == 0.0 {
                assert_eq!(*o, 0.0);
            } else {
                assert_eq!(o.signum(), r.signum());
            }
        }
        assert!((linalg::l2_norm(&out) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_one_is_image_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_gmm(3, 4, &mut rng);
        let pts = random_points(9, 4, &mut rng);
        let descs: Vec<_> = pts.iter().map(|p| ld(p.clone(), rng.gen(), rng.gen())).collect();
        let grid = fv_grid_encode(&descs, &g, GridConfig::new(1)).unwrap();
        let direct = fv_finalize(&fv_raw(&pts, &g).unwrap());
        assert_eq!(grid.values, direct);
    }

    #[test]
    fn single_cell_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gmm(2, 3, &mut rng);
        let descs: Vec<_> = random_points(6, 3, &mut rng)
            .into_iter()
            .map(|p| ld(p, 0.9, 0.1))
            .collect();
        let fv = fv_grid_encode(&descs, &g, GridConfig::new(4)).unwrap();
        let block = 2 * 2 * 3;
        assert_eq!(fv.values.len(), 16 * block);
        for (c, chunk) in fv.values.chunks(block).enumerate() {
            if c == 3 {
                assert!((linalg::l2_norm(chunk) - 1.0).abs() < 1e-12);
            } else {
                assert!(chunk.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn grid_without_renormalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_gmm(2, 2, &mut rng);
        let descs = vec![
            ld(vec![0.1, 0.2], 0.1, 0.1),
            ld(vec![-0.4, 0.9], 0.9, 0.9),
        ];
        let fv = fv_grid_encode(&descs, &g, GridConfig { grid: 2, renormalize: false }).unwrap();
        assert!((linalg::l2_norm(&fv.values) - 2f64.sqrt()).abs() < 1e-12);
        let fv = fv_grid_encode(&descs, &g, GridConfig::new(2)).unwrap();
        assert!((linalg::l2_norm(&fv.values) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (mu, var) = (0.3, 1.7f64);
        let s = var.sqrt();
        let xs = [-1.2, 0.1, 0.8, 2.5, 0.3];
        let g = DiagonalGmm::new(
            vec![1.0],
            Matrix::new(1, 1, vec![mu]).unwrap(),
            Matrix::new(1, 1, vec![var]).unwrap(),
        )
        .unwrap();
        let pts: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
        let raw = fv_raw(&pts, &g).unwrap();

        let avg_ll = |m: f64, sd: f64| {
            xs.iter()
                .map(|x| -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - (x - m).powi(2) / (2.0 * sd * sd))
                .sum::<f64>()
                / xs.len() as f64
        };
        let h = 1e-6;
        let d_mu = (avg_ll(mu + h, s) - avg_ll(mu - h, s)) / (2.0 * h);
        let d_s = (avg_ll(mu, s + h) - avg_ll(mu, s - h)) / (2.0 * h);
        // normalizers s/sqrt(w) and s/sqrt(2w) with w = 1
        let num_mu = d_mu * s;
        let num_s = d_s * s / 2f64.sqrt();
        assert!((raw[0] - num_mu).abs() <= 1e-5 * num_mu.abs().max(1e-12));
        assert!((raw[1] - num_s).abs() <= 1e-5 * num_s.abs().max(1e-12));
    }

    #[test]
    fn pca_reduce_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // rank-2 toy data in 6 dims
        let basis = random_points(2, 6, &mut rng);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                (0..6).map(|j| a * basis[0][j] + b * basis[1][j]).collect()
            })
            .collect();
        let pca = linalg::fit_pca(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert_eq!(fv_pca_reduce(pca.mean(), &pca).unwrap(), vec![0.0, 0.0]);
        for r in &rows {
            let back = pca.reconstruct(&pca.project(r).unwrap()).unwrap();
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let out = fv_pca_reduce(&rows[0], &pca).unwrap();
        assert!((linalg::l2_norm(&out) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn permutation_and_duplication_invariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gmm(3, 2, &mut rng);
            let pts = random_points(7, 2, &mut rng);
            let base = fv_raw(&pts, &g).unwrap();
            let mut rev = pts.clone();
            rev.reverse();
            let doubled: Vec<_> = pts.iter().chain(pts.iter()).cloned().collect();
            for (a, b) in base.iter().zip(&fv_raw(&rev, &g).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in base.iter().zip(&fv_raw(&doubled, &g).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn finalize_unit_norm_and_sign(raw in proptest::collection::vec(-10f64..10.0, 1..40)) {
            prop_assume!(raw.iter().any(|v| *v != 0.0));
            let out = fv_finalize(&raw);
            prop_assert!((linalg::l2_norm(&out) - 1.0).abs() < 1e-9);
            for (o, r) in out.iter().zip(&raw) {
                prop_assert!(*r == 0.0 || o.signum() == r.signum());
            }
        }
    }
}
