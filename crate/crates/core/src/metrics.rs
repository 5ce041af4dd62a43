//! Evaluation formulas: per-class IoU, Inception Score, FID, KID and the
//! Gaussian-gated precision/recall, all over pluggable feature sets.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::occgrid::SemanticGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `N × D` feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub source: FeatureSource,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, source: FeatureSource) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!("{} values for {n}x{d} features", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(Self { n, d, data, source })
    }

    pub fn from_rows(rows: &[Vec<f64>], source: FeatureSource) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(rows.len(), d, rows.concat(), source)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }

    /// Mean vector and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.n < 2 {
            return Err(Error::Invalid(format!("need at least 2 feature vectors, got {}", self.n)));
        }
        let m = self.matrix();
        let mean = DVector::from_iterator(self.d, (0..self.d).map(|j| m.column(j).mean()));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (self.n as f64 - 1.0);
        Ok((mean, cov))
    }
}

/// Flat little-endian layout: `u32 N`, `u32 D`, then `N·D` f32 values.
pub fn write_features(fs_: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + 4 * fs_.data.len());
    buf.extend_from_slice(&(fs_.n as u32).to_le_bytes());
    buf.extend_from_slice(&(fs_.d as u32).to_le_bytes());
    for &v in &fs_.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>, source: FeatureSource) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 8, found: bytes.len() });
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    FeatureSet::new(n, d, data, source)
}

/// Per-class IoU and their mean over classes that occur in either grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both prediction and truth (or ignored).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Intersection and union counts accumulated over any number of grid pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
    ignore_free: bool,
}

impl IoUAccumulator {
    pub fn new(num_classes: usize, ignore_free: bool) -> Self {
        Self { inter: vec![0; num_classes], union: vec![0; num_classes], ignore_free }
    }

    pub fn add(&mut self, pred: &SemanticGrid, truth: &SemanticGrid) -> Result<()> {
        if pred.dims() != truth.dims() || pred.num_classes() != truth.num_classes() {
            return Err(Error::Shape(format!(
                "prediction {:?}/{} vs truth {:?}/{}",
                pred.dims(),
                pred.num_classes(),
                truth.dims(),
                truth.num_classes()
            )));
        }
        if pred.num_classes() as usize != self.inter.len() {
            return Err(Error::Shape("class count differs from accumulator".into()));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if p == t {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[t as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let per_class: Vec<Option<f64>> = (0..self.inter.len())
            .map(|c| {
                if (self.ignore_free && c == 0) || self.union[c] == 0 {
                    None
                } else {
                    Some(self.inter[c] as f64 / self.union[c] as f64)
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IoUReport { per_class, miou }
    }
}

pub fn miou(pred: &SemanticGrid, truth: &SemanticGrid, ignore_free: bool) -> Result<IoUReport> {
    let mut acc = IoUAccumulator::new(truth.num_classes() as usize, ignore_free);
    acc.add(pred, truth)?;
    Ok(acc.report())
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` with `p(y)` the mean row.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs.first().map_or(0, Vec::len);
    if probs.is_empty() || k == 0 {
        return Err(Error::Invalid("empty probability table".into()));
    }
    for row in probs {
        if row.len() != k {
            return Err(Error::Shape("ragged probability rows".into()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Invalid(format!("row is not a distribution (sum {s})")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given their moments.
///
/// `Tr((Σ_r Σ_g)^{1/2})` is evaluated as the sum of square roots of the
/// eigenvalues of `Σ_g^{1/2} Σ_r Σ_g^{1/2}`, negative eigenvalues clamped to 0.
pub fn fid_from_moments(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_r.len();
    if mu_g.len() != d || cov_r.shape() != (d, d) || cov_g.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions differ".into()));
    }
    let sg = sym_sqrt(cov_g);
    let inner = &sg * cov_r * &sg;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_r - mu_g;
    let value = diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    if real.d != gen.d {
        return Err(Error::Shape(format!("feature dims {} vs {}", real.d, gen.d)));
    }
    let (mr, cr) = real.moments()?;
    let (mg, cg) = gen.moments()?;
    fid_from_moments(&mr, &cr, &mg, &cg)
}

/// Polynomial kernel `(xᵀy / D + c)^degree`.
fn poly_kernel(x: &[f64], y: &[f64], c: f64, degree: i32) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + c).powi(degree)
}

/// Unbiased squared MMD with a polynomial kernel:
/// `1/(m(m-1)) Σ_{i≠j} k(x_i,x_j) + 1/(n(n-1)) Σ_{i≠j} k(y_i,y_j) - 2/(mn) Σ_{i,j} k(x_i,y_j)`.
///
/// Features are scaled by `1/D` inside the kernel.
pub fn kid(real: &FeatureSet, gen: &FeatureSet, c: f64, degree: u32) -> Result<f64> {
    if real.n < 2 || gen.n < 2 {
        return Err(Error::Invalid(format!("KID needs at least 2 samples per set, got {} and {}", real.n, gen.n)));
    }
    if real.d != gen.d {
        return Err(Error::Shape(format!("feature dims {} vs {}", real.d, gen.d)));
    }
    let deg = degree as i32;
    let (m, n) = (real.n, gen.n);
    let within = |s: &FeatureSet| {
        let mut acc = 0.0;
        for i in 0..s.n {
            for j in 0..s.n {
                if i != j {
                    acc += poly_kernel(s.row(i), s.row(j), c, deg);
                }
            }
        }
        acc / (s.n * (s.n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += poly_kernel(real.row(i), gen.row(j), c, deg);
        }
    }
    Ok(within(real) + within(gen) - 2.0 * cross / (m * n) as f64)
}

fn coverage(reference: &FeatureSet, probe: &FeatureSet, threshold: f64) -> Result<f64> {
    let (mu, cov) = reference.moments()?;
    let reg = cov + DMatrix::identity(reference.d, reference.d) * 1e-6;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Invalid("covariance is singular after regularization".into()))?;
    let inside = (0..probe.n)
        .filter(|&i| {
            let diff = DVector::from_column_slice(probe.row(i)) - &mu;
            let sol = chol.solve(&diff);
            diff.dot(&sol) <= threshold
        })
        .count();
    Ok(inside as f64 / probe.n as f64)
}

/// Fraction of generated samples inside the real Gaussian's χ² ellipsoid
/// (precision) and of real samples inside the generated one (recall).
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, quantile: f64) -> Result<(f64, f64)> {
    if real.d != gen.d {
        return Err(Error::Shape(format!("feature dims {} vs {}", real.d, gen.d)));
    }
    if !(0.0..1.0).contains(&quantile) || quantile <= 0.0 {
        return Err(Error::Invalid(format!("quantile {quantile} outside (0, 1)")));
    }
    if real.n < real.d + 1 || gen.n < gen.d + 1 {
        return Err(Error::Invalid(format!("need at least D+1={} samples per set", real.d + 1)));
    }
    let chi = ChiSquared::new(real.d as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    let threshold = chi.inverse_cdf(quantile);
    Ok((coverage(real, gen, threshold)?, coverage(gen, real, threshold)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occgrid::GridDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }).collect::<Vec<f64>>();
        FeatureSet::new(n, d, data, FeatureSource::Real).unwrap()
    }

    #[test]
    fn miou_cases() {
        let dims = GridDims::new(1, 1, 1, 2);
        let truth = SemanticGrid::new(dims, 3, vec![1, 1]).unwrap();
        let pred = SemanticGrid::new(dims, 3, vec![1, 2]).unwrap();
        let r = miou(&pred, &truth, false).unwrap();
        assert_eq!(r.per_class, vec![None, Some(0.5), Some(0.0)]);
        assert!((r.miou - 0.25).abs() < 1e-12);
        assert_eq!(miou(&truth, &truth, false).unwrap().miou, 1.0);

        let other = SemanticGrid::new(GridDims::new(1, 1, 2, 1), 3, vec![1, 1]).unwrap();
        assert!(miou(&other, &truth, false).is_err());
    }

    #[test]
    fn miou_ignore_free_and_disjoint() {
        let dims = GridDims::new(1, 1, 1, 4);
        let truth = SemanticGrid::new(dims, 3, vec![0, 0, 1, 1]).unwrap();
        let pred = SemanticGrid::new(dims, 3, vec![0, 2, 2, 0]).unwrap();
        let r = miou(&pred, &truth, true).unwrap();
        assert_eq!(r.per_class[0], None);
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn inception_score_cases() {
        let same = vec![vec![0.2, 0.3, 0.5]; 4];
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert!((inception_score(&onehot).unwrap() - 5.0).abs() < 1e-9);
        let mixed = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let h = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
        assert!((inception_score(&mixed).unwrap() - 2f64.powf(1.0 - h)).abs() < 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn fid_cases() {
        let a = gaussian(200, 3, 0.0, 1);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        let d = 5;
        let mu = DVector::zeros(d);
        let v = fid_from_moments(&mu, &(DMatrix::identity(d, d) * 4.0), &mu, &DMatrix::identity(d, d)).unwrap();
        assert!((v - d as f64).abs() < 1e-9);
        assert!(fid(&a, &gaussian(200, 4, 0.0, 2)).is_err());
        let one = FeatureSet::new(1, 3, vec![0.0; 3], FeatureSource::Real).unwrap();
        assert!(fid(&one, &a).is_err());
    }

    #[test]
    fn fid_mean_offset() {
        let a = gaussian(10_000, 4, 0.0, 3);
        let b = gaussian(10_000, 4, 1.0, 4);
        let v = fid(&a, &b).unwrap();
        // ‖μ‖² = 4 for an offset of 1 in each of 4 dims.
        assert!((v - 4.0).abs() < 0.15, "fid {v}");
        assert!((fid(&b, &a).unwrap() - v).abs() < 1e-6);
    }

    /// Direct evaluation of every kernel term of the estimator.
    fn kid_oracle(x: &[f64], y: &[f64], c: f64, d: i32) -> f64 {
        let k = |a: f64, b: f64| (a * b + c).powi(d);
        let (m, n) = (x.len() as f64, y.len() as f64);
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in x.iter().enumerate() {
                if i != j {
                    xx += k(a, b);
                }
            }
        }
        for (i, &a) in y.iter().enumerate() {
            for (j, &b) in y.iter().enumerate() {
                if i != j {
                    yy += k(a, b);
                }
            }
        }
        for &a in x {
            for &b in y {
                xy += k(a, b);
            }
        }
        xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
    }

    #[test]
    fn kid_matches_term_oracle() {
        let fs = |v: &[f64]| FeatureSet::new(v.len(), 1, v.to_vec(), FeatureSource::Real).unwrap();
        let x = [0.0, 1.0];
        assert!((kid(&fs(&x), &fs(&x), 1.0, 1).unwrap() - kid_oracle(&x, &x, 1.0, 1)).abs() < 1e-12);
        assert!((kid_oracle(&x, &x, 1.0, 1) + 0.5).abs() < 1e-12);
        let y = [0.3, -1.2, 2.0];
        assert!((kid(&fs(&x), &fs(&y), 1.0, 3).unwrap() - kid_oracle(&x, &y, 1.0, 3)).abs() < 1e-12);
        assert_eq!(kid(&fs(&x), &fs(&y), 1.0, 0).unwrap(), 0.0);
        assert!(kid(&fs(&[1.0]), &fs(&y), 1.0, 3).is_err());
    }

    #[test]
    fn kid_symmetric_and_permutation_invariant() {
        let a = gaussian(20, 3, 0.0, 5);
        let b = gaussian(15, 3, 0.5, 6);
        let ab = kid(&a, &b, 1.0, 3).unwrap();
        assert!((ab - kid(&b, &a, 1.0, 3).unwrap()).abs() < 1e-12);
        let mut rows: Vec<Vec<f64>> = (0..a.n).map(|i| a.row(i).to_vec()).collect();
        rows.reverse();
        let ar = FeatureSet::from_rows(&rows, FeatureSource::Real).unwrap();
        assert!((kid(&ar, &b, 1.0, 3).unwrap() - ab).abs() < 1e-10);
    }

    #[test]
    fn precision_recall_cases() {
        let real = gaussian(10_000, 3, 0.0, 7);
        let gen = gaussian(10_000, 3, 0.0, 8);
        let (p, r) = precision_recall(&real, &gen, 0.95).unwrap();
        assert!((p - 0.95).abs() < 0.02 && (r - 0.95).abs() < 0.02, "{p} {r}");
        let far = gaussian(500, 3, 50.0, 9);
        assert_eq!(precision_recall(&real, &far, 0.95).unwrap().0, 0.0);
        let (p, r) = precision_recall(&real, &real, 0.9).unwrap();
        assert_eq!(p, r);
        let (p2, r2) = precision_recall(&gen, &real, 0.95).unwrap();
        let (p1, r1) = precision_recall(&real, &gen, 0.95).unwrap();
        assert_eq!((p1, r1), (r2, p2));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let a = FeatureSet::new(2, 2, vec![1.0, -2.5, 3.25, 0.0], FeatureSource::Real).unwrap();
        write_features(&a, &p).unwrap();
        assert_eq!(read_features(&p, FeatureSource::Real).unwrap(), a);
        fs::write(&p, [1u8, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        assert!(read_features(&p, FeatureSource::Real).is_err());
    }
}
