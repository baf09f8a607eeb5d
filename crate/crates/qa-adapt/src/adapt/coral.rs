//! Correlation-alignment baseline: an affine map that whitens target
//! features with their own covariance, recolors with the source
//! covariance, and shifts to the source mean. Matches first- and
//! second-order statistics only, which is exactly what the adversarial
//! transforms are compared against.

use crate::error::{Error, Result};
use crate::features::{AffineMap, FeatureVector};
use crate::nn::Matrix;

const COV_RIDGE: f64 = 1e-5;

fn mean_and_covariance(rows: &[&FeatureVector], dim: usize) -> (Vec<f64>, Matrix) {
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.as_slice()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(dim, dim);
    for r in rows {
        let centered: Vec<f64> = r.as_slice().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for (j, &cj) in centered.iter().enumerate() {
                row[j] += ci * cj;
            }
        }
    }
    cov.scale(1.0 / (n - 1) as f64);
    for i in 0..dim {
        let v = cov.get(i, i);
        cov.set(i, i, v + COV_RIDGE);
    }
    (mean, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
fn symmetric_eigen(input: &Matrix) -> (Vec<f64>, Matrix) {
    let d = input.rows();
    let mut a = input.clone();
    let mut v = Matrix::zeros(d, d);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.get(p, q).powi(2);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| a.get(i, i)).collect();
    (eigenvalues, v)
}

/// `V diag(f(lambda)) V^T` for a symmetric PSD matrix.
fn symmetric_power(cov: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let d = cov.rows();
    let (eigenvalues, v) = symmetric_eigen(cov);
    let mut scaled = Matrix::zeros(d, d);
    for j in 0..d {
        let fv = f(eigenvalues[j].max(COV_RIDGE * 1e-3));
        for i in 0..d {
            scaled.set(i, j, v.get(i, j) * fv);
        }
    }
    scaled.matmul_transpose_b(&v)
}

/// Fits the alignment `x -> Cs^(1/2) Ct^(-1/2) (x - mu_t) + mu_s` from
/// samples of each domain. Covariances are ridge-regularized. Needs at
/// least dim + 1 samples per side.
pub fn coral_align(source: &[FeatureVector], target: &[FeatureVector]) -> Result<AffineMap> {
    let dim = source
        .first()
        .or_else(|| target.first())
        .map(|f| f.len())
        .ok_or_else(|| Error::EmptyInput("coral alignment".into()))?;
    for (side, feats) in [("source", source), ("target", target)] {
        if feats.len() <= dim {
            return Err(Error::InsufficientData(format!(
                "{side} has {} samples; need more than dim = {dim}",
                feats.len()
            )));
        }
        if feats.iter().any(|f| f.len() != dim) {
            return Err(Error::dim(format!("{side} features"), dim, 0));
        }
    }

    let source_refs: Vec<&FeatureVector> = source.iter().collect();
    let target_refs: Vec<&FeatureVector> = target.iter().collect();
    let (mean_s, cov_s) = mean_and_covariance(&source_refs, dim);
    let (mean_t, cov_t) = mean_and_covariance(&target_refs, dim);

    let recolor = symmetric_power(&cov_s, f64::sqrt);
    let whiten = symmetric_power(&cov_t, |l| 1.0 / l.sqrt());
    let matrix = recolor.matmul(&whiten);

    // offset = mu_s - A mu_t.
    let mut offset = mean_s;
    for i in 0..dim {
        let row = matrix.row(i);
        let mut acc = 0.0;
        for (a, &mt) in row.iter().zip(&mean_t) {
            acc += a * mt;
        }
        offset[i] -= acc;
    }
    AffineMap::new(matrix, offset)
}
