//! Small dense linear algebra: PCA by power iteration, SPD solves.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const PCA_MAX_ITERS: usize = 200;
pub const PCA_TOL: f64 = 1e-10;

/// Two leading principal directions and the data projected onto them.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component (covariance eigenvalue, `n - 1` normalization).
    pub explained_variance: [f64; 2],
    pub projection: Tensor,
}

fn covariance(rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (rows.rows(), rows.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = rows.row(i);
        for a in 0..d {
            let ca = r[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += ca * (r[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = m[a * d..(a + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

/// Dominant eigenpair of a symmetric PSD matrix, orthogonal to `against`.
fn power_iterate(m: &[f64], d: usize, against: Option<&[f64]>) -> (Vec<f64>, f64) {
    // Fixed, generic start vector.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.618_033_988_7 * ((i * 7 + 3) % 11) as f64).collect();
    let orth = |v: &mut Vec<f64>| {
        if let Some(u) = against {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
    };
    orth(&mut v);
    normalize(&mut v);
    let mut next = vec![0.0; d];
    for _ in 0..PCA_MAX_ITERS {
        mat_vec(m, &v, &mut next);
        orth(&mut next);
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        core::mem::swap(&mut v, &mut next);
        if delta < PCA_TOL {
            break;
        }
    }
    // Sign convention: largest-magnitude coordinate positive.
    let pivot =
        v.iter().enumerate().fold((0, 0.0_f64), |acc, (i, x)| if x.abs() > acc.1.abs() { (i, *x) } else { acc }).1;
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    mat_vec(m, &v, &mut next);
    let lambda = v.iter().zip(&next).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    (v, lambda)
}

/// Projects centered rows onto their top two principal directions.
pub fn pca_project_2d(rows: &Tensor) -> Result<Pca2d> {
    let n = rows.rows();
    if n < 2 || rows.shape().len() != 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let d = rows.cols();
    let (mean, mut cov) = covariance(rows);
    let (v1, l1) = power_iterate(&cov, d, None);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (v2, l2) = if d >= 2 { power_iterate(&cov, d, Some(&v1)) } else { (vec![0.0; d], 0.0) };
    let mut proj = Vec::with_capacity(n * 2);
    for i in 0..n {
        let r = rows.row(i);
        for v in [&v1, &v2] {
            proj.push(r.iter().zip(&mean).zip(v.iter()).map(|((x, m), c)| (x - m) * c).sum::<f64>());
        }
    }
    Ok(Pca2d {
        mean,
        components: [v1, v2],
        explained_variance: [l1, l2.min(l1)],
        projection: Tensor::new(&[n, 2], proj)?,
    })
}

/// Solves `A X = B` for symmetric positive definite `A` (`n×n`) and `B` (`n×m`) by Cholesky.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n * m {
        return Err(dim_err("solve_spd", &[a.len()], &[b.len()]));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Config("matrix is not positive definite".into()));
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for col in 0..m {
        for i in 0..n {
            let mut s = x[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn rejects_single_row() {
        let t = Tensor::zeros(&[1, 3]);
        assert_eq!(pca_project_2d(&t).unwrap_err(), Error::InsufficientData { needed: 2, got: 1 });
    }

    #[test]
    fn duplicate_rows_project_identically() {
        let mut rng = stream(&[3]);
        let base = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..5).map(|i| base.row(i).to_vec()).collect();
        rows.push(rows[2].clone());
        let p = pca_project_2d(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(p.projection.row(2), p.projection.row(5));
    }

    #[test]
    fn planar_data_preserves_distances() {
        let mut rng = stream(&[4]);
        let basis = Tensor::randn(&[2, 8], 1.0, &mut rng);
        // Orthonormalize the two basis vectors.
        let mut b0 = basis.row(0).to_vec();
        normalize(&mut b0);
        let mut b1 = basis.row(1).to_vec();
        let dot: f64 = b0.iter().zip(&b1).map(|(a, b)| a * b).sum();
        b1.iter_mut().zip(&b0).for_each(|(a, b)| *a -= dot * b);
        normalize(&mut b1);
        let coeffs = Tensor::randn(&[12, 2], 2.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let c = coeffs.row(i);
                (0..8).map(|k| 0.5 + c[0] * b0[k] + 3.0 * c[1] * b1[k]).collect()
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let p = pca_project_2d(&data).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let orig: f64 = (0..8).map(|k| (rows[i][k] - rows[j][k]).powi(2)).sum::<f64>().sqrt();
                let (pi, pj) = (p.projection.row(i), p.projection.row(j));
                let proj = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                assert!((orig - proj).abs() <= 1e-6, "{orig} vs {proj}");
            }
        }
    }

    #[test]
    fn spd_solve_recovers_solution() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let x = [1.0, -2.0];
        let b = [4.0 * 1.0 + 1.0 * -2.0, 1.0 + 3.0 * -2.0];
        let got = solve_spd(&a, &b, 2, 1).unwrap();
        assert!((got[0] - x[0]).abs() < 1e-12 && (got[1] - x[1]).abs() < 1e-12);
    }
}
