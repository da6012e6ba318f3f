use rand::Rng;

use super::{Capabilities, KlDirection, Regime, UnnormalizedPair};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Real;

/// Pre-change covariance of the 10-dimensional experiment.
pub const MVN10_SIGMA_PRE: [[f64; 10]; 10] = [
    [1.0, 0.6, 0.4, 0.2, 0.1, 0.05, 0.03, 0.02, 0.01, 0.01],
    [0.6, 1.0, 0.5, 0.3, 0.1, 0.04, 0.02, 0.02, 0.01, 0.01],
    [0.4, 0.5, 1.0, 0.4, 0.3, 0.1, 0.05, 0.03, 0.02, 0.01],
    [0.2, 0.3, 0.4, 1.0, 0.5, 0.3, 0.1, 0.04, 0.03, 0.02],
    [0.1, 0.1, 0.3, 0.5, 1.0, 0.6, 0.4, 0.2, 0.1, 0.05],
    [0.05, 0.04, 0.1, 0.3, 0.6, 1.0, 0.5, 0.3, 0.2, 0.1],
    [0.03, 0.02, 0.05, 0.1, 0.4, 0.5, 1.0, 0.6, 0.4, 0.3],
    [0.02, 0.02, 0.03, 0.04, 0.2, 0.3, 0.6, 1.0, 0.5, 0.4],
    [0.01, 0.01, 0.02, 0.03, 0.1, 0.2, 0.4, 0.5, 1.0, 0.6],
    [0.01, 0.01, 0.01, 0.02, 0.05, 0.1, 0.3, 0.4, 0.6, 1.0],
];

/// Post-change covariance of the 10-dimensional experiment.
pub const MVN10_SIGMA_POST: [[f64; 10]; 10] = [
    [1.2, 0.7, 0.5, 0.3, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02],
    [0.7, 1.2, 0.6, 0.4, 0.2, 0.1, 0.05, 0.04, 0.03, 0.02],
    [0.5, 0.6, 1.2, 0.5, 0.4, 0.2, 0.1, 0.07, 0.05, 0.03],
    [0.3, 0.4, 0.5, 1.2, 0.6, 0.4, 0.2, 0.1, 0.07, 0.05],
    [0.15, 0.2, 0.4, 0.6, 1.2, 0.7, 0.5, 0.3, 0.2, 0.1],
    [0.1, 0.1, 0.2, 0.4, 0.7, 1.2, 0.6, 0.4, 0.3, 0.2],
    [0.07, 0.05, 0.1, 0.2, 0.5, 0.6, 1.2, 0.7, 0.5, 0.4],
    [0.05, 0.04, 0.07, 0.1, 0.3, 0.4, 0.7, 1.2, 0.6, 0.5],
    [0.03, 0.03, 0.05, 0.07, 0.2, 0.3, 0.5, 0.6, 1.2, 0.7],
    [0.02, 0.02, 0.03, 0.05, 0.1, 0.2, 0.4, 0.5, 0.7, 1.2],
];

/// One side: `P~(x) = exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))`, so
/// `Z = (2 pi)^(d/2) det(Sigma)^(1/2)`.
#[derive(Debug, Clone, PartialEq)]
struct Side<T> {
    mean: Vec<T>,
    cov: Matrix<T>,
    chol: Cholesky<T>,
    precision: Matrix<T>,
    precision_mean: Vec<T>,
    log_det: T,
}

impl<T: Real> Side<T> {
    fn new(mean: Vec<T>, cov: Matrix<T>, which: &'static str) -> Result<Self> {
        let tol = T::lit(1e-12) * (T::one() + cov.trace().abs());
        if !cov.is_symmetric(tol) {
            return Err(Error::NotPositiveDefinite { which });
        }
        let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite { which })?;
        let precision = chol.inverse();
        let precision_mean = precision.mul_vec(&mean);
        let log_det = chol.log_det();
        Ok(Self {
            mean,
            cov,
            chol,
            precision,
            precision_mean,
            log_det,
        })
    }

    #[inline]
    fn log_density(&self, x: &[T]) -> T {
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        let y = self.chol.solve_lower(&centered);
        -T::lit(0.5) * y.iter().map(|&v| v * v).sum::<T>()
    }
}

/// Gaussian pre/post pair with full covariances.
///
/// The geometric path is Gaussian with precision
/// `beta Sigma1^-1 + (1-beta) Sigma0^-1` and mean solving that precision
/// against `beta Sigma1^-1 mu1 + (1-beta) Sigma0^-1 mu0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair<T> {
    name: String,
    pre: Side<T>,
    post: Side<T>,
}

impl<T: Real> GaussianPair<T> {
    /// Validates dimensions, symmetry and positive definiteness of both
    /// covariances. Nothing is projected or repaired.
    pub fn new(
        mu_pre: Vec<T>,
        sigma_pre: Matrix<T>,
        mu_post: Vec<T>,
        sigma_post: Matrix<T>,
    ) -> Result<Self> {
        let d = mu_pre.len();
        if d == 0 {
            return Err(Error::invalid("Gaussian pair needs dimension >= 1"));
        }
        if mu_post.len() != d || sigma_pre.dim() != d || sigma_post.dim() != d {
            return Err(Error::invalid(format!(
                "dimension mismatch: mu_pre {d}, mu_post {}, sigma_pre {}, sigma_post {}",
                mu_post.len(),
                sigma_pre.dim(),
                sigma_post.dim()
            )));
        }
        if mu_pre.iter().chain(&mu_post).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite mean entry"));
        }
        Ok(Self {
            name: "gaussian".to_owned(),
            pre: Side::new(mu_pre, sigma_pre, "pre-change")?,
            post: Side::new(mu_post, sigma_post, "post-change")?,
        })
    }

    /// The 10-dimensional experiment: `mu0 = 0`, `mu1 = 1`, bundled covariances.
    pub fn mvn10() -> Self {
        let to_matrix = |m: &[[f64; 10]; 10]| {
            Matrix::from_rows(
                &m.iter()
                    .map(|r| r.iter().map(|&v| T::lit(v)).collect())
                    .collect::<Vec<_>>(),
            )
            .expect("square")
        };
        let mut pair = Self::new(
            vec![T::zero(); 10],
            to_matrix(&MVN10_SIGMA_PRE),
            vec![T::one(); 10],
            to_matrix(&MVN10_SIGMA_POST),
        )
        .expect("bundled covariances are positive definite");
        pair.name = "mvn10".to_owned();
        pair
    }

    fn side(&self, regime: Regime) -> &Side<T> {
        match regime {
            Regime::Pre => &self.pre,
            Regime::Post => &self.post,
        }
    }

    pub fn mean(&self, regime: Regime) -> &[T] {
        &self.side(regime).mean
    }

    pub fn covariance(&self, regime: Regime) -> &Matrix<T> {
        &self.side(regime).cov
    }

    /// Mean and covariance of `P_beta`.
    pub fn path_moments(&self, beta: T) -> Option<(Vec<T>, Matrix<T>)> {
        let (prec, h) = self.path_natural(beta);
        let chol = prec.cholesky()?;
        Some((chol.solve(&h), chol.inverse()))
    }

    fn path_natural(&self, beta: T) -> (Matrix<T>, Vec<T>) {
        let alpha = T::one() - beta;
        let prec = self
            .post
            .precision
            .lin_comb(beta, &self.pre.precision, alpha);
        let h = self
            .post
            .precision_mean
            .iter()
            .zip(&self.pre.precision_mean)
            .map(|(&a, &b)| beta * a + alpha * b)
            .collect();
        (prec, h)
    }

    fn kl_between(a: &Side<T>, b: &Side<T>) -> T {
        // D(N_a || N_b) = 1/2 [tr(Sb^-1 Sa) + dmu^T Sb^-1 dmu - d + ln det Sb - ln det Sa]
        let d = a.mean.len();
        let tr = b.precision.mul(&a.cov).trace();
        let dm: Vec<T> = b.mean.iter().zip(&a.mean).map(|(&x, &y)| x - y).collect();
        let quad: T = b
            .precision
            .mul_vec(&dm)
            .iter()
            .zip(&dm)
            .map(|(&u, &v)| u * v)
            .sum();
        T::lit(0.5) * (tr + quad - T::from_count(d) + b.log_det - a.log_det)
    }
}

impl<T: Real> UnnormalizedPair<T> for GaussianPair<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.pre.mean.len()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    #[inline]
    fn log_density(&self, regime: Regime, x: &[T]) -> T {
        self.side(regime).log_density(x)
    }

    fn draw_into<R: Rng>(&self, regime: Regime, rng: &mut R, out: &mut [T]) -> Result<()> {
        let side = self.side(regime);
        let z: Vec<T> = (0..out.len()).map(|_| T::std_normal(rng)).collect();
        let lz = side.chol.lower_mul(&z);
        for ((o, &m), &v) in out.iter_mut().zip(&side.mean).zip(&lz) {
            *o = m + v;
        }
        Ok(())
    }

    fn draw_path_into<R: Rng>(&self, beta: T, rng: &mut R, out: &mut [T]) -> Result<()> {
        let z: Vec<T> = (0..out.len()).map(|_| T::std_normal(rng)).collect();
        let (prec, h) = self.path_natural(beta);
        let chol = prec.cholesky().ok_or_else(|| {
            Error::Domain(format!(
                "path precision not positive definite at beta={beta}"
            ))
        })?;
        let mean = chol.solve(&h);
        // Cov = (L L^T)^-1, so L^-T z has that covariance.
        let noise = chol.solve_upper(&z);
        for ((o, &m), &v) in out.iter_mut().zip(&mean).zip(&noise) {
            *o = m + v;
        }
        Ok(())
    }

    fn log_z_ratio(&self) -> Option<T> {
        Some(T::lit(0.5) * (self.pre.log_det - self.post.log_det))
    }

    fn kl(&self, direction: KlDirection) -> Option<T> {
        Some(match direction {
            KlDirection::PostVsPre => Self::kl_between(&self.post, &self.pre),
            KlDirection::PreVsPost => Self::kl_between(&self.pre, &self.post),
        })
    }

    fn score(&self, regime: Regime, x: &[T]) -> Result<T> {
        // grad log p~ = -Sigma^-1 (x - mu), laplacian = -tr(Sigma^-1)
        let side = self.side(regime);
        let centered: Vec<T> = x.iter().zip(&side.mean).map(|(&a, &m)| a - m).collect();
        let g = side.precision.mul_vec(&centered);
        Ok(T::lit(0.5) * g.iter().map(|&v| v * v).sum::<T>() - side.precision.trace())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::model::{analytic_kl, analytic_log_z_ratio, hyvarinen_score, log_weight};

    fn standard(d: usize) -> GaussianPair<f64> {
        GaussianPair::new(
            vec![0.0; d],
            Matrix::identity(d),
            vec![0.0; d],
            Matrix::identity(d),
        )
        .unwrap()
    }

    #[test]
    fn mvn10_reference_values() {
        // Frozen from an independent LU/eigen evaluation of the bundled matrices.
        let p = GaussianPair::<f64>::mvn10();
        assert!((analytic_log_z_ratio(&p).unwrap() + 0.945_777_626_153_908_6).abs() < 1e-10);
        assert!(
            (analytic_kl(&p, KlDirection::PostVsPre).unwrap() - 1.893_690_482_797_661).abs()
                < 1e-10
        );
        assert!(
            (analytic_kl(&p, KlDirection::PreVsPost).unwrap() - 1.475_895_816_635_486_5).abs()
                < 1e-10
        );
    }

    #[test]
    fn rejects_non_pd_post_covariance() {
        let post = GaussianPair::<f64>::mvn10()
            .covariance(Regime::Post)
            .clone();
        let lambda_min = min_eigenvalue(&post);
        assert!((lambda_min - 0.426_040_47).abs() < 1e-6);
        let broken = post.add_diagonal(-2.0 * lambda_min);
        let err = GaussianPair::new(
            vec![0.0; 10],
            GaussianPair::<f64>::mvn10().covariance(Regime::Pre).clone(),
            vec![1.0; 10],
            broken,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NotPositiveDefinite {
                which: "post-change"
            }
        ));
    }

    #[test]
    fn rejects_asymmetric_and_mismatched() {
        let mut m = Matrix::<f64>::identity(2);
        m[(0, 1)] = 0.3;
        assert!(GaussianPair::new(vec![0.0; 2], m, vec![0.0; 2], Matrix::identity(2)).is_err());
        assert!(GaussianPair::new(
            vec![0.0; 2],
            Matrix::identity(3),
            vec![0.0; 2],
            Matrix::identity(2)
        )
        .is_err());
    }

    #[test]
    fn identical_covariances_give_zero_log_z_ratio() {
        let p = GaussianPair::new(
            vec![0.0; 3],
            Matrix::identity(3),
            vec![1.0; 3],
            Matrix::identity(3),
        )
        .unwrap();
        assert_eq!(analytic_log_z_ratio(&p).unwrap(), 0.0);
        assert_eq!(log_weight(&standard(3), &[0.4, -1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn standard_normal_score_at_origin() {
        let p = standard(10);
        assert!((hyvarinen_score(&p, Regime::Pre, &[0.0; 10]).unwrap() + 10.0).abs() < 1e-12);
    }

    #[test]
    fn path_moments_interpolate_precisions() {
        let p = GaussianPair::<f64>::mvn10();
        let (m0, c0) = p.path_moments(0.0).unwrap();
        assert!(m0.iter().all(|v| v.abs() < 1e-12));
        let s0 = p.covariance(Regime::Pre);
        for i in 0..10 {
            for j in 0..10 {
                assert!((c0[(i, j)] - s0[(i, j)]).abs() < 1e-10);
            }
        }
        let (m1, _) = p.path_moments(1.0).unwrap();
        assert!(m1.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }
}
