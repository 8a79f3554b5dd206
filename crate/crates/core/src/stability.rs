//! Strong stability certificates, strong controllability and a Riccati
//! stabilizer.
//!
//! Sign convention throughout the crate: `u = -K x`, closed loop `A - B K`.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_dims, Mat};
use crate::lti::SystemParams;

/// Maximum accepted condition number of the eigenbasis before falling back
/// to the Lyapunov construction.
pub const MAX_EIGENBASIS_COND: f64 = 1e8;
/// Reconstruction tolerance for `A - BK = H L H^{-1}`.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;
/// Singular values of `C_q` below this count as rank loss.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    /// Realified eigendecomposition; `gamma = 1 - spectral radius`.
    Eigen,
    /// `H = P^{-1/2}` from the discrete Lyapunov equation `P = A^T P A + I`.
    Lyapunov,
}

/// Witness that `K` is `(kappa, gamma)`-strongly stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub kappa: f64,
    pub gamma: f64,
    #[serde(with = "linalg::rows")]
    pub h_mat: Mat,
    #[serde(with = "linalg::rows")]
    pub l_mat: Mat,
    pub spectral_radius: f64,
    pub method: CertificateMethod,
}

impl StabilityCertificate {
    pub fn h_inv(&self) -> Mat {
        self.h_mat.clone().try_inverse().expect("certificate H is invertible")
    }

    /// Re-check every inequality of the certificate for `(K, sys)`.
    pub fn verify(&self, k: &Mat, sys: &SystemParams) -> Result<()> {
        let tol = 1e-9;
        let hinv = self
            .h_mat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NumericalFailure("H is singular".into()))?;
        let checks = [
            ("|K|", linalg::spectral_norm(k), self.kappa),
            ("|H|", linalg::spectral_norm(&self.h_mat), self.kappa),
            ("|H^-1|", linalg::spectral_norm(&hinv), self.kappa),
            ("|L|", linalg::spectral_norm(&self.l_mat), 1.0 - self.gamma),
        ];
        for (name, lhs, rhs) in checks {
            if lhs > rhs + tol {
                return Err(Error::NumericalFailure(format!("certificate violated: {name}={lhs} > {rhs}")));
            }
        }
        let recon = linalg::spectral_norm(&(sys.closed_loop(k) - &self.h_mat * &self.l_mat * &hinv));
        if recon > RECONSTRUCTION_TOL {
            return Err(Error::NumericalFailure(format!("reconstruction error {recon:e}")));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::NumericalFailure(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

fn is_diagonal(m: &Mat) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Right singular vectors of `m` whose singular values fall below `tol`.
fn null_space(m: &Mat, tol: f64) -> Result<Vec<linalg::Vector>> {
    let n = m.ncols();
    // Pad to square so that the SVD reports all n right singular vectors.
    let mut sq = Mat::zeros(n.max(m.nrows()), n);
    sq.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = sq
        .try_svd(false, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("v_t requested");
    Ok(svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= tol)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect())
}

/// Eigenvalues grouped by value: `(eigenvalue, algebraic multiplicity)`, only
/// one representative per conjugate pair (non-negative imaginary part).
fn cluster_eigenvalues(eigs: &[Complex<f64>], scale: f64) -> Vec<(Complex<f64>, usize)> {
    let tol = 1e-7 * scale.max(1.0);
    let mut groups: Vec<(Complex<f64>, usize)> = Vec::new();
    for &e in eigs {
        let e = if e.im.abs() <= tol { Complex::new(e.re, 0.0) } else { e };
        if e.im < 0.0 {
            continue;
        }
        match groups.iter_mut().find(|(g, _)| (*g - e).norm() <= tol) {
            Some((_, count)) => *count += 1,
            None => groups.push((e, 1)),
        }
    }
    groups
}

fn eigen_certificate(a_cl: &Mat) -> Option<(Mat, Mat)> {
    let n = a_cl.nrows();
    let eigs: Vec<Complex<f64>> = a_cl.complex_eigenvalues().iter().copied().collect();
    let scale = linalg::spectral_norm(a_cl);
    let null_tol = 1e-7 * scale.max(1.0);
    let mut cols: Vec<linalg::Vector> = Vec::with_capacity(n);
    let mut l = Mat::zeros(n, n);
    for (lambda, mult) in cluster_eigenvalues(&eigs, scale) {
        if lambda.im == 0.0 {
            let shifted = a_cl - Mat::identity(n, n) * lambda.re;
            let basis = null_space(&shifted, null_tol).ok()?;
            if basis.len() != mult {
                return None;
            }
            for v in basis {
                let idx = cols.len();
                l[(idx, idx)] = lambda.re;
                cols.push(v);
            }
        } else {
            if mult != 1 {
                return None;
            }
            let (a, b) = (lambda.re, lambda.im);
            // A p = a p - b q, A q = b p + a q  <=>  [[A - aI, bI], [-bI, A - aI]] [p; q] = 0
            let mut big = Mat::zeros(2 * n, 2 * n);
            let shifted = a_cl - Mat::identity(n, n) * a;
            big.view_mut((0, 0), (n, n)).copy_from(&shifted);
            big.view_mut((n, n), (n, n)).copy_from(&shifted);
            big.view_mut((0, n), (n, n)).copy_from(&(Mat::identity(n, n) * b));
            big.view_mut((n, 0), (n, n)).copy_from(&(Mat::identity(n, n) * -b));
            let basis = null_space(&big, null_tol).ok()?;
            let z = basis.first()?;
            let p = z.rows(0, n).into_owned();
            let q = z.rows(n, n).into_owned();
            let idx = cols.len();
            l[(idx, idx)] = a;
            l[(idx, idx + 1)] = b;
            l[(idx + 1, idx)] = -b;
            l[(idx + 1, idx + 1)] = a;
            cols.push(p);
            cols.push(q);
        }
    }
    if cols.len() != n {
        return None;
    }
    let mut h = Mat::from_columns(&cols);
    for mut c in h.column_iter_mut() {
        let norm = c.norm();
        if norm == 0.0 {
            return None;
        }
        c /= norm;
    }
    Some((h, l))
}

/// Solve `P = A^T P A + I` through the Kronecker form.
fn discrete_lyapunov(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = Mat::identity(n * n, n * n) - kron;
    let rhs = linalg::Vector::from_iterator(n * n, Mat::identity(n, n).iter().copied());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("Lyapunov system is singular".into()))?;
    let p = Mat::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

fn lyapunov_certificate(a_cl: &Mat) -> Result<(Mat, Mat)> {
    let p = discrete_lyapunov(a_cl)?;
    let eig = p.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
        return Err(Error::NumericalFailure("Lyapunov solution is not positive definite".into()));
    }
    let sqrt = &eig.eigenvectors
        * Mat::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let inv_sqrt = &eig.eigenvectors
        * Mat::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()))
        * eig.eigenvectors.transpose();
    let l = &sqrt * a_cl * &inv_sqrt;
    Ok((inv_sqrt, l))
}

/// Build a strong-stability certificate for `K` on `sys`.
pub fn certify_strong_stability(k: &Mat, sys: &SystemParams) -> Result<StabilityCertificate> {
    check_dims("K", k.shape(), (sys.d2(), sys.d1()))?;
    let a_cl = sys.closed_loop(k);
    let n = a_cl.nrows();
    let rho = a_cl
        .complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max);
    if !rho.is_finite() || rho >= 1.0 {
        return Err(Error::NotStable { spectral_radius: rho });
    }
    let k_norm = linalg::spectral_norm(k);

    let (h, l, method) = if is_diagonal(&a_cl) {
        (Mat::identity(n, n), a_cl.clone(), CertificateMethod::Eigen)
    } else {
        match eigen_certificate(&a_cl) {
            Some((h, l)) => {
                let cond = linalg::singular_values(&h)
                    .map(|s| s[0] / s[s.len() - 1])
                    .unwrap_or(f64::INFINITY);
                let recon_ok = h.clone().try_inverse().is_some_and(|hinv| {
                    linalg::spectral_norm(&(&a_cl - &h * &l * hinv)) <= RECONSTRUCTION_TOL
                });
                if cond.is_finite() && cond <= MAX_EIGENBASIS_COND && recon_ok {
                    (h, l, CertificateMethod::Eigen)
                } else {
                    let (h, l) = lyapunov_certificate(&a_cl)?;
                    (h, l, CertificateMethod::Lyapunov)
                }
            }
            None => {
                let (h, l) = lyapunov_certificate(&a_cl)?;
                (h, l, CertificateMethod::Lyapunov)
            }
        }
    };

    // Balance |H| and |H^{-1}|: scaling H by c leaves L unchanged.
    let hinv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned(f64::INFINITY))?;
    let (nh, nhi) = (linalg::spectral_norm(&h), linalg::spectral_norm(&hinv));
    let c = (nhi / nh).sqrt();
    let h = h * c;
    let cond = nh * nhi;
    if cond > MAX_EIGENBASIS_COND {
        return Err(Error::IllConditioned(cond));
    }
    let l_norm = linalg::spectral_norm(&l);
    if l_norm >= 1.0 {
        return Err(Error::IllConditioned(cond));
    }
    let kappa = k_norm.max(nh * c).max(nhi / c).max(1.0);
    let cert = StabilityCertificate {
        kappa,
        gamma: 1.0 - l_norm,
        h_mat: h,
        l_mat: l,
        spectral_radius: rho,
        method,
    };
    cert.verify(k, sys)?;
    Ok(cert)
}

/// `C_q = [B, A B, ..., A^{q-1} B]` with its conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub q: usize,
    #[serde(with = "linalg::rows")]
    pub c_q: Mat,
    /// `|(C_q C_q^T)^{-1}|`, infinite when rank deficient.
    pub kappa_ctrl: f64,
    pub sigma_min: f64,
}

impl ControllabilityReport {
    pub fn full_row_rank(&self) -> bool {
        self.sigma_min >= RANK_TOL
    }
}

/// Build `C_q` and report its smallest singular value without failing on
/// rank loss.
pub fn controllability_report(a: &Mat, b: &Mat, q: usize) -> Result<ControllabilityReport> {
    if q == 0 {
        return Err(Error::InvalidSize("controllability index q must be >= 1".into()));
    }
    check_dims("B", (b.nrows(), 0), (a.nrows(), 0))?;
    let (d1, d2) = (b.nrows(), b.ncols());
    let mut c_q = Mat::zeros(d1, q * d2);
    let mut block = b.clone();
    for j in 0..q {
        c_q.view_mut((0, j * d2), (d1, d2)).copy_from(&block);
        block = a * block;
    }
    let s = linalg::singular_values(&c_q)?;
    let sigma_min = if s.len() < d1 { 0.0 } else { s[d1 - 1] };
    let kappa_ctrl = if sigma_min >= RANK_TOL { 1.0 / (sigma_min * sigma_min) } else { f64::INFINITY };
    Ok(ControllabilityReport { q, c_q, kappa_ctrl, sigma_min })
}

/// As [`controllability_report`], failing with `RankDeficient` when `C_q`
/// loses row rank.
pub fn strong_controllability(a: &Mat, b: &Mat, q: usize) -> Result<ControllabilityReport> {
    let rep = controllability_report(a, b, q)?;
    if !rep.full_row_rank() {
        return Err(Error::RankDeficient { sigma_min: rep.sigma_min });
    }
    Ok(rep)
}

/// Smallest `q <= d1` for which `C_q` has full row rank.
pub fn controllability_index(a: &Mat, b: &Mat) -> Option<usize> {
    (1..=a.nrows()).find(|&q| controllability_report(a, b, q).is_ok_and(|r| r.full_row_rank()))
}

const RICCATI_MAX_ITER: usize = 10_000;
const RICCATI_TOL: f64 = 1e-10;
const RICCATI_BLOWUP: f64 = 1e12;

/// Infinite-horizon discrete LQR gain for `Q = I`, `R = I` by Riccati
/// iteration, certified before return.
pub fn synthesize_stabilizer(sys: &SystemParams) -> Result<Mat> {
    let (a, b) = (&sys.a, &sys.b);
    let (d1, d2) = (sys.d1(), sys.d2());
    let q = Mat::identity(d1, d1);
    let r = Mat::identity(d2, d2);
    let mut p = q.clone();
    let gain = |p: &Mat| -> Result<Mat> {
        let s = &r + b.transpose() * p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::NotStabilizable("singular R + B^T P B".into()))?;
        Ok(s_inv * b.transpose() * p * a)
    };
    let mut converged = false;
    for _ in 0..RICCATI_MAX_ITER {
        let k = gain(&p)?;
        let next = &q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let tr = next.trace();
        if !tr.is_finite() || tr > RICCATI_BLOWUP {
            return Err(Error::NotStabilizable(format!("Riccati iterate trace {tr:e}")));
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta < RICCATI_TOL * (1.0 + p.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotStabilizable("Riccati iteration did not converge".into()));
    }
    let k = gain(&p)?;
    match certify_strong_stability(&k, sys) {
        Ok(_) => Ok(k),
        Err(Error::NotStable { spectral_radius }) => Err(Error::NotStabilizable(format!(
            "Riccati gain leaves spectral radius {spectral_radius}"
        ))),
        Err(e) => Err(e),
    }
}

/// `(kappa, gamma - 2 kappa^3 eps)`: the certificate degraded by a
/// perturbation of size `eps` in `A` and `B`.
pub fn perturbation_margin(cert: &StabilityCertificate, eps: f64) -> Result<(f64, f64)> {
    let limit = cert.gamma / (2.0 * cert.kappa.powi(3));
    if !(eps >= 0.0 && eps < limit) {
        return Err(Error::MarginExhausted { eps, limit });
    }
    Ok((cert.kappa, cert.gamma - 2.0 * cert.kappa.powi(3) * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn already_diagonal_closed_loop() {
        let sys = SystemParams::new(Mat::identity(3, 3) * 0.5, Mat::identity(3, 3)).unwrap();
        let cert = certify_strong_stability(&Mat::zeros(3, 3), &sys).unwrap();
        assert!((cert.gamma - 0.5).abs() < 1e-15);
        assert_eq!(cert.l_mat, Mat::identity(3, 3) * 0.5);
        assert_eq!(cert.h_mat, Mat::identity(3, 3));
        assert_eq!(cert.kappa, 1.0);
    }

    #[test]
    fn scalar_closed_loop() {
        let sys = SystemParams::new(scalar(1.2), scalar(1.0)).unwrap();
        let cert = certify_strong_stability(&scalar(0.5), &sys).unwrap();
        assert!((cert.gamma - 0.3).abs() < 1e-12);
    }

    #[test]
    fn unstable_closed_loop_rejected() {
        let sys = SystemParams::new(scalar(1.2), scalar(1.0)).unwrap();
        assert!(matches!(certify_strong_stability(&scalar(0.1), &sys), Err(Error::NotStable { .. })));
    }

    #[test]
    fn random_stable_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let b = Mat::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
            let sys = SystemParams::new(a, b).unwrap();
            let k = synthesize_stabilizer(&sys).unwrap();
            let cert = certify_strong_stability(&k, &sys).unwrap();
            let recon = &cert.h_mat * &cert.l_mat * cert.h_inv();
            assert!(linalg::spectral_norm(&(sys.closed_loop(&k) - recon)) <= 1e-8);
        }
    }

    #[test]
    fn defective_closed_loop_uses_lyapunov() {
        // Jordan block: eigenvalue 0.5 with geometric multiplicity 1.
        let a = Mat::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        let sys = SystemParams::new(a, Mat::zeros(2, 1)).unwrap();
        let cert = certify_strong_stability(&Mat::zeros(1, 2), &sys).unwrap();
        assert_eq!(cert.method, CertificateMethod::Lyapunov);
        assert!(cert.gamma > 0.0 && cert.gamma < 0.5);
    }

    #[test]
    fn complex_pair_certificate() {
        let a = Mat::from_row_slice(2, 2, &[0.6, -0.5, 0.5, 0.6]);
        let sys = SystemParams::new(a, Mat::zeros(2, 1)).unwrap();
        let cert = certify_strong_stability(&Mat::zeros(1, 2), &sys).unwrap();
        assert_eq!(cert.method, CertificateMethod::Eigen);
        assert!((cert.gamma - (1.0 - 0.61f64.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn controllability_cases() {
        let rep = strong_controllability(&Mat::zeros(2, 2), &Mat::identity(2, 2), 1).unwrap();
        assert_eq!(rep.c_q, Mat::identity(2, 2));
        assert!((rep.sigma_min - 1.0).abs() < 1e-14 && (rep.kappa_ctrl - 1.0).abs() < 1e-14);

        let err = strong_controllability(&Mat::identity(2, 2), &Mat::zeros(2, 1), 3).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));

        let rep = strong_controllability(&scalar(0.5), &scalar(2.0), 2).unwrap();
        assert_eq!(rep.c_q, Mat::from_row_slice(1, 2, &[2.0, 1.0]));
        assert!((rep.kappa_ctrl - 0.2).abs() < 1e-14);
    }

    #[test]
    fn stabilizer_cases() {
        let dead = SystemParams::new(Mat::zeros(2, 2), Mat::identity(2, 2)).unwrap();
        let k = synthesize_stabilizer(&dead).unwrap();
        assert_eq!(k, Mat::zeros(2, 2));
        assert_eq!(certify_strong_stability(&k, &dead).unwrap().gamma, 1.0);

        let sys = SystemParams::new(scalar(2.0), scalar(1.0)).unwrap();
        let k = synthesize_stabilizer(&sys).unwrap();
        // Scalar DARE: p = 1 + a^2 p / (1 + p)  =>  p^2 - a^2 p - 1 = 0 (with q = r = b = 1).
        let p = (4.0 + (16.0f64 + 4.0).sqrt()) / 2.0;
        assert!((k[(0, 0)] - 2.0 * p / (1.0 + p)).abs() < 1e-8);
        assert!((2.0 - k[(0, 0)]).abs() < 1.0);

        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let bad = SystemParams::new(a, b).unwrap();
        assert!(matches!(synthesize_stabilizer(&bad), Err(Error::NotStabilizable(_))));
    }

    #[test]
    fn margin_cases() {
        let cert = StabilityCertificate {
            kappa: 1.0,
            gamma: 0.5,
            h_mat: Mat::identity(1, 1),
            l_mat: scalar(0.5),
            spectral_radius: 0.5,
            method: CertificateMethod::Eigen,
        };
        assert_eq!(perturbation_margin(&cert, 0.0).unwrap(), (1.0, 0.5));
        let (_, g) = perturbation_margin(&cert, 0.1).unwrap();
        assert!((g - 0.3).abs() < 1e-15);
        assert!(matches!(perturbation_margin(&cert, 0.25), Err(Error::MarginExhausted { .. })));
    }
}
