//! Small dense linear-algebra helpers shared by the control modules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SVD_MAX_ITER: usize = 10_000;

/// Singular values of `m`, sorted in decreasing order.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let svd = m
        .clone()
        .try_svd(false, false, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Spectral (operator 2-) norm.
pub fn spectral_norm(m: &Mat) -> f64 {
    match singular_values(m) {
        Ok(s) => s.first().copied().unwrap_or(0.0),
        Err(_) => f64::NAN,
    }
}

/// Smallest singular value (over min(rows, cols) values).
pub fn sigma_min(m: &Mat) -> Result<f64> {
    Ok(singular_values(m)?.last().copied().unwrap_or(0.0))
}

/// Nearest point (in Frobenius norm) to `m` inside the spectral-norm ball of
/// the given radius. Matrices already inside are returned unchanged.
pub fn clip_spectral(m: &Mat, radius: f64) -> Result<Mat> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(m.clone());
    }
    if spectral_norm(m) <= radius {
        return Ok(m.clone());
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let clipped = svd.singular_values.map(|s| s.min(radius));
    let mut out = u * Mat::from_diagonal(&clipped) * v_t;
    // Rounding can leave the product a few ulps outside the ball; shrink it
    // so the output passes the same membership test and is a fixed point.
    loop {
        let norm = spectral_norm(&out);
        if norm <= radius {
            return Ok(out);
        }
        if !norm.is_finite() {
            return Err(Error::NumericalFailure("non-finite block in projection".into()));
        }
        out *= radius / norm * (1.0 - f64::EPSILON);
    }
}

/// `m^k` by repeated squaring.
pub fn mat_pow(m: &Mat, mut k: usize) -> Mat {
    let n = m.nrows();
    let mut acc = Mat::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            acc = &acc * &base;
        }
        base = &base * &base;
        k >>= 1;
    }
    acc
}

/// Least-squares solution `X` of `X * lhs = rhs` (minimum-norm via SVD).
pub fn solve_right(lhs: &Mat, rhs: &Mat) -> Result<Mat> {
    // X lhs = rhs  <=>  lhs^T X^T = rhs^T
    let svd = lhs
        .transpose()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let xt = svd
        .solve(&rhs.transpose(), 1e-14)
        .map_err(|e| Error::NumericalFailure(e.to_string()))?;
    Ok(xt.transpose())
}

/// Powers of a square matrix `0..=max`, computed once.
#[derive(Debug, Clone)]
pub struct PowerCache {
    powers: Vec<Mat>,
}

impl PowerCache {
    pub fn new(m: &Mat, max: usize) -> Self {
        let n = m.nrows();
        let mut powers = Vec::with_capacity(max + 1);
        powers.push(Mat::identity(n, n));
        for k in 1..=max {
            let next = m * &powers[k - 1];
            powers.push(next);
        }
        PowerCache { powers }
    }

    pub fn max_exponent(&self) -> usize {
        self.powers.len() - 1
    }

    pub fn get(&self, k: usize) -> &Mat {
        &self.powers[k]
    }
}

/// Serde adapter storing matrices as a list of rows.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for a list of matrices stored as row lists.
pub mod rows_vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
        let all: Vec<Vec<Vec<f64>>> = ms.iter().map(to_rows).collect();
        all.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Mat>, D::Error> {
        let all: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        all.iter()
            .map(|r| from_rows(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<Mat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn check_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        )));
    }
    Ok(())
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected length {want}, got {got}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![3.0, -5.0, 1.0]));
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_inside_is_bitwise_identity() {
        let m = Mat::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.05]);
        let c = clip_spectral(&m, 1.0).unwrap();
        assert_eq!(m, c);
    }

    #[test]
    fn mat_pow_matches_repeated_product() {
        let m = Mat::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let mut naive = Mat::identity(2, 2);
        for _ in 0..7 {
            naive = &naive * &m;
        }
        assert!((mat_pow(&m, 7) - naive).norm() < 1e-15);
    }

    #[test]
    fn solve_right_recovers_exact_solution() {
        let x = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let lhs = Mat::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 2.0]);
        let rhs = &x * &lhs;
        let got = solve_right(&lhs, &rhs).unwrap();
        assert!((got - x).norm() < 1e-12);
    }
}
