//! Small complex-matrix helpers shared by the channel, precoder and link
//! budget stages.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

/// Squared Frobenius norm, accumulated column-major in index order.
pub fn frobenius_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Squared 2-norm of each row.
pub fn row_power(m: &CMatrix) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().map(|z| z.norm_sqr()).sum())
        .collect()
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

/// Largest absolute entry-wise difference between two equally shaped matrices.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn all_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_of_known_matrix() {
        let m = CMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 1.0),
                Complex64::new(0.0, 2.0),
                Complex64::new(3.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        );
        assert_eq!(frobenius_sq(&m), 15.0);
        assert_eq!(row_power(&m), vec![6.0, 9.0]);
    }
}
