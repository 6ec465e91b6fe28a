//! Small dense helpers shared by calibration, scoring and the synthetic
//! generator.

use nalgebra::DMatrix;

/// Right singular vectors of a matrix, one per column, with their singular
/// values in descending order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub singular_values: Vec<f64>,
    /// `d × min(m, d)`; column `j` pairs with `singular_values[j]`.
    pub right_vectors: DMatrix<f64>,
}

/// Thin SVD of an `m × d` matrix, keeping only the right factor.
///
/// Singular values are sorted descending with ties kept in the solver's
/// original order, and each singular vector is sign-flipped so that its
/// largest-magnitude entry is positive.
pub fn thin_svd_right(m: &DMatrix<f64>) -> ThinSvd {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let d = m.ncols();
    let mut right = DMatrix::zeros(d, order.len());
    let mut values = Vec::with_capacity(order.len());
    for (dst, &src) in order.iter().enumerate() {
        values.push(sv[src]);
        for i in 0..d {
            right[(i, dst)] = v_t[(src, i)];
        }
    }
    canonicalize_signs(&mut right);
    ThinSvd {
        singular_values: values,
        right_vectors: right,
    }
}

/// Flips each column so its largest-magnitude entry (first one on ties) is
/// positive.
pub fn canonicalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// `max |QᵀQ − I|` over all entries. Zero for a matrix with no columns.
pub fn orthonormality_deviation(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let mut worst = 0.0f64;
    for r in 0..gram.nrows() {
        for c in 0..gram.ncols() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((gram[(r, c)] - target).abs());
        }
    }
    worst
}

/// Dot product of two equally sized matrices viewed as flat vectors,
/// accumulated in column-major order.
pub fn flat_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_sign_canonical() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, -3.0, 0.0, 0.0, 0.0, 1.0, -2.0, 0.0, 0.0]);
        let svd = thin_svd_right(&m);
        assert_eq!(svd.singular_values.len(), 3);
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((svd.singular_values[1] - 2.0).abs() < 1e-12);
        assert!((svd.singular_values[2] - 1.0).abs() < 1e-12);
        for col in svd.right_vectors.column_iter() {
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max > 0.99, "column {col:?}");
        }
        assert!(orthonormality_deviation(&svd.right_vectors) < 1e-12);
    }

    #[test]
    fn wide_matrix_gives_thin_factor() {
        let m = DMatrix::from_fn(2, 5, |r, c| (r + 2 * c) as f64);
        let svd = thin_svd_right(&m);
        assert_eq!(svd.right_vectors.shape(), (5, 2));
    }

    #[test]
    fn deviation_of_empty_is_zero() {
        assert_eq!(orthonormality_deviation(&DMatrix::zeros(4, 0)), 0.0);
        let scaled = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        assert_eq!(orthonormality_deviation(&scaled), 3.0);
    }
}
