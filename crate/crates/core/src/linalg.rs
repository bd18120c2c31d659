//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Block-diagonal concatenation. Empty blocks (zero rows or columns) are skipped.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `I_m ⊗ block`.
pub fn kron_identity(m: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::<f64>::identity(m, m).kronecker(block)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Inverse of a symmetric positive-definite matrix, `None` if Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| c.inverse())
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Square root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix. Negative
/// eigenvalues (round-off) are clipped to zero.
pub fn psd_sqrt(sym: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(sym.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(sym.clone());
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Rebuild a symmetric matrix with eigenvalues clipped at zero.
pub fn clip_psd(sym: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym.clone());
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
