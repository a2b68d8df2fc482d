//! Dense row-major `f64` matrices and a deterministic symmetric eigensolver.
//!
//! Everything the weight transforms need: products, transposes, the cyclic
//! Jacobi eigendecomposition, orthogonality checks and permutation matrices.
//! All routines are sequential with a fixed summation order, so identical
//! inputs always produce identical output bits.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to `‖A‖_F`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;

/// Dense real matrix stored row-major: `data[i * cols + j] = A[i, j]`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    ///
    /// # Panics
    /// Panics if the rows have different lengths.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Top `k` rows as a new `k x cols` matrix.
    pub fn top_rows(&self, k: usize) -> Matrix {
        let k = k.min(self.rows);
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "sub",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// `(A + Aᵀ) / 2` for a square matrix.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }

    /// Matrix-vector product `A·x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times vector of {}", self.rows, self.cols, x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Standard product `a·b`, accumulated left to right over the inner index.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            for (o, &bpj) in out.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    Ok(c)
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
///
/// Row `i` of `eigenvectors` is the unit eigenvector belonging to
/// `eigenvalues[i]`, so `A = Vᵀ·diag(λ)·V`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    /// Jacobi sweeps used.
    pub sweeps: usize,
}

impl EigenDecomposition {
    /// `Vᵀ·diag(λ)·V`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut a = Matrix::zeros(n, n);
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let row = v.row(k);
            for i in 0..n {
                let s = lambda * row[i];
                for j in 0..n {
                    a[(i, j)] += s * row[j];
                }
            }
        }
        a
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first. Sign convention: the
/// largest-magnitude entry of each eigenvector is positive (the lowest index
/// wins a magnitude tie). Exactly equal eigenvalues are ordered by the
/// lexicographically larger eigenvector first.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    let mut w = a.symmetrized()?;
    let n = w.rows;
    let mut v = Matrix::identity(n);
    let scale = w.frobenius();
    let threshold = JACOBI_TOLERANCE * scale;

    let mut sweeps = 0;
    let mut off = off_diagonal_norm(&w);
    while off > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = w[(k, p)];
                    let akq = w[(k, q)];
                    let nkp = c * akp - s * akq;
                    let nkq = s * akp + c * akq;
                    w[(k, p)] = nkp;
                    w[(p, k)] = nkp;
                    w[(k, q)] = nkq;
                    w[(q, k)] = nkq;
                }
                w[(p, p)] = app - t * apq;
                w[(q, q)] = aqq + t * apq;
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        off = off_diagonal_norm(&w);
    }

    // Columns of `v` are the eigenvectors; gather them as rows.
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut vec: Vec<f64> = (0..n).map(|i| v[(i, j)]).collect();
            canonical_sign(&mut vec);
            (w[(j, j)], vec)
        })
        .collect();
    pairs.sort_by(|(la, va), (lb, vb)| {
        lb.total_cmp(la).then_with(|| {
            for (x, y) in va.iter().zip(vb) {
                match y.total_cmp(x) {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        })
    });

    let eigenvalues = pairs.iter().map(|(l, _)| *l).collect();
    let rows: Vec<Vec<f64>> = pairs.into_iter().map(|(_, v)| v).collect();
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: Matrix::from_rows(&rows),
        sweeps,
    })
}

fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// `‖W·Wᵀ − I‖_max` for a square matrix.
pub fn orthogonality_error(w: &Matrix) -> Result<f64> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.rows,
            cols: w.cols,
        });
    }
    let n = w.rows;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    Ok(worst)
}

/// Sorting matrix with `W[i, ranking[i]] = 1`: output position `i` takes the
/// dimension `ranking[i]`.
pub fn permutation_from_ranking(ranking: &[usize]) -> Result<Matrix> {
    validate_ranking(ranking)?;
    let n = ranking.len();
    let mut m = Matrix::zeros(n, n);
    for (i, &src) in ranking.iter().enumerate() {
        m[(i, src)] = 1.0;
    }
    Ok(m)
}

pub(crate) fn validate_ranking(ranking: &[usize]) -> Result<()> {
    let n = ranking.len();
    let mut seen = vec![false; n];
    for &r in ranking {
        if r >= n {
            return Err(Error::InvalidRanking(format!(
                "index {r} out of range for {n} dimensions"
            )));
        }
        if std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidRanking(format!("duplicate index {r}")));
        }
    }
    Ok(())
}

/// Ranking that orders `scores` descending; ties keep the lower index first.
pub fn descending_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Rotation by `theta` radians in the plane.
pub fn rotation2(theta: f64) -> Matrix {
    let (s, c) = theta.sin_cos();
    Matrix::from_rows(&[[c, -s], [s, c]])
}

/// Random orthogonal matrix: Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(r) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        if ok {
            return Matrix::from_rows(&rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul(&swap, &a).unwrap(), m(&[&[3.0, 4.0], &[1.0, 2.0]]));
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        // 1·5+2·7, 1·6+2·8, 3·5+4·7, 3·6+4·8
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));

        let e = sym_eig(&Matrix::diag(&[2.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));

        // Ascending diagonal gets reordered.
        let e = sym_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, m(&[&[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn eig_closed_form_2x2() {
        // λ² − 4λ + 3 = 0 → λ ∈ {3, 1}; vectors (1,1)/√2 and (1,−1)/√2.
        let e = sym_eig(&m(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.eigenvalues[0] - 3.0).abs() <= 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() <= 1e-12);
        let v = &e.eigenvectors;
        assert!((v[(0, 0)] - h).abs() <= 1e-12 && (v[(0, 1)] - h).abs() <= 1e-12);
        // Largest-magnitude entries tie; the first one is made positive.
        assert!((v[(1, 0)] - h).abs() <= 1e-12 && (v[(1, 1)] + h).abs() <= 1e-12);
    }

    #[test]
    fn eig_rejects_rectangular() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn eig_zero_matrix() {
        let e = sym_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
        assert_eq!(e.eigenvectors, Matrix::identity(3));
    }

    #[test]
    fn eig_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_orthogonal(7, &mut rng);
        let a = matmul(&matmul(&q.transpose(), &Matrix::diag(&[5., 4., 3., 3., 2., 1., 0.5])).unwrap(), &q)
            .unwrap();
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn orthogonality_examples() {
        assert_eq!(orthogonality_error(&Matrix::identity(3)).unwrap(), 0.0);
        // (2I)(2I)ᵀ − I = 3I
        assert_eq!(orthogonality_error(&Matrix::diag(&[2.0, 2.0])).unwrap(), 3.0);
        let r = rotation2(std::f64::consts::PI / 6.0);
        assert!(orthogonality_error(&r).unwrap() <= 1e-12);
        assert!(orthogonality_error(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn permutation_examples() {
        assert_eq!(permutation_from_ranking(&[0, 1, 2]).unwrap(), Matrix::identity(3));
        assert_eq!(
            permutation_from_ranking(&[1, 0]).unwrap(),
            m(&[&[0.0, 1.0], &[1.0, 0.0]])
        );
        let p = permutation_from_ranking(&[2, 0, 1]).unwrap();
        assert_eq!(p.matvec(&[10.0, 20.0, 30.0]).unwrap(), vec![30.0, 10.0, 20.0]);
        assert!(permutation_from_ranking(&[0, 0]).is_err());
        assert!(permutation_from_ranking(&[0, 2]).is_err());
    }

    #[test]
    fn descending_ranking_breaks_ties_by_index() {
        assert_eq!(descending_ranking(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);
    }
}
