//! Small dense `f64` linear algebra: row-major matrices, a one-sided Jacobi
//! SVD and an LU solver with partial pivoting.

/// Off-diagonal convergence threshold for the Jacobi sweeps, relative to the
/// column norms being rotated.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer size");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
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

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoConvergence(pub usize);

#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × k`
    pub u: Matrix,
    /// length `k`, non-negative, descending
    pub s: Vec<f64>,
    /// `k × cols`
    pub vt: Matrix,
}

/// Thin SVD with `k = min(rows, cols)`.
pub fn svd(m: &Matrix) -> Result<SvdFactors, NoConvergence> {
    if m.rows >= m.cols {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(SvdFactors {
            u,
            s,
            vt: v.transpose(),
        })
    } else {
        // m = (mᵀ)ᵀ = (U' S V'ᵀ)ᵀ = V' S U'ᵀ
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        Ok(SvdFactors {
            u: v,
            s,
            vt: u.transpose(),
        })
    }
}

/// One-sided (Hestenes) Jacobi on a matrix with `rows >= cols`.
/// Returns `(U rows×n, S, V n×n)`.
fn jacobi_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), NoConvergence> {
    let (rows, n) = (m.rows, m.cols);
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_products(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(NoConvergence(SVD_MAX_SWEEPS));
    }

    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        s.push(norms[j]);
        if norms[j] > 0.0 {
            u_cols.push(Some(a[j].iter().map(|x| x / norms[j]).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(rows, u_cols);

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    for (jj, &j) in order.iter().enumerate() {
        for i in 0..rows {
            u[(i, jj)] = u_cols[jj][i];
        }
        for i in 0..n {
            vm[(i, jj)] = v[j][i];
        }
    }
    Ok((u, s, vm))
}

fn col_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (a, b) in x.iter().zip(y) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` slots (zero singular values) with unit vectors orthogonal to
/// every other column, via Gram-Schmidt over the standard basis.
fn complete_orthonormal(rows: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                assert!(candidate < rows, "ran out of basis candidates");
                let mut e = vec![0.0; rows];
                e[candidate] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let d: f64 = e.iter().zip(b).map(|(x, y)| x * y).sum();
                        for (x, y) in e.iter_mut().zip(b) {
                            *x -= d * y;
                        }
                    }
                }
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Singular;

/// Solves `a · x = b` for square `a` by LU decomposition with partial
/// pivoting. `b` may have several right-hand-side columns.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix, Singular> {
    let n = a.rows;
    assert_eq!(a.cols, n, "solve needs a square system");
    assert_eq!(b.rows, n, "right-hand side row count");
    let mut lu = a.clone();
    let mut x = b.clone();
    let threshold = a.max_abs() * (n.max(1) as f64) * f64::EPSILON;
    for k in 0..n {
        let pivot_row = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .unwrap();
        let pivot = lu[(pivot_row, k)];
        if pivot.abs() <= threshold || pivot == 0.0 {
            return Err(Singular);
        }
        if pivot_row != k {
            swap_rows(&mut lu, k, pivot_row);
            swap_rows(&mut x, k, pivot_row);
        }
        for i in k + 1..n {
            let f = lu[(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            for j in 0..x.cols {
                x[(i, j)] -= f * x[(k, j)];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..x.cols {
            let mut acc = x[(k, j)];
            for i in k + 1..n {
                acc -= lu[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = acc / lu[(k, k)];
        }
    }
    Ok(x)
}

fn swap_rows(m: &mut Matrix, r1: usize, r2: usize) {
    for j in 0..m.cols {
        m.data.swap(r1 * m.cols + j, r2 * m.cols + j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(f: &SvdFactors) -> Matrix {
        let k = f.s.len();
        let mut us = f.u.clone();
        for i in 0..us.rows {
            for j in 0..k {
                us[(i, j)] *= f.s[j];
            }
        }
        us.matmul(&f.vt)
    }

    fn assert_orthonormal_cols(m: &Matrix) {
        let g = m.transpose().matmul(m);
        for i in 0..g.rows {
            for j in 0..g.cols {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-9, "gram[{i},{j}] = {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn svd_of_wide_and_tall_matrices() {
        let tall = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        for m in [tall.clone(), tall.transpose()] {
            let f = svd(&m).unwrap();
            assert_eq!(f.s.len(), 2);
            assert!(f.s[0] >= f.s[1]);
            let r = reconstruct(&f);
            for (a, b) in r.as_slice().iter().zip(m.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_orthonormal_cols(&f.u);
            assert_orthonormal_cols(&f.vt.transpose());
        }
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        let m = Matrix::from_vec(3, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let f = svd(&m).unwrap();
        assert!((f.s[0] - 2.0).abs() < 1e-12);
        assert_eq!(&f.s[1..], &[0.0, 0.0]);
        assert_orthonormal_cols(&f.u);
    }

    #[test]
    fn empty_matrix_has_no_singular_values() {
        let f = svd(&Matrix::zeros(0, 3)).unwrap();
        assert!(f.s.is_empty());
        assert_eq!((f.vt.rows(), f.vt.cols()), (0, 3));
    }

    #[test]
    fn solve_small_system() {
        let a = Matrix::from_vec(2, 2, vec![0.0, 2.0, 1.0, 1.0]);
        let b = Matrix::from_vec(2, 1, vec![4.0, 3.0]);
        let x = solve(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn singular_system_is_rejected() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert_eq!(solve(&a, &Matrix::identity(2)), Err(Singular));
        assert_eq!(solve(&Matrix::zeros(2, 2), &Matrix::identity(2)), Err(Singular));
    }
}
