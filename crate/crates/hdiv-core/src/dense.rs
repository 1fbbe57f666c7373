//! Small dense matrices: factorizations and a self-contained symmetric
//! eigensolver (Householder tridiagonalization + QL with implicit shifts).
//!
//! Everything here is desk-scale plumbing for oracles, per-element blocks,
//! and the spectral analysis tools; sizes stay in the low thousands.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::fmath;
use crate::Result;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c);
            m.row_mut(i).copy_from_slice(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for j in 0..other.cols {
                    dst[j] += a * orow[j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut s = 0.0;
            for j in 0..self.cols {
                s += row[j] * x[j];
            }
            y[i] = s;
        }
    }

    /// y = Aᵀ x.
    pub fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for i in 0..self.rows {
            let row = self.row(i);
            let xi = x[i];
            for j in 0..self.cols {
                y[j] += row[j] * xi;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// max |A - Aᵀ| over all entries.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }
}

impl core::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Cholesky> {
        assert_eq!(a.rows(), a.cols());
        let n = a.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Definiteness(format!(
                            "cholesky pivot {s:.3e} at row {i}"
                        )));
                    }
                    l[(i, i)] = fmath::sqrt(s);
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    pub fn size(&self) -> usize {
        self.l.rows()
    }

    /// Lower factor L with A = L Lᵀ.
    pub fn factor_matrix(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.l.rows();
        assert_eq!(b.len(), n);
        // forward: L y = b
        for i in 0..n {
            let mut s = b[i];
            let row = self.l.row(i);
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.l.rows();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &DenseMatrix) -> Result<Lu> {
        assert_eq!(a.rows(), a.cols());
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut piv = k;
            let mut pmax = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > pmax {
                    pmax = v;
                    piv = i;
                }
            }
            if pmax == 0.0 {
                return Err(Error::Definiteness(format!("singular matrix at pivot {k}")));
            }
            if piv != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = tmp;
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let m = lu[(i, k)] / pivot;
                lu[(i, k)] = m;
                for j in k + 1..n {
                    let v = lu[(k, j)];
                    lu[(i, j)] -= m * v;
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.lu.rows();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    pub fn det(&self) -> f64 {
        let mut d = self.sign;
        for i in 0..self.lu.rows() {
            d *= self.lu[(i, i)];
        }
        d
    }
}

/// 1-norm condition estimate via the explicit inverse (small matrices only).
pub fn condition_1norm(a: &DenseMatrix) -> Result<f64> {
    let inv = Lu::factor(a)?.inverse();
    Ok(norm_1(a) * norm_1(&inv))
}

fn norm_1(a: &DenseMatrix) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.cols() {
        let mut s = 0.0;
        for i in 0..a.rows() {
            s += a[(i, j)].abs();
        }
        best = best.max(s);
    }
    best
}

/// Eigendecomposition of a real symmetric matrix: `a == v diag(values) vᵀ`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub vectors: DenseMatrix,
}

/// Symmetric eigensolver: Householder reduction to tridiagonal form followed
/// by QL iteration with implicit shifts.
pub fn sym_eigen(a: &DenseMatrix) -> Result<SymEigen> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    if n == 0 {
        return Ok(SymEigen { values: Vec::new(), vectors: DenseMatrix::zeros(0, 0) });
    }
    let mut z = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, &mut d, &mut e);
    tqli(&mut d, &mut e, &mut z)?;
    // sort ascending, carrying the vectors along
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| z[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `d` and
/// sub-diagonal `e` (`e.len() == d.len() - 1`).
pub fn tridiag_eigenvalues(diag: &[f64], sub: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    assert_eq!(sub.len(), n.saturating_sub(1));
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[1..].copy_from_slice(sub);
    let mut z = DenseMatrix::zeros(0, 0); // no vector accumulation
    tqli(&mut d, &mut e, &mut z)?;
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(d)
}

/// Householder reduction of the symmetric matrix stored in `z` to
/// tridiagonal form; on exit `z` holds the accumulated orthogonal transform,
/// `d` the diagonal and `e[1..]` the sub-diagonal.
fn tred2(z: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += z[(i, k)].abs();
            }
            if scale == 0.0 {
                e[i] = z[(i, l)];
            } else {
                for k in 0..=l {
                    z[(i, k)] /= scale;
                    h += z[(i, k)] * z[(i, k)];
                }
                let f = z[(i, l)];
                let g = if f >= 0.0 { -fmath::sqrt(h) } else { fmath::sqrt(h) };
                e[i] = scale * g;
                h -= f * g;
                z[(i, l)] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    z[(j, i)] = z[(i, j)] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[(j, k)] * z[(i, k)];
                    }
                    for k in j + 1..=l {
                        g += z[(k, j)] * z[(i, k)];
                    }
                    e[j] = g / h;
                    f_acc += e[j] * z[(i, j)];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = z[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let v = f * e[k] + g * z[(i, k)];
                        z[(j, k)] -= v;
                    }
                }
            }
        } else {
            e[i] = z[(i, l)];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += z[(i, k)] * z[(k, j)];
                }
                for k in 0..i {
                    let v = g * z[(k, i)];
                    z[(k, j)] -= v;
                }
            }
        }
        d[i] = z[(i, i)];
        z[(i, i)] = 1.0;
        for j in 0..i {
            z[(j, i)] = 0.0;
            z[(i, j)] = 0.0;
        }
    }
}

/// QL iteration with implicit shifts on a tridiagonal matrix. `z` accumulates
/// eigenvectors when non-empty, otherwise only eigenvalues are computed.
fn tqli(d: &mut [f64], e: &mut [f64], z: &mut DenseMatrix) -> Result<()> {
    let n = d.len();
    let with_vectors = z.rows() == n;
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::Eigensolver(format!(
                    "QL iteration failed to converge at index {l}"
                )));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = fmath::hypot(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            let mut i = m;
            while i > l {
                let i1 = i - 1;
                let mut f = s * e[i1];
                let b = c * e[i1];
                r = fmath::hypot(f, g);
                e[i] = r;
                if r == 0.0 {
                    d[i] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i] - p;
                r = (d[i1] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i] = g + p;
                g = c * r - b;
                if with_vectors {
                    for k in 0..n {
                        f = z[(k, i)];
                        z[(k, i)] = s * z[(k, i1)] + c * f;
                        z[(k, i1)] = c * z[(k, i1)] - s * f;
                    }
                }
                i -= 1;
            }
            if r == 0.0 && i > l {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Eigenvalues of the symmetric-definite pencil `a x = λ b x` with `b` SPD,
/// via the Cholesky reduction `L⁻¹ a L⁻ᵀ`.
pub fn generalized_sym_eigenvalues(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), a.cols());
    assert_eq!(b.rows(), b.cols());
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "pencil dimensions {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let chol = Cholesky::factor(b)?;
    let n = a.rows();
    // c = L⁻¹ a L⁻ᵀ, built column by column
    let mut c = DenseMatrix::zeros(n, n);
    let l = chol.factor_matrix();
    // first w = a L⁻ᵀ: solve Lᵀ columns, i.e. for each row of a solve L w = aᵀ col
    // do it as two triangular sweeps on the full matrix
    let mut w = a.clone();
    // solve L W = A (forward substitution applied to each column)
    for j in 0..n {
        for i in 0..n {
            let mut s = w[(i, j)];
            for k in 0..i {
                s -= l[(i, k)] * w[(k, j)];
            }
            w[(i, j)] = s / l[(i, i)];
        }
    }
    // now c = W L⁻ᵀ: solve L cᵀ = wᵀ, equivalently for each row solve
    for i in 0..n {
        for j in 0..n {
            let mut s = w[(i, j)];
            for k in 0..j {
                s -= l[(j, k)] * c[(i, k)];
            }
            c[(i, j)] = s / l[(j, j)];
        }
    }
    // symmetrize roundoff
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = avg;
            c[(j, i)] = avg;
        }
    }
    Ok(sym_eigen(&c)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(n: usize, seed: &mut u64) -> DenseMatrix {
        let mut next = || {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = DenseMatrix::from_rows(&[&[4.0, 2.0, 0.6], &[2.0, 5.0, 1.0], &[0.6, 1.0, 3.0]]);
        let chol = Cholesky::factor(&a).unwrap();
        let x_true = [1.0, -2.0, 0.5];
        let mut b = vec![0.0; 3];
        a.matvec(&x_true, &mut b);
        let x = chol.solve(&b);
        for (xi, ti) in x.iter().zip(x_true.iter()) {
            assert!((xi - ti).abs() < 1e-13);
        }
        let inv = chol.inverse();
        let prod = a.matmul(&inv);
        assert!(prod.max_abs_diff(&DenseMatrix::identity(3)) < 1e-13);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(Cholesky::factor(&a), Err(Error::Definiteness(_))));
    }

    #[test]
    fn lu_solves_and_inverts() {
        let a = DenseMatrix::from_rows(&[&[0.0, 2.0, 1.0], &[3.0, -1.0, 2.0], &[1.0, 1.0, 1.0]]);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&[3.0, 4.0, 3.0]);
        let mut b = vec![0.0; 3];
        a.matvec(&x, &mut b);
        assert!((b[0] - 3.0).abs() < 1e-12 && (b[1] - 4.0).abs() < 1e-12);
        let inv = lu.inverse();
        assert!(a.matmul(&inv).max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn eigen_diag_matrix_is_exact() {
        let a = DenseMatrix::from_rows(&[&[3.0, 0.0], &[0.0, -1.0]]);
        let eig = sym_eigen(&a).unwrap();
        assert!((eig.values[0] + 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_tridiagonal_laplacian_matches_analytic() {
        let n = 24;
        let a = DenseMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        let eig = sym_eigen(&a).unwrap();
        for (k, lam) in eig.values.iter().enumerate() {
            let analytic =
                2.0 - 2.0 * fmath::cos((k + 1) as f64 * core::f64::consts::PI / (n as f64 + 1.0));
            assert!((lam - analytic).abs() < 1e-12, "k={k}: {lam} vs {analytic}");
        }
    }

    #[test]
    fn eigen_residual_and_orthogonality_random() {
        let mut seed = 0x9e3779b97f4a7c15;
        for &n in &[1usize, 2, 3, 7, 20, 45] {
            let a = random_sym(n, &mut seed);
            let eig = sym_eigen(&a).unwrap();
            let v = &eig.vectors;
            // A V = V Λ
            let av = a.matmul(v);
            let vl = DenseMatrix::from_fn(n, n, |i, j| v[(i, j)] * eig.values[j]);
            assert!(av.max_abs_diff(&vl) < 1e-11 * (1.0 + a.max_abs()), "n={n}");
            // VᵀV = I
            let vtv = v.transpose().matmul(v);
            assert!(vtv.max_abs_diff(&DenseMatrix::identity(n)) < 1e-11, "n={n}");
        }
    }

    #[test]
    fn generalized_eigenvalues_diag_pair() {
        let a = DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 12.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 4.0]]);
        let vals = generalized_sym_eigenvalues(&a, &b).unwrap();
        assert!((vals[0] - 2.0).abs() < 1e-13);
        assert!((vals[1] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn tridiag_eigenvalues_match_dense() {
        let d = [2.0, 2.5, 2.1, 1.9, 2.2];
        let e = [-1.0, 0.3, -0.5, 0.8];
        let vals = tridiag_eigenvalues(&d, &e).unwrap();
        let a = DenseMatrix::from_fn(5, 5, |i, j| {
            if i == j {
                d[i]
            } else if i.abs_diff(j) == 1 {
                e[i.min(j)]
            } else {
                0.0
            }
        });
        let dense = sym_eigen(&a).unwrap().values;
        for (x, y) in vals.iter().zip(dense.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
