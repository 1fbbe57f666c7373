//! Compressed-row sparse matrices: exactly the operations this pipeline
//! needs (apply, transpose, products for Galerkin coarsening, the sparse
//! triple product, and structural checks).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dense::DenseMatrix;
use crate::error::Error;
use crate::Result;

/// CSR matrix with rows kept sorted by column index.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::identity(d.len());
        m.values.copy_from_slice(d);
        m
    }

    /// Build from raw CSR arrays; validates the invariants.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 || *indptr.last().unwrap() != indices.len() {
            return Err(Error::Structure("malformed row offsets".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::Structure("indices/values length mismatch".into()));
        }
        for w in indptr.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Structure("row offsets not nondecreasing".into()));
            }
        }
        if indices.iter().any(|&j| j >= cols) {
            return Err(Error::Structure("column index out of bounds".into()));
        }
        let mut m = Self { rows, cols, indptr, indices, values };
        m.sort_rows();
        Ok(m)
    }

    /// Accumulate duplicate-free sorted rows from (row, col, value) triplets.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for (i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(Error::Structure(format!("triplet ({i}, {j}) out of bounds")));
            }
            per_row[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == j {
                    v += row[k].1;
                    k += 1;
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows, cols, indptr, indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    fn sort_rows(&mut self) {
        for i in 0..self.rows {
            let r = self.indptr[i]..self.indptr[i + 1];
            let mut pairs: Vec<(usize, f64)> = self.indices[r.clone()]
                .iter()
                .copied()
                .zip(self.values[r.clone()].iter().copied())
                .collect();
            pairs.sort_by_key(|&(j, _)| j);
            for (k, (j, v)) in r.clone().zip(pairs) {
                self.indices[k] = j;
                self.values[k] = v;
            }
        }
    }

    /// y = A x.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.values[k] * x[self.indices[k]];
            }
            y[i] = s;
        }
    }

    /// y = Aᵀ x.
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[k]] += self.values[k] * xi;
            }
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols];
        for &j in &self.indices {
            counts[j] += 1;
        }
        let mut indptr = vec![0usize; self.cols + 1];
        for j in 0..self.cols {
            indptr[j + 1] = indptr[j] + counts[j];
        }
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = indptr.clone();
        for i in 0..self.rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let dst = next[j];
                indices[dst] = i;
                values[dst] = self.values[k];
                next[j] += 1;
            }
        }
        // rows come out sorted because we sweep source rows in order
        CsrMatrix { rows: self.cols, cols: self.rows, indptr, indices, values }
    }

    /// Sparse matrix product `self * other` with sorted, merged rows.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut marker = vec![usize::MAX; other.cols];
        let mut acc = vec![0.0f64; other.cols];
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let mut cols_in_row: Vec<usize> = Vec::new();
        for i in 0..self.rows {
            cols_in_row.clear();
            for k in self.indptr[i]..self.indptr[i + 1] {
                let a = self.values[k];
                let kk = self.indices[k];
                for m in other.indptr[kk]..other.indptr[kk + 1] {
                    let j = other.indices[m];
                    if marker[j] != i {
                        marker[j] = i;
                        acc[j] = 0.0;
                        cols_in_row.push(j);
                    }
                    acc[j] += a * other.values[m];
                }
            }
            cols_in_row.sort_unstable();
            for &j in &cols_in_row {
                indices.push(j);
                values.push(acc[j]);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix { rows: self.rows, cols: other.cols, indptr, indices, values })
    }

    /// Scale columns by a diagonal vector: `self * diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Result<CsrMatrix> {
        if d.len() != self.cols {
            return Err(Error::Shape("scale_cols length mismatch".into()));
        }
        let mut out = self.clone();
        for k in 0..out.values.len() {
            out.values[k] *= d[out.indices[k]];
        }
        Ok(out)
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows.min(self.cols)];
        for i in 0..d.len() {
            let (cols, vals) = self.row(i);
            if let Ok(k) = cols.binary_search(&i) {
                d[i] = vals[k];
            }
        }
        d
    }

    /// max |A_ij - A_ji| (0 for structurally and numerically symmetric).
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        self.max_abs_diff(&t)
    }

    /// max entrywise |self - other| over the union sparsity pattern.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut ka, mut kb) = (0, 0);
            while ka < ca.len() || kb < cb.len() {
                if kb >= cb.len() || (ka < ca.len() && ca[ka] < cb[kb]) {
                    worst = worst.max(va[ka].abs());
                    ka += 1;
                } else if ka >= ca.len() || cb[kb] < ca[ka] {
                    worst = worst.max(vb[kb].abs());
                    kb += 1;
                } else {
                    worst = worst.max((va[ka] - vb[kb]).abs());
                    ka += 1;
                    kb += 1;
                }
            }
        }
        worst
    }

    /// Drop explicitly stored zeros (magnitude below `tol`).
    pub fn prune(&self, tol: f64) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            for (j, v) in cols.iter().zip(vals) {
                if v.abs() > tol {
                    indices.push(*j);
                    values.push(*v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { rows: self.rows, cols: self.cols, indptr, indices, values }
    }

    /// Keep only the selected columns, renumbering them consecutively.
    pub fn select_columns(&self, keep: &[usize]) -> CsrMatrix {
        let mut new_col = vec![usize::MAX; self.cols];
        for (new, &old) in keep.iter().enumerate() {
            new_col[old] = new;
        }
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            for (j, v) in cols.iter().zip(vals) {
                if new_col[*j] != usize::MAX {
                    indices.push(new_col[*j]);
                    values.push(*v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { rows: self.rows, cols: keep.len(), indptr, indices, values }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            for (j, v) in cols.iter().zip(vals) {
                m[(i, *j)] = *v;
            }
        }
        m
    }
}

/// Sparse triple product `D diag(m_inv) Dᵀ` with merged, sorted rows.
pub fn triple_product(d: &CsrMatrix, m_inv: &[f64]) -> Result<CsrMatrix> {
    if m_inv.len() != d.cols() {
        return Err(Error::Shape(format!(
            "triple product: diagonal length {} vs {} columns",
            m_inv.len(),
            d.cols()
        )));
    }
    let scaled = d.scale_cols(m_inv)?;
    scaled.matmul(&d.transpose())
}

/// Report from the M-matrix structure check.
#[derive(Debug, Clone, PartialEq)]
pub struct MMatrixReport {
    pub is_m_matrix: bool,
    pub min_diag: f64,
    pub max_offdiag: f64,
    pub min_row_sum: f64,
}

/// Check the M-matrix structure: positive diagonal, nonpositive
/// off-diagonals, nonnegative row sums (within roundoff of the diagonal
/// scale).
pub fn m_matrix_check(a: &CsrMatrix) -> MMatrixReport {
    let mut min_diag = f64::INFINITY;
    let mut max_offdiag = f64::NEG_INFINITY;
    let mut min_row_sum = f64::INFINITY;
    let mut scale = 0.0f64;
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        let mut sum = 0.0;
        let mut diag = 0.0;
        for (j, v) in cols.iter().zip(vals) {
            sum += v;
            if *j == i {
                diag = *v;
            } else {
                max_offdiag = max_offdiag.max(*v);
            }
        }
        scale = scale.max(diag.abs());
        min_diag = min_diag.min(diag);
        min_row_sum = min_row_sum.min(sum);
    }
    if a.rows() == 0 {
        return MMatrixReport { is_m_matrix: true, min_diag: 0.0, max_offdiag: 0.0, min_row_sum: 0.0 };
    }
    let tol = 1e-12 * scale.max(1.0);
    let is_m_matrix = min_diag > 0.0
        && max_offdiag <= tol
        && min_row_sum >= -tol;
    MMatrixReport { is_m_matrix, min_diag, max_offdiag, min_row_sum }
}
