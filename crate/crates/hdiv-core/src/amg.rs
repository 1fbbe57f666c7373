//! Self-contained algebraic multigrid for the M-matrix approximate Schur
//! complement: classical strength-of-connection, greedy maximal-independent-
//! set coarsening with lexicographic tie-breaking, direct interpolation,
//! Galerkin coarse operators, and ℓ1-Jacobi smoothing.
//!
//! One V(1,1)-cycle with symmetric smoothing is a fixed SPD linear operation,
//! suitable as the Schur-block preconditioner inside MINRES.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::csr::CsrMatrix;
use crate::dense::{sym_eigen, DenseMatrix};
use crate::error::Error;
use crate::krylov::LinearOp;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct AmgOptions {
    /// Classical strength threshold θ: `-a_ij ≥ θ max_k(-a_ik)`.
    pub strength_theta: f64,
    /// Switch to the dense coarse solve at or below this size.
    pub coarse_limit: usize,
    pub max_levels: usize,
    pub pre_sweeps: usize,
    pub post_sweeps: usize,
}

impl Default for AmgOptions {
    fn default() -> Self {
        Self {
            strength_theta: 0.25,
            coarse_limit: 64,
            max_levels: 25,
            pre_sweeps: 1,
            post_sweeps: 1,
        }
    }
}

struct AmgLevel {
    a: CsrMatrix,
    /// Interpolation: coarse -> fine. Restriction is its transpose.
    p: CsrMatrix,
    /// ℓ1-Jacobi diagonal: row-wise absolute sums.
    l1_diag: Vec<f64>,
}

/// Dense symmetric pseudo-inverse for the coarsest level; eigenvalues below
/// `1e-12 λ_max` are truncated, which keeps pure-Neumann (singular graph
/// Laplacian) hierarchies usable.
struct CoarseSolve {
    vectors: DenseMatrix,
    inv_vals: Vec<f64>,
}

impl CoarseSolve {
    fn new(a: &CsrMatrix) -> Result<Self> {
        let eig = sym_eigen(&a.to_dense())?;
        let lmax = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = 1e-12 * lmax.max(f64::MIN_POSITIVE);
        let inv_vals =
            eig.values.iter().map(|&l| if l.abs() <= cut { 0.0 } else { 1.0 / l }).collect();
        Ok(Self { vectors: eig.vectors, inv_vals })
    }

    fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = b.len();
        let mut t = vec![0.0; n];
        self.vectors.matvec_t(b, &mut t);
        for (ti, iv) in t.iter_mut().zip(self.inv_vals.iter()) {
            *ti *= iv;
        }
        self.vectors.matvec(&t, x);
    }
}

/// The setup product: level operators, transfers, smoother data, and the
/// coarsest-level factorization.
pub struct AmgHierarchy {
    levels: Vec<AmgLevel>,
    coarse: CoarseSolve,
    coarse_size: usize,
    options: AmgOptions,
}

/// Size/nnz summary per level (diagnostics for the solve report).
#[derive(Debug, Clone, PartialEq)]
pub struct AmgStats {
    pub levels: usize,
    pub sizes: Vec<usize>,
    pub nnz: Vec<usize>,
    /// Total nnz over all levels divided by the fine-level nnz.
    pub operator_complexity: f64,
}

fn l1_diagonal(a: &CsrMatrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            let (_, vals) = a.row(i);
            let s: f64 = vals.iter().map(|v| v.abs()).sum();
            s.max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// Strong-connection sets under the classical negative-coupling criterion.
fn strength_sets(a: &CsrMatrix, theta: f64) -> Vec<Vec<usize>> {
    let mut strong = vec![Vec::new(); a.rows()];
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        let mut max_neg = 0.0f64;
        for (j, v) in cols.iter().zip(vals) {
            if *j != i && *v < 0.0 {
                max_neg = max_neg.max(-v);
            }
        }
        if max_neg == 0.0 {
            continue;
        }
        for (j, v) in cols.iter().zip(vals) {
            if *j != i && *v < 0.0 && -v >= theta * max_neg {
                strong[i].push(*j);
            }
        }
    }
    strong
}

#[derive(Clone, Copy, PartialEq)]
enum CfState {
    Unassigned,
    Coarse,
    Fine,
}

/// Greedy maximal independent set in the strength graph, visiting nodes in
/// index order (deterministic). Nodes with no strong connections never need
/// coarse correction and are marked fine.
fn coarsen(strong: &[Vec<usize>]) -> Vec<CfState> {
    let n = strong.len();
    // symmetrized adjacency
    let mut adj = vec![Vec::new(); n];
    for (i, s) in strong.iter().enumerate() {
        for &j in s {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut state = vec![CfState::Unassigned; n];
    for i in 0..n {
        if adj[i].is_empty() {
            state[i] = CfState::Fine;
        }
    }
    for i in 0..n {
        if state[i] != CfState::Unassigned {
            continue;
        }
        state[i] = CfState::Coarse;
        for &j in &adj[i] {
            if state[j] == CfState::Unassigned {
                state[j] = CfState::Fine;
            }
        }
    }
    // second pass: every strong F-F pair must share a strong coarse point,
    // otherwise direct interpolation degrades badly on graded grids; promote
    // the later point of an uncovered pair (deterministic order)
    for i in 0..n {
        if state[i] != CfState::Fine {
            continue;
        }
        for &j in &strong[i] {
            if state[j] != CfState::Fine {
                continue;
            }
            let covered = strong[i].iter().any(|&k| {
                state[k] == CfState::Coarse && strong[j].contains(&k)
            });
            if !covered {
                state[j] = CfState::Coarse;
            }
        }
    }
    state
}

/// Direct interpolation from strong coarse neighbors.
fn interpolation(a: &CsrMatrix, strong: &[Vec<usize>], state: &[CfState]) -> CsrMatrix {
    let n = a.rows();
    let mut coarse_index = vec![usize::MAX; n];
    let mut nc = 0;
    for i in 0..n {
        if state[i] == CfState::Coarse {
            coarse_index[i] = nc;
            nc += 1;
        }
    }
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        match state[i] {
            CfState::Coarse => trips.push((i, coarse_index[i], 1.0)),
            CfState::Fine | CfState::Unassigned => {
                let coarse_nbrs: Vec<usize> = strong[i]
                    .iter()
                    .copied()
                    .filter(|&j| state[j] == CfState::Coarse)
                    .collect();
                if coarse_nbrs.is_empty() {
                    continue; // smoother-only point
                }
                let (cols, vals) = a.row(i);
                let mut diag = 0.0;
                let mut neg_sum = 0.0;
                let mut pos_sum = 0.0;
                for (j, v) in cols.iter().zip(vals) {
                    if *j == i {
                        diag = *v;
                    } else if *v < 0.0 {
                        neg_sum += *v;
                    } else {
                        pos_sum += *v;
                    }
                }
                let mut coarse_sum = 0.0;
                for &j in &coarse_nbrs {
                    if let Ok(k) = cols.binary_search(&j) {
                        coarse_sum += vals[k];
                    }
                }
                if coarse_sum == 0.0 {
                    continue;
                }
                // positive off-diagonals are lumped into the diagonal
                let scale = neg_sum / (coarse_sum * (diag + pos_sum));
                for &j in &coarse_nbrs {
                    if let Ok(k) = cols.binary_search(&j) {
                        trips.push((i, coarse_index[j], -scale * vals[k]));
                    }
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, nc, trips).expect("interpolation triplets in range")
}

/// Build the multigrid hierarchy for a symmetric M-matrix-like operator.
pub fn amg_setup(a: CsrMatrix, options: AmgOptions) -> Result<AmgHierarchy> {
    if a.rows() != a.cols() {
        return Err(Error::Shape(format!("AMG needs a square matrix, got {}x{}", a.rows(), a.cols())));
    }
    let scale = a.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if a.asymmetry() > 1e-12 * scale.max(1.0) {
        return Err(Error::Structure(format!(
            "AMG input asymmetry {:.3e} exceeds tolerance",
            a.asymmetry()
        )));
    }
    let mut levels: Vec<AmgLevel> = Vec::new();
    let mut current = a;
    while current.rows() > options.coarse_limit && levels.len() + 1 < options.max_levels {
        let strong = strength_sets(&current, options.strength_theta);
        let state = coarsen(&strong);
        let p = interpolation(&current, &strong, &state);
        let nc = p.cols();
        if nc == 0 || nc >= current.rows() {
            break; // coarsening stalled; solve this level directly
        }
        let r = p.transpose();
        let coarse = r.matmul(&current.matmul(&p)?)?;
        let l1 = l1_diagonal(&current);
        levels.push(AmgLevel { a: current, p, l1_diag: l1 });
        current = coarse;
    }
    let coarse = CoarseSolve::new(&current)?;
    let coarse_size = current.rows();
    levels.push(AmgLevel { a: current, p: CsrMatrix::zeros(0, 0), l1_diag: Vec::new() });
    Ok(AmgHierarchy { levels, coarse, coarse_size, options })
}

impl AmgHierarchy {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_matrix(&self, l: usize) -> &CsrMatrix {
        &self.levels[l].a
    }

    pub fn interpolation(&self, l: usize) -> &CsrMatrix {
        &self.levels[l].p
    }

    pub fn stats(&self) -> AmgStats {
        let sizes: Vec<usize> = self.levels.iter().map(|l| l.a.rows()).collect();
        let nnz: Vec<usize> = self.levels.iter().map(|l| l.a.nnz()).collect();
        let total: usize = nnz.iter().sum();
        AmgStats {
            levels: self.levels.len(),
            sizes,
            nnz: nnz.clone(),
            operator_complexity: total as f64 / nnz[0].max(1) as f64,
        }
    }

    fn smooth(&self, l: usize, b: &[f64], x: &mut [f64], sweeps: usize, x_is_zero: bool) {
        let level = &self.levels[l];
        let n = b.len();
        let mut r = vec![0.0; n];
        let mut first = x_is_zero;
        for _ in 0..sweeps {
            if first {
                for i in 0..n {
                    x[i] = b[i] / level.l1_diag[i];
                }
                first = false;
            } else {
                level.a.apply(x, &mut r);
                for i in 0..n {
                    x[i] += (b[i] - r[i]) / level.l1_diag[i];
                }
            }
        }
    }

    fn vcycle_level(&self, l: usize, b: &[f64], x: &mut [f64]) {
        if l + 1 == self.levels.len() {
            self.coarse.solve(b, x);
            return;
        }
        let level = &self.levels[l];
        let n = b.len();
        x.fill(0.0);
        self.smooth(l, b, x, self.options.pre_sweeps, true);
        // coarse correction
        let mut r = vec![0.0; n];
        level.a.apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let nc = level.p.cols();
        let mut rc = vec![0.0; nc];
        level.p.apply_transpose(&r, &mut rc);
        let mut ec = vec![0.0; nc];
        self.vcycle_level(l + 1, &rc, &mut ec);
        let mut e = vec![0.0; n];
        level.p.apply(&ec, &mut e);
        for i in 0..n {
            x[i] += e[i];
        }
        self.smooth(l, b, x, self.options.post_sweeps, false);
    }

    /// One V-cycle from a zero initial guess: a fixed linear operation.
    pub fn vcycle(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        self.vcycle_level(0, b, &mut x);
        x
    }

    pub fn coarse_size(&self) -> usize {
        self.coarse_size
    }
}

impl LinearOp for AmgHierarchy {
    fn size(&self) -> usize {
        self.levels[0].a.rows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let out = self.vcycle(x);
        y.copy_from_slice(&out);
    }
}

/// Report of the dense SPD verification of the V-cycle operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdReport {
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub symmetric: bool,
    pub positive: bool,
}

/// Assemble the V-cycle operator densely at desk scale and verify symmetry
/// and positive spectrum (MINRES requires an SPD preconditioner).
pub fn vcycle_spd_check(h: &AmgHierarchy) -> Result<SpdReport> {
    let n = h.size();
    if n > 5000 {
        return Err(Error::Scale(format!("dense SPD check limited to 5000 DOFs, got {n}")));
    }
    let mut dense = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = h.vcycle(&e);
        for i in 0..n {
            dense[(i, j)] = col[i];
        }
    }
    let asymmetry = dense.asymmetry();
    let scale = dense.max_abs().max(1e-300);
    // symmetrize before the eigensolve so roundoff does not poison it
    let mut sym = dense.clone();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let eig = sym_eigen(&sym)?;
    let min_eigenvalue = *eig.values.first().unwrap();
    Ok(SpdReport {
        asymmetry,
        min_eigenvalue,
        symmetric: asymmetry <= 1e-10 * scale,
        positive: min_eigenvalue > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i, i, 2.0));
            if i > 0 {
                trips.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                trips.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, trips).unwrap()
    }

    fn rng_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn single_entry_matrix_is_direct_solve() {
        let a = CsrMatrix::from_triplets(1, 1, [(0, 0, 4.0)]).unwrap();
        let h = amg_setup(a, AmgOptions::default()).unwrap();
        assert_eq!(h.n_levels(), 1);
        let x = h.vcycle(&[2.0]);
        assert!((x[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn coarsening_ratio_on_1d_laplacian() {
        let n = 128;
        let opts = AmgOptions { coarse_limit: 8, ..Default::default() };
        let h = amg_setup(laplacian_1d(n), opts).unwrap();
        assert!(h.n_levels() >= 3);
        let stats = h.stats();
        for w in stats.sizes.windows(2) {
            let ratio = w[1] as f64 / w[0] as f64;
            assert!(
                (1.0 / 3.0..=2.0 / 3.0).contains(&ratio),
                "coarsening ratio {ratio} out of bounds"
            );
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let h = amg_setup(laplacian_1d(40), AmgOptions { coarse_limit: 8, ..Default::default() })
            .unwrap();
        let x = h.vcycle(&vec![0.0; 40]);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_level_hierarchy_solves_exactly() {
        let a = laplacian_1d(16);
        let h = amg_setup(a.clone(), AmgOptions::default()).unwrap(); // below coarse_limit
        assert_eq!(h.n_levels(), 1);
        let b = rng_vec(16, 4);
        let x = h.vcycle(&b);
        let mut ax = vec![0.0; 16];
        a.apply(&x, &mut ax);
        for (p, q) in ax.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-11);
        }
    }

    #[test]
    fn identity_vcycle_is_identity() {
        let h = amg_setup(CsrMatrix::identity(16), AmgOptions::default()).unwrap();
        let b = rng_vec(16, 5);
        let x = h.vcycle(&b);
        for (p, q) in x.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-13);
        }
    }

    #[test]
    fn vcycle_contracts_error_on_laplacian() {
        let n = 200;
        let a = laplacian_1d(n);
        let opts = AmgOptions { coarse_limit: 10, ..Default::default() };
        let h = amg_setup(a.clone(), opts).unwrap();
        // iterate e <- (I - B⁻¹A) e
        let mut e = rng_vec(n, 6);
        let norm0: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cycles = 10;
        let mut ae = vec![0.0; n];
        for _ in 0..cycles {
            a.apply(&e, &mut ae);
            let corr = h.vcycle(&ae);
            for i in 0..n {
                e[i] -= corr[i];
            }
        }
        let norm1: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let factor = (norm1 / norm0).powf(1.0 / cycles as f64);
        assert!(norm0 / norm1 >= 1e3, "ten V-cycles must reduce the error by 1e3");
        assert!(factor <= 0.6, "per-cycle contraction factor {factor} too slow");
    }

    #[test]
    fn galerkin_consistency() {
        let opts = AmgOptions { coarse_limit: 8, ..Default::default() };
        let h = amg_setup(laplacian_1d(64), opts).unwrap();
        for l in 0..h.n_levels() - 1 {
            let a = h.level_matrix(l);
            let p = h.interpolation(l);
            let rap = p.transpose().matmul(&a.matmul(p).unwrap()).unwrap();
            assert!(rap.max_abs_diff(h.level_matrix(l + 1)) <= 1e-12);
            assert!(h.level_matrix(l + 1).asymmetry() <= 1e-12);
        }
    }

    #[test]
    fn setup_is_deterministic() {
        let opts = AmgOptions { coarse_limit: 8, ..Default::default() };
        let h1 = amg_setup(laplacian_1d(96), opts).unwrap();
        let h2 = amg_setup(laplacian_1d(96), opts).unwrap();
        assert_eq!(h1.n_levels(), h2.n_levels());
        for l in 0..h1.n_levels() {
            assert_eq!(h1.level_matrix(l), h2.level_matrix(l));
        }
        let b = rng_vec(96, 7);
        assert_eq!(h1.vcycle(&b), h2.vcycle(&b));
    }

    #[test]
    fn spd_check_passes_symmetric_cycle_and_fails_asymmetric() {
        let a = laplacian_1d(48);
        let opts = AmgOptions { coarse_limit: 8, ..Default::default() };
        let h = amg_setup(a.clone(), opts).unwrap();
        let report = vcycle_spd_check(&h).unwrap();
        assert!(report.symmetric, "V(1,1) with l1-Jacobi must be symmetric: {report:?}");
        assert!(report.positive, "V-cycle operator must be positive definite: {report:?}");

        let lopsided = AmgOptions { coarse_limit: 8, pre_sweeps: 1, post_sweeps: 0, ..Default::default() };
        let h_bad = amg_setup(a, lopsided).unwrap();
        let report_bad = vcycle_spd_check(&h_bad).unwrap();
        assert!(!report_bad.symmetric, "pre-only smoothing must break symmetry");
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = CsrMatrix::from_triplets(2, 2, [(0, 0, 1.0), (0, 1, 0.5), (1, 1, 1.0)]).unwrap();
        assert!(matches!(amg_setup(a, AmgOptions::default()), Err(Error::Structure(_))));
    }
}
