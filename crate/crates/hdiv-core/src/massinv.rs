//! Strategies for applying the inverse of the block-diagonal `L²` mass:
//! per-block Cholesky factorization, per-block explicit inverse, and a local
//! diagonally-preconditioned CG run in the Gauss–Legendre basis.
//!
//! The local CG route is the matrix-free path: `O(p^d)` memory per element
//! against `O(p^{2d})` for the dense strategies, and its iteration count is
//! independent of the polynomial degree because the diagonally scaled GL
//! mass stays well conditioned even on skewed elements.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::dense::{Cholesky, DenseMatrix};
use crate::error::Error;
use crate::operators::{contract_axis, L2MassOp};
use crate::spaces::L2Space;
use crate::tensor1d::{basis_change, basis_values, BasisTag};
use crate::{fmath, Result};

/// Strategy selector. `Auto` picks the explicit inverse for `p ≤ 2` and the
/// local CG for `p ≥ 3` (the iterative path wins once blocks grow).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassInvKind {
    Auto,
    Factorize,
    ExplicitInverse,
    LocalCg,
}

#[derive(Debug, Clone, Copy)]
pub struct MassInvOptions {
    pub kind: MassInvKind,
    /// Relative residual tolerance of the local CG.
    pub tol: f64,
    pub max_it: usize,
}

impl Default for MassInvOptions {
    fn default() -> Self {
        Self { kind: MassInvKind::Auto, tol: 1e-12, max_it: 200 }
    }
}

enum Strategy {
    Factorize(Vec<Cholesky>),
    Explicit(Vec<DenseMatrix>),
    LocalCg {
        /// GL-basis evaluation at the quadrature points and its transpose.
        e_gl: DenseMatrix,
        e_gl_t: DenseMatrix,
        /// Histopolation-from-GL coefficient transform (subinterval
        /// integrals of the GL basis) applied per axis.
        to_histo: DenseMatrix,
        to_histo_t: DenseMatrix,
        /// Concatenated per-element diagonals of the GL-basis blocks.
        diag: Vec<f64>,
        tol: f64,
        max_it: usize,
    },
}

/// A ready-to-apply `W⁻¹`. Element solves are independent; `apply` is safe
/// to call concurrently on distinct outputs. The apply counter is a
/// diagnostic (relaxed atomic).
pub struct MassInverse {
    w: Arc<L2MassOp>,
    kind: MassInvKind,
    strategy: Strategy,
    applies: AtomicUsize,
}

/// Resolve `Auto` against the degree.
pub fn resolve_kind(kind: MassInvKind, p: usize) -> MassInvKind {
    match kind {
        MassInvKind::Auto => {
            if p <= 2 {
                MassInvKind::ExplicitInverse
            } else {
                MassInvKind::LocalCg
            }
        }
        other => other,
    }
}

/// Build the strategy data for the given `L²` mass operator.
pub fn setup(w: Arc<L2MassOp>, options: MassInvOptions) -> Result<MassInverse> {
    let space = w.space().clone();
    let p = space.degree;
    let kind = resolve_kind(options.kind, p);
    let strategy = match kind {
        MassInvKind::Factorize => {
            let mut factors = Vec::with_capacity(space.n_elements());
            for e in 0..space.n_elements() {
                let block = w.dense_block(e);
                let chol = Cholesky::factor(&block).map_err(|_| {
                    Error::Definiteness(format!("mass block of element {e} is not SPD"))
                })?;
                factors.push(chol);
            }
            Strategy::Factorize(factors)
        }
        MassInvKind::ExplicitInverse => {
            let mut inverses = Vec::with_capacity(space.n_elements());
            for e in 0..space.n_elements() {
                let block = w.dense_block(e);
                let chol = Cholesky::factor(&block).map_err(|_| {
                    Error::Definiteness(format!("mass block of element {e} is not SPD"))
                })?;
                inverses.push(chol.inverse());
            }
            Strategy::Explicit(inverses)
        }
        MassInvKind::LocalCg => {
            let e_gl = basis_values(BasisTag::GlNodal, p, &w.shapes().quad.nodes)?;
            let to_histo = basis_change(p, BasisTag::GlNodal, BasisTag::Histopolation)?.matrix;
            let mut diag = Vec::with_capacity(space.n_dofs());
            for e in 0..space.n_elements() {
                diag.extend(w.block_diagonal_with(e, &e_gl));
            }
            if diag.iter().any(|&d| d <= 0.0) {
                return Err(Error::Definiteness("non-positive GL mass diagonal".into()));
            }
            Strategy::LocalCg {
                e_gl_t: e_gl.transpose(),
                e_gl,
                to_histo_t: to_histo.transpose(),
                to_histo,
                diag,
                tol: options.tol,
                max_it: options.max_it,
            }
        }
        MassInvKind::Auto => unreachable!("resolved above"),
    };
    Ok(MassInverse { w, kind, strategy, applies: AtomicUsize::new(0) })
}

impl MassInverse {
    pub fn kind(&self) -> MassInvKind {
        self.kind
    }

    pub fn space(&self) -> &Arc<L2Space> {
        self.w.space()
    }

    pub fn n_dofs(&self) -> usize {
        self.w.n_dofs()
    }

    /// Number of `apply_inverse` calls since construction (or the last reset).
    pub fn applications(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applies.store(0, Ordering::Relaxed);
    }

    /// Bytes of per-element strategy data (memory accounting).
    pub fn memory_bytes(&self) -> usize {
        let f = core::mem::size_of::<f64>();
        match &self.strategy {
            Strategy::Factorize(ch) => {
                ch.iter().map(|c| c.size() * c.size() * f).sum()
            }
            Strategy::Explicit(inv) => inv.iter().map(|m| m.rows() * m.cols() * f).sum(),
            Strategy::LocalCg { diag, e_gl, to_histo, .. } => {
                // the 1D matrices are shared across all elements
                diag.len() * f
                    + 2 * e_gl.rows() * e_gl.cols() * f
                    + 2 * to_histo.rows() * to_histo.cols() * f
            }
        }
    }

    /// y = W⁻¹ rhs.
    pub fn apply_inverse(&self, rhs: &[f64], y: &mut [f64]) -> Result<()> {
        self.apply_with_census(rhs, y, None)
    }

    /// Per-element CG iteration counts for this right-hand side (dense
    /// strategies report zeros).
    pub fn iteration_census(&self, rhs: &[f64]) -> Result<Vec<u32>> {
        let mut counts = vec![0u32; self.w.space().n_elements()];
        let mut y = vec![0.0; rhs.len()];
        self.apply_with_census(rhs, &mut y, Some(&mut counts))?;
        Ok(counts)
    }

    fn apply_with_census(
        &self,
        rhs: &[f64],
        y: &mut [f64],
        mut census: Option<&mut [u32]>,
    ) -> Result<()> {
        let space = self.w.space();
        assert_eq!(rhs.len(), space.n_dofs());
        assert_eq!(y.len(), space.n_dofs());
        self.applies.fetch_add(1, Ordering::Relaxed);
        match &self.strategy {
            Strategy::Factorize(factors) => {
                for e in 0..space.n_elements() {
                    let r = space.element_range(e);
                    y[r.clone()].copy_from_slice(&rhs[r.clone()]);
                    factors[e].solve_in_place(&mut y[r]);
                }
                Ok(())
            }
            Strategy::Explicit(inverses) => {
                for e in 0..space.n_elements() {
                    let r = space.element_range(e);
                    inverses[e].matvec(&rhs[r.clone()], &mut y[r]);
                }
                Ok(())
            }
            Strategy::LocalCg { e_gl, e_gl_t, to_histo, to_histo_t, diag, tol, max_it } => {
                let dim = space.dim;
                let p = space.degree;
                let n_loc = space.n_per_element();
                let mut worst: Option<(usize, f64)> = None;
                let mut scratch = Vec::new();
                let mut b_gl = Vec::new();
                let mut out = Vec::new();
                for e in 0..space.n_elements() {
                    let r = space.element_range(e);
                    // rhs to the GL dual: multiply by the transposed change
                    kron_apply(to_histo_t, dim, p, &rhs[r.clone()], &mut scratch, &mut b_gl);
                    let d = &diag[r.clone()];
                    let (x_gl, its, rel) =
                        self.local_cg(e, e_gl, e_gl_t, &b_gl, d, *tol, *max_it, n_loc);
                    if let Some(c) = census.as_deref_mut() {
                        c[e] = its;
                    }
                    if rel > *tol {
                        let w = worst.get_or_insert((e, rel));
                        if rel > w.1 {
                            *w = (e, rel);
                        }
                    }
                    // back to histopolation coefficients
                    kron_apply(to_histo, dim, p, &x_gl, &mut scratch, &mut out);
                    y[r].copy_from_slice(&out);
                }
                if let Some((e, rel)) = worst {
                    return Err(Error::IterationLimit(format!(
                        "local CG stalled at {rel:.3e} relative residual (worst element {e})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Diagonally preconditioned CG on one GL-basis block, zero initial guess.
    #[allow(clippy::too_many_arguments)]
    fn local_cg(
        &self,
        e: usize,
        e_gl: &DenseMatrix,
        e_gl_t: &DenseMatrix,
        b: &[f64],
        diag: &[f64],
        tol: f64,
        max_it: usize,
        n: usize,
    ) -> (Vec<f64>, u32, f64) {
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(diag.iter()).map(|(ri, di)| ri / di).collect();
        let mut rz: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let norm0 = fmath::sqrt(rz.max(0.0));
        if norm0 == 0.0 {
            return (x, 0, 0.0);
        }
        let mut p_vec = z.clone();
        let mut ap = Vec::new();
        let mut its = 0u32;
        let mut rel = 1.0;
        while (its as usize) < max_it {
            self.w.apply_block_with(e, e_gl, e_gl_t, &p_vec, &mut ap);
            let pap: f64 = p_vec.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p_vec[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            its += 1;
            rel = fmath::sqrt(rz_new.max(0.0)) / norm0;
            if rel <= tol {
                break;
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p_vec[i] = z[i] + beta * p_vec[i];
            }
        }
        (x, its, rel)
    }
}

/// Apply a `p×p` matrix along every axis of an element block (Kronecker
/// action).
fn kron_apply(
    m: &DenseMatrix,
    dim: usize,
    p: usize,
    x: &[f64],
    scratch: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let mut dims = [p, p, if dim == 3 { p } else { 1 }];
    out.clear();
    out.extend_from_slice(x);
    for axis in 0..dim {
        core::mem::swap(out, scratch);
        dims = contract_axis(m, scratch, dims, axis, out);
    }
}
