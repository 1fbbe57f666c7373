//! Preconditioned Krylov methods (CG, MINRES, restarted GMRES), the
//! saddle-point block preconditioners, and the constant-nullspace projection
//! for pure-Neumann problems.
//!
//! MINRES requires an SPD preconditioner and reports the preconditioned
//! residual norm; GMRES is right-preconditioned so its reported residuals
//! are true residuals.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::csr::CsrMatrix;
use crate::dense::{Cholesky, DenseMatrix};
use crate::error::Error;
use crate::fmath;
use crate::Result;

/// A linear operator on flat vectors.
pub trait LinearOp {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOp for CsrMatrix {
    fn size(&self) -> usize {
        self.rows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        CsrMatrix::apply(self, x, y)
    }
}

impl LinearOp for DenseMatrix {
    fn size(&self) -> usize {
        self.rows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

impl<T: LinearOp + ?Sized> LinearOp for &T {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
}

impl<T: LinearOp + ?Sized> LinearOp for Arc<T> {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
}

/// Wrap a closure as an operator.
pub struct FnOp<F: Fn(&[f64], &mut [f64])> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64])> LinearOp for FnOp<F> {
    fn size(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

/// Diagonal scaling operator `y = d ∘ x`.
pub struct DiagonalScale {
    pub diag: Vec<f64>,
}

impl DiagonalScale {
    /// Inverse scaling `1/(scale * d)`.
    pub fn inverse_of(d: &[f64], scale: f64) -> Self {
        Self { diag: d.iter().map(|&v| 1.0 / (scale * v)).collect() }
    }
}

impl LinearOp for DiagonalScale {
    fn size(&self) -> usize {
        self.diag.len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..x.len() {
            y[i] = self.diag[i] * x[i];
        }
    }
}

/// Identity preconditioner.
pub struct IdentityOp(pub usize);

impl LinearOp for IdentityOp {
    fn size(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}

/// Dense SPD solve as an operator (exact-block preconditioners).
pub struct DenseSolve {
    chol: Cholesky,
}

impl DenseSolve {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        Ok(Self { chol: Cholesky::factor(a)? })
    }
}

impl LinearOp for DenseSolve {
    fn size(&self) -> usize {
        self.chol.size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        self.chol.solve_in_place(y);
    }
}

/// Unknowns of the saddle-point system: RT part and `L²` part.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub u: Vec<f64>,
    pub q: Vec<f64>,
}

impl BlockVector {
    pub fn zeros(n_u: usize, n_q: usize) -> Self {
        Self { u: vec![0.0; n_u], q: vec![0.0; n_q] }
    }

    pub fn from_flat(flat: &[f64], n_u: usize) -> Self {
        Self { u: flat[..n_u].to_vec(), q: flat[n_u..].to_vec() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.u.len() + self.q.len());
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.q);
        out
    }

    /// Block inner product (sum of the part inner products).
    pub fn dot(&self, other: &BlockVector) -> f64 {
        dot(&self.u, &other.u) + dot(&self.q, &other.q)
    }
}

/// Convergence summary of one Krylov solve. `wall_seconds` is filled by the
/// caller (the core is clock-free).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_rel_residual: f64,
    /// Relative residual per iteration; `history[0] == 1`.
    pub history: Vec<f64>,
    pub wall_seconds: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    fmath::sqrt(dot(a, a))
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Preconditioned conjugate gradients for SPD systems. Stops on the relative
/// preconditioned residual; errors out when the operator or preconditioner
/// loses definiteness.
pub fn cg(
    op: &dyn LinearOp,
    precond: Option<&dyn LinearOp>,
    b: &[f64],
    tol: f64,
    max_it: usize,
) -> Result<(Vec<f64>, SolverReport)> {
    let n = op.size();
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    let apply_precond = |r: &[f64], z: &mut [f64]| match precond {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };
    apply_precond(&r, &mut z);
    let mut rz = dot(&r, &z);
    if rz < 0.0 {
        return Err(Error::Definiteness("preconditioner produced negative r'z in CG".into()));
    }
    let norm0 = fmath::sqrt(rz);
    let mut history = vec![1.0];
    if norm0 == 0.0 {
        return Ok((
            x,
            SolverReport {
                converged: true,
                iterations: 0,
                final_rel_residual: 0.0,
                history,
                wall_seconds: 0.0,
            },
        ));
    }
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_it {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Definiteness(format!(
                "non-positive curvature p'Ap = {pap:.3e} in CG"
            )));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        apply_precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        if rz_new < 0.0 {
            return Err(Error::Definiteness("indefinite preconditioner in CG".into()));
        }
        iterations += 1;
        let rel = fmath::sqrt(rz_new) / norm0;
        history.push(rel);
        if rel <= tol {
            converged = true;
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let final_rel = *history.last().unwrap();
    Ok((
        x,
        SolverReport { converged, iterations, final_rel_residual: final_rel, history, wall_seconds: 0.0 },
    ))
}

/// Preconditioned MINRES for symmetric (possibly indefinite) systems with an
/// SPD preconditioner; three-term Lanczos recurrence, monotone preconditioned
/// residual norms.
pub fn minres(
    op: &dyn LinearOp,
    precond: Option<&dyn LinearOp>,
    b: &[f64],
    tol: f64,
    max_it: usize,
) -> Result<(Vec<f64>, SolverReport)> {
    let n = op.size();
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    let apply_precond = |r: &[f64], z: &mut [f64]| match precond {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };

    let mut r1 = b.to_vec();
    let mut y = vec![0.0; n];
    apply_precond(&r1, &mut y);
    let beta1_sq = dot(&r1, &y);
    if beta1_sq < 0.0 {
        return Err(Error::Definiteness("indefinite preconditioner in MINRES".into()));
    }
    let beta1 = fmath::sqrt(beta1_sq);
    let mut history = vec![1.0];
    if beta1 == 0.0 {
        return Ok((
            x,
            SolverReport {
                converged: true,
                iterations: 0,
                final_rel_residual: 0.0,
                history,
                wall_seconds: 0.0,
            },
        ));
    }

    let mut r2 = r1.clone();
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut v = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for itn in 1..=max_it {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        op.apply(&v, &mut y);
        if itn >= 2 {
            let c = beta / oldb;
            for i in 0..n {
                y[i] -= c * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        let c = alfa / beta;
        for i in 0..n {
            y[i] -= c * r2[i];
        }
        core::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        apply_precond(&r2, &mut y);
        oldb = beta;
        let beta_sq = dot(&r2, &y);
        if beta_sq < 0.0 {
            return Err(Error::Definiteness("indefinite preconditioner in MINRES".into()));
        }
        beta = fmath::sqrt(beta_sq);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = fmath::hypot(gbar, beta).max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        for i in 0..n {
            let wi = (v[i] - oldeps * w2[i] - delta * w[i]) * denom;
            w2[i] = w[i];
            w[i] = wi;
            x[i] += phi * wi;
        }
        iterations = itn;
        let rel = phibar / beta1;
        history.push(rel);
        if rel <= tol {
            converged = true;
            break;
        }
    }
    let final_rel = *history.last().unwrap();
    Ok((
        x,
        SolverReport { converged, iterations, final_rel_residual: final_rel, history, wall_seconds: 0.0 },
    ))
}

/// Right-preconditioned restarted GMRES. Arnoldi breakdown is treated as
/// lucky convergence. Reported residuals are true residuals.
pub fn gmres(
    op: &dyn LinearOp,
    precond: Option<&dyn LinearOp>,
    b: &[f64],
    tol: f64,
    max_it: usize,
    restart: usize,
) -> Result<(Vec<f64>, SolverReport)> {
    let n = op.size();
    assert_eq!(b.len(), n);
    let m = restart.max(1).min(max_it.max(1));
    let norm_b = norm(b);
    let mut x = vec![0.0; n];
    let mut history = vec![1.0];
    if norm_b == 0.0 {
        return Ok((
            x,
            SolverReport {
                converged: true,
                iterations: 0,
                final_rel_residual: 0.0,
                history,
                wall_seconds: 0.0,
            },
        ));
    }
    let apply_precond = |r: &[f64], z: &mut [f64]| match precond {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };

    let mut total_its = 0;
    let mut converged = false;
    let mut r = vec![0.0; n];
    'outer: while total_its < max_it {
        op.apply(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        if beta <= tol * norm_b {
            converged = true;
            break;
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        v.push(r.iter().map(|&ri| ri / beta).collect());
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for j in 0..m {
            if total_its >= max_it {
                break;
            }
            let mut zj = vec![0.0; n];
            apply_precond(&v[j], &mut zj);
            let mut wv = vec![0.0; n];
            op.apply(&zj, &mut wv);
            z.push(zj);
            for i in 0..=j {
                let hij = dot(&wv, &v[i]);
                h[i][j] = hij;
                axpy(-hij, &v[i], &mut wv);
            }
            let hnext = norm(&wv);
            h[j + 1][j] = hnext;
            let lucky = hnext <= 1e-14 * norm_b.max(1.0);
            if !lucky {
                v.push(wv.iter().map(|&wi| wi / hnext).collect());
            }
            // apply stored Givens rotations to the new column
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = fmath::hypot(h[j][j], h[j + 1][j]);
            if denom > 0.0 {
                cs[j] = h[j][j] / denom;
                sn[j] = h[j + 1][j] / denom;
            } else {
                cs[j] = 1.0;
                sn[j] = 0.0;
            }
            h[j][j] = cs[j] * h[j][j] + sn[j] * h[j + 1][j];
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            total_its += 1;
            k_used = j + 1;
            let res_est = g[j + 1].abs() / norm_b;
            history.push(res_est);
            if res_est <= tol || lucky {
                converged = true;
                break;
            }
        }
        // solve the small triangular system and update x
        if k_used > 0 {
            let mut yk = vec![0.0; k_used];
            for i in (0..k_used).rev() {
                let mut s = g[i];
                for j2 in i + 1..k_used {
                    s -= h[i][j2] * yk[j2];
                }
                yk[i] = s / h[i][i];
            }
            for (j, zj) in z.iter().take(k_used).enumerate() {
                axpy(yk[j], zj, &mut x);
            }
        }
        if converged {
            // recompute the true residual for the report
            op.apply(&x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            let rel = norm(&r) / norm_b;
            *history.last_mut().unwrap() = rel;
            if rel > tol {
                converged = false;
                if total_its < max_it {
                    continue 'outer;
                }
            }
            break;
        }
    }
    let final_rel = *history.last().unwrap();
    Ok((
        x,
        SolverReport {
            converged,
            iterations: total_its,
            final_rel_residual: final_rel,
            history,
            wall_seconds: 0.0,
        },
    ))
}

/// Subtract the weighted mean: `v ← v − (Σ v / Σ w) w`, leaving `Σ v = 0`.
/// With unit weights this is the symmetric orthogonal projector used around
/// the Schur preconditioner for pure-Neumann problems; with subelement
/// volumes as weights it removes the constant function from a recovered
/// pressure.
pub fn project_constants(v: &mut [f64], weights: &[f64]) {
    assert_eq!(v.len(), weights.len());
    let sv: f64 = v.iter().sum();
    let sw: f64 = weights.iter().sum();
    let mean = sv / sw;
    for (vi, wi) in v.iter_mut().zip(weights.iter()) {
        *vi -= mean * wi;
    }
}

/// Wrap an SPD operator with the `l2` ones-projection on input and output
/// (pure-Neumann Schur preconditioner).
pub struct ProjectedOp<S> {
    pub inner: S,
    ones: Vec<f64>,
}

impl<S: LinearOp> ProjectedOp<S> {
    pub fn new(inner: S) -> Self {
        let n = inner.size();
        Self { inner, ones: vec![1.0; n] }
    }
}

impl<S: LinearOp> LinearOp for ProjectedOp<S> {
    fn size(&self) -> usize {
        self.inner.size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut xp = x.to_vec();
        project_constants(&mut xp, &self.ones);
        self.inner.apply(&xp, y);
        project_constants(y, &self.ones);
    }
}

/// Block-diagonal saddle preconditioner `(x, y) ↦ ((τ M̃)⁻¹ x, Ŝ⁻¹ y)`.
/// SPD whenever both blocks are; the default scaling is τ = 2.
pub struct BlockDiagPrecond<MI, SI> {
    pub m_inv: MI,
    pub s_inv: SI,
}

impl<MI: LinearOp, SI: LinearOp> BlockDiagPrecond<MI, SI> {
    pub fn new(m_inv: MI, s_inv: SI) -> Self {
        Self { m_inv, s_inv }
    }
}

impl<MI: LinearOp, SI: LinearOp> LinearOp for BlockDiagPrecond<MI, SI> {
    fn size(&self) -> usize {
        self.m_inv.size() + self.s_inv.size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n_u = self.m_inv.size();
        self.m_inv.apply(&x[..n_u], &mut y[..n_u]);
        self.s_inv.apply(&x[n_u..], &mut y[n_u..]);
    }
}

/// Upper block-triangular saddle preconditioner:
/// `y_q = Ŝ⁻¹ x_q`, `y_u = M̃⁻¹ (x_u − Dᵀ y_q)`. Non-symmetric: pair with
/// GMRES, not MINRES.
pub struct BlockTriPrecond<MI, SI> {
    pub m_inv: MI,
    pub s_inv: SI,
    /// Divergence (rows = L² DOFs, columns = free RT DOFs).
    pub d: Arc<CsrMatrix>,
}

impl<MI: LinearOp, SI: LinearOp> LinearOp for BlockTriPrecond<MI, SI> {
    fn size(&self) -> usize {
        self.m_inv.size() + self.s_inv.size()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n_u = self.m_inv.size();
        self.s_inv.apply(&x[n_u..], &mut y[n_u..]);
        let mut t = vec![0.0; n_u];
        self.d.apply_transpose(&y[n_u..], &mut t);
        for i in 0..n_u {
            t[i] = x[i] - t[i];
        }
        self.m_inv.apply(&t, &mut y[..n_u]);
    }
}
