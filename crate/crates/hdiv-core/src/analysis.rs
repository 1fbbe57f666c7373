//! Desk-scale spectral toolkit: dense operator assembly, generalized
//! condition numbers, eigenvalue-interval verification for the block
//! preconditioner scalings, the basis-conditioning study of the `L²` mass,
//! and a preconditioned Lanczos estimator for larger operators.
//!
//! Everything here is a verification/benchmark tool; nothing sits on the
//! production solve path.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::coefficient::Coefficient;
use crate::dense::{generalized_sym_eigenvalues, sym_eigen, Cholesky, DenseMatrix};
use crate::error::Error;
use crate::fmath;
use crate::krylov::LinearOp;
use crate::mesh::{canonical_skewed_element, cartesian_mesh};
use crate::operators::{assemble_l2_mass, precompute_geometry};
use crate::spaces::build_l2_space;
use crate::tensor1d::{basis_values, BasisTag};
use crate::Result;

const DENSIFY_GUARD: usize = 5000;

/// Apply an operator to every canonical basis vector (size-guarded).
pub fn densify(op: &dyn LinearOp, n: usize) -> Result<DenseMatrix> {
    if n > DENSIFY_GUARD {
        return Err(Error::Scale(format!("densify limited to {DENSIFY_GUARD} DOFs, got {n}")));
    }
    assert_eq!(op.size(), n);
    let mut m = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        op.apply(&e, &mut col);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    Ok(m)
}

/// κ of the symmetric-definite pencil `a x = λ b x` from the extreme absolute
/// eigenvalues.
pub fn generalized_condition(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let vals = generalized_sym_eigenvalues(a, b)?;
    Ok(kappa_of(&vals))
}

fn kappa_of(vals: &[f64]) -> f64 {
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    max / min
}

/// Eigenvalues of `P⁻¹ A` where the preconditioner is given by its inverse
/// action `p_inv` (dense, SPD): with `P⁻¹ = Q Qᵀ` the spectrum equals that of
/// the symmetric matrix `Qᵀ A Q`.
pub fn preconditioned_spectrum(a: &DenseMatrix, p_inv: &DenseMatrix) -> Result<Vec<f64>> {
    let chol = Cholesky::factor(p_inv)?;
    let q = chol.factor_matrix();
    let qt_a_q = q.transpose().matmul(a).matmul(q);
    let mut sym = qt_a_q;
    let n = sym.rows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    Ok(sym_eigen(&sym)?.values)
}

/// Spectral summary of a preconditioned operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub kappa: f64,
}

impl SpectrumReport {
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Self {
        let kappa = kappa_of(&eigenvalues);
        Self { eigenvalues, kappa }
    }
}

/// The negative/positive eigenvalue intervals guaranteed for the
/// block-diagonal preconditioner with `(1,1)`-scaling τ: the Prop-2.1
/// intervals for τ = 1; the optimal τ = 2 intervals otherwise (so
/// suboptimal scalings are flagged against the optimum).
pub fn tau_intervals(tau: f64) -> [[f64; 2]; 2] {
    if (tau - 1.0).abs() < 1e-12 {
        let golden = (1.0 + fmath::sqrt(5.0)) / 2.0;
        [[-1.0, (1.0 - fmath::sqrt(5.0)) / 2.0], [1.0, golden]]
    } else {
        [[-1.0, -0.5], [0.5, 1.0]]
    }
}

/// Interval-membership check for the spectrum of the block-diagonally
/// preconditioned saddle operator.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub intervals: [[f64; 2]; 2],
    pub violations: Vec<f64>,
    pub all_inside: bool,
}

pub fn interval_check(spectrum: &[f64], tau: f64, tol: f64) -> IntervalReport {
    let intervals = tau_intervals(tau);
    let violations: Vec<f64> = spectrum
        .iter()
        .copied()
        .filter(|&l| {
            !intervals
                .iter()
                .any(|iv| l >= iv[0] - tol && l <= iv[1] + tol)
        })
        .collect();
    IntervalReport { intervals, all_inside: violations.is_empty(), violations }
}

/// One row of the mass-conditioning study.
#[derive(Debug, Clone, PartialEq)]
pub struct MassCondRow {
    pub dim: usize,
    pub p: usize,
    pub basis: BasisTag,
    pub block_size: usize,
    pub kappa: f64,
}

/// κ(diag(W)⁻¹ W) of the single-element `L²` mass matrix in the three bases,
/// on the canonical skewed element or the unit box.
pub fn mass_basis_conditioning(
    dim: usize,
    p_values: &[usize],
    skewed: bool,
    bases: &[BasisTag],
) -> Result<Vec<MassCondRow>> {
    let mesh = if skewed {
        canonical_skewed_element(dim)?
    } else {
        cartesian_mesh(dim, &vec![1; dim], &vec![[0.0, 1.0]; dim])?
    };
    let mut rows = Vec::new();
    for &p in p_values {
        let geom = precompute_geometry(&mesh, p)?;
        let l2 = Arc::new(build_l2_space(&mesh, p)?);
        let w = assemble_l2_mass(&geom, l2, &Coefficient::Constant(1.0))?;
        for &basis in bases {
            let eval = basis_values(basis, p, &geom.shapes.quad.nodes)?;
            let block = w.dense_block_with(0, &eval);
            let diag = DenseMatrix::from_fn(block.rows(), block.cols(), |i, j| {
                if i == j {
                    block[(i, i)]
                } else {
                    0.0
                }
            });
            let kappa = generalized_condition(&block, &diag)?;
            rows.push(MassCondRow { dim, p, basis, block_size: block.rows(), kappa });
        }
    }
    Ok(rows)
}

/// Extreme eigenvalue estimates of `P⁻¹ A` (both SPD, `p_inv` given by its
/// action) from preconditioned Lanczos with full reorthogonalization.
pub fn lanczos_extremes(
    a: &dyn LinearOp,
    p_inv: Option<&dyn LinearOp>,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = a.size();
    let steps = steps.min(n).min(200);
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut rand = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    };
    let apply_pinv = |r: &[f64], z: &mut [f64]| match p_inv {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };

    let mut v: Vec<f64> = (0..n).map(|_| rand()).collect();
    let mut z = vec![0.0; n];
    apply_pinv(&v, &mut z);
    let mut beta = fmath::sqrt(v.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>());
    if !(beta > 0.0) {
        return Err(Error::Definiteness("Lanczos start vector has non-positive P-norm".into()));
    }
    for i in 0..n {
        v[i] /= beta;
        z[i] /= beta;
    }
    let mut vs: Vec<Vec<f64>> = vec![v.clone()];
    let mut zs: Vec<Vec<f64>> = vec![z.clone()];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut v_prev = vec![0.0; n];
    let mut beta_prev = 0.0;
    for _ in 0..steps {
        let mut w = vec![0.0; n];
        a.apply(&z, &mut w);
        if beta_prev > 0.0 {
            for i in 0..n {
                w[i] -= beta_prev * v_prev[i];
            }
        }
        let alpha: f64 = w.iter().zip(zs.last().unwrap().iter()).map(|(a, b)| a * b).sum();
        for i in 0..n {
            w[i] -= alpha * vs.last().unwrap()[i];
        }
        // full reorthogonalization in the P⁻¹ inner product
        for (vk, zk) in vs.iter().zip(zs.iter()) {
            let proj: f64 = w.iter().zip(zk.iter()).map(|(a, b)| a * b).sum();
            for i in 0..n {
                w[i] -= proj * vk[i];
            }
        }
        alphas.push(alpha);
        let mut zw = vec![0.0; n];
        apply_pinv(&w, &mut zw);
        let b2: f64 = w.iter().zip(zw.iter()).map(|(a, b)| a * b).sum();
        if b2 <= 0.0 || b2.sqrt() < 1e-14 * alpha.abs().max(1.0) {
            break; // invariant subspace found
        }
        beta = fmath::sqrt(b2);
        betas.push(beta);
        v_prev = vs.last().unwrap().clone();
        beta_prev = beta;
        let vn: Vec<f64> = w.iter().map(|&x| x / beta).collect();
        let zn: Vec<f64> = zw.iter().map(|&x| x / beta).collect();
        vs.push(vn.clone());
        zs.push(zn.clone());
        z = zn;
    }
    if betas.len() + 1 > alphas.len() {
        betas.truncate(alphas.len().saturating_sub(1));
    }
    let vals = crate::dense::tridiag_eigenvalues(&alphas, &betas)?;
    Ok((*vals.first().unwrap(), *vals.last().unwrap()))
}

/// κ(P⁻¹A) estimated by [`lanczos_extremes`].
pub fn lanczos_condition(
    a: &dyn LinearOp,
    p_inv: Option<&dyn LinearOp>,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let (lo, hi) = lanczos_extremes(a, p_inv, steps, seed)?;
    if lo <= 0.0 {
        return Err(Error::Definiteness(format!(
            "Lanczos produced non-positive extreme eigenvalue {lo:.3e}"
        )));
    }
    Ok(hi / lo)
}
