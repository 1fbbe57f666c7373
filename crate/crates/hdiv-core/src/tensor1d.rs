//! One-dimensional node sets, quadrature rules, and the
//! interpolation/histopolation/Gauss–Legendre basis machinery.
//!
//! Everything lives on the reference interval `[0,1]`; standard rules on
//! `[-1,1]` are mapped affinely. Histopolation reconstructs a degree-`(p-1)`
//! polynomial from its integrals over the `p` Gauss–Lobatto subintervals;
//! the induced basis `{h_j}` satisfies `∫_{I_i} h_j = δ_ij`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dense::{condition_1norm, DenseMatrix, Lu};
use crate::error::Error;
use crate::fmath;
use crate::Result;

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_IT: usize = 100;

/// Family of a 1D node set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    GaussLobatto,
    GaussLegendre,
}

/// Nodes and quadrature weights on `[0,1]`.
#[derive(Debug, Clone)]
pub struct NodeSet1D {
    pub kind: NodeKind,
    /// Strictly increasing abscissae in `[0,1]`.
    pub nodes: Vec<f64>,
    /// Positive weights summing to 1.
    pub weights: Vec<f64>,
}

impl NodeSet1D {
    /// Number of nodes.
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Quadrature of `f` over `[0,1]`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(self.weights.iter()).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Legendre polynomial `P_n` and its derivative at `x ∈ [-1,1]`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    // (x² - 1) P'_n = n (x P_n - P_{n-1})
    let dp = if (x * x - 1.0).abs() < 1e-14 {
        // endpoint limit: P'_n(±1) = ±^{n+1} n(n+1)/2
        let s = if x > 0.0 { 1.0 } else { fmath::powi(-1.0, n as i32 + 1) };
        s * (n * (n + 1)) as f64 / 2.0
    } else {
        (n as f64) * (x * p - p_prev) / (x * x - 1.0)
    };
    (p, dp)
}

/// Gauss–Lobatto–Legendre rule with `p_plus_1 ≥ 2` nodes on `[0,1]`;
/// exact for polynomials of degree `≤ 2·p_plus_1 - 3`.
pub fn gauss_lobatto(p_plus_1: usize) -> Result<NodeSet1D> {
    if p_plus_1 < 2 {
        return Err(Error::InvalidOrder(format!(
            "Gauss-Lobatto needs at least 2 nodes, got {p_plus_1}"
        )));
    }
    let n = p_plus_1;
    let big_n = n - 1;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    x[0] = -1.0;
    x[n - 1] = 1.0;
    for i in 1..n - 1 {
        // interior nodes are roots of P'_{N}; Chebyshev-Lobatto starting guess
        let mut xi = -fmath::cos(core::f64::consts::PI * i as f64 / big_n as f64);
        for it in 0..=NEWTON_MAX_IT {
            let (p, dp) = legendre(big_n, xi);
            // P''_N from the Legendre ODE: (1-x²) P'' = 2x P' - N(N+1) P
            let ddp = (2.0 * xi * dp - (big_n * (big_n + 1)) as f64 * p) / (1.0 - xi * xi);
            let dx = dp / ddp;
            xi -= dx;
            if dx.abs() <= NEWTON_TOL {
                break;
            }
            if it == NEWTON_MAX_IT {
                return Err(Error::InvalidOrder(format!(
                    "Gauss-Lobatto Newton iteration stalled at node {i} of {n}"
                )));
            }
        }
        x[i] = xi;
    }
    symmetrize(&mut x);
    for i in 0..n {
        let (p, _) = legendre(big_n, x[i]);
        w[i] = 2.0 / ((big_n * (big_n + 1)) as f64 * p * p);
    }
    Ok(to_unit_interval(NodeKind::GaussLobatto, x, w))
}

/// Gauss–Legendre rule with `n ≥ 1` nodes on `[0,1]`; exact for degree `≤ 2n-1`.
pub fn gauss_legendre(n: usize) -> Result<NodeSet1D> {
    if n < 1 {
        return Err(Error::InvalidOrder("Gauss-Legendre needs at least 1 node".into()));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut xi = -fmath::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        for it in 0..=NEWTON_MAX_IT {
            let (p, dp) = legendre(n, xi);
            let dx = p / dp;
            xi -= dx;
            if dx.abs() <= NEWTON_TOL {
                break;
            }
            if it == NEWTON_MAX_IT {
                return Err(Error::InvalidOrder(format!(
                    "Gauss-Legendre Newton iteration stalled at node {i} of {n}"
                )));
            }
        }
        x[i] = xi;
    }
    symmetrize(&mut x);
    for i in 0..n {
        let (_, dp) = legendre(n, x[i]);
        w[i] = 2.0 / ((1.0 - x[i] * x[i]) * dp * dp);
    }
    Ok(to_unit_interval(NodeKind::GaussLegendre, x, w))
}

/// Enforce exact symmetry about the origin on `[-1,1]`.
fn symmetrize(x: &mut [f64]) {
    let n = x.len();
    for i in 0..n / 2 {
        let v = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -v;
        x[n - 1 - i] = v;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
}

fn to_unit_interval(kind: NodeKind, x: Vec<f64>, w: Vec<f64>) -> NodeSet1D {
    let nodes: Vec<f64> = x.iter().map(|&v| 0.5 * (v + 1.0)).collect();
    let mut weights: Vec<f64> = w.iter().map(|&v| 0.5 * v).collect();
    // remove quadratic-size roundoff from the weight formula so the rule
    // integrates constants exactly
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    NodeSet1D { kind, nodes, weights }
}

fn barycentric_weights(nodes: &[f64]) -> Result<Vec<f64>> {
    let n = nodes.len();
    let mut lam = vec![1.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                let d = nodes[j] - nodes[k];
                if d.abs() < 1e-14 {
                    return Err(Error::DegenerateBasis(format!(
                        "coincident nodes {j} and {k} at {:.6}",
                        nodes[j]
                    )));
                }
                lam[j] /= d;
            }
        }
    }
    Ok(lam)
}

/// Lagrange interpolation matrix: entry `(i, j)` is the `j`-th cardinal
/// polynomial of `nodes` evaluated at `eval_points[i]`.
pub fn interp_matrix(nodes: &[f64], eval_points: &[f64]) -> Result<DenseMatrix> {
    let n = nodes.len();
    let lam = barycentric_weights(nodes)?;
    let mut m = DenseMatrix::zeros(eval_points.len(), n);
    for (i, &y) in eval_points.iter().enumerate() {
        if let Some(j) = nodes.iter().position(|&x| x == y) {
            m[(i, j)] = 1.0;
            continue;
        }
        let mut denom = 0.0;
        for j in 0..n {
            denom += lam[j] / (y - nodes[j]);
        }
        for j in 0..n {
            m[(i, j)] = lam[j] / (y - nodes[j]) / denom;
        }
    }
    Ok(m)
}

/// Derivatives of the cardinal polynomials of `nodes` at `eval_points`.
pub fn interp_deriv_matrix(nodes: &[f64], eval_points: &[f64]) -> Result<DenseMatrix> {
    // l'_j is itself a polynomial of degree < n, so interpolate the nodal
    // differentiation matrix: l'_j(y) = sum_i l_i(y) l'_j(x_i)
    let d = diff_matrix(nodes)?;
    let e = interp_matrix(nodes, eval_points)?;
    Ok(e.matmul(&d))
}

/// Nodal differentiation matrix `D_ij = l'_j(x_i)`.
fn diff_matrix(nodes: &[f64]) -> Result<DenseMatrix> {
    let n = nodes.len();
    let lam = barycentric_weights(nodes)?;
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (lam[j] / lam[i]) / (nodes[i] - nodes[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    Ok(d)
}

/// Gauss–Lobatto subintervals `I_0..I_{p-1}` of `[0,1]`.
pub fn gll_subintervals(p: usize) -> Result<Vec<(f64, f64)>> {
    let gll = gauss_lobatto(p + 1)?;
    Ok(gll.nodes.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Nodes of the intermediate nodal basis used for degree-`(p-1)` spaces.
fn gl_basis_nodes(p: usize) -> Result<Vec<f64>> {
    Ok(gauss_legendre(p)?.nodes)
}

/// Subinterval integrals `K_ij = ∫_{I_i} g_j` of the degree-`(p-1)`
/// Gauss–Legendre nodal basis.
fn subinterval_integral_matrix(p: usize, basis_nodes: &[f64]) -> Result<DenseMatrix> {
    let intervals = gll_subintervals(p)?;
    let rule = gauss_legendre(p.max(1))?;
    let mut k = DenseMatrix::zeros(p, basis_nodes.len());
    for (i, &(a, b)) in intervals.iter().enumerate() {
        let len = b - a;
        let pts: Vec<f64> = rule.nodes.iter().map(|&t| a + len * t).collect();
        let vals = interp_matrix(basis_nodes, &pts)?;
        for j in 0..basis_nodes.len() {
            let mut s = 0.0;
            for (q, &wq) in rule.weights.iter().enumerate() {
                s += wq * vals[(q, j)];
            }
            k[(i, j)] = len * s;
        }
    }
    Ok(k)
}

/// Change of basis from the Gauss–Legendre nodal basis to the histopolation
/// basis: column `j` holds the GL-nodal coefficients of `h_j`, obtained by
/// inverting the matrix of subinterval integrals.
pub fn histopolation_matrix(p: usize) -> Result<DenseMatrix> {
    if p < 1 {
        return Err(Error::InvalidOrder("histopolation needs p >= 1".into()));
    }
    let nodes = gl_basis_nodes(p)?;
    let k = subinterval_integral_matrix(p, &nodes)?;
    if condition_1norm(&k)? > 1e12 {
        return Err(Error::DegenerateBasis(format!(
            "subinterval integral matrix ill-conditioned at p = {p}"
        )));
    }
    Ok(Lu::factor(&k)?.inverse())
}

/// Values of the histopolation basis `{h_j}` at `eval_points`.
pub fn histopolation_values(p: usize, eval_points: &[f64]) -> Result<DenseMatrix> {
    let nodes = gl_basis_nodes(p)?;
    let h = histopolation_matrix(p)?;
    Ok(interp_matrix(&nodes, eval_points)?.matmul(&h))
}

/// Basis families for the degree-`(p-1)` space on `[0,1]` (dimension `p`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTag {
    /// Lagrange basis at `p` Gauss–Lobatto points (constant basis for p = 1).
    GllNodal,
    /// Lagrange basis at `p` Gauss–Legendre points.
    GlNodal,
    /// Histopolation basis on the Gauss–Lobatto subintervals.
    Histopolation,
}

/// A coefficient transform between two bases of the same degree-`(p-1)` space.
#[derive(Debug, Clone)]
pub struct BasisChange1D {
    pub from: BasisTag,
    pub to: BasisTag,
    /// Maps a coefficient vector in `from` to the same function's
    /// coefficients in `to`.
    pub matrix: DenseMatrix,
}

fn basis_nodes(tag: BasisTag, p: usize) -> Result<Vec<f64>> {
    match tag {
        BasisTag::GllNodal => {
            if p == 1 {
                Ok(vec![0.5])
            } else {
                Ok(gauss_lobatto(p)?.nodes)
            }
        }
        BasisTag::GlNodal => gl_basis_nodes(p),
        BasisTag::Histopolation => gl_basis_nodes(p),
    }
}

/// Values of the `tag` basis functions at `eval_points`.
pub fn basis_values(tag: BasisTag, p: usize, eval_points: &[f64]) -> Result<DenseMatrix> {
    match tag {
        BasisTag::Histopolation => histopolation_values(p, eval_points),
        _ => interp_matrix(&basis_nodes(tag, p)?, eval_points),
    }
}

/// Dense coefficient transform between bases of the dimension-`p` space.
pub fn basis_change(p: usize, from: BasisTag, to: BasisTag) -> Result<BasisChange1D> {
    if p < 1 {
        return Err(Error::InvalidOrder("basis change needs p >= 1".into()));
    }
    if from == to {
        return Ok(BasisChange1D { from, to, matrix: DenseMatrix::identity(p) });
    }
    // entry (i, j) = i-th DOF of the target basis applied to the j-th source
    // basis function
    let matrix = match to {
        BasisTag::Histopolation => {
            let vals_to_integrate = from;
            let nodes = basis_nodes(vals_to_integrate, p)?;
            let k = match vals_to_integrate {
                BasisTag::Histopolation => unreachable!(),
                _ => subinterval_integral_matrix(p, &nodes)?,
            };
            k
        }
        _ => basis_values(from, p, &basis_nodes(to, p)?)?,
    };
    Ok(BasisChange1D { from, to, matrix })
}
