//! Assembly and matrix-free application of the bilinear forms: the
//! Raviart–Thomas mass `(β u, v)`, the `L²` mass `(α q, r)`, the weighted
//! divergence form `(α ∇·u, q)`, and the primal grad–div operator.
//!
//! Operators store per-quadrature-point geometric factors (partial assembly)
//! and apply through one-dimensional tensor contractions, so a per-element
//! apply costs `O(p^{d+1})` per direction pass. Dense element matrices are
//! only materialized on request (mass-inverse direct strategies and the
//! two-path oracles).

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::coefficient::Coefficient;
use crate::dense::DenseMatrix;
use crate::error::Error;
use crate::mesh::Mesh;
use crate::parallel::map_elements;
use crate::spaces::{L2Space, RtSpace};
use crate::tensor1d::{
    gauss_legendre, histopolation_values, interp_deriv_matrix, interp_matrix, NodeSet1D,
};
use crate::{fmath, Result};

/// One-dimensional shape matrices evaluated at the quadrature points:
/// the degree-`p` interpolation basis (values and derivatives) and the
/// degree-`(p-1)` histopolation basis.
#[derive(Debug)]
pub struct ElemShapes {
    pub p: usize,
    pub dim: usize,
    /// Points per axis of the quadrature grid (`p + 2`).
    pub nq: usize,
    pub quad: NodeSet1D,
    /// `nq × (p+1)` values of the Gauss–Lobatto nodal basis.
    pub e_p: DenseMatrix,
    /// `nq × (p+1)` derivatives of the Gauss–Lobatto nodal basis.
    pub d_p: DenseMatrix,
    /// `nq × p` values of the histopolation basis.
    pub e_h: DenseMatrix,
    e_p_t: DenseMatrix,
    d_p_t: DenseMatrix,
    e_h_t: DenseMatrix,
}

impl ElemShapes {
    pub fn new(p: usize, dim: usize) -> Result<Self> {
        let nq = p + 2;
        let quad = gauss_legendre(nq)?;
        let gll = crate::tensor1d::gauss_lobatto(p + 1)?;
        let e_p = interp_matrix(&gll.nodes, &quad.nodes)?;
        let d_p = interp_deriv_matrix(&gll.nodes, &quad.nodes)?;
        let e_h = histopolation_values(p, &quad.nodes)?;
        Ok(Self {
            p,
            dim,
            nq,
            quad,
            e_p_t: e_p.transpose(),
            d_p_t: d_p.transpose(),
            e_h_t: e_h.transpose(),
            e_p,
            d_p,
            e_h,
        })
    }

    /// Tensor dimensions of RT component `c` coefficients (axis 0 fastest).
    pub fn comp_dims(&self, c: usize) -> [usize; 3] {
        let p = self.p;
        let mut d = [p, p, if self.dim == 3 { p } else { 1 }];
        d[c] = p + 1;
        d
    }

    pub fn comp_len(&self, c: usize) -> usize {
        let d = self.comp_dims(c);
        d[0] * d[1] * d[2]
    }

    pub fn quad_dims(&self) -> [usize; 3] {
        [self.nq, self.nq, if self.dim == 3 { self.nq } else { 1 }]
    }

    pub fn nq_total(&self) -> usize {
        let q = self.quad_dims();
        q[0] * q[1] * q[2]
    }

    pub fn n_l2_local(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    fn forward(&self, axis: usize, comp: usize, derivative: bool) -> &DenseMatrix {
        if axis == comp {
            if derivative {
                &self.d_p
            } else {
                &self.e_p
            }
        } else {
            &self.e_h
        }
    }

    fn backward(&self, axis: usize, comp: usize, derivative: bool) -> &DenseMatrix {
        if axis == comp {
            if derivative {
                &self.d_p_t
            } else {
                &self.e_p_t
            }
        } else {
            &self.e_h_t
        }
    }
}

/// Contract `mat` (m_out × m_in) along `axis` of the tensor `x` with
/// dimensions `dims` (`dims[axis] == m_in`, axis 0 fastest); returns the new
/// dimensions and writes into `out`.
pub(crate) fn contract_axis(
    mat: &DenseMatrix,
    x: &[f64],
    dims: [usize; 3],
    axis: usize,
    out: &mut Vec<f64>,
) -> [usize; 3] {
    let m_out = mat.rows();
    let m_in = mat.cols();
    debug_assert_eq!(dims[axis], m_in);
    debug_assert_eq!(x.len(), dims[0] * dims[1] * dims[2]);
    let inner: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let mut new_dims = dims;
    new_dims[axis] = m_out;
    out.clear();
    out.resize(inner * m_out * outer, 0.0);
    for o in 0..outer {
        for a_in in 0..m_in {
            let src_base = inner * (a_in + dims[axis] * o);
            for a_out in 0..m_out {
                let w = mat[(a_out, a_in)];
                if w == 0.0 {
                    continue;
                }
                let dst_base = inner * (a_out + m_out * o);
                for i in 0..inner {
                    out[dst_base + i] += w * x[src_base + i];
                }
            }
        }
    }
    new_dims
}

/// Evaluate a component block on the quadrature grid (or its contribution to
/// the reference divergence when `derivative` is set).
fn eval_component(
    shapes: &ElemShapes,
    comp: usize,
    block: &[f64],
    derivative: bool,
    scratch: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let mut dims = shapes.comp_dims(comp);
    out.clear();
    out.extend_from_slice(block);
    for axis in 0..shapes.dim {
        core::mem::swap(out, scratch);
        dims = contract_axis(shapes.forward(axis, comp, derivative), scratch, dims, axis, out);
    }
}

/// Adjoint of [`eval_component`]: quadrature-point values back to the
/// component coefficient layout.
fn reduce_component(
    shapes: &ElemShapes,
    comp: usize,
    qvals: &[f64],
    derivative: bool,
    scratch: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let mut dims = shapes.quad_dims();
    out.clear();
    out.extend_from_slice(qvals);
    for axis in 0..shapes.dim {
        core::mem::swap(out, scratch);
        dims = contract_axis(shapes.backward(axis, comp, derivative), scratch, dims, axis, out);
    }
}

pub(crate) fn eval_l2(
    basis: &DenseMatrix,
    dim: usize,
    block: &[f64],
    scratch: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let p = basis.cols();
    let mut dims = [p, p, if dim == 3 { p } else { 1 }];
    out.clear();
    out.extend_from_slice(block);
    for axis in 0..dim {
        core::mem::swap(out, scratch);
        dims = contract_axis(basis, scratch, dims, axis, out);
    }
}

pub(crate) fn reduce_l2(
    basis_t: &DenseMatrix,
    dim: usize,
    nq: usize,
    qvals: &[f64],
    scratch: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let mut dims = [nq, nq, if dim == 3 { nq } else { 1 }];
    out.clear();
    out.extend_from_slice(qvals);
    for axis in 0..dim {
        core::mem::swap(out, scratch);
        dims = contract_axis(basis_t, scratch, dims, axis, out);
    }
}

/// Per-quadrature-point geometry of a mesh at a given degree: Jacobians,
/// determinants, physical positions, and tensorized reference weights.
pub struct ElementGeometry {
    pub dim: usize,
    pub p: usize,
    pub n_elements: usize,
    pub shapes: Arc<ElemShapes>,
    nq_tot: usize,
    det: Vec<f64>,
    jac: Vec<f64>,
    xq: Vec<[f64; 3]>,
    wq: Vec<f64>,
}

impl ElementGeometry {
    #[inline]
    pub fn det(&self, e: usize, q: usize) -> f64 {
        self.det[e * self.nq_tot + q]
    }

    /// Row-major 3×3 Jacobian at an element quadrature point.
    #[inline]
    pub fn jac(&self, e: usize, q: usize) -> &[f64] {
        let base = (e * self.nq_tot + q) * 9;
        &self.jac[base..base + 9]
    }

    #[inline]
    pub fn phys(&self, e: usize, q: usize) -> &[f64; 3] {
        &self.xq[e * self.nq_tot + q]
    }

    /// Reference quadrature weight of point `q` (tensor product of 1D weights).
    #[inline]
    pub fn weight(&self, q: usize) -> f64 {
        self.wq[q]
    }

    pub fn nq_total(&self) -> usize {
        self.nq_tot
    }

    /// Physical element volumes (quadrature of det J).
    pub fn element_volumes(&self) -> Vec<f64> {
        (0..self.n_elements)
            .map(|e| (0..self.nq_tot).map(|q| self.wq[q] * self.det(e, q)).sum())
            .collect()
    }

}

/// Physical subelement volumes, ordered like the `L²` DOFs: the integral of
/// `det J` over each Gauss–Lobatto subcell. These are exactly the
/// histopolation coefficients of the constant function 1.
pub fn subelement_volumes(mesh: &Mesh, l2: &L2Space) -> Result<Vec<f64>> {
    let p = l2.degree;
    let dim = mesh.dim();
    let gll = crate::tensor1d::gauss_lobatto(p + 1)?.nodes;
    let rule = gauss_legendre(p + 2)?;
    let nq = rule.order();
    let mut out = vec![0.0; l2.n_dofs()];
    for e in 0..mesh.n_elements() {
        let tr = mesh.transform(e);
        for local in 0..l2.n_per_element() {
            let lc = [local % p, (local / p) % p, local / (p * p)];
            let mut lo = [0.0; 3];
            let mut len = [1.0; 3];
            for a in 0..dim {
                lo[a] = gll[lc[a]];
                len[a] = gll[lc[a] + 1] - gll[lc[a]];
            }
            let kmax = if dim == 3 { nq } else { 1 };
            let mut vol = 0.0;
            for k in 0..kmax {
                for j in 0..nq {
                    for i in 0..nq {
                        let xhat = [
                            lo[0] + len[0] * rule.nodes[i],
                            lo[1] + len[1] * rule.nodes[j],
                            if dim == 3 { lo[2] + len[2] * rule.nodes[k] } else { 0.0 },
                        ];
                        let (_, det) = tr.jacobian(&xhat);
                        let mut w = rule.weights[i] * rule.weights[j];
                        if dim == 3 {
                            w *= rule.weights[k];
                        }
                        vol += w * det;
                    }
                }
            }
            out[l2.global_of(e, local)] = vol * len[0] * len[1] * len[2];
        }
    }
    Ok(out)
}

/// Precompute the geometric data of every element at the `(p+2)`-point
/// Gauss–Legendre grid.
pub fn precompute_geometry(mesh: &Mesh, p: usize) -> Result<ElementGeometry> {
    let dim = mesh.dim();
    let shapes = Arc::new(ElemShapes::new(p, dim)?);
    let nq_tot = shapes.nq_total();
    let nel = mesh.n_elements();
    let rule = shapes.quad.clone();
    let qd = shapes.quad_dims();

    let mut wq = vec![0.0; nq_tot];
    for q in 0..nq_tot {
        let (q0, q1, q2) = (q % qd[0], (q / qd[0]) % qd[1], q / (qd[0] * qd[1]));
        let mut w = rule.weights[q0] * rule.weights[q1];
        if dim == 3 {
            w *= rule.weights[q2];
        }
        wq[q] = w;
    }

    let per_elem = map_elements(nel, |e| {
        let tr = mesh.transform(e);
        let mut det = vec![0.0; nq_tot];
        let mut jac = vec![0.0; nq_tot * 9];
        let mut xq = vec![[0.0f64; 3]; nq_tot];
        for q in 0..nq_tot {
            let (q0, q1, q2) = (q % qd[0], (q / qd[0]) % qd[1], q / (qd[0] * qd[1]));
            let xhat =
                [rule.nodes[q0], rule.nodes[q1], if dim == 3 { rule.nodes[q2] } else { 0.0 }];
            let (j, d) = tr.jacobian(&xhat);
            det[q] = d;
            for r in 0..3 {
                for c in 0..3 {
                    jac[q * 9 + r * 3 + c] = j[r][c];
                }
            }
            xq[q] = tr.map(&xhat);
        }
        (det, jac, xq)
    });

    let mut det = Vec::with_capacity(nel * nq_tot);
    let mut jac = Vec::with_capacity(nel * nq_tot * 9);
    let mut xq = Vec::with_capacity(nel * nq_tot);
    for (d, j, x) in per_elem {
        det.extend_from_slice(&d);
        jac.extend_from_slice(&j);
        xq.extend_from_slice(&x);
    }
    for (k, &d) in det.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::InvalidMesh(format!(
                "non-positive det J = {d:.3e} at quadrature point in element {}",
                k / nq_tot
            )));
        }
    }
    Ok(ElementGeometry { dim, p, n_elements: nel, shapes, nq_tot, det, jac, xq, wq })
}

fn nsym(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn sym_index(dim: usize, a: usize, b: usize) -> usize {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if lo == hi {
        lo
    } else if dim == 2 {
        2
    } else {
        2 + lo + hi // (0,1) -> 3, (0,2) -> 4, (1,2) -> 5
    }
}

fn check_positive(name: &str, value: f64, element: usize) -> Result<()> {
    if value <= 0.0 {
        return Err(Error::Coefficient(format!(
            "non-positive {name} = {value:.3e} sampled in element {element}"
        )));
    }
    Ok(())
}

fn squared_transpose(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.cols(), m.rows(), |i, j| {
        let v = m[(j, i)];
        v * v
    })
}

/// Degree-of-freedom restriction for essential (normal-trace) boundary
/// conditions imposed by symmetric elimination.
#[derive(Debug, Clone)]
pub struct DofRestriction {
    n_full: usize,
    free: Vec<usize>,
    index_of: Vec<usize>,
}

impl DofRestriction {
    pub fn identity(n: usize) -> Self {
        Self { n_full: n, free: (0..n).collect(), index_of: (0..n).collect() }
    }

    pub fn eliminating(n: usize, eliminated: &[usize]) -> Self {
        let mut mask = vec![false; n];
        for &g in eliminated {
            mask[g] = true;
        }
        let mut free = Vec::new();
        let mut index_of = vec![usize::MAX; n];
        for g in 0..n {
            if !mask[g] {
                index_of[g] = free.len();
                free.push(g);
            }
        }
        Self { n_full: n, free, index_of }
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    pub fn is_free(&self, g: usize) -> bool {
        self.index_of[g] != usize::MAX
    }

    pub fn reduce(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&g| full[g]).collect()
    }

    /// Scatter a reduced vector into a full one, zeros at eliminated DOFs.
    pub fn scatter(&self, reduced: &[f64], full: &mut [f64]) {
        full.fill(0.0);
        for (r, &g) in self.free.iter().enumerate() {
            full[g] = reduced[r];
        }
    }
}

/// Matrix-free Raviart–Thomas mass operator `(β u, v)` (Piola-mapped).
pub struct RtMassOp {
    space: Arc<RtSpace>,
    shapes: Arc<ElemShapes>,
    /// `w·β·JᵀJ/det` per element and quadrature point, packed symmetric.
    factors: Vec<f64>,
    nq_tot: usize,
}

pub fn assemble_rt_mass(
    geom: &ElementGeometry,
    space: Arc<RtSpace>,
    beta: &Coefficient,
) -> Result<RtMassOp> {
    let dim = geom.dim;
    let ns = nsym(dim);
    let nq_tot = geom.nq_total();
    let mut factors = vec![0.0; geom.n_elements * nq_tot * ns];
    for e in 0..geom.n_elements {
        for q in 0..nq_tot {
            let b = beta.eval(e, geom.phys(e, q));
            check_positive("beta", b, e)?;
            let j = geom.jac(e, q);
            let scale = geom.weight(q) * b / geom.det(e, q);
            let base = (e * nq_tot + q) * ns;
            for r in 0..dim {
                for c in r..dim {
                    let mut v = 0.0;
                    for k in 0..dim {
                        v += j[k * 3 + r] * j[k * 3 + c];
                    }
                    factors[base + sym_index(dim, r, c)] = scale * v;
                }
            }
        }
    }
    Ok(RtMassOp { space, shapes: geom.shapes.clone(), factors, nq_tot })
}

impl RtMassOp {
    pub fn space(&self) -> &Arc<RtSpace> {
        &self.space
    }

    pub fn shapes(&self) -> &Arc<ElemShapes> {
        &self.shapes
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    /// y = M x on full DOF vectors.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.space.n_dofs());
        assert_eq!(y.len(), self.space.n_dofs());
        let shapes = &*self.shapes;
        let dim = shapes.dim;
        let ns = nsym(dim);
        let nq_tot = self.nq_tot;
        let locals = map_elements(self.space.n_elements(), |e| {
            let mut u_loc = vec![0.0; self.space.n_local()];
            self.space.gather_local(e, x, &mut u_loc);
            let mut scratch = Vec::new();
            let mut vals: Vec<Vec<f64>> = Vec::with_capacity(dim);
            let mut offset = 0;
            for c in 0..dim {
                let len = shapes.comp_len(c);
                let mut v = Vec::new();
                eval_component(
                    shapes,
                    c,
                    &u_loc[offset..offset + len],
                    false,
                    &mut scratch,
                    &mut v,
                );
                vals.push(v);
                offset += len;
            }
            let mut weighted: Vec<Vec<f64>> = vec![vec![0.0; nq_tot]; dim];
            for q in 0..nq_tot {
                let base = (e * nq_tot + q) * ns;
                for r in 0..dim {
                    let mut s = 0.0;
                    for c in 0..dim {
                        s += self.factors[base + sym_index(dim, r, c)] * vals[c][q];
                    }
                    weighted[r][q] = s;
                }
            }
            let mut out = vec![0.0; self.space.n_local()];
            let mut offset = 0;
            let mut reduced = Vec::new();
            for c in 0..dim {
                let len = shapes.comp_len(c);
                reduce_component(shapes, c, &weighted[c], false, &mut scratch, &mut reduced);
                out[offset..offset + len].copy_from_slice(&reduced);
                offset += len;
            }
            out
        });
        y.fill(0.0);
        for (e, loc) in locals.iter().enumerate() {
            self.space.scatter_add(e, loc, y);
        }
    }

    /// Exact diagonal, assembled without forming the matrix (squared shape
    /// contractions against the diagonal geometric factors).
    pub fn diagonal(&self) -> Vec<f64> {
        let shapes = &*self.shapes;
        let dim = shapes.dim;
        let ns = nsym(dim);
        let nq_tot = self.nq_tot;
        let e_p_sq = squared_transpose(&shapes.e_p);
        let e_h_sq = squared_transpose(&shapes.e_h);
        let mut diag = vec![0.0; self.space.n_dofs()];
        let locals = map_elements(self.space.n_elements(), |e| {
            let mut out = vec![0.0; self.space.n_local()];
            let mut scratch = Vec::new();
            let mut reduced = Vec::new();
            let mut offset = 0;
            for c in 0..dim {
                let len = shapes.comp_len(c);
                reduced.clear();
                reduced.extend(
                    (0..nq_tot)
                        .map(|q| self.factors[(e * nq_tot + q) * ns + sym_index(dim, c, c)]),
                );
                let mut dims = shapes.quad_dims();
                for axis in 0..dim {
                    core::mem::swap(&mut reduced, &mut scratch);
                    let m = if axis == c { &e_p_sq } else { &e_h_sq };
                    dims = contract_axis(m, &scratch, dims, axis, &mut reduced);
                }
                out[offset..offset + len].copy_from_slice(&reduced);
                offset += len;
            }
            out
        });
        for (e, loc) in locals.iter().enumerate() {
            // orientation signs square away
            let l2g = self.space.local_to_global(e);
            for (l, &g) in l2g.iter().enumerate() {
                diag[g] += loc[l];
            }
        }
        diag
    }
}

/// Matrix-free block-diagonal `L²` mass operator `(α q, r)`.
pub struct L2MassOp {
    space: Arc<L2Space>,
    shapes: Arc<ElemShapes>,
    /// `w·α/det` per element and quadrature point.
    factors: Vec<f64>,
    nq_tot: usize,
}

pub fn assemble_l2_mass(
    geom: &ElementGeometry,
    space: Arc<L2Space>,
    alpha: &Coefficient,
) -> Result<L2MassOp> {
    let nq_tot = geom.nq_total();
    let mut factors = vec![0.0; geom.n_elements * nq_tot];
    for e in 0..geom.n_elements {
        for q in 0..nq_tot {
            let a = alpha.eval(e, geom.phys(e, q));
            check_positive("alpha", a, e)?;
            factors[e * nq_tot + q] = geom.weight(q) * a / geom.det(e, q);
        }
    }
    Ok(L2MassOp { space, shapes: geom.shapes.clone(), factors, nq_tot })
}

/// Same quadrature data but without the positivity check; used for the Darcy
/// `(2,2)`-block where `γ` may be zero.
pub fn assemble_l2_mass_semidefinite(
    geom: &ElementGeometry,
    space: Arc<L2Space>,
    gamma: &Coefficient,
) -> Result<L2MassOp> {
    let nq_tot = geom.nq_total();
    let mut factors = vec![0.0; geom.n_elements * nq_tot];
    for e in 0..geom.n_elements {
        for q in 0..nq_tot {
            let g = gamma.eval(e, geom.phys(e, q));
            if g < 0.0 {
                return Err(Error::Coefficient(format!(
                    "negative gamma = {g:.3e} sampled in element {e}"
                )));
            }
            factors[e * nq_tot + q] = geom.weight(q) * g / geom.det(e, q);
        }
    }
    Ok(L2MassOp { space, shapes: geom.shapes.clone(), factors, nq_tot })
}

impl L2MassOp {
    pub fn space(&self) -> &Arc<L2Space> {
        &self.space
    }

    pub fn shapes(&self) -> &Arc<ElemShapes> {
        &self.shapes
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    pub fn factors(&self, e: usize) -> &[f64] {
        &self.factors[e * self.nq_tot..(e + 1) * self.nq_tot]
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.space.n_dofs());
        assert_eq!(y.len(), self.space.n_dofs());
        let shapes = &*self.shapes;
        let locals = map_elements(self.space.n_elements(), |e| {
            let mut scratch = Vec::new();
            let mut vals = Vec::new();
            let block = &x[self.space.element_range(e)];
            eval_l2(&shapes.e_h, shapes.dim, block, &mut scratch, &mut vals);
            let f = self.factors(e);
            for q in 0..self.nq_tot {
                vals[q] *= f[q];
            }
            let mut out = Vec::new();
            reduce_l2(&shapes.e_h_t, shapes.dim, shapes.nq, &vals, &mut scratch, &mut out);
            out
        });
        for (e, loc) in locals.iter().enumerate() {
            y[self.space.element_range(e)].copy_from_slice(loc);
        }
    }

    /// Exact diagonal without forming the blocks.
    pub fn diagonal(&self) -> Vec<f64> {
        let shapes = &*self.shapes;
        let e_h_sq = squared_transpose(&shapes.e_h);
        let mut diag = vec![0.0; self.space.n_dofs()];
        for e in 0..self.space.n_elements() {
            let mut scratch = Vec::new();
            let mut reduced: Vec<f64> = self.factors(e).to_vec();
            let mut dims = shapes.quad_dims();
            for axis in 0..shapes.dim {
                core::mem::swap(&mut reduced, &mut scratch);
                dims = contract_axis(&e_h_sq, &scratch, dims, axis, &mut reduced);
            }
            diag[self.space.element_range(e)].copy_from_slice(&reduced);
        }
        diag
    }

    /// Dense element block in the discretization (histopolation) basis.
    pub fn dense_block(&self, e: usize) -> DenseMatrix {
        self.dense_block_with(e, &self.shapes.e_h)
    }

    /// Dense element block with an arbitrary 1D basis evaluation matrix
    /// (`nq × p`); used by the basis-conditioning studies and the
    /// Gauss–Legendre local solver.
    pub fn dense_block_with(&self, e: usize, basis: &DenseMatrix) -> DenseMatrix {
        let shapes = &*self.shapes;
        let dim = shapes.dim;
        let p = basis.cols();
        let n = p.pow(dim as u32);
        let f = self.factors(e);
        let qd = shapes.quad_dims();
        let mut m = DenseMatrix::zeros(n, n);
        let mut vals = vec![0.0; n];
        for q in 0..self.nq_tot {
            let fq = f[q];
            let (q0, q1, q2) = (q % qd[0], (q / qd[0]) % qd[1], q / (qd[0] * qd[1]));
            for (l, v) in vals.iter_mut().enumerate() {
                let (l0, l1, l2) = (l % p, (l / p) % p, l / (p * p));
                let mut t = basis[(q0, l0)] * basis[(q1, l1)];
                if dim == 3 {
                    t *= basis[(q2, l2)];
                }
                *v = t;
            }
            for i in 0..n {
                let vi = fq * vals[i];
                if vi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    m[(i, j)] += vi * vals[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                let v = m[(i, j)];
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Diagonal of one element block in an arbitrary basis.
    pub fn block_diagonal_with(&self, e: usize, basis: &DenseMatrix) -> Vec<f64> {
        let shapes = &*self.shapes;
        let sq = squared_transpose(basis);
        let mut scratch = Vec::new();
        let mut reduced: Vec<f64> = self.factors(e).to_vec();
        let mut dims = shapes.quad_dims();
        for axis in 0..shapes.dim {
            core::mem::swap(&mut reduced, &mut scratch);
            dims = contract_axis(&sq, &scratch, dims, axis, &mut reduced);
        }
        reduced
    }

    /// Sum-factorized apply of one element block in an arbitrary basis.
    pub fn apply_block_with(
        &self,
        e: usize,
        basis: &DenseMatrix,
        basis_t: &DenseMatrix,
        x: &[f64],
        out: &mut Vec<f64>,
    ) {
        let shapes = &*self.shapes;
        let mut scratch = Vec::new();
        let mut vals = Vec::new();
        eval_l2(basis, shapes.dim, x, &mut scratch, &mut vals);
        let f = self.factors(e);
        for q in 0..self.nq_tot {
            vals[q] *= f[q];
        }
        reduce_l2(basis_t, shapes.dim, shapes.nq, &vals, &mut scratch, out);
    }
}

/// Matrix-free weighted divergence form `(α ∇·u, q)` assembled by direct
/// quadrature (independent of the `W_α · D` composition it must equal).
pub struct DivFormOp {
    rt: Arc<RtSpace>,
    l2: Arc<L2Space>,
    shapes: Arc<ElemShapes>,
    factors: Vec<f64>,
    nq_tot: usize,
}

pub fn assemble_div_form(
    geom: &ElementGeometry,
    rt: Arc<RtSpace>,
    l2: Arc<L2Space>,
    alpha: &Coefficient,
) -> Result<DivFormOp> {
    let w = assemble_l2_mass(geom, l2.clone(), alpha)?;
    Ok(DivFormOp { rt, l2, shapes: geom.shapes.clone(), factors: w.factors, nq_tot: w.nq_tot })
}

impl DivFormOp {
    /// y = B x (RT coefficients to `L²` duals).
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rt.n_dofs());
        assert_eq!(y.len(), self.l2.n_dofs());
        let shapes = &*self.shapes;
        let dim = shapes.dim;
        let locals = map_elements(self.rt.n_elements(), |e| {
            let mut u_loc = vec![0.0; self.rt.n_local()];
            self.rt.gather_local(e, x, &mut u_loc);
            let mut scratch = Vec::new();
            let mut div_vals = vec![0.0; self.nq_tot];
            let mut v = Vec::new();
            let mut offset = 0;
            for c in 0..dim {
                let len = shapes.comp_len(c);
                eval_component(shapes, c, &u_loc[offset..offset + len], true, &mut scratch, &mut v);
                for q in 0..self.nq_tot {
                    div_vals[q] += v[q];
                }
                offset += len;
            }
            let f = &self.factors[e * self.nq_tot..(e + 1) * self.nq_tot];
            for q in 0..self.nq_tot {
                div_vals[q] *= f[q];
            }
            let mut out = Vec::new();
            reduce_l2(&shapes.e_h_t, dim, shapes.nq, &div_vals, &mut scratch, &mut out);
            out
        });
        for (e, loc) in locals.iter().enumerate() {
            y[self.l2.element_range(e)].copy_from_slice(loc);
        }
    }

    /// y = Bᵀ x (`L²` coefficients to RT duals).
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.l2.n_dofs());
        assert_eq!(y.len(), self.rt.n_dofs());
        let shapes = &*self.shapes;
        let dim = shapes.dim;
        let locals = map_elements(self.rt.n_elements(), |e| {
            let block = &x[self.l2.element_range(e)];
            let mut scratch = Vec::new();
            let mut vals = Vec::new();
            eval_l2(&shapes.e_h, dim, block, &mut scratch, &mut vals);
            let f = &self.factors[e * self.nq_tot..(e + 1) * self.nq_tot];
            for q in 0..self.nq_tot {
                vals[q] *= f[q];
            }
            let mut out = vec![0.0; self.rt.n_local()];
            let mut reduced = Vec::new();
            let mut offset = 0;
            for c in 0..dim {
                let len = shapes.comp_len(c);
                reduce_component(shapes, c, &vals, true, &mut scratch, &mut reduced);
                out[offset..offset + len].copy_from_slice(&reduced);
                offset += len;
            }
            out
        });
        y.fill(0.0);
        for (e, loc) in locals.iter().enumerate() {
            self.rt.scatter_add(e, loc, y);
        }
    }
}

/// Primal grad–div operator `A = M_β + Dᵀ W_α D` acting on free RT DOFs.
pub struct GradDivOp {
    pub m: Arc<RtMassOp>,
    pub w: Arc<L2MassOp>,
    pub d: Arc<crate::csr::CsrMatrix>,
    pub restriction: Arc<DofRestriction>,
}

impl GradDivOp {
    pub fn n_free(&self) -> usize {
        self.restriction.n_free()
    }

    /// y = A x on reduced vectors.
    pub fn apply_reduced(&self, x: &[f64], y: &mut [f64]) {
        let n = self.restriction.n_full();
        let mut xf = vec![0.0; n];
        self.restriction.scatter(x, &mut xf);
        let mut mx = vec![0.0; n];
        self.m.apply(&xf, &mut mx);
        let nl2 = self.d.rows();
        let mut dx = vec![0.0; nl2];
        self.d.apply(&xf, &mut dx);
        let mut wdx = vec![0.0; nl2];
        self.w.apply(&dx, &mut wdx);
        let mut dtwdx = vec![0.0; n];
        self.d.apply_transpose(&wdx, &mut dtwdx);
        for (r, &g) in self.restriction.free_dofs().iter().enumerate() {
            y[r] = mx[g] + dtwdx[g];
        }
    }

    /// Exact diagonal of `A` on free DOFs (mass diagonal plus the
    /// divergence-stiffness diagonal, via squared contractions).
    pub fn diagonal_reduced(&self) -> Vec<f64> {
        let mut diag = self.m.diagonal();
        let shapes = &*self.m.shapes;
        let dim = shapes.dim;
        let nq_tot = self.m.nq_tot;
        let space = &self.m.space;
        let e_h_sq = squared_transpose(&shapes.e_h);
        let d_p_sq = squared_transpose(&shapes.d_p);
        for e in 0..space.n_elements() {
            let f = self.w.factors(e);
            debug_assert_eq!(f.len(), nq_tot);
            let mut offset = 0;
            let mut scratch = Vec::new();
            let mut reduced = Vec::new();
            for c in 0..dim {
                let len = shapes.comp_len(c);
                reduced.clear();
                reduced.extend_from_slice(f);
                let mut dims = shapes.quad_dims();
                for axis in 0..dim {
                    core::mem::swap(&mut reduced, &mut scratch);
                    let m = if axis == c { &d_p_sq } else { &e_h_sq };
                    dims = contract_axis(m, &scratch, dims, axis, &mut reduced);
                }
                let l2g = space.local_to_global(e);
                for l in 0..len {
                    diag[l2g[offset + l]] += reduced[l];
                }
                offset += len;
            }
        }
        self.restriction.reduce(&diag)
    }
}

/// Dual vector `(f, v)` for a vector-valued source `f`.
pub fn assemble_rt_rhs(
    geom: &ElementGeometry,
    rt: &RtSpace,
    f: &dyn Fn(&[f64; 3]) -> [f64; 3],
) -> Vec<f64> {
    let shapes = &*geom.shapes;
    let dim = shapes.dim;
    let nq_tot = geom.nq_total();
    let mut out = vec![0.0; rt.n_dofs()];
    for e in 0..rt.n_elements() {
        // t_c(q) = w_q (Jᵀ f)_c; the Piola 1/det cancels the volume element
        let mut tvals: Vec<Vec<f64>> = vec![vec![0.0; nq_tot]; dim];
        for q in 0..nq_tot {
            let fx = f(geom.phys(e, q));
            let j = geom.jac(e, q);
            let w = geom.weight(q);
            for c in 0..dim {
                let mut s = 0.0;
                for r in 0..dim {
                    s += j[r * 3 + c] * fx[r];
                }
                tvals[c][q] = w * s;
            }
        }
        let mut loc = vec![0.0; rt.n_local()];
        let mut scratch = Vec::new();
        let mut reduced = Vec::new();
        let mut offset = 0;
        for c in 0..dim {
            let len = shapes.comp_len(c);
            reduce_component(shapes, c, &tvals[c], false, &mut scratch, &mut reduced);
            loc[offset..offset + len].copy_from_slice(&reduced);
            offset += len;
        }
        rt.scatter_add(e, &loc, &mut out);
    }
    out
}

/// Dual vector `(g, w)` for a scalar source `g`.
pub fn assemble_l2_rhs(
    geom: &ElementGeometry,
    l2: &L2Space,
    g: &dyn Fn(&[f64; 3]) -> f64,
) -> Vec<f64> {
    let shapes = &*geom.shapes;
    let nq_tot = geom.nq_total();
    let mut out = vec![0.0; l2.n_dofs()];
    for e in 0..l2.n_elements() {
        // the integral-preserving map cancels det J here as well
        let vals: Vec<f64> = (0..nq_tot).map(|q| geom.weight(q) * g(geom.phys(e, q))).collect();
        let mut scratch = Vec::new();
        let mut loc = Vec::new();
        reduce_l2(&shapes.e_h_t, shapes.dim, shapes.nq, &vals, &mut scratch, &mut loc);
        out[l2.element_range(e)].copy_from_slice(&loc);
    }
    out
}

/// `‖u_h - u‖_{L²}` of an RT coefficient vector against an analytic field.
pub fn rt_l2_error(
    geom: &ElementGeometry,
    rt: &RtSpace,
    u: &[f64],
    exact: &dyn Fn(&[f64; 3]) -> [f64; 3],
) -> f64 {
    let shapes = &*geom.shapes;
    let dim = shapes.dim;
    let nq_tot = geom.nq_total();
    let mut err2 = 0.0;
    let mut u_loc = vec![0.0; rt.n_local()];
    for e in 0..rt.n_elements() {
        rt.gather_local(e, u, &mut u_loc);
        let mut scratch = Vec::new();
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut offset = 0;
        for c in 0..dim {
            let len = shapes.comp_len(c);
            let mut v = Vec::new();
            eval_component(shapes, c, &u_loc[offset..offset + len], false, &mut scratch, &mut v);
            vals.push(v);
            offset += len;
        }
        for q in 0..nq_tot {
            let det = geom.det(e, q);
            let j = geom.jac(e, q);
            let ex = exact(geom.phys(e, q));
            let mut d2 = 0.0;
            for r in 0..dim {
                let mut uh = 0.0;
                for c in 0..dim {
                    uh += j[r * 3 + c] * vals[c][q];
                }
                uh /= det;
                d2 += (uh - ex[r]) * (uh - ex[r]);
            }
            err2 += geom.weight(q) * det * d2;
        }
    }
    fmath::sqrt(err2)
}

/// Values of all local RT basis functions (and their reference divergences)
/// at the quadrature points; used by the dense oracles.
pub struct RtBasisTable {
    pub n_local: usize,
    pub nq_tot: usize,
    dim: usize,
    value: Vec<f64>,
    div: Vec<f64>,
}

impl RtBasisTable {
    pub fn build(shapes: &ElemShapes) -> Self {
        let dim = shapes.dim;
        let qd = shapes.quad_dims();
        let nq_tot = shapes.nq_total();
        let n_local: usize = (0..dim).map(|c| shapes.comp_len(c)).sum();
        let mut value = vec![0.0; nq_tot * n_local * dim];
        let mut div = vec![0.0; nq_tot * n_local];
        let mut l = 0;
        for c in 0..dim {
            let dims = shapes.comp_dims(c);
            for l2 in 0..dims[2] {
                for l1 in 0..dims[1] {
                    for l0 in 0..dims[0] {
                        for q in 0..nq_tot {
                            let qs = [q % qd[0], (q / qd[0]) % qd[1], q / (qd[0] * qd[1])];
                            let ls = [l0, l1, l2];
                            let mut v = 1.0;
                            let mut dv = 1.0;
                            for a in 0..dim {
                                if a == c {
                                    v *= shapes.e_p[(qs[a], ls[a])];
                                    dv *= shapes.d_p[(qs[a], ls[a])];
                                } else {
                                    v *= shapes.e_h[(qs[a], ls[a])];
                                    dv *= shapes.e_h[(qs[a], ls[a])];
                                }
                            }
                            value[(q * n_local + l) * dim + c] = v;
                            div[q * n_local + l] = dv;
                        }
                        l += 1;
                    }
                }
            }
        }
        Self { n_local, nq_tot, dim, value, div }
    }

    #[inline]
    pub fn value(&self, q: usize, l: usize, comp: usize) -> f64 {
        self.value[(q * self.n_local + l) * self.dim + comp]
    }

    #[inline]
    pub fn div(&self, q: usize, l: usize) -> f64 {
        self.div[q * self.n_local + l]
    }
}

/// Direct dense assembly of `(β u, v)` (pairwise quadrature oracle).
pub fn dense_rt_mass(
    geom: &ElementGeometry,
    rt: &RtSpace,
    beta: &Coefficient,
) -> Result<DenseMatrix> {
    let shapes = &*geom.shapes;
    let dim = shapes.dim;
    let table = RtBasisTable::build(shapes);
    let n = rt.n_dofs();
    let mut m = DenseMatrix::zeros(n, n);
    let nq_tot = geom.nq_total();
    let nl = rt.n_local();
    for e in 0..rt.n_elements() {
        let mut local = DenseMatrix::zeros(nl, nl);
        let mut mapped = vec![0.0; nl * dim];
        for q in 0..nq_tot {
            let b = beta.eval(e, geom.phys(e, q));
            check_positive("beta", b, e)?;
            let det = geom.det(e, q);
            let j = geom.jac(e, q);
            let scale = geom.weight(q) * b / det;
            for l in 0..nl {
                for r in 0..dim {
                    let mut s = 0.0;
                    for c in 0..dim {
                        s += j[r * 3 + c] * table.value(q, l, c);
                    }
                    mapped[l * dim + r] = s;
                }
            }
            for i in 0..nl {
                for jj in 0..=i {
                    let mut dot = 0.0;
                    for r in 0..dim {
                        dot += mapped[i * dim + r] * mapped[jj * dim + r];
                    }
                    local[(i, jj)] += scale * dot;
                }
            }
        }
        let l2g = rt.local_to_global(e);
        let sg = rt.orientation(e);
        for i in 0..nl {
            for jj in 0..nl {
                let v = if jj <= i { local[(i, jj)] } else { local[(jj, i)] };
                m[(l2g[i], l2g[jj])] += (sg[i] * sg[jj]) as f64 * v;
            }
        }
    }
    Ok(m)
}

/// Direct dense assembly of the global `L²` mass (block diagonal).
pub fn dense_l2_mass(w: &L2MassOp) -> DenseMatrix {
    let n = w.n_dofs();
    let mut m = DenseMatrix::zeros(n, n);
    for e in 0..w.space.n_elements() {
        let block = w.dense_block(e);
        let r = w.space.element_range(e);
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                m[(r.start + i, r.start + j)] = block[(i, j)];
            }
        }
    }
    m
}

/// Direct dense assembly of `(α ∇·u, q)` (oracle for `B = W_α D`).
pub fn dense_div_form(
    geom: &ElementGeometry,
    rt: &RtSpace,
    l2: &L2Space,
    alpha: &Coefficient,
) -> Result<DenseMatrix> {
    let shapes = &*geom.shapes;
    let table = RtBasisTable::build(shapes);
    let p = shapes.p;
    let dim = shapes.dim;
    let nq_tot = geom.nq_total();
    let qd = shapes.quad_dims();
    let n_l2 = shapes.n_l2_local();
    let mut m = DenseMatrix::zeros(l2.n_dofs(), rt.n_dofs());
    for e in 0..rt.n_elements() {
        let l2g = rt.local_to_global(e);
        let sg = rt.orientation(e);
        for q in 0..nq_tot {
            let a = alpha.eval(e, geom.phys(e, q));
            check_positive("alpha", a, e)?;
            let scale = geom.weight(q) * a / geom.det(e, q);
            let (q0, q1, q2) = (q % qd[0], (q / qd[0]) % qd[1], q / (qd[0] * qd[1]));
            for i in 0..n_l2 {
                let (i0, i1, i2) = (i % p, (i / p) % p, i / (p * p));
                let mut test = shapes.e_h[(q0, i0)] * shapes.e_h[(q1, i1)];
                if dim == 3 {
                    test *= shapes.e_h[(q2, i2)];
                }
                let gi = l2.global_of(e, i);
                for l in 0..rt.n_local() {
                    let v = scale * test * table.div(q, l);
                    m[(gi, l2g[l])] += sg[l] as f64 * v;
                }
            }
        }
    }
    Ok(m)
}

/// Direct dense assembly of `(α ∇·u, ∇·v) + (β u, v)` — the primal grad–div
/// form, as an independent oracle for `M_β + Dᵀ W_α D`.
pub fn dense_grad_div(
    geom: &ElementGeometry,
    rt: &RtSpace,
    alpha: &Coefficient,
    beta: &Coefficient,
) -> Result<DenseMatrix> {
    let shapes = &*geom.shapes;
    let table = RtBasisTable::build(shapes);
    let mut m = dense_rt_mass(geom, rt, beta)?;
    let nq_tot = geom.nq_total();
    let nl = rt.n_local();
    for e in 0..rt.n_elements() {
        let l2g = rt.local_to_global(e);
        let sg = rt.orientation(e);
        for q in 0..nq_tot {
            let a = alpha.eval(e, geom.phys(e, q));
            let scale = geom.weight(q) * a / geom.det(e, q);
            for i in 0..nl {
                let di = table.div(q, i);
                if di == 0.0 {
                    continue;
                }
                for j in 0..nl {
                    m[(l2g[i], l2g[j])] += (sg[i] * sg[j]) as f64 * scale * di * table.div(q, j);
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{canonical_skewed_element, cartesian_mesh, skew_mesh};
    use crate::spaces::{build_l2_space, build_rt_space};
    use crate::tensor1d::{basis_values, BasisTag};

    fn unit_quad() -> Mesh {
        cartesian_mesh(2, &[1, 1], &[[0.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    fn setup(mesh: &Mesh, p: usize) -> (ElementGeometry, Arc<RtSpace>, Arc<L2Space>) {
        let geom = precompute_geometry(mesh, p).unwrap();
        let rt = Arc::new(build_rt_space(mesh, p).unwrap());
        let l2 = Arc::new(build_l2_space(mesh, p).unwrap());
        (geom, rt, l2)
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
    fn rt0_mass_on_unit_square_is_analytic() {
        let mesh = unit_quad();
        let (geom, rt, _) = setup(&mesh, 1);
        let m = dense_rt_mass(&geom, &rt, &Coefficient::Constant(1.0)).unwrap();
        // x-direction block: basis (1-x, 0), (x, 0) -> (1/6)[[2, 1], [1, 2]]
        assert!((m[(0, 0)] - 2.0 / 6.0).abs() < 1e-13);
        assert!((m[(0, 1)] - 1.0 / 6.0).abs() < 1e-13);
        assert!((m[(1, 1)] - 2.0 / 6.0).abs() < 1e-13);
        // x/y blocks decouple on axis-aligned elements
        assert!(m[(0, 2)].abs() < 1e-14);
    }

    #[test]
    fn constant_coefficient_scales_linearly() {
        let mesh = canonical_skewed_element(2).unwrap();
        let (geom, rt, _) = setup(&mesh, 2);
        let m1 = dense_rt_mass(&geom, &rt, &Coefficient::Constant(1.0)).unwrap();
        let mut m2 = dense_rt_mass(&geom, &rt, &Coefficient::Constant(2.0)).unwrap();
        m2.scale(0.5);
        assert!(m1.max_abs_diff(&m2) < 1e-13);
    }

    #[test]
    fn matrix_free_mass_matches_dense_oracle() {
        let mesh =
            skew_mesh(&cartesian_mesh(2, &[2, 2], &[[0.0, 1.0], [0.0, 1.0]]).unwrap(), &|v| {
                [0.08 * fmath::sin(3.0 * v[1]), 0.05 * v[0] * v[1], 0.0]
            })
            .unwrap();
        let (geom, rt, _) = setup(&mesh, 3);
        let beta = Coefficient::function(|x| 1.0 + 0.5 * x[0] + 0.25 * x[1]);
        let op = assemble_rt_mass(&geom, rt.clone(), &beta).unwrap();
        let dense = dense_rt_mass(&geom, &rt, &beta).unwrap();
        let x = rng_vec(rt.n_dofs(), 7);
        let mut y = vec![0.0; rt.n_dofs()];
        op.apply(&x, &mut y);
        let mut y_dense = vec![0.0; rt.n_dofs()];
        dense.matvec(&x, &mut y_dense);
        let scale = y_dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in y.iter().zip(y_dense.iter()) {
            assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn mass_diagonal_matches_dense() {
        let mesh = canonical_skewed_element(3).unwrap();
        let (geom, rt, _) = setup(&mesh, 2);
        let beta = Coefficient::Constant(1.3);
        let op = assemble_rt_mass(&geom, rt.clone(), &beta).unwrap();
        let dense = dense_rt_mass(&geom, &rt, &beta).unwrap();
        let diag = op.diagonal();
        for (i, d) in diag.iter().enumerate() {
            assert!((d - dense[(i, i)]).abs() < 1e-13 * dense[(i, i)].abs().max(1.0));
            assert!(*d > 0.0);
        }
    }

    #[test]
    fn l2_mass_unit_quad_p1_is_unit() {
        let mesh = unit_quad();
        let (geom, _, l2) = setup(&mesh, 1);
        let w = assemble_l2_mass(&geom, l2, &Coefficient::Constant(1.0)).unwrap();
        let block = w.dense_block(0);
        assert_eq!(block.rows(), 1);
        assert!((block[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn l2_mass_gl_basis_is_diagonal_on_boxes() {
        let mesh = cartesian_mesh(2, &[1, 1], &[[0.0, 2.0], [0.0, 0.7]]).unwrap();
        let p = 4;
        let (geom, _, l2) = setup(&mesh, p);
        let w = assemble_l2_mass(&geom, l2, &Coefficient::Constant(1.0)).unwrap();
        let gl = basis_values(BasisTag::GlNodal, p, &geom.shapes.quad.nodes).unwrap();
        let block = w.dense_block_with(0, &gl);
        let mut offdiag = 0.0f64;
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                if i != j {
                    offdiag = offdiag.max(block[(i, j)].abs());
                }
            }
        }
        assert!(offdiag <= 1e-13, "GL mass must be diagonal on parallelepipeds: {offdiag:.2e}");
    }

    #[test]
    fn l2_mass_not_diagonal_on_skewed_element() {
        let mesh = canonical_skewed_element(2).unwrap();
        let p = 3;
        let (geom, _, l2) = setup(&mesh, p);
        let w = assemble_l2_mass(&geom, l2, &Coefficient::Constant(1.0)).unwrap();
        for tag in [BasisTag::GllNodal, BasisTag::GlNodal, BasisTag::Histopolation] {
            let basis = basis_values(tag, p, &geom.shapes.quad.nodes).unwrap();
            let block = w.dense_block_with(0, &basis);
            let mut offdiag = 0.0f64;
            for i in 0..block.rows() {
                for j in 0..block.cols() {
                    if i != j {
                        offdiag = offdiag.max(block[(i, j)].abs());
                    }
                }
            }
            assert!(offdiag > 1e-8, "{tag:?} should not be diagonal on a skewed element");
        }
    }

    #[test]
    fn l2_apply_matches_dense_block_and_diagonal() {
        let mesh = canonical_skewed_element(2).unwrap();
        let (geom, _, l2) = setup(&mesh, 4);
        let alpha = Coefficient::function(|x| 1.0 + x[0] * x[1]);
        let w = assemble_l2_mass(&geom, l2.clone(), &alpha).unwrap();
        let x = rng_vec(l2.n_dofs(), 3);
        let mut y = vec![0.0; l2.n_dofs()];
        w.apply(&x, &mut y);
        let block = w.dense_block(0);
        let mut y_dense = vec![0.0; l2.n_dofs()];
        block.matvec(&x, &mut y_dense);
        for (a, b) in y.iter().zip(y_dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let diag = w.diagonal();
        for (i, d) in diag.iter().enumerate() {
            assert!((d - block[(i, i)]).abs() < 1e-13);
            assert!(*d > 0.0);
        }
    }

    #[test]
    fn symmetry_of_dense_assemblies() {
        let mesh = canonical_skewed_element(2).unwrap();
        let (geom, rt, l2) = setup(&mesh, 3);
        let alpha = Coefficient::Constant(0.7);
        let beta = Coefficient::Constant(2.0);
        let m = dense_rt_mass(&geom, &rt, &beta).unwrap();
        assert!(m.asymmetry() <= 1e-12);
        let w = assemble_l2_mass(&geom, l2, &alpha).unwrap();
        assert!(dense_l2_mass(&w).asymmetry() <= 1e-12);
        let a = dense_grad_div(&geom, &rt, &alpha, &beta).unwrap();
        assert!(a.asymmetry() <= 1e-12);
    }

    #[test]
    fn non_positive_coefficients_rejected() {
        let mesh = unit_quad();
        let (geom, rt, l2) = setup(&mesh, 2);
        assert!(matches!(
            assemble_rt_mass(&geom, rt, &Coefficient::Constant(-1.0)),
            Err(Error::Coefficient(_))
        ));
        assert!(matches!(
            assemble_l2_mass(&geom, l2, &Coefficient::Constant(0.0)),
            Err(Error::Coefficient(_))
        ));
    }

    #[test]
    fn normal_trace_is_conforming_across_shared_face() {
        // evaluate the normal trace of shared-face basis functions from both
        // sides of a two-element mesh
        let mesh =
            skew_mesh(&cartesian_mesh(2, &[2, 1], &[[0.0, 2.0], [0.0, 1.0]]).unwrap(), &|v| {
                [0.1 * v[1] * (2.0 - v[0]) * v[0], 0.07 * v[0], 0.0]
            })
            .unwrap();
        let p = 3;
        let rt = build_rt_space(&mesh, p).unwrap();
        for g in 0..rt.n_dofs() {
            let (axis, c) = rt.dof_key(g);
            if axis != 0 || c[0] != p {
                continue; // only shared-face x-normal DOFs
            }
            let mut coeff = vec![0.0; rt.n_dofs()];
            coeff[g] = 1.0;
            let pts = [0.12, 0.45, 0.83];
            let gll = crate::tensor1d::gauss_lobatto(p + 1).unwrap().nodes;
            let e_h = histopolation_values(p, &pts).unwrap();
            let mut traces: Vec<Vec<f64>> = Vec::new();
            for (e, xhat0) in [(0usize, 1.0f64), (1usize, 0.0f64)] {
                let mut loc = vec![0.0; rt.n_local()];
                rt.gather_local(e, &coeff, &mut loc);
                let e_p = interp_matrix(&gll, &[xhat0]).unwrap();
                let vals: Vec<f64> = (0..pts.len())
                    .map(|ti| {
                        let mut s = 0.0;
                        for j in 0..p {
                            for i in 0..=p {
                                s += loc[i + (p + 1) * j] * e_p[(0, i)] * e_h[(ti, j)];
                            }
                        }
                        s
                    })
                    .collect();
                traces.push(vals);
            }
            for (a, b) in traces[0].iter().zip(traces[1].iter()) {
                assert!((a - b).abs() < 1e-12, "normal trace jump at dof {g}");
            }
        }
    }

    #[test]
    fn diag_spectral_equivalence_bounded_in_p() {
        // κ(diag(M)⁻¹ M) stays bounded on the canonical skewed element
        let mesh = canonical_skewed_element(2).unwrap();
        let mut kappas = Vec::new();
        for p in 1..=8 {
            let (geom, rt, _) = setup(&mesh, p);
            let m = dense_rt_mass(&geom, &rt, &Coefficient::Constant(1.0)).unwrap();
            let d = DenseMatrix::from_fn(
                m.rows(),
                m.cols(),
                |i, j| if i == j { m[(i, i)] } else { 0.0 },
            );
            let vals = crate::dense::generalized_sym_eigenvalues(&m, &d).unwrap();
            kappas.push(vals.last().unwrap() / vals.first().unwrap());
        }
        let max_low: f64 = kappas[..4].iter().cloned().fold(0.0, f64::max);
        assert!(
            kappas[7] <= 2.0 * max_low,
            "κ at p=8 ({:.3}) must not exceed 2x the max over p<=4 ({:.3})",
            kappas[7],
            max_low
        );
    }

    #[test]
    fn rhs_constant_field_matches_face_integrals() {
        // (f, v) with f = (1, 0) on the unit square, p = 1: the two x-face
        // test functions integrate to 1/2 each
        let mesh = unit_quad();
        let (geom, rt, _) = setup(&mesh, 1);
        let rhs = assemble_rt_rhs(&geom, &rt, &|_| [1.0, 0.0, 0.0]);
        assert!((rhs[0] - 0.5).abs() < 1e-13);
        assert!((rhs[1] - 0.5).abs() < 1e-13);
        assert!(rhs[2].abs() < 1e-13);
        let g = assemble_l2_rhs(&geom, &build_l2_space(&mesh, 1).unwrap(), &|_| 3.0);
        assert!((g[0] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn l2_error_of_interpolated_constant_field_is_zero() {
        let mesh = cartesian_mesh(2, &[2, 2], &[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let p = 2;
        let (geom, rt, _) = setup(&mesh, p);
        // the constant field (1, 0): coefficients are physical face integrals
        // of the normal component, i.e. tangential GLL gap x element height
        let gll = crate::tensor1d::gauss_lobatto(p + 1).unwrap().nodes;
        let mut u = vec![0.0; rt.n_dofs()];
        for g in 0..rt.n_dofs() {
            let (axis, c) = rt.dof_key(g);
            if axis == 0 {
                let local_j = c[1] % p;
                u[g] = (gll[local_j + 1] - gll[local_j]) * 0.5;
            }
        }
        let err = rt_l2_error(&geom, &rt, &u, &|_| [1.0, 0.0, 0.0]);
        assert!(err < 1e-12, "interpolation of a constant must be exact: {err:.2e}");
    }

    #[test]
    fn subelement_volumes_sum_to_domain_volume() {
        let mesh = canonical_skewed_element(2).unwrap();
        let l2 = build_l2_space(&mesh, 3).unwrap();
        let vols = subelement_volumes(&mesh, &l2).unwrap();
        let total: f64 = vols.iter().sum();
        assert!((total - mesh.volume(6).unwrap()).abs() < 1e-10);
        assert!(vols.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn restriction_reduce_scatter_roundtrip() {
        let r = DofRestriction::eliminating(6, &[0, 3]);
        assert_eq!(r.n_free(), 4);
        let full = [9.0, 1.0, 2.0, 9.0, 3.0, 4.0];
        let red = r.reduce(&full);
        assert_eq!(red, alloc::vec![1.0, 2.0, 3.0, 4.0]);
        let mut back = [0.0; 6];
        r.scatter(&red, &mut back);
        assert_eq!(back, [0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }
}
