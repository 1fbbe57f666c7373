//! The topological discrete divergence in CSR form, its structural checks,
//! the refined-mesh equivalence, and assembly of the sparse approximate
//! Schur complement by two independent paths.
//!
//! `D` maps RT coefficients to the `L²` coefficients of the reference
//! divergence: entry `(i, j) = σ_loc σ_glob` for every subelement face
//! `j ∈ F(i)`, giving exactly `2d` nonzeros of ±1 per row regardless of the
//! polynomial degree or mesh geometry.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::csr::{triple_product, CsrMatrix};
use crate::error::Error;
use crate::mesh::Mesh;
use crate::operators::DofRestriction;
use crate::spaces::{build_l2_space, build_rt_space, L2Space, RtSpace};
use crate::Result;

/// Row-parallel construction of the discrete divergence in CSR format:
/// for each `L²` DOF, its `2d` adjacent subelement faces with signs
/// `σ_loc σ_glob`.
pub fn build_divergence(rt: &RtSpace, l2: &L2Space) -> Result<CsrMatrix> {
    if rt.dim != l2.dim || rt.degree != l2.degree || rt.n_elements() != l2.n_elements() {
        return Err(Error::Shape(format!(
            "mismatched spaces: RT (dim {}, p {}) vs L2 (dim {}, p {})",
            rt.dim, rt.degree, l2.dim, l2.degree
        )));
    }
    let dim = rt.dim;
    let topo = rt.topology();
    let n = l2.n_dofs();
    let rows = crate::parallel::map_elements(n, |i| {
        let e = l2.element_of(i);
        let i_loc = l2.local_of(i);
        let l2g = rt.local_to_global(e);
        let sg = rt.orientation(e);
        let mut row: Vec<(usize, f64)> = topo
            .faces_of(i_loc)
            .iter()
            .map(|&(j_loc, s_loc)| (l2g[j_loc], (s_loc * sg[j_loc]) as f64))
            .collect();
        row.sort_by_key(|&(j, _)| j);
        row
    });
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n * 2 * dim);
    let mut values = Vec::with_capacity(n * 2 * dim);
    indptr.push(0);
    for row in rows {
        for (j, v) in row {
            indices.push(j);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    CsrMatrix::from_raw(n, rt.n_dofs(), indptr, indices, values)
}

/// Column structure report for the divergence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnReport {
    pub interior_columns: usize,
    pub boundary_columns: usize,
}

/// Verify that every interior column of `D` has exactly two nonzeros `{+1, -1}`
/// and every boundary column exactly one `±1`.
pub fn divergence_column_check(d: &CsrMatrix, rt: &RtSpace) -> Result<ColumnReport> {
    let dt = d.transpose();
    let mut interior = 0;
    let mut boundary = 0;
    for j in 0..dt.rows() {
        let (_, vals) = dt.row(j);
        for &v in vals {
            if v != 1.0 && v != -1.0 {
                return Err(Error::Structure(format!(
                    "column {j} carries a non-unit entry {v}"
                )));
            }
        }
        match vals.len() {
            1 => {
                if !rt.is_boundary_dof(j) {
                    return Err(Error::Structure(format!(
                        "interior column {j} has a single nonzero"
                    )));
                }
                boundary += 1;
            }
            2 => {
                if rt.is_boundary_dof(j) {
                    return Err(Error::Structure(format!(
                        "boundary column {j} has two nonzeros"
                    )));
                }
                if vals[0] + vals[1] != 0.0 {
                    return Err(Error::Structure(format!(
                        "column {j} signs do not cancel: {} and {}",
                        vals[0], vals[1]
                    )));
                }
                interior += 1;
            }
            k => {
                return Err(Error::Structure(format!("column {j} has {k} nonzeros")));
            }
        }
    }
    Ok(ColumnReport { interior_columns: interior, boundary_columns: boundary })
}

/// Verify that `D` coincides with the lowest-order divergence on the
/// Gauss–Lobatto-refined mesh, under the canonical lattice-key bijection of
/// both DOF numberings.
pub fn refined_mesh_equivalence(d: &CsrMatrix, mesh: &Mesh, p: usize) -> Result<bool> {
    let dim = mesh.dim();
    let cells = mesh.cells();
    let refined_cells: Vec<usize> = (0..dim).map(|a| cells[a] * p).collect();
    let bounds = vec![[0.0, 1.0]; dim];
    // geometry is irrelevant: D is topological
    let refined = crate::mesh::cartesian_mesh(dim, &refined_cells, &bounds)?;
    let rt_lo = build_rt_space(&refined, 1)?;
    let l2_lo = build_l2_space(&refined, 1)?;
    let d_lo = build_divergence(&rt_lo, &l2_lo)?;

    let rt_hi = build_rt_space(mesh, p)?;
    let l2_hi = build_l2_space(mesh, p)?;
    if d.rows() != d_lo.rows() || d.cols() != d_lo.cols() {
        return Err(Error::Mapping(format!(
            "dimension mismatch: {}x{} vs refined {}x{}",
            d.rows(),
            d.cols(),
            d_lo.rows(),
            d_lo.cols()
        )));
    }

    // face-key -> column bijection
    let mut lo_col_of: BTreeMap<(u8, [usize; 3]), usize> = BTreeMap::new();
    for g in 0..rt_lo.n_dofs() {
        lo_col_of.insert(rt_lo.dof_key(g), g);
    }
    let mut col_map = vec![0usize; rt_hi.n_dofs()];
    for g in 0..rt_hi.n_dofs() {
        let key = rt_hi.dof_key(g);
        col_map[g] = *lo_col_of
            .get(&key)
            .ok_or_else(|| Error::Mapping(format!("no refined face for key {key:?}")))?;
    }

    // cell-key -> row bijection
    let mut lo_row_of: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for g in 0..l2_lo.n_dofs() {
        lo_row_of.insert(l2_lo.cell_key(g, &refined), g);
    }
    for i in 0..d.rows() {
        let key = l2_hi.cell_key(i, mesh);
        let i_lo = *lo_row_of
            .get(&key)
            .ok_or_else(|| Error::Mapping(format!("no refined cell for key {key:?}")))?;
        let (cols, vals) = d.row(i);
        let (cols_lo, vals_lo) = d_lo.row(i_lo);
        let mut mapped: Vec<(usize, f64)> =
            cols.iter().map(|&j| col_map[j]).zip(vals.iter().copied()).collect();
        mapped.sort_by_key(|&(j, _)| j);
        if mapped.len() != cols_lo.len() {
            return Ok(false);
        }
        for (k, &(j, v)) in mapped.iter().enumerate() {
            if j != cols_lo[k] || v != vals_lo[k] {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Approximate Schur complement from the explicit stencil (the production
/// path): `S̃_ii = c_i + Σ_{k ∈ F(i), free} M̃⁻¹_kk`, `S̃_ij = -M̃⁻¹_k` for
/// face neighbors, where `c` is the additive `(2,2)`-diagonal term.
pub fn build_schur_approx_with_c_diag(
    rt: &RtSpace,
    l2: &L2Space,
    c_diag: &[f64],
    m_diag: &[f64],
    restriction: &DofRestriction,
) -> Result<CsrMatrix> {
    if c_diag.len() != l2.n_dofs() {
        return Err(Error::Shape("c diagonal length mismatch".into()));
    }
    if m_diag.len() != rt.n_dofs() {
        return Err(Error::Shape("M diagonal length mismatch".into()));
    }
    for (k, &m) in m_diag.iter().enumerate() {
        if restriction.is_free(k) && m <= 0.0 {
            return Err(Error::Coefficient(format!("non-positive mass diagonal at DOF {k}")));
        }
    }
    let topo = rt.topology();
    // face DOF -> incident subelement volumes
    let mut incident: Vec<[usize; 2]> = vec![[usize::MAX; 2]; rt.n_dofs()];
    for e in 0..rt.n_elements() {
        let l2g = rt.local_to_global(e);
        for i_loc in 0..l2.n_per_element() {
            let i = l2.global_of(e, i_loc);
            for &(j_loc, _) in topo.faces_of(i_loc) {
                let g = l2g[j_loc];
                let slot = &mut incident[g];
                if slot[0] == usize::MAX {
                    slot[0] = i;
                } else if slot[0] != i {
                    slot[1] = i;
                }
            }
        }
    }
    let n = l2.n_dofs();
    let rows = crate::parallel::map_elements(n, |i| {
        let e = l2.element_of(i);
        let i_loc = l2.local_of(i);
        let l2g = rt.local_to_global(e);
        let mut diag = c_diag[i];
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(2 * topo.dim + 1);
        for &(j_loc, _) in topo.faces_of(i_loc) {
            let k = l2g[j_loc];
            if !restriction.is_free(k) {
                continue; // eliminated by essential conditions
            }
            let m_inv = 1.0 / m_diag[k];
            diag += m_inv;
            let pair = incident[k];
            let other = if pair[0] == i { pair[1] } else { pair[0] };
            if other != usize::MAX {
                row.push((other, -m_inv));
            }
        }
        row.push((i, diag));
        row.sort_by_key(|&(j, _)| j);
        row
    });
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for row in rows {
        for (j, v) in row {
            indices.push(j);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    CsrMatrix::from_raw(n, n, indptr, indices, values)
}

/// Grad–div form of the approximate Schur complement:
/// `S̃ = diag(W)⁻¹ + D M̃⁻¹ Dᵀ` from the two mass diagonals.
pub fn build_schur_approx(
    rt: &RtSpace,
    l2: &L2Space,
    w_diag: &[f64],
    m_diag: &[f64],
    restriction: &DofRestriction,
) -> Result<CsrMatrix> {
    if w_diag.iter().any(|&w| w <= 0.0) {
        return Err(Error::Coefficient("non-positive W diagonal entry".into()));
    }
    let c: Vec<f64> = w_diag.iter().map(|&w| 1.0 / w).collect();
    build_schur_approx_with_c_diag(rt, l2, &c, m_diag, restriction)
}

/// Oracle path for the same matrix: reduced triple product plus diagonal.
pub fn schur_approx_by_triple_product(
    d: &CsrMatrix,
    c_diag: &[f64],
    m_diag: &[f64],
    restriction: &DofRestriction,
) -> Result<CsrMatrix> {
    let d_red = d.select_columns(restriction.free_dofs());
    let m_inv: Vec<f64> =
        restriction.free_dofs().iter().map(|&g| 1.0 / m_diag[g]).collect();
    let tp = triple_product(&d_red, &m_inv)?;
    let shift = CsrMatrix::from_diag(c_diag);
    // add the diagonal term
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(tp.nnz() + c_diag.len());
    for i in 0..tp.rows() {
        let (cols, vals) = tp.row(i);
        for (j, v) in cols.iter().zip(vals) {
            trips.push((i, *j, *v));
        }
        let (_, sv) = shift.row(i);
        trips.push((i, i, sv[0]));
    }
    CsrMatrix::from_triplets(tp.rows(), tp.cols(), trips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient::Coefficient;
    use crate::csr::m_matrix_check;
    use crate::mesh::{cartesian_mesh, skew_mesh};
    use crate::operators::{assemble_l2_mass, assemble_rt_mass, precompute_geometry};
    use alloc::sync::Arc;

    fn unit_bounds(dim: usize) -> Vec<[f64; 2]> {
        vec![[0.0, 1.0]; dim]
    }

    fn spaces(mesh: &Mesh, p: usize) -> (RtSpace, L2Space) {
        (build_rt_space(mesh, p).unwrap(), build_l2_space(mesh, p).unwrap())
    }

    #[test]
    fn rt0_unit_quad_row_is_outward_signs() {
        let mesh = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 1);
        let d = build_divergence(&rt, &l2).unwrap();
        assert_eq!(d.rows(), 1);
        assert_eq!(d.cols(), 4);
        // lexicographic face order: left, right, bottom, top
        assert_eq!(d.row(0).1, &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn divergence_is_geometry_independent() {
        let mesh = cartesian_mesh(2, &[3, 2], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 3);
        let d = build_divergence(&rt, &l2).unwrap();
        let skewed = skew_mesh(&mesh, &|v| {
            [0.06 * crate::fmath::sin(2.0 * v[1]), -0.04 * v[0] * v[1], 0.0]
        })
        .unwrap();
        let (rt_s, l2_s) = spaces(&skewed, 3);
        let d_s = build_divergence(&rt_s, &l2_s).unwrap();
        assert_eq!(d.indptr(), d_s.indptr());
        assert_eq!(d.indices(), d_s.indices());
        assert_eq!(d.values(), d_s.values());
    }

    #[test]
    fn shared_face_column_has_opposite_signs() {
        let mesh = cartesian_mesh(2, &[2, 1], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 1);
        let d = build_divergence(&rt, &l2).unwrap();
        let dt = d.transpose();
        let shared: Vec<usize> =
            (0..rt.n_dofs()).filter(|&g| !rt.is_boundary_dof(g)).collect();
        assert_eq!(shared.len(), 1);
        let (_, vals) = dt.row(shared[0]);
        assert_eq!(vals.len(), 2);
        assert_eq!(vals[0] + vals[1], 0.0);
    }

    #[test]
    fn rows_have_2d_unit_entries() {
        for (dim, cells, p) in
            [(2usize, vec![2usize, 2], 3usize), (3, vec![2, 2, 2], 2), (3, vec![1, 1, 1], 4)]
        {
            let mesh = cartesian_mesh(dim, &cells, &unit_bounds(dim)).unwrap();
            let (rt, l2) = spaces(&mesh, p);
            let d = build_divergence(&rt, &l2).unwrap();
            for i in 0..d.rows() {
                let (cols, vals) = d.row(i);
                assert_eq!(cols.len(), 2 * dim);
                assert!(vals.iter().all(|&v| v == 1.0 || v == -1.0));
            }
            divergence_column_check(&d, &rt).unwrap();
        }
    }

    #[test]
    fn column_check_counts_single_element() {
        let mesh = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 2);
        let d = build_divergence(&rt, &l2).unwrap();
        let report = divergence_column_check(&d, &rt).unwrap();
        assert_eq!(report.interior_columns, 4);
        assert_eq!(report.boundary_columns, 8);
    }

    #[test]
    fn column_check_rejects_corruption() {
        let mesh = cartesian_mesh(2, &[2, 1], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 1);
        let d = build_divergence(&rt, &l2).unwrap();
        let mut values = d.values().to_vec();
        // flip the sign of one half of the shared column
        let shared = (0..rt.n_dofs()).find(|&g| !rt.is_boundary_dof(g)).unwrap();
        let pos = d.indices().iter().position(|&j| j == shared).unwrap();
        values[pos] = -values[pos];
        let corrupted = CsrMatrix::from_raw(
            d.rows(),
            d.cols(),
            d.indptr().to_vec(),
            d.indices().to_vec(),
            values,
        )
        .unwrap();
        assert!(divergence_column_check(&corrupted, &rt).is_err());
    }

    #[test]
    fn refined_equivalence_holds() {
        for (dim, cells, p) in [
            (2usize, vec![1usize, 1], 1usize),
            (2, vec![1, 1], 3),
            (2, vec![3, 2], 2),
            (3, vec![2, 2, 2], 2),
        ] {
            let mesh = cartesian_mesh(dim, &cells, &unit_bounds(dim)).unwrap();
            let (rt, l2) = spaces(&mesh, p);
            let d = build_divergence(&rt, &l2).unwrap();
            assert!(refined_mesh_equivalence(&d, &mesh, p).unwrap(), "dim={dim} p={p}");
        }
    }

    #[test]
    fn divergence_matches_div_form_through_mass() {
        // B_α x == W_α (D x) for the weighted divergence form
        let mesh = skew_mesh(&cartesian_mesh(2, &[2, 2], &unit_bounds(2)).unwrap(), &|v| {
            [0.05 * v[1] * v[1], 0.08 * v[0], 0.0]
        })
        .unwrap();
        let p = 3;
        let geom = precompute_geometry(&mesh, p).unwrap();
        let rt = Arc::new(build_rt_space(&mesh, p).unwrap());
        let l2 = Arc::new(build_l2_space(&mesh, p).unwrap());
        let alpha = Coefficient::function(|x| 1.0 + 0.3 * x[0] + 0.6 * x[1] * x[1]);
        let b = crate::operators::assemble_div_form(&geom, rt.clone(), l2.clone(), &alpha).unwrap();
        let w = assemble_l2_mass(&geom, l2.clone(), &alpha).unwrap();
        let d = build_divergence(&rt, &l2).unwrap();

        let mut state = 99u64;
        let x: Vec<f64> = (0..rt.n_dofs())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
            })
            .collect();
        let mut bx = vec![0.0; l2.n_dofs()];
        b.apply(&x, &mut bx);
        let mut dx = vec![0.0; l2.n_dofs()];
        d.apply(&x, &mut dx);
        let mut wdx = vec![0.0; l2.n_dofs()];
        w.apply(&dx, &mut wdx);
        let scale = bx.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        for (a, b) in bx.iter().zip(wdx.iter()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn schur_stencil_matches_triple_product() {
        let mesh = cartesian_mesh(2, &[2, 2], &unit_bounds(2)).unwrap();
        let p = 3;
        let geom = precompute_geometry(&mesh, p).unwrap();
        let rt = Arc::new(build_rt_space(&mesh, p).unwrap());
        let l2 = Arc::new(build_l2_space(&mesh, p).unwrap());
        let m = assemble_rt_mass(&geom, rt.clone(), &Coefficient::Constant(2.0)).unwrap();
        let w = assemble_l2_mass(&geom, l2.clone(), &Coefficient::Constant(0.7)).unwrap();
        let d = build_divergence(&rt, &l2).unwrap();
        let w_diag = w.diagonal();
        let m_diag = m.diagonal();
        for restriction in [
            DofRestriction::identity(rt.n_dofs()),
            DofRestriction::eliminating(
                rt.n_dofs(),
                &crate::spaces::boundary_dofs(&rt, &mesh, &[1, 2, 3, 4]).unwrap(),
            ),
        ] {
            let stencil = build_schur_approx(&rt, &l2, &w_diag, &m_diag, &restriction).unwrap();
            let c: Vec<f64> = w_diag.iter().map(|&w| 1.0 / w).collect();
            let oracle =
                schur_approx_by_triple_product(&d, &c, &m_diag, &restriction).unwrap();
            assert!(stencil.max_abs_diff(&oracle.prune(0.0)) <= 1e-13);
            assert!(m_matrix_check(&stencil).is_m_matrix);
            assert!(stencil.asymmetry() == 0.0);
        }
    }

    #[test]
    fn schur_single_cell_formula() {
        // one quad, p = 1: S̃ = [1/w + Σ 1/m_k]
        let mesh = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let (rt, l2) = spaces(&mesh, 1);
        let w_diag = [0.8];
        let m_diag = [0.3, 0.4, 0.5, 0.6];
        let restriction = DofRestriction::identity(4);
        let s = build_schur_approx(&rt, &l2, &w_diag, &m_diag, &restriction).unwrap();
        let expect = 1.0 / 0.8 + 1.0 / 0.3 + 1.0 / 0.4 + 1.0 / 0.5 + 1.0 / 0.6;
        assert!((s.row(0).1[0] - expect).abs() < 1e-13);
    }

    #[test]
    fn schur_uniform_mesh_reproduces_five_point_stencil() {
        // constant coefficients on a uniform mesh: interior rows are the
        // weighted 5-point Laplacian plus a positive diagonal shift
        let n = 4;
        let mesh = cartesian_mesh(2, &[n, n], &unit_bounds(2)).unwrap();
        let p = 1;
        let geom = precompute_geometry(&mesh, p).unwrap();
        let rt = Arc::new(build_rt_space(&mesh, p).unwrap());
        let l2 = Arc::new(build_l2_space(&mesh, p).unwrap());
        let m = assemble_rt_mass(&geom, rt.clone(), &Coefficient::Constant(1.0)).unwrap();
        let w = assemble_l2_mass(&geom, l2.clone(), &Coefficient::Constant(1.0)).unwrap();
        let restriction = DofRestriction::identity(rt.n_dofs());
        let s =
            build_schur_approx(&rt, &l2, &w.diagonal(), &m.diagonal(), &restriction).unwrap();
        // find an interior cell
        let i = l2.global_of(mesh.element_index([1, 1, 0]), 0);
        let (cols, vals) = s.row(i);
        assert_eq!(cols.len(), 5);
        let offdiags: Vec<f64> = cols
            .iter()
            .zip(vals)
            .filter(|(j, _)| **j != i)
            .map(|(_, v)| *v)
            .collect();
        // all four neighbor weights equal by symmetry
        for v in &offdiags {
            assert!((v - offdiags[0]).abs() < 1e-13);
            assert!(*v < 0.0);
        }
        let diag = vals[cols.iter().position(|&j| j == i).unwrap()];
        let row_sum: f64 = vals.iter().sum();
        assert!(row_sum > 0.0, "diagonal shift must keep the row sum positive");
        assert!(diag > -4.0 * offdiags[0]);
    }

    #[test]
    fn schur_zero_c_diag_keeps_nonnegative_row_sums() {
        // Darcy with γ = 0 and natural boundary: boundary rows strictly
        // positive, interior rows zero row sums
        let mesh = cartesian_mesh(2, &[3, 3], &unit_bounds(2)).unwrap();
        let p = 2;
        let geom = precompute_geometry(&mesh, p).unwrap();
        let rt = Arc::new(build_rt_space(&mesh, p).unwrap());
        let l2 = Arc::new(build_l2_space(&mesh, p).unwrap());
        let m = assemble_rt_mass(&geom, rt.clone(), &Coefficient::Constant(1.0)).unwrap();
        let c = vec![0.0; l2.n_dofs()];
        let restriction = DofRestriction::identity(rt.n_dofs());
        let s =
            build_schur_approx_with_c_diag(&rt, &l2, &c, &m.diagonal(), &restriction).unwrap();
        let report = m_matrix_check(&s);
        assert!(report.is_m_matrix);
        assert!(report.min_row_sum >= -1e-13);
        // a boundary cell row must have strictly positive sum
        let b = l2.global_of(0, 0);
        let (_, vals) = s.row(b);
        let sum: f64 = vals.iter().sum();
        assert!(sum > 1e-6);
    }
}
