//! Degree-`p` Raviart–Thomas and degree-`(p-1)` `L²` spaces in the
//! interpolation–histopolation basis: DOF enumeration, local-to-global maps,
//! and inter-element orientation signs.
//!
//! RT DOFs are identified with the faces of the Gauss–Lobatto-refined grid;
//! faces on shared element interfaces are deduplicated, owned by the
//! lower-index element, and carry a global orientation sign on each side.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::Error;
use crate::mesh::{subelement_topology, Mesh, SubelementTopology};
use crate::Result;

/// Raviart–Thomas space of degree `p` on a structured mesh.
#[derive(Debug, Clone)]
pub struct RtSpace {
    pub dim: usize,
    pub degree: usize,
    cells: [usize; 3],
    n_dofs: usize,
    n_local: usize,
    local_to_global: Vec<Vec<usize>>,
    /// `σ_glob` per (element, local DOF): sign relating the local +axis
    /// normal to the canonical global normal of the shared face.
    orientation: Vec<Vec<i8>>,
    /// Per global DOF: normal axis and face-lattice coordinates on the
    /// refined grid.
    dof_keys: Vec<(u8, [usize; 3])>,
    topo: SubelementTopology,
}

impl RtSpace {
    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_local(&self) -> usize {
        self.n_local
    }

    pub fn n_elements(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    pub fn local_to_global(&self, e: usize) -> &[usize] {
        &self.local_to_global[e]
    }

    pub fn orientation(&self, e: usize) -> &[i8] {
        &self.orientation[e]
    }

    pub fn topology(&self) -> &SubelementTopology {
        &self.topo
    }

    /// Normal axis and refined-grid lattice coordinates of a global DOF.
    pub fn dof_key(&self, g: usize) -> (u8, [usize; 3]) {
        self.dof_keys[g]
    }

    /// Whether a global DOF lies on the mesh boundary.
    pub fn is_boundary_dof(&self, g: usize) -> bool {
        let (axis, c) = self.dof_keys[g];
        let a = axis as usize;
        c[a] == 0 || c[a] == self.cells[a] * self.degree
    }

    /// Gather a local coefficient vector (applying orientation signs).
    pub fn gather_local(&self, e: usize, global: &[f64], local: &mut [f64]) {
        let l2g = &self.local_to_global[e];
        let sg = &self.orientation[e];
        for l in 0..self.n_local {
            local[l] = sg[l] as f64 * global[l2g[l]];
        }
    }

    /// Scatter-add a local result into the global vector.
    pub fn scatter_add(&self, e: usize, local: &[f64], global: &mut [f64]) {
        let l2g = &self.local_to_global[e];
        let sg = &self.orientation[e];
        for l in 0..self.n_local {
            global[l2g[l]] += sg[l] as f64 * local[l];
        }
    }
}

/// Enumerate global RT DOFs as subelement faces of the refined grid,
/// deduplicating faces shared across element interfaces.
pub fn build_rt_space(mesh: &Mesh, p: usize) -> Result<RtSpace> {
    if p < 1 {
        return Err(Error::InvalidOrder("RT space needs p >= 1".into()));
    }
    let dim = mesh.dim();
    let topo = subelement_topology(p, dim)?;
    let n_local = topo.n_faces;
    let nel = mesh.n_elements();

    let mut key_to_dof: BTreeMap<(u8, [usize; 3]), usize> = BTreeMap::new();
    let mut dof_keys: Vec<(u8, [usize; 3])> = Vec::new();
    let mut local_to_global = Vec::with_capacity(nel);
    let mut orientation = Vec::with_capacity(nel);

    for e in 0..nel {
        let ec = mesh.element_coords(e);
        let mut l2g = Vec::with_capacity(n_local);
        let mut sg = Vec::with_capacity(n_local);
        for l in 0..n_local {
            let (axis, fc) = topo.face_coords(l);
            let mut key = [0usize; 3];
            for b in 0..dim {
                key[b] = ec[b] * p + fc[b];
            }
            let k = (axis as u8, key);
            let next = dof_keys.len();
            let g = *key_to_dof.entry(k).or_insert_with(|| {
                dof_keys.push(k);
                next
            });
            // the canonical global normal is the +axis direction fixed by the
            // owner (first-encounter, i.e. lower element index); the local
            // normal is also +axis, so the relative sign is +1
            let local_axis = axis;
            let (owner_axis, _) = dof_keys[g];
            let sign: i8 = if owner_axis == local_axis as u8 { 1 } else { -1 };
            l2g.push(g);
            sg.push(sign);
        }
        local_to_global.push(l2g);
        orientation.push(sg);
    }

    Ok(RtSpace {
        dim,
        degree: p,
        cells: mesh.cells(),
        n_dofs: dof_keys.len(),
        n_local,
        local_to_global,
        orientation,
        dof_keys,
        topo,
    })
}

/// Discontinuous `L²` space of degree `p-1`: `p^d` DOFs per element, stored
/// element-contiguously.
#[derive(Debug, Clone)]
pub struct L2Space {
    pub dim: usize,
    pub degree: usize,
    cells: [usize; 3],
    n_elems: usize,
    n_per_elem: usize,
}

impl L2Space {
    pub fn n_dofs(&self) -> usize {
        self.n_elems * self.n_per_elem
    }

    pub fn n_elements(&self) -> usize {
        self.n_elems
    }

    pub fn n_per_element(&self) -> usize {
        self.n_per_elem
    }

    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    /// Element containing a global DOF.
    pub fn element_of(&self, g: usize) -> usize {
        g / self.n_per_elem
    }

    /// Local index of a global DOF within its element.
    pub fn local_of(&self, g: usize) -> usize {
        g % self.n_per_elem
    }

    pub fn global_of(&self, e: usize, local: usize) -> usize {
        e * self.n_per_elem + local
    }

    pub fn element_range(&self, e: usize) -> core::ops::Range<usize> {
        e * self.n_per_elem..(e + 1) * self.n_per_elem
    }

    /// Refined-grid subcell coordinates of a global DOF.
    pub fn cell_key(&self, g: usize, mesh: &Mesh) -> [usize; 3] {
        let p = self.degree;
        let e = self.element_of(g);
        let ec = mesh.element_coords(e);
        let local = self.local_of(g);
        let lc = [local % p, (local / p) % p, local / (p * p)];
        let mut key = [0usize; 3];
        for b in 0..self.dim {
            key[b] = ec[b] * p + lc[b];
        }
        key
    }
}

pub fn build_l2_space(mesh: &Mesh, p: usize) -> Result<L2Space> {
    if p < 1 {
        return Err(Error::InvalidOrder("L2 space needs p >= 1".into()));
    }
    Ok(L2Space {
        dim: mesh.dim(),
        degree: p,
        cells: mesh.cells(),
        n_elems: mesh.n_elements(),
        n_per_elem: p.pow(mesh.dim() as u32),
    })
}

/// Global RT DOFs whose subelement face lies on a mesh boundary face with one
/// of the selected attributes.
pub fn boundary_dofs(space: &RtSpace, mesh: &Mesh, attrs: &[u32]) -> Result<Vec<usize>> {
    let known: Vec<u32> = mesh.boundary_faces().iter().map(|bf| bf.attr).collect();
    for a in attrs {
        if !known.contains(a) {
            return Err(Error::Config(format!("unknown boundary attribute {a}")));
        }
    }
    let mut attr_of: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for bf in mesh.boundary_faces() {
        attr_of.insert((bf.element, bf.side), bf.attr);
    }
    let p = space.degree;
    let cells = space.cells;
    let mut out = Vec::new();
    for g in 0..space.n_dofs() {
        let (axis, c) = space.dof_key(g);
        let a = axis as usize;
        let side = if c[a] == 0 {
            2 * a
        } else if c[a] == cells[a] * p {
            2 * a + 1
        } else {
            continue;
        };
        // parent element adjacent to this boundary face
        let mut ec = [0usize; 3];
        for b in 0..space.dim {
            ec[b] = if b == a {
                if side % 2 == 0 {
                    0
                } else {
                    cells[a] - 1
                }
            } else {
                c[b] / p
            };
        }
        let e = mesh.element_index(ec);
        if let Some(attr) = attr_of.get(&(e, side)) {
            if attrs.contains(attr) {
                out.push(g);
            }
        }
    }
    Ok(out)
}

/// All boundary attributes of a mesh (sorted, deduplicated).
pub fn all_boundary_attrs(mesh: &Mesh) -> Vec<u32> {
    let mut attrs: Vec<u32> = mesh.boundary_faces().iter().map(|bf| bf.attr).collect();
    attrs.sort_unstable();
    attrs.dedup();
    attrs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::cartesian_mesh;

    fn unit_bounds(dim: usize) -> Vec<[f64; 2]> {
        alloc::vec![[0.0, 1.0]; dim]
    }

    #[test]
    fn rt0_on_single_quad_has_four_dofs() {
        let m = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let rt = build_rt_space(&m, 1).unwrap();
        assert_eq!(rt.n_dofs(), 4);
        assert_eq!(rt.n_local(), 4);
    }

    #[test]
    fn shared_face_is_deduplicated() {
        let m = cartesian_mesh(2, &[2, 1], &unit_bounds(2)).unwrap();
        let rt = build_rt_space(&m, 1).unwrap();
        assert_eq!(rt.n_dofs(), 7);
    }

    #[test]
    fn dof_count_matches_refined_grid_face_count() {
        for n in 1..=4usize {
            for p in 1..=4usize {
                let m = cartesian_mesh(2, &[n, n], &unit_bounds(2)).unwrap();
                let rt = build_rt_space(&m, p).unwrap();
                let np = n * p;
                assert_eq!(rt.n_dofs(), 2 * np * (np + 1), "n={n} p={p}");
            }
        }
        // 3D closed form: faces of an (n1 p × n2 p × n3 p) grid
        for (cells, p) in [([2usize, 3, 1], 2usize), ([2, 2, 2], 3)] {
            let m = cartesian_mesh(3, &cells, &unit_bounds(3)).unwrap();
            let rt = build_rt_space(&m, p).unwrap();
            let g = [cells[0] * p, cells[1] * p, cells[2] * p];
            let expect = (g[0] + 1) * g[1] * g[2] + g[0] * (g[1] + 1) * g[2] + g[0] * g[1] * (g[2] + 1);
            assert_eq!(rt.n_dofs(), expect);
        }
    }

    #[test]
    fn orientation_signs_are_unit() {
        let m = cartesian_mesh(3, &[2, 2, 2], &unit_bounds(3)).unwrap();
        let rt = build_rt_space(&m, 2).unwrap();
        for e in 0..m.n_elements() {
            for &s in rt.orientation(e) {
                assert!(s == 1 || s == -1);
            }
        }
    }

    #[test]
    fn l2_space_counts_and_maps() {
        let m = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let l2 = build_l2_space(&m, 3).unwrap();
        assert_eq!(l2.n_dofs(), 9);

        let m = cartesian_mesh(2, &[2, 2], &unit_bounds(2)).unwrap();
        let l2 = build_l2_space(&m, 2).unwrap();
        assert_eq!(l2.n_dofs(), 16);
        assert_eq!(l2.element_of(11), 2);
        assert_eq!(l2.local_of(11), 3);
        assert_eq!(l2.global_of(2, 3), 11);
    }

    #[test]
    fn boundary_dofs_on_single_quad() {
        let m = cartesian_mesh(2, &[1, 1], &unit_bounds(2)).unwrap();
        let rt1 = build_rt_space(&m, 1).unwrap();
        let all = all_boundary_attrs(&m);
        assert_eq!(boundary_dofs(&rt1, &m, &all).unwrap().len(), 4);

        let rt2 = build_rt_space(&m, 2).unwrap();
        assert_eq!(rt2.n_dofs(), 12);
        assert_eq!(boundary_dofs(&rt2, &m, &all).unwrap().len(), 8);

        assert!(boundary_dofs(&rt2, &m, &[]).unwrap().is_empty());
        assert!(matches!(boundary_dofs(&rt2, &m, &[9]), Err(Error::Config(_))));
    }

    #[test]
    fn boundary_dof_flags_match_lookup() {
        let m = cartesian_mesh(3, &[2, 2, 1], &unit_bounds(3)).unwrap();
        let rt = build_rt_space(&m, 2).unwrap();
        let all = boundary_dofs(&rt, &m, &all_boundary_attrs(&m)).unwrap();
        for g in 0..rt.n_dofs() {
            assert_eq!(all.contains(&g), rt.is_boundary_dof(g));
        }
    }
}
