//! Structured quadrilateral/hexahedral meshes with vertex-based (multi)linear
//! element transformations, and the Gauss–Lobatto subelement topology that
//! identifies Raviart–Thomas DOFs with subelement faces.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor1d::gauss_legendre;
use crate::Result;

/// A boundary face of the mesh: one side of one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub element: usize,
    /// Side `2*axis + 0` (low) or `2*axis + 1` (high).
    pub side: usize,
    pub attr: u32,
}

/// Structured quad/hex mesh. Topology is a Cartesian grid of
/// `cells[0] × cells[1] (× cells[2])` elements; geometry is carried by the
/// vertex coordinates, which may be displaced (skewed) after construction.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    cells: [usize; 3],
    vertices: Vec<[f64; 3]>,
    elem_vertices: Vec<[usize; 8]>,
    elem_attr: Vec<u32>,
    boundary: Vec<BoundaryFace>,
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis (trailing axes are 1 in 2D).
    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    pub fn n_elements(&self) -> usize {
        self.cells[0] * self.cells[1] * self.cells[2]
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn element_vertices(&self, e: usize) -> &[usize] {
        &self.elem_vertices[e][..1 << self.dim]
    }

    pub fn element_attr(&self, e: usize) -> u32 {
        self.elem_attr[e]
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    /// Lexicographic element coordinates (axis 0 fastest).
    pub fn element_coords(&self, e: usize) -> [usize; 3] {
        let ex = e % self.cells[0];
        let ey = (e / self.cells[0]) % self.cells[1];
        let ez = e / (self.cells[0] * self.cells[1]);
        [ex, ey, ez]
    }

    pub fn element_index(&self, coords: [usize; 3]) -> usize {
        coords[0] + self.cells[0] * (coords[1] + self.cells[1] * coords[2])
    }

    pub fn transform(&self, e: usize) -> ElementTransform {
        let mut verts = [[0.0; 3]; 8];
        for (k, &v) in self.element_vertices(e).iter().enumerate() {
            verts[k] = self.vertices[v];
        }
        ElementTransform { dim: self.dim, verts }
    }

    pub fn element_centroid(&self, e: usize) -> [f64; 3] {
        self.transform(e).map(&[0.5, 0.5, 0.5])
    }

    /// Assign element attributes from centroids (material regions).
    pub fn set_attributes_by(&mut self, f: impl Fn(&[f64; 3]) -> u32) {
        for e in 0..self.n_elements() {
            self.elem_attr[e] = f(&self.element_centroid(e));
        }
    }

    /// Override boundary attributes.
    pub fn set_boundary_attr(&mut self, f: impl Fn(&BoundaryFace) -> u32) {
        for bf in &mut self.boundary {
            bf.attr = f(bf);
        }
    }

    /// Construct a mesh from raw parts (used by the text-format reader).
    pub fn from_parts(
        dim: usize,
        cells: [usize; 3],
        vertices: Vec<[f64; 3]>,
        elem_attr: Vec<u32>,
        boundary_attrs: &[u32],
    ) -> Result<Mesh> {
        let mut base = cartesian_mesh(
            dim,
            &cells[..dim],
            &vec![[0.0, 1.0]; dim],
        )?;
        if vertices.len() != base.n_vertices() {
            return Err(Error::InvalidMesh(format!(
                "vertex count {} does not match {}x{}x{} grid",
                vertices.len(),
                cells[0],
                cells[1],
                cells[2]
            )));
        }
        if elem_attr.len() != base.n_elements() {
            return Err(Error::InvalidMesh("element attribute count mismatch".into()));
        }
        base.vertices = vertices;
        base.elem_attr = elem_attr;
        if !boundary_attrs.is_empty() {
            if boundary_attrs.len() != base.boundary.len() {
                return Err(Error::InvalidMesh("boundary attribute count mismatch".into()));
            }
            for (bf, &attr) in base.boundary.iter_mut().zip(boundary_attrs) {
                bf.attr = attr;
            }
        }
        let min = base.min_sampled_jacobian(5)?;
        if min <= 0.0 {
            return Err(Error::InvalidMesh(format!(
                "element inverted: min sampled det J = {min:.3e}"
            )));
        }
        Ok(base)
    }

    /// Sampled minimum of `det J` over all elements, on an `n`-point
    /// Gauss-Legendre grid per axis.
    pub fn min_sampled_jacobian(&self, n: usize) -> Result<f64> {
        let pts = gauss_legendre(n)?.nodes;
        let mut min = f64::INFINITY;
        for e in 0..self.n_elements() {
            let tr = self.transform(e);
            min = min.min(sample_min_det(&tr, &pts, self.dim));
        }
        Ok(min)
    }

    /// Domain volume by quadrature of `det J` (order `n` per axis).
    pub fn volume(&self, n: usize) -> Result<f64> {
        let rule = gauss_legendre(n)?;
        let mut total = 0.0;
        for e in 0..self.n_elements() {
            let tr = self.transform(e);
            let mut xhat = [0.5; 3];
            let kmax = if self.dim == 3 { rule.order() } else { 1 };
            for k in 0..kmax {
                for j in 0..rule.order() {
                    for i in 0..rule.order() {
                        xhat[0] = rule.nodes[i];
                        xhat[1] = rule.nodes[j];
                        if self.dim == 3 {
                            xhat[2] = rule.nodes[k];
                        }
                        let (_, det) = tr.jacobian(&xhat);
                        let mut w = rule.weights[i] * rule.weights[j];
                        if self.dim == 3 {
                            w *= rule.weights[k];
                        }
                        total += w * det;
                    }
                }
            }
        }
        Ok(total)
    }
}

fn sample_min_det(tr: &ElementTransform, pts: &[f64], dim: usize) -> f64 {
    let mut min = f64::INFINITY;
    let kmax = if dim == 3 { pts.len() } else { 1 };
    let mut xhat = [0.5; 3];
    for k in 0..kmax {
        for j in 0..pts.len() {
            for i in 0..pts.len() {
                xhat[0] = pts[i];
                xhat[1] = pts[j];
                if dim == 3 {
                    xhat[2] = pts[k];
                }
                let (_, det) = tr.jacobian(&xhat);
                min = min.min(det);
            }
        }
    }
    min
}

/// Axis-aligned Cartesian mesh covering `bounds`.
pub fn cartesian_mesh(dim: usize, cells: &[usize], bounds: &[[f64; 2]]) -> Result<Mesh> {
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidMesh(format!("dimension {dim} not supported")));
    }
    if cells.len() != dim || bounds.len() != dim {
        return Err(Error::InvalidMesh(format!(
            "expected {dim} cell counts and bounds, got {} and {}",
            cells.len(),
            bounds.len()
        )));
    }
    if cells.iter().any(|&c| c == 0) {
        return Err(Error::InvalidMesh("zero cells along an axis".into()));
    }
    for b in bounds {
        if !(b[1] > b[0]) {
            return Err(Error::InvalidMesh(format!("degenerate bounds [{}, {}]", b[0], b[1])));
        }
    }
    let mut c = [1usize; 3];
    c[..dim].copy_from_slice(cells);
    let nv = [c[0] + 1, c[1] + 1, if dim == 3 { c[2] + 1 } else { 1 }];

    let mut vertices = Vec::with_capacity(nv[0] * nv[1] * nv[2]);
    for iz in 0..nv[2] {
        for iy in 0..nv[1] {
            for ix in 0..nv[0] {
                let mut v = [0.0; 3];
                v[0] = bounds[0][0] + (bounds[0][1] - bounds[0][0]) * ix as f64 / c[0] as f64;
                v[1] = bounds[1][0] + (bounds[1][1] - bounds[1][0]) * iy as f64 / c[1] as f64;
                if dim == 3 {
                    v[2] = bounds[2][0] + (bounds[2][1] - bounds[2][0]) * iz as f64 / c[2] as f64;
                }
                vertices.push(v);
            }
        }
    }

    let vidx = |ix: usize, iy: usize, iz: usize| ix + nv[0] * (iy + nv[1] * iz);
    let n_elem = c[0] * c[1] * c[2];
    let mut elem_vertices = Vec::with_capacity(n_elem);
    for ez in 0..c[2] {
        for ey in 0..c[1] {
            for ex in 0..c[0] {
                let mut verts = [0usize; 8];
                let corners = if dim == 3 { 8 } else { 4 };
                for corner in 0..corners {
                    let dx = corner & 1;
                    let dy = (corner >> 1) & 1;
                    let dz = (corner >> 2) & 1;
                    verts[corner] = vidx(ex + dx, ey + dy, ez + dz);
                }
                elem_vertices.push(verts);
            }
        }
    }

    let mut mesh = Mesh {
        dim,
        cells: c,
        vertices,
        elem_vertices,
        elem_attr: vec![1; n_elem],
        boundary: Vec::new(),
    };
    mesh.boundary = boundary_of(&mesh);
    Ok(mesh)
}

fn boundary_of(mesh: &Mesh) -> Vec<BoundaryFace> {
    let c = mesh.cells;
    let mut out = Vec::new();
    for e in 0..mesh.n_elements() {
        let ec = mesh.element_coords(e);
        for axis in 0..mesh.dim {
            if ec[axis] == 0 {
                out.push(BoundaryFace { element: e, side: 2 * axis, attr: (2 * axis + 1) as u32 });
            }
            if ec[axis] == c[axis] - 1 {
                out.push(BoundaryFace {
                    element: e,
                    side: 2 * axis + 1,
                    attr: (2 * axis + 2) as u32,
                });
            }
        }
    }
    out
}

/// Displace vertices by a smooth map; fails if any element inverts
/// (`det J ≤ 0` sampled on a 5-point Gauss-Legendre grid per axis).
pub fn skew_mesh(mesh: &Mesh, displacement: &dyn Fn(&[f64; 3]) -> [f64; 3]) -> Result<Mesh> {
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        let d = displacement(v);
        v[0] += d[0];
        v[1] += d[1];
        v[2] += d[2];
    }
    let min = out.min_sampled_jacobian(5)?;
    if min <= 0.0 {
        return Err(Error::InvalidMesh(format!("element inverted: min sampled det J = {min:.3e}")));
    }
    Ok(out)
}

/// The canonical skewed element used throughout the conditioning studies:
/// the unit quad/hex with the far corner displaced by `(+0.5, -0.2, +0.3)`.
pub fn canonical_skewed_element(dim: usize) -> Result<Mesh> {
    let bounds = [[0.0, 1.0]; 3];
    let base = cartesian_mesh(dim, &vec![1; dim], &bounds[..dim])?;
    let corner: [f64; 3] = [1.0, 1.0, if dim == 3 { 1.0 } else { 0.0 }];
    skew_mesh(&base, &move |v: &[f64; 3]| {
        if v.iter().zip(corner.iter()).all(|(a, b)| (a - b).abs() < 1e-12) {
            [0.5, -0.2, if dim == 3 { 0.3 } else { 0.0 }]
        } else {
            [0.0, 0.0, 0.0]
        }
    })
}

/// Multilinear transformation of one element.
#[derive(Debug, Clone)]
pub struct ElementTransform {
    dim: usize,
    verts: [[f64; 3]; 8],
}

impl ElementTransform {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Physical position of the reference point.
    pub fn map(&self, xhat: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let corners = 1usize << self.dim;
        for corner in 0..corners {
            let s = self.shape(corner, xhat);
            for d in 0..3 {
                out[d] += s * self.verts[corner][d];
            }
        }
        out
    }

    fn shape(&self, corner: usize, xhat: &[f64; 3]) -> f64 {
        let mut s = 1.0;
        for a in 0..self.dim {
            let bit = (corner >> a) & 1;
            s *= if bit == 1 { xhat[a] } else { 1.0 - xhat[a] };
        }
        s
    }

    fn shape_grad(&self, corner: usize, xhat: &[f64; 3], axis: usize) -> f64 {
        let mut s = 1.0;
        for a in 0..self.dim {
            let bit = (corner >> a) & 1;
            if a == axis {
                s *= if bit == 1 { 1.0 } else { -1.0 };
            } else {
                s *= if bit == 1 { xhat[a] } else { 1.0 - xhat[a] };
            }
        }
        s
    }

    /// Jacobian `J[r][c] = ∂T_r/∂x̂_c` and its determinant. In 2D the third
    /// row/column is the identity so `det` is the 2×2 determinant.
    pub fn jacobian(&self, xhat: &[f64; 3]) -> ([[f64; 3]; 3], f64) {
        let mut j = [[0.0; 3]; 3];
        if self.dim == 2 {
            j[2][2] = 1.0;
        }
        let corners = 1usize << self.dim;
        for corner in 0..corners {
            for c in 0..self.dim {
                let g = self.shape_grad(corner, xhat, c);
                for r in 0..self.dim {
                    j[r][c] += g * self.verts[corner][r];
                }
            }
        }
        let det = if self.dim == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        };
        (j, det)
    }
}

/// Topology of the `p^d` Gauss–Lobatto subelement grid of one element:
/// volume/face enumeration and the signed face adjacency `F(i)`.
///
/// Faces are numbered axis-major: all x-normal faces first (lattice
/// `(p+1) × p (× p)`, axis-0 fastest), then y-normal, then z-normal. This is
/// also the local Raviart–Thomas DOF ordering.
#[derive(Debug, Clone)]
pub struct SubelementTopology {
    pub degree: usize,
    pub dim: usize,
    pub n_volumes: usize,
    pub n_faces: usize,
    faces: Vec<[(usize, i8); 6]>,
}

impl SubelementTopology {
    /// The `2d` signed faces `(local RT DOF, σ_loc)` of a subelement volume;
    /// `σ_loc = +1` on the positive axis side, `-1` on the negative side.
    pub fn faces_of(&self, volume: usize) -> &[(usize, i8)] {
        &self.faces[volume][..2 * self.dim]
    }

    fn axis_dims(&self, axis: usize) -> [usize; 3] {
        let p = self.degree;
        let mut dims = [p, p, if self.dim == 3 { p } else { 1 }];
        dims[axis] = p + 1;
        dims
    }

    fn axis_block(&self, axis: usize) -> usize {
        let d = self.axis_dims(axis);
        d[0] * d[1] * d[2]
    }

    /// Local face index from its normal axis and lattice coordinates.
    pub fn face_index(&self, axis: usize, coords: [usize; 3]) -> usize {
        let mut idx = 0;
        for a in 0..axis {
            idx += self.axis_block(a);
        }
        let d = self.axis_dims(axis);
        idx + coords[0] + d[0] * (coords[1] + d[1] * coords[2])
    }

    /// Normal axis and lattice coordinates of a local face index.
    pub fn face_coords(&self, mut idx: usize) -> (usize, [usize; 3]) {
        for axis in 0..self.dim {
            let block = self.axis_block(axis);
            if idx < block {
                let d = self.axis_dims(axis);
                let c0 = idx % d[0];
                let c1 = (idx / d[0]) % d[1];
                let c2 = idx / (d[0] * d[1]);
                return (axis, [c0, c1, c2]);
            }
            idx -= block;
        }
        unreachable!("face index out of range");
    }

    /// Volume index from lattice coordinates (axis 0 fastest).
    pub fn volume_index(&self, coords: [usize; 3]) -> usize {
        let p = self.degree;
        coords[0] + p * (coords[1] + p * coords[2])
    }

    pub fn volume_coords(&self, idx: usize) -> [usize; 3] {
        let p = self.degree;
        [idx % p, (idx / p) % p, idx / (p * p)]
    }
}

/// Enumerate the `p^d` subelement volumes and their signed face adjacency.
pub fn subelement_topology(p: usize, dim: usize) -> Result<SubelementTopology> {
    if p < 1 {
        return Err(Error::InvalidOrder("subelement topology needs p >= 1".into()));
    }
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidMesh(format!("dimension {dim} not supported")));
    }
    let n_volumes = p.pow(dim as u32);
    let mut topo = SubelementTopology {
        degree: p,
        dim,
        n_volumes,
        n_faces: dim * (p + 1) * p.pow(dim as u32 - 1),
        faces: vec![[(0, 0); 6]; n_volumes],
    };
    for v in 0..n_volumes {
        let vc = topo.volume_coords(v);
        for axis in 0..dim {
            let mut hi = vc;
            hi[axis] += 1;
            let lo_idx = topo.face_index(axis, vc);
            let hi_idx = topo.face_index(axis, hi);
            topo.faces[v][2 * axis] = (lo_idx, -1);
            topo.faces[v][2 * axis + 1] = (hi_idx, 1);
        }
    }
    Ok(topo)
}
