//! Reference elements, affine push-forwards and degree-of-freedom maps.
//!
//! Every shape set is built the Ciarlet way: a monomial spanning set, a list
//! of dual functionals, and the inverse of the resulting generalized
//! Vandermonde matrix. Supported shape degrees go up to 2, which covers the
//! element orders `k = 0` and `k = 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Mesh, LOCAL_EDGES};
use crate::quadrature::{interval_rule, triangle_rule};

pub const MAX_SHAPE_DEGREE: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElementError {
    #[error("shape degree {0} not supported (max {MAX_SHAPE_DEGREE})")]
    UnsupportedDegree(usize),
    #[error("{0:?} elements have no gradients")]
    NoGradient(Family),
    #[error("{0:?} elements have no divergence")]
    NoDivergence(Family),
    #[error("{family:?} elements cannot be {conformity:?}-conforming")]
    Conformity { family: Family, conformity: Conformity },
    #[error("degenerate cell {cell}: det = {det:e}")]
    Degenerate { cell: usize, det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Continuous Lagrange of degree `k + 1` (fluid pressure, tracer).
    Lagrange,
    /// Discontinuous `P_k` scalars (total pressure).
    DiscontinuousScalar,
    /// Discontinuous `P_k` vectors (displacement).
    DiscontinuousVector,
    /// Discontinuous `P_k` skew tensors `[[0, g], [-g, 0]]` (rotation).
    DiscontinuousSkew,
    /// One row of a `BDM_{k+1}` stress.
    BdmRow,
    /// Full tensors whose rows are `BDM_{k+1}` shapes without inter-cell
    /// coupling (strain).
    DiscontinuousTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conformity {
    H1,
    Hdiv,
    L2,
}

/// Topological entity a local degree of freedom is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofEntity {
    Vertex(usize),
    /// Moment `index` against the shifted Legendre polynomial of that degree
    /// along local edge `edge`.
    Edge { edge: usize, index: usize },
    Interior(usize),
}

/// Monomials `x^a y^b` with `a + b <= degree`.
#[derive(Debug, Clone)]
struct Monomials {
    exps: Vec<(i32, i32)>,
}

impl Monomials {
    fn new(degree: usize) -> Self {
        let mut exps = Vec::new();
        for total in 0..=degree as i32 {
            for b in 0..=total {
                exps.push((total - b, b));
            }
        }
        Self { exps }
    }

    fn len(&self) -> usize {
        self.exps.len()
    }

    fn eval(&self, p: [f64; 2], vals: &mut [f64], grads: &mut [[f64; 2]]) {
        let pw = |x: f64, e: i32| if e <= 0 { 1.0 } else { x.powi(e) };
        for (m, &(a, b)) in self.exps.iter().enumerate() {
            vals[m] = pw(p[0], a) * pw(p[1], b);
            let dx = if a > 0 { a as f64 * pw(p[0], a - 1) * pw(p[1], b) } else { 0.0 };
            let dy = if b > 0 { b as f64 * pw(p[0], a) * pw(p[1], b - 1) } else { 0.0 };
            grads[m] = [dx, dy];
        }
    }
}

/// Shifted Legendre polynomial of degree `j` on `[0, 1]`.
pub fn shifted_legendre(j: usize, s: f64) -> f64 {
    let z = 2.0 * s - 1.0;
    let (mut p0, mut p1) = (1.0, z);
    match j {
        0 => 1.0,
        1 => z,
        _ => {
            for k in 2..=j {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

pub const REFERENCE_VERTICES: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

/// Start point, direction and scaled outward normal (length equals the
/// edge length) of a reference edge.
pub fn reference_edge(e: usize) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let [a, b] = LOCAL_EDGES[e];
    let (pa, pb) = (REFERENCE_VERTICES[a], REFERENCE_VERTICES[b]);
    let d = [pb[0] - pa[0], pb[1] - pa[1]];
    (pa, d, [d[1], -d[0]])
}

/// Scalar or vector polynomial shape functions on the reference triangle.
#[derive(Debug, Clone)]
pub struct ShapeSet {
    degree: usize,
    ncomp: usize,
    monomials: Monomials,
    /// Row `i` holds the expansion of basis `i`: `ncomp` consecutive
    /// blocks of monomial coefficients.
    coeffs: DMatrix<f64>,
    entities: Vec<DofEntity>,
}

impl ShapeSet {
    fn from_dual(
        degree: usize,
        ncomp: usize,
        entities: Vec<DofEntity>,
        dual: impl Fn(usize, &dyn Fn([f64; 2]) -> Vec<f64>) -> f64,
    ) -> Self {
        let monomials = Monomials::new(degree);
        let nm = monomials.len();
        let np = nm * ncomp;
        assert_eq!(entities.len(), np, "dual set size must match primal dimension");
        let mut vander = DMatrix::<f64>::zeros(np, np);
        for p in 0..np {
            let (comp, m) = (p / nm, p % nm);
            let eval = |x: [f64; 2]| {
                let mut vals = vec![0.0; nm];
                let mut grads = vec![[0.0; 2]; nm];
                monomials.eval(x, &mut vals, &mut grads);
                let mut out = vec![0.0; ncomp];
                out[comp] = vals[m];
                out
            };
            for k in 0..np {
                vander[(k, p)] = dual(k, &eval);
            }
        }
        let coeffs = vander
            .transpose()
            .try_inverse()
            .expect("dual functionals are unisolvent on the primal space");
        Self { degree, ncomp, monomials, coeffs, entities }
    }

    fn lagrange(degree: usize) -> Self {
        let (nodes, entities) = lagrange_nodes(degree);
        Self::from_dual(degree, 1, entities, |k, f| f(nodes[k])[0])
    }

    fn bdm(degree: usize) -> Self {
        let mut entities = Vec::new();
        for edge in 0..3 {
            for index in 0..=degree {
                entities.push(DofEntity::Edge { edge, index });
            }
        }
        let interior = interior_test_fields(degree);
        for l in 0..interior.len() {
            entities.push(DofEntity::Interior(l));
        }
        let ents = entities.clone();
        Self::from_dual(degree, 2, entities, move |k, f| bdm_dof(&ents[k], &interior, f))
    }

    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn entities(&self) -> &[DofEntity] {
        &self.entities
    }

    /// Values `[basis][comp]` and reference gradients `[basis][comp][dir]`
    /// at one reference point.
    pub fn eval(&self, p: [f64; 2], vals: &mut [f64], grads: &mut [f64]) {
        let nm = self.monomials.len();
        let mut mv = [0.0; 16];
        let mut mg = [[0.0; 2]; 16];
        self.monomials.eval(p, &mut mv[..nm], &mut mg[..nm]);
        for i in 0..self.len() {
            for c in 0..self.ncomp {
                let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
                for m in 0..nm {
                    let a = self.coeffs[(i, c * nm + m)];
                    v += a * mv[m];
                    gx += a * mg[m][0];
                    gy += a * mg[m][1];
                }
                vals[i * self.ncomp + c] = v;
                grads[(i * self.ncomp + c) * 2] = gx;
                grads[(i * self.ncomp + c) * 2 + 1] = gy;
            }
        }
    }
}

fn lagrange_nodes(degree: usize) -> (Vec<[f64; 2]>, Vec<DofEntity>) {
    match degree {
        0 => (vec![[1.0 / 3.0, 1.0 / 3.0]], vec![DofEntity::Interior(0)]),
        _ => {
            let mut nodes = REFERENCE_VERTICES.to_vec();
            let mut ents: Vec<_> = (0..3).map(DofEntity::Vertex).collect();
            if degree == 2 {
                for e in 0..3 {
                    let (a, d, _) = reference_edge(e);
                    nodes.push([a[0] + 0.5 * d[0], a[1] + 0.5 * d[1]]);
                    ents.push(DofEntity::Edge { edge: e, index: 0 });
                }
            }
            (nodes, ents)
        }
    }
}

/// Interior test fields for `BDM_r`: the lowest-order Nedelec space when
/// `r = 2`, nothing when `r = 1`.
fn interior_test_fields(degree: usize) -> Vec<fn([f64; 2]) -> [f64; 2]> {
    match degree {
        2 => vec![|_| [1.0, 0.0], |_| [0.0, 1.0], |p| [-p[1], p[0]]],
        _ => vec![],
    }
}

fn bdm_dof(
    entity: &DofEntity,
    interior: &[fn([f64; 2]) -> [f64; 2]],
    f: &dyn Fn([f64; 2]) -> Vec<f64>,
) -> f64 {
    match *entity {
        DofEntity::Edge { edge, index } => {
            let rule = interval_rule(6).expect("static degree");
            let (a, d, n) = reference_edge(edge);
            rule.iter()
                .map(|(s, w)| {
                    let x = [a[0] + s[0] * d[0], a[1] + s[0] * d[1]];
                    let v = f(x);
                    w * (v[0] * n[0] + v[1] * n[1]) * shifted_legendre(index, s[0])
                })
                .sum()
        }
        DofEntity::Interior(l) => {
            let rule = triangle_rule(6).expect("static degree");
            rule.iter()
                .map(|(x, w)| {
                    let v = f(*x);
                    let q = interior[l](*x);
                    w * (v[0] * q[0] + v[1] * q[1])
                })
                .sum()
        }
        DofEntity::Vertex(_) => unreachable!("BDM has no vertex dofs"),
    }
}

/// Reference element of a given family.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    family: Family,
    shape: ShapeSet,
}

/// Basis values on a set of points: `values[(dof * npts + q) * ncomp + c]`.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub ndofs: usize,
    pub npts: usize,
    pub ncomp: usize,
    pub values: Vec<f64>,
    /// `grads[((dof * npts + q) * ncomp + c) * 2 + d]`, H1 families only.
    pub grads: Option<Vec<f64>>,
}

impl Tabulation {
    pub fn value(&self, dof: usize, q: usize, c: usize) -> f64 {
        self.values[(dof * self.npts + q) * self.ncomp + c]
    }
}

impl ReferenceElement {
    pub fn new(family: Family, k: usize) -> Result<Self, ElementError> {
        let degree = match family {
            Family::Lagrange | Family::BdmRow | Family::DiscontinuousTensor => k + 1,
            _ => k,
        };
        if degree > MAX_SHAPE_DEGREE {
            return Err(ElementError::UnsupportedDegree(degree));
        }
        let shape = match family {
            Family::BdmRow | Family::DiscontinuousTensor => ShapeSet::bdm(degree),
            _ => ShapeSet::lagrange(degree),
        };
        Ok(Self { family, shape })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn shape(&self) -> &ShapeSet {
        &self.shape
    }

    /// Number of shape-set copies stacked in this element.
    pub fn blocks(&self) -> usize {
        match self.family {
            Family::DiscontinuousVector | Family::DiscontinuousTensor => 2,
            _ => 1,
        }
    }

    pub fn ndofs(&self) -> usize {
        self.blocks() * self.shape.len()
    }

    /// Number of value components: 1 scalar, 2 vector, 4 tensor (row-major).
    pub fn value_size(&self) -> usize {
        match self.family {
            Family::Lagrange | Family::DiscontinuousScalar => 1,
            Family::DiscontinuousVector | Family::BdmRow => 2,
            Family::DiscontinuousSkew | Family::DiscontinuousTensor => 4,
        }
    }

    pub fn eval_basis(&self, pts: &[[f64; 2]], gradients: bool) -> Result<Tabulation, ElementError> {
        if gradients && self.family != Family::Lagrange {
            return Err(ElementError::NoGradient(self.family));
        }
        let ns = self.shape.len();
        let sc = self.shape.ncomp;
        let ncomp = self.value_size();
        let ndofs = self.ndofs();
        let npts = pts.len();
        let mut values = vec![0.0; ndofs * npts * ncomp];
        let mut grads = gradients.then(|| vec![0.0; ndofs * npts * ncomp * 2]);
        let mut sv = vec![0.0; ns * sc];
        let mut sg = vec![0.0; ns * sc * 2];
        for (q, &p) in pts.iter().enumerate() {
            self.shape.eval(p, &mut sv, &mut sg);
            for b in 0..self.blocks() {
                for i in 0..ns {
                    let dof = b * ns + i;
                    let out = &mut values[(dof * npts + q) * ncomp..(dof * npts + q + 1) * ncomp];
                    match self.family {
                        Family::Lagrange | Family::DiscontinuousScalar => out[0] = sv[i],
                        Family::DiscontinuousVector => out[b] = sv[i],
                        Family::DiscontinuousSkew => {
                            out[1] = sv[i];
                            out[2] = -sv[i];
                        }
                        Family::BdmRow => out.copy_from_slice(&sv[i * 2..i * 2 + 2]),
                        Family::DiscontinuousTensor => {
                            out[2 * b] = sv[i * 2];
                            out[2 * b + 1] = sv[i * 2 + 1];
                        }
                    }
                    if let Some(g) = grads.as_mut() {
                        let base = (dof * npts + q) * ncomp * 2;
                        g[base] = sg[i * 2];
                        g[base + 1] = sg[i * 2 + 1];
                    }
                }
            }
        }
        Ok(Tabulation { ndofs, npts, ncomp, values, grads })
    }

    /// Reference divergence of each BDM row: `[(dof * npts + q) * rows + row]`.
    pub fn eval_divergence(&self, pts: &[[f64; 2]]) -> Result<Vec<f64>, ElementError> {
        let rows = match self.family {
            Family::BdmRow => 1,
            Family::DiscontinuousTensor => 2,
            f => return Err(ElementError::NoDivergence(f)),
        };
        let ns = self.shape.len();
        let mut sv = vec![0.0; ns * 2];
        let mut sg = vec![0.0; ns * 4];
        let npts = pts.len();
        let mut out = vec![0.0; self.ndofs() * npts * rows];
        for (q, &p) in pts.iter().enumerate() {
            self.shape.eval(p, &mut sv, &mut sg);
            for b in 0..rows {
                for i in 0..ns {
                    let dof = b * ns + i;
                    out[(dof * npts + q) * rows + b] = sg[i * 4] + sg[i * 4 + 3];
                }
            }
        }
        Ok(out)
    }
}

/// Affine map `x = B x_hat + b` from the reference triangle to a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushForward {
    pub jac: [[f64; 2]; 2],
    pub origin: [f64; 2],
    pub det: f64,
    /// `B^{-T}`.
    pub inv_t: [[f64; 2]; 2],
}

impl PushForward {
    pub fn new(coords: [[f64; 2]; 3]) -> Result<Self, ElementError> {
        Self::for_cell(coords, usize::MAX)
    }

    pub fn for_cell(coords: [[f64; 2]; 3], cell: usize) -> Result<Self, ElementError> {
        let [x0, x1, x2] = coords;
        let jac = [[x1[0] - x0[0], x2[0] - x0[0]], [x1[1] - x0[1], x2[1] - x0[1]]];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if !(det > 0.0) {
            return Err(ElementError::Degenerate { cell, det });
        }
        let inv_t = [[jac[1][1] / det, -jac[1][0] / det], [-jac[0][1] / det, jac[0][0] / det]];
        Ok(Self { jac, origin: x0, det, inv_t })
    }

    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + self.jac[0][0] * p[0] + self.jac[0][1] * p[1],
            self.origin[1] + self.jac[1][0] * p[0] + self.jac[1][1] * p[1],
        ]
    }

    /// Contravariant Piola transform `(1/det) B v_hat`.
    pub fn piola(&self, v: [f64; 2]) -> [f64; 2] {
        [
            (self.jac[0][0] * v[0] + self.jac[0][1] * v[1]) / self.det,
            (self.jac[1][0] * v[0] + self.jac[1][1] * v[1]) / self.det,
        ]
    }

    /// Inverse Piola transform `det B^{-1} v`.
    pub fn piola_inverse(&self, v: [f64; 2]) -> [f64; 2] {
        // det * B^{-1} = adj(B)
        [
            self.jac[1][1] * v[0] - self.jac[0][1] * v[1],
            -self.jac[1][0] * v[0] + self.jac[0][0] * v[1],
        ]
    }

    pub fn piola_divergence(&self, div_ref: f64) -> f64 {
        div_ref / self.det
    }

    /// Physical gradient `B^{-T} grad_hat`.
    pub fn gradient(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv_t[0][0] * g[0] + self.inv_t[0][1] * g[1],
            self.inv_t[1][0] * g[0] + self.inv_t[1][1] * g[1],
        ]
    }
}

/// Global numbering of the degrees of freedom of one element family.
#[derive(Debug, Clone)]
pub struct DofMap {
    conformity: Conformity,
    per_cell: usize,
    cell_dofs: Vec<usize>,
    signs: Vec<f64>,
    ndofs: usize,
}

impl DofMap {
    pub fn build(mesh: &Mesh, el: &ReferenceElement, conformity: Conformity) -> Result<Self, ElementError> {
        let bad = || ElementError::Conformity { family: el.family(), conformity };
        match (conformity, el.family()) {
            (Conformity::H1, Family::Lagrange) | (Conformity::Hdiv, Family::BdmRow) => {}
            (Conformity::L2, Family::Lagrange | Family::BdmRow) => {}
            (Conformity::L2, _) => {}
            _ => return Err(bad()),
        }
        let ncells = mesh.num_cells();
        let per_cell = el.ndofs();
        let mut cell_dofs = vec![0; ncells * per_cell];
        let mut signs = vec![1.0; ncells * per_cell];
        let ndofs = match conformity {
            Conformity::L2 => {
                for (i, d) in cell_dofs.iter_mut().enumerate() {
                    *d = i;
                }
                ncells * per_cell
            }
            Conformity::H1 => {
                let nv = mesh.num_vertices();
                for c in 0..ncells {
                    let cell = mesh.cells()[c];
                    let facets = mesh.cell_facets(c);
                    for (l, ent) in el.shape().entities().iter().enumerate() {
                        cell_dofs[c * per_cell + l] = match *ent {
                            DofEntity::Vertex(v) => cell[v],
                            DofEntity::Edge { edge, .. } => nv + facets[edge],
                            DofEntity::Interior(_) => return Err(bad()),
                        };
                    }
                }
                let edge_dofs = if el.shape().degree() == 2 { mesh.num_facets() } else { 0 };
                nv + edge_dofs
            }
            Conformity::Hdiv => {
                let per_edge = el.shape().degree() + 1;
                let nint = per_cell - 3 * per_edge;
                let edge_total = mesh.num_facets() * per_edge;
                for c in 0..ncells {
                    let cell = mesh.cells()[c];
                    let facets = mesh.cell_facets(c);
                    for (l, ent) in el.shape().entities().iter().enumerate() {
                        let (dof, sign) = match *ent {
                            DofEntity::Edge { edge, index } => {
                                let f = facets[edge];
                                let [a, b] = LOCAL_EDGES[edge];
                                let param: f64 = if cell[a] < cell[b] { 1.0 } else { -1.0 };
                                let normal = if mesh.facets()[f].owner.0 == c { 1.0 } else { -1.0 };
                                (f * per_edge + index, normal * param.powi(index as i32))
                            }
                            DofEntity::Interior(i) => (edge_total + c * nint + i, 1.0),
                            DofEntity::Vertex(_) => return Err(bad()),
                        };
                        cell_dofs[c * per_cell + l] = dof;
                        signs[c * per_cell + l] = sign;
                    }
                }
                edge_total + ncells * nint
            }
        };
        Ok(Self { conformity, per_cell, cell_dofs, signs, ndofs })
    }

    pub fn conformity(&self) -> Conformity {
        self.conformity
    }

    pub fn ndofs(&self) -> usize {
        self.ndofs
    }

    pub fn dofs_per_cell(&self) -> usize {
        self.per_cell
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        &self.cell_dofs[cell * self.per_cell..(cell + 1) * self.per_cell]
    }

    pub fn cell_signs(&self, cell: usize) -> &[f64] {
        &self.signs[cell * self.per_cell..(cell + 1) * self.per_cell]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::BoundaryPartition;

    #[test]
    fn lagrange_nodal_identity() {
        let el = ReferenceElement::new(Family::Lagrange, 0).unwrap();
        let tab = el.eval_basis(&REFERENCE_VERTICES, true).unwrap();
        for i in 0..3 {
            for q in 0..3 {
                let expect = if i == q { 1.0 } else { 0.0 };
                assert!((tab.value(i, q, 0) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn p0_is_constant() {
        let el = ReferenceElement::new(Family::DiscontinuousScalar, 0).unwrap();
        let tab = el.eval_basis(&[[0.1, 0.2], [0.7, 0.05]], false).unwrap();
        assert_eq!(tab.ndofs, 1);
        assert!(tab.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gradient_on_l2_family_fails() {
        let el = ReferenceElement::new(Family::DiscontinuousVector, 0).unwrap();
        assert_eq!(el.eval_basis(&[[0.2, 0.2]], true).unwrap_err(), ElementError::NoGradient(Family::DiscontinuousVector));
        assert!(el.eval_divergence(&[[0.2, 0.2]]).is_err());
    }

    fn check_unisolvent(family: Family, k: usize) {
        let el = ReferenceElement::new(family, k).unwrap();
        let shape = el.shape().clone();
        let n = shape.len();
        let sc = shape.ncomp();
        let interior = interior_test_fields(shape.degree());
        let (nodes, _) = lagrange_nodes(shape.degree());
        for j in 0..n {
            let f = |x: [f64; 2]| {
                let mut v = vec![0.0; n * sc];
                let mut g = vec![0.0; n * sc * 2];
                shape.eval(x, &mut v, &mut g);
                v[j * sc..(j + 1) * sc].to_vec()
            };
            for (k, ent) in shape.entities().iter().enumerate() {
                let got = if sc == 2 { bdm_dof(ent, &interior, &f) } else { f(nodes[k])[0] };
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((got - expect).abs() < 1e-12, "{family:?} k={k}: dof {k} of basis {j} = {got}");
            }
        }
    }

    #[test]
    fn unisolvence() {
        for k in 0..=1 {
            check_unisolvent(Family::Lagrange, k);
            check_unisolvent(Family::DiscontinuousScalar, k);
            check_unisolvent(Family::BdmRow, k);
        }
    }

    #[test]
    fn bdm_dimensions() {
        let bdm1 = ReferenceElement::new(Family::BdmRow, 0).unwrap();
        assert_eq!(bdm1.ndofs(), 6);
        let bdm2 = ReferenceElement::new(Family::BdmRow, 1).unwrap();
        assert_eq!(bdm2.ndofs(), 12);
        assert_eq!(ReferenceElement::new(Family::DiscontinuousTensor, 0).unwrap().ndofs(), 12);
        assert!(ReferenceElement::new(Family::BdmRow, 2).is_err());
    }

    #[test]
    fn bdm1_normal_moments_follow_kronecker_pattern() {
        // Normal component of basis j integrated against L_i on each edge.
        let el = ReferenceElement::new(Family::BdmRow, 0).unwrap();
        let rule = interval_rule(6).unwrap();
        for j in 0..6 {
            for e in 0..3 {
                let (a, d, n) = reference_edge(e);
                for i in 0..2 {
                    let pts: Vec<_> = rule.points.iter().map(|s| [a[0] + s[0] * d[0], a[1] + s[0] * d[1]]).collect();
                    let tab = el.eval_basis(&pts, false).unwrap();
                    let m: f64 = (0..pts.len())
                        .map(|q| {
                            let vn = tab.value(j, q, 0) * n[0] + tab.value(j, q, 1) * n[1];
                            rule.weights[q] * vn * shifted_legendre(i, rule.points[q][0])
                        })
                        .sum();
                    let expect = if j == e * 2 + i { 1.0 } else { 0.0 };
                    assert!((m - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn skew_has_single_component() {
        let el = ReferenceElement::new(Family::DiscontinuousSkew, 0).unwrap();
        let tab = el.eval_basis(&[[0.3, 0.3]], false).unwrap();
        assert_eq!(tab.ndofs, 1);
        assert_eq!(&tab.values[..], &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn piola_scaling_and_identity() {
        let id = PushForward::new(REFERENCE_VERTICES).unwrap();
        assert_eq!(id.piola([0.3, -0.7]), [0.3, -0.7]);
        let s = 2.5;
        let pf = PushForward::new([[0.0, 0.0], [s, 0.0], [0.0, s]]).unwrap();
        assert!((pf.det - s * s).abs() < 1e-14);
        let v = pf.piola([1.0, 2.0]);
        assert!((v[0] - 1.0 / s).abs() < 1e-14 && (v[1] - 2.0 / s).abs() < 1e-14);
        assert!(PushForward::new([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        let w = pf.piola_inverse(pf.piola([0.4, -1.1]));
        assert!((w[0] - 0.4).abs() < 1e-14 && (w[1] + 1.1).abs() < 1e-14);
    }

    #[test]
    fn piola_preserves_edge_flux() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let el = ReferenceElement::new(Family::BdmRow, 1).unwrap();
        let rule = interval_rule(8).unwrap();
        for _ in 0..3 {
            let x0 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let x1 = [x0[0] + rng.gen_range(0.5..2.0), x0[1] + rng.gen_range(-0.3..0.3)];
            let x2 = [x0[0] + rng.gen_range(-0.3..0.3), x0[1] + rng.gen_range(0.5..2.0)];
            let pf = PushForward::new([x0, x1, x2]).unwrap();
            let phys = [x0, x1, x2];
            for e in 0..3 {
                let (a, d, nref) = reference_edge(e);
                let [ia, ib] = LOCAL_EDGES[e];
                let (pa, pb) = (phys[ia], phys[ib]);
                let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
                let n = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
                let pts: Vec<_> = rule.points.iter().map(|s| [a[0] + s[0] * d[0], a[1] + s[0] * d[1]]).collect();
                let tab = el.eval_basis(&pts, false).unwrap();
                for j in 0..el.ndofs() {
                    let (mut flux_ref, mut flux_phys) = (0.0, 0.0);
                    for q in 0..pts.len() {
                        let vr = [tab.value(j, q, 0), tab.value(j, q, 1)];
                        let vp = pf.piola(vr);
                        let w = rule.weights[q];
                        flux_ref += w * (vr[0] * nref[0] + vr[1] * nref[1]);
                        flux_phys += w * len * (vp[0] * n[0] + vp[1] * n[1]);
                    }
                    assert!((flux_ref - flux_phys).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dof_counts() {
        let m2 = Mesh::unit_square(2, BoundaryPartition::all_gamma()).unwrap();
        let p1 = ReferenceElement::new(Family::Lagrange, 0).unwrap();
        assert_eq!(DofMap::build(&m2, &p1, Conformity::H1).unwrap().ndofs(), 9);
        let m1 = Mesh::unit_square(1, BoundaryPartition::all_gamma()).unwrap();
        let bdm = ReferenceElement::new(Family::BdmRow, 0).unwrap();
        assert_eq!(DofMap::build(&m1, &bdm, Conformity::Hdiv).unwrap().ndofs(), 10);
        let vec0 = ReferenceElement::new(Family::DiscontinuousVector, 0).unwrap();
        assert_eq!(DofMap::build(&m2, &vec0, Conformity::L2).unwrap().ndofs(), 16);
        let p2 = ReferenceElement::new(Family::Lagrange, 1).unwrap();
        assert_eq!(DofMap::build(&m2, &p2, Conformity::H1).unwrap().ndofs(), 25);
        assert!(DofMap::build(&m2, &vec0, Conformity::Hdiv).is_err());
    }

    #[test]
    fn hdiv_signs_agree_across_shared_edges() {
        let m = Mesh::unit_square(3, BoundaryPartition::all_gamma()).unwrap();
        let el = ReferenceElement::new(Family::BdmRow, 1).unwrap();
        let dm = DofMap::build(&m, &el, Conformity::Hdiv).unwrap();
        for facet in m.facets() {
            if let Some((n, en)) = facet.neighbor {
                let (o, eo) = facet.owner;
                for index in 0..3 {
                    let lo = eo * 3 + index;
                    let ln = en * 3 + index;
                    assert_eq!(dm.cell_dofs(o)[lo], dm.cell_dofs(n)[ln]);
                    // Opposite normals; opposite traversal flips odd moments.
                    let expect = if index % 2 == 0 { -1.0 } else { 1.0 };
                    assert_eq!(dm.cell_signs(o)[lo] * dm.cell_signs(n)[ln], expect);
                }
            }
        }
    }
}
