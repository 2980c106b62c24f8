//! Global finite element spaces, essential boundary conditions and fields.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::{
    shifted_legendre, Conformity, DofEntity, DofMap, ElementError, Family, PushForward, ReferenceElement,
};
use crate::mesh::{BoundaryTag, Mesh, Side};
use crate::quadrature::{interval_rule, triangle_rule, TriangleRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error("{0:?} space does not accept this boundary condition")]
    WrongConformity(FieldKind),
    #[error("boundary facet {0} has no tag")]
    UntaggedFacet(usize),
    #[error("coefficient vector has length {got}, space has {expected} dofs")]
    Length { got: usize, expected: usize },
}

/// The seven unknowns of the coupled problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Strain,
    Stress,
    TotalPressure,
    Displacement,
    Rotation,
    FluidPressure,
    Concentration,
}

impl FieldKind {
    pub const POROELASTIC: [FieldKind; 6] = [
        FieldKind::Strain,
        FieldKind::Stress,
        FieldKind::TotalPressure,
        FieldKind::Displacement,
        FieldKind::Rotation,
        FieldKind::FluidPressure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Strain => "t",
            FieldKind::Stress => "sigma",
            FieldKind::TotalPressure => "ptilde",
            FieldKind::Displacement => "u",
            FieldKind::Rotation => "gamma",
            FieldKind::FluidPressure => "p",
            FieldKind::Concentration => "omega",
        }
    }

    fn family(self) -> (Family, Conformity, usize) {
        match self {
            FieldKind::Strain => (Family::DiscontinuousTensor, Conformity::L2, 1),
            FieldKind::Stress => (Family::BdmRow, Conformity::Hdiv, 2),
            FieldKind::TotalPressure => (Family::DiscontinuousScalar, Conformity::L2, 1),
            FieldKind::Displacement => (Family::DiscontinuousVector, Conformity::L2, 1),
            FieldKind::Rotation => (Family::DiscontinuousSkew, Conformity::L2, 1),
            FieldKind::FluidPressure | FieldKind::Concentration => (Family::Lagrange, Conformity::H1, 1),
        }
    }

    /// Number of physical value components: 1, 2 or 4 (row-major tensor).
    pub fn value_size(self) -> usize {
        match self {
            FieldKind::Strain | FieldKind::Stress | FieldKind::Rotation => 4,
            FieldKind::Displacement => 2,
            _ => 1,
        }
    }
}

/// Selects boundary facets.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundarySelector {
    Tag(BoundaryTag),
    Sides(Vec<Side>),
    All,
}

impl BoundarySelector {
    pub fn matches(&self, mesh: &Mesh, facet: usize) -> Result<bool, SpaceError> {
        let f = &mesh.facets()[facet];
        if !f.is_boundary() {
            return Ok(false);
        }
        if f.tag == BoundaryTag::Interior {
            return Err(SpaceError::UntaggedFacet(facet));
        }
        Ok(match self {
            BoundarySelector::Tag(t) => f.tag == *t,
            BoundarySelector::Sides(s) => f.side.is_some_and(|side| s.contains(&side)),
            BoundarySelector::All => true,
        })
    }
}

/// Finite element space of one field with its essential-condition mask.
#[derive(Debug, Clone)]
pub struct FESpace {
    mesh: Arc<Mesh>,
    kind: FieldKind,
    order: usize,
    element: ReferenceElement,
    dofmap: DofMap,
    rows: usize,
    dofs: Vec<usize>,
    signs: Vec<f64>,
    fixed: Vec<Option<f64>>,
}

impl FESpace {
    pub fn new(mesh: Arc<Mesh>, kind: FieldKind, k: usize) -> Result<Self, SpaceError> {
        let (family, conformity, rows) = kind.family();
        let element = ReferenceElement::new(family, k)?;
        let dofmap = DofMap::build(&mesh, &element, conformity)?;
        let nloc = element.ndofs();
        let ncells = mesh.num_cells();
        let mut dofs = Vec::with_capacity(ncells * nloc * rows);
        let mut signs = Vec::with_capacity(ncells * nloc * rows);
        for c in 0..ncells {
            for r in 0..rows {
                for (d, s) in dofmap.cell_dofs(c).iter().zip(dofmap.cell_signs(c)) {
                    dofs.push(r * dofmap.ndofs() + d);
                    signs.push(*s);
                }
            }
        }
        let n = rows * dofmap.ndofs();
        Ok(Self { mesh, kind, order: k, element, dofmap, rows, dofs, signs, fixed: vec![None; n] })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn element(&self) -> &ReferenceElement {
        &self.element
    }

    pub fn dofmap(&self) -> &DofMap {
        &self.dofmap
    }

    pub fn conformity(&self) -> Conformity {
        self.dofmap.conformity()
    }

    pub fn ndofs(&self) -> usize {
        self.rows * self.dofmap.ndofs()
    }

    pub fn local_ndofs(&self) -> usize {
        self.rows * self.element.ndofs()
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        let n = self.local_ndofs();
        &self.dofs[cell * n..(cell + 1) * n]
    }

    pub fn cell_signs(&self, cell: usize) -> &[f64] {
        let n = self.local_ndofs();
        &self.signs[cell * n..(cell + 1) * n]
    }

    pub fn fixed(&self) -> &[Option<f64>] {
        &self.fixed
    }

    pub fn num_fixed(&self) -> usize {
        self.fixed.iter().filter(|f| f.is_some()).count()
    }

    pub fn num_free(&self) -> usize {
        self.ndofs() - self.num_fixed()
    }

    pub fn clear_constraints(&mut self) {
        self.fixed.iter_mut().for_each(|f| *f = None);
    }

    /// Prescribes `sigma n = traction` on the selected facets by fixing the
    /// edge moments of both stress rows.
    pub fn apply_normal_trace_bc(
        &mut self,
        selector: &BoundarySelector,
        traction: impl Fn([f64; 2]) -> [f64; 2],
    ) -> Result<usize, SpaceError> {
        if self.kind != FieldKind::Stress {
            return Err(SpaceError::WrongConformity(self.kind));
        }
        let per_edge = self.element.shape().degree() + 1;
        let nd = self.dofmap.ndofs();
        let rule = interval_rule(2 * per_edge + 6).expect("degree in range");
        let mut count = 0;
        for f in 0..self.mesh.num_facets() {
            if !selector.matches(&self.mesh, f)? {
                continue;
            }
            let [a, b] = self.mesh.facets()[f].vertices;
            let (pa, pb) = (self.mesh.vertices()[a], self.mesh.vertices()[b]);
            let len = self.mesh.facet_length(f);
            for j in 0..per_edge {
                let mut m = [0.0; 2];
                for (s, w) in rule.iter() {
                    let x = [pa[0] + s[0] * (pb[0] - pa[0]), pa[1] + s[0] * (pb[1] - pa[1])];
                    let g = traction(x);
                    let l = shifted_legendre(j, s[0]);
                    m[0] += w * len * g[0] * l;
                    m[1] += w * len * g[1] * l;
                }
                for (r, mr) in m.iter().enumerate() {
                    self.fixed[r * nd + f * per_edge + j] = Some(*mr);
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Fixes the nodal values on the selected facets to `g`.
    pub fn apply_dirichlet(
        &mut self,
        selector: &BoundarySelector,
        g: impl Fn([f64; 2]) -> f64,
    ) -> Result<usize, SpaceError> {
        if self.conformity() != Conformity::H1 {
            return Err(SpaceError::WrongConformity(self.kind));
        }
        let nv = self.mesh.num_vertices();
        let quadratic = self.element.shape().degree() == 2;
        let mut count = 0;
        for f in 0..self.mesh.num_facets() {
            if !selector.matches(&self.mesh, f)? {
                continue;
            }
            for v in self.mesh.facets()[f].vertices {
                if self.fixed[v].is_none() {
                    count += 1;
                }
                self.fixed[v] = Some(g(self.mesh.vertices()[v]));
            }
            if quadratic {
                self.fixed[nv + f] = Some(g(self.mesh.facet_midpoint(f)));
                count += 1;
            }
        }
        Ok(count)
    }

    /// Physical coordinates of the Lagrange nodes (H1 spaces only).
    pub fn node_coords(&self) -> Option<Vec<[f64; 2]>> {
        if self.conformity() != Conformity::H1 {
            return None;
        }
        let mut pts = self.mesh.vertices().to_vec();
        if self.element.shape().degree() == 2 {
            pts.extend((0..self.mesh.num_facets()).map(|f| self.mesh.facet_midpoint(f)));
        }
        Some(pts)
    }

    /// Reference tabulation on a quadrature rule, reused for every cell.
    pub fn reference_tab(&self, rule: &TriangleRule) -> ReferenceTab {
        let pts = &rule.points;
        let needs_grad = self.conformity() == Conformity::H1;
        let tab = self.element.eval_basis(pts, needs_grad).expect("family supports requested data");
        let div = self.element.eval_divergence(pts).ok();
        ReferenceTab { tab, div, weights: rule.weights.clone(), points: rule.points.clone() }
    }

    /// Physical basis values on `cell`, orientation signs applied.
    pub fn tabulate_cell(&self, cell: usize, rt: &ReferenceTab, pf: &PushForward, out: &mut CellBasis) {
        let nloc = self.local_ndofs();
        let nq = rt.tab.npts;
        let ncomp = self.kind.value_size();
        out.reset(nloc, nq, ncomp);
        let signs = self.cell_signs(cell);
        let eln = self.element.ndofs();
        match self.kind {
            FieldKind::Stress => {
                for r in 0..self.rows {
                    for i in 0..eln {
                        let d = r * eln + i;
                        let s = signs[d];
                        for q in 0..nq {
                            let v = pf.piola([rt.tab.value(i, q, 0), rt.tab.value(i, q, 1)]);
                            let base = (d * nq + q) * 4;
                            out.vals[base + 2 * r] = s * v[0];
                            out.vals[base + 2 * r + 1] = s * v[1];
                            let dv = rt.div.as_ref().expect("bdm divergence")[i * nq + q];
                            out.divs[(d * nq + q) * 2 + r] = s * pf.piola_divergence(dv);
                        }
                    }
                }
            }
            FieldKind::Strain => {
                for i in 0..eln {
                    for q in 0..nq {
                        let base = (i * nq + q) * 4;
                        for r in 0..2 {
                            let v = pf.piola([rt.tab.values[base + 2 * r], rt.tab.values[base + 2 * r + 1]]);
                            out.vals[base + 2 * r] = v[0];
                            out.vals[base + 2 * r + 1] = v[1];
                        }
                        if let Some(div) = rt.div.as_ref() {
                            for r in 0..2 {
                                out.divs[(i * nq + q) * 2 + r] = pf.piola_divergence(div[(i * nq + q) * 2 + r]);
                            }
                        }
                    }
                }
            }
            FieldKind::FluidPressure | FieldKind::Concentration => {
                out.vals.copy_from_slice(&rt.tab.values);
                let g = rt.tab.grads.as_ref().expect("lagrange gradients");
                for i in 0..eln {
                    for q in 0..nq {
                        let idx = i * nq + q;
                        let pg = pf.gradient([g[idx * 2], g[idx * 2 + 1]]);
                        out.grads[idx * 2] = pg[0];
                        out.grads[idx * 2 + 1] = pg[1];
                    }
                }
            }
            _ => out.vals.copy_from_slice(&rt.tab.values),
        }
        out.jxw.clear();
        out.jxw.extend(rt.weights.iter().map(|w| w * pf.det));
    }

    /// Interpolates `f` into the space: nodal values for H1, edge and
    /// interior moments for H(div), cellwise L2 projection for L2.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> Vec<f64>) -> Vec<f64> {
        let mut coeffs = vec![0.0; self.ndofs()];
        match self.conformity() {
            Conformity::H1 => {
                for (i, x) in self.node_coords().expect("h1").into_iter().enumerate() {
                    coeffs[i] = f(x)[0];
                }
            }
            Conformity::Hdiv => self.interpolate_hdiv(&f, &mut coeffs),
            Conformity::L2 => self.project_l2(&f, &mut coeffs),
        }
        coeffs
    }

    fn interpolate_hdiv(&self, f: &dyn Fn([f64; 2]) -> Vec<f64>, coeffs: &mut [f64]) {
        let mesh = &self.mesh;
        let per_edge = self.element.shape().degree() + 1;
        let nd = self.dofmap.ndofs();
        let rule = interval_rule(12).expect("degree in range");
        for fct in 0..mesh.num_facets() {
            let [a, b] = mesh.facets()[fct].vertices;
            let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
            let len = mesh.facet_length(fct);
            let n = mesh.facet_normal(fct);
            for j in 0..per_edge {
                let mut m = [0.0; 2];
                for (s, w) in rule.iter() {
                    let x = [pa[0] + s[0] * (pb[0] - pa[0]), pa[1] + s[0] * (pb[1] - pa[1])];
                    let v = f(x);
                    let l = shifted_legendre(j, s[0]);
                    for (r, mr) in m.iter_mut().enumerate() {
                        *mr += w * len * (v[2 * r] * n[0] + v[2 * r + 1] * n[1]) * l;
                    }
                }
                for r in 0..2 {
                    coeffs[r * nd + fct * per_edge + j] = m[r];
                }
            }
        }
        let interior: Vec<_> = self
            .element
            .shape()
            .entities()
            .iter()
            .enumerate()
            .filter_map(|(l, e)| matches!(e, DofEntity::Interior(_)).then_some(l))
            .collect();
        if interior.is_empty() {
            return;
        }
        let rule = triangle_rule(10).expect("degree in range");
        let eln = self.element.ndofs();
        for c in 0..mesh.num_cells() {
            let pf = PushForward::for_cell(mesh.cell_coords(c), c).expect("valid mesh");
            for (slot, &l) in interior.iter().enumerate() {
                let mut m = [0.0; 2];
                for (xr, w) in rule.iter() {
                    let v = f(pf.map_point(*xr));
                    let q: [f64; 2] = match slot {
                        0 => [1.0, 0.0],
                        1 => [0.0, 1.0],
                        _ => [-xr[1], xr[0]],
                    };
                    for (r, mr) in m.iter_mut().enumerate() {
                        let vh = pf.piola_inverse([v[2 * r], v[2 * r + 1]]);
                        *mr += w * (vh[0] * q[0] + vh[1] * q[1]);
                    }
                }
                for r in 0..2 {
                    coeffs[self.cell_dofs(c)[r * eln + l]] = m[r];
                }
            }
        }
    }

    fn project_l2(&self, f: &dyn Fn([f64; 2]) -> Vec<f64>, coeffs: &mut [f64]) {
        let deg = 2 * self.element.shape().degree() + 6;
        let rule = triangle_rule(deg.min(crate::quadrature::MAX_TRIANGLE_DEGREE)).expect("degree in range");
        let rt = self.reference_tab(&rule);
        let mut cb = CellBasis::default();
        let n = self.local_ndofs();
        let ncomp = self.kind.value_size();
        for c in 0..self.mesh.num_cells() {
            let pf = PushForward::for_cell(self.mesh.cell_coords(c), c).expect("valid mesh");
            self.tabulate_cell(c, &rt, &pf, &mut cb);
            let mut mass = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for q in 0..cb.nq {
                let v = f(pf.map_point(rule.points[q]));
                for i in 0..n {
                    let vi = cb.value(i, q);
                    rhs[i] += cb.jxw[q] * (0..ncomp).map(|k| vi[k] * v[k]).sum::<f64>();
                    for j in 0..n {
                        let vj = cb.value(j, q);
                        mass[(i, j)] += cb.jxw[q] * (0..ncomp).map(|k| vi[k] * vj[k]).sum::<f64>();
                    }
                }
            }
            let sol = mass.lu().solve(&rhs).expect("local mass matrix is invertible");
            for (i, &d) in self.cell_dofs(c).iter().enumerate() {
                coeffs[d] = sol[i];
            }
        }
    }
}

/// Reference-cell tabulation of a space on a quadrature rule.
#[derive(Debug, Clone)]
pub struct ReferenceTab {
    pub tab: crate::elements::Tabulation,
    pub div: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub points: Vec<[f64; 2]>,
}

/// Physical basis data on one cell.
#[derive(Debug, Clone, Default)]
pub struct CellBasis {
    pub ndofs: usize,
    pub nq: usize,
    pub ncomp: usize,
    /// `vals[(dof * nq + q) * ncomp + c]`
    pub vals: Vec<f64>,
    /// Scalar gradients `grads[(dof * nq + q) * 2 + d]` (H1 spaces).
    pub grads: Vec<f64>,
    /// Row divergences `divs[(dof * nq + q) * 2 + row]` (tensor spaces).
    pub divs: Vec<f64>,
    /// Quadrature weights times `|det B|`.
    pub jxw: Vec<f64>,
}

impl CellBasis {
    fn reset(&mut self, ndofs: usize, nq: usize, ncomp: usize) {
        self.ndofs = ndofs;
        self.nq = nq;
        self.ncomp = ncomp;
        self.vals.clear();
        self.vals.resize(ndofs * nq * ncomp, 0.0);
        self.grads.clear();
        self.grads.resize(ndofs * nq * 2, 0.0);
        self.divs.clear();
        self.divs.resize(ndofs * nq * 2, 0.0);
    }

    pub fn value(&self, dof: usize, q: usize) -> &[f64] {
        let b = (dof * self.nq + q) * self.ncomp;
        &self.vals[b..b + self.ncomp]
    }

    pub fn grad(&self, dof: usize, q: usize) -> [f64; 2] {
        let b = (dof * self.nq + q) * 2;
        [self.grads[b], self.grads[b + 1]]
    }

    pub fn div(&self, dof: usize, q: usize) -> [f64; 2] {
        let b = (dof * self.nq + q) * 2;
        [self.divs[b], self.divs[b + 1]]
    }

    /// Field value at quadrature point `q` given the local coefficients.
    pub fn eval(&self, local: &[f64], q: usize, out: &mut [f64]) {
        out[..self.ncomp].iter_mut().for_each(|o| *o = 0.0);
        for (i, &a) in local.iter().enumerate() {
            if a != 0.0 {
                for (o, v) in out.iter_mut().zip(self.value(i, q)) {
                    *o += a * v;
                }
            }
        }
    }

    pub fn eval_grad(&self, local: &[f64], q: usize) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (i, &a) in local.iter().enumerate() {
            let gi = self.grad(i, q);
            g[0] += a * gi[0];
            g[1] += a * gi[1];
        }
        g
    }

    pub fn eval_div(&self, local: &[f64], q: usize) -> [f64; 2] {
        let mut d = [0.0; 2];
        for (i, &a) in local.iter().enumerate() {
            let di = self.div(i, q);
            d[0] += a * di[0];
            d[1] += a * di[1];
        }
        d
    }
}

/// Coefficients of a discrete field on its space.
#[derive(Debug, Clone)]
pub struct Field {
    space: Arc<FESpace>,
    coeffs: Vec<f64>,
}

impl Field {
    pub fn zeros(space: Arc<FESpace>) -> Self {
        let n = space.ndofs();
        Self { space, coeffs: vec![0.0; n] }
    }

    pub fn from_coeffs(space: Arc<FESpace>, coeffs: Vec<f64>) -> Result<Self, SpaceError> {
        if coeffs.len() != space.ndofs() {
            return Err(SpaceError::Length { got: coeffs.len(), expected: space.ndofs() });
        }
        Ok(Self { space, coeffs })
    }

    pub fn interpolate(space: Arc<FESpace>, f: impl Fn([f64; 2]) -> Vec<f64>) -> Self {
        let coeffs = space.interpolate(f);
        Self { space, coeffs }
    }

    pub fn space(&self) -> &Arc<FESpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Local coefficients on `cell`, orientation signs already folded into
    /// the basis of [`FESpace::tabulate_cell`].
    pub fn gather(&self, cell: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.space.cell_dofs(cell).iter().map(|&d| self.coeffs[d]));
    }

    /// Overwrites the constrained coefficients with their prescribed values.
    pub fn apply_fixed(&mut self) {
        for (c, f) in self.coeffs.iter_mut().zip(self.space.fixed()) {
            if let Some(v) = f {
                *c = *v;
            }
        }
    }
}

/// Scalar multiplier fixing `int tr(sigma_h) = target` when the stress has
/// no essential boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConstraint {
    pub active: bool,
    pub target: f64,
}

impl TraceConstraint {
    pub fn inactive() -> Self {
        Self { active: false, target: 0.0 }
    }

    /// Active exactly when the mesh has no `Sigma` facets.
    pub fn for_mesh(mesh: &Mesh, target: f64) -> Self {
        let active = !mesh.boundary_facets().any(|f| mesh.facets()[f].tag == BoundaryTag::Sigma);
        Self { active, target: if active { target } else { 0.0 } }
    }
}
