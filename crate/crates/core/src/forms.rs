//! Assembly of the poroelastic block system, the diffusion operator and
//! the coupling terms.
//!
//! Unknowns are ordered `(t, sigma, ptilde, u, gamma, p [, multiplier])`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{DiffusionLaw, LawError, Tensor};
use crate::elements::PushForward;
use crate::linsolve::{SparseMatrix, TripletBuilder};
use crate::mesh::{BoundaryTag, Mesh};
use crate::quadrature::{default_degree, interval_rule, triangle_rule, TriangleRule};
use crate::spaces::{CellBasis, FESpace, FieldKind, ReferenceTab, SpaceError, TraceConstraint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormsError {
    #[error("invalid material parameter: {0}")]
    Params(String),
    #[error("diffusion law failed on cell {cell}: {source}")]
    Law { cell: usize, source: LawError },
    #[error("vector has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("trace constraint requested but the mesh has Sigma facets")]
    TraceWithSigma,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Scalar or full 2x2 permeability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Permeability {
    Scalar(f64),
    Tensor([[f64; 2]; 2]),
}

impl Permeability {
    pub fn matrix(&self) -> Tensor {
        match *self {
            Permeability::Scalar(k) => [k, 0.0, 0.0, k],
            Permeability::Tensor(m) => [m[0][0], m[0][1], m[1][0], m[1][1]],
        }
    }
}

/// Physical constants. The first Lame parameter is stored through its
/// inverse so the incompressible limit is `inv_lambda = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub mu_s: f64,
    pub inv_lambda: f64,
    pub c0: f64,
    pub alpha: f64,
    pub kappa: Permeability,
    pub mu_f: f64,
    pub rho_s: f64,
    pub rho_f: f64,
    pub g: [f64; 2],
    pub beta: f64,
    pub phi: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self::unity()
    }
}

impl MaterialParams {
    /// All constants 1 except `phi = 0.5` and `g = 0`.
    pub fn unity() -> Self {
        Self {
            mu_s: 1.0,
            inv_lambda: 1.0,
            c0: 1.0,
            alpha: 1.0,
            kappa: Permeability::Scalar(1.0),
            mu_f: 1.0,
            rho_s: 1.0,
            rho_f: 1.0,
            g: [0.0, 0.0],
            beta: 1.0,
            phi: 0.5,
        }
    }

    pub fn lambda_s(&self) -> f64 {
        1.0 / self.inv_lambda
    }

    pub fn validate(&self) -> Result<(), FormsError> {
        let bad = |m: &str| Err(FormsError::Params(m.to_string()));
        if !(self.mu_s > 0.0) {
            return bad("mu_s must be positive");
        }
        if !(self.inv_lambda >= 0.0 && self.inv_lambda.is_finite()) {
            return bad("inv_lambda must be finite and non-negative (lambda_s > 0)");
        }
        if !(self.c0 >= 0.0) {
            return bad("c0 must be non-negative");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.mu_f > 0.0) {
            return bad("mu_f must be positive");
        }
        if !(self.phi > 0.0) {
            return bad("phi must be positive");
        }
        let k = self.kappa.matrix();
        let det = k[0] * k[3] - k[1] * k[2];
        if (k[1] - k[2]).abs() > 1e-14 * (k[0].abs() + k[3].abs()) || !(k[0] > 0.0) || !(det > 0.0) {
            return bad("kappa must be symmetric positive definite");
        }
        let all = [self.rho_s, self.rho_f, self.g[0], self.g[1], self.beta];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        Ok(())
    }

    /// `c0 + alpha^2 / lambda_s`
    pub fn storage(&self) -> f64 {
        self.c0 + self.alpha * self.alpha * self.inv_lambda
    }
}

pub type ScalarFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Body load `f`, fluid source `m` and tracer source `ell`; `None` is zero.
#[derive(Clone, Default)]
pub struct Sources {
    pub f: Option<VectorFn>,
    pub m: Option<ScalarFn>,
    pub ell: Option<ScalarFn>,
}

/// Data imposed weakly on `Gamma` facets: displacement and the fluid flux
/// vector `kappa/mu_f grad p - rho_f kappa g`.
#[derive(Clone, Default)]
pub struct NaturalData {
    pub displacement: Option<VectorFn>,
    pub flux: Option<VectorFn>,
}

/// The six poroelastic spaces.
#[derive(Debug, Clone)]
pub struct PoroSpaces {
    pub t: Arc<FESpace>,
    pub sigma: Arc<FESpace>,
    pub ptilde: Arc<FESpace>,
    pub u: Arc<FESpace>,
    pub gamma: Arc<FESpace>,
    pub p: Arc<FESpace>,
}

impl PoroSpaces {
    pub fn get(&self, kind: FieldKind) -> &Arc<FESpace> {
        match kind {
            FieldKind::Strain => &self.t,
            FieldKind::Stress => &self.sigma,
            FieldKind::TotalPressure => &self.ptilde,
            FieldKind::Displacement => &self.u,
            FieldKind::Rotation => &self.gamma,
            FieldKind::FluidPressure => &self.p,
            FieldKind::Concentration => panic!("concentration is not a poroelastic field"),
        }
    }

    pub fn get_mut(&mut self, kind: FieldKind) -> &mut FESpace {
        let s = match kind {
            FieldKind::Strain => &mut self.t,
            FieldKind::Stress => &mut self.sigma,
            FieldKind::TotalPressure => &mut self.ptilde,
            FieldKind::Displacement => &mut self.u,
            FieldKind::Rotation => &mut self.gamma,
            FieldKind::FluidPressure => &mut self.p,
            FieldKind::Concentration => panic!("concentration is not a poroelastic field"),
        };
        Arc::make_mut(s)
    }
}

/// Mesh, element order, all spaces and the trace constraint.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: Arc<Mesh>,
    pub k: usize,
    pub poro: PoroSpaces,
    pub omega: Arc<FESpace>,
    pub trace: TraceConstraint,
    pub degree: usize,
}

impl Discretization {
    /// Spaces without boundary conditions; the trace constraint is inactive.
    pub fn new(mesh: Arc<Mesh>, k: usize) -> Result<Self, FormsError> {
        let sp = |kind| FESpace::new(mesh.clone(), kind, k).map(Arc::new);
        let poro = PoroSpaces {
            t: sp(FieldKind::Strain)?,
            sigma: sp(FieldKind::Stress)?,
            ptilde: sp(FieldKind::TotalPressure)?,
            u: sp(FieldKind::Displacement)?,
            gamma: sp(FieldKind::Rotation)?,
            p: sp(FieldKind::FluidPressure)?,
        };
        let omega = sp(FieldKind::Concentration)?;
        Ok(Self { mesh, k, poro, omega, trace: TraceConstraint::inactive(), degree: default_degree(k) })
    }

    pub fn omega_mut(&mut self) -> &mut FESpace {
        Arc::make_mut(&mut self.omega)
    }

    /// Adds the scalar multiplier fixing `int tr sigma = target`.
    pub fn attach_trace_constraint(&mut self, target: f64) -> Result<(), FormsError> {
        let tc = TraceConstraint::for_mesh(&self.mesh, target);
        if !tc.active {
            return Err(FormsError::TraceWithSigma);
        }
        self.trace = tc;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.poro, self.trace.active)
    }

    pub fn rule(&self) -> TriangleRule {
        triangle_rule(self.degree).expect("quadrature degree in range")
    }
}

/// Offsets of each field in the full poroelastic vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: [usize; 7],
    multiplier: bool,
}

impl Layout {
    pub fn new(poro: &PoroSpaces, multiplier: bool) -> Self {
        let mut offsets = [0; 7];
        for (i, kind) in FieldKind::POROELASTIC.iter().enumerate() {
            offsets[i + 1] = offsets[i] + poro.get(*kind).ndofs();
        }
        Self { offsets, multiplier }
    }

    fn index(kind: FieldKind) -> usize {
        FieldKind::POROELASTIC.iter().position(|k| *k == kind).expect("poroelastic field")
    }

    pub fn offset(&self, kind: FieldKind) -> usize {
        self.offsets[Self::index(kind)]
    }

    pub fn range(&self, kind: FieldKind) -> std::ops::Range<usize> {
        let i = Self::index(kind);
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn has_multiplier(&self) -> bool {
        self.multiplier
    }

    pub fn multiplier_index(&self) -> Option<usize> {
        self.multiplier.then_some(self.offsets[6])
    }

    pub fn len(&self) -> usize {
        self.offsets[6] + usize::from(self.multiplier)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated essential-condition mask of all fields.
    pub fn mask(&self, poro: &PoroSpaces) -> Vec<Option<f64>> {
        let mut m = Vec::with_capacity(self.len());
        for kind in FieldKind::POROELASTIC {
            m.extend_from_slice(poro.get(kind).fixed());
        }
        if self.multiplier {
            m.push(None);
        }
        m
    }
}

/// Elimination of essential degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    n_full: usize,
    free: Vec<usize>,
    fixed: Vec<usize>,
    map: Vec<Option<usize>>,
}

impl Reduction {
    pub fn from_mask(mask: &[Option<f64>]) -> Self {
        let mut free = Vec::new();
        let mut fixed = Vec::new();
        let mut map = vec![None; mask.len()];
        for (i, m) in mask.iter().enumerate() {
            if m.is_some() {
                fixed.push(i);
            } else {
                map[i] = Some(free.len());
                free.push(i);
            }
        }
        Self { n_full: mask.len(), free, fixed, map }
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn free_index(&self, full: usize) -> Option<usize> {
        self.map[full]
    }

    /// Prescribed values in the order of [`Reduction::fixed`].
    pub fn fixed_values(&self, mask: &[Option<f64>]) -> Vec<f64> {
        self.fixed.iter().map(|&i| mask[i].expect("fixed dof has a value")).collect()
    }

    /// Splits `A` into the free-free and free-fixed blocks.
    pub fn split(&self, a: &SparseMatrix) -> (SparseMatrix, SparseMatrix) {
        let mut fixed_pos = vec![usize::MAX; self.n_full];
        for (k, &i) in self.fixed.iter().enumerate() {
            fixed_pos[i] = k;
        }
        let mut ff = TripletBuilder::with_capacity(self.n_free(), self.n_free(), a.nnz());
        let mut fc = TripletBuilder::new(self.n_free(), self.fixed.len());
        for (r, &i) in self.free.iter().enumerate() {
            for (j, v) in a.row(i) {
                match self.map[j] {
                    Some(c) => ff.push(r, c, v),
                    None => fc.push(r, fixed_pos[j], v),
                }
            }
        }
        (ff.build(), fc.build())
    }

    /// Restriction of a full matrix to free rows (all columns kept).
    pub fn restrict_rows(&self, a: &SparseMatrix) -> SparseMatrix {
        let mut t = TripletBuilder::new(self.n_free(), a.ncols());
        for (r, &i) in self.free.iter().enumerate() {
            for (j, v) in a.row(i) {
                t.push(r, j, v);
            }
        }
        t.build()
    }

    /// Restriction to free rows and columns.
    pub fn restrict_matrix(&self, a: &SparseMatrix, cols: &Reduction) -> SparseMatrix {
        let mut t = TripletBuilder::new(self.n_free(), cols.n_free());
        for (r, &i) in self.free.iter().enumerate() {
            for (j, v) in a.row(i) {
                if let Some(c) = cols.map[j] {
                    t.push(r, c, v);
                }
            }
        }
        t.build()
    }

    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| v[i]).collect()
    }

    /// Right-hand side on free rows with the fixed columns lifted.
    pub fn lifted_rhs(&self, b_full: &[f64], fc: &SparseMatrix, fixed_vals: &[f64]) -> Vec<f64> {
        let mut r = self.restrict(b_full);
        fc.mul_vec_add(-1.0, fixed_vals, &mut r);
        r
    }

    pub fn expand(&self, x_free: &[f64], fixed_vals: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_full];
        for (&i, &v) in self.free.iter().zip(x_free) {
            x[i] = v;
        }
        for (&i, &v) in self.fixed.iter().zip(fixed_vals) {
            x[i] = v;
        }
        x
    }
}

/// Named blocks and loads of the poroelastic problem, each indexed by the
/// full dof numbering of its fields (rows: test space, columns: trial).
#[derive(Debug, Clone)]
pub struct BlockSystem {
    /// `2 mu_s int t:r` (t x t)
    pub a: SparseMatrix,
    /// `-int tau:r` (sigma x t)
    pub b_sigma: SparseMatrix,
    /// `-int qt tr r` (ptilde x t)
    pub b_ptilde: SparseMatrix,
    /// `(1/lambda_s) int pt qt` (ptilde x ptilde)
    pub c: SparseMatrix,
    /// `-int v . div tau` (u x sigma)
    pub b1_u: SparseMatrix,
    /// `-int eta:tau` (gamma x sigma)
    pub b1_gamma: SparseMatrix,
    /// `(alpha/lambda_s) int qt q` (p x ptilde)
    pub b2: SparseMatrix,
    /// `(c0 + alpha^2/lambda_s) int p q` (p x p)
    pub dp_mass: SparseMatrix,
    /// `(1/mu_f) int kappa grad p . grad q` (p x p)
    pub dp_stiff: SparseMatrix,
    /// `beta int omega tr r` (t x omega)
    pub h: SparseMatrix,
    /// `int tr tau` (sigma)
    pub trace_row: Vec<f64>,
    /// `rho_s int f . v` (u)
    pub load_f: Vec<f64>,
    /// `-int m q - rho_f int kappa g . grad q` (p)
    pub load_g: Vec<f64>,
    /// `-int_Gamma u* . tau n` (sigma)
    pub bnd_sigma: Vec<f64>,
    /// `-int_Gamma flux* . n q` (p)
    pub bnd_p: Vec<f64>,
}

/// Scaling of the fluid-pressure row used by backward Euler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureRow {
    /// Multiplies the zero-order part (`B2` and the storage mass).
    pub zero_order: f64,
}

impl PressureRow {
    pub const STEADY: PressureRow = PressureRow { zero_order: 1.0 };
}

struct Tabs {
    t: ReferenceTab,
    sigma: ReferenceTab,
    ptilde: ReferenceTab,
    u: ReferenceTab,
    gamma: ReferenceTab,
    p: ReferenceTab,
    omega: ReferenceTab,
}

#[derive(Default)]
struct Bases {
    t: CellBasis,
    sigma: CellBasis,
    ptilde: CellBasis,
    u: CellBasis,
    gamma: CellBasis,
    p: CellBasis,
    omega: CellBasis,
}

fn tabs(d: &Discretization, rule: &TriangleRule) -> Tabs {
    Tabs {
        t: d.poro.t.reference_tab(rule),
        sigma: d.poro.sigma.reference_tab(rule),
        ptilde: d.poro.ptilde.reference_tab(rule),
        u: d.poro.u.reference_tab(rule),
        gamma: d.poro.gamma.reference_tab(rule),
        p: d.poro.p.reference_tab(rule),
        omega: d.omega.reference_tab(rule),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tr(a: &[f64]) -> f64 {
    a[0] + a[3]
}

fn mat_vec(m: &Tensor, v: [f64; 2]) -> [f64; 2] {
    [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]]
}

/// Accumulates `sum_q w_q f(i, j, q)` into triplets.
fn local_block(
    out: &mut TripletBuilder,
    rows: &[usize],
    cols: &[usize],
    nq: usize,
    jxw: &[f64],
    f: impl Fn(usize, usize, usize) -> f64,
) {
    for (i, &gi) in rows.iter().enumerate() {
        for (j, &gj) in cols.iter().enumerate() {
            let v: f64 = (0..nq).map(|q| jxw[q] * f(i, j, q)).sum();
            if v != 0.0 {
                out.push(gi, gj, v);
            }
        }
    }
}

/// Assembles all poroelastic blocks and loads.
pub fn assemble_poro(
    d: &Discretization,
    params: &MaterialParams,
    sources: &Sources,
    natural: &NaturalData,
) -> Result<BlockSystem, FormsError> {
    params.validate()?;
    let mesh = &d.mesh;
    let rule = d.rule();
    let tb = tabs(d, &rule);
    let mut cb = Bases::default();
    let sp = &d.poro;
    let (nt, ns, npt, nu, ng, np, nw) =
        (sp.t.ndofs(), sp.sigma.ndofs(), sp.ptilde.ndofs(), sp.u.ndofs(), sp.gamma.ndofs(), sp.p.ndofs(), d.omega.ndofs());
    let mut a = TripletBuilder::new(nt, nt);
    let mut b_sigma = TripletBuilder::new(ns, nt);
    let mut b_ptilde = TripletBuilder::new(npt, nt);
    let mut c = TripletBuilder::new(npt, npt);
    let mut b1_u = TripletBuilder::new(nu, ns);
    let mut b1_gamma = TripletBuilder::new(ng, ns);
    let mut b2 = TripletBuilder::new(np, npt);
    let mut dp_mass = TripletBuilder::new(np, np);
    let mut dp_stiff = TripletBuilder::new(np, np);
    let mut h = TripletBuilder::new(nt, nw);
    let mut trace_row = vec![0.0; ns];
    let mut load_f = vec![0.0; nu];
    let mut load_g = vec![0.0; np];

    let two_mu = 2.0 * params.mu_s;
    let kappa = params.kappa.matrix();
    let kg = mat_vec(&kappa, params.g);
    let storage = params.storage();
    let b2c = params.alpha * params.inv_lambda;
    for cell in 0..mesh.num_cells() {
        let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).map_err(SpaceError::from)?;
        sp.t.tabulate_cell(cell, &tb.t, &pf, &mut cb.t);
        sp.sigma.tabulate_cell(cell, &tb.sigma, &pf, &mut cb.sigma);
        sp.ptilde.tabulate_cell(cell, &tb.ptilde, &pf, &mut cb.ptilde);
        sp.u.tabulate_cell(cell, &tb.u, &pf, &mut cb.u);
        sp.gamma.tabulate_cell(cell, &tb.gamma, &pf, &mut cb.gamma);
        sp.p.tabulate_cell(cell, &tb.p, &pf, &mut cb.p);
        d.omega.tabulate_cell(cell, &tb.omega, &pf, &mut cb.omega);
        let nq = rule.len();
        let jxw = cb.t.jxw.clone();
        let (dt, ds, dpt, du, dg, dp, dw) = (
            sp.t.cell_dofs(cell),
            sp.sigma.cell_dofs(cell),
            sp.ptilde.cell_dofs(cell),
            sp.u.cell_dofs(cell),
            sp.gamma.cell_dofs(cell),
            sp.p.cell_dofs(cell),
            d.omega.cell_dofs(cell),
        );
        let b = &cb;
        local_block(&mut a, dt, dt, nq, &jxw, |i, j, q| two_mu * dot(b.t.value(i, q), b.t.value(j, q)));
        local_block(&mut b_sigma, ds, dt, nq, &jxw, |i, j, q| -dot(b.sigma.value(i, q), b.t.value(j, q)));
        local_block(&mut b_ptilde, dpt, dt, nq, &jxw, |i, j, q| -b.ptilde.value(i, q)[0] * tr(b.t.value(j, q)));
        local_block(&mut c, dpt, dpt, nq, &jxw, |i, j, q| {
            params.inv_lambda * b.ptilde.value(i, q)[0] * b.ptilde.value(j, q)[0]
        });
        local_block(&mut b1_u, du, ds, nq, &jxw, |i, j, q| -dot(b.u.value(i, q), &b.sigma.div(j, q)));
        local_block(&mut b1_gamma, dg, ds, nq, &jxw, |i, j, q| -dot(b.gamma.value(i, q), b.sigma.value(j, q)));
        local_block(&mut b2, dp, dpt, nq, &jxw, |i, j, q| b2c * b.p.value(i, q)[0] * b.ptilde.value(j, q)[0]);
        local_block(&mut dp_mass, dp, dp, nq, &jxw, |i, j, q| storage * b.p.value(i, q)[0] * b.p.value(j, q)[0]);
        local_block(&mut dp_stiff, dp, dp, nq, &jxw, |i, j, q| {
            dot(&mat_vec(&kappa, b.p.grad(j, q)), &b.p.grad(i, q)) / params.mu_f
        });
        local_block(&mut h, dt, dw, nq, &jxw, |i, j, q| params.beta * b.omega.value(j, q)[0] * tr(b.t.value(i, q)));
        for (i, &gi) in ds.iter().enumerate() {
            trace_row[gi] += (0..nq).map(|q| jxw[q] * tr(b.sigma.value(i, q))).sum::<f64>();
        }
        if sources.f.is_some() || sources.m.is_some() || params.g != [0.0, 0.0] {
            for q in 0..nq {
                let x = pf.map_point(rule.points[q]);
                if let Some(f) = &sources.f {
                    let fx = f(x);
                    for (i, &gi) in du.iter().enumerate() {
                        load_f[gi] += jxw[q] * params.rho_s * dot(b.u.value(i, q), &fx);
                    }
                }
                let mx = sources.m.as_ref().map_or(0.0, |m| m(x));
                for (i, &gi) in dp.iter().enumerate() {
                    load_g[gi] += jxw[q] * (-mx * b.p.value(i, q)[0] - params.rho_f * dot(&kg, &b.p.grad(i, q)));
                }
            }
        }
    }
    let (bnd_sigma, bnd_p) = natural_loads(d, natural);
    Ok(BlockSystem {
        a: a.build(),
        b_sigma: b_sigma.build(),
        b_ptilde: b_ptilde.build(),
        c: c.build(),
        b1_u: b1_u.build(),
        b1_gamma: b1_gamma.build(),
        b2: b2.build(),
        dp_mass: dp_mass.build(),
        dp_stiff: dp_stiff.build(),
        h: h.build(),
        trace_row,
        load_f,
        load_g,
        bnd_sigma,
        bnd_p,
    })
}

/// Facet quadrature data: physical basis values of `space` on a boundary
/// facet of its owner cell.
pub(crate) struct FacetTab {
    pub cell: usize,
    pub normal: [f64; 2],
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub basis: CellBasis,
}

pub(crate) fn facet_tab(space: &FESpace, facet: usize, degree: usize) -> FacetTab {
    let mesh = space.mesh();
    let rule = interval_rule(degree).expect("degree in range");
    let (cell, e) = mesh.facets()[facet].owner;
    let (a, dir, _) = crate::elements::reference_edge(e);
    let refs: Vec<[f64; 2]> = rule.points.iter().map(|s| [a[0] + s[0] * dir[0], a[1] + s[0] * dir[1]]).collect();
    let len = mesh.facet_length(facet);
    let tri = TriangleRule { points: refs.clone(), weights: vec![0.0; refs.len()], degree };
    let rt = space.reference_tab(&tri);
    let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).expect("valid mesh");
    let mut basis = CellBasis::default();
    space.tabulate_cell(cell, &rt, &pf, &mut basis);
    FacetTab {
        cell,
        normal: mesh.facet_normal(facet),
        points: refs.iter().map(|p| pf.map_point(*p)).collect(),
        weights: rule.weights.iter().map(|w| w * len).collect(),
        basis,
    }
}

fn natural_loads(d: &Discretization, natural: &NaturalData) -> (Vec<f64>, Vec<f64>) {
    let mesh = &d.mesh;
    let mut bnd_sigma = vec![0.0; d.poro.sigma.ndofs()];
    let mut bnd_p = vec![0.0; d.poro.p.ndofs()];
    let deg = 2 * d.k + 8;
    for f in mesh.boundary_facets() {
        if mesh.facets()[f].tag != BoundaryTag::Gamma {
            continue;
        }
        if let Some(ud) = &natural.displacement {
            let ft = facet_tab(&d.poro.sigma, f, deg);
            let n = ft.normal;
            for (q, x) in ft.points.iter().enumerate() {
                let u = ud(*x);
                for (i, &gi) in d.poro.sigma.cell_dofs(ft.cell).iter().enumerate() {
                    let v = ft.basis.value(i, q);
                    let tn = [v[0] * n[0] + v[1] * n[1], v[2] * n[0] + v[3] * n[1]];
                    bnd_sigma[gi] -= ft.weights[q] * (u[0] * tn[0] + u[1] * tn[1]);
                }
            }
        }
        if let Some(fl) = &natural.flux {
            let ft = facet_tab(&d.poro.p, f, deg);
            let n = ft.normal;
            for (q, x) in ft.points.iter().enumerate() {
                let w = fl(*x);
                let wn = w[0] * n[0] + w[1] * n[1];
                for (i, &gi) in d.poro.p.cell_dofs(ft.cell).iter().enumerate() {
                    bnd_p[gi] -= ft.weights[q] * wn * ft.basis.value(i, q)[0];
                }
            }
        }
    }
    (bnd_sigma, bnd_p)
}

impl BlockSystem {
    /// Monolithic matrix in the full numbering of `layout`.
    pub fn matrix(&self, layout: &Layout, row: PressureRow) -> SparseMatrix {
        use FieldKind::*;
        let n = layout.len();
        let nnz = 2 * (self.b_sigma.nnz() + self.b1_u.nnz() + self.b1_gamma.nnz() + self.b2.nnz() + self.b_ptilde.nnz())
            + self.a.nnz()
            + self.c.nnz()
            + self.dp_mass.nnz()
            + self.dp_stiff.nnz();
        let mut t = TripletBuilder::with_capacity(n, n, nnz);
        let (ot, os, opt, ou, og, op) = (
            layout.offset(Strain),
            layout.offset(Stress),
            layout.offset(TotalPressure),
            layout.offset(Displacement),
            layout.offset(Rotation),
            layout.offset(FluidPressure),
        );
        t.push_block(ot, ot, &self.a);
        t.push_block(os, ot, &self.b_sigma);
        t.push_block(ot, os, &self.b_sigma.transpose());
        t.push_block(opt, ot, &self.b_ptilde);
        t.push_block(ot, opt, &self.b_ptilde.transpose());
        t.push_block(opt, opt, &self.c.scaled(-1.0));
        t.push_block(ou, os, &self.b1_u);
        t.push_block(os, ou, &self.b1_u.transpose());
        t.push_block(og, os, &self.b1_gamma);
        t.push_block(os, og, &self.b1_gamma.transpose());
        t.push_block(opt, op, &self.b2.transpose());
        // The pressure row is divided by the zero-order factor to keep the
        // matrix symmetric.
        t.push_block(op, opt, &self.b2);
        t.push_block(op, op, &self.dp_mass.scaled(-1.0));
        t.push_block(op, op, &self.dp_stiff.scaled(-1.0 / row.zero_order));
        if let Some(m) = layout.multiplier_index() {
            for (j, &v) in self.trace_row.iter().enumerate() {
                if v != 0.0 {
                    t.push(m, os + j, v);
                    t.push(os + j, m, v);
                }
            }
        }
        t.build()
    }

    /// Right-hand side in the full numbering. `omega` feeds `H_omega`;
    /// `extra_p` is added to the pressure load before row scaling.
    pub fn rhs(&self, layout: &Layout, omega: &[f64], trace_target: f64, row: PressureRow, extra_p: Option<&[f64]>) -> Vec<f64> {
        use FieldKind::*;
        let mut b = vec![0.0; layout.len()];
        let ht = layout.range(Strain);
        self.h.mul_vec_into(omega, &mut b[ht]);
        let s = layout.offset(Stress);
        for (i, v) in self.bnd_sigma.iter().enumerate() {
            b[s + i] += v;
        }
        let u = layout.offset(Displacement);
        for (i, v) in self.load_f.iter().enumerate() {
            b[u + i] += v;
        }
        let p = layout.offset(FluidPressure);
        for i in 0..self.load_g.len() {
            let extra = extra_p.map_or(0.0, |e| e[i]);
            b[p + i] = (self.load_g[i] + self.bnd_p[i] + extra) / row.zero_order;
        }
        if let Some(m) = layout.multiplier_index() {
            b[m] = trace_target;
        }
        b
    }

    /// `H` placed in the strain rows of the full poroelastic numbering.
    pub fn h_full(&self, layout: &Layout) -> SparseMatrix {
        let mut t = TripletBuilder::new(layout.len(), self.h.ncols());
        t.push_block(layout.offset(FieldKind::Strain), 0, &self.h);
        t.build()
    }
}

/// `int w_i w_j` on an H1 space.
pub fn mass_matrix(space: &FESpace, degree: usize) -> SparseMatrix {
    let rule = triangle_rule(degree).expect("degree in range");
    let rt = space.reference_tab(&rule);
    let mut cb = CellBasis::default();
    let n = space.ndofs();
    let mut t = TripletBuilder::new(n, n);
    let mesh = space.mesh();
    for cell in 0..mesh.num_cells() {
        let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).expect("valid mesh");
        space.tabulate_cell(cell, &rt, &pf, &mut cb);
        let dofs = space.cell_dofs(cell);
        let comps = cb.ncomp;
        local_block(&mut t, dofs, dofs, cb.nq, &cb.jxw.clone(), |i, j, q| {
            (0..comps).map(|c| cb.value(i, q)[c] * cb.value(j, q)[c]).sum()
        });
    }
    t.build()
}

/// `int s(x) w_i` for a scalar H1 space.
pub fn load_vector(space: &FESpace, degree: usize, s: &dyn Fn([f64; 2]) -> f64) -> Vec<f64> {
    let rule = triangle_rule(degree).expect("degree in range");
    let rt = space.reference_tab(&rule);
    let mut cb = CellBasis::default();
    let mut b = vec![0.0; space.ndofs()];
    let mesh = space.mesh();
    for cell in 0..mesh.num_cells() {
        let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).expect("valid mesh");
        space.tabulate_cell(cell, &rt, &pf, &mut cb);
        for q in 0..cb.nq {
            let v = s(pf.map_point(rule.points[q]));
            for (i, &gi) in space.cell_dofs(cell).iter().enumerate() {
                b[gi] += cb.jxw[q] * v * cb.value(i, q)[0];
            }
        }
    }
    b
}

/// Counts of positivity-floor activations during one assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LawStats {
    pub evaluations: usize,
    pub floored: usize,
}

/// Stress values at every quadrature point of every cell.
fn sigma_at_points(d: &Discretization, rule: &TriangleRule, sigma: &[f64]) -> Vec<Tensor> {
    let rt = d.poro.sigma.reference_tab(rule);
    let mut cb = CellBasis::default();
    let mut loc = Vec::new();
    let mut out = Vec::with_capacity(d.mesh.num_cells() * rule.len());
    for cell in 0..d.mesh.num_cells() {
        let pf = PushForward::for_cell(d.mesh.cell_coords(cell), cell).expect("valid mesh");
        d.poro.sigma.tabulate_cell(cell, &rt, &pf, &mut cb);
        loc.clear();
        loc.extend(d.poro.sigma.cell_dofs(cell).iter().map(|&g| sigma[g]));
        for q in 0..cb.nq {
            let mut s = [0.0; 4];
            cb.eval(&loc, q, &mut s);
            out.push(s);
        }
    }
    out
}

/// `int D(sigma_h) grad w_j . grad w_i` on the concentration space.
pub fn assemble_diffusion_stiffness(
    d: &Discretization,
    law: &DiffusionLaw,
    sigma: &[f64],
) -> Result<(SparseMatrix, LawStats), FormsError> {
    if sigma.len() != d.poro.sigma.ndofs() {
        return Err(FormsError::Dimension { got: sigma.len(), expected: d.poro.sigma.ndofs() });
    }
    let rule = d.rule();
    let rt = d.omega.reference_tab(&rule);
    let sig = sigma_at_points(d, &rule, sigma);
    let mut cb = CellBasis::default();
    let n = d.omega.ndofs();
    let mut t = TripletBuilder::new(n, n);
    let mut stats = LawStats::default();
    let nq = rule.len();
    let mut dq = vec![[0.0; 4]; nq];
    for cell in 0..d.mesh.num_cells() {
        let pf = PushForward::for_cell(d.mesh.cell_coords(cell), cell).expect("valid mesh");
        d.omega.tabulate_cell(cell, &rt, &pf, &mut cb);
        for q in 0..nq {
            let (dd, floored) = law.eval_flagged(&sig[cell * nq + q]).map_err(|source| FormsError::Law { cell, source })?;
            dq[q] = dd;
            stats.evaluations += 1;
            stats.floored += usize::from(floored);
        }
        let dofs = d.omega.cell_dofs(cell);
        local_block(&mut t, dofs, dofs, nq, &cb.jxw, |i, j, q| dot(&mat_vec(&dq[q], cb.grad(j, q)), &cb.grad(i, q)));
    }
    Ok((t.build(), stats))
}

/// Newton coupling block `int (dD/dsigma[psi_j] grad omega) . grad w_i`
/// (omega rows x sigma columns).
pub fn assemble_diffusion_sigma_jacobian(
    d: &Discretization,
    law: &DiffusionLaw,
    sigma: &[f64],
    omega: &[f64],
) -> Result<(SparseMatrix, usize), FormsError> {
    let rule = d.rule();
    let rt_w = d.omega.reference_tab(&rule);
    let rt_s = d.poro.sigma.reference_tab(&rule);
    let mut cw = CellBasis::default();
    let mut cs = CellBasis::default();
    let mut t = TripletBuilder::new(d.omega.ndofs(), d.poro.sigma.ndofs());
    let mut loc_s = Vec::new();
    let mut loc_w = Vec::new();
    let mut kinks = 0;
    let nq = rule.len();
    for cell in 0..d.mesh.num_cells() {
        let pf = PushForward::for_cell(d.mesh.cell_coords(cell), cell).expect("valid mesh");
        d.omega.tabulate_cell(cell, &rt_w, &pf, &mut cw);
        d.poro.sigma.tabulate_cell(cell, &rt_s, &pf, &mut cs);
        let ds = d.poro.sigma.cell_dofs(cell);
        let dw = d.omega.cell_dofs(cell);
        loc_s.clear();
        loc_s.extend(ds.iter().map(|&g| sigma[g]));
        loc_w.clear();
        loc_w.extend(dw.iter().map(|&g| omega[g]));
        // dD[psi_j] grad(omega) at each point.
        let mut flux = vec![[0.0; 2]; ds.len() * nq];
        for q in 0..nq {
            let mut s = [0.0; 4];
            cs.eval(&loc_s, q, &mut s);
            let gw = cw.eval_grad(&loc_w, q);
            for j in 0..ds.len() {
                let psi: Tensor = cs.value(j, q).try_into().expect("tensor basis");
                let der = law.eval_derivative(&s, &psi).map_err(|source| FormsError::Law { cell, source })?;
                kinks += usize::from(der.kink);
                flux[j * nq + q] = mat_vec(&der.value, gw);
            }
        }
        local_block(&mut t, dw, ds, nq, &cw.jxw, |i, j, q| dot(&flux[j * nq + q], &cw.grad(i, q)));
    }
    Ok((t.build(), kinks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::BoundaryPartition;

    fn disc(n: usize, k: usize) -> Discretization {
        let mesh = Arc::new(Mesh::unit_square(n, BoundaryPartition::all_gamma()).unwrap());
        Discretization::new(mesh, k).unwrap()
    }

    #[test]
    fn params_validation() {
        let mut p = MaterialParams::unity();
        assert!(p.validate().is_ok());
        p.alpha = 0.0;
        assert!(p.validate().is_err());
        let mut p = MaterialParams::unity();
        p.inv_lambda = f64::INFINITY;
        assert!(p.validate().is_err());
        let mut p = MaterialParams::unity();
        p.kappa = Permeability::Tensor([[1.0, 2.0], [2.0, 1.0]]);
        assert!(p.validate().is_err());
        let toml_like = serde_json::json!({
            "mu_s": 1.0, "inv_lambda": 0.0, "c0": 0.0, "alpha": 1.0, "kappa": [[2.0, 0.5], [0.5, 1.0]],
            "mu_f": 1.0, "rho_s": 1.0, "rho_f": 1.0, "g": [0.0, -9.8], "beta": 0.0, "phi": 1.0
        });
        let q: MaterialParams = serde_json::from_value(toml_like).unwrap();
        assert!(q.validate().is_ok());
        assert_eq!(q.kappa.matrix(), [2.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn reduction_round_trip() {
        let mask = vec![None, Some(2.0), None, Some(-1.0)];
        let r = Reduction::from_mask(&mask);
        assert_eq!((r.n_free(), r.fixed().len()), (2, 2));
        let a = SparseMatrix::from_dense(&nalgebra::DMatrix::from_row_slice(
            4,
            4,
            &[4.0, 1.0, 0.0, 2.0, 1.0, 4.0, 1.0, 0.0, 0.0, 1.0, 4.0, 1.0, 2.0, 0.0, 1.0, 4.0],
        ));
        let (ff, fc) = r.split(&a);
        let fv = r.fixed_values(&mask);
        let b = vec![1.0, 0.0, 3.0, 0.0];
        let rhs = r.lifted_rhs(&b, &fc, &fv);
        let xf = crate::linsolve::solve(&ff, &rhs).unwrap();
        let x = r.expand(&xf, &fv);
        let ax = a.mul_vec(&x);
        assert!((ax[0] - 1.0).abs() < 1e-14 && (ax[2] - 3.0).abs() < 1e-14);
        assert_eq!((x[1], x[3]), (2.0, -1.0));
    }

    #[test]
    fn block_shapes_and_symmetry() {
        let mut d = disc(2, 0);
        d.attach_trace_constraint(0.0).unwrap();
        let bs = assemble_poro(&d, &MaterialParams::unity(), &Sources::default(), &NaturalData::default()).unwrap();
        let layout = d.layout();
        assert_eq!(bs.b1_u.nrows(), d.poro.u.ndofs());
        assert_eq!(bs.b1_u.ncols(), d.poro.sigma.ndofs());
        let k = bs.matrix(&layout, PressureRow::STEADY);
        assert_eq!(k.nrows(), layout.len());
        assert!(k.is_symmetric(1e-15));
        assert!(bs.a.is_symmetric(0.0) && bs.c.is_symmetric(0.0) && bs.dp_stiff.is_symmetric(1e-15));
        // Omega = 0 gives a zero H load.
        let b = bs.rhs(&layout, &vec![0.0; d.omega.ndofs()], 0.0, PressureRow::STEADY, None);
        assert!(b.iter().all(|v| *v == 0.0));
        // Strain mass on one cell: total of A against constant tensors.
        let area: f64 = (0..d.mesh.num_cells()).map(|c| d.mesh.cell_area(c)).sum();
        assert!((area - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nearly_incompressible_c_block_is_tiny() {
        let d = disc(2, 0);
        let mut p = MaterialParams::unity();
        p.inv_lambda = 1e-8;
        let bs = assemble_poro(&d, &p, &Sources::default(), &NaturalData::default()).unwrap();
        let area = d.mesh.cell_area(0);
        assert!(bs.c.max_abs() <= 1e-8 * area * (1.0 + 1e-12));
        assert!(bs.c.nnz() > 0);
    }

    #[test]
    fn diffusion_stiffness_constant_nullspace() {
        let d = disc(1, 0);
        let law = DiffusionLaw::Constant { d0: 1.0 };
        let (k, _) = assemble_diffusion_stiffness(&d, &law, &vec![0.0; d.poro.sigma.ndofs()]).unwrap();
        for i in 0..k.nrows() {
            assert!(k.row(i).map(|(_, v)| v).sum::<f64>().abs() < 1e-14);
        }
        // Zero stress with IsoExp equals the constant law with 2 D0.
        let iso = DiffusionLaw::IsoExp { d0: 0.3, eta0: 2.0 };
        let (ki, stats) = assemble_diffusion_stiffness(&d, &iso, &vec![0.0; d.poro.sigma.ndofs()]).unwrap();
        let (kc, _) = assemble_diffusion_stiffness(&d, &DiffusionLaw::Constant { d0: 0.6 }, &vec![0.0; d.poro.sigma.ndofs()]).unwrap();
        assert!(SparseMatrix::lin_comb(1.0, &ki, -1.0, &kc).max_abs() < 1e-15);
        assert_eq!(stats.floored, 0);
    }

    #[test]
    fn natural_displacement_load_matches_edge_moments() {
        // u* = (1, 0): load on sigma row 0 equals -int_Gamma tau_0 . n,
        // i.e. minus the lowest edge moment on each boundary edge.
        let d = disc(2, 0);
        let nat = NaturalData { displacement: Some(Arc::new(|_| [1.0, 0.0])), flux: None };
        let bs = assemble_poro(&d, &MaterialParams::unity(), &Sources::default(), &nat).unwrap();
        let nd = d.poro.sigma.ndofs() / 2;
        for f in d.mesh.boundary_facets() {
            assert!((bs.bnd_sigma[f * 2] + 1.0).abs() < 1e-14, "facet {f}");
            assert!(bs.bnd_sigma[f * 2 + 1].abs() < 1e-14);
            assert_eq!(bs.bnd_sigma[nd + f * 2], 0.0);
        }
        let zero = NaturalData { displacement: Some(Arc::new(|_| [0.0, 0.0])), flux: Some(Arc::new(|_| [0.0, 0.0])) };
        let bz = assemble_poro(&d, &MaterialParams::unity(), &Sources::default(), &zero).unwrap();
        assert!(bz.bnd_sigma.iter().chain(&bz.bnd_p).all(|v| *v == 0.0));
    }
}
