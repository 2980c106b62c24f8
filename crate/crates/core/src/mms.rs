//! Manufactured solutions, error norms and convergence tables.

use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::constitutive::{DiffusionLaw, LawError, Tensor};
use crate::coupler::{CoupledProblem, CoupledSolution, CouplerError, SolverOptions};
use crate::elements::PushForward;
use crate::forms::{Discretization, MaterialParams, NaturalData, Sources};
use crate::mesh::{BoundaryPartition, BoundaryTag, Mesh, MeshError};
use crate::quadrature::{triangle_rule, MAX_TRIANGLE_DEGREE};
use crate::spaces::{BoundarySelector, CellBasis, FESpace, FieldKind, SpaceError};

/// Closed-form primary fields and their derivatives.
///
/// Tensors are row-major `[xx, xy, yx, yy]`; `grad_u` has rows indexed by
/// the component of `u`.
pub trait Primitives: Send + Sync {
    fn u(&self, x: [f64; 2]) -> [f64; 2];
    fn grad_u(&self, x: [f64; 2]) -> Tensor;
    /// Hessians of `u_1` and `u_2`.
    fn hess_u(&self, x: [f64; 2]) -> [Tensor; 2];
    /// `lambda_s div u`, kept separate so the incompressible limit is exact.
    fn lambda_div_u(&self, x: [f64; 2]) -> f64;
    fn grad_lambda_div_u(&self, x: [f64; 2]) -> [f64; 2];
    fn p(&self, x: [f64; 2]) -> f64;
    fn grad_p(&self, x: [f64; 2]) -> [f64; 2];
    fn hess_p(&self, x: [f64; 2]) -> Tensor;
    fn omega(&self, x: [f64; 2]) -> f64;
    fn grad_omega(&self, x: [f64; 2]) -> [f64; 2];
    fn hess_omega(&self, x: [f64; 2]) -> Tensor;
}

/// Manufactured fields of the first numerical example.
#[derive(Debug, Clone, Copy)]
pub struct Example1Fields {
    pub inv_lambda: f64,
}

impl Primitives for Example1Fields {
    fn u(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let il = self.inv_lambda;
        [0.1 * (-x.cos() * y.sin() + x * x * il), 0.1 * (x.sin() * y.cos() + y * y * il)]
    }

    fn grad_u(&self, [x, y]: [f64; 2]) -> Tensor {
        let il = self.inv_lambda;
        [
            0.1 * (x.sin() * y.sin() + 2.0 * x * il),
            -0.1 * x.cos() * y.cos(),
            0.1 * x.cos() * y.cos(),
            0.1 * (-x.sin() * y.sin() + 2.0 * y * il),
        ]
    }

    fn hess_u(&self, [x, y]: [f64; 2]) -> [Tensor; 2] {
        let il = self.inv_lambda;
        let (sx, cx, sy, cy) = (x.sin(), x.cos(), y.sin(), y.cos());
        let h1xy = 0.1 * sx * cy;
        let h2xy = -0.1 * cx * sy;
        [
            [0.1 * (cx * sy + 2.0 * il), h1xy, h1xy, 0.1 * cx * sy],
            [-0.1 * sx * cy, h2xy, h2xy, 0.1 * (-sx * cy + 2.0 * il)],
        ]
    }

    fn lambda_div_u(&self, [x, y]: [f64; 2]) -> f64 {
        0.2 * (x + y)
    }

    fn grad_lambda_div_u(&self, _: [f64; 2]) -> [f64; 2] {
        [0.2, 0.2]
    }

    fn p(&self, [x, y]: [f64; 2]) -> f64 {
        let pi = std::f64::consts::PI;
        (pi * x).sin() * (pi * y).sin()
    }

    fn grad_p(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let pi = std::f64::consts::PI;
        [pi * (pi * x).cos() * (pi * y).sin(), pi * (pi * x).sin() * (pi * y).cos()]
    }

    fn hess_p(&self, [x, y]: [f64; 2]) -> Tensor {
        let pi = std::f64::consts::PI;
        let d = -pi * pi * (pi * x).sin() * (pi * y).sin();
        let o = pi * pi * (pi * x).cos() * (pi * y).cos();
        [d, o, o, d]
    }

    fn omega(&self, [x, y]: [f64; 2]) -> f64 {
        let pi = std::f64::consts::PI;
        x.exp() + (pi * x).cos() * (pi * y).cos()
    }

    fn grad_omega(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let pi = std::f64::consts::PI;
        [x.exp() - pi * (pi * x).sin() * (pi * y).cos(), -pi * (pi * x).cos() * (pi * y).sin()]
    }

    fn hess_omega(&self, [x, y]: [f64; 2]) -> Tensor {
        let pi = std::f64::consts::PI;
        let cc = pi * pi * (pi * x).cos() * (pi * y).cos();
        let ss = pi * pi * (pi * x).sin() * (pi * y).sin();
        [x.exp() - cc, ss, ss, -cc]
    }
}

/// Affine `u`, `p`, `omega`: every derived field is representable for `k >= 1`.
#[derive(Debug, Clone, Copy)]
pub struct AffineFields {
    /// `u_i = a[i][0] + a[i][1] x + a[i][2] y`
    pub u: [[f64; 3]; 2],
    pub p: [f64; 3],
    pub omega: [f64; 3],
    pub inv_lambda: f64,
}

fn affine(c: &[f64; 3], [x, y]: [f64; 2]) -> f64 {
    c[0] + c[1] * x + c[2] * y
}

impl Primitives for AffineFields {
    fn u(&self, x: [f64; 2]) -> [f64; 2] {
        [affine(&self.u[0], x), affine(&self.u[1], x)]
    }

    fn grad_u(&self, _: [f64; 2]) -> Tensor {
        [self.u[0][1], self.u[0][2], self.u[1][1], self.u[1][2]]
    }

    fn hess_u(&self, _: [f64; 2]) -> [Tensor; 2] {
        [[0.0; 4]; 2]
    }

    fn lambda_div_u(&self, _: [f64; 2]) -> f64 {
        (self.u[0][1] + self.u[1][2]) / self.inv_lambda
    }

    fn grad_lambda_div_u(&self, _: [f64; 2]) -> [f64; 2] {
        [0.0; 2]
    }

    fn p(&self, x: [f64; 2]) -> f64 {
        affine(&self.p, x)
    }

    fn grad_p(&self, _: [f64; 2]) -> [f64; 2] {
        [self.p[1], self.p[2]]
    }

    fn hess_p(&self, _: [f64; 2]) -> Tensor {
        [0.0; 4]
    }

    fn omega(&self, x: [f64; 2]) -> f64 {
        affine(&self.omega, x)
    }

    fn grad_omega(&self, _: [f64; 2]) -> [f64; 2] {
        [self.omega[1], self.omega[2]]
    }

    fn hess_omega(&self, _: [f64; 2]) -> Tensor {
        [0.0; 4]
    }
}

/// Exact fields together with the derived quantities and forcings.
#[derive(Clone)]
pub struct ManufacturedCase {
    pub params: MaterialParams,
    pub law: DiffusionLaw,
    pub fields: Arc<dyn Primitives>,
    /// Spatial dimension of the case.
    pub dim: usize,
}

fn mv(a: &Tensor, v: [f64; 2]) -> [f64; 2] {
    [a[0] * v[0] + a[1] * v[1], a[2] * v[0] + a[3] * v[1]]
}

/// Default law of the first example.
pub fn example1_law() -> DiffusionLaw {
    DiffusionLaw::ExpTrace { d0: 0.01, eta0: 1.0, eta1: 0.01 }
}

/// The first example with the given constants and law.
pub fn example1_case(params: MaterialParams, law: DiffusionLaw) -> ManufacturedCase {
    ManufacturedCase::new(params, law, Arc::new(Example1Fields { inv_lambda: params.inv_lambda }))
}

impl ManufacturedCase {
    pub fn new(params: MaterialParams, law: DiffusionLaw, fields: Arc<dyn Primitives>) -> Self {
        Self { params, law, fields, dim: 2 }
    }

    pub fn u(&self, x: [f64; 2]) -> [f64; 2] {
        self.fields.u(x)
    }

    pub fn p(&self, x: [f64; 2]) -> f64 {
        self.fields.p(x)
    }

    pub fn grad_p(&self, x: [f64; 2]) -> [f64; 2] {
        self.fields.grad_p(x)
    }

    pub fn omega(&self, x: [f64; 2]) -> f64 {
        self.fields.omega(x)
    }

    pub fn grad_omega(&self, x: [f64; 2]) -> [f64; 2] {
        self.fields.grad_omega(x)
    }

    /// Symmetric gradient of `u`.
    pub fn t(&self, x: [f64; 2]) -> Tensor {
        let g = self.fields.grad_u(x);
        let o = 0.5 * (g[1] + g[2]);
        [g[0], o, o, g[3]]
    }

    /// Skew part of the displacement gradient.
    pub fn gamma(&self, x: [f64; 2]) -> Tensor {
        let g = self.fields.grad_u(x);
        let s = 0.5 * (g[1] - g[2]);
        [0.0, s, -s, 0.0]
    }

    pub fn ptilde(&self, x: [f64; 2]) -> f64 {
        self.params.alpha * self.fields.p(x) - self.fields.lambda_div_u(x)
    }

    fn grad_ptilde(&self, x: [f64; 2]) -> [f64; 2] {
        let gp = self.fields.grad_p(x);
        let gl = self.fields.grad_lambda_div_u(x);
        [self.params.alpha * gp[0] - gl[0], self.params.alpha * gp[1] - gl[1]]
    }

    pub fn sigma(&self, x: [f64; 2]) -> Tensor {
        let t = self.t(x);
        let iso = self.ptilde(x) + self.params.beta * self.fields.omega(x);
        let m2 = 2.0 * self.params.mu_s;
        [m2 * t[0] - iso, m2 * t[1], m2 * t[2], m2 * t[3] - iso]
    }

    /// Partial derivatives `[d sigma/dx, d sigma/dy]`.
    pub fn grad_sigma(&self, x: [f64; 2]) -> [Tensor; 2] {
        let h = self.fields.hess_u(x);
        let gpt = self.grad_ptilde(x);
        let gw = self.fields.grad_omega(x);
        let m2 = 2.0 * self.params.mu_s;
        let beta = self.params.beta;
        let mut out = [[0.0; 4]; 2];
        for (k, o) in out.iter_mut().enumerate() {
            // d_k t_ij = (d_jk u_i + d_ik u_j) / 2
            let dt = |i: usize, j: usize| 0.5 * (h[i][2 * j + k] + h[j][2 * i + k]);
            let iso = gpt[k] + beta * gw[k];
            *o = [m2 * dt(0, 0) - iso, m2 * dt(0, 1), m2 * dt(1, 0), m2 * dt(1, 1) - iso];
        }
        out
    }

    /// Row-wise divergence of the exact stress.
    pub fn div_sigma(&self, x: [f64; 2]) -> [f64; 2] {
        let [dx, dy] = self.grad_sigma(x);
        [dx[0] + dy[1], dx[2] + dy[3]]
    }

    /// Body load `f = -div sigma / rho_s`.
    pub fn f(&self, x: [f64; 2]) -> [f64; 2] {
        let d = self.div_sigma(x);
        [-d[0] / self.params.rho_s, -d[1] / self.params.rho_s]
    }

    /// Darcy flux vector `kappa/mu_f grad p - rho_f kappa g`.
    pub fn flux(&self, x: [f64; 2]) -> [f64; 2] {
        let k = self.params.kappa.matrix();
        let a = mv(&k, self.fields.grad_p(x));
        let b = mv(&k, self.params.g);
        let (mu_f, rho_f) = (self.params.mu_f, self.params.rho_f);
        [a[0] / mu_f - rho_f * b[0], a[1] / mu_f - rho_f * b[1]]
    }

    /// Fluid source `m`.
    pub fn m(&self, x: [f64; 2]) -> f64 {
        let pr = &self.params;
        let k = pr.kappa.matrix();
        let hp = self.fields.hess_p(x);
        let div_flux = (k[0] * hp[0] + k[1] * hp[2] + k[2] * hp[1] + k[3] * hp[3]) / pr.mu_f;
        pr.storage() * self.fields.p(x) - pr.alpha * pr.inv_lambda * self.ptilde(x) - div_flux
    }

    /// Tracer source `ell`.
    pub fn ell(&self, x: [f64; 2]) -> Result<f64, LawError> {
        let s = self.sigma(x);
        let d = self.law.eval(&s)?;
        let gs = self.grad_sigma(x);
        let gw = self.fields.grad_omega(x);
        let hw = self.fields.hess_omega(x);
        // div(D grad w) = sum_i (d_i D_ij) d_j w + D_ij d_ij w
        let mut div = 0.0;
        for (i, gsi) in gs.iter().enumerate() {
            let dd = self.law.eval_derivative(&s, gsi)?.value;
            div += dd[2 * i] * gw[0] + dd[2 * i + 1] * gw[1];
        }
        div += d[0] * hw[0] + d[1] * hw[2] + d[2] * hw[1] + d[3] * hw[3];
        let phi = self.params.phi;
        Ok((phi * self.fields.omega(x) - div) / phi)
    }

    /// Forcings as closures for the assembler. Law failures surface as NaN.
    pub fn sources(&self) -> Sources {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        Sources {
            f: Some(Arc::new(move |x| a.f(x))),
            m: Some(Arc::new(move |x| b.m(x))),
            ell: Some(Arc::new(move |x| c.ell(x).unwrap_or(f64::NAN))),
        }
    }

    pub fn natural(&self) -> NaturalData {
        let (a, b) = (self.clone(), self.clone());
        NaturalData { displacement: Some(Arc::new(move |x| a.u(x))), flux: Some(Arc::new(move |x| b.flux(x))) }
    }

    /// `int tr(sigma)` over the mesh with an over-integrating rule.
    pub fn trace_integral(&self, mesh: &Mesh) -> f64 {
        let rule = triangle_rule(MAX_TRIANGLE_DEGREE).expect("supported degree");
        let mut total = 0.0;
        for c in 0..mesh.num_cells() {
            let pf = PushForward::new(mesh.cell_coords(c)).expect("valid mesh");
            let det = pf.det.abs();
            for (p, &w) in rule.points.iter().zip(&rule.weights) {
                let s = self.sigma(pf.map_point(*p));
                total += w * det * (s[0] + s[3]);
            }
        }
        total
    }

    /// Builds the coupled problem: Dirichlet concentration on the whole
    /// boundary, exact normal stress and fluid pressure on `Sigma` facets,
    /// natural data on `Gamma` facets. Without `Sigma` facets the trace
    /// constraint is attached at the exact value.
    pub fn problem(&self, mesh: Arc<Mesh>, k: usize) -> Result<CoupledProblem, CouplerError> {
        let mut disc = Discretization::new(mesh.clone(), k)?;
        let fields = self.fields.clone();
        let forms = |e: SpaceError| CouplerError::Forms(e.into());
        disc.omega_mut().apply_dirichlet(&BoundarySelector::All, |x| fields.omega(x)).map_err(forms)?;
        let sigma_side = BoundarySelector::Tag(BoundaryTag::Sigma);
        if mesh.boundary_facets().any(|f| mesh.facets()[f].tag == BoundaryTag::Sigma) {
            let case = self.clone();
            let normal = box_normal(&mesh);
            let traction = move |x: [f64; 2]| {
                let (s, n) = (case.sigma(x), normal(x));
                [s[0] * n[0] + s[1] * n[1], s[2] * n[0] + s[3] * n[1]]
            };
            disc.poro.get_mut(FieldKind::Stress).apply_normal_trace_bc(&sigma_side, traction).map_err(forms)?;
            disc.poro.get_mut(FieldKind::FluidPressure).apply_dirichlet(&sigma_side, |x| fields.p(x)).map_err(forms)?;
        } else {
            disc.attach_trace_constraint(self.trace_integral(&mesh))?;
        }
        CoupledProblem::new(disc, self.params, self.law.clone(), self.sources(), self.natural())
    }
}

/// Outward normal of the axis-aligned bounding box at a boundary point.
/// Edge quadrature points never sit on a corner, so one side matches.
fn box_normal(mesh: &Mesh) -> impl Fn([f64; 2]) -> [f64; 2] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in mesh.vertices() {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let tol = 1e-10 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    move |x| {
        if (x[1] - lo[1]).abs() <= tol {
            [0.0, -1.0]
        } else if (x[0] - hi[0]).abs() <= tol {
            [1.0, 0.0]
        } else if (x[1] - hi[1]).abs() <= tol {
            [0.0, 1.0]
        } else {
            [-1.0, 0.0]
        }
    }
}

/// The seven error measures.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ErrorNorms {
    pub e0_t: f64,
    pub ediv_sig: f64,
    pub e0_ptilde: f64,
    pub e0_u: f64,
    pub e0_gam: f64,
    pub e1_p: f64,
    pub e1_om: f64,
}

impl ErrorNorms {
    pub const NAMES: [&'static str; 7] = ["e0_t", "ediv_sig", "e0_ptilde", "e0_u", "e0_gam", "e1_p", "e1_om"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.e0_t, self.ediv_sig, self.e0_ptilde, self.e0_u, self.e0_gam, self.e1_p, self.e1_om]
    }

    pub fn max(&self) -> f64 {
        self.as_array().into_iter().fold(0.0, f64::max)
    }
}

/// Per-cell basis tabulation of one discrete field.
pub(crate) struct FieldEval<'a> {
    space: &'a FESpace,
    coeffs: &'a [f64],
    rt: crate::spaces::ReferenceTab,
    pub(crate) cb: CellBasis,
    pub(crate) loc: Vec<f64>,
}

impl<'a> FieldEval<'a> {
    pub(crate) fn new(space: &'a FESpace, coeffs: &'a [f64], rule: &crate::quadrature::TriangleRule) -> Self {
        Self { space, coeffs, rt: space.reference_tab(rule), cb: CellBasis::default(), loc: Vec::new() }
    }

    pub(crate) fn cell(&mut self, cell: usize, pf: &PushForward) {
        self.space.tabulate_cell(cell, &self.rt, pf, &mut self.cb);
        self.loc.clear();
        self.loc.extend(self.space.cell_dofs(cell).iter().map(|&g| self.coeffs[g]));
    }
}

/// Errors of a discrete solution against exact fields, integrated with
/// a rule of degree `min(2k + 8, 12)`.
pub fn error_norms(disc: &Discretization, sol: &CoupledSolution, case: &ManufacturedCase) -> ErrorNorms {
    let deg = (2 * disc.k + 8).min(MAX_TRIANGLE_DEGREE);
    let rule = triangle_rule(deg).expect("supported degree");
    let p = &disc.poro;
    let mut ev = [
        FieldEval::new(&p.t, sol.field(FieldKind::Strain), &rule),
        FieldEval::new(&p.sigma, sol.field(FieldKind::Stress), &rule),
        FieldEval::new(&p.ptilde, sol.field(FieldKind::TotalPressure), &rule),
        FieldEval::new(&p.u, sol.field(FieldKind::Displacement), &rule),
        FieldEval::new(&p.gamma, sol.field(FieldKind::Rotation), &rule),
        FieldEval::new(&p.p, sol.field(FieldKind::FluidPressure), &rule),
        FieldEval::new(&disc.omega, sol.field(FieldKind::Concentration), &rule),
    ];
    let mut acc = [0.0f64; 7];
    let mut buf = [0.0; 4];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for cell in 0..disc.mesh.num_cells() {
        let pf = PushForward::for_cell(disc.mesh.cell_coords(cell), cell).expect("valid mesh");
        for e in ev.iter_mut() {
            e.cell(cell, &pf);
        }
        for q in 0..rule.len() {
            let x = pf.map_point(rule.points[q]);
            let w = ev[0].cb.jxw[q];
            let val = |e: &FieldEval, out: &mut [f64; 4]| e.cb.eval(&e.loc, q, out);

            val(&ev[0], &mut buf);
            acc[0] += w * sq(&buf, &case.t(x));

            val(&ev[1], &mut buf);
            let dh = ev[1].cb.eval_div(&ev[1].loc, q);
            acc[1] += w * (sq(&buf, &case.sigma(x)) + sq(&dh, &case.div_sigma(x)));

            val(&ev[2], &mut buf);
            acc[2] += w * sq(&buf[..1], &[case.ptilde(x)]);

            val(&ev[3], &mut buf);
            acc[3] += w * sq(&buf[..2], &case.u(x));

            val(&ev[4], &mut buf);
            acc[4] += w * sq(&buf, &case.gamma(x));

            val(&ev[5], &mut buf);
            let gp = ev[5].cb.eval_grad(&ev[5].loc, q);
            acc[5] += w * (sq(&buf[..1], &[case.p(x)]) + sq(&gp, &case.grad_p(x)));

            val(&ev[6], &mut buf);
            let gw = ev[6].cb.eval_grad(&ev[6].loc, q);
            acc[6] += w * (sq(&buf[..1], &[case.omega(x)]) + sq(&gw, &case.grad_omega(x)));
        }
    }
    let r = acc.map(f64::sqrt);
    ErrorNorms { e0_t: r[0], ediv_sig: r[1], e0_ptilde: r[2], e0_u: r[3], e0_gam: r[4], e1_p: r[5], e1_om: r[6] }
}

/// One mesh level of a convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct LevelResult {
    pub n: usize,
    pub dofs: usize,
    pub h: f64,
    pub errors: ErrorNorms,
    /// Rates against the previous level (absent on the first).
    pub rates: Option<[f64; 7]>,
    pub iterations: usize,
    pub seconds: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub k: usize,
    pub dim: usize,
    pub law: String,
    pub rows: Vec<LevelResult>,
    /// Set when some level failed; the rows stop before it.
    pub failure: Option<String>,
}

pub const CSV_HEADER: &str = "dof,h,e0_t,rate,ediv_sig,rate,e0_ptilde,rate,e0_u,rate,e0_gam,rate,e1_p,rate,e1_om,rate";

/// `log(e_prev / e) / log(h_prev / h)`; equals `log2(e_prev / e)` under h-halving.
pub fn rate(e_prev: f64, e: f64, h_prev: f64, h: f64) -> f64 {
    (e_prev / e).ln() / (h_prev / h).ln()
}

impl ConvergenceReport {
    pub fn is_partial(&self) -> bool {
        self.failure.is_some()
    }

    /// Rates of the finest pair.
    pub fn last_rates(&self) -> Option<[f64; 7]> {
        self.rows.last().and_then(|r| r.rates)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for row in &self.rows {
            write!(w, "{},{:.6e}", row.dofs, row.h)?;
            let e = row.errors.as_array();
            for (i, ei) in e.iter().enumerate() {
                match row.rates {
                    Some(r) => write!(w, ",{ei:.6e},{:.4}", r[i])?,
                    None => write!(w, ",{ei:.6e},")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut v = Vec::new();
        self.write_csv(&mut v).expect("writing to a Vec");
        String::from_utf8(v).expect("ascii output")
    }
}

/// Solves the case on `unit_square(n)` for each `n` and tabulates errors.
/// Mesh sizes should double from one level to the next.
pub fn run_convergence(
    case: &ManufacturedCase,
    k: usize,
    levels: &[usize],
    opts: &SolverOptions,
) -> Result<ConvergenceReport, MeshError> {
    run_convergence_on(case, k, levels, opts, BoundaryPartition::all_gamma())
}

/// As [`run_convergence`] with an arbitrary boundary partition.
pub fn run_convergence_on(
    case: &ManufacturedCase,
    k: usize,
    levels: &[usize],
    opts: &SolverOptions,
    partition: BoundaryPartition,
) -> Result<ConvergenceReport, MeshError> {
    run_convergence_with(case, k, levels, opts, partition, |_, _, _| {})
}

/// Full form: `on_level` sees every solved level with its problem and solution.
pub fn run_convergence_with(
    case: &ManufacturedCase,
    k: usize,
    levels: &[usize],
    opts: &SolverOptions,
    partition: BoundaryPartition,
    mut on_level: impl FnMut(&LevelResult, &CoupledProblem, &CoupledSolution),
) -> Result<ConvergenceReport, MeshError> {
    let mut report = ConvergenceReport { k, dim: case.dim, law: case.law.name().to_string(), rows: Vec::new(), failure: None };
    for &n in levels {
        let start = Instant::now();
        let mesh = Arc::new(Mesh::unit_square(n, partition)?);
        let solved = case.problem(mesh, k).and_then(|mut pb| {
            let sol = pb.solve(opts, None, None)?;
            Ok((pb, sol))
        });
        let (pb, sol) = match solved {
            Ok(v) => v,
            Err(e) => {
                log::warn!("level n = {n} failed: {e}");
                report.failure = Some(format!("n = {n}: {e}"));
                break;
            }
        };
        let errors = error_norms(pb.disc(), &sol, case);
        let h = pb.disc().mesh.h();
        let rates = report.rows.last().map(|prev: &LevelResult| {
            let (a, b) = (prev.errors.as_array(), errors.as_array());
            std::array::from_fn(|i| rate(a[i], b[i], prev.h, h))
        });
        let row = LevelResult {
            n,
            dofs: pb.layout().len() + pb.disc().omega.ndofs(),
            h,
            errors,
            rates,
            iterations: sol.iterations(),
            seconds: start.elapsed().as_secs_f64(),
            converged: sol.converged,
        };
        log::info!("n = {n}: dofs {}, {} iterations, {:.1}s", row.dofs, row.iterations, row.seconds);
        on_level(&row, &pb, &sol);
        report.rows.push(row);
    }
    Ok(report)
}
