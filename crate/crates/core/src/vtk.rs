//! Legacy ASCII VTK output of meshes and solution snapshots.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::constitutive::{sym_eigen, trace, DiffusionLaw, Tensor};
use crate::coupler::CoupledSolution;
use crate::elements::PushForward;
use crate::forms::Discretization;
use crate::mesh::Mesh;
use crate::mms::FieldEval;
use crate::quadrature::TriangleRule;
use crate::spaces::FieldKind;

const VTK_TRIANGLE: u32 = 5;

fn point_rule(points: Vec<[f64; 2]>) -> TriangleRule {
    let weights = vec![1.0; points.len()];
    TriangleRule { points, weights, degree: 0 }
}

fn write_geometry(w: &mut impl Write, mesh: &Mesh, title: &str) -> io::Result<()> {
    writeln!(w, "# vtk DataFile Version 2.0")?;
    writeln!(w, "{}", title.lines().next().unwrap_or(""))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.num_vertices())?;
    for v in mesh.vertices() {
        writeln!(w, "{:e} {:e} 0", v[0], v[1])?;
    }
    let nc = mesh.num_cells();
    writeln!(w, "CELLS {} {}", nc, 4 * nc)?;
    for c in mesh.cells() {
        writeln!(w, "3 {} {} {}", c[0], c[1], c[2])?;
    }
    writeln!(w, "CELL_TYPES {nc}")?;
    for _ in 0..nc {
        writeln!(w, "{VTK_TRIANGLE}")?;
    }
    Ok(())
}

/// Writes the bare triangulation.
pub fn write_mesh(w: &mut impl Write, mesh: &Mesh) -> io::Result<()> {
    write_geometry(w, mesh, "porodiff mesh")
}

/// Cell-wise quantities evaluated at the centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellValues {
    pub ptilde: Vec<f64>,
    /// Full stress tensor per cell, row-major.
    pub sigma: Vec<Tensor>,
    /// Eigenvalues of the diffusivity in ascending order.
    pub d_eigen: Vec<[f64; 2]>,
}

/// Vertex values. Discontinuous displacements are averaged over the
/// cells sharing a vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValues {
    pub p: Vec<f64>,
    pub omega: Vec<f64>,
    pub u: Vec<[f64; 2]>,
}

pub fn cell_values(disc: &Discretization, sol: &CoupledSolution, law: &DiffusionLaw) -> CellValues {
    let rule = point_rule(vec![[1.0 / 3.0, 1.0 / 3.0]]);
    let mut s_ev = FieldEval::new(&disc.poro.sigma, sol.field(FieldKind::Stress), &rule);
    let mut pt_ev = FieldEval::new(&disc.poro.ptilde, sol.field(FieldKind::TotalPressure), &rule);
    let nc = disc.mesh.num_cells();
    let mut out = CellValues { ptilde: Vec::with_capacity(nc), sigma: Vec::with_capacity(nc), d_eigen: Vec::with_capacity(nc) };
    let mut buf = [0.0; 4];
    for cell in 0..nc {
        let pf = PushForward::for_cell(disc.mesh.cell_coords(cell), cell).expect("valid mesh");
        s_ev.cell(cell, &pf);
        pt_ev.cell(cell, &pf);
        s_ev.cb.eval(&s_ev.loc, 0, &mut buf);
        let s = buf;
        pt_ev.cb.eval(&pt_ev.loc, 0, &mut buf);
        out.ptilde.push(buf[0]);
        out.sigma.push(s);
        // A failing law evaluation is recorded as NaN rather than aborting output.
        let d = law.eval(&s).unwrap_or([f64::NAN; 4]);
        out.d_eigen.push(sym_eigen(&d).0);
    }
    out
}

pub fn point_values(disc: &Discretization, sol: &CoupledSolution) -> PointValues {
    let rule = point_rule(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let mesh = &disc.mesh;
    let nv = mesh.num_vertices();
    let mut p_ev = FieldEval::new(&disc.poro.p, sol.field(FieldKind::FluidPressure), &rule);
    let mut w_ev = FieldEval::new(&disc.omega, sol.field(FieldKind::Concentration), &rule);
    let mut u_ev = FieldEval::new(&disc.poro.u, sol.field(FieldKind::Displacement), &rule);
    let mut out = PointValues { p: vec![0.0; nv], omega: vec![0.0; nv], u: vec![[0.0; 2]; nv] };
    let mut count = vec![0usize; nv];
    let mut buf = [0.0; 4];
    for (cell, verts) in mesh.cells().iter().enumerate() {
        let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).expect("valid mesh");
        p_ev.cell(cell, &pf);
        w_ev.cell(cell, &pf);
        u_ev.cell(cell, &pf);
        for (q, &v) in verts.iter().enumerate() {
            p_ev.cb.eval(&p_ev.loc, q, &mut buf);
            out.p[v] = buf[0];
            w_ev.cb.eval(&w_ev.loc, q, &mut buf);
            out.omega[v] = buf[0];
            u_ev.cb.eval(&u_ev.loc, q, &mut buf);
            out.u[v][0] += buf[0];
            out.u[v][1] += buf[1];
            count[v] += 1;
        }
    }
    for (u, &c) in out.u.iter_mut().zip(&count) {
        let c = c.max(1) as f64;
        u[0] /= c;
        u[1] /= c;
    }
    out
}

fn scalars(w: &mut impl Write, name: &str, vals: impl Iterator<Item = f64>) -> io::Result<()> {
    writeln!(w, "SCALARS {name} double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in vals {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

/// Writes one snapshot: vertex data `p`, `omega`, `u` and cell data
/// `ptilde`, `tr_sigma`, `sigma_xx`, `sigma_yy`, `sigma_xy`, `D_min`, `D_max`.
pub fn write_fields(
    w: &mut impl Write,
    disc: &Discretization,
    sol: &CoupledSolution,
    law: &DiffusionLaw,
    title: &str,
) -> io::Result<()> {
    write_geometry(w, &disc.mesh, title)?;
    let pv = point_values(disc, sol);
    writeln!(w, "POINT_DATA {}", pv.p.len())?;
    scalars(w, "p", pv.p.iter().copied())?;
    scalars(w, "omega", pv.omega.iter().copied())?;
    writeln!(w, "VECTORS u double")?;
    for u in &pv.u {
        writeln!(w, "{:e} {:e} 0", u[0], u[1])?;
    }
    let cv = cell_values(disc, sol, law);
    writeln!(w, "CELL_DATA {}", cv.ptilde.len())?;
    scalars(w, "ptilde", cv.ptilde.iter().copied())?;
    scalars(w, "tr_sigma", cv.sigma.iter().map(trace))?;
    scalars(w, "sigma_xx", cv.sigma.iter().map(|s| s[0]))?;
    scalars(w, "sigma_yy", cv.sigma.iter().map(|s| s[3]))?;
    // weakly symmetric stress: report the symmetric part
    scalars(w, "sigma_xy", cv.sigma.iter().map(|s| 0.5 * (s[1] + s[2])))?;
    scalars(w, "D_min", cv.d_eigen.iter().map(|e| e[0]))?;
    scalars(w, "D_max", cv.d_eigen.iter().map(|e| e[1]))?;
    Ok(())
}

pub fn emit_fields_vtk(
    path: &Path,
    disc: &Discretization,
    sol: &CoupledSolution,
    law: &DiffusionLaw,
    title: &str,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fields(&mut w, disc, sol, law, title)?;
    w.flush()
}
