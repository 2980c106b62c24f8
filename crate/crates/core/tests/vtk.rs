use std::sync::Arc;

use porodiff::constitutive::DiffusionLaw;
use porodiff::coupler::CoupledSolution;
use porodiff::forms::{Discretization, LawStats};
use porodiff::mesh::{BoundaryPartition, Mesh};
use porodiff::spaces::FieldKind;
use porodiff::vtk::{cell_values, emit_fields_vtk, point_values, write_mesh};

/// Snapshot whose fields are interpolants of polynomials each space
/// reproduces exactly.
fn snapshot(k: usize) -> (Discretization, CoupledSolution) {
    let mesh = Arc::new(Mesh::rectangle(2.0, 1.0, 3, 2, BoundaryPartition::all_gamma()).unwrap());
    let disc = Discretization::new(mesh, k).unwrap();
    let layout = disc.layout();
    let mut poro = vec![0.0; layout.len()];
    let sigma = disc.poro.sigma.interpolate(|x| vec![1.0 + x[0], 0.5 * x[1], 0.3 - x[0], 2.0 * x[1] - x[0]]);
    poro[layout.range(FieldKind::Stress)].copy_from_slice(&sigma);
    let pt = disc.poro.ptilde.interpolate(|_| vec![0.25]);
    poro[layout.range(FieldKind::TotalPressure)].copy_from_slice(&pt);
    let u = disc.poro.u.interpolate(|x| vec![x[0] - 2.0 * x[1], 0.5]);
    poro[layout.range(FieldKind::Displacement)].copy_from_slice(&u);
    let p = disc.poro.p.interpolate(|x| vec![3.0 * x[0] + x[1]]);
    poro[layout.range(FieldKind::FluidPressure)].copy_from_slice(&p);
    let omega = disc.omega.interpolate(|x| vec![x[0] * x[1]]);
    let sol = CoupledSolution {
        layout,
        poro,
        omega,
        log: Vec::new(),
        converged: true,
        law_stats: LawStats::default(),
        poro_residual: 0.0,
    };
    (disc, sol)
}

fn centroid(mesh: &Mesh, c: usize) -> [f64; 2] {
    let x = mesh.cell_coords(c);
    [(x[0][0] + x[1][0] + x[2][0]) / 3.0, (x[0][1] + x[1][1] + x[2][1]) / 3.0]
}

#[test]
fn cell_stress_matches_midpoint_values() {
    for k in [0, 1] {
        let (disc, sol) = snapshot(k);
        let law = DiffusionLaw::Constant { d0: 2.0 };
        let cv = cell_values(&disc, &sol, &law);
        assert_eq!(cv.sigma.len(), disc.mesh.num_cells());
        for (c, s) in cv.sigma.iter().enumerate() {
            let x = centroid(&disc.mesh, c);
            let tr = (1.0 + x[0]) + (2.0 * x[1] - x[0]);
            assert!((s[0] + s[3] - tr).abs() <= 1e-12, "cell {c}: {s:?}");
            assert!((s[1] - 0.5 * x[1]).abs() <= 1e-12 && (s[2] - 0.3 + x[0]).abs() <= 1e-12);
            assert!((cv.ptilde[c] - 0.25).abs() <= 1e-12);
            assert_eq!(cv.d_eigen[c], [2.0, 2.0]);
        }
    }
}

#[test]
fn vertex_values_match_fields() {
    let (disc, sol) = snapshot(1);
    let pv = point_values(&disc, &sol);
    for (v, x) in disc.mesh.vertices().iter().enumerate() {
        assert!((pv.p[v] - (3.0 * x[0] + x[1])).abs() <= 1e-12);
        assert!((pv.omega[v] - x[0] * x[1]).abs() <= 1e-12);
        assert!((pv.u[v][0] - (x[0] - 2.0 * x[1])).abs() <= 1e-12, "vertex {v}: {:?}", pv.u[v]);
        assert!((pv.u[v][1] - 0.5).abs() <= 1e-12);
    }
}

#[test]
fn file_layout() {
    let (disc, sol) = snapshot(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.vtk");
    emit_fields_vtk(&path, &disc, &sol, &DiffusionLaw::IsoExp { d0: 1.0, eta0: 0.1 }, "t=0").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# vtk DataFile Version 2.0");
    assert_eq!(lines[2], "ASCII");
    let (nv, nc) = (disc.mesh.num_vertices(), disc.mesh.num_cells());
    assert!(lines.contains(&format!("POINTS {nv} double").as_str()));
    assert!(lines.contains(&format!("CELLS {nc} {}", 4 * nc).as_str()));
    assert!(lines.contains(&format!("POINT_DATA {nv}").as_str()));
    assert!(lines.contains(&format!("CELL_DATA {nc}").as_str()));
    // each scalar block carries exactly one value per entity
    for (name, n) in [("p", nv), ("omega", nv), ("ptilde", nc), ("tr_sigma", nc), ("sigma_xy", nc), ("D_max", nc)] {
        let at = lines.iter().position(|l| *l == format!("SCALARS {name} double 1")).unwrap();
        let vals: Vec<f64> = lines[at + 2..at + 2 + n].iter().map(|l| l.parse().unwrap()).collect();
        assert_eq!(vals.len(), n);
        let next = lines.get(at + 2 + n).copied().unwrap_or("SCALARS");
        assert!(next.parse::<f64>().is_err(), "{name} has extra values");
    }
    let bad = dir.path().join("missing").join("x.vtk");
    assert!(emit_fields_vtk(&bad, &disc, &sol, &DiffusionLaw::Constant { d0: 1.0 }, "").is_err());
}

#[test]
fn bare_mesh() {
    let mesh = Mesh::unit_square(2, BoundaryPartition::all_gamma()).unwrap();
    let mut out = Vec::new();
    write_mesh(&mut out, &mesh).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("# vtk DataFile Version 2.0\n"));
    assert_eq!(text.lines().filter(|l| *l == "5").count(), 8);
}
