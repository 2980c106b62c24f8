use std::sync::Arc;

use porodiff::constitutive::DiffusionLaw;
use porodiff::coupler::{
    solve_transient, BoundaryRamp, CoupledProblem, CouplerError, IterationRecord, Mode, SolverOptions,
    TransientMode, TransientScenario,
};
use porodiff::forms::{Discretization, MaterialParams, NaturalData, Sources};
use porodiff::linsolve::norm2;
use porodiff::mesh::{BoundaryPartition, Mesh};
use porodiff::mms::{error_norms, example1_case, example1_law};
use porodiff::spaces::{BoundarySelector, FieldKind};

fn mesh(n: usize) -> Arc<Mesh> {
    Arc::new(Mesh::unit_square(n, BoundaryPartition::all_gamma()).unwrap())
}

fn example(n: usize, params: MaterialParams, law: DiffusionLaw) -> CoupledProblem {
    example1_case(params, law).problem(mesh(n), 0).unwrap()
}

#[test]
fn beta_zero_picard_stops_within_two_iterations() {
    let mut p = MaterialParams::unity();
    p.beta = 0.0;
    let mut pb = example(4, p, example1_law());
    let sol = pb.solve(&SolverOptions::default(), None, None).unwrap();
    assert!(sol.converged && sol.iterations() <= 2, "{:?}", sol.log);
}

#[test]
fn constant_law_newton_one_iteration() {
    let mut pb = example(4, MaterialParams::unity(), DiffusionLaw::Constant { d0: 0.5 });
    let sol = pb.solve(&SolverOptions::newton(), None, None).unwrap();
    assert_eq!(sol.iterations(), 1, "{:?}", sol.log);
}

#[test]
fn zero_data_gives_zero_solution() {
    let mut disc = Discretization::new(mesh(3), 0).unwrap();
    disc.omega_mut().apply_dirichlet(&BoundarySelector::All, |_| 0.0).unwrap();
    disc.attach_trace_constraint(0.0).unwrap();
    let mut pb = CoupledProblem::new(
        disc,
        MaterialParams::unity(),
        example1_law(),
        Sources::default(),
        NaturalData::default(),
    )
    .unwrap();
    for opts in [SolverOptions::default(), SolverOptions::newton()] {
        let sol = pb.solve(&opts, None, None).unwrap();
        // Newton sees a zero residual before its first linear solve.
        assert!(sol.iterations() <= 1);
        assert!(sol.poro.iter().chain(&sol.omega).all(|v| v.abs() < 1e-300));
    }
}

#[test]
fn picard_and_newton_agree() {
    let case = example1_case(MaterialParams::unity(), example1_law());
    let mut pb = case.problem(mesh(8), 0).unwrap();
    let a = pb.solve(&SolverOptions::default(), None, None).unwrap();
    let b = pb.solve(&SolverOptions::newton(), None, None).unwrap();
    assert!(b.iterations() <= 6);
    let (ea, eb) = (error_norms(pb.disc(), &a, &case), error_norms(pb.disc(), &b, &case));
    for (x, y) in ea.as_array().iter().zip(eb.as_array()) {
        assert!((x - y).abs() <= 1e-8 * x.max(1e-3), "{ea:?} vs {eb:?}");
    }
    let diff: Vec<f64> = a.omega.iter().zip(&b.omega).map(|(x, y)| x - y).collect();
    assert!(pb.h1_norm(&diff) <= 1e-8 * pb.h1_norm(&a.omega));
    let dp: Vec<f64> = a.poro.iter().zip(&b.poro).map(|(x, y)| x - y).collect();
    assert!(norm2(&dp) <= 1e-7 * norm2(&a.poro));
}

#[test]
fn picard_increments_contract() {
    let mut pb = example(8, MaterialParams::unity(), example1_law());
    let sol = pb.solve(&SolverOptions::default(), None, None).unwrap();
    let inc: Vec<f64> = sol.log.iter().map(|r| r.increment).collect();
    for w in inc.windows(2).filter(|w| w[1] > 0.0) {
        assert!(w[1] / w[0] < 0.5, "{inc:?}");
    }
}

/// Directional difference of the residual against the assembled Jacobian.
#[test]
fn jacobian_matches_finite_differences() {
    let law = DiffusionLaw::Quadratic { d0: 0.5, eta0: 0.3, eta2: 0.4 };
    let mut pb = example(2, MaterialParams::unity(), law);
    let base = pb.solve(&SolverOptions::default(), None, None).unwrap();
    let (jac, _) = pb.jacobian(&base.poro, &base.omega).unwrap();
    let np = pb.layout().len();
    let pfree = pb.poro_reduction().free().to_vec();
    let wfree = pb.omega_reduction().free().to_vec();
    let dir: Vec<f64> = (0..pfree.len() + wfree.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let res = |h: f64| {
        let mut x = base.poro.clone();
        let mut w = base.omega.clone();
        for (k, &i) in pfree.iter().enumerate() {
            x[i] += h * dir[k];
        }
        for (k, &i) in wfree.iter().enumerate() {
            w[i] += h * dir[pfree.len() + k];
        }
        let (rp, rw, _) = pb.residual(&x, &w, None).unwrap();
        rp.into_iter().chain(rw).collect::<Vec<f64>>()
    };
    let r0 = res(0.0);
    let jd = jac.mul_vec(&dir);
    let mut pts = Vec::new();
    for h in [1e-2, 1e-3, 1e-4] {
        let rh = res(h);
        let err: f64 = rh.iter().zip(&r0).zip(&jd).map(|((a, b), j)| ((a - b) / h - j).powi(2)).sum::<f64>().sqrt();
        pts.push((h.ln(), err.ln()));
    }
    let slope = (pts[0].1 - pts[2].1) / (pts[0].0 - pts[2].0);
    assert!(slope >= 0.9, "slope {slope}, {pts:?}");
    // the stress-concentration block is present and nonsymmetric
    let w0 = np;
    let coupling: Vec<_> =
        (w0..jac.nrows()).flat_map(|i| jac.row(i).map(move |(j, v)| (i, j, v))).filter(|&(_, j, _)| j < w0).collect();
    assert!(coupling.iter().any(|&(_, _, v)| v.abs() > 0.0));
    assert!(coupling.iter().any(|&(i, j, v)| (jac.get(j, i) - v).abs() > 1e-12));
}

#[test]
fn divergence_is_reported_with_log() {
    // A strongly stress-dependent law with a large coupling makes the
    // fixed-point map expansive.
    let mut p = MaterialParams::unity();
    p.beta = 40.0;
    let law = DiffusionLaw::IsoExp { d0: 1.0, eta0: 3.0 };
    let mut pb = example(4, p, law);
    let opts = SolverOptions { max_iter: 40, ..SolverOptions::default() };
    match pb.solve(&opts, None, None) {
        Err(e @ (CouplerError::Diverged { .. } | CouplerError::MaxIter { .. })) => {
            assert!(!e.log().unwrap().is_empty());
        }
        Err(CouplerError::Solve(_)) | Err(CouplerError::Forms(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(sol) => panic!("unexpected convergence: {:?}", sol.log),
    }
}

#[test]
fn contraction_threshold_is_bracketed() {
    let law = DiffusionLaw::IsoExp { d0: 1.0, eta0: 3.0 };
    let mut pb = example(4, MaterialParams::unity(), law);
    let beta = pb.contraction_threshold(0.0, 1000.0, 6, 6).unwrap();
    assert!(beta >= 100.0 && beta < 1000.0, "{beta}");
}

#[test]
fn log_serializes_as_json_lines() {
    let log = vec![
        IterationRecord { iteration: 1, increment: 0.5, residual: 1e-3, seconds: 0.1, time: None },
        IterationRecord { iteration: 2, increment: 1e-9, residual: 1e-14, seconds: 0.2, time: Some(50.0) },
    ];
    let mut out = Vec::new();
    porodiff::coupler::write_log(&log, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let back: IterationRecord = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(back, log[1]);
}

struct Static;

impl BoundaryRamp for Static {
    fn apply(&self, _: f64, _: &mut Discretization) {}
}

#[test]
fn long_time_step_recovers_steady_state() {
    let case = example1_case(MaterialParams::unity(), example1_law());
    let mut pb = case.problem(mesh(4), 0).unwrap();
    let steady = pb.solve(&SolverOptions::default(), None, None).unwrap();
    let scen = TransientScenario { dt: 1e12, t_end: 1e12, mode: TransientMode::Augment };
    let (last, steps) = solve_transient(&mut pb, &scen, &SolverOptions::default(), &Static, None, |_, _| {}).unwrap();
    assert_eq!(steps.len(), 1);
    let d: Vec<f64> = last.poro.iter().zip(&steady.poro).map(|(a, b)| a - b).collect();
    assert!(norm2(&d) <= 1e-8 * norm2(&steady.poro));
    let dw: Vec<f64> = last.omega.iter().zip(&steady.omega).map(|(a, b)| a - b).collect();
    assert!(pb.h1_norm(&dw) <= 1e-8 * pb.h1_norm(&steady.omega));
}

#[test]
fn transient_steps_balance_mass() {
    let case = example1_case(MaterialParams::unity(), example1_law());
    let mut pb = case.problem(mesh(4), 0).unwrap();
    for (mode, solver) in [(TransientMode::Replace, Mode::Picard), (TransientMode::Augment, Mode::Newton)] {
        let scen = TransientScenario { dt: 0.1, t_end: 0.3, mode };
        let opts = SolverOptions { mode: solver, ..SolverOptions::default() };
        let mut seen = 0;
        let (_, steps) = solve_transient(&mut pb, &scen, &opts, &Static, None, |rec, sol| {
            seen += 1;
            assert!(sol.converged);
            assert!(rec.poro_residual <= 1e-9, "{rec:?}");
            assert!(sol.log.iter().all(|r| r.time == Some(rec.time)));
        })
        .unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(seen, 3);
        assert!((steps[2].time - 0.3).abs() < 1e-12);
    }
}

#[test]
fn pressure_unchanged_by_field_accessor() {
    let mut pb = example(2, MaterialParams::unity(), example1_law());
    let sol = pb.solve(&SolverOptions::default(), None, None).unwrap();
    assert_eq!(sol.field(FieldKind::FluidPressure).len(), pb.disc().poro.p.ndofs());
    assert_eq!(sol.field(FieldKind::Concentration).len(), pb.disc().omega.ndofs());
    assert!(sol.multiplier().is_some());
}

#[test]
fn invalid_options_rejected() {
    let mut pb = example(2, MaterialParams::unity(), example1_law());
    for bad in [
        SolverOptions { tol_rel: 0.0, ..SolverOptions::default() },
        SolverOptions { max_iter: 0, ..SolverOptions::default() },
        SolverOptions { relaxation: 1.5, ..SolverOptions::default() },
    ] {
        assert!(matches!(pb.solve(&bad, None, None), Err(CouplerError::Options(_))));
    }
}
