//! Nonlinear drivers for the coupled poroelasticity / diffusion system:
//! Picard fixed-point iteration and monolithic Newton, steady or with
//! backward Euler in time.

use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::DiffusionLaw;
use crate::forms::{
    assemble_diffusion_sigma_jacobian, assemble_diffusion_stiffness, assemble_poro, load_vector, mass_matrix,
    BlockSystem, Discretization, FormsError, LawStats, Layout, MaterialParams, NaturalData, PressureRow, Reduction,
    Sources,
};
use crate::linsolve::{
    factorize_symmetric, gmres, norm2, Inertia, SolveError, SparseMatrix, SymmetricFactorization,
    TripletBuilder,
};
use crate::spaces::FieldKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Picard,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub mode: Mode,
    /// Relative tolerance on the H1 norm of the concentration increment.
    pub tol_rel: f64,
    /// Tolerance on the residual relative to the load norm.
    pub tol_abs: f64,
    pub max_iter: usize,
    /// Picard under-relaxation in (0, 1].
    pub relaxation: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mode: Mode::Picard, tol_rel: 1e-8, tol_abs: 1e-12, max_iter: 25, relaxation: 1.0 }
    }
}

impl SolverOptions {
    pub fn newton() -> Self {
        Self { mode: Mode::Newton, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CouplerError> {
        if !(self.tol_rel > 0.0 && self.tol_abs > 0.0) {
            return Err(CouplerError::Options("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(CouplerError::Options("max_iter must be at least 1".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(CouplerError::Options("relaxation must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// H1 norm of the concentration increment.
    pub increment: f64,
    /// Residual norm relative to the load norm.
    pub residual: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time: Option<f64>,
}

pub fn write_log(log: &[IterationRecord], mut w: impl Write) -> io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum CouplerError {
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error("no convergence after {} iterations", log.len())]
    MaxIter { log: Vec<IterationRecord> },
    #[error("iteration diverged at iteration {}", log.last().map_or(0, |r| r.iteration))]
    Diverged { log: Vec<IterationRecord> },
    #[error("time step at t = {time} failed: {source}")]
    Step { time: f64, source: Box<CouplerError> },
    #[error("essential boundary pattern changed between time steps")]
    PatternChanged,
}

impl CouplerError {
    pub fn log(&self) -> Option<&[IterationRecord]> {
        match self {
            CouplerError::MaxIter { log } | CouplerError::Diverged { log } => Some(log),
            CouplerError::Step { source, .. } => source.log(),
            _ => None,
        }
    }
}

/// How the backward Euler terms combine with the zero-order terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientMode {
    /// Steady zero-order terms are kept and the time derivative is added.
    Augment,
    /// The time derivative replaces the zero-order storage and reaction terms.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeStep {
    dt: f64,
    mode: TransientMode,
}

impl TimeStep {
    fn zero_order(&self) -> f64 {
        let base = match self.mode {
            TransientMode::Augment => 1.0,
            TransientMode::Replace => 0.0,
        };
        base + 1.0 / self.dt
    }
}

/// Previous-step values entering the backward Euler right-hand sides.
#[derive(Debug, Clone)]
pub struct PreviousStep {
    pub poro: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Converged (or final) state.
#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub layout: Layout,
    pub poro: Vec<f64>,
    pub omega: Vec<f64>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub law_stats: LawStats,
    /// Poroelastic residual relative to its load after the final update.
    pub poro_residual: f64,
}

impl CoupledSolution {
    pub fn field(&self, kind: FieldKind) -> &[f64] {
        match kind {
            FieldKind::Concentration => &self.omega,
            k => &self.poro[self.layout.range(k)],
        }
    }

    pub fn multiplier(&self) -> Option<f64> {
        self.layout.multiplier_index().map(|i| self.poro[i])
    }

    pub fn iterations(&self) -> usize {
        self.log.len()
    }
}

/// Assembled coupled problem with cached factorizations.
pub struct CoupledProblem {
    disc: Discretization,
    params: MaterialParams,
    law: DiffusionLaw,
    sources: Sources,
    natural: NaturalData,
    blocks: BlockSystem,
    layout: Layout,
    poro_red: Reduction,
    poro_fixed: Vec<f64>,
    poro_full: SparseMatrix,
    poro_ff: SparseMatrix,
    poro_fc: SparseMatrix,
    poro_signs: Vec<Inertia>,
    poro_lu: Option<SymmetricFactorization>,
    h_full: SparseMatrix,
    omega_red: Reduction,
    omega_fixed: Vec<f64>,
    omega_mass: SparseMatrix,
    omega_h1: SparseMatrix,
    omega_load: Vec<f64>,
    step: Option<TimeStep>,
}

impl CoupledProblem {
    pub fn new(
        disc: Discretization,
        params: MaterialParams,
        law: DiffusionLaw,
        sources: Sources,
        natural: NaturalData,
    ) -> Result<Self, CouplerError> {
        let blocks = assemble_poro(&disc, &params, &sources, &natural)?;
        let layout = disc.layout();
        let mask = layout.mask(&disc.poro);
        let poro_red = Reduction::from_mask(&mask);
        let poro_fixed = poro_red.fixed_values(&mask);
        let poro_full = blocks.matrix(&layout, PressureRow::STEADY);
        let (poro_ff, poro_fc) = poro_red.split(&poro_full);
        let h_full = blocks.h_full(&layout);
        let poro_signs = poro_inertia(&layout, &poro_red);
        let omega_red = Reduction::from_mask(disc.omega.fixed());
        let omega_fixed = omega_red.fixed_values(disc.omega.fixed());
        let omega_mass = mass_matrix(&disc.omega, disc.degree);
        let (lap, _) = assemble_diffusion_stiffness(
            &disc,
            &DiffusionLaw::Constant { d0: 1.0 },
            &vec![0.0; disc.poro.sigma.ndofs()],
        )?;
        let omega_h1 = SparseMatrix::lin_comb(1.0, &omega_mass, 1.0, &lap);
        let phi = params.phi;
        let omega_load = match &sources.ell {
            Some(ell) => load_vector(&disc.omega, disc.degree, &|x| phi * ell(x)),
            None => vec![0.0; disc.omega.ndofs()],
        };
        Ok(Self {
            disc,
            params,
            law,
            sources,
            natural,
            blocks,
            layout,
            poro_red,
            poro_fixed,
            poro_full,
            poro_ff,
            poro_fc,
            poro_signs,
            poro_lu: None,
            h_full,
            omega_red,
            omega_fixed,
            omega_mass,
            omega_h1,
            omega_load,
            step: None,
        })
    }

    pub fn disc(&self) -> &Discretization {
        &self.disc
    }

    pub fn params(&self) -> &MaterialParams {
        &self.params
    }

    pub fn law(&self) -> &DiffusionLaw {
        &self.law
    }

    pub fn blocks(&self) -> &BlockSystem {
        &self.blocks
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn poro_reduction(&self) -> &Reduction {
        &self.poro_red
    }

    pub fn omega_reduction(&self) -> &Reduction {
        &self.omega_red
    }

    /// Full poroelastic matrix for the current time-step setting.
    pub fn poro_matrix(&self) -> &SparseMatrix {
        &self.poro_full
    }

    pub fn omega_mass(&self) -> &SparseMatrix {
        &self.omega_mass
    }

    pub fn sources(&self) -> &Sources {
        &self.sources
    }

    pub fn natural(&self) -> &NaturalData {
        &self.natural
    }

    fn row(&self) -> PressureRow {
        PressureRow { zero_order: self.step.map_or(1.0, |s| s.zero_order()) }
    }

    fn omega_mass_coef(&self) -> f64 {
        self.params.phi * self.step.map_or(1.0, |s| s.zero_order())
    }

    /// Switches between steady (`None`) and backward Euler with step `dt`.
    pub fn set_time_step(&mut self, dt: Option<f64>, mode: TransientMode) {
        let step = dt.map(|dt| TimeStep { dt, mode });
        if step == self.step {
            return;
        }
        self.step = step;
        self.poro_full = self.blocks.matrix(&self.layout, self.row());
        let (ff, fc) = self.poro_red.split(&self.poro_full);
        self.poro_ff = ff;
        self.poro_fc = fc;
        self.poro_lu = None;
    }

    /// Re-reads prescribed values after the caller changed boundary data.
    /// The set of constrained dofs must stay the same.
    pub fn update_essential(&mut self, f: impl FnOnce(&mut Discretization)) -> Result<(), CouplerError> {
        f(&mut self.disc);
        let mask = self.layout.mask(&self.disc.poro);
        let red = Reduction::from_mask(&mask);
        let wred = Reduction::from_mask(self.disc.omega.fixed());
        if red != self.poro_red || wred != self.omega_red {
            return Err(CouplerError::PatternChanged);
        }
        self.poro_fixed = red.fixed_values(&mask);
        self.omega_fixed = wred.fixed_values(self.disc.omega.fixed());
        Ok(())
    }

    /// Replaces the weakly imposed data (loads only; matrices unchanged).
    pub fn update_natural(&mut self, natural: NaturalData) -> Result<(), CouplerError> {
        let b = assemble_poro(&self.disc, &self.params, &self.sources, &natural)?;
        self.blocks.bnd_sigma = b.bnd_sigma;
        self.blocks.bnd_p = b.bnd_p;
        self.natural = natural;
        Ok(())
    }

    pub fn h1_norm(&self, v: &[f64]) -> f64 {
        let hv = self.omega_h1.mul_vec(v);
        v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }

    fn poro_rhs(&self, omega: &[f64], prev: Option<&PreviousStep>) -> Vec<f64> {
        let extra = match (self.step, prev) {
            (Some(s), Some(pv)) => {
                // (B2 ptilde^n - M p^n) / dt
                let mut e = self.blocks.b2.mul_vec(&pv.poro[self.layout.range(FieldKind::TotalPressure)]);
                self.blocks.dp_mass.mul_vec_add(-1.0, &pv.poro[self.layout.range(FieldKind::FluidPressure)], &mut e);
                e.iter_mut().for_each(|v| *v /= s.dt);
                Some(e)
            }
            _ => None,
        };
        self.blocks.rhs(&self.layout, omega, self.disc.trace.target, self.row(), extra.as_deref())
    }

    fn omega_rhs(&self, prev: Option<&PreviousStep>) -> Vec<f64> {
        let mut b = self.omega_load.clone();
        if let (Some(s), Some(pv)) = (self.step, prev) {
            self.omega_mass.mul_vec_add(self.params.phi / s.dt, &pv.omega, &mut b);
        }
        b
    }

    fn poro_factorization(&mut self) -> Result<&SymmetricFactorization, CouplerError> {
        if self.poro_lu.is_none() {
            let start = Instant::now();
            self.poro_lu = Some(factorize_symmetric(&self.poro_ff, &self.poro_signs)?);
            log::debug!("poroelastic factorization: n = {}, {:.2}s", self.poro_ff.nrows(), start.elapsed().as_secs_f64());
        }
        Ok(self.poro_lu.as_ref().expect("just set"))
    }

    /// Solves the poroelastic block for a given concentration.
    pub fn solve_poro(&mut self, omega: &[f64], prev: Option<&PreviousStep>) -> Result<Vec<f64>, CouplerError> {
        let b = self.poro_rhs(omega, prev);
        let rhs = self.poro_red.lifted_rhs(&b, &self.poro_fc, &self.poro_fixed);
        let fixed = self.poro_fixed.clone();
        let xf = self.poro_factorization()?.solve(&rhs)?;
        Ok(self.poro_red.expand(&xf, &fixed))
    }

    /// Full diffusion matrix `phi' M + K_D(sigma)`.
    pub fn diffusion_matrix(&self, sigma: &[f64]) -> Result<(SparseMatrix, LawStats), CouplerError> {
        let (k, stats) = assemble_diffusion_stiffness(&self.disc, &self.law, sigma)?;
        Ok((SparseMatrix::lin_comb(self.omega_mass_coef(), &self.omega_mass, 1.0, &k), stats))
    }

    /// Solves the diffusion problem for a given stress.
    pub fn solve_diffusion(&self, sigma: &[f64], prev: Option<&PreviousStep>) -> Result<(Vec<f64>, LawStats), CouplerError> {
        let (a, stats) = self.diffusion_matrix(sigma)?;
        let (ff, fc) = self.omega_red.split(&a);
        let rhs = self.omega_red.lifted_rhs(&self.omega_rhs(prev), &fc, &self.omega_fixed);
        let xf = factorize_symmetric(&ff, &vec![Inertia::Positive; ff.nrows()])?.solve(&rhs)?;
        Ok((self.omega_red.expand(&xf, &self.omega_fixed), stats))
    }

    /// Initial concentration: zero with the Dirichlet values applied.
    pub fn initial_omega(&self) -> Vec<f64> {
        self.omega_red.expand(&vec![0.0; self.omega_red.n_free()], &self.omega_fixed)
    }

    fn sigma<'a>(&self, poro: &'a [f64]) -> &'a [f64] {
        &poro[self.layout.range(FieldKind::Stress)]
    }

    /// Free-row residuals `(K x - b(omega), A(sigma) omega - J)` and the
    /// corresponding load norms.
    pub fn residual(
        &self,
        poro: &[f64],
        omega: &[f64],
        prev: Option<&PreviousStep>,
    ) -> Result<(Vec<f64>, Vec<f64>, f64), CouplerError> {
        let b = self.poro_rhs(omega, prev);
        let mut r = self.poro_full.mul_vec(poro);
        r.iter_mut().zip(&b).for_each(|(ri, bi)| *ri -= bi);
        let (a, _) = self.diffusion_matrix(self.sigma(poro))?;
        let j = self.omega_rhs(prev);
        let mut rw = a.mul_vec(omega);
        rw.iter_mut().zip(&j).for_each(|(ri, ji)| *ri -= ji);
        let rp = self.poro_red.restrict(&r);
        let rw = self.omega_red.restrict(&rw);
        // Load norm: data plus the lifted essential values.
        let bl = self.poro_red.lifted_rhs(&b, &self.poro_fc, &self.poro_fixed);
        let (_, wfc) = self.omega_red.split(&a);
        let jl = self.omega_red.lifted_rhs(&j, &wfc, &self.omega_fixed);
        let load = (norm2(&bl).powi(2) + norm2(&jl).powi(2)).sqrt();
        Ok((rp, rw, load))
    }

    fn relative(res: f64, load: f64) -> f64 {
        if load > 0.0 {
            res / load
        } else {
            res
        }
    }

    /// Runs the configured driver from `omega0` (or the default initial iterate).
    pub fn solve(
        &mut self,
        opts: &SolverOptions,
        omega0: Option<Vec<f64>>,
        prev: Option<&PreviousStep>,
    ) -> Result<CoupledSolution, CouplerError> {
        opts.validate()?;
        match opts.mode {
            Mode::Picard => self.picard(opts, omega0, prev),
            Mode::Newton => self.newton(opts, omega0, None, prev),
        }
    }

    fn finish(&self, poro: Vec<f64>, omega: Vec<f64>, log: Vec<IterationRecord>, stats: LawStats, prev: Option<&PreviousStep>) -> Result<CoupledSolution, CouplerError> {
        let (rp, _, load) = self.residual(&poro, &omega, prev)?;
        Ok(CoupledSolution {
            layout: self.layout.clone(),
            poro,
            omega,
            log,
            converged: true,
            law_stats: stats,
            poro_residual: Self::relative(norm2(&rp), load),
        })
    }

    fn diverging(log: &[IterationRecord]) -> bool {
        let n = log.len();
        if log.last().is_some_and(|r| !r.increment.is_finite() || !r.residual.is_finite()) {
            return true;
        }
        n >= 4 && (n - 3..n).all(|i| log[i].increment > log[i - 1].increment)
    }

    pub fn picard(
        &mut self,
        opts: &SolverOptions,
        omega0: Option<Vec<f64>>,
        prev: Option<&PreviousStep>,
    ) -> Result<CoupledSolution, CouplerError> {
        let start = Instant::now();
        let mut omega = omega0.unwrap_or_else(|| self.initial_omega());
        let mut log = Vec::new();
        let theta = opts.relaxation;
        for it in 1..=opts.max_iter {
            let poro = self.solve_poro(&omega, prev)?;
            let (hat, stats) = self.solve_diffusion(self.sigma(&poro), prev)?;
            let next: Vec<f64> = omega.iter().zip(&hat).map(|(o, h)| (1.0 - theta) * o + theta * h).collect();
            let delta: Vec<f64> = next.iter().zip(&omega).map(|(a, b)| a - b).collect();
            let inc = self.h1_norm(&delta);
            let norm = self.h1_norm(&next);
            let (rp, rw, load) = self.residual(&poro, &next, prev)?;
            let res = Self::relative((norm2(&rp).powi(2) + norm2(&rw).powi(2)).sqrt(), load);
            log.push(IterationRecord {
                iteration: it,
                increment: inc,
                residual: res,
                seconds: start.elapsed().as_secs_f64(),
                time: None,
            });
            log::debug!("picard {it}: increment {inc:.3e}, residual {res:.3e}");
            omega = next;
            if inc <= opts.tol_rel * norm || res <= opts.tol_abs {
                // The poroelastic state must match the final concentration.
                let poro = if res <= opts.tol_abs { poro } else { self.solve_poro(&omega, prev)? };
                return self.finish(poro, omega, log, stats, prev);
            }
            if Self::diverging(&log) {
                return Err(CouplerError::Diverged { log });
            }
        }
        Err(CouplerError::MaxIter { log })
    }

    /// Newton Jacobian on free dofs; unknowns are (poro free, omega free).
    pub fn jacobian(&self, poro: &[f64], omega: &[f64]) -> Result<(SparseMatrix, usize), CouplerError> {
        let np = self.layout.len();
        let nw = self.disc.omega.ndofs();
        let (a, _) = self.diffusion_matrix(self.sigma(poro))?;
        let (ds, kinks) = assemble_diffusion_sigma_jacobian(&self.disc, &self.law, self.sigma(poro), omega)?;
        let mut t = TripletBuilder::with_capacity(np + nw, np + nw, self.poro_full.nnz() + a.nnz() + ds.nnz() + self.h_full.nnz());
        t.push_block(0, 0, &self.poro_full);
        t.push_block(0, np, &self.h_full.scaled(-1.0));
        t.push_block(np, self.layout.offset(FieldKind::Stress), &ds);
        t.push_block(np, np, &a);
        let full = t.build();
        let red = self.coupled_reduction();
        Ok((red.restrict_matrix(&full, &red), kinks))
    }

    fn coupled_reduction(&self) -> Reduction {
        let mut mask = self.layout.mask(&self.disc.poro);
        mask.extend_from_slice(self.disc.omega.fixed());
        Reduction::from_mask(&mask)
    }

    /// Newton iteration. `poro0` defaults to the poroelastic solve for `omega0`.
    pub fn newton(
        &mut self,
        opts: &SolverOptions,
        omega0: Option<Vec<f64>>,
        poro0: Option<Vec<f64>>,
        prev: Option<&PreviousStep>,
    ) -> Result<CoupledSolution, CouplerError> {
        let start = Instant::now();
        let mut omega = omega0.unwrap_or_else(|| self.initial_omega());
        let mut poro = match poro0 {
            Some(p) => p,
            None => self.poro_red.expand(&vec![0.0; self.poro_red.n_free()], &self.poro_fixed),
        };
        let mut log: Vec<IterationRecord> = Vec::new();
        let mut last_inc = f64::INFINITY;
        loop {
            let (rp, rw, load) = self.residual(&poro, &omega, prev)?;
            let res = Self::relative((norm2(&rp).powi(2) + norm2(&rw).powi(2)).sqrt(), load);
            if let Some(r) = log.last_mut() {
                r.residual = res;
            }
            let norm = self.h1_norm(&omega);
            let done = res <= opts.tol_abs || (!log.is_empty() && last_inc <= opts.tol_rel * norm);
            if done {
                let (_, stats) = assemble_diffusion_stiffness(&self.disc, &self.law, self.sigma(&poro))?;
                return self.finish(poro, omega, log, stats, prev);
            }
            if Self::diverging(&log) {
                return Err(CouplerError::Diverged { log });
            }
            if log.len() >= opts.max_iter {
                return Err(CouplerError::MaxIter { log });
            }
            let (dxp, dxw) = self.newton_step(&poro, &omega, &rp, &rw)?;
            for (k, &i) in self.poro_red.free().iter().enumerate() {
                poro[i] += dxp[k];
            }
            let mut dw = vec![0.0; omega.len()];
            for (k, &i) in self.omega_red.free().iter().enumerate() {
                dw[i] = dxw[k];
                omega[i] += dxw[k];
            }
            last_inc = self.h1_norm(&dw);
            log.push(IterationRecord {
                iteration: log.len() + 1,
                increment: last_inc,
                residual: f64::NAN,
                seconds: start.elapsed().as_secs_f64(),
                time: None,
            });
            log::debug!("newton {}: increment {last_inc:.3e}, residual before step {res:.3e}", log.len());
        }
    }

    /// Solves the Newton system for free-dof corrections through the Schur
    /// complement on the concentration,
    /// `(A + D_sigma K^{-1} H) dw = -r_w + D_sigma K^{-1} r_p`,
    /// by GMRES preconditioned with `A`; each iteration costs one
    /// poroelastic solve with the cached factorization.
    fn newton_step(
        &mut self,
        poro: &[f64],
        omega: &[f64],
        rp: &[f64],
        rw: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), CouplerError> {
        let sigma = self.sigma(poro);
        let (a, _) = self.diffusion_matrix(sigma)?;
        let (ds, kinks) = assemble_diffusion_sigma_jacobian(&self.disc, &self.law, sigma, omega)?;
        if kinks > 0 {
            log::warn!("{kinks} derivative evaluations at a kink of the diffusion law");
        }
        let np = self.layout.len();
        let mut t = TripletBuilder::with_capacity(ds.nrows(), np, ds.nnz());
        t.push_block(0, self.layout.offset(FieldKind::Stress), &ds);
        let d_ff = self.omega_red.restrict_matrix(&t.build(), &self.poro_red);
        let h_ff = self.poro_red.restrict_matrix(&self.h_full, &self.omega_red);
        let (a_ff, _) = self.omega_red.split(&a);
        let a_lu = factorize_symmetric(&a_ff, &vec![Inertia::Positive; a_ff.nrows()])?;
        self.poro_factorization()?;
        let k_lu = self.poro_lu.as_ref().expect("factorized above");

        let kinv_rp = k_lu.solve(rp)?;
        let mut b: Vec<f64> = rw.iter().map(|v| -v).collect();
        d_ff.mul_vec_add(1.0, &kinv_rp, &mut b);
        let apply = |v: &[f64]| -> Result<Vec<f64>, SolveError> {
            let mut out = a_ff.mul_vec(v);
            let kh = k_lu.solve(&h_ff.mul_vec(v))?;
            d_ff.mul_vec_add(1.0, &kh, &mut out);
            Ok(out)
        };
        let mut dw = vec![0.0; b.len()];
        let info = gmres(apply, |v| a_lu.solve(v), &b, &mut dw, NEWTON_GMRES_TOL, 60, 300)?;
        if !info.converged {
            return Err(CouplerError::Solve(SolveError::Backend(format!(
                "Newton Schur complement solve stalled at {:.2e}",
                info.relative_residual
            ))));
        }
        log::trace!("newton linear solve: {} GMRES iterations", info.iterations);
        let mut rhs: Vec<f64> = rp.iter().map(|v| -v).collect();
        h_ff.mul_vec_add(1.0, &dw, &mut rhs);
        let dx = k_lu.solve(&rhs)?;
        Ok((dx, dw))
    }

    /// Bisection on `beta` for the largest value where Picard increments
    /// decrease strictly over `iterations` steps.
    pub fn contraction_threshold(
        &mut self,
        lo: f64,
        hi: f64,
        bisections: usize,
        iterations: usize,
    ) -> Result<f64, CouplerError> {
        let base = self.blocks.h.clone();
        let beta0 = self.params.beta;
        let contracts = |me: &mut Self, beta: f64| -> Result<bool, CouplerError> {
            let scale = if beta0 != 0.0 { beta / beta0 } else { 0.0 };
            me.blocks.h = base.scaled(scale);
            me.h_full = me.blocks.h_full(&me.layout);
            let opts = SolverOptions { max_iter: iterations, tol_rel: 1e-300, tol_abs: 1e-300, ..SolverOptions::default() };
            let log = match me.picard(&opts, None, None) {
                Ok(s) => s.log,
                Err(CouplerError::MaxIter { log }) | Err(CouplerError::Diverged { log }) => log,
                Err(CouplerError::Solve(_)) => return Ok(false),
                Err(e) => return Err(e),
            };
            Ok(log.windows(2).all(|w| w[1].increment < w[0].increment || w[1].increment == 0.0))
        };
        let (mut a, mut b) = (lo, hi);
        let mut result = lo;
        if contracts(self, hi)? {
            result = hi;
        } else {
            for _ in 0..bisections {
                let mid = 0.5 * (a + b);
                if contracts(self, mid)? {
                    a = mid;
                    result = mid;
                } else {
                    b = mid;
                }
            }
        }
        self.blocks.h = base;
        self.h_full = self.blocks.h_full(&self.layout);
        log::info!("picard contraction threshold: beta ~ {result:.4e}");
        Ok(result)
    }
}

const NEWTON_GMRES_TOL: f64 = 1e-13;

/// Expected pivot signs of the poroelastic matrix on free dofs: strain,
/// displacement, rotation and the multiplier are positive; stress, total
/// pressure and fluid pressure are negative.
fn poro_inertia(layout: &Layout, red: &Reduction) -> Vec<Inertia> {
    let mut signs = vec![Inertia::Positive; layout.len()];
    for kind in [FieldKind::Stress, FieldKind::TotalPressure, FieldKind::FluidPressure] {
        signs[layout.range(kind)].iter_mut().for_each(|s| *s = Inertia::Negative);
    }
    red.free().iter().map(|&i| signs[i]).collect()
}

/// Time-dependent boundary data, evaluated at the new time level.
pub trait BoundaryRamp {
    fn apply(&self, time: f64, disc: &mut Discretization);
    fn natural(&self, _time: f64) -> Option<NaturalData> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransientScenario {
    pub dt: f64,
    pub t_end: f64,
    pub mode: TransientMode,
}

impl TransientScenario {
    pub fn num_steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), CouplerError> {
        if !(self.dt > 0.0 && self.t_end >= 0.0) {
            return Err(CouplerError::Options("dt must be positive and t_end non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub iterations: usize,
    pub poro_residual: f64,
}

/// Backward Euler in time; `on_step` sees every converged step.
pub fn solve_transient(
    problem: &mut CoupledProblem,
    scenario: &TransientScenario,
    opts: &SolverOptions,
    ramp: &dyn BoundaryRamp,
    initial: Option<PreviousStep>,
    mut on_step: impl FnMut(&StepRecord, &CoupledSolution),
) -> Result<(CoupledSolution, Vec<StepRecord>), CouplerError> {
    scenario.validate()?;
    opts.validate()?;
    problem.set_time_step(Some(scenario.dt), scenario.mode);
    let mut prev = match initial {
        Some(p) => p,
        None => {
            problem.update_essential(|d| ramp.apply(0.0, d))?;
            PreviousStep { poro: vec![0.0; problem.layout.len()], omega: problem.initial_omega() }
        }
    };
    let mut records = Vec::new();
    let mut last = None;
    for n in 1..=scenario.num_steps() {
        let time = (n as f64 * scenario.dt).min(scenario.t_end.max(scenario.dt));
        problem.update_essential(|d| ramp.apply(time, d))?;
        if let Some(nat) = ramp.natural(time) {
            problem.update_natural(nat)?;
        }
        let mut omega0 = prev.omega.clone();
        for (k, &i) in problem.omega_red.fixed().iter().enumerate() {
            omega0[i] = problem.omega_fixed[k];
        }
        let result = match opts.mode {
            Mode::Picard => problem.picard(opts, Some(omega0), Some(&prev)),
            Mode::Newton => {
                let mut poro0 = prev.poro.clone();
                for (k, &i) in problem.poro_red.fixed().iter().enumerate() {
                    poro0[i] = problem.poro_fixed[k];
                }
                problem.newton(opts, Some(omega0), Some(poro0), Some(&prev))
            }
        };
        let mut sol = result.map_err(|e| CouplerError::Step { time, source: Box::new(e) })?;
        sol.log.iter_mut().for_each(|r| r.time = Some(time));
        let rec = StepRecord { step: n, time, iterations: sol.iterations(), poro_residual: sol.poro_residual };
        log::info!("t = {time}: {} iterations, residual {:.2e}", rec.iterations, rec.poro_residual);
        on_step(&rec, &sol);
        records.push(rec);
        prev = PreviousStep { poro: sol.poro.clone(), omega: sol.omega.clone() };
        last = Some(sol);
    }
    let last = match last {
        Some(s) => s,
        None => problem.solve(opts, Some(prev.omega.clone()), None)?,
    };
    Ok((last, records))
}
