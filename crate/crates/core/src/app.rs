//! Run configuration and experiment drivers behind the command-line tool:
//! convergence tables, parameter-robustness sweeps and the transient slab.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::DiffusionLaw;
use crate::coupler::{
    solve_transient, write_log, BoundaryRamp, CoupledProblem, CoupledSolution, CouplerError, IterationRecord,
    SolverOptions, StepRecord, TransientMode, TransientScenario,
};
use crate::elements::PushForward;
use crate::forms::{Discretization, MaterialParams, NaturalData, Permeability, Sources};
use crate::mesh::{BoundaryPartition, BoundaryTag, Mesh, MeshError, Side};
use crate::mms::{example1_case, example1_law, run_convergence_with, ConvergenceReport, FieldEval};
use crate::quadrature::triangle_rule;
use crate::spaces::{BoundarySelector, FieldKind};
use crate::vtk::emit_fields_vtk;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{source} (iteration log: {log})")]
    Solver { source: CouplerError, log: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io { path: path.to_path_buf(), source }
}

/// `(mu_s, lambda_s)` from Young's modulus and Poisson's ratio.
#[allow(non_snake_case)]
pub fn lame_from_E_nu(E: f64, nu: f64) -> Result<(f64, f64), AppError> {
    if !(E > 0.0) {
        return Err(AppError::Config(format!("Young's modulus must be positive, got {E}")));
    }
    if !(nu >= 0.0 && nu < 0.5) {
        return Err(AppError::Config(format!("Poisson's ratio must lie in [0, 0.5), got {nu}")));
    }
    Ok((E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    Convergence,
    Robustness,
    Slab,
}

/// Either a number of levels starting at `coarsest`, or explicit sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Levels {
    Count(usize),
    List(Vec<usize>),
}

impl Levels {
    pub fn sizes(&self, coarsest: usize) -> Vec<usize> {
        match self {
            Levels::Count(c) => (0..*c).map(|i| coarsest << i).collect(),
            Levels::List(v) => v.clone(),
        }
    }
}

/// Material constants, each optional on top of the experiment defaults.
/// The first Lame parameter may be given as `lambda_s`, `inv_lambda`, or
/// through `young` and `poisson` (which also set `mu_s`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsConfig {
    pub mu_s: Option<f64>,
    pub lambda_s: Option<f64>,
    pub inv_lambda: Option<f64>,
    pub young: Option<f64>,
    pub poisson: Option<f64>,
    pub c0: Option<f64>,
    pub alpha: Option<f64>,
    pub kappa: Option<Permeability>,
    pub mu_f: Option<f64>,
    pub rho_s: Option<f64>,
    pub rho_f: Option<f64>,
    pub g: Option<[f64; 2]>,
    pub beta: Option<f64>,
    pub phi: Option<f64>,
}

impl ParamsConfig {
    pub fn apply(&self, base: MaterialParams) -> Result<MaterialParams, AppError> {
        let mut p = base;
        let lame_given = [self.lambda_s.is_some(), self.inv_lambda.is_some(), self.young.is_some()];
        if lame_given.iter().filter(|b| **b).count() > 1 {
            return Err(AppError::Config("give only one of lambda_s, inv_lambda, young/poisson".into()));
        }
        match (self.young, self.poisson) {
            (Some(e), Some(nu)) => {
                if self.mu_s.is_some() {
                    return Err(AppError::Config("mu_s conflicts with young/poisson".into()));
                }
                let (mu, lambda) = lame_from_E_nu(e, nu)?;
                p.mu_s = mu;
                p.inv_lambda = 1.0 / lambda;
            }
            (None, None) => {}
            _ => return Err(AppError::Config("young and poisson must be given together".into())),
        }
        if let Some(l) = self.lambda_s {
            if !(l > 0.0) {
                return Err(AppError::Config(format!("lambda_s must be positive, got {l}")));
            }
            p.inv_lambda = 1.0 / l;
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.inv_lambda, self.inv_lambda);
        set(&mut p.mu_s, self.mu_s);
        set(&mut p.c0, self.c0);
        set(&mut p.alpha, self.alpha);
        set(&mut p.mu_f, self.mu_f);
        set(&mut p.rho_s, self.rho_s);
        set(&mut p.rho_f, self.rho_f);
        set(&mut p.beta, self.beta);
        set(&mut p.phi, self.phi);
        if let Some(k) = self.kappa {
            p.kappa = k;
        }
        if let Some(g) = self.g {
            p.g = g;
        }
        p.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(p)
    }
}

/// Diffusion law selection; unset coefficients keep the experiment default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LawConfig {
    pub kind: Option<String>,
    pub d0: Option<f64>,
    pub eta0: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta: Option<f64>,
}

fn law_kind(name: &str) -> Result<&'static str, AppError> {
    let norm: String = name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
    Ok(match norm.as_str() {
        "constant" => "constant",
        "exptrace" => "exp_trace",
        "isoexp" => "iso_exp",
        "quadratic" => "quadratic",
        "hinderedexp" => "hindered_exp",
        _ => return Err(AppError::Config(format!("unknown diffusion law '{name}'"))),
    })
}

fn kind_of(law: &DiffusionLaw) -> &'static str {
    match law {
        DiffusionLaw::Constant { .. } => "constant",
        DiffusionLaw::ExpTrace { .. } => "exp_trace",
        DiffusionLaw::IsoExp { .. } => "iso_exp",
        DiffusionLaw::Quadratic { .. } => "quadratic",
        DiffusionLaw::HinderedExp { .. } => "hindered_exp",
    }
}

impl LawConfig {
    /// Resolves against `defaults(kind)`, the experiment's default law of
    /// each kind. Coefficients the chosen kind does not use are rejected.
    pub fn resolve(
        &self,
        default_kind: &DiffusionLaw,
        defaults: impl Fn(&str) -> DiffusionLaw,
    ) -> Result<DiffusionLaw, AppError> {
        let kind = match &self.kind {
            Some(k) => law_kind(k)?,
            None => kind_of(default_kind),
        };
        let mut law = defaults(kind);
        let unused = |name: &str| AppError::Config(format!("law '{kind}' has no coefficient {name}"));
        let pick = |v: Option<f64>, slot: &mut f64| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        match &mut law {
            DiffusionLaw::Constant { d0 } => {
                pick(self.d0, d0);
                for (n, v) in [("eta0", self.eta0), ("eta1", self.eta1), ("eta2", self.eta2), ("eta", self.eta)] {
                    if v.is_some() {
                        return Err(unused(n));
                    }
                }
            }
            DiffusionLaw::ExpTrace { d0, eta0, eta1 } => {
                pick(self.d0, d0);
                pick(self.eta0, eta0);
                pick(self.eta1, eta1);
                for (n, v) in [("eta2", self.eta2), ("eta", self.eta)] {
                    if v.is_some() {
                        return Err(unused(n));
                    }
                }
            }
            DiffusionLaw::IsoExp { d0, eta0 } => {
                pick(self.d0, d0);
                pick(self.eta0, eta0);
                for (n, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta", self.eta)] {
                    if v.is_some() {
                        return Err(unused(n));
                    }
                }
            }
            DiffusionLaw::Quadratic { d0, eta0, eta2 } => {
                pick(self.d0, d0);
                pick(self.eta0, eta0);
                pick(self.eta2, eta2);
                for (n, v) in [("eta1", self.eta1), ("eta", self.eta)] {
                    if v.is_some() {
                        return Err(unused(n));
                    }
                }
            }
            DiffusionLaw::HinderedExp { d0, eta } => {
                pick(self.d0, d0);
                pick(self.eta, eta);
                for (n, v) in [("eta0", self.eta0), ("eta1", self.eta1), ("eta2", self.eta2)] {
                    if v.is_some() {
                        return Err(unused(n));
                    }
                }
            }
        }
        if !(law.d0() > 0.0) {
            return Err(AppError::Config("d0 must be positive".into()));
        }
        Ok(law)
    }
}

/// Boundary loading of the slab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlabSetup {
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    /// Top pressure `amplitude * atan(t / time_scale)`, also driving the
    /// top traction `-alpha p n`.
    pub p_in_amplitude: f64,
    pub p_in_time_scale: f64,
    /// Fluid pressure on the vertical walls.
    pub p_side: f64,
    /// Tracer concentration on the top.
    pub omega_in: f64,
    /// Write a VTK snapshot every this many steps (0: final step only).
    pub snapshot_every: usize,
}

impl Default for SlabSetup {
    fn default() -> Self {
        Self {
            width: 1.0,
            height: 1.0,
            nx: 64,
            ny: 64,
            p_in_amplitude: 0.5,
            p_in_time_scale: 10.0,
            p_side: 9.0,
            omega_in: 1.0,
            snapshot_every: 0,
        }
    }
}

/// Parameter swept by the robustness experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaS,
    Kappa,
    Alpha,
    MuF,
    C0,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self, AppError> {
        Ok(match s {
            "lambda_s" | "lambda" => SweepParam::LambdaS,
            "kappa" => SweepParam::Kappa,
            "alpha" => SweepParam::Alpha,
            "mu_f" => SweepParam::MuF,
            "c0" => SweepParam::C0,
            _ => return Err(AppError::Config(format!("unknown sweep parameter '{s}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaS => "lambda_s",
            SweepParam::Kappa => "kappa",
            SweepParam::Alpha => "alpha",
            SweepParam::MuF => "mu_f",
            SweepParam::C0 => "c0",
        }
    }

    pub fn set(self, p: &mut MaterialParams, v: f64) {
        match self {
            SweepParam::LambdaS => p.inv_lambda = if v.is_infinite() { 0.0 } else { 1.0 / v },
            SweepParam::Kappa => p.kappa = Permeability::Scalar(v),
            SweepParam::Alpha => p.alpha = v,
            SweepParam::MuF => p.mu_f = v,
            SweepParam::C0 => p.c0 = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { param: SweepParam::LambdaS, values: vec![1.0, 1e2, 1e4, 1e8] }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub k: usize,
    pub levels: Levels,
    pub coarsest: usize,
    pub params: ParamsConfig,
    pub law: LawConfig,
    pub solver: SolverOptions,
    pub scenario: Option<TransientScenario>,
    pub slab: SlabSetup,
    pub robustness: SweepConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Convergence,
            k: 0,
            levels: Levels::Count(5),
            coarsest: 4,
            params: ParamsConfig::default(),
            law: LawConfig::default(),
            solver: SolverOptions::default(),
            scenario: None,
            slab: SlabSetup::default(),
            robustness: SweepConfig::default(),
            output: PathBuf::from("output"),
        }
    }
}

/// Slab constants: brain tissue in mm, s, mg units.
pub fn slab_params() -> MaterialParams {
    let (mu_s, lambda_s) = lame_from_E_nu(800.0, 0.495).expect("valid constants");
    MaterialParams {
        mu_s,
        inv_lambda: 1.0 / lambda_s,
        c0: 2e-8,
        alpha: 1.0,
        kappa: Permeability::Scalar(1e-8),
        mu_f: 0.7,
        rho_s: 1e-3,
        rho_f: 1e-3,
        g: [0.0, 0.0],
        beta: 0.45,
        phi: 0.2,
    }
}

pub const SLAB_D0: f64 = 5.3e-5;

pub fn slab_law(kind: &str) -> DiffusionLaw {
    match kind {
        "constant" => DiffusionLaw::Constant { d0: SLAB_D0 },
        "exp_trace" => DiffusionLaw::ExpTrace { d0: SLAB_D0, eta0: 1.0, eta1: 5e-5 },
        "quadratic" => DiffusionLaw::Quadratic { d0: SLAB_D0, eta0: 0.02, eta2: 1e-5 },
        "hindered_exp" => DiffusionLaw::HinderedExp { d0: SLAB_D0, eta: 2e-5 },
        _ => DiffusionLaw::IsoExp { d0: SLAB_D0, eta0: 5e-5 },
    }
}

fn example1_law_of(kind: &str) -> DiffusionLaw {
    match kind {
        "constant" => DiffusionLaw::Constant { d0: 0.01 },
        "iso_exp" => DiffusionLaw::IsoExp { d0: 0.01, eta0: 1.0 },
        "quadratic" => DiffusionLaw::Quadratic { d0: 0.01, eta0: 1.0, eta2: 0.01 },
        "hindered_exp" => DiffusionLaw::HinderedExp { d0: 0.01, eta: 1.0 },
        _ => example1_law(),
    }
}

pub fn default_scenario() -> TransientScenario {
    TransientScenario { dt: 50.0, t_end: 1800.0, mode: TransientMode::Replace }
}

/// Configuration with every default filled in; this is what the
/// provenance file records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub experiment: Experiment,
    pub k: usize,
    pub levels: Vec<usize>,
    pub params: MaterialParams,
    pub law: DiffusionLaw,
    pub solver: SolverOptions,
    pub scenario: Option<TransientScenario>,
    pub slab: Option<SlabSetup>,
    pub robustness: Option<SweepConfig>,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, AppError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn resolve(&self) -> Result<Resolved, AppError> {
        self.solver.validate().map_err(|e| AppError::Config(e.to_string()))?;
        if self.k > 1 {
            return Err(AppError::Config(format!("element order k = {} is not supported (0 or 1)", self.k)));
        }
        let slab = self.experiment == Experiment::Slab;
        let (base, law) = if slab {
            (slab_params(), self.law.resolve(&slab_law("iso_exp"), slab_law)?)
        } else {
            (MaterialParams::unity(), self.law.resolve(&example1_law(), example1_law_of)?)
        };
        let params = self.params.apply(base)?;
        let levels = self.levels.sizes(self.coarsest);
        if !slab && (levels.len() < 2 || levels.contains(&0)) {
            return Err(AppError::Config("a convergence study needs at least two positive mesh sizes".into()));
        }
        let scenario = if slab {
            let s = self.scenario.unwrap_or_else(default_scenario);
            s.validate().map_err(|e| AppError::Config(e.to_string()))?;
            Some(s)
        } else {
            None
        };
        if slab && (self.slab.nx == 0 || self.slab.ny == 0) {
            return Err(AppError::Config("slab mesh needs nx, ny >= 1".into()));
        }
        Ok(Resolved {
            experiment: self.experiment,
            k: self.k,
            levels: if slab { Vec::new() } else { levels },
            params,
            law,
            solver: self.solver,
            scenario,
            slab: slab.then_some(self.slab),
            robustness: (self.experiment == Experiment::Robustness).then(|| self.robustness.clone()),
            output: self.output.clone(),
        })
    }
}

/// Time-dependent boundary data of the slab.
#[derive(Debug, Clone, Copy)]
pub struct SlabRamp {
    pub setup: SlabSetup,
    pub alpha: f64,
}

impl SlabRamp {
    pub fn p_in(&self, t: f64) -> f64 {
        self.setup.p_in_amplitude * (t / self.setup.p_in_time_scale).atan()
    }
}

impl BoundaryRamp for SlabRamp {
    fn apply(&self, time: f64, d: &mut Discretization) {
        let p_in = self.p_in(time);
        let top = BoundarySelector::Sides(vec![Side::Top]);
        let walls = BoundarySelector::Sides(vec![Side::Left, Side::Right]);
        let alpha = self.alpha;
        let sigma = d.poro.get_mut(FieldKind::Stress);
        sigma.apply_normal_trace_bc(&walls, |_| [0.0, 0.0]).expect("stress space");
        sigma.apply_normal_trace_bc(&top, |_| [0.0, -alpha * p_in]).expect("stress space");
        let p = d.poro.get_mut(FieldKind::FluidPressure);
        // the top value wins at the two upper corners
        p.apply_dirichlet(&walls, |_| self.setup.p_side).expect("pressure space");
        p.apply_dirichlet(&top, |_| p_in).expect("pressure space");
    }
}

/// Slab problem at `t = 0`: clamped bottom (`Gamma`), prescribed stress
/// and pressure on the top and the walls (`Sigma`), tracer fixed on top.
pub fn slab_problem(
    setup: &SlabSetup,
    k: usize,
    params: MaterialParams,
    law: DiffusionLaw,
) -> Result<(CoupledProblem, SlabRamp), AppError> {
    let partition = BoundaryPartition { bottom: BoundaryTag::Gamma, ..BoundaryPartition::all_sigma() };
    let mesh = Arc::new(Mesh::rectangle(setup.width, setup.height, setup.nx, setup.ny, partition)?);
    let mut disc = Discretization::new(mesh, k).map_err(|e| AppError::Config(e.to_string()))?;
    let ramp = SlabRamp { setup: *setup, alpha: params.alpha };
    ramp.apply(0.0, &mut disc);
    let omega_in = setup.omega_in;
    disc.omega_mut()
        .apply_dirichlet(&BoundarySelector::Sides(vec![Side::Top]), |_| omega_in)
        .map_err(|e| AppError::Config(e.to_string()))?;
    let pb = CoupledProblem::new(disc, params, law, Sources::default(), NaturalData::default())
        .map_err(|e| AppError::Config(e.to_string()))?;
    Ok((pb, ramp))
}

/// Integral summaries of the tracer field on a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracerMetrics {
    pub mean: f64,
    /// Mean over the lower half of the domain.
    pub mean_lower: f64,
    /// `int (x - x_mid) omega` divided by the area.
    pub x_moment: f64,
}

pub fn tracer_metrics(disc: &Discretization, omega: &[f64]) -> TracerMetrics {
    let mesh = &disc.mesh;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in mesh.vertices() {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let (xm, ym) = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]));
    let rule = triangle_rule(2 * disc.k + 4).expect("supported degree");
    let mut ev = FieldEval::new(&disc.omega, omega, &rule);
    let (mut total, mut lower, mut area, mut area_lower, mut moment) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut buf = [0.0; 4];
    for cell in 0..mesh.num_cells() {
        let pf = PushForward::for_cell(mesh.cell_coords(cell), cell).expect("valid mesh");
        ev.cell(cell, &pf);
        // cells never straddle the mid line on the structured slab meshes
        // with even ny; otherwise the split is by centroid
        let c = mesh.cell_coords(cell);
        let below = (c[0][1] + c[1][1] + c[2][1]) / 3.0 < ym;
        for q in 0..rule.len() {
            let w = ev.cb.jxw[q];
            let x = pf.map_point(rule.points[q]);
            ev.cb.eval(&ev.loc, q, &mut buf);
            total += w * buf[0];
            area += w;
            moment += w * (x[0] - xm) * buf[0];
            if below {
                lower += w * buf[0];
                area_lower += w;
            }
        }
    }
    TracerMetrics { mean: total / area, mean_lower: lower / area_lower, x_moment: moment / area }
}

/// Result of a slab run.
pub struct SlabOutcome {
    pub steps: Vec<StepRecord>,
    pub metrics: Vec<TracerMetrics>,
    pub solution: CoupledSolution,
    pub problem: CoupledProblem,
    pub seconds: f64,
}

/// Runs the transient slab; `on_step` sees every accepted step.
pub fn run_slab(
    setup: &SlabSetup,
    k: usize,
    params: MaterialParams,
    law: DiffusionLaw,
    scenario: &TransientScenario,
    opts: &SolverOptions,
    mut on_step: impl FnMut(&StepRecord, &CoupledSolution, &Discretization, &TracerMetrics),
) -> Result<SlabOutcome, CouplerError> {
    let start = Instant::now();
    let (mut pb, ramp) = slab_problem(setup, k, params, law).map_err(|e| CouplerError::Options(e.to_string()))?;
    // the spaces are shared; only boundary values change during the run
    let disc = pb.disc().clone();
    let mut metrics = Vec::new();
    let (solution, steps) = solve_transient(&mut pb, scenario, opts, &ramp, None, |rec, sol| {
        let m = tracer_metrics(&disc, &sol.omega);
        on_step(rec, sol, &disc, &m);
        metrics.push(m);
    })?;
    Ok(SlabOutcome { steps, metrics, solution, problem: pb, seconds: start.elapsed().as_secs_f64() })
}

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    package: &'static str,
    version: &'static str,
    config: &'a Resolved,
    seconds: BTreeMap<String, f64>,
    files: &'a [PathBuf],
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, AppError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf, AppError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        self.files.push(PathBuf::from(name));
        Ok(path)
    }

    fn log(&mut self, name: &str, log: &[IterationRecord]) -> Result<PathBuf, AppError> {
        self.write(name, |w| write_log(log, w))
    }
}

/// Convergence table for the manufactured solution under `params`.
/// Iteration logs go to `iterations_{tag}_n{n}.jsonl`.
fn convergence_table(
    cfg: &Resolved,
    params: MaterialParams,
    tag: &str,
    out: &mut Output,
) -> Result<ConvergenceReport, AppError> {
    let case = example1_case(params, cfg.law);
    let mut logs = Vec::new();
    let report = run_convergence_with(
        &case,
        cfg.k,
        &cfg.levels,
        &cfg.solver,
        BoundaryPartition::all_gamma(),
        |row, _, sol| logs.push((row.n, sol.log.clone())),
    )?;
    for (n, log) in &logs {
        out.log(&format!("iterations_{tag}_n{n}.jsonl"), log)?;
    }
    out.write(&format!("convergence_{tag}.csv"), |w| report.write_csv(w))?;
    Ok(report)
}

/// Largest absolute change of any last-pair rate relative to `base`.
pub fn max_rate_change(report: &ConvergenceReport, base: &ConvergenceReport) -> Option<f64> {
    let (a, b) = (report.last_rates()?, base.last_rates()?);
    Some(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Summary of one run for the caller.
#[derive(Debug, Clone)]
pub enum Summary {
    Convergence(ConvergenceReport),
    Robustness { base: ConvergenceReport, points: Vec<(f64, ConvergenceReport)> },
    Slab { steps: Vec<StepRecord>, metrics: Vec<TracerMetrics> },
}

/// Executes a resolved configuration and writes all outputs plus
/// `provenance.json` into `cfg.output`.
pub fn run(cfg: &Resolved) -> Result<(Summary, Artifacts), AppError> {
    let start = Instant::now();
    let mut out = Output::new(&cfg.output)?;
    let mut seconds = BTreeMap::new();
    let summary = match cfg.experiment {
        Experiment::Convergence => {
            let report = convergence_table(cfg, cfg.params, "base", &mut out)?;
            if let Some(f) = &report.failure {
                log::warn!("convergence study stopped early: {f}");
            }
            Summary::Convergence(report)
        }
        Experiment::Robustness => {
            let sweep = cfg.robustness.as_ref().expect("resolved sweep");
            let t0 = Instant::now();
            let base = convergence_table(cfg, cfg.params, "base", &mut out)?;
            seconds.insert("base".to_string(), t0.elapsed().as_secs_f64());
            let mut points = Vec::new();
            for &v in &sweep.values {
                let t0 = Instant::now();
                let mut p = cfg.params;
                sweep.param.set(&mut p, v);
                p.validate().map_err(|e| AppError::Config(e.to_string()))?;
                let tag = format!("{}_{v:e}", sweep.param.name());
                let report = convergence_table(cfg, p, &tag, &mut out)?;
                seconds.insert(tag, t0.elapsed().as_secs_f64());
                points.push((v, report));
            }
            out.write("robustness.csv", |w| {
                writeln!(w, "param,value,levels,max_rate_change,partial")?;
                for (v, r) in &points {
                    let change = max_rate_change(r, &base).map_or(String::new(), |c| format!("{c:.4}"));
                    writeln!(w, "{},{v:e},{},{change},{}", sweep.param.name(), r.rows.len(), r.is_partial())?;
                }
                Ok(())
            })?;
            Summary::Robustness { base, points }
        }
        Experiment::Slab => {
            let setup = cfg.slab.expect("resolved slab");
            let scenario = cfg.scenario.expect("resolved scenario");
            let nsteps = scenario.num_steps();
            let mut snapshots: Vec<(usize, Result<(), AppError>)> = Vec::new();
            let mut log = Vec::new();
            let outcome = run_slab(&setup, cfg.k, cfg.params, cfg.law, &scenario, &cfg.solver, |rec, sol, disc, _| {
                log.extend_from_slice(&sol.log);
                let due = setup.snapshot_every > 0 && rec.step % setup.snapshot_every == 0;
                if due || rec.step == nsteps {
                    let name = format!("slab_{:04}.vtk", rec.step);
                    let path = out.path(&name);
                    let title = format!("slab t={} law={}", rec.time, cfg.law.name());
                    let r = emit_fields_vtk(&path, disc, sol, &cfg.law, &title).map_err(io_err(&path));
                    if r.is_ok() {
                        out.files.push(PathBuf::from(&name));
                    }
                    snapshots.push((rec.step, r));
                }
            });
            let log_path = out.log("iterations.jsonl", &log)?;
            let outcome = outcome.map_err(|source| {
                let partial = match &source {
                    CouplerError::Step { source, .. } => source.log().map(|l| l.to_vec()).unwrap_or_default(),
                    e => e.log().map(|l| l.to_vec()).unwrap_or_default(),
                };
                let mut all = log.clone();
                all.extend(partial);
                let _ = File::create(&log_path).and_then(|f| write_log(&all, BufWriter::new(f)));
                AppError::Solver { source, log: log_path.clone() }
            })?;
            for (_, r) in snapshots {
                r?;
            }
            out.write("slab.csv", |w| {
                writeln!(w, "step,time,iterations,poro_residual,mean,mean_lower,x_moment")?;
                for (s, m) in outcome.steps.iter().zip(&outcome.metrics) {
                    writeln!(
                        w,
                        "{},{},{},{:.3e},{:.12e},{:.12e},{:.12e}",
                        s.step, s.time, s.iterations, s.poro_residual, m.mean, m.mean_lower, m.x_moment
                    )?;
                }
                Ok(())
            })?;
            Summary::Slab { steps: outcome.steps, metrics: outcome.metrics }
        }
    };
    seconds.insert("total".to_string(), start.elapsed().as_secs_f64());
    let files = out.files.clone();
    let prov = Provenance {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seconds,
        files: &files,
    };
    out.write("provenance.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &prov).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    Ok((summary, Artifacts { files: out.files }))
}
