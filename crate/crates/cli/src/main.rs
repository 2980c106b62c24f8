use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use porodiff::app::{run, AppError, Experiment, Levels, RunConfig, Summary, SweepParam};
use porodiff::coupler::{Mode, TransientMode};
use porodiff::forms::Permeability;
use porodiff::mms::ErrorNorms;

#[derive(Parser)]
#[command(name = "porodiff", version, about = "Mixed FEM for poroelasticity with stress-assisted diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manufactured-solution convergence table.
    Convergence(Common),
    /// Convergence tables while sweeping one material parameter.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// lambda_s, kappa, alpha, mu_f or c0
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values, e.g. 1,1e2,1e4,1e8
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Transient tracer infiltration into a loaded slab.
    Slab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        tend: Option<f64>,
        /// replace or augment
        #[arg(long)]
        transient_mode: Option<String>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Element order (0 or 1).
    #[arg(long)]
    k: Option<usize>,
    /// Number of levels, or a comma-separated list of mesh sizes.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    coarsest: Option<usize>,
    /// picard or newton
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tol_rel: Option<f64>,
    #[arg(long)]
    tol_abs: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    relaxation: Option<f64>,
    #[arg(long)]
    law: Option<String>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    mu_s: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    inv_lambda: Option<f64>,
    #[arg(long)]
    young: Option<f64>,
    #[arg(long)]
    poisson: Option<f64>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    mu_f: Option<f64>,
    #[arg(long)]
    rho_s: Option<f64>,
    #[arg(long)]
    rho_f: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
}

fn overwrite<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn overwrite_opt<T>(dst: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *dst = v;
    }
}

impl Common {
    fn apply(self, experiment: Experiment) -> Result<RunConfig, AppError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.experiment = experiment;
        overwrite(&mut cfg.output, self.output);
        overwrite(&mut cfg.k, self.k);
        overwrite(&mut cfg.coarsest, self.coarsest);
        if let Some(l) = &self.levels {
            cfg.levels = parse_levels(l)?;
        }
        if let Some(m) = &self.mode {
            cfg.solver.mode = match m.as_str() {
                "picard" => Mode::Picard,
                "newton" => Mode::Newton,
                _ => return Err(AppError::Config(format!("unknown solver mode '{m}'"))),
            };
        }
        overwrite(&mut cfg.solver.tol_rel, self.tol_rel);
        overwrite(&mut cfg.solver.tol_abs, self.tol_abs);
        overwrite(&mut cfg.solver.max_iter, self.max_iter);
        overwrite(&mut cfg.solver.relaxation, self.relaxation);
        let law = &mut cfg.law;
        overwrite_opt(&mut law.kind, self.law);
        overwrite_opt(&mut law.d0, self.d0);
        overwrite_opt(&mut law.eta0, self.eta0);
        overwrite_opt(&mut law.eta1, self.eta1);
        overwrite_opt(&mut law.eta2, self.eta2);
        overwrite_opt(&mut law.eta, self.eta);
        let p = &mut cfg.params;
        overwrite_opt(&mut p.mu_s, self.mu_s);
        overwrite_opt(&mut p.lambda_s, self.lambda_s);
        overwrite_opt(&mut p.inv_lambda, self.inv_lambda);
        overwrite_opt(&mut p.young, self.young);
        overwrite_opt(&mut p.poisson, self.poisson);
        overwrite_opt(&mut p.c0, self.c0);
        overwrite_opt(&mut p.alpha, self.alpha);
        overwrite_opt(&mut p.kappa, self.kappa.map(Permeability::Scalar));
        overwrite_opt(&mut p.mu_f, self.mu_f);
        overwrite_opt(&mut p.rho_s, self.rho_s);
        overwrite_opt(&mut p.rho_f, self.rho_f);
        overwrite_opt(&mut p.beta, self.beta);
        overwrite_opt(&mut p.phi, self.phi);
        Ok(cfg)
    }
}

fn parse_levels(s: &str) -> Result<Levels, AppError> {
    let bad = |_| AppError::Config(format!("cannot parse levels '{s}'"));
    if s.contains(',') {
        s.split(',').map(|t| t.trim().parse().map_err(bad)).collect::<Result<_, _>>().map(Levels::List)
    } else {
        s.trim().parse().map(Levels::Count).map_err(bad)
    }
}

fn build(cmd: Command) -> Result<RunConfig, AppError> {
    match cmd {
        Command::Convergence(c) => c.apply(Experiment::Convergence),
        Command::Robustness { common, param, values } => {
            let mut cfg = common.apply(Experiment::Robustness)?;
            if let Some(p) = param {
                cfg.robustness.param = SweepParam::parse(&p)?;
            }
            overwrite(&mut cfg.robustness.values, values);
            Ok(cfg)
        }
        Command::Slab { common, dt, tend, transient_mode, nx, ny, snapshot_every } => {
            let mut cfg = common.apply(Experiment::Slab)?;
            let mut sc = cfg.scenario.unwrap_or_else(porodiff::app::default_scenario);
            overwrite(&mut sc.dt, dt);
            overwrite(&mut sc.t_end, tend);
            if let Some(m) = transient_mode {
                sc.mode = match m.as_str() {
                    "replace" => TransientMode::Replace,
                    "augment" => TransientMode::Augment,
                    _ => return Err(AppError::Config(format!("unknown transient mode '{m}'"))),
                };
            }
            cfg.scenario = Some(sc);
            overwrite(&mut cfg.slab.nx, nx);
            overwrite(&mut cfg.slab.ny, ny);
            overwrite(&mut cfg.slab.snapshot_every, snapshot_every);
            Ok(cfg)
        }
    }
}

fn print_rates(label: &str, r: &porodiff::mms::ConvergenceReport) {
    match r.last_rates() {
        Some(rates) => {
            let parts: Vec<String> = ErrorNorms::NAMES.iter().zip(rates).map(|(n, v)| format!("{n} {v:.3}")).collect();
            println!("{label}: {}", parts.join(", "));
        }
        None => println!("{label}: fewer than two levels solved"),
    }
    if let Some(f) = &r.failure {
        println!("{label}: stopped early ({f})");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build(cli.command).and_then(|cfg| {
        let resolved = cfg.resolve()?;
        run(&resolved).map(|(s, a)| (s, a, resolved))
    });
    match result {
        Ok((summary, artifacts, cfg)) => {
            match &summary {
                Summary::Convergence(r) => print_rates("last-pair rates", r),
                Summary::Robustness { base, points } => {
                    print_rates("baseline", base);
                    for (v, r) in points {
                        print_rates(&format!("value {v:e}"), r);
                    }
                }
                Summary::Slab { steps, metrics } => {
                    if let (Some(s), Some(m)) = (steps.last(), metrics.last()) {
                        println!(
                            "t = {}: mean tracer {:.6e}, lower half {:.6e}, x-moment {:.3e}",
                            s.time, m.mean, m.mean_lower, m.x_moment
                        );
                    }
                }
            }
            println!("wrote {} files to {}", artifacts.files.len(), cfg.output.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("porodiff: {e}");
            ExitCode::FAILURE
        }
    }
}
