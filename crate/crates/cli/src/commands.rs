//! solve / verify / simulate / conjugate workflows.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use roblog_core::bsde::{solve_value_bsde, SolveMode, ValueReport};
use roblog_core::generator::GeneratorBundle;
use roblog_core::lattice::{build_pool, Lattice};
use roblog_core::model::{simulate_wealth, BrownianPath, StepValue};
use roblog_core::numeric::fmt17;
use roblog_core::verify::{
    calibrate_tolerance, check_supermartingale, default_checkpoints, dual_objective, eta_grid, perturb_strategy,
    robust_value_crosscheck, DensityScenario,
};
use roblog_core::Error;

use crate::config::{ConfigError, ConventionName, ModeName, Problem, ProblemConfig};
use crate::output::{write_csv, write_key_values};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        Self { code: EXIT_CONFIG, message: format!("config error: {e}") }
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidModel(_)
            | Error::InvalidWeights(_)
            | Error::InvalidPenalty(_)
            | Error::InvalidSet(_)
            | Error::InvalidLattice(_) => EXIT_CONFIG,
            _ => EXIT_SOLVER,
        };
        Self { code, message: format!("solver error: {e}") }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CommandError {
    CommandError { code: EXIT_SOLVER, message: format!("cannot write {}: {e}", path.display()) }
}

/// Flag / environment overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub mode: Option<ModeName>,
    pub convention: Option<ConventionName>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ProblemConfig) {
        if let Some(o) = &self.out {
            cfg.output.directory = o.clone();
        }
        if let Some(p) = self.paths {
            cfg.simulate.paths = p;
        }
        if let Some(s) = self.seed {
            cfg.simulate.seed = s;
            cfg.verify.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.solver.steps = n;
        }
        if let Some(m) = self.mode {
            cfg.solver.mode = m;
        }
        if let Some(c) = self.convention {
            cfg.solver.convention = c;
        }
        if let Some(w) = self.workers {
            cfg.solver.workers = w;
        }
    }
}

pub struct Context {
    pub config: ProblemConfig,
    pub problem: Problem,
    pub out_dir: PathBuf,
    pub hash: String,
}

pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Context, CommandError> {
    let mut config = ProblemConfig::load(config_path)?;
    overrides.apply(&mut config);
    let base = config_path.parent().unwrap_or(Path::new("."));
    let problem = config.build(base)?;
    let out_dir = config.output.directory.clone();
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let hash = config.instance_hash();
    Ok(Context { config, problem, out_dir, hash })
}

/// Run a command, print its diagnostics and map the outcome to an exit code.
pub fn run(f: impl FnOnce() -> Result<i32, CommandError>) -> i32 {
    match f() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.message);
            e.code
        }
    }
}

fn solve(ctx: &Context) -> Result<ValueReport, CommandError> {
    let report = solve_value_bsde(&ctx.problem.bundle, &ctx.problem.solver)?;
    log::info!("solved {} steps in {} mode", report.steps, report.mode.name());
    Ok(report)
}

fn pi_headers(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn write_solution_files(ctx: &Context, report: &ValueReport) -> Result<(), CommandError> {
    let bundle = &ctx.problem.bundle;
    let dir = &ctx.out_dir;
    let d = bundle.model.num_assets();
    let n = report.steps;
    let dt = report.horizon / n as f64;
    let time = |k: usize| if k == n { report.horizon } else { k as f64 * dt };

    let p = dir.join("value_report.csv");
    write_key_values(
        &p,
        &[
            ("instance_hash", ctx.hash.clone()),
            ("convention", report.convention.name().into()),
            ("mode", report.mode.name().into()),
            ("steps", n.to_string()),
            ("horizon", fmt17(report.horizon)),
            ("initial_wealth", fmt17(report.initial_wealth)),
            ("alpha_bar", fmt17(report.alpha_bar)),
            ("h0", fmt17(report.h0)),
            ("y0", fmt17(report.y0)),
            ("v0", fmt17(report.v0)),
            ("penalty_discounting", "discounted".into()),
        ],
    )
    .map_err(|e| io_err(&p, e))?;

    let p = dir.join("h_rho_curve.csv");
    let rows = (0..=n)
        .map(|k| {
            let t = time(k);
            Ok(vec![fmt17(t), fmt17(bundle.h(t)?), fmt17(bundle.rho(t)?)])
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_csv(&p, &["t", "h", "rho"], rows).map_err(|e| io_err(&p, e))?;

    let p = dir.join("strategy.csv");
    let mut header = vec!["t".to_string(), "node".into()];
    header.extend(pi_headers("pi", d));
    header.push("c".into());
    let mut rows = Vec::new();
    for (k, step) in report.strategy.steps.iter().enumerate() {
        let controls: Vec<_> = match step {
            StepValue::Uniform(c) => vec![c],
            StepValue::PerNode(v) => v.iter().collect(),
        };
        for (node, ctl) in controls.into_iter().enumerate() {
            let mut row = vec![fmt17(time(k)), node.to_string()];
            row.extend(ctl.pi.iter().map(|v| fmt17(*v)));
            row.push(fmt17(ctl.c));
            rows.push(row);
        }
    }
    write_csv(&p, &header, rows).map_err(|e| io_err(&p, e))?;

    let p = dir.join("solution.csv");
    if let Some(ode) = &report.ode {
        let rows = (0..ode.t.len())
            .map(|k| vec![fmt17(ode.t[k]), fmt17(ode.y[k]), fmt17(ode.f0[k]), fmt17(ode.h[k]), fmt17(ode.rho[k])])
            .collect::<Vec<_>>();
        write_csv(&p, &["t", "Y", "f0", "h", "rho"], rows).map_err(|e| io_err(&p, e))?;
    } else if let Some(sol) = &report.lattice {
        let m = sol.lattice.dim();
        let mut header = vec!["t".to_string(), "node".into(), "Y".into()];
        header.extend(pi_headers("Z", m));
        header.extend(pi_headers("pi", d));
        header.push("c_star".into());
        let mut rows = Vec::new();
        for k in 0..n {
            for node in 0..sol.lattice.nodes(k) {
                let ctl = report.strategy.control(k, node);
                let mut row = vec![fmt17(time(k)), node.to_string(), fmt17(sol.y[k][node])];
                row.extend(sol.z_at(k, node).iter().map(|v| fmt17(*v)));
                row.extend(ctl.pi.iter().map(|v| fmt17(*v)));
                row.push(fmt17(ctl.c));
                rows.push(row);
            }
        }
        write_csv(&p, &header, rows).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

pub fn cmd_solve(config_path: &Path, overrides: &Overrides) -> Result<i32, CommandError> {
    let ctx = load(config_path, overrides)?;
    let report = solve(&ctx)?;
    write_solution_files(&ctx, &report)?;
    println!("convention = {}", report.convention.name());
    println!("mode = {}", report.mode.name());
    println!("steps = {}", report.steps);
    println!("V0 = {:.4}", report.v0);
    println!("V0 (full) = {}", fmt17(report.v0));
    println!("Y0 = {}", fmt17(report.y0));
    println!("h(0) = {}", fmt17(report.h0));
    println!("instance = {}", ctx.hash);
    Ok(EXIT_OK)
}

/// One row of verify_report.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(check: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Self { check: check.into(), value, tolerance, pass }
    }
}

/// The verification suite; rows are in a fixed order.
pub fn verification_rows(ctx: &Context) -> Result<Vec<CheckRow>, CommandError> {
    let cfg = &ctx.config;
    let vc = &cfg.verify;
    let bundle = &ctx.problem.bundle;
    let spec = &ctx.problem.solver;
    let horizon = bundle.weights.horizon;
    let checkpoints = vc.checkpoints.clone().unwrap_or_else(|| default_checkpoints(horizon));
    let report = solve(ctx)?;
    let mut rows = Vec::new();

    let tol = calibrate_tolerance(bundle, spec, &checkpoints)?;
    log::info!("tol(N) = {} with C = {}", tol.tol, tol.constant);
    let opt = check_supermartingale(&report, &report.strategy, bundle, &checkpoints, spec.workers)?;
    for (s, gap) in &opt.gaps {
        rows.push(CheckRow::new(format!("martingale_gap_s={}", fmt17(*s)), *gap, tol.tol, gap.abs() <= tol.tol));
    }

    let lattice = Lattice::new(report.steps, horizon, bundle.model.brownian_dim())?;
    let mut seeder = ChaCha8Rng::seed_from_u64(vc.seed);
    let [eps_lo, eps_hi] = vc.perturbation_range;
    let mut worst = f64::NEG_INFINITY;
    let (mut strict, mut distinct) = (0usize, 0usize);
    for i in 0..vc.strategy_perturbations {
        let eps = if eps_hi > eps_lo { seeder.random_range(eps_lo..=eps_hi) } else { eps_lo };
        let seed = seeder.random::<u64>();
        let perturbed = perturb_strategy(&report.strategy, &lattice, &bundle.portfolio_set, &bundle.consumption_set, eps, seed)?;
        let moved = (0..lattice.num_steps()).any(|k| {
            (0..lattice.nodes(k)).any(|n| {
                let (a, b) = (perturbed.control(k, n), report.strategy.control(k, n));
                (&a.pi - &b.pi).amax() > 1e-12 || (a.c - b.c).abs() > 1e-12
            })
        });
        let sm = check_supermartingale(&report, &perturbed, bundle, &checkpoints, spec.workers)?;
        worst = worst.max(sm.max_violation);
        let g0 = sm.gaps[0].1;
        if moved {
            distinct += 1;
            if g0 < -tol.tol {
                strict += 1;
            }
        }
        log::debug!("perturbation {i}: eps = {eps}, gap(0) = {g0}");
    }
    if vc.strategy_perturbations > 0 {
        rows.push(CheckRow::new("supermartingale_perturbed_max_gap", worst, tol.tol, worst <= tol.tol));
        let need = (0.9 * distinct as f64).ceil() as usize;
        rows.push(CheckRow::new(
            "perturbed_strictly_suboptimal_count",
            strict as f64,
            need as f64,
            strict >= need,
        ));
    }

    let grids = vc.saddle.grids();
    let etas = eta_grid(bundle.model.brownian_dim(), vc.eta_grid.radius, vc.eta_grid.spacing);
    let cc = robust_value_crosscheck(&report, bundle, &grids, &etas, vc.tolerances.crosscheck)?;
    rows.push(CheckRow::new("crosscheck_saddle_abs_diff", (cc.v0_solver - cc.v0_saddle).abs(), cc.tolerance, cc.saddle_ok));
    rows.push(CheckRow::new("crosscheck_dual_lower_minus_v0", cc.v0_dual_lower - cc.v0_solver, cc.tolerance, cc.dual_ok));

    let zero = DensityScenario::constant(DVector::zeros(bundle.model.brownian_dim()), report.steps);
    let nonrobust = dual_objective(&zero, &report.strategy, &bundle.model, &bundle.weights, &bundle.penalty)?;
    let gap = nonrobust.value - report.v0;
    rows.push(CheckRow::new("nonrobust_minus_v0", gap, tol.tol, gap >= -tol.tol));

    if let Some(row) = generator_row(bundle, vc.generator_samples, vc.seed, vc.tolerances.generator)? {
        rows.push(row);
    }

    if cfg.portfolio_is_zero_point() && cfg.consumption_is_zero_point() {
        let exact = bundle.weights.alpha_bar * report.h0 * bundle.weights.initial_wealth.ln();
        let diff = (report.v0 - exact).abs();
        rows.push(CheckRow::new("zero_portfolio_exact_value", diff, vc.tolerances.exact, diff <= vc.tolerances.exact));
    }
    Ok(rows)
}

/// Closed form vs first-principles generator on random `(t, z)`; `None` when no closed form exists.
fn generator_row(bundle: &GeneratorBundle, samples: usize, seed: u64, tol: f64) -> Result<Option<CheckRow>, CommandError> {
    if samples == 0 {
        return Ok(None);
    }
    let m = bundle.model.brownian_dim();
    let horizon = bundle.weights.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.random_range(0.0..horizon);
        let z = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
        let cf = match bundle.f_entropic_closed_form(t, &z) {
            Ok(v) => v,
            Err(Error::ClosedFormInapplicable(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let direct = bundle.f_generator(t, &z)?.value;
        worst = worst.max((cf - direct).abs());
    }
    Ok(Some(CheckRow::new("generator_closed_form_max_abs_diff", worst, tol, worst <= tol)))
}

pub fn cmd_verify(config_path: &Path, overrides: &Overrides) -> Result<i32, CommandError> {
    let ctx = load(config_path, overrides)?;
    let rows = verification_rows(&ctx)?;
    let p = ctx.out_dir.join("verify_report.csv");
    let table = rows
        .iter()
        .map(|r| {
            vec![r.check.clone(), ctx.hash.clone(), fmt17(r.value), fmt17(r.tolerance), if r.pass { "pass" } else { "FAIL" }.into()]
        })
        .collect();
    write_csv(&p, &["check", "instance_hash", "value", "tolerance", "pass"], table).map_err(|e| io_err(&p, e))?;
    println!("convention = {}", ctx.config.solver.convention_name());
    for r in &rows {
        println!("{} {} value = {} tolerance = {}", if r.pass { "PASS" } else { "FAIL" }, r.check, fmt17(r.value), fmt17(r.tolerance));
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

/// Simulated log terminal wealth and realized objective per path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub paths: usize,
    pub mean_log_xt: f64,
    pub stderr_log_xt: f64,
    pub quantiles_log_xt: [f64; 3],
    pub mean_objective: f64,
    pub stderr_objective: f64,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

pub fn cmd_simulate(config_path: &Path, overrides: &Overrides) -> Result<i32, CommandError> {
    let ctx = load(config_path, overrides)?;
    let summary = simulate(&ctx)?;
    println!("paths = {}", summary.paths);
    println!("mean ln X_T = {} (stderr {})", fmt17(summary.mean_log_xt), fmt17(summary.stderr_log_xt));
    println!(
        "ln X_T quantiles 5/50/95% = {} {} {}",
        fmt17(summary.quantiles_log_xt[0]),
        fmt17(summary.quantiles_log_xt[1]),
        fmt17(summary.quantiles_log_xt[2])
    );
    println!("mean objective = {} (stderr {})", fmt17(summary.mean_objective), fmt17(summary.stderr_objective));
    Ok(EXIT_OK)
}

pub fn simulate(ctx: &Context) -> Result<SimulationSummary, CommandError> {
    let sc = &ctx.config.simulate;
    if sc.paths == 0 {
        return Err(ConfigError::new("simulate.paths", "must be at least 1").into());
    }
    let bundle = &ctx.problem.bundle;
    let report = solve(ctx)?;
    let strategy = &report.strategy;
    let n = strategy.num_steps();
    let dt = strategy.dt();
    let m = bundle.model.brownian_dim();
    let d = bundle.model.num_assets();
    let w = &bundle.weights;
    let node_indexed = !strategy.steps.iter().all(StepValue::is_uniform);
    let lattice = if node_indexed { Some(Lattice::new(n, w.horizon, m)?) } else { None };
    let time = |k: usize| if k == n { w.horizon } else { k as f64 * dt };
    let w_c: Vec<f64> = (0..n).map(|k| w.alpha * w.discounted_time(time(k), time(k + 1))).collect();
    let terminal_weight = w.alpha_bar * (-w.cumulative_discount(w.horizon)).exp();

    let one_path = |i: usize| -> Result<(Vec<f64>, Vec<usize>), Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        rng.set_stream(i as u64);
        let path = match &lattice {
            None => BrownianPath {
                dt,
                increments: (0..n)
                    .map(|_| DVector::from_fn(m, |_, _| dt.sqrt() * rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
                nodes: None,
            },
            Some(l) => {
                let mut nodes = Vec::with_capacity(n);
                let mut increments = Vec::with_capacity(n);
                let mut node = 0;
                for k in 0..n {
                    let b = rng.random_range(0..l.branches());
                    nodes.push(node);
                    increments.push(l.increment(b));
                    node = l.child(k, node, b);
                }
                BrownianPath { dt, increments, nodes: Some(nodes) }
            }
        };
        let x = simulate_wealth(&bundle.model, w, strategy, &path)?;
        Ok((x, path.nodes.unwrap_or_default()))
    };
    let pool = build_pool(ctx.problem.solver.workers)?;
    let results: Vec<Result<(f64, f64, Option<(Vec<f64>, Vec<usize>)>), Error>> = {
        let job = |i: usize| {
            let (x, nodes) = one_path(i)?;
            let mut objective = terminal_weight * x[n].ln();
            for k in 0..n {
                if w_c[k] != 0.0 {
                    let node = if node_indexed { nodes[k] } else { 0 };
                    objective += w_c[k] * (strategy.control(k, node).c * x[k]).ln();
                }
            }
            let keep = if i < sc.record_paths { Some((x.clone(), nodes)) } else { None };
            Ok((x[n].ln(), objective, keep))
        };
        match &pool {
            Some(p) => p.install(|| (0..sc.paths).into_par_iter().map(job).collect()),
            None => (0..sc.paths).map(job).collect(),
        }
    };
    let mut log_xt = Vec::with_capacity(sc.paths);
    let mut objective = Vec::with_capacity(sc.paths);
    let mut rows = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (lx, obj, keep) = r?;
        log_xt.push(lx);
        objective.push(obj);
        if let Some((x, nodes)) = keep {
            for (k, xk) in x.iter().enumerate() {
                let mut row = vec![fmt17(time(k)), i.to_string(), fmt17(*xk)];
                if k < n {
                    let node = if node_indexed { nodes[k] } else { 0 };
                    let ctl = strategy.control(k, node);
                    row.extend(ctl.pi.iter().map(|v| fmt17(*v)));
                    row.push(fmt17(ctl.c));
                } else {
                    row.extend(std::iter::repeat_n(fmt17(f64::NAN), d + 1));
                }
                rows.push(row);
            }
        }
    }
    let mut header = vec!["t".to_string(), "path_id".into(), "X".into()];
    header.extend(pi_headers("pi", d));
    header.push("c".into());
    let p = ctx.out_dir.join("paths.csv");
    write_csv(&p, &header, rows).map_err(|e| io_err(&p, e))?;

    let (mean_log_xt, stderr_log_xt) = mean_stderr(&log_xt);
    let (mean_objective, stderr_objective) = mean_stderr(&objective);
    let mut sorted = log_xt.clone();
    sorted.sort_by(f64::total_cmp);
    let summary = SimulationSummary {
        paths: sc.paths,
        mean_log_xt,
        stderr_log_xt,
        quantiles_log_xt: [quantile(&sorted, 0.05), quantile(&sorted, 0.5), quantile(&sorted, 0.95)],
        mean_objective,
        stderr_objective,
    };
    let p = ctx.out_dir.join("summary.csv");
    write_key_values(
        &p,
        &[
            ("instance_hash", ctx.hash.clone()),
            ("paths", summary.paths.to_string()),
            ("seed", sc.seed.to_string()),
            ("mean_log_xt", fmt17(summary.mean_log_xt)),
            ("stderr_log_xt", fmt17(summary.stderr_log_xt)),
            ("q05_log_xt", fmt17(summary.quantiles_log_xt[0])),
            ("q50_log_xt", fmt17(summary.quantiles_log_xt[1])),
            ("q95_log_xt", fmt17(summary.quantiles_log_xt[2])),
            ("mean_objective", fmt17(summary.mean_objective)),
            ("stderr_objective", fmt17(summary.stderr_objective)),
            ("v0", fmt17(report.v0)),
        ],
    )
    .map_err(|e| io_err(&p, e))?;
    Ok(summary)
}

/// `lo:hi:step`
pub fn parse_grid(spec: &str) -> Result<(f64, f64, f64), ConfigError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || ConfigError::new("--grid", format!("expected lo:hi:step, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    if !(v[2] > 0.0) || v[1] < v[0] {
        return Err(bad());
    }
    Ok((v[0], v[1], v[2]))
}

pub fn cmd_conjugate(config_path: &Path, overrides: &Overrides, grid: Option<&str>) -> Result<i32, CommandError> {
    let ctx = load(config_path, overrides)?;
    let (lo, hi, step) = match grid {
        Some(g) => parse_grid(g)?,
        None => (ctx.config.conjugate.lo, ctx.config.conjugate.hi, ctx.config.conjugate.step),
    };
    let penalty = &ctx.problem.bundle.penalty;
    let m = ctx.problem.bundle.model.brownian_dim();
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let axis: Vec<f64> = (0..count).map(|i| lo + i as f64 * step).collect();
    let mut points = vec![Vec::new()];
    for _ in 0..m {
        points = points
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    let mut header = pi_headers("y", m);
    header.extend(["h_star", "growth_bound", "growth_ok", "fy_residual"].map(String::from));
    let mut rows = Vec::with_capacity(points.len());
    for y in &points {
        let hs = penalty.conjugate(y)?;
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        let bound = if penalty.kappa1 > 0.0 { norm2 / (4.0 * penalty.kappa1) + penalty.kappa2 } else { f64::INFINITY };
        let ok = hs <= bound + 1e-9 * (1.0 + bound.abs());
        // Fenchel-Young at x = y
        let residual = penalty.evaluate(y) + hs - norm2;
        let mut row: Vec<String> = y.iter().map(|v| fmt17(*v)).collect();
        row.extend([fmt17(hs), fmt17(bound), ok.to_string(), fmt17(residual)]);
        rows.push(row);
    }
    let p = ctx.out_dir.join("conjugate.csv");
    write_csv(&p, &header, rows).map_err(|e| io_err(&p, e))?;
    println!("wrote {} conjugate values to {}", points.len(), p.display());
    Ok(EXIT_OK)
}

impl crate::config::SolverConfig {
    pub fn convention_name(&self) -> &'static str {
        roblog_core::generator::Convention::from(self.convention).name()
    }

    pub fn mode(&self) -> SolveMode {
        self.mode.into()
    }
}
