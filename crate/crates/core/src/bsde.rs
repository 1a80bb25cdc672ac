//! Backward induction for BSDEs on the lattice and the value BSDE
//!
//! ```text
//! dY = (rho Y + f(t, Z)) dt - Z dW,   Y_T = 0,   V0 = alpha_bar h(0) (ln x - Y_0)
//! ```
//!
//! solved either on the lattice or, since coefficients are deterministic and
//! hence `Z = 0`, as the scalar backward ODE `Y' = rho Y + f(t, 0)` with RK4.

use log::debug;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::generator::{Convention, FEval, GeneratorBundle};
use crate::lattice::{build_pool, map_nodes, Lattice};
use crate::model::{Control, StepValue, StrategyProcess};

/// `Y` per node per slice (`y[k][n]`) and `Z` flattened with stride `m`
/// (`z[k][n*m + i]`, slices `0..N`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSolution {
    pub lattice: Lattice,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub y0: f64,
}

impl LatticeSolution {
    pub fn z_at(&self, k: usize, node: usize) -> DVector<f64> {
        let m = self.lattice.dim();
        DVector::from_column_slice(&self.z[k][node * m..(node + 1) * m])
    }
}

fn check_value(v: f64, step: usize, node: usize, z: &DVector<f64>) -> Result<f64> {
    if v.is_nan() {
        Err(Error::NumericFault { step, node })
    } else if v.is_infinite() {
        Err(Error::DomainViolation { step, node, z: z.iter().copied().collect() })
    } else {
        Ok(v)
    }
}

/// Conditional g-expectation of a terminal value, convention `dY = -g dt + Z dW`:
/// `Z_k = E[Y_{k+1} dW] / dt`, `Y_k = E[Y_{k+1}] + g(t_k, Z_k) dt`.
pub fn g_expectation<G>(lattice: &Lattice, generator: G, terminal: &[f64], workers: usize) -> Result<LatticeSolution>
where
    G: Fn(f64, &DVector<f64>) -> f64 + Sync,
{
    g_expectation_with_increments(lattice, generator, terminal, |_, _, _| 0.0, workers)
}

/// As [`g_expectation`] for the terminal value `xi + sum_k inc(k, node_k, branch_k)`,
/// where the increment depends only on the step, node and branch taken.
pub fn g_expectation_with_increments<G, I>(
    lattice: &Lattice,
    generator: G,
    terminal: &[f64],
    increment: I,
    workers: usize,
) -> Result<LatticeSolution>
where
    G: Fn(f64, &DVector<f64>) -> f64 + Sync,
    I: Fn(usize, usize, usize) -> f64 + Sync,
{
    let n_steps = lattice.num_steps();
    if terminal.len() != lattice.nodes(n_steps) {
        return Err(Error::LatticeMismatch(format!(
            "terminal has {} values, lattice has {} terminal nodes",
            terminal.len(),
            lattice.nodes(n_steps)
        )));
    }
    let pool = build_pool(workers)?;
    let m = lattice.dim();
    let dt = lattice.dt();
    let p = lattice.branch_prob();
    let mut y = vec![Vec::new(); n_steps + 1];
    let mut z = vec![Vec::new(); n_steps];
    y[n_steps] = terminal.to_vec();
    for k in (0..n_steps).rev() {
        let next = &y[k + 1];
        let t = lattice.time(k);
        let slice = map_nodes(pool.as_ref(), lattice.nodes(k), |n| {
            let mut mean = 0.0;
            let mut zn = DVector::zeros(m);
            for b in 0..lattice.branches() {
                let v = next[lattice.child(k, n, b)] + increment(k, n, b);
                mean += p * v;
                for i in 0..m {
                    zn[i] += p * v * Lattice::branch_sign(b, i) * lattice.sqrt_dt();
                }
            }
            zn /= dt;
            let g = check_value(generator(t, &zn), k, n, &zn)?;
            let yn = mean + g * dt;
            if yn.is_nan() {
                return Err(Error::NumericFault { step: k, node: n });
            }
            Ok((yn, zn))
        })?;
        let mut zs = Vec::with_capacity(slice.len() * m);
        y[k] = slice
            .into_iter()
            .map(|(yn, zn)| {
                zs.extend(zn.iter());
                yn
            })
            .collect();
        z[k] = zs;
    }
    let y0 = y[0][0];
    Ok(LatticeSolution { lattice: lattice.clone(), y, z, y0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Auto,
    Ode,
    Lattice,
}

impl SolveMode {
    pub fn name(self) -> &'static str {
        match self {
            SolveMode::Auto => "auto",
            SolveMode::Ode => "ode",
            SolveMode::Lattice => "lattice",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub steps: usize,
    pub mode: SolveMode,
    pub workers: usize,
    /// Allowed `|Y0(N) - Y0(2N)|` for the ODE path.
    pub refinement_tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { steps: 1000, mode: SolveMode::Auto, workers: 1, refinement_tol: 1e-6 }
    }
}

/// ODE trace on the solver grid `t_0 .. t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeTrace {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub f0: Vec<f64>,
    pub h: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub y0: f64,
    pub v0: f64,
    pub h0: f64,
    pub convention: Convention,
    pub mode: SolveMode,
    pub steps: usize,
    pub horizon: f64,
    pub initial_wealth: f64,
    pub alpha_bar: f64,
    pub ode: Option<OdeTrace>,
    pub lattice: Option<LatticeSolution>,
    /// Y on the solver grid: per node for the lattice, one value per slice otherwise.
    pub strategy: StrategyProcess,
}

impl ValueReport {
    /// `Y(t_k, node)`; the ODE path ignores the node.
    pub fn y_at(&self, k: usize, node: usize) -> f64 {
        match (&self.lattice, &self.ode) {
            (Some(l), _) => l.y[k][node],
            (None, Some(o)) => o.y[k],
            _ => unreachable!("report carries a solution"),
        }
    }
}

pub fn value_from_y0(alpha_bar: f64, h0: f64, x: f64, y0: f64) -> f64 {
    alpha_bar * h0 * (x.ln() - y0)
}

pub fn solve_value_bsde(bundle: &GeneratorBundle, spec: &SolverSpec) -> Result<ValueReport> {
    if spec.steps == 0 {
        return Err(Error::InvalidLattice("need at least one time step".into()));
    }
    let w = &bundle.weights;
    let h0 = bundle.h(0.0)?;
    let (y0, ode, lattice, strategy, mode) = match spec.mode {
        SolveMode::Auto | SolveMode::Ode => {
            let (trace, strategy) = solve_ode(bundle, spec.steps)?;
            let (fine, _) = solve_ode(bundle, 2 * spec.steps)?;
            let (coarse, finer) = (trace.y[0], fine.y[0]);
            if (coarse - finer).abs() > spec.refinement_tol * (1.0 + finer.abs()) {
                return Err(Error::NonConvergence { coarse, fine: finer });
            }
            debug!("ode refinement: Y0(N) = {coarse}, Y0(2N) = {finer}");
            (coarse, Some(trace), None, strategy, SolveMode::Ode)
        }
        SolveMode::Lattice => {
            let (sol, strategy) = solve_lattice(bundle, spec.steps, spec.workers)?;
            (sol.y0, None, Some(sol), strategy, SolveMode::Lattice)
        }
    };
    Ok(ValueReport {
        y0,
        v0: value_from_y0(w.alpha_bar, h0, w.initial_wealth, y0),
        h0,
        convention: bundle.convention,
        mode,
        steps: spec.steps,
        horizon: w.horizon,
        initial_wealth: w.initial_wealth,
        alpha_bar: w.alpha_bar,
        ode,
        lattice,
        strategy,
    })
}

fn solve_ode(bundle: &GeneratorBundle, steps: usize) -> Result<(OdeTrace, StrategyProcess)> {
    let w = &bundle.weights;
    let t_end = w.horizon;
    let m = bundle.model.brownian_dim();
    let zero = DVector::zeros(m);
    let grid: Vec<f64> = (0..=steps).map(|k| if k == steps { t_end } else { k as f64 * t_end / steps as f64 }).collect();
    let breaks = bundle.breakpoints();
    let rhs = |t: f64, tc: f64, y: f64| -> Result<f64> {
        let f = bundle.value_generator_on(t, tc, &zero)?;
        let f = check_value(f.value, 0, 0, &zero)?;
        Ok(bundle.rho(t)? * y + f)
    };
    let mut y = vec![0.0; steps + 1];
    for k in (0..steps).rev() {
        let (a, b) = (grid[k], grid[k + 1]);
        let mut knots = vec![b];
        knots.extend(breaks.iter().rev().copied().filter(|&s| s > a && s < b));
        knots.push(a);
        let mut yk = y[k + 1];
        for seg in knots.windows(2) {
            let (hi, lo) = (seg[0], seg[1]);
            let tc = 0.5 * (lo + hi);
            let h = lo - hi;
            let k1 = rhs(hi, tc, yk)?;
            let k2 = rhs(hi + 0.5 * h, tc, yk + 0.5 * h * k1)?;
            let k3 = rhs(hi + 0.5 * h, tc, yk + 0.5 * h * k2)?;
            let k4 = rhs(lo, tc, yk + h * k3)?;
            yk += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if !yk.is_finite() {
            return Err(Error::NumericFault { step: k, node: 0 });
        }
        y[k] = yk;
    }
    let mut f0 = Vec::with_capacity(steps + 1);
    let mut hs = Vec::with_capacity(steps + 1);
    let mut rhos = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    for (k, &t) in grid.iter().enumerate() {
        // the last slice reads coefficients from the piece ending at T
        let tc = if k < steps { t } else { 0.5 * (grid[k - 1] + t) };
        let fe = bundle.value_generator_on(t, tc, &zero)?;
        f0.push(fe.value);
        hs.push(bundle.h(t)?);
        rhos.push(bundle.rho(t)?);
        if k < steps {
            controls.push(StepValue::Uniform(Control { pi: fe.pi, c: fe.c }));
        }
    }
    let strategy = StrategyProcess { horizon: t_end, steps: controls };
    Ok((OdeTrace { t: grid, y, f0, h: hs, rho: rhos }, strategy))
}

fn solve_lattice(bundle: &GeneratorBundle, steps: usize, workers: usize) -> Result<(LatticeSolution, StrategyProcess)> {
    let lattice = Lattice::new(steps, bundle.weights.horizon, bundle.model.brownian_dim())?;
    let pool = build_pool(workers)?;
    let m = lattice.dim();
    let dt = lattice.dt();
    let p = lattice.branch_prob();
    bundle.clear_cache();
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![Vec::new(); steps];
    let mut controls = vec![StepValue::PerNode(Vec::new()); steps];
    y[steps] = vec![0.0; lattice.nodes(steps)];
    for k in (0..steps).rev() {
        let next = &y[k + 1];
        let t = lattice.time(k);
        let rho = bundle.rho(t)?;
        let slice = map_nodes(pool.as_ref(), lattice.nodes(k), |n| {
            let mut mean = 0.0;
            let mut zn = DVector::zeros(m);
            for b in 0..lattice.branches() {
                let v = next[lattice.child(k, n, b)];
                mean += p * v;
                for i in 0..m {
                    zn[i] -= p * v * Lattice::branch_sign(b, i) * lattice.sqrt_dt();
                }
            }
            zn /= dt;
            let fe: FEval = bundle.f_cached(k, n, t, &zn)?;
            let f = check_value(fe.value, k, n, &zn)?;
            let yn = (mean - f * dt) / (1.0 + rho * dt);
            if !yn.is_finite() {
                return Err(Error::NumericFault { step: k, node: n });
            }
            Ok((yn, zn, Control { pi: fe.pi, c: fe.c }))
        })?;
        let mut ys = Vec::with_capacity(slice.len());
        let mut zs = Vec::with_capacity(slice.len() * m);
        let mut cs = Vec::with_capacity(slice.len());
        for (yn, zn, c) in slice {
            ys.push(yn);
            zs.extend(zn.iter());
            cs.push(c);
        }
        y[k] = ys;
        z[k] = zs;
        controls[k] = StepValue::PerNode(cs);
    }
    bundle.clear_cache();
    let y0 = y[0][0];
    let strategy = StrategyProcess { horizon: bundle.weights.horizon, steps: controls };
    Ok((LatticeSolution { lattice, y, z, y0 }, strategy))
}

/// Optimal portfolio/consumption from a solved report: node-indexed on the
/// lattice, a deterministic function of time on the ODE path.
pub fn extract_strategy(report: &ValueReport) -> StrategyProcess {
    report.strategy.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintSet;
    use crate::model::{MarketModel, PiecewiseConstant, ProblemWeights};
    use crate::penalty::PenaltySpec;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn terminal_w(l: &Lattice, scale: f64) -> Vec<f64> {
        (0..l.nodes(l.num_steps())).map(|n| scale * l.brownian(l.num_steps(), n)[0]).collect()
    }

    fn anchor_bundle(aset: ConstraintSet, x: f64) -> GeneratorBundle {
        let model =
            MarketModel::constant(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, 1.0), 0.5, 2.0).unwrap();
        let w = ProblemWeights::new(0.0, 1.0, 1.0, PiecewiseConstant::constant(0.0), 1.0, x).unwrap();
        GeneratorBundle::new(
            model,
            w,
            PenaltySpec::entropic(),
            aset,
            ConstraintSet::point(vec![0.0]),
            Convention::Calibrated,
        )
        .unwrap()
    }

    #[test]
    fn zero_generator_martingale() {
        let l = Lattice::new(50, 1.0, 1).unwrap();
        let sol = g_expectation(&l, |_, _| 0.0, &terminal_w(&l, 1.0), 1).unwrap();
        assert!(sol.y0.abs() < 1e-14);
        // Z of W_T is one everywhere
        assert!((sol.z_at(10, 3)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropic_of_brownian_terminal() {
        let l = Lattice::new(2000, 1.0, 1).unwrap();
        let sol = g_expectation(&l, |_, z| 0.5 * z.norm_squared(), &terminal_w(&l, 1.0), 1).unwrap();
        assert!((sol.y0 - 0.5).abs() < 5e-3);
    }

    #[test]
    fn constants_preserved() {
        let l = Lattice::new(30, 1.0, 2).unwrap();
        let term = vec![7.0; l.nodes(30)];
        let sol = g_expectation(&l, |_, z| z.norm_squared() + z[0].abs(), &term, 1).unwrap();
        assert_eq!(sol.y0, 7.0);
    }

    #[test]
    fn domain_violation_named() {
        let l = Lattice::new(4, 1.0, 1).unwrap();
        let err = g_expectation(&l, |_, z| if z[0].abs() > 0.5 { f64::INFINITY } else { 0.0 }, &terminal_w(&l, 1.0), 1);
        assert!(matches!(err, Err(Error::DomainViolation { step: 3, node: 0, .. })));
        let err = g_expectation(&l, |_, _| f64::NAN, &terminal_w(&l, 1.0), 1);
        assert!(matches!(err, Err(Error::NumericFault { .. })));
    }

    #[test]
    fn anchor_value_both_paths() {
        let b = anchor_bundle(ConstraintSet::whole(1), 1.0);
        let ode = solve_value_bsde(&b, &SolverSpec::default()).unwrap();
        assert!((ode.v0 - 0.01).abs() < 1e-12);
        let lat = solve_value_bsde(&b, &SolverSpec { steps: 200, mode: SolveMode::Lattice, ..Default::default() }).unwrap();
        assert!((lat.v0 - 0.01).abs() < 1e-12);
        let s = extract_strategy(&lat);
        assert!((s.control(100, 37).pi[0] - 0.1).abs() < 1e-12);

        let e = anchor_bundle(ConstraintSet::whole(1), std::f64::consts::E);
        let v = solve_value_bsde(&e, &SolverSpec::default()).unwrap().v0;
        assert!((v - 1.01).abs() < 1e-12);
    }

    #[test]
    fn trivial_value() {
        let b = anchor_bundle(ConstraintSet::point(vec![0.0]), 3.0);
        let r = solve_value_bsde(&b, &SolverSpec::default()).unwrap();
        assert_eq!(r.y0, 0.0);
        assert_eq!(r.v0, 3.0f64.ln());
        assert!(extract_strategy(&r).steps.iter().all(|s| s.at(0).pi[0] == 0.0));
    }

    #[test]
    fn consumption_strategy_follows_h() {
        let model =
            MarketModel::constant(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, 1.0), 0.5, 2.0).unwrap();
        let w = ProblemWeights::new(1.0, 1.0, 1.0, PiecewiseConstant::constant(0.0), 1.0, 1.0).unwrap();
        let b = GeneratorBundle::new(
            model,
            w,
            PenaltySpec::entropic(),
            ConstraintSet::whole(1),
            ConstraintSet::interval(0.0, f64::INFINITY).unwrap(),
            Convention::Calibrated,
        )
        .unwrap();
        let r = solve_value_bsde(&b, &SolverSpec { steps: 100, ..Default::default() }).unwrap();
        let s = extract_strategy(&r);
        for k in [0, 25, 99] {
            let t = k as f64 / 100.0;
            assert!((s.control(k, 0).c - 1.0 / (2.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn worker_count_does_not_change_lattice() {
        let b = anchor_bundle(ConstraintSet::interval(0.0, 0.1).unwrap(), 1.0);
        let spec = SolverSpec { steps: 60, mode: SolveMode::Lattice, workers: 1, ..Default::default() };
        let one = solve_value_bsde(&b, &spec).unwrap();
        let four = solve_value_bsde(&b, &SolverSpec { workers: 4, ..spec }).unwrap();
        assert_eq!(one, four);
    }

    proptest! {
        #[test]
        fn translation_invariance(c in -5.0..5.0f64, s in -2.0..2.0f64) {
            let l = Lattice::new(20, 1.0, 1).unwrap();
            let xi = terminal_w(&l, s);
            let shifted: Vec<f64> = xi.iter().map(|v| v + c).collect();
            let g = |_: f64, z: &DVector<f64>| 0.5 * z.norm_squared();
            let a = g_expectation(&l, g, &xi, 1).unwrap().y0;
            let b = g_expectation(&l, g, &shifted, 1).unwrap().y0;
            prop_assert!((b - (a + c)).abs() <= 1e-12 * (1.0 + c.abs() + a.abs()));
        }
    }
}
