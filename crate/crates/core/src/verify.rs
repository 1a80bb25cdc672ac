//! Independent oracles: the penalized dual objective under explicit Girsanov
//! scenarios, a brute-force saddle value, Gaussian closed forms for entropic
//! g-expectations, and the martingale-optimality check on the R-process
//!
//! ```text
//! R_t = A_t (ln X_t - Y_t) + int_0^t alpha e^{-D_u} ln(c_u X_u) du,   A_t = alpha_bar h(t) e^{-D_t}
//! ```
//!
//! Time weights use exact step integrals, so `A_k - A_{k+1} = alpha int e^{-D}`
//! and the `ln X` level terms of `R` telescope: each increment depends only on
//! the (step, node, branch) taken and the g-expectation runs on the lattice.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha8Rng, ChaCha20Rng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bsde::{g_expectation_with_increments, solve_value_bsde, SolverSpec, ValueReport};
use crate::constraints::{ConstraintSet, Primitive};
use crate::error::{Error, Result};
use crate::generator::{h_of_t, GeneratorBundle};
use crate::lattice::Lattice;
use crate::model::{Control, MarketModel, ProblemWeights, StepValue, StrategyProcess};
use crate::numeric::golden_max;
use crate::penalty::{PenaltyKind, PenaltySpec};

/// Girsanov kernel per step: shared by every node, or one per lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityScenario {
    pub eta: Vec<StepValue<DVector<f64>>>,
}

impl DensityScenario {
    pub fn constant(eta: DVector<f64>, num_steps: usize) -> Self {
        Self { eta: vec![StepValue::Uniform(eta); num_steps] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub std_error: f64,
}

/// Exact per-step weights on a uniform grid of `n` steps.
#[derive(Debug, Clone)]
struct StepWeights {
    dt: f64,
    /// `A_k`, `k = 0..=n`
    a: Vec<f64>,
    /// `alpha int_{t_k}^{t_{k+1}} e^{-D}`
    w_c: Vec<f64>,
    /// `int_{t_k}^{t_{k+1}} e^{-D}`
    w_p: Vec<f64>,
    t: Vec<f64>,
}

impl StepWeights {
    fn new(weights: &ProblemWeights, n: usize) -> Result<Self> {
        let t_end = weights.horizon;
        let dt = t_end / n as f64;
        let t: Vec<f64> = (0..=n).map(|k| if k == n { t_end } else { k as f64 * dt }).collect();
        let a = t
            .iter()
            .map(|&s| Ok(weights.alpha_bar * h_of_t(weights, s)? * (-weights.cumulative_discount(s)).exp()))
            .collect::<Result<Vec<_>>>()?;
        let w_p: Vec<f64> = t.windows(2).map(|w| weights.discounted_time(w[0], w[1])).collect();
        let w_c = w_p.iter().map(|p| weights.alpha * p).collect();
        Ok(Self { dt, a, w_c, w_p, t })
    }
}

fn ln_c_term(w_c: f64, c: f64) -> f64 {
    if w_c == 0.0 {
        0.0
    } else {
        w_c * c.ln()
    }
}

fn branch_probs(eta: &DVector<f64>, sqrt_dt: f64, m: usize) -> Result<Vec<f64>> {
    for &e in eta.iter() {
        let v = e.abs() * sqrt_dt;
        if v >= 1.0 {
            return Err(Error::StepTooCoarse { value: v });
        }
    }
    Ok((0..1usize << m)
        .map(|b| (0..m).map(|i| 0.5 * (1.0 + Lattice::branch_sign(b, i) * eta[i] * sqrt_dt)).product())
        .collect())
}

fn check_dual_inputs(scenario: &DensityScenario, strategy: &StrategyProcess, model: &MarketModel, weights: &ProblemWeights) -> Result<()> {
    strategy.validate(model.num_assets())?;
    if scenario.eta.len() != strategy.num_steps() {
        return Err(Error::LatticeMismatch(format!(
            "scenario has {} steps, strategy {}",
            scenario.eta.len(),
            strategy.num_steps()
        )));
    }
    if (strategy.horizon - weights.horizon).abs() > 1e-12 * weights.horizon {
        return Err(Error::InvalidStrategy("strategy horizon differs from the problem horizon".into()));
    }
    Ok(())
}

/// Per-node expected step contribution under `Q^eta`.
#[allow(clippy::too_many_arguments)]
fn step_term(
    sw: &StepWeights,
    k: usize,
    model: &MarketModel,
    penalty: &PenaltySpec,
    beta: f64,
    ctl: &Control,
    eta: &DVector<f64>,
) -> Result<f64> {
    let t = sw.t[k];
    let coeffs = model.coefficients_at(t);
    let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?;
    let u = coeffs.exposure(&ctl.pi);
    let drift = u.dot(&(theta + eta)) - 0.5 * u.norm_squared() - ctl.c;
    let h = penalty.evaluate(eta.as_slice());
    Ok(sw.a[k + 1] * drift * sw.dt + ln_c_term(sw.w_c[k], ctl.c) + sw.w_p[k] * beta * h)
}

/// `E_Q[alpha_bar e^{-D_T} ln X_T + int alpha e^{-D} ln(cX) + int e^{-D} beta h(eta)]`,
/// lattice-exact with Girsanov branch reweighting `p = prod (1 +- eta_i sqrt(dt)) / 2`.
pub fn dual_objective(
    scenario: &DensityScenario,
    strategy: &StrategyProcess,
    model: &MarketModel,
    weights: &ProblemWeights,
    penalty: &PenaltySpec,
) -> Result<DualValue> {
    check_dual_inputs(scenario, strategy, model, weights)?;
    let n = strategy.num_steps();
    let sw = StepWeights::new(weights, n)?;
    let m = model.brownian_dim();
    let base = sw.a[0] * weights.initial_wealth.ln();
    let uniform = strategy.steps.iter().all(StepValue::is_uniform) && scenario.eta.iter().all(StepValue::is_uniform);
    if uniform {
        let mut total = base;
        for k in 0..n {
            let eta = scenario.eta[k].at(0);
            branch_probs(eta, sw.dt.sqrt(), m)?;
            total += step_term(&sw, k, model, penalty, weights.beta, strategy.control(k, 0), eta)?;
        }
        return Ok(DualValue { value: total, std_error: 0.0 });
    }
    let lattice = Lattice::new(n, weights.horizon, m)?;
    let mut prob = vec![1.0];
    let mut total = base;
    for k in 0..n {
        let mut next = vec![0.0; lattice.nodes(k + 1)];
        for (node, &pk) in prob.iter().enumerate() {
            let eta = scenario.eta[k].at(node);
            let probs = branch_probs(eta, lattice.sqrt_dt(), m)?;
            for (b, pb) in probs.iter().enumerate() {
                next[lattice.child(k, node, b)] += pk * pb;
            }
            if pk != 0.0 {
                total += pk * step_term(&sw, k, model, penalty, weights.beta, strategy.control(k, node), eta)?;
            }
        }
        prob = next;
    }
    Ok(DualValue { value: total, std_error: 0.0 })
}

/// Monte Carlo version for time-only strategies and scenarios: paths are simulated
/// under `Q^eta` (drift `eta dt`), path `i` draws from stream `i` of a seeded ChaCha8.
#[allow(clippy::too_many_arguments)]
pub fn dual_objective_mc(
    scenario: &DensityScenario,
    strategy: &StrategyProcess,
    model: &MarketModel,
    weights: &ProblemWeights,
    penalty: &PenaltySpec,
    paths: usize,
    seed: u64,
) -> Result<DualValue> {
    check_dual_inputs(scenario, strategy, model, weights)?;
    if !strategy.steps.iter().all(StepValue::is_uniform) || !scenario.eta.iter().all(StepValue::is_uniform) {
        return Err(Error::InvalidStrategy("Monte Carlo dual objective needs time-only inputs".into()));
    }
    if paths < 2 {
        return Err(Error::EmptyGrid("need at least two Monte Carlo paths".into()));
    }
    let n = strategy.num_steps();
    let sw = StepWeights::new(weights, n)?;
    let m = model.brownian_dim();
    let sqrt_dt = sw.dt.sqrt();
    let mut fixed = sw.a[0] * weights.initial_wealth.ln();
    let mut per_step = Vec::with_capacity(n);
    for k in 0..n {
        let ctl = strategy.control(k, 0);
        let eta = scenario.eta[k].at(0);
        let t = sw.t[k];
        let coeffs = model.coefficients_at(t);
        let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?;
        let u = coeffs.exposure(&ctl.pi);
        fixed += sw.a[k + 1] * (u.dot(theta) - 0.5 * u.norm_squared() - ctl.c) * sw.dt
            + ln_c_term(sw.w_c[k], ctl.c)
            + sw.w_p[k] * weights.beta * penalty.evaluate(eta.as_slice());
        per_step.push((sw.a[k + 1], u, eta.clone()));
    }
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut acc = 0.0;
            for (a_next, u, eta) in &per_step {
                for j in 0..m {
                    let xi: f64 = rng.sample(StandardNormal);
                    acc += a_next * u[j] * (eta[j] * sw.dt + sqrt_dt * xi);
                }
            }
            acc
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / paths as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    Ok(DualValue { value: fixed + mean, std_error: (var / paths as f64).sqrt() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleGrids {
    pub pi_resolution: f64,
    /// Box radius used to truncate unbounded portfolio pieces.
    pub pi_radius: f64,
    pub eta_resolution: f64,
    pub eta_radius: f64,
    pub c_resolution: f64,
    pub c_max: f64,
    /// Oracle time grid; controls are constant on each of its steps.
    pub time_steps: usize,
}

impl Default for SaddleGrids {
    fn default() -> Self {
        Self {
            pi_resolution: 1e-3,
            pi_radius: 2.0,
            eta_resolution: 1e-3,
            eta_radius: 1.0,
            c_resolution: 1e-3,
            c_max: 50.0,
            time_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleReport {
    pub value: f64,
    /// Maximizing portfolio and consumption on the first oracle step.
    pub pi_star: DVector<f64>,
    pub c_star: f64,
    pub pi_resolution: f64,
    pub eta_resolution: f64,
    pub refinements: usize,
    pub time_steps: usize,
}

/// Axis grid with spacing at most `res` containing both endpoints.
fn axis(lo: f64, hi: f64, res: f64, cap: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let n = (((hi - lo) / res).ceil() as usize).clamp(1, cap);
    (0..=n).map(|i| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 }).collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let mut out = vec![Vec::new()];
    for ax in axes {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                ax.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(DVector::from_vec).collect()
}

fn axis_cap(dim: usize) -> usize {
    match dim {
        1 => 100_000,
        2 => 60,
        _ => 16,
    }
}

/// Brute-force max-min over per-step constant controls and kernels:
/// `H0 ln x + sum_k [ max_c (w_c ln c - A_{k+1} dt c) + max_pi min_eta (A_{k+1} dt (u(theta+eta) - |u|^2/2) + w_p beta h(eta)) ]`.
pub fn saddle_oracle(
    model: &MarketModel,
    weights: &ProblemWeights,
    penalty: &PenaltySpec,
    aset: &ConstraintSet,
    cset: &ConstraintSet,
    grids: &SaddleGrids,
) -> Result<SaddleReport> {
    if !(grids.pi_resolution > 0.0 && grids.eta_resolution > 0.0 && grids.c_resolution > 0.0) || grids.time_steps == 0 {
        return Err(Error::EmptyGrid("grid resolutions must be positive and time_steps >= 1".into()));
    }
    let n = grids.time_steps;
    let sw = StepWeights::new(weights, n)?;
    let d = model.num_assets();
    let mut memo: HashMap<(usize, u64), (f64, DVector<f64>)> = HashMap::new();
    let mut total = sw.a[0] * weights.initial_wealth.ln();
    let mut first: Option<(DVector<f64>, f64)> = None;
    let candidates = pi_candidates(aset, grids)?;
    for k in 0..n {
        let t = sw.t[k];
        let piece = model.pieces().index_at(t);
        let coeffs = model.coefficients_at(t);
        let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?.clone();
        let a = sw.a[k + 1] * sw.dt;
        let (c_star, c_val) = consumption_part(cset, sw.w_c[k], a, grids)?;
        let scale = sw.w_p[k] * weights.beta;
        let r = a / scale;
        let (v, pi) = memo
            .entry((piece, r.to_bits()))
            .or_insert_with(|| portfolio_part(&candidates, aset, &coeffs.sigma, &theta, penalty, r, grids, d))
            .clone();
        if !v.is_finite() {
            return Err(Error::EmptyGrid("no portfolio candidate with finite inner value".into()));
        }
        total += c_val + scale * v;
        if first.is_none() {
            first = Some((pi, c_star));
        }
    }
    let (pi_star, c_star) = first.expect("at least one step");
    Ok(SaddleReport {
        value: total,
        pi_star,
        c_star,
        pi_resolution: grids.pi_resolution,
        eta_resolution: grids.eta_resolution,
        refinements: 2,
        time_steps: n,
    })
}

fn consumption_part(cset: &ConstraintSet, w_c: f64, a: f64, grids: &SaddleGrids) -> Result<(f64, f64)> {
    let obj = |c: f64| if w_c == 0.0 { -a * c } else { w_c * c.ln() - a * c };
    let mut best: Option<(f64, f64)> = None;
    for piece in cset.pieces() {
        let (lo, hi) = match piece {
            Primitive::Point(x) => (x[0], x[0]),
            Primitive::Box { lo, hi } => (lo[0], hi[0]),
            Primitive::Ball { center, radius } => (center[0] - radius, center[0] + radius),
            Primitive::Whole => (0.0, grids.c_max),
            Primitive::Polytope { .. } => {
                let (p_lo, _) = cset.project(&DVector::from_element(1, -1e300));
                let (p_hi, _) = cset.project(&DVector::from_element(1, 1e300));
                (p_lo[0], p_hi[0])
            }
        };
        let lo = lo.max(0.0);
        let hi = hi.min(grids.c_max);
        if hi < lo || (w_c > 0.0 && hi <= 0.0) {
            continue;
        }
        let pts = axis(lo, hi, grids.c_resolution, 1_000_000);
        let (mut bc, mut bv) = (lo, f64::NEG_INFINITY);
        for &c in &pts {
            let v = obj(c);
            if v > bv {
                bc = c;
                bv = v;
            }
        }
        let step = pts.get(1).map_or(0.0, |p| p - pts[0]);
        let (gc, gv) = golden_max(obj, (bc - step).max(lo), (bc + step).min(hi), 1e-13);
        if gv > bv {
            bc = gc;
            bv = gv;
        }
        if best.is_none_or(|(_, v)| bv > v) {
            best = Some((bc, bv));
        }
    }
    best.ok_or(Error::InfeasibleConsumption)
}

fn pi_candidates(aset: &ConstraintSet, grids: &SaddleGrids) -> Result<Vec<(usize, DVector<f64>)>> {
    let d = aset.dim();
    let r = grids.pi_radius;
    let cap = axis_cap(d);
    let mut out = Vec::new();
    for (i, piece) in aset.pieces().iter().enumerate() {
        let single = ConstraintSet::new(d, vec![piece.clone()])?;
        let (lo, hi): (Vec<f64>, Vec<f64>) = match piece {
            Primitive::Point(x) => {
                out.push((i, DVector::from_column_slice(x)));
                continue;
            }
            Primitive::Box { lo, hi } => (lo.iter().map(|v| v.max(-r)).collect(), hi.iter().map(|v| v.min(r)).collect()),
            Primitive::Ball { center, radius } => (
                center.iter().map(|c| (c - radius).max(-r)).collect(),
                center.iter().map(|c| (c + radius).min(r)).collect(),
            ),
            Primitive::Whole | Primitive::Polytope { .. } => (vec![-r; d], vec![r; d]),
        };
        let axes: Vec<Vec<f64>> = lo.iter().zip(&hi).map(|(&l, &h)| axis(l, h, grids.pi_resolution, cap)).collect();
        for p in cartesian(&axes) {
            if single.contains(&p) {
                out.push((i, p));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyGrid("portfolio grid has no point inside the constraint set".into()));
    }
    Ok(out)
}

/// `min_eta r u.eta + h(eta)`. With an analytic minimizer the grid is a
/// local stencil around it; otherwise it covers the ball of `eta_radius`
/// (or the penalty domain) at a capped node count. Either way one bracketing
/// refinement follows.
fn inner_min(u: &DVector<f64>, r: f64, penalty: &PenaltySpec, grids: &SaddleGrids) -> f64 {
    let m = u.len();
    let obj = |eta: &DVector<f64>| r * u.dot(eta) + penalty.evaluate(eta.as_slice());
    let (center, radius, cap) = match penalty.kind {
        PenaltyKind::Quadratic { w } => (-u * (r / w), 5.0 * grids.eta_resolution, 10),
        _ => {
            let dom = penalty.effective_domain_radius();
            let radius = if dom.is_finite() { grids.eta_radius.max(dom) } else { grids.eta_radius };
            (DVector::zeros(m), radius, [4000, 64, 16][m.min(3) - 1])
        }
    };
    let axes: Vec<Vec<f64>> =
        (0..m).map(|i| axis(center[i] - radius, center[i] + radius, grids.eta_resolution, cap)).collect();
    let spacing = axes[0].get(1).map_or(grids.eta_resolution, |x| x - axes[0][0]);
    let mut best = center.clone();
    let mut best_v = obj(&center);
    for p in cartesian(&axes) {
        let v = obj(&p);
        if v < best_v {
            best_v = v;
            best = p;
        }
    }
    if m == 1 {
        let (_, v) = golden_max(|x| -obj(&DVector::from_element(1, x)), best[0] - spacing, best[0] + spacing, 1e-13);
        best_v = best_v.min(-v);
    } else {
        let mut h = spacing;
        while h > 1e-3 * grids.eta_resolution {
            let local: Vec<Vec<f64>> = (0..m).map(|i| axis(best[i] - h, best[i] + h, h / 4.0, 8)).collect();
            for p in cartesian(&local) {
                let v = obj(&p);
                if v < best_v {
                    best_v = v;
                    best = p;
                }
            }
            h /= 4.0;
        }
    }
    best_v
}

#[allow(clippy::too_many_arguments)]
fn portfolio_part(
    candidates: &[(usize, DVector<f64>)],
    aset: &ConstraintSet,
    sigma: &DMatrix<f64>,
    theta: &DVector<f64>,
    penalty: &PenaltySpec,
    r: f64,
    grids: &SaddleGrids,
    d: usize,
) -> (f64, DVector<f64>) {
    let value = |pi: &DVector<f64>| {
        let u = sigma.tr_mul(pi);
        r * (u.dot(theta) - 0.5 * u.norm_squared()) + inner_min(&u, r, penalty, grids)
    };
    let mut best: Option<(usize, DVector<f64>, f64)> = None;
    for (i, p) in candidates {
        let v = value(p);
        if best.as_ref().is_none_or(|(_, _, bv)| v > *bv) {
            best = Some((*i, p.clone(), v));
        }
    }
    let (piece_idx, mut best_pi, mut best_v) = best.expect("nonempty candidates");
    let piece = &aset.pieces()[piece_idx];
    if matches!(piece, Primitive::Point(_)) {
        return (best_v, best_pi);
    }
    let single = ConstraintSet::new(d, vec![piece.clone()]).expect("validated piece");
    // the max-min value is concave in pi on a convex piece
    if d == 1 {
        let res = grids.pi_resolution;
        let (lo_p, _) = single.project(&DVector::from_element(1, best_pi[0] - res));
        let (hi_p, _) = single.project(&DVector::from_element(1, best_pi[0] + res));
        let (x, v) = golden_max(|x| value(&DVector::from_element(1, x)), lo_p[0], hi_p[0], 1e-12);
        if v > best_v {
            best_v = v;
            best_pi = DVector::from_element(1, x);
        }
    } else {
        // coarse grids for d >= 2 are refined until below the requested resolution
        let mut h = (2.0 * grids.pi_radius / axis_cap(d) as f64).max(grids.pi_resolution);
        while h > 1e-2 * grids.pi_resolution {
            let local: Vec<Vec<f64>> = (0..d).map(|i| axis(best_pi[i] - h, best_pi[i] + h, h / 4.0, 8)).collect();
            for p in cartesian(&local) {
                let (q, _) = single.project(&p);
                let v = value(&q);
                if v > best_v {
                    best_v = v;
                    best_pi = q;
                }
            }
            h /= 4.0;
        }
    }
    (best_v, best_pi)
}

/// Terminal functionals with a Gaussian moment generating function.
#[derive(Debug, Clone, PartialEq)]
pub enum XiDescription {
    Constant(f64),
    /// `a + b . W_T`
    Affine { a: f64, b: DVector<f64> },
    /// `a + q |W_T|^2` with `W` of dimension `dim`
    Quadratic { a: f64, q: f64, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `beta ln E[e^{xi/beta}]`, generator `|z|^2 / (2 beta)`
    Convex,
    /// `-beta ln E[e^{-xi/beta}]`, generator `-|z|^2 / (2 beta)`
    Concave,
}

pub fn entropic_closed_form(xi: &XiDescription, beta: f64, horizon: f64, direction: Direction) -> Result<f64> {
    let s = match direction {
        Direction::Convex => 1.0,
        Direction::Concave => -1.0,
    };
    match xi {
        XiDescription::Constant(c) => Ok(*c),
        XiDescription::Affine { a, b } => Ok(a + s * b.norm_squared() * horizon / (2.0 * beta)),
        XiDescription::Quadratic { a, q, dim } => {
            // E exp(lambda |W_T|^2) = (1 - 2 lambda T)^{-dim/2}
            let lambda = s * q / beta;
            let base = 1.0 - 2.0 * lambda * horizon;
            if base <= 0.0 {
                return Err(Error::UnsupportedFunctional(format!(
                    "exponential moment of q|W_T|^2 is infinite (1 - 2 lambda T = {base})"
                )));
            }
            Ok(a + s * beta * (-(*dim as f64) / 2.0) * base.ln())
        }
    }
}

/// Node-local pieces of the R increment: `base + A_{k+1} (u . dW - Y_{k+1}(child))`.
struct RIncrements<'a> {
    lattice: &'a Lattice,
    report: &'a ValueReport,
    a: Vec<f64>,
    /// per step: one entry when node-independent, else one per node
    parts: Vec<Vec<(f64, [f64; 3])>>,
}

impl RIncrements<'_> {
    fn at(&self, k: usize, n: usize, b: usize) -> f64 {
        let parts = &self.parts[k];
        let (base, u) = parts[if parts.len() == 1 { 0 } else { n }];
        let mut udw = 0.0;
        for (i, ui) in u.iter().enumerate().take(self.lattice.dim()) {
            udw += ui * Lattice::branch_sign(b, i) * self.lattice.sqrt_dt();
        }
        let child = self.lattice.child(k, n, b);
        base + self.a[k + 1] * (udw - self.report.y_at(k + 1, child))
    }
}

fn r_increments<'a>(
    report: &'a ValueReport,
    strategy: &StrategyProcess,
    bundle: &GeneratorBundle,
    lattice: &'a Lattice,
) -> Result<RIncrements<'a>> {
    let n = lattice.num_steps();
    if strategy.num_steps() != n || report.steps != n {
        return Err(Error::LatticeMismatch(format!(
            "strategy has {} steps, report {}, lattice {n}",
            strategy.num_steps(),
            report.steps
        )));
    }
    strategy.validate(bundle.model.num_assets())?;
    let sw = StepWeights::new(&bundle.weights, n)?;
    let node_y = report.lattice.is_some();
    let mut parts = Vec::with_capacity(n);
    for k in 0..n {
        let t = sw.t[k];
        let coeffs = bundle.model.coefficients_at(t);
        let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?;
        let per_node = node_y || !strategy.steps[k].is_uniform();
        let count = if per_node { lattice.nodes(k) } else { 1 };
        let mut row = Vec::with_capacity(count);
        for node in 0..count {
            let ctl = strategy.control(k, node);
            let u = coeffs.exposure(&ctl.pi);
            let drift = u.dot(theta) - 0.5 * u.norm_squared() - ctl.c;
            let base = sw.a[k + 1] * drift * sw.dt + sw.a[k] * report.y_at(k, node) + ln_c_term(sw.w_c[k], ctl.c);
            let mut arr = [0.0; 3];
            for (i, v) in u.iter().enumerate() {
                arr[i] = *v;
            }
            row.push((base, arr));
        }
        parts.push(row);
    }
    Ok(RIncrements { lattice, report, a: sw.a, parts })
}

/// `R` along one lattice path given by its branch choices.
#[derive(Debug, Clone, PartialEq)]
pub struct RProcess {
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub log_wealth: Vec<f64>,
}

impl RProcess {
    pub fn along_path(
        report: &ValueReport,
        strategy: &StrategyProcess,
        bundle: &GeneratorBundle,
        branches: &[usize],
    ) -> Result<Self> {
        let lattice = Lattice::new(report.steps, report.horizon, bundle.model.brownian_dim())?;
        if branches.len() != lattice.num_steps() {
            return Err(Error::LatticeMismatch("one branch per step required".into()));
        }
        let inc = r_increments(report, strategy, bundle, &lattice)?;
        let dt = lattice.dt();
        let mut nodes = vec![0];
        let mut values = vec![inc.a[0] * (report.initial_wealth.ln() - report.y_at(0, 0))];
        let mut log_wealth = vec![report.initial_wealth.ln()];
        for (k, &b) in branches.iter().enumerate() {
            let n = nodes[k];
            values.push(values[k] + inc.at(k, n, b));
            let t = lattice.time(k);
            let coeffs = bundle.model.coefficients_at(t);
            let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?;
            let ctl = strategy.control(k, n);
            let u = coeffs.exposure(&ctl.pi);
            let dw = lattice.increment(b);
            log_wealth.push(log_wealth[k] + (u.dot(theta) - 0.5 * u.norm_squared() - ctl.c) * dt + u.dot(&dw));
            nodes.push(lattice.child(k, n, b));
        }
        Ok(Self { nodes, values, log_wealth })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    /// `(s, max_n (E_G[R_T | node] - R_s(node)))` per checkpoint
    pub gaps: Vec<(f64, f64)>,
    pub max_violation: f64,
}

impl SupermartingaleReport {
    pub fn gap_at(&self, s: f64) -> Option<f64> {
        self.gaps.iter().find(|(t, _)| (t - s).abs() < 1e-12).map(|(_, g)| *g)
    }
}

pub fn default_checkpoints(horizon: f64) -> Vec<f64> {
    vec![0.0, 0.25 * horizon, 0.5 * horizon, 0.75 * horizon]
}

/// g-expectation (robust generator `-g(t, -z)`) of `R_T` restarted at each
/// checkpoint; by translation invariance one backward pass over the summed
/// increments gives every gap.
pub fn check_supermartingale(
    report: &ValueReport,
    strategy: &StrategyProcess,
    bundle: &GeneratorBundle,
    checkpoints: &[f64],
    workers: usize,
) -> Result<SupermartingaleReport> {
    let lattice = Lattice::new(report.steps, report.horizon, bundle.model.brownian_dim())?;
    let inc = r_increments(report, strategy, bundle, &lattice)?;
    let terminal = vec![0.0; lattice.nodes(lattice.num_steps())];
    let generator = |t: f64, z: &DVector<f64>| -> f64 {
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        -crate::constraints::ConvexFunction::eval(&bundle.g_function(t), &neg)
    };
    let sol = g_expectation_with_increments(&lattice, generator, &terminal, |k, n, b| inc.at(k, n, b), workers)?;
    let mut gaps = Vec::with_capacity(checkpoints.len());
    for &s in checkpoints {
        if !(0.0..report.horizon).contains(&s) {
            return Err(Error::TimeOutOfRange { t: s, horizon: report.horizon });
        }
        let k = (s / lattice.dt()).round() as usize;
        let gap = sol.y[k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        gaps.push((s, gap));
    }
    let max_violation = gaps.iter().map(|(_, g)| *g).fold(f64::NEG_INFINITY, f64::max);
    Ok(SupermartingaleReport { gaps, max_violation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToleranceReport {
    /// `(N, max_s |gap_s|)` for the optimal strategy at `N/4, N/2, N`
    pub samples: Vec<(usize, f64)>,
    pub constant: f64,
    pub tol: f64,
}

/// `tol(N) = 2 C sqrt(dt) + 1e-10 (1 + |V0|)` with `C = max |gap| / sqrt(dt)`
/// over the optimal strategy solved at `N/4`, `N/2` and `N`.
pub fn calibrate_tolerance(bundle: &GeneratorBundle, spec: &SolverSpec, checkpoints: &[f64]) -> Result<ToleranceReport> {
    let n = spec.steps;
    let mut samples = Vec::new();
    let mut constant: f64 = 0.0;
    let mut v0 = 0.0;
    for steps in [n / 4, n / 2, n] {
        if steps == 0 {
            continue;
        }
        let report = solve_value_bsde(bundle, &SolverSpec { steps, ..spec.clone() })?;
        let sm = check_supermartingale(&report, &report.strategy, bundle, checkpoints, spec.workers)?;
        let worst = sm.gaps.iter().map(|(_, g)| g.abs()).fold(0.0, f64::max);
        let dt = report.horizon / steps as f64;
        constant = constant.max(worst / dt.sqrt());
        samples.push((steps, worst));
        v0 = report.v0;
    }
    let dt = bundle.weights.horizon / n as f64;
    Ok(ToleranceReport { samples, constant, tol: 2.0 * constant * dt.sqrt() + 1e-10 * (1.0 + v0.abs()) })
}

/// Node-indexed perturbation of a strategy: `pi + eps U[-1,1]^d` projected on `A`,
/// `c (1 + eps U[-1,1])` projected on `C`.
pub fn perturb_strategy(
    strategy: &StrategyProcess,
    lattice: &Lattice,
    aset: &ConstraintSet,
    cset: &ConstraintSet,
    eps: f64,
    seed: u64,
) -> Result<StrategyProcess> {
    if strategy.num_steps() != lattice.num_steps() {
        return Err(Error::LatticeMismatch("strategy and lattice step counts differ".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(strategy.num_steps());
    for k in 0..strategy.num_steps() {
        let mut row = Vec::with_capacity(lattice.nodes(k));
        for n in 0..lattice.nodes(k) {
            let ctl = strategy.control(k, n);
            let shifted = ctl.pi.map(|p| p + eps * rng.random_range(-1.0..=1.0));
            let (pi, _) = aset.project(&shifted);
            let c_raw = ctl.c * (1.0 + eps * rng.random_range(-1.0..=1.0));
            let (c, _) = cset.project(&DVector::from_element(1, c_raw.max(0.0)));
            row.push(Control { pi, c: c[0].max(0.0) });
        }
        steps.push(StepValue::PerNode(row));
    }
    Ok(StrategyProcess { horizon: strategy.horizon, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrosscheckReport {
    pub v0_solver: f64,
    pub v0_saddle: f64,
    /// `min` over the eta grid of the dual objective of the extracted strategy
    pub v0_dual_lower: f64,
    pub tolerance: f64,
    pub saddle_ok: bool,
    pub dual_ok: bool,
}

impl CrosscheckReport {
    pub fn ok(&self) -> bool {
        self.saddle_ok && self.dual_ok
    }
}

/// Constant kernels on `[-radius, radius]^m` at the given spacing.
pub fn eta_grid(m: usize, radius: f64, spacing: f64) -> Vec<DVector<f64>> {
    let cap = axis_cap(m).min(400);
    let axes: Vec<Vec<f64>> = (0..m).map(|_| axis(-radius, radius, spacing, cap)).collect();
    cartesian(&axes)
}

pub fn robust_value_crosscheck(
    report: &ValueReport,
    bundle: &GeneratorBundle,
    grids: &SaddleGrids,
    etas: &[DVector<f64>],
    tolerance: f64,
) -> Result<CrosscheckReport> {
    if etas.is_empty() {
        return Err(Error::EmptyGrid("eta grid is empty".into()));
    }
    let saddle = saddle_oracle(
        &bundle.model,
        &bundle.weights,
        &bundle.penalty,
        &bundle.portfolio_set,
        &bundle.consumption_set,
        grids,
    )?;
    let strategy = &report.strategy;
    let mut lower = f64::INFINITY;
    let n = strategy.num_steps();
    // include the pointwise worst case of the first step for quadratic penalties
    let mut kernels: Vec<DVector<f64>> = etas.to_vec();
    if let PenaltyKind::Quadratic { w } = bundle.penalty.kind {
        let u = bundle.model.coefficients_at(0.0).exposure(&strategy.control(0, 0).pi);
        kernels.push(-u / (w * bundle.weights.beta));
    }
    for eta in &kernels {
        let scenario = DensityScenario::constant(eta.clone(), n);
        match dual_objective(&scenario, strategy, &bundle.model, &bundle.weights, &bundle.penalty) {
            Ok(v) => lower = lower.min(v.value),
            Err(Error::StepTooCoarse { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let saddle_ok = (report.v0 - saddle.value).abs() <= tolerance;
    let dual_ok = lower >= report.v0 - tolerance;
    Ok(CrosscheckReport {
        v0_solver: report.v0,
        v0_saddle: saddle.value,
        v0_dual_lower: lower,
        tolerance,
        saddle_ok,
        dual_ok,
    })
}
