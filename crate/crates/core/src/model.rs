//! Market primitives: piecewise-constant coefficients, problem weights,
//! strategies and the log-wealth dynamics
//!
//! ```text
//! d ln X_t = (pi_t sigma_t theta_t - 1/2 |pi_t sigma_t|^2 - c_t) dt + pi_t sigma_t dW_t
//! ```
//!
//! Portfolios `pi` are stored as column vectors in R^d; the exposure
//! `pi sigma` is computed as `sigma^T pi` in R^m.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Right-continuous step function of time: value `values[i]` on `[starts[i], starts[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant<T> {
    starts: Vec<f64>,
    values: Vec<T>,
}

impl<T> PiecewiseConstant<T> {
    pub fn new(starts: Vec<f64>, values: Vec<T>) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::InvalidModel(format!(
                "piecewise function needs matching non-empty starts/values ({} vs {})",
                starts.len(),
                values.len()
            )));
        }
        if starts[0] != 0.0 {
            return Err(Error::InvalidModel("first piece must start at t = 0".into()));
        }
        if starts.windows(2).any(|w| !(w[1] > w[0])) || starts.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidModel("piece starts must be finite and strictly increasing".into()));
        }
        Ok(Self { starts, values })
    }

    pub fn constant(value: T) -> Self {
        Self { starts: vec![0.0], values: vec![value] }
    }

    pub fn index_at(&self, t: f64) -> usize {
        // last i with starts[i] <= t
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn at(&self, t: f64) -> &T {
        &self.values[self.index_at(t)]
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Interior breakpoints lying strictly inside `(a, b)`.
    pub fn breakpoints_in(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        self.starts.iter().copied().filter(move |&s| s > a && s < b)
    }
}

impl PiecewiseConstant<f64> {
    /// Exact integral over `[a, b]` (`a <= b`).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut total = 0.0;
        let mut i = self.index_at(a);
        let mut lo = a;
        loop {
            let hi = self.starts.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            total += self.values[i] * (hi - lo);
            if hi >= b {
                break;
            }
            lo = hi;
            i += 1;
        }
        total
    }

    /// Exact `int_a^b exp(-int_0^u f) du`.
    pub fn exp_neg_integral_integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut total = 0.0;
        let mut i = self.index_at(a);
        let mut lo = a;
        let mut acc = self.integral(0.0, a);
        loop {
            let hi = self.starts.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            let rate = self.values[i];
            let len = hi - lo;
            let piece = if rate == 0.0 {
                len
            } else {
                -(-rate * len).exp_m1() / rate
            };
            total += (-acc).exp() * piece;
            acc += rate * len;
            if hi >= b {
                break;
            }
            lo = hi;
            i += 1;
        }
        total
    }
}

/// Drift, volatility and the cached market price of risk on one time piece.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub drift: DVector<f64>,
    pub sigma: DMatrix<f64>,
    theta: Option<DVector<f64>>,
}

impl Coefficients {
    pub fn new(drift: DVector<f64>, sigma: DMatrix<f64>) -> Self {
        let theta = solve_theta(&drift, &sigma);
        Self { drift, sigma, theta }
    }

    pub fn theta(&self) -> Option<&DVector<f64>> {
        self.theta.as_ref()
    }

    /// `pi sigma` as a column vector in R^m.
    pub fn exposure(&self, pi: &DVector<f64>) -> DVector<f64> {
        self.sigma.tr_mul(pi)
    }
}

/// theta = sigma^T (sigma sigma^T)^{-1} b, via Cholesky of sigma sigma^T.
fn solve_theta(drift: &DVector<f64>, sigma: &DMatrix<f64>) -> Option<DVector<f64>> {
    let gram = sigma * sigma.transpose();
    let chol = gram.cholesky()?;
    let tilde = chol.solve(drift);
    if tilde.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(sigma.tr_mul(&tilde))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    num_assets: usize,
    brownian_dim: usize,
    coefficients: PiecewiseConstant<Coefficients>,
    pub eps: f64,
    pub k_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityReport {
    pub ok: bool,
    pub worst_eigen_low: f64,
    pub worst_eigen_high: f64,
}

impl MarketModel {
    pub fn new(
        num_assets: usize,
        brownian_dim: usize,
        starts: Vec<f64>,
        pieces: Vec<(DVector<f64>, DMatrix<f64>)>,
        eps: f64,
        k_upper: f64,
    ) -> Result<Self> {
        if num_assets == 0 || num_assets > brownian_dim {
            return Err(Error::InvalidModel(format!(
                "need 1 <= d <= m, got d = {num_assets}, m = {brownian_dim}"
            )));
        }
        if !(eps > 0.0 && k_upper > eps) {
            return Err(Error::InvalidModel(format!(
                "ellipticity bounds need 0 < eps < K, got eps = {eps}, K = {k_upper}"
            )));
        }
        for (i, (b, s)) in pieces.iter().enumerate() {
            if b.len() != num_assets || s.nrows() != num_assets || s.ncols() != brownian_dim {
                return Err(Error::InvalidModel(format!(
                    "piece {i}: drift must be {num_assets}-dim and sigma {num_assets}x{brownian_dim}"
                )));
            }
            if b.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("piece {i}: non-finite coefficient")));
            }
        }
        let coefficients = PiecewiseConstant::new(
            starts,
            pieces.into_iter().map(|(b, s)| Coefficients::new(b, s)).collect(),
        )?;
        Ok(Self { num_assets, brownian_dim, coefficients, eps, k_upper })
    }

    /// Single-piece model with time-constant coefficients.
    pub fn constant(drift: DVector<f64>, sigma: DMatrix<f64>, eps: f64, k_upper: f64) -> Result<Self> {
        let (d, m) = (sigma.nrows(), sigma.ncols());
        Self::new(d, m, vec![0.0], vec![(drift, sigma)], eps, k_upper)
    }

    pub fn num_assets(&self) -> usize {
        self.num_assets
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn coefficients_at(&self, t: f64) -> &Coefficients {
        self.coefficients.at(t)
    }

    pub fn pieces(&self) -> &PiecewiseConstant<Coefficients> {
        &self.coefficients
    }

    pub fn market_price_of_risk(&self, t: f64) -> Result<DVector<f64>> {
        self.coefficients_at(t)
            .theta()
            .cloned()
            .ok_or(Error::DegenerateVolatility { t })
    }

    pub fn check_ellipticity(&self) -> EllipticityReport {
        let mut low = f64::INFINITY;
        let mut high = f64::NEG_INFINITY;
        for c in self.coefficients.values() {
            let gram = &c.sigma * c.sigma.transpose();
            let eig = SymmetricEigen::new(gram);
            for &e in eig.eigenvalues.iter() {
                low = low.min(e);
                high = high.max(e);
            }
        }
        let low = low.max(0.0);
        EllipticityReport {
            ok: low >= self.eps && high <= self.k_upper,
            worst_eigen_low: low,
            worst_eigen_high: high,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemWeights {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub beta: f64,
    pub delta: PiecewiseConstant<f64>,
    pub horizon: f64,
    pub initial_wealth: f64,
}

impl ProblemWeights {
    pub fn new(
        alpha: f64,
        alpha_bar: f64,
        beta: f64,
        delta: PiecewiseConstant<f64>,
        horizon: f64,
        initial_wealth: f64,
    ) -> Result<Self> {
        let w = Self { alpha, alpha_bar, beta, delta, horizon, initial_wealth };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_wealth > 0.0) || !self.initial_wealth.is_finite() {
            return Err(Error::InvalidWeights(format!(
                "initial_wealth must be strictly positive, got {}",
                self.initial_wealth
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidWeights(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidWeights(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.alpha_bar > 0.0) || !self.alpha_bar.is_finite() {
            return Err(Error::InvalidWeights(format!("alpha_bar must be > 0, got {}", self.alpha_bar)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidWeights(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.delta.values().iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidWeights("discount rate delta must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t < 0.0 || t > self.horizon || t.is_nan() {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// `int_0^t delta`.
    pub fn cumulative_discount(&self, t: f64) -> f64 {
        self.delta.integral(0.0, t)
    }

    /// `int_a^b exp(-int_0^u delta) du`.
    pub fn discounted_time(&self, a: f64, b: f64) -> f64 {
        self.delta.exp_neg_integral_integral(a, b)
    }
}

/// Value of a control field on one time step: shared by every node, or one per node.
#[derive(Debug, Clone, PartialEq)]
pub enum StepValue<T> {
    Uniform(T),
    PerNode(Vec<T>),
}

impl<T> StepValue<T> {
    pub fn at(&self, node: usize) -> &T {
        match self {
            StepValue::Uniform(v) => v,
            StepValue::PerNode(vs) => &vs[node],
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, StepValue::Uniform(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub pi: DVector<f64>,
    pub c: f64,
}

/// Portfolio/consumption pair per time step `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyProcess {
    pub horizon: f64,
    pub steps: Vec<StepValue<Control>>,
}

impl StrategyProcess {
    pub fn constant(pi: DVector<f64>, c: f64, num_steps: usize, horizon: f64) -> Self {
        Self {
            horizon,
            steps: vec![StepValue::Uniform(Control { pi, c }); num_steps],
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps.len() as f64
    }

    pub fn control(&self, step: usize, node: usize) -> &Control {
        self.steps[step].at(node)
    }

    pub fn validate(&self, num_assets: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidStrategy("strategy has no steps".into()));
        }
        let check = |ctl: &Control| -> Result<()> {
            if ctl.pi.len() != num_assets {
                return Err(Error::DimensionMismatch { expected: num_assets, actual: ctl.pi.len() });
            }
            if !(ctl.c >= 0.0) || !ctl.c.is_finite() || ctl.pi.iter().any(|p| !p.is_finite()) {
                return Err(Error::InvalidStrategy(format!(
                    "consumption must be finite and >= 0 and pi finite, got c = {}",
                    ctl.c
                )));
            }
            Ok(())
        };
        for s in &self.steps {
            match s {
                StepValue::Uniform(c) => check(c)?,
                StepValue::PerNode(cs) => cs.iter().try_for_each(check)?,
            }
        }
        Ok(())
    }
}

/// Brownian increments on a uniform grid; `nodes[k]` optionally carries the
/// lattice node occupied at step `k` (needed for node-indexed strategies).
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub dt: f64,
    pub increments: Vec<DVector<f64>>,
    pub nodes: Option<Vec<usize>>,
}

impl BrownianPath {
    pub fn zero(num_steps: usize, dt: f64, dim: usize) -> Self {
        Self { dt, increments: vec![DVector::zeros(dim); num_steps], nodes: None }
    }
}

/// Forward log-wealth with left-point (Ito) Euler; exact for controls that are
/// constant over each step. Returns `X_{t_0}, ..., X_{t_N}`.
pub fn simulate_wealth(
    model: &MarketModel,
    weights: &ProblemWeights,
    strategy: &StrategyProcess,
    path: &BrownianPath,
) -> Result<Vec<f64>> {
    strategy.validate(model.num_assets())?;
    let n = strategy.num_steps();
    if path.increments.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: path.increments.len() });
    }
    let dt = strategy.dt();
    if (path.dt - dt).abs() > 1e-12 * dt.max(1.0) {
        return Err(Error::InvalidStrategy(format!(
            "path step {} inconsistent with strategy step {}",
            path.dt, dt
        )));
    }
    let x0 = weights.initial_wealth;
    let mut log_return = 0.0;
    let mut out = Vec::with_capacity(n + 1);
    out.push(x0);
    for (k, dw) in path.increments.iter().enumerate() {
        if dw.len() != model.brownian_dim() {
            return Err(Error::DimensionMismatch { expected: model.brownian_dim(), actual: dw.len() });
        }
        let node = match (&strategy.steps[k], &path.nodes) {
            (StepValue::Uniform(_), _) => 0,
            (StepValue::PerNode(_), Some(nodes)) => nodes[k],
            (StepValue::PerNode(_), None) => {
                return Err(Error::InvalidStrategy(
                    "node-indexed strategy needs a path carrying lattice nodes".into(),
                ))
            }
        };
        let t = k as f64 * dt;
        let coeffs = model.coefficients_at(t);
        let theta = coeffs.theta().ok_or(Error::DegenerateVolatility { t })?;
        let ctl = strategy.control(k, node);
        let u = coeffs.exposure(&ctl.pi);
        log_return += (u.dot(theta) - 0.5 * u.norm_squared() - ctl.c) * dt + u.dot(dw);
        out.push(x0 * log_return.exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(b: f64, s: f64) -> MarketModel {
        MarketModel::constant(DVector::from_element(1, b), DMatrix::from_element(1, 1, s), 0.01, 10.0).unwrap()
    }

    fn weights(x: f64) -> ProblemWeights {
        ProblemWeights::new(0.0, 1.0, 1.0, PiecewiseConstant::constant(0.0), 1.0, x).unwrap()
    }

    #[test]
    fn theta_scalar() {
        let m = scalar_model(0.1, 0.5);
        assert!((m.market_price_of_risk(0.3).unwrap()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn theta_identity_volatility() {
        let b = DVector::from_vec(vec![0.05, -0.2, 0.3]);
        let m = MarketModel::constant(b.clone(), DMatrix::identity(3, 3), 0.5, 2.0).unwrap();
        let theta = m.market_price_of_risk(0.0).unwrap();
        assert!((theta - b).norm() < 1e-15);
    }

    #[test]
    fn theta_incomplete_market() {
        let m = MarketModel::constant(
            DVector::from_element(1, 0.1),
            DMatrix::from_row_slice(1, 2, &[0.3, 0.4]),
            0.1,
            1.0,
        )
        .unwrap();
        let theta = m.market_price_of_risk(0.0).unwrap();
        assert!((theta[0] - 0.12).abs() < 1e-15);
        assert!((theta[1] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn degenerate_volatility_is_an_error() {
        let m = scalar_model(0.1, 0.0);
        assert_eq!(m.market_price_of_risk(0.0), Err(Error::DegenerateVolatility { t: 0.0 }));
    }

    #[test]
    fn ellipticity_reports() {
        let r = MarketModel::constant(DVector::from_element(1, 0.1), DMatrix::from_element(1, 1, 0.5), 0.01, 1.0)
            .unwrap()
            .check_ellipticity();
        assert!(r.ok);

        let r = scalar_model(0.1, 0.0).check_ellipticity();
        assert!(!r.ok);
        assert_eq!(r.worst_eigen_low, 0.0);

        let r = MarketModel::constant(
            DVector::from_element(1, 0.1),
            DMatrix::from_row_slice(1, 2, &[0.3, 0.4]),
            0.1,
            1.0,
        )
        .unwrap()
        .check_ellipticity();
        assert!(r.ok);
        assert!((r.worst_eigen_low - 0.25).abs() < 1e-15);
    }

    #[test]
    fn d_greater_than_m_rejected() {
        let err = MarketModel::constant(DVector::zeros(2), DMatrix::zeros(2, 1), 0.1, 1.0);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn nonpositive_wealth_rejected() {
        let err = ProblemWeights::new(0.0, 1.0, 1.0, PiecewiseConstant::constant(0.0), 1.0, 0.0);
        assert!(matches!(err, Err(Error::InvalidWeights(msg)) if msg.contains("initial_wealth")));
    }

    #[test]
    fn discount_integrals_are_exact() {
        let delta = PiecewiseConstant::new(vec![0.0, 0.5], vec![0.1, 0.3]).unwrap();
        assert!((delta.integral(0.0, 1.0) - 0.2).abs() < 1e-15);
        assert!((delta.integral(0.25, 0.75) - (0.025 + 0.075)).abs() < 1e-15);
        let expected = (1.0 - (-0.05f64).exp()) / 0.1 + (-0.05f64).exp() * (1.0 - (-0.15f64).exp()) / 0.3;
        assert!((delta.exp_neg_integral_integral(0.0, 1.0) - expected).abs() < 1e-15);
        let zero = PiecewiseConstant::constant(0.0);
        assert!((zero.exp_neg_integral_integral(0.2, 0.7) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_trading_no_consumption_keeps_wealth() {
        let m = scalar_model(0.2, 1.0);
        let s = StrategyProcess::constant(DVector::zeros(1), 0.0, 10, 1.0);
        let path = BrownianPath::zero(10, 0.1, 1);
        let x = simulate_wealth(&m, &weights(2.0), &s, &path).unwrap();
        assert!(x.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn pure_consumption_decays_wealth() {
        let m = scalar_model(0.2, 1.0);
        let s = StrategyProcess::constant(DVector::zeros(1), 0.1, 100, 1.0);
        let path = BrownianPath::zero(100, 0.01, 1);
        let x = simulate_wealth(&m, &weights(1.0), &s, &path).unwrap();
        assert!((x[100] - (-0.1f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn drift_only_exponential() {
        let m = scalar_model(0.2, 1.0);
        let s = StrategyProcess::constant(DVector::from_element(1, 1.0), 0.0, 50, 2.0);
        let path = BrownianPath::zero(50, 0.04, 1);
        let x = simulate_wealth(&m, &weights(1.5), &s, &path).unwrap();
        assert!((x[50] - 1.5 * ((0.2 - 0.5) * 2.0f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn negative_consumption_rejected() {
        let m = scalar_model(0.2, 1.0);
        let s = StrategyProcess::constant(DVector::zeros(1), -0.1, 4, 1.0);
        let path = BrownianPath::zero(4, 0.25, 1);
        assert!(matches!(
            simulate_wealth(&m, &weights(1.0), &s, &path),
            Err(Error::InvalidStrategy(_))
        ));
    }
}
