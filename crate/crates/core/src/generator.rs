//! Deterministic weight `h(t)`, linear rate `rho(t)`, the g-expectation
//! generator and the value generator `f(t, z)` with its pointwise optimizers.
//!
//! Notation: `H = alpha_bar h(t)`, `D = int_0^t delta`, `A = H e^{-D}`, `u = sigma^T pi`.
//!
//! ```text
//! h(t)   = e^{-int_t^T delta} + (alpha/alpha_bar) e^{D_t} int_t^T e^{-D_u} du
//! g(t,z) = beta e^{-D} h*(e^{D} z / beta)
//! ```
//!
//! The calibrated value generator is
//!
//! ```text
//! f(t,z) = (1/H) sup_c (alpha ln c - H c)
//!          - inf_pi [ (e^D/H) g(t, -A (z + u)) - u.theta + |u|^2/2 ]
//! ```
//!
//! and the literal one
//!
//! ```text
//! f(t,z) = (e^{-D}/H) sup_c (alpha ln c - H c) - inf_pi [ (1/H) g(t, A (z + u)) + u.theta ]
//! ```

use dashmap::DashMap;
use nalgebra::DVector;

use crate::constraints::{argmax_consumption, argmin_portfolio, ConstraintSet, ConvexFunction, ImageSet, PortfolioObjective};
use crate::error::{Error, Result};
use crate::model::{MarketModel, ProblemWeights};
use crate::penalty::{PenaltyKind, PenaltySpec};

pub fn h_of_t(weights: &ProblemWeights, t: f64) -> Result<f64> {
    weights.check_time(t)?;
    let tail = weights.delta.integral(t, weights.horizon);
    let d_t = weights.cumulative_discount(t);
    let consumption = if weights.alpha > 0.0 {
        (weights.alpha / weights.alpha_bar) * d_t.exp() * weights.discounted_time(t, weights.horizon)
    } else {
        0.0
    };
    Ok((-tail).exp() + consumption)
}

pub fn rho(weights: &ProblemWeights, t: f64) -> Result<f64> {
    Ok(weights.alpha / (weights.alpha_bar * h_of_t(weights, t)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Convention {
    Calibrated,
    LiteralPaper,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::Calibrated => "calibrated",
            Convention::LiteralPaper => "literal-paper",
        }
    }
}

/// `z -> beta e^{-D} h*(e^D z / beta)` at a fixed time.
pub struct GFunction<'a> {
    pub penalty: &'a PenaltySpec,
    pub beta: f64,
    pub discount: f64,
}

impl ConvexFunction for GFunction<'_> {
    fn eval(&self, z: &[f64]) -> f64 {
        let scale = self.discount.exp() / self.beta;
        let y: Vec<f64> = z.iter().map(|v| v * scale).collect();
        match self.penalty.conjugate(&y) {
            Ok(v) => self.beta * (-self.discount).exp() * v,
            Err(_) => f64::INFINITY,
        }
    }

    fn quadratic_coefficient(&self) -> Option<f64> {
        match self.penalty.kind {
            PenaltyKind::Quadratic { w } => Some(self.discount.exp() / (2.0 * w * self.beta)),
            _ => None,
        }
    }
}

/// Value of `f` with the optimizers attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct FEval {
    pub value: f64,
    pub pi: DVector<f64>,
    pub c: f64,
}

#[derive(Debug)]
pub struct GeneratorBundle {
    pub model: MarketModel,
    pub weights: ProblemWeights,
    pub penalty: PenaltySpec,
    pub portfolio_set: ConstraintSet,
    pub consumption_set: ConstraintSet,
    pub convention: Convention,
    cache: DashMap<(usize, usize), FEval>,
}

struct Frame {
    big_h: f64,
    discount: f64,
}

impl GeneratorBundle {
    pub fn new(
        model: MarketModel,
        weights: ProblemWeights,
        penalty: PenaltySpec,
        portfolio_set: ConstraintSet,
        consumption_set: ConstraintSet,
        convention: Convention,
    ) -> Result<Self> {
        weights.validate()?;
        if portfolio_set.dim() != model.num_assets() {
            return Err(Error::DimensionMismatch { expected: model.num_assets(), actual: portfolio_set.dim() });
        }
        if consumption_set.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, actual: consumption_set.dim() });
        }
        for &s in model.pieces().starts() {
            model.market_price_of_risk(s)?;
        }
        Ok(Self {
            model,
            weights,
            penalty,
            portfolio_set,
            consumption_set,
            convention,
            cache: DashMap::new(),
        })
    }

    pub fn with_convention(&self, convention: Convention) -> Self {
        Self {
            model: self.model.clone(),
            weights: self.weights.clone(),
            penalty: self.penalty.clone(),
            portfolio_set: self.portfolio_set.clone(),
            consumption_set: self.consumption_set.clone(),
            convention,
            cache: DashMap::new(),
        }
    }

    fn frame(&self, t: f64) -> Result<Frame> {
        let h = h_of_t(&self.weights, t)?;
        Ok(Frame { big_h: self.weights.alpha_bar * h, discount: self.weights.cumulative_discount(t) })
    }

    fn check_z(&self, z: &DVector<f64>) -> Result<()> {
        let m = self.model.brownian_dim();
        if z.len() != m {
            return Err(Error::DimensionMismatch { expected: m, actual: z.len() });
        }
        Ok(())
    }

    pub fn g_function(&self, t: f64) -> GFunction<'_> {
        GFunction { penalty: &self.penalty, beta: self.weights.beta, discount: self.weights.cumulative_discount(t) }
    }

    pub fn h(&self, t: f64) -> Result<f64> {
        h_of_t(&self.weights, t)
    }

    pub fn rho(&self, t: f64) -> Result<f64> {
        rho(&self.weights, t)
    }

    /// `beta e^{-D} h*(e^D z / beta)`; `+inf` outside the conjugate's domain.
    pub fn g_generator(&self, t: f64, z: &DVector<f64>) -> Result<f64> {
        self.weights.check_time(t)?;
        self.check_z(z)?;
        let d = self.weights.cumulative_discount(t);
        let beta = self.weights.beta;
        let y: Vec<f64> = z.iter().map(|v| v * d.exp() / beta).collect();
        Ok(beta * (-d).exp() * self.penalty.conjugate(&y)?)
    }

    /// The entropic g as printed alongside the closed form: `e^D |z|^2 / beta`.
    pub fn g_entropic_printed(&self, t: f64, z: &DVector<f64>) -> Result<f64> {
        self.weights.check_time(t)?;
        self.check_z(z)?;
        Ok(self.weights.cumulative_discount(t).exp() * z.norm_squared() / self.weights.beta)
    }

    /// Concave generator `-g(t, -z)` of the robust (inf) representation.
    pub fn robust_generator(&self, t: f64, z: &DVector<f64>) -> Result<f64> {
        Ok(-self.g_generator(t, &-z)?)
    }

    fn objective<'s>(&'s self, tc: f64, fr: &Frame, g: &'s GFunction<'s>) -> Result<PortfolioObjective<'s>> {
        let theta = self.model.market_price_of_risk(tc)?;
        let a = fr.big_h * (-fr.discount).exp();
        Ok(match self.convention {
            Convention::Calibrated => PortfolioObjective {
                g,
                scale_a: -a,
                scale_b: fr.discount.exp() / fr.big_h,
                linear: -theta,
                quadratic: 0.5,
            },
            Convention::LiteralPaper => {
                PortfolioObjective { g, scale_a: a, scale_b: 1.0 / fr.big_h, linear: theta, quadratic: 0.0 }
            }
        })
    }

    fn consumption_weight(&self, fr: &Frame) -> f64 {
        match self.convention {
            Convention::Calibrated => 1.0 / fr.big_h,
            Convention::LiteralPaper => (-fr.discount).exp() / fr.big_h,
        }
    }

    /// `f(t, z)` under the bundle's convention, built from the pointwise optimizers.
    pub fn f_generator(&self, t: f64, z: &DVector<f64>) -> Result<FEval> {
        self.f_generator_on(t, t, z)
    }

    /// As [`Self::f_generator`], with market coefficients read at `tc`. Lets
    /// integrators stay on one coefficient piece up to its right end.
    pub fn f_generator_on(&self, t: f64, tc: f64, z: &DVector<f64>) -> Result<FEval> {
        self.weights.check_time(t)?;
        self.check_z(z)?;
        let fr = self.frame(t)?;
        let (c, sup_c) = argmax_consumption(&self.consumption_set, self.weights.alpha, fr.big_h)?;
        let g = self.g_function(t);
        let obj = self.objective(tc, &fr, &g)?;
        let sigma = &self.model.coefficients_at(tc).sigma;
        let (pi, inf_pi) = argmin_portfolio(&self.portfolio_set, sigma, &obj, z)?;
        Ok(FEval { value: self.consumption_weight(&fr) * sup_c - inf_pi, pi, c })
    }

    /// The raw objective of `f` at a given `(pi, c)`, without optimizing.
    pub fn f_objective(&self, t: f64, z: &DVector<f64>, pi: &DVector<f64>, c: f64) -> Result<f64> {
        self.weights.check_time(t)?;
        self.check_z(z)?;
        let fr = self.frame(t)?;
        let alpha = self.weights.alpha;
        let cons = if alpha > 0.0 { alpha * c.ln() - fr.big_h * c } else { -fr.big_h * c };
        let g = self.g_function(t);
        let obj = self.objective(t, &fr, &g)?;
        let u = self.model.coefficients_at(t).exposure(pi);
        Ok(self.consumption_weight(&fr) * cons - obj.evaluate_exposure(z, &u))
    }

    /// `f_generator` memoized by lattice coordinates `(step, node)`.
    pub fn f_cached(&self, step: usize, node: usize, t: f64, z: &DVector<f64>) -> Result<FEval> {
        if let Some(hit) = self.cache.get(&(step, node)) {
            return Ok(hit.clone());
        }
        let v = self.f_generator(t, z)?;
        self.cache.insert((step, node), v.clone());
        Ok(v)
    }

    pub fn cached(&self, step: usize, node: usize) -> Option<FEval> {
        self.cache.get(&(step, node)).map(|e| e.clone())
    }

    pub fn clear_cache(&self) {
        self.cache.clear();
    }

    fn closed_form_first_term(&self, fr: &Frame) -> Result<f64> {
        let alpha = self.weights.alpha;
        if alpha > 0.0 {
            let c_hat = alpha / fr.big_h;
            if !self.consumption_set.contains(&DVector::from_element(1, c_hat)) {
                return Err(Error::ClosedFormInapplicable(format!(
                    "unconstrained consumption optimum {c_hat} lies outside the consumption set"
                )));
            }
            Ok((alpha * c_hat.ln() - alpha) / fr.big_h)
        } else {
            if !self.consumption_set.contains(&DVector::zeros(1)) {
                return Err(Error::ClosedFormInapplicable(
                    "alpha = 0 needs 0 in the closure of the consumption set".into(),
                ));
            }
            Ok(0.0)
        }
    }

    /// Closed form of `f` for the entropic penalty `|x|^2 / 2`. The calibrated
    /// variant completes the square of the calibrated generator; the literal
    /// variant is the printed formula.
    pub fn f_entropic_closed_form(&self, t: f64, z: &DVector<f64>) -> Result<f64> {
        self.f_entropic_closed_form_on(t, t, z)
    }

    pub fn f_entropic_closed_form_on(&self, t: f64, tc: f64, z: &DVector<f64>) -> Result<f64> {
        self.weights.check_time(t)?;
        self.check_z(z)?;
        if !self.penalty.is_entropic() {
            return Err(Error::ClosedFormInapplicable("penalty is not |x|^2/2".into()));
        }
        let fr = self.frame(t)?;
        let first = self.closed_form_first_term(&fr)?;
        let theta = self.model.market_price_of_risk(tc)?;
        let sigma = &self.model.coefficients_at(tc).sigma;
        let image = ImageSet::new(&self.portfolio_set, sigma)?;
        let beta = self.weights.beta;
        let big_h = fr.big_h;
        match self.convention {
            Convention::Calibrated => {
                let a = big_h / (2.0 * beta);
                let k = a + 0.5;
                let p = (&theta * beta - z * big_h) / (big_h + beta);
                let d2 = image.distance_sq(&p)?;
                let lin = z * (2.0 * a) - &theta;
                Ok(first - k * d2 + lin.norm_squared() / (4.0 * k) - a * z.norm_squared())
            }
            Convention::LiteralPaper => {
                let ed = fr.discount.exp();
                let shift = &theta * (beta * ed / (2.0 * big_h));
                let d2 = image.distance_sq(&(z + shift))?;
                Ok(first / ed - (big_h / beta) / ed * d2
                    - z.dot(&theta)
                    - beta * ed * theta.norm_squared() / (4.0 * big_h))
            }
        }
    }

    /// Generator used by the value BSDE. Under the literal convention the
    /// printed closed form is used whenever it applies.
    pub fn value_generator(&self, t: f64, z: &DVector<f64>) -> Result<FEval> {
        self.value_generator_on(t, t, z)
    }

    pub fn value_generator_on(&self, t: f64, tc: f64, z: &DVector<f64>) -> Result<FEval> {
        match self.convention {
            Convention::Calibrated => self.f_generator_on(t, tc, z),
            Convention::LiteralPaper => {
                let mut eval = self.f_generator_on(t, tc, z)?;
                match self.f_entropic_closed_form_on(t, tc, z) {
                    Ok(v) => {
                        eval.value = v;
                        Ok(eval)
                    }
                    Err(Error::ClosedFormInapplicable(_)) => Ok(eval),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Times in `(0, T)` where `delta` or the market coefficients jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        let t_end = self.weights.horizon;
        let mut pts: Vec<f64> = self
            .weights
            .delta
            .breakpoints_in(0.0, t_end)
            .chain(self.model.pieces().breakpoints_in(0.0, t_end))
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        pts.dedup();
        pts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Primitive;
    use crate::model::PiecewiseConstant;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn weights(alpha: f64, delta: PiecewiseConstant<f64>) -> ProblemWeights {
        ProblemWeights::new(alpha, 1.0, 1.0, delta, 1.0, 1.0).unwrap()
    }

    fn anchor(aset: ConstraintSet, convention: Convention) -> GeneratorBundle {
        let model =
            MarketModel::constant(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, 1.0), 0.5, 2.0).unwrap();
        GeneratorBundle::new(
            model,
            weights(0.0, PiecewiseConstant::constant(0.0)),
            PenaltySpec::entropic(),
            aset,
            ConstraintSet::point(vec![0.0]),
            convention,
        )
        .unwrap()
    }

    fn z1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn h_examples() {
        let w = weights(0.7, PiecewiseConstant::constant(0.0));
        assert_eq!(h_of_t(&w, 1.0).unwrap(), 1.0);
        assert!((h_of_t(&w, 0.25).unwrap() - (1.0 + 0.7 * 0.75)).abs() < 1e-15);
        let w = weights(0.0, PiecewiseConstant::constant(0.05));
        assert!((h_of_t(&w, 0.0).unwrap() - 0.951_229_424_500_714).abs() < 1e-12);
        assert!(matches!(h_of_t(&w, 1.5), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn rho_examples() {
        let w = ProblemWeights::new(0.3, 2.0, 1.0, PiecewiseConstant::constant(0.1), 1.0, 1.0).unwrap();
        assert!((rho(&w, 1.0).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(rho(&weights(0.0, PiecewiseConstant::constant(0.1)), 0.3).unwrap(), 0.0);
        assert!((rho(&weights(1.0, PiecewiseConstant::constant(0.0)), 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cauchy_residual_small() {
        let delta = PiecewiseConstant::new(vec![0.0, 0.3, 0.6], vec![0.02, 0.2, 0.07]).unwrap();
        let w = ProblemWeights::new(0.8, 1.5, 1.0, delta.clone(), 1.0, 1.0).unwrap();
        let n = 1000;
        let dt = 1.0 / n as f64;
        for i in 0..n {
            let (a, b) = (i as f64 * dt, (i + 1) as f64 * dt);
            let mid = 0.5 * (a + b);
            let hp = (h_of_t(&w, b).unwrap() - h_of_t(&w, a).unwrap()) / dt;
            let res = w.alpha_bar * hp - (w.alpha_bar * delta.at(mid) * h_of_t(&w, mid).unwrap() - w.alpha);
            // one step straddling a jump of delta carries an O(1) residual
            if delta.starts().iter().any(|&s| s > a && s < b) {
                continue;
            }
            assert!(res.abs() < 1e-6, "t = {mid}: {res}");
        }
    }

    #[test]
    fn g_examples() {
        let b = anchor(ConstraintSet::whole(1), Convention::Calibrated);
        assert_eq!(b.g_generator(0.2, &z1(0.0)).unwrap(), 0.0);
        assert!((b.g_generator(0.2, &z1(0.6)).unwrap() - 0.18).abs() < 1e-15);
        assert!((b.g_entropic_printed(0.2, &z1(0.6)).unwrap() - 0.36).abs() < 1e-15);
        let mut b2 = anchor(ConstraintSet::whole(1), Convention::Calibrated);
        b2.weights.beta = 2.0;
        assert!((b2.g_generator(0.0, &z1(2.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn calibrated_anchor_generator() {
        let b = anchor(ConstraintSet::whole(1), Convention::Calibrated);
        let f = b.f_generator(0.0, &z1(0.0)).unwrap();
        assert!((f.value - 0.01).abs() < 1e-15);
        assert!((f.pi[0] - 0.1).abs() < 1e-15);
        assert!((b.f_entropic_closed_form(0.0, &z1(0.0)).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn literal_examples() {
        let b = anchor(ConstraintSet::whole(1), Convention::LiteralPaper);
        assert!((b.f_entropic_closed_form(0.0, &z1(0.0)).unwrap() + 0.01).abs() < 1e-15);
        // the literal generator with the substituted g sits at theta^2/2
        assert!((b.f_generator(0.0, &z1(0.0)).unwrap().value - 0.02).abs() < 1e-15);
        assert!((b.value_generator(0.0, &z1(0.0)).unwrap().value + 0.01).abs() < 1e-15);

        let zero = anchor(ConstraintSet::point(vec![0.0]), Convention::LiteralPaper);
        assert!((zero.f_entropic_closed_form(0.0, &z1(0.3)).unwrap() + 0.23).abs() < 1e-14);

        let mut flat = anchor(ConstraintSet::whole(1), Convention::LiteralPaper);
        flat.model = MarketModel::constant(z1(0.0), DMatrix::from_element(1, 1, 1.0), 0.5, 2.0).unwrap();
        assert_eq!(flat.f_entropic_closed_form(0.0, &z1(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn zero_theta_zero_z() {
        let mut b = anchor(ConstraintSet::interval(-1.0, 1.0).unwrap(), Convention::Calibrated);
        b.model = MarketModel::constant(z1(0.0), DMatrix::from_element(1, 1, 1.0), 0.5, 2.0).unwrap();
        let f = b.f_generator(0.5, &z1(0.0)).unwrap();
        assert_eq!(f.value, 0.0);
        assert_eq!(f.pi[0], 0.0);
    }

    #[test]
    fn box_generator() {
        let b = anchor(ConstraintSet::interval(0.0, 0.1).unwrap(), Convention::Calibrated);
        let f = b.f_generator(0.0, &z1(0.0)).unwrap();
        // sup over u in [0, 0.1] of u theta - u^2 is attained at the cap
        assert!((f.value - 0.01).abs() < 1e-15);
        assert!((f.pi[0] - 0.1).abs() < 1e-15);
        let grid = (0..=1000)
            .map(|i| 1e-4 * i as f64)
            .map(|u| b.f_objective(0.0, &z1(0.0), &z1(u), 0.0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((grid - f.value).abs() < 1e-12);

        // literal box: interior candidate 0.1 is worse than the projection 0
        let lit = anchor(ConstraintSet::interval(0.0, 0.1).unwrap(), Convention::LiteralPaper);
        let f = lit.f_generator(0.0, &z1(0.0)).unwrap();
        assert_eq!(f.pi[0], 0.0);
        assert_eq!(f.value, 0.0);
    }

    #[test]
    fn closed_form_needs_entropic_penalty() {
        let mut b = anchor(ConstraintSet::whole(1), Convention::Calibrated);
        b.penalty = PenaltySpec::new(PenaltyKind::Quadratic { w: 2.0 }, 1.0, 0.0).unwrap();
        assert!(matches!(b.f_entropic_closed_form(0.0, &z1(0.0)), Err(Error::ClosedFormInapplicable(_))));
    }

    #[test]
    fn duplicate_piece_is_invisible() {
        let base = anchor(ConstraintSet::interval(-0.3, 0.05).unwrap(), Convention::Calibrated);
        let dup = anchor(
            ConstraintSet::new(
                1,
                vec![
                    Primitive::Box { lo: vec![-0.3], hi: vec![0.05] },
                    Primitive::Box { lo: vec![-0.3], hi: vec![0.05] },
                ],
            )
            .unwrap(),
            Convention::Calibrated,
        );
        for &z in &[-0.5, 0.0, 0.17, 1.2] {
            assert_eq!(base.f_generator(0.3, &z1(z)).unwrap().value, dup.f_generator(0.3, &z1(z)).unwrap().value);
        }
    }

    proptest! {
        #[test]
        fn g_convex_and_bounded(a in -3.0..3.0f64, b in -3.0..3.0f64, t in 0.0..1.0f64) {
            let mut bundle = anchor(ConstraintSet::whole(1), Convention::Calibrated);
            bundle.weights.delta = PiecewiseConstant::new(vec![0.0, 0.5], vec![0.1, 0.4]).unwrap();
            let g = |x: f64| bundle.g_generator(t, &z1(x)).unwrap();
            prop_assert!(g(0.5 * (a + b)) <= 0.5 * (g(a) + g(b)) + 1e-12);
            let d = bundle.weights.cumulative_discount(t);
            let bound = (-d).exp() * ((d.exp() * a).powi(2) / (4.0 * bundle.penalty.kappa1) + bundle.penalty.kappa2);
            prop_assert!(g(a) <= bound + 1e-12);
        }

        #[test]
        fn literal_completion_identity(z in -3.0..3.0f64) {
            let b = anchor(ConstraintSet::whole(1), Convention::LiteralPaper);
            let theta = 0.2;
            let v = b.f_entropic_closed_form(0.0, &z1(z)).unwrap();
            prop_assert!((v + z * theta + theta * theta / 4.0).abs() < 1e-8);
        }

        #[test]
        fn calibrated_closed_form_agrees(z in -3.0..3.0f64, t in 0.0..1.0f64, lo in -1.0..0.5f64, len in 0.0..1.0f64) {
            for set in [ConstraintSet::whole(1), ConstraintSet::interval(lo, lo + len).unwrap()] {
                let b = anchor(set, Convention::Calibrated);
                let f = b.f_generator(t, &z1(z)).unwrap();
                let cf = b.f_entropic_closed_form(t, &z1(z)).unwrap();
                prop_assert!((f.value - cf).abs() < 1e-10 * (1.0 + cf.abs()));
                let raw = b.f_objective(t, &z1(z), &f.pi, f.c).unwrap();
                prop_assert!((raw - f.value).abs() < 1e-8);
            }
        }
    }
}
