//! Portfolio and consumption sets as finite unions of convex primitives,
//! projections onto their images under `sigma`, and the pointwise optimizers
//! of the value generator.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Whole,
    /// Coordinatewise `[lo, hi]`; bounds may be infinite.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{ x : normals[i] . x <= offsets[i] }`
    Polytope { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    dim: usize,
    pieces: Vec<Primitive>,
}

const FEAS_TOL: f64 = 1e-10;

impl ConstraintSet {
    pub fn new(dim: usize, pieces: Vec<Primitive>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidSet("constraint set needs at least one piece".into()));
        }
        for (i, p) in pieces.iter().enumerate() {
            validate_piece(dim, p).map_err(|msg| Error::InvalidSet(format!("piece {i}: {msg}")))?;
        }
        let set = Self { dim, pieces };
        // polytopes can be empty without any single bad field
        for (i, p) in set.pieces.iter().enumerate() {
            if let Primitive::Polytope { .. } = p {
                if minimize_quadratic(p, &DMatrix::identity(dim, dim), &DVector::zeros(dim)).is_none() {
                    return Err(Error::InvalidSet(format!("piece {i}: polytope is empty")));
                }
            }
        }
        Ok(set)
    }

    pub fn whole(dim: usize) -> Self {
        Self { dim, pieces: vec![Primitive::Whole] }
    }

    pub fn point(x: Vec<f64>) -> Self {
        Self { dim: x.len(), pieces: vec![Primitive::Point(x)] }
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(1, vec![Primitive::Box { lo: vec![lo], hi: vec![hi] }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[Primitive] {
        &self.pieces
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.distance_sq(x) <= FEAS_TOL * FEAS_TOL
    }

    /// Euclidean projection: `(nearest point, piece index)`.
    pub fn project(&self, x: &DVector<f64>) -> (DVector<f64>, usize) {
        let mut best: Option<(DVector<f64>, usize, f64)> = None;
        for (i, piece) in self.pieces.iter().enumerate() {
            let p = match piece {
                Primitive::Whole => x.clone(),
                Primitive::Point(c) => DVector::from_column_slice(c),
                Primitive::Box { lo, hi } => DVector::from_fn(self.dim, |j, _| x[j].clamp(lo[j], hi[j])),
                Primitive::Ball { center, radius } => {
                    let c = DVector::from_column_slice(center);
                    let v = x - &c;
                    let n = v.norm();
                    if n <= *radius {
                        x.clone()
                    } else {
                        c + v * (radius / n)
                    }
                }
                Primitive::Polytope { .. } => {
                    let q = DMatrix::identity(self.dim, self.dim);
                    match minimize_quadratic(piece, &q, x) {
                        Some(p) => p,
                        None => continue,
                    }
                }
            };
            let s = (&p - x).norm_squared();
            if best.as_ref().is_none_or(|(_, _, bs)| s < *bs) {
                best = Some((p, i, s));
            }
        }
        let (p, i, _) = best.expect("validated pieces are nonempty");
        (p, i)
    }

    pub fn distance_sq(&self, x: &DVector<f64>) -> f64 {
        let (p, _) = self.project(x);
        (p - x).norm_squared()
    }

    fn best_piece(
        &self,
        q: &DMatrix<f64>,
        b: &DVector<f64>,
        score: impl Fn(&DVector<f64>) -> f64,
    ) -> (DVector<f64>, usize, f64) {
        let mut best: Option<(DVector<f64>, usize, f64)> = None;
        for (i, piece) in self.pieces.iter().enumerate() {
            if let Some(p) = minimize_quadratic(piece, q, b) {
                let s = score(&p);
                if best.as_ref().is_none_or(|(_, _, bs)| s < *bs) {
                    best = Some((p, i, s));
                }
            }
        }
        best.expect("validated pieces are nonempty")
    }

    /// One-dimensional pieces as closed intervals.
    fn intervals(&self) -> Vec<(f64, f64)> {
        self.pieces
            .iter()
            .map(|p| match p {
                Primitive::Whole => (f64::NEG_INFINITY, f64::INFINITY),
                Primitive::Box { lo, hi } => (lo[0], hi[0]),
                Primitive::Ball { center, radius } => (center[0] - radius, center[0] + radius),
                Primitive::Point(x) => (x[0], x[0]),
                Primitive::Polytope { normals, offsets } => {
                    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                    for (a, b) in normals.iter().zip(offsets) {
                        let a = a[0];
                        if a > 0.0 {
                            hi = hi.min(b / a);
                        } else if a < 0.0 {
                            lo = lo.max(b / a);
                        }
                    }
                    (lo, hi)
                }
            })
            .collect()
    }
}

fn validate_piece(dim: usize, p: &Primitive) -> std::result::Result<(), String> {
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    match p {
        Primitive::Whole => Ok(()),
        Primitive::Box { lo, hi } => {
            if lo.len() != dim || hi.len() != dim {
                return Err(format!("box bounds must have dimension {dim}"));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || *l == f64::INFINITY || *h == f64::NEG_INFINITY) {
                return Err("box needs lo <= hi in every coordinate".into());
            }
            Ok(())
        }
        Primitive::Ball { center, radius } => {
            if center.len() != dim || !finite(center) {
                return Err(format!("ball center must be finite with dimension {dim}"));
            }
            if !(*radius >= 0.0) || !radius.is_finite() {
                return Err("ball radius must be finite and >= 0".into());
            }
            Ok(())
        }
        Primitive::Polytope { normals, offsets } => {
            if normals.len() != offsets.len() || normals.is_empty() {
                return Err("polytope needs matching nonempty normals/offsets".into());
            }
            if normals.iter().any(|a| a.len() != dim || !finite(a)) || !finite(offsets) {
                return Err(format!("polytope normals must be finite with dimension {dim}"));
            }
            Ok(())
        }
        Primitive::Point(x) => {
            if x.len() != dim || !finite(x) {
                return Err(format!("point must be finite with dimension {dim}"));
            }
            Ok(())
        }
    }
}

fn halfspaces(piece: &Primitive) -> Vec<(DVector<f64>, f64)> {
    match piece {
        Primitive::Box { lo, hi } => {
            let d = lo.len();
            let mut out = Vec::new();
            for i in 0..d {
                if hi[i].is_finite() {
                    let mut a = DVector::zeros(d);
                    a[i] = 1.0;
                    out.push((a, hi[i]));
                }
                if lo[i].is_finite() {
                    let mut a = DVector::zeros(d);
                    a[i] = -1.0;
                    out.push((a, -lo[i]));
                }
            }
            out
        }
        Primitive::Polytope { normals, offsets } => normals
            .iter()
            .zip(offsets)
            .map(|(a, b)| (DVector::from_column_slice(a), *b))
            .collect(),
        _ => Vec::new(),
    }
}

/// `argmin_{x in piece} 1/2 x'Qx - b'x` for symmetric positive definite `Q`.
/// `None` only for an empty polytope.
fn minimize_quadratic(piece: &Primitive, q: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let objective = |x: &DVector<f64>| 0.5 * x.dot(&(q * x)) - b.dot(x);
    match piece {
        Primitive::Whole => q.clone().cholesky().map(|c| c.solve(b)),
        Primitive::Point(x) => Some(DVector::from_column_slice(x)),
        Primitive::Ball { center, radius } => Some(ball_qp(q, b, &DVector::from_column_slice(center), *radius)),
        Primitive::Box { .. } | Primitive::Polytope { .. } => {
            let cons = halfspaces(piece);
            let d = b.len();
            let scale = 1.0 + b.amax();
            let feasible = |x: &DVector<f64>| {
                cons.iter()
                    .all(|(a, off)| a.dot(x) <= off + FEAS_TOL * (1.0 + off.abs()).max(scale * 1e-6))
            };
            let mut best: Option<(DVector<f64>, f64)> = None;
            for subset in subsets_up_to(cons.len(), d) {
                let Some(x) = kkt_solve(q, b, &cons, &subset) else { continue };
                if !feasible(&x) {
                    continue;
                }
                let v = objective(&x);
                if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                    best = Some((x, v));
                }
            }
            best.map(|(x, _)| x)
        }
    }
}

fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k.min(n) {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l: &usize| l + 1);
            for j in start..n {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn kkt_solve(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    cons: &[(DVector<f64>, f64)],
    active: &[usize],
) -> Option<DVector<f64>> {
    let d = b.len();
    let s = active.len();
    if s == 0 {
        return q.clone().cholesky().map(|c| c.solve(b));
    }
    let mut k = DMatrix::zeros(d + s, d + s);
    let mut rhs = DVector::zeros(d + s);
    k.view_mut((0, 0), (d, d)).copy_from(q);
    rhs.rows_mut(0, d).copy_from(b);
    for (j, &ci) in active.iter().enumerate() {
        let (a, off) = &cons[ci];
        for i in 0..d {
            k[(i, d + j)] = a[i];
            k[(d + j, i)] = a[i];
        }
        rhs[d + j] = *off;
    }
    let lu = k.lu();
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(sol.rows(0, d).into_owned())
}

/// Minimize `1/2 x'Qx - b'x` over `|x - c| <= r` via the secular equation
/// `|(Q + mu I)^{-1}(b - Qc)| = r` in the eigenbasis of `Q`.
fn ball_qp(q: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, r: f64) -> DVector<f64> {
    if r == 0.0 {
        return c.clone();
    }
    let eig = SymmetricEigen::new(q.clone());
    let w = eig.eigenvectors.tr_mul(&(b - q * c));
    let lam = &eig.eigenvalues;
    let norm_at = |mu: f64| -> f64 {
        w.iter().zip(lam.iter()).map(|(wi, li)| (wi / (li + mu)).powi(2)).sum::<f64>().sqrt()
    };
    let v_at = |mu: f64| -> DVector<f64> {
        let coeffs = DVector::from_iterator(w.len(), w.iter().zip(lam.iter()).map(|(wi, li)| wi / (li + mu)));
        &eig.eigenvectors * coeffs
    };
    if norm_at(0.0) <= r {
        return c + v_at(0.0);
    }
    let (mut lo, mut hi) = (0.0, w.norm() / r);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    let v = v_at(hi);
    // land exactly on the sphere
    let n = v.norm();
    c + if n > 0.0 { v * (r / n) } else { v }
}

/// The image `sigma A = { sigma^T pi : pi in A }` in R^m.
#[derive(Debug, Clone)]
pub struct ImageSet<'a> {
    pub base: &'a ConstraintSet,
    pub sigma: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjection {
    pub point: DVector<f64>,
    pub pi: DVector<f64>,
    pub piece: usize,
    pub distance_sq: f64,
}

impl<'a> ImageSet<'a> {
    pub fn new(base: &'a ConstraintSet, sigma: &'a DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), actual: sigma.nrows() });
        }
        Ok(Self { base, sigma })
    }

    /// Nearest image point, minimizing in pi-space with the pullback metric `sigma sigma^T`.
    pub fn project(&self, p: &DVector<f64>) -> Result<ImageProjection> {
        if p.len() != self.sigma.ncols() {
            return Err(Error::DimensionMismatch { expected: self.sigma.ncols(), actual: p.len() });
        }
        let q = self.sigma * self.sigma.transpose();
        let b = self.sigma * p;
        let (pi, piece, d2) = self
            .base
            .best_piece(&q, &b, |pi| (self.sigma.tr_mul(pi) - p).norm_squared());
        Ok(ImageProjection { point: self.sigma.tr_mul(&pi), pi, piece, distance_sq: d2 })
    }

    pub fn distance_sq(&self, p: &DVector<f64>) -> Result<f64> {
        Ok(self.project(p)?.distance_sq)
    }
}

/// `(c*, sup_c alpha ln c - ah c)` over the pieces of a one-dimensional set,
/// `ah = alpha_bar h(t) > 0`. With `alpha = 0` the cheapest feasible `c >= 0` wins.
pub fn argmax_consumption(cset: &ConstraintSet, alpha: f64, ah: f64) -> Result<(f64, f64)> {
    if cset.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, actual: cset.dim() });
    }
    let c_hat = if alpha > 0.0 { alpha / ah } else { 0.0 };
    let mut best: Option<(f64, f64)> = None;
    for (lo, hi) in cset.intervals() {
        let lo = lo.max(0.0);
        let c = if alpha > 0.0 {
            if hi <= 0.0 {
                continue;
            }
            c_hat.max(lo).min(hi)
        } else {
            if hi < lo {
                continue;
            }
            lo
        };
        let value = if alpha > 0.0 { alpha * c.ln() - ah * c } else { -ah * c };
        if best.is_none_or(|(_, bv)| value > bv) {
            best = Some((c, value));
        }
    }
    best.ok_or(Error::InfeasibleConsumption)
}

/// Convex function on R^m, optionally recognised as `q |z|^2`.
pub trait ConvexFunction: Sync {
    fn eval(&self, z: &[f64]) -> f64;

    fn quadratic_coefficient(&self) -> Option<f64> {
        None
    }
}

/// `phi(pi) = scale_b g(scale_a (z + u)) + <u, linear> + quadratic |u|^2` with `u = sigma^T pi`.
pub struct PortfolioObjective<'a> {
    pub g: &'a dyn ConvexFunction,
    pub scale_a: f64,
    pub scale_b: f64,
    pub linear: DVector<f64>,
    pub quadratic: f64,
}

impl PortfolioObjective<'_> {
    pub fn evaluate_exposure(&self, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let arg: Vec<f64> = z.iter().zip(u.iter()).map(|(zi, ui)| self.scale_a * (zi + ui)).collect();
        let gv = self.g.eval(&arg);
        if gv == f64::INFINITY {
            return f64::INFINITY;
        }
        self.scale_b * gv + u.dot(&self.linear) + self.quadratic * u.norm_squared()
    }
}

/// Minimize the portfolio objective over `A`; returns `(pi*, value)`.
pub fn argmin_portfolio(
    aset: &ConstraintSet,
    sigma: &DMatrix<f64>,
    objective: &PortfolioObjective<'_>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let image = ImageSet::new(aset, sigma)?;
    if z.len() != sigma.ncols() || objective.linear.len() != sigma.ncols() {
        return Err(Error::DimensionMismatch { expected: sigma.ncols(), actual: z.len() });
    }
    let phi = |pi: &DVector<f64>| objective.evaluate_exposure(z, &sigma.tr_mul(pi));

    if let Some(q) = objective.g.quadratic_coefficient() {
        let a2 = objective.scale_a * objective.scale_a;
        let kappa = objective.scale_b * q * a2 + objective.quadratic;
        if kappa > 0.0 {
            let target = -(z * (2.0 * objective.scale_b * q * a2) + &objective.linear) / (2.0 * kappa);
            let proj = image.project(&target)?;
            let v = phi(&proj.pi);
            return Ok((proj.pi, v));
        }
    }

    let mut best: Option<(DVector<f64>, f64)> = None;
    for (i, piece) in aset.pieces().iter().enumerate() {
        let single = ConstraintSet { dim: aset.dim(), pieces: vec![piece.clone()] };
        let (pi, v) = descend_piece(&single, sigma, &phi, z, i);
        if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((pi, v));
        }
    }
    let (pi, v) = best.ok_or(Error::InfeasiblePortfolio)?;
    Ok((pi, v))
}

/// Projected gradient descent with finite differences and Armijo backtracking,
/// started from the image projection of `-z` onto the piece.
fn descend_piece(
    piece: &ConstraintSet,
    sigma: &DMatrix<f64>,
    phi: &dyn Fn(&DVector<f64>) -> f64,
    z: &DVector<f64>,
    index: usize,
) -> (DVector<f64>, f64) {
    let image = ImageSet { base: piece, sigma };
    let start = image.project(&-z).expect("dimensions checked").pi;
    if let Primitive::Point(_) = piece.pieces[0] {
        let v = phi(&start);
        return (start, v);
    }
    let mut x = start;
    let mut fx = phi(&x);
    if !fx.is_finite() {
        let (p0, _) = piece.project(&DVector::zeros(piece.dim()));
        let f0 = phi(&p0);
        if f0 < fx {
            x = p0;
            fx = f0;
        }
    }
    if !fx.is_finite() {
        return (x, fx);
    }
    let d = x.len();
    let mut step = 1.0;
    let max_iter = 10_000;
    for iter in 0..max_iter {
        let h = 1e-7 * (1.0 + x.amax());
        let grad = DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let (fp, fm) = (phi(&xp), phi(&xm));
                match (fp.is_finite(), fm.is_finite()) {
                    (true, true) => (fp - fm) / (2.0 * h),
                    (true, false) => (fp - fx) / h,
                    (false, true) => (fx - fm) / h,
                    _ => 0.0,
                }
            }),
        );
        let mut accepted = false;
        let mut moved = 0.0;
        while step > 1e-16 {
            let (cand, _) = piece.project(&(&x - &grad * step));
            let fc = phi(&cand);
            let decrease = (&x - &cand).norm_squared() / (2.0 * step);
            if fc.is_finite() && fc <= fx - 1e-4 * decrease {
                moved = (&cand - &x).norm();
                accepted = fc < fx;
                x = cand;
                fx = fc;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted || moved / step.max(1e-300) <= 1e-10 || moved <= 1e-14 {
            break;
        }
        if iter + 1 == max_iter {
            warn!("portfolio descent on piece {index} hit the iteration cap");
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn one() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    struct HalfSq;
    impl ConvexFunction for HalfSq {
        fn eval(&self, z: &[f64]) -> f64 {
            0.5 * z.iter().map(|x| x * x).sum::<f64>()
        }
        fn quadratic_coefficient(&self) -> Option<f64> {
            Some(0.5)
        }
    }

    /// Same function without the fast-path hint.
    struct HalfSqOpaque;
    impl ConvexFunction for HalfSqOpaque {
        fn eval(&self, z: &[f64]) -> f64 {
            0.5 * z.iter().map(|x| x * x).sum::<f64>()
        }
    }

    #[test]
    fn distance_examples() {
        let s = one();
        let whole = ConstraintSet::whole(1);
        assert_eq!(ImageSet::new(&whole, &s).unwrap().distance_sq(&v(&[3.0])).unwrap(), 0.0);

        let sig = DMatrix::from_row_slice(1, 2, &[0.3, 0.4]);
        let zero = ConstraintSet::point(vec![0.0]);
        let d = ImageSet::new(&zero, &sig).unwrap().distance_sq(&v(&[1.0, -2.0])).unwrap();
        assert_eq!(d, 5.0);

        let bx = ConstraintSet::interval(0.0, 0.1).unwrap();
        let d = ImageSet::new(&bx, &s).unwrap().distance_sq(&v(&[0.5])).unwrap();
        assert!((d - 0.16).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let s = one();
        let bx = ConstraintSet::interval(0.0, 0.1).unwrap();
        let img = ImageSet::new(&bx, &s).unwrap();
        assert_eq!(img.project(&v(&[0.05])).unwrap().point[0], 0.05);
        assert!((img.project(&v(&[0.5])).unwrap().point[0] - 0.1).abs() < 1e-15);

        let union = ConstraintSet::new(
            1,
            vec![
                Primitive::Box { lo: vec![-1.0], hi: vec![0.0] },
                Primitive::Box { lo: vec![0.2], hi: vec![0.3] },
            ],
        )
        .unwrap();
        let p = ImageSet::new(&union, &s).unwrap().project(&v(&[0.12])).unwrap();
        assert!((p.point[0] - 0.2).abs() < 1e-15);
        assert_eq!(p.piece, 1);
        assert!((p.distance_sq - 0.0064).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_piece() {
        let set = ConstraintSet::new(
            1,
            vec![Primitive::Point(vec![1.0]), Primitive::Point(vec![-1.0])],
        )
        .unwrap();
        assert_eq!(set.project(&v(&[0.0])).1, 0);
    }

    #[test]
    fn ball_image_is_an_ellipse() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let ball = ConstraintSet::new(2, vec![Primitive::Ball { center: vec![0.0, 0.0], radius: 1.0 }]).unwrap();
        let img = ImageSet::new(&ball, &sigma).unwrap();
        // along the long axis the ellipse reaches 2
        let p = img.project(&v(&[3.0, 0.0])).unwrap();
        assert!((p.point[0] - 2.0).abs() < 1e-12 && p.point[1].abs() < 1e-12);
        let p = img.project(&v(&[0.0, 3.0])).unwrap();
        assert!((p.point[1] - 0.5).abs() < 1e-12);
        assert!(img.distance_sq(&v(&[1.0, 0.2])).unwrap() == 0.0);
    }

    #[test]
    fn empty_polytope_rejected() {
        let err = ConstraintSet::new(
            1,
            vec![Primitive::Polytope { normals: vec![vec![1.0], vec![-1.0]], offsets: vec![0.0, -1.0] }],
        );
        assert!(matches!(err, Err(Error::InvalidSet(_))));
        assert!(matches!(ConstraintSet::new(1, vec![]), Err(Error::InvalidSet(_))));
    }

    #[test]
    fn consumption_examples() {
        let pos = ConstraintSet::interval(0.0, f64::INFINITY).unwrap();
        let (c, val) = argmax_consumption(&pos, 1.0, 2.0).unwrap();
        assert_eq!(c, 0.5);
        assert!((val - (0.5f64.ln() - 1.0)).abs() < 1e-15);

        let (c, val) = argmax_consumption(&ConstraintSet::interval(1.0, 2.0).unwrap(), 1.0, 2.0).unwrap();
        assert_eq!((c, val), (1.0, -2.0));

        let (c, val) = argmax_consumption(&ConstraintSet::interval(0.1, 1.0).unwrap(), 0.0, 3.0).unwrap();
        assert_eq!(c, 0.1);
        assert!((val + 0.3).abs() < 1e-15);

        let neg = ConstraintSet::interval(-2.0, -1.0).unwrap();
        assert_eq!(argmax_consumption(&neg, 1.0, 1.0), Err(Error::InfeasibleConsumption));
    }

    #[test]
    fn portfolio_unconstrained_entropic() {
        // literal layout: g = 1/2|.|^2 at beta = 1, scale_a = scale_b = 1, linear = theta
        let s = one();
        let whole = ConstraintSet::whole(1);
        let obj = PortfolioObjective { g: &HalfSq, scale_a: 1.0, scale_b: 1.0, linear: v(&[0.2]), quadratic: 0.0 };
        let z = v(&[0.3]);
        let (pi, val) = argmin_portfolio(&whole, &s, &obj, &z).unwrap();
        assert!((pi[0] - (-0.3 - 0.2)).abs() < 1e-14);
        assert!((val - (-0.3 * 0.2 - 0.5 * 0.04)).abs() < 1e-14);
    }

    #[test]
    fn portfolio_singleton() {
        let s = one();
        let zero = ConstraintSet::point(vec![0.0]);
        let obj = PortfolioObjective { g: &HalfSqOpaque, scale_a: 2.0, scale_b: 0.5, linear: v(&[0.2]), quadratic: 0.0 };
        let (pi, val) = argmin_portfolio(&zero, &s, &obj, &v(&[0.3])).unwrap();
        assert_eq!(pi[0], 0.0);
        assert!((val - 0.5 * 0.5 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn portfolio_box_boundary() {
        // phi(pi) = pi^2 + 0.2 pi on [0, 0.1]: minimum at 0
        struct Sq;
        impl ConvexFunction for Sq {
            fn eval(&self, z: &[f64]) -> f64 {
                z[0] * z[0]
            }
            fn quadratic_coefficient(&self) -> Option<f64> {
                Some(1.0)
            }
        }
        let s = one();
        let bx = ConstraintSet::interval(0.0, 0.1).unwrap();
        let obj = PortfolioObjective { g: &Sq, scale_a: 1.0, scale_b: 1.0, linear: v(&[0.2]), quadratic: 0.0 };
        let (pi, val) = argmin_portfolio(&bx, &s, &obj, &v(&[0.0])).unwrap();
        assert_eq!(pi[0], 0.0);
        assert_eq!(val, 0.0);
    }

    #[test]
    fn descent_matches_fast_path() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.8]);
        let set = ConstraintSet::new(
            2,
            vec![
                Primitive::Box { lo: vec![-0.2, 0.0], hi: vec![0.3, 0.5] },
                Primitive::Ball { center: vec![1.0, 1.0], radius: 0.3 },
            ],
        )
        .unwrap();
        let z = v(&[0.4, -0.7]);
        let mk = |g: &'static dyn ConvexFunction| PortfolioObjective {
            g,
            scale_a: -1.3,
            scale_b: 0.7,
            linear: v(&[-0.2, 0.1]),
            quadratic: 0.5,
        };
        let (_, fast) = argmin_portfolio(&set, &sigma, &mk(&HalfSq), &z).unwrap();
        let (_, slow) = argmin_portfolio(&set, &sigma, &mk(&HalfSqOpaque), &z).unwrap();
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    proptest! {
        #[test]
        fn distance_root_is_lipschitz(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -2.0..2.0f64) {
            let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.7]);
            let set = ConstraintSet::new(2, vec![
                Primitive::Box { lo: vec![0.0, -0.5], hi: vec![0.4, 0.5] },
                Primitive::Polytope { normals: vec![vec![1.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]], offsets: vec![-1.0, 2.0, 2.0] },
            ]).unwrap();
            let img = ImageSet::new(&set, &sigma).unwrap();
            let (p, q) = (v(&[a, b]), v(&[c, d]));
            let dp = img.distance_sq(&p).unwrap().sqrt();
            let dq = img.distance_sq(&q).unwrap().sqrt();
            prop_assert!((dp - dq).abs() <= (p - q).norm() + 1e-9);
        }

        #[test]
        fn projection_idempotent(a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
            let set = ConstraintSet::new(2, vec![
                Primitive::Ball { center: vec![0.5, 0.0], radius: 0.7 },
                Primitive::Box { lo: vec![-2.0, -2.0], hi: vec![-1.5, 1.0] },
            ]).unwrap();
            let img = ImageSet::new(&set, &sigma).unwrap();
            let once = img.project(&v(&[a, b])).unwrap().point;
            let twice = img.project(&once).unwrap().point;
            prop_assert!((once - twice).norm() < 1e-9);
        }

        #[test]
        fn consumption_beats_grid(lo in 0.01..1.0f64, len in 0.0..2.0f64, alpha in 0.0..2.0f64, ah in 0.1..3.0f64) {
            let set = ConstraintSet::interval(lo, lo + len).unwrap();
            let (_, val) = argmax_consumption(&set, alpha, ah).unwrap();
            let grid = (0..=2000).map(|i| lo + len * i as f64 / 2000.0)
                .map(|c| if alpha > 0.0 { alpha * c.ln() - ah * c } else { -ah * c })
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(val >= grid - 1e-12);
            prop_assert!(val - grid <= 1e-8 + ah * len * len / 2000.0);
        }

        #[test]
        fn portfolio_matches_grid(z1 in -1.0..1.0f64, z2 in -1.0..1.0f64, t1 in -0.5..0.5f64, t2 in -0.5..0.5f64) {
            let sigma = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.6]);
            let set = ConstraintSet::new(2, vec![
                Primitive::Box { lo: vec![0.0, 0.0], hi: vec![0.5, 0.5] },
                Primitive::Point(vec![-0.3, 0.2]),
            ]).unwrap();
            let obj = PortfolioObjective { g: &HalfSq, scale_a: -1.0, scale_b: 1.0, linear: v(&[-t1, -t2]), quadratic: 0.5 };
            let z = v(&[z1, z2]);
            let (_, val) = argmin_portfolio(&set, &sigma, &obj, &z).unwrap();
            let eval = |a: f64, b: f64| obj.evaluate_exposure(&z, &sigma.tr_mul(&v(&[a, b])));
            // coarse grid, then a fine grid around the coarse winner
            let (mut ba, mut bb, mut grid) = (0.0, 0.0, f64::INFINITY);
            for i in 0..=50 {
                for j in 0..=50 {
                    let (a, b) = (0.01 * i as f64, 0.01 * j as f64);
                    let f = eval(a, b);
                    if f < grid { (ba, bb, grid) = (a, b, f); }
                }
            }
            for i in -100..=100 {
                for j in -100..=100 {
                    let a = (ba + 1e-4 * i as f64).clamp(0.0, 0.5);
                    let b = (bb + 1e-4 * j as f64).clamp(0.0, 0.5);
                    grid = grid.min(eval(a, b));
                }
            }
            grid = grid.min(eval(-0.3, 0.2));
            prop_assert!(val <= grid + 1e-12);
            prop_assert!(grid - val <= 1e-6);
        }
    }
}
