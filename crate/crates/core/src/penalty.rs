//! Convex penalty integrands `h`, their growth constants and the
//! Legendre-Fenchel conjugate `h*(y) = sup_x (<y, x> - h(x))`.
//!
//! Every supported kind is radial, `h(x) = phi(|x|)`, but the numeric
//! conjugate only uses pointwise evaluations of `h`.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::golden_max;

/// Radial table `phi(r_i) = v_i`, linear in between, `+inf` beyond the last radius.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialTable {
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl RadialTable {
    /// Build from raw samples. Slopes are repaired to be nondecreasing by
    /// pool-adjacent-violators (weighted by interval length) and then clamped
    /// at zero, which makes `x -> phi(|x|)` convex, nonnegative and zero at 0.
    pub fn new(radii: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if radii.len() < 2 || radii.len() != values.len() {
            return Err(Error::InvalidPenalty(
                "tabulated penalty needs at least two (radius, value) rows".into(),
            ));
        }
        if radii[0] != 0.0 || values[0] != 0.0 {
            return Err(Error::InvalidPenalty("tabulated penalty must start at radius 0 with value 0".into()));
        }
        if radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidPenalty("tabulated radii must be strictly increasing".into()));
        }
        if radii.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPenalty("tabulated penalty has non-finite entries".into()));
        }
        let lengths: Vec<f64> = radii.windows(2).map(|w| w[1] - w[0]).collect();
        let slopes: Vec<f64> = values
            .windows(2)
            .zip(&lengths)
            .map(|(v, l)| (v[1] - v[0]) / l)
            .collect();
        let slopes = pava_nondecreasing(&slopes, &lengths);
        let mut repaired = Vec::with_capacity(values.len());
        repaired.push(0.0);
        let mut acc = 0.0;
        for (s, l) in slopes.iter().zip(&lengths) {
            acc += s.max(0.0) * l;
            repaired.push(acc);
        }
        Ok(Self { radii, values: repaired })
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut radii = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidPenalty(format!("csv: {e}")))?;
            if rec.len() != 2 {
                return Err(Error::InvalidPenalty(format!("csv row {}: expected 2 columns", i + 1)));
            }
            let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
            match parsed {
                (Ok(r), Ok(v)) => {
                    radii.push(r);
                    values.push(v);
                }
                // a non-numeric first row is a header
                _ if i == 0 => continue,
                _ => return Err(Error::InvalidPenalty(format!("csv row {}: not numeric", i + 1))),
            }
        }
        Self::new(radii, values)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_radius(&self) -> f64 {
        *self.radii.last().expect("nonempty table")
    }

    pub fn phi(&self, r: f64) -> f64 {
        if r > self.max_radius() {
            return f64::INFINITY;
        }
        let i = self.radii.partition_point(|&x| x <= r).saturating_sub(1).min(self.radii.len() - 2);
        let (r0, r1) = (self.radii[i], self.radii[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        v0 + (v1 - v0) * (r - r0) / (r1 - r0)
    }

    /// Exact conjugate of the radial piecewise-linear function: the sup of a
    /// linear minus a piecewise-linear function is attained at a knot.
    pub fn exact_conjugate_norm(&self, ynorm: f64) -> f64 {
        self.radii
            .iter()
            .zip(&self.values)
            .map(|(r, v)| ynorm * r - v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn pava_nondecreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi, wi, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].0 <= blocks[n - 1].0 {
                break;
            }
            let (m2, w2, c2) = blocks.pop().unwrap();
            let (m1, w1, c1) = blocks.pop().unwrap();
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
        }
    }
    blocks.into_iter().flat_map(|(m, _, c)| std::iter::repeat(m).take(c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyKind {
    /// `h(x) = w |x|^2 / 2`
    Quadratic { w: f64 },
    /// `h(x) = |x|`
    Norm,
    Tabulated(RadialTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub kappa1: f64,
    pub kappa2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub ok: bool,
    /// Largest `k1` with `h >= k1 |x|^2 - kappa2` on the grid.
    pub kappa1_observed: f64,
    /// Smallest `k2` with `h >= kappa1 |x|^2 - k2` on the grid.
    pub kappa2_observed: f64,
    pub worst_radius: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, kappa1: f64, kappa2: f64) -> Result<Self> {
        if !(kappa1 >= 0.0 && kappa2 >= 0.0) || !kappa1.is_finite() || !kappa2.is_finite() {
            return Err(Error::InvalidPenalty(format!(
                "growth constants must be finite and >= 0, got kappa1 = {kappa1}, kappa2 = {kappa2}"
            )));
        }
        if let PenaltyKind::Quadratic { w } = kind {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidPenalty(format!("quadratic weight must be > 0, got {w}")));
            }
        }
        Ok(Self { kind, kappa1, kappa2 })
    }

    /// Entropic penalty `|x|^2 / 2` with its exact growth constants.
    pub fn entropic() -> Self {
        Self { kind: PenaltyKind::Quadratic { w: 1.0 }, kappa1: 0.5, kappa2: 0.0 }
    }

    pub fn is_entropic(&self) -> bool {
        matches!(self.kind, PenaltyKind::Quadratic { w } if w == 1.0)
    }

    pub fn effective_domain_radius(&self) -> f64 {
        match &self.kind {
            PenaltyKind::Tabulated(t) => t.max_radius(),
            _ => f64::INFINITY,
        }
    }

    pub fn phi(&self, r: f64) -> f64 {
        match &self.kind {
            PenaltyKind::Quadratic { w } => 0.5 * w * r * r,
            PenaltyKind::Norm => r,
            PenaltyKind::Tabulated(t) => t.phi(r),
        }
    }

    pub fn evaluate(&self, eta: &[f64]) -> f64 {
        match self.kind {
            PenaltyKind::Quadratic { w } => 0.5 * w * eta.iter().map(|x| x * x).sum::<f64>(),
            _ => self.phi(norm(eta)),
        }
    }

    /// `h*(y)` in closed form. A radial piecewise-linear table attains the
    /// supremum at a knot, so its conjugate is a max over knots.
    pub fn conjugate(&self, y: &[f64]) -> Result<f64> {
        match &self.kind {
            PenaltyKind::Quadratic { w } => Ok(y.iter().map(|v| v * v).sum::<f64>() / (2.0 * w)),
            PenaltyKind::Norm => Ok(if norm(y) <= 1.0 { 0.0 } else { f64::INFINITY }),
            PenaltyKind::Tabulated(t) => Ok(t.exact_conjugate_norm(norm(y))),
        }
    }

    /// Radius containing every maximizer of `<y, x> - h(x)`: from
    /// `<y, x> - h(x) >= -h(0) = 0` and `h >= k1 |x|^2 - k2`.
    pub fn search_radius(&self, ynorm: f64) -> Result<f64> {
        let domain = self.effective_domain_radius();
        if self.kappa1 > 0.0 {
            let k1 = self.kappa1;
            let r = (ynorm + (ynorm * ynorm + 4.0 * k1 * self.kappa2).sqrt()) / (2.0 * k1);
            Ok(r.min(domain))
        } else if domain.is_finite() {
            Ok(domain)
        } else {
            Err(Error::UnboundedConjugate)
        }
    }

    /// Numeric `sup_x (<y, x> - h(x))` over the ball given by [`Self::search_radius`].
    /// Golden section per ray for `m <= 2`, projected gradient ascent for `m >= 3`.
    pub fn numeric_conjugate(&self, y: &[f64]) -> Result<f64> {
        let m = y.len();
        let ynorm = norm(y);
        let radius = self.search_radius(ynorm)?;
        let ray = |dir: &[f64]| -> f64 {
            let slope: f64 = dir.iter().zip(y).map(|(d, v)| d * v).sum();
            if slope <= 0.0 {
                // h >= 0 = h(0): the origin is optimal on this ray
                return 0.0;
            }
            let (_, best) = golden_max(
                |r| {
                    let x: Vec<f64> = dir.iter().map(|d| d * r).collect();
                    slope * r - self.evaluate(&x)
                },
                0.0,
                radius,
                1e-12 * radius.max(1.0),
            );
            best.max(0.0)
        };
        let value = match m {
            0 => 0.0,
            1 => ray(&[1.0]).max(ray(&[-1.0])),
            2 => {
                let by_angle = |a: f64| ray(&[a.cos(), a.sin()]);
                let n = 64;
                let step = std::f64::consts::TAU / n as f64;
                let (imax, vmax) = (0..n)
                    .map(|i| (i, by_angle(i as f64 * step)))
                    .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
                let center = imax as f64 * step;
                let (_, refined) = golden_max(by_angle, center - step, center + step, 1e-12);
                vmax.max(refined)
            }
            _ => self.projected_ascent(y, radius, &ray),
        };
        Ok(value)
    }

    fn projected_ascent(&self, y: &[f64], radius: f64, ray: &dyn Fn(&[f64]) -> f64) -> f64 {
        let m = y.len();
        let ynorm = norm(y);
        if ynorm == 0.0 {
            return 0.0;
        }
        let objective = |x: &[f64]| -> f64 {
            let v = self.evaluate(x);
            x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() - v
        };
        let project = |x: &mut [f64]| {
            let n = norm(x);
            if n > radius {
                x.iter_mut().for_each(|v| *v *= radius / n);
            }
        };
        // start at the ray maximizer along y
        let dir: Vec<f64> = y.iter().map(|v| v / ynorm).collect();
        let (r0, _) = golden_max(
            |r| {
                let x: Vec<f64> = dir.iter().map(|d| d * r).collect();
                objective(&x)
            },
            0.0,
            radius,
            1e-12 * radius.max(1.0),
        );
        let mut x: Vec<f64> = dir.iter().map(|d| d * r0).collect();
        let mut fx = objective(&x);
        let mut step = radius.max(1.0) * 0.1;
        let fd = 1e-7 * radius.max(1.0);
        for _ in 0..2000 {
            let grad: Vec<f64> = (0..m)
                .map(|i| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += fd;
                    xm[i] -= fd;
                    let (fp, fmn) = (objective(&xp), objective(&xm));
                    if fp.is_finite() && fmn.is_finite() {
                        (fp - fmn) / (2.0 * fd)
                    } else if fmn.is_finite() {
                        (fx - fmn) / fd
                    } else {
                        (fp - fx) / fd
                    }
                })
                .collect();
            let mut improved = false;
            while step > 1e-14 {
                let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
                project(&mut cand);
                let fc = objective(&cand);
                if fc > fx + 1e-16 {
                    x = cand;
                    fx = fc;
                    improved = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        fx.max(ray(&dir)).max(0.0)
    }

    /// Growth check on a deterministic radial grid up to `max(5, domain)`.
    pub fn check_growth(&self, dim: usize) -> GrowthReport {
        let domain = self.effective_domain_radius();
        let max_r = if domain.is_finite() { domain.max(5.0) } else { 5.0 };
        self.check_growth_on(dim, max_r, 500)
    }

    pub fn check_growth_on(&self, dim: usize, max_radius: f64, steps: usize) -> GrowthReport {
        let dirs = grid_directions(dim.max(1));
        let mut ok = true;
        let mut k1_obs = f64::INFINITY;
        let mut k2_obs: f64 = 0.0;
        let mut worst_radius = 0.0;
        let mut worst_margin = f64::INFINITY;
        for j in 0..=steps {
            let r = max_radius * j as f64 / steps as f64;
            for d in &dirs {
                let x: Vec<f64> = d.iter().map(|v| v * r).collect();
                let h = self.evaluate(&x);
                let margin = h - (self.kappa1 * r * r - self.kappa2);
                if margin < worst_margin {
                    worst_margin = margin;
                    worst_radius = r;
                }
                if margin < -1e-12 * (1.0 + h.abs()) {
                    ok = false;
                }
                if r > 0.0 {
                    k1_obs = k1_obs.min((h + self.kappa2) / (r * r));
                }
                k2_obs = k2_obs.max(self.kappa1 * r * r - h);
            }
        }
        GrowthReport { ok, kappa1_observed: k1_obs, kappa2_observed: k2_obs, worst_radius }
    }
}

/// Unit directions: coordinate axes both ways plus a few diagonals.
fn grid_directions(dim: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; dim];
            d[i] = s;
            dirs.push(d);
        }
    }
    if dim >= 2 {
        let v = 1.0 / (dim as f64).sqrt();
        dirs.push(vec![v; dim]);
        dirs.push(vec![-v; dim]);
    }
    dirs
}
