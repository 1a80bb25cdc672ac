//! Recombining binomial lattice for an m-dimensional Brownian motion, m <= 3.
//!
//! At step `k` a node is a tuple `(j_1, .., j_m)` with `0 <= j_i <= k` and
//! `W_i = (2 j_i - k) sqrt(dt)`, stored at index `sum_i j_i (k+1)^i`.
//! Branch `b` moves component `i` up by `sqrt(dt)` when bit `i` of `b` is set.

use nalgebra::DVector;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    num_steps: usize,
    horizon: f64,
    dim: usize,
    dt: f64,
    sqrt_dt: f64,
}

impl Lattice {
    pub fn new(num_steps: usize, horizon: f64, dim: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidLattice("need at least one time step".into()));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidLattice(format!(
                "lattice dimension cap: brownian_dim must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidLattice(format!("horizon must be positive, got {horizon}")));
        }
        let dt = horizon / num_steps as f64;
        Ok(Self { num_steps, horizon, dim, dt, sqrt_dt: dt.sqrt() })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.num_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self, k: usize) -> usize {
        (k + 1).pow(self.dim as u32)
    }

    pub fn branches(&self) -> usize {
        1 << self.dim
    }

    pub fn branch_prob(&self) -> f64 {
        1.0 / self.branches() as f64
    }

    pub fn coords(&self, k: usize, node: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        let mut rest = node;
        for c in out.iter_mut().take(self.dim) {
            *c = rest % (k + 1);
            rest /= k + 1;
        }
        out
    }

    pub fn index(&self, k: usize, coords: &[usize]) -> usize {
        coords.iter().take(self.dim).rev().fold(0, |acc, &j| acc * (k + 1) + j)
    }

    pub fn child(&self, k: usize, node: usize, branch: usize) -> usize {
        let mut c = self.coords(k, node);
        for (i, ci) in c.iter_mut().enumerate().take(self.dim) {
            *ci += (branch >> i) & 1;
        }
        self.index(k + 1, &c)
    }

    /// Sign (+1 / -1) of component `i` in branch `b`.
    pub fn branch_sign(branch: usize, i: usize) -> f64 {
        if (branch >> i) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn increment(&self, branch: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, (0..self.dim).map(|i| Self::branch_sign(branch, i) * self.sqrt_dt))
    }

    pub fn brownian(&self, k: usize, node: usize) -> DVector<f64> {
        let c = self.coords(k, node);
        DVector::from_iterator(self.dim, (0..self.dim).map(|i| (2.0 * c[i] as f64 - k as f64) * self.sqrt_dt))
    }
}

/// Thread pool with a fixed worker count; `None` runs on the caller's thread.
pub fn build_pool(workers: usize) -> Result<Option<ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidLattice(format!("thread pool: {e}")))
}

/// Evaluate `f` on `0..len`, in parallel when a pool is given. The first
/// error in index order is returned, so results never depend on scheduling.
pub fn map_nodes<T, F>(pool: Option<&ThreadPool>, len: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = match pool {
        Some(p) => p.install(|| (0..len).into_par_iter().map(&f).collect()),
        None => (0..len).map(&f).collect(),
    };
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_sizes_and_children() {
        let l = Lattice::new(4, 1.0, 2).unwrap();
        assert_eq!(l.nodes(0), 1);
        assert_eq!(l.nodes(3), 16);
        for k in 0..4 {
            for n in 0..l.nodes(k) {
                for b in 0..l.branches() {
                    assert!(l.child(k, n, b) < l.nodes(k + 1));
                }
            }
        }
        // up-up from the root lands on (1, 1)
        assert_eq!(l.coords(1, l.child(0, 0, 3)), [1, 1, 0]);
    }

    #[test]
    fn increments_have_brownian_moments() {
        let l = Lattice::new(10, 2.0, 3).unwrap();
        let p = l.branch_prob();
        let mut mean = DVector::zeros(3);
        let mut var = DVector::zeros(3);
        for b in 0..l.branches() {
            let dw = l.increment(b);
            mean += &dw * p;
            var += dw.component_mul(&dw) * p;
        }
        assert!(mean.norm() < 1e-15);
        assert!((var - DVector::from_element(3, 0.2)).norm() < 1e-15);
    }

    #[test]
    fn brownian_values_recombine() {
        let l = Lattice::new(3, 1.0, 1).unwrap();
        let ud = l.child(1, l.child(0, 0, 1), 0);
        let du = l.child(1, l.child(0, 0, 0), 1);
        assert_eq!(ud, du);
        assert_eq!(l.brownian(2, ud)[0], 0.0);
    }

    #[test]
    fn dimension_cap() {
        assert!(matches!(Lattice::new(5, 1.0, 4), Err(Error::InvalidLattice(msg)) if msg.contains("cap")));
    }

    #[test]
    fn first_error_wins() {
        let pool = build_pool(4).unwrap();
        let r: Result<Vec<usize>> = map_nodes(pool.as_ref(), 100, |i| {
            if i % 7 == 3 {
                Err(Error::NumericFault { step: 0, node: i })
            } else {
                Ok(i)
            }
        });
        assert_eq!(r, Err(Error::NumericFault { step: 0, node: 3 }));
    }
}
