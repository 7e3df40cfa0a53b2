//! Windowed Anderson acceleration for fixed-point maps on flat real vectors.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default number of residual differences kept in the window.
pub const DEFAULT_WINDOW: usize = 5;
/// Singular values below this fraction of the largest are truncated.
const RANK_TOL: f64 = 1e-14;

/// History of `(x, G(x))` pairs for Anderson acceleration.
#[derive(Debug, Clone)]
pub struct AaWindow {
    m: usize,
    dim: Option<usize>,
    xs: VecDeque<DVector<f64>>,
    gs: VecDeque<DVector<f64>>,
}

impl Default for AaWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl AaWindow {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            dim: None,
            xs: VecDeque::with_capacity(m + 1),
            gs: VecDeque::with_capacity(m + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.m
    }

    /// Number of stored pairs (at most `m + 1`).
    pub fn history_len(&self) -> usize {
        self.xs.len()
    }

    /// Residual `G(x) - x` of a stored entry, oldest first.
    pub fn residual(&self, i: usize) -> DVector<f64> {
        &self.gs[i] - &self.xs[i]
    }

    /// Drops all history. The next [`AaWindow::push_and_accelerate`] returns its `g`.
    pub fn reset(&mut self) {
        self.xs.clear();
        self.gs.clear();
        self.dim = None;
    }

    /// Records `(x, g = G(x))` and returns the accelerated iterate
    ///
    /// `g_k - sum_j theta_j (g_{k-j+1} - g_{k-j})`
    ///
    /// where `theta` minimizes `|f_k - sum_j theta_j (f_{k-j+1} - f_{k-j})|`
    /// over the `min(history - 1, m)` most recent residual differences.
    pub fn push_and_accelerate(
        &mut self,
        x: DVector<f64>,
        g: DVector<f64>,
    ) -> Result<DVector<f64>> {
        if x.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: g.len(),
            });
        }
        match self.dim {
            Some(d) if d != x.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x.len(),
                })
            }
            _ => self.dim = Some(x.len()),
        }
        if self.xs.len() == self.m + 1 {
            self.xs.pop_front();
            self.gs.pop_front();
        }
        self.xs.push_back(x);
        self.gs.push_back(g);

        let len = self.xs.len();
        let mk = len - 1;
        let g_k = self.gs[len - 1].clone();
        if mk == 0 {
            return Ok(g_k);
        }
        let n = g_k.len();
        let f_k = self.residual(len - 1);
        let mut df = DMatrix::zeros(n, mk);
        let mut dg = DMatrix::zeros(n, mk);
        // Column j-1 holds the difference between entries k-j+1 and k-j.
        for j in 1..=mk {
            let newer = len - j;
            let older = newer - 1;
            df.set_column(j - 1, &(self.residual(newer) - self.residual(older)));
            dg.set_column(j - 1, &(&self.gs[newer] - &self.gs[older]));
        }
        let theta = solve_least_squares(&df, &f_k);
        Ok(g_k - dg * theta)
    }
}

/// Minimum-norm least-squares solution via a truncated SVD.
pub(crate) fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return DVector::zeros(a.ncols());
    }
    svd.solve(b, RANK_TOL * smax)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn first_call_returns_g() {
        let mut w = AaWindow::new(5);
        let g = dv(&[1.0, 2.0, 3.0]);
        assert_eq!(w.push_and_accelerate(dv(&[0.0; 3]), g.clone()).unwrap(), g);
    }

    #[test]
    fn constant_map_returns_constant() {
        let c = dv(&[0.5, -1.0, 2.0]);
        let mut w = AaWindow::new(5);
        w.push_and_accelerate(dv(&[0.0, 0.0, 0.0]), c.clone()).unwrap();
        let out = w.push_and_accelerate(c.clone(), c.clone()).unwrap();
        assert!((out - c).norm() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let mut w = AaWindow::new(3);
        assert!(w.push_and_accelerate(dv(&[0.0; 2]), dv(&[0.0; 3])).is_err());
        w.push_and_accelerate(dv(&[0.0; 2]), dv(&[1.0; 2])).unwrap();
        assert!(matches!(
            w.push_and_accelerate(dv(&[0.0; 3]), dv(&[1.0; 3])),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn history_is_bounded() {
        let mut w = AaWindow::new(2);
        for i in 0..10 {
            let x = dv(&[i as f64]);
            w.push_and_accelerate(x.clone(), x * 0.5).unwrap();
            assert!(w.history_len() <= 3);
        }
        for i in 0..w.history_len() {
            let r = w.residual(i);
            assert_eq!(r, &w.gs[i] - &w.xs[i]);
        }
    }

    #[test]
    fn reset_behaves_like_fresh_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..8)
            .map(|_| {
                (
                    DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                    DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let mut used = AaWindow::new(3);
        for (x, g) in &pairs[..5] {
            used.push_and_accelerate(x.clone(), g.clone()).unwrap();
        }
        used.reset();
        used.reset();
        let mut fresh = AaWindow::new(3);
        for (x, g) in &pairs[3..] {
            let a = used.push_and_accelerate(x.clone(), g.clone()).unwrap();
            let b = fresh.push_and_accelerate(x.clone(), g.clone()).unwrap();
            assert_eq!(a, b);
        }
        used.reset();
        let (x, g) = &pairs[0];
        assert_eq!(used.push_and_accelerate(x.clone(), g.clone()).unwrap(), *g);
    }

    #[test]
    fn coefficients_satisfy_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let a = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let theta = solve_least_squares(&a, &b);
            let normal = a.transpose() * (&a * &theta - &b);
            assert!(normal.norm() < 1e-10 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn collinear_history_is_truncated() {
        let a = DMatrix::from_columns(&[dv(&[1.0, 2.0, 3.0]), dv(&[2.0, 4.0, 6.0])]);
        let b = dv(&[1.0, 0.0, 0.0]);
        let theta = solve_least_squares(&a, &b);
        assert!(theta.iter().all(|v| v.is_finite()));
        let normal = a.transpose() * (&a * &theta - &b);
        assert!(normal.norm() < 1e-12);
    }

    #[test]
    fn affine_residual_is_orthogonal_to_differences() {
        // For affine G the accelerated residual equals f_k - dF theta, which is
        // orthogonal to the span of the residual differences.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 6;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.15..0.15));
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let g = |x: &DVector<f64>| &a * x + &b;
        let mut w = AaWindow::new(3);
        let mut x = DVector::zeros(n);
        for _ in 0..4 {
            let gx = g(&x);
            x = w.push_and_accelerate(x.clone(), gx).unwrap();
        }
        let len = w.history_len();
        let fk = w.residual(len - 1);
        let mut df = DMatrix::zeros(n, len - 1);
        for j in 1..len {
            df.set_column(j - 1, &(w.residual(len - j) - w.residual(len - j - 1)));
        }
        let theta = solve_least_squares(&df, &fk);
        let r = fk - &df * theta;
        assert!((df.transpose() * r).norm() < 1e-10);
    }
    /// Affine contraction `x -> A x + b` in R^6 with spectral radius 0.9.
    pub(crate) fn contraction(seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let d = DMatrix::from_diagonal(&dv(&[0.9, 0.8, 0.7, 0.5, 0.3, 0.1]));
        let a = &q * d * q.transpose();
        let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        (a, b)
    }

    fn evaluations_to_converge(a: &DMatrix<f64>, b: &DVector<f64>, m: Option<usize>) -> usize {
        let mut w = m.map(AaWindow::new);
        let mut x = DVector::zeros(b.len());
        for evals in 1..10_000 {
            let gx = a * &x + b;
            if (&gx - &x).norm() < 1e-10 {
                return evals;
            }
            x = match w.as_mut() {
                Some(w) => w.push_and_accelerate(x.clone(), gx).unwrap(),
                None => gx,
            };
        }
        usize::MAX
    }

    #[test]
    fn accelerates_affine_contraction() {
        let (a, b) = contraction(34);
        let fixed = (DMatrix::identity(6, 6) - &a).lu().solve(&b).unwrap();
        // A window covering the whole space behaves like GMRES: n + 1 steps.
        assert!(evaluations_to_converge(&a, &b, Some(6)) <= 8);
        let aa = evaluations_to_converge(&a, &b, Some(5));
        let plain = evaluations_to_converge(&a, &b, None);
        assert!(plain > 100, "plain iteration took {plain}");
        assert!(aa * 5 < plain, "aa {aa} vs plain {plain}");

        let mut w = AaWindow::new(5);
        let mut x = DVector::zeros(6);
        for _ in 0..aa {
            let gx = &a * &x + &b;
            x = w.push_and_accelerate(x.clone(), gx).unwrap();
        }
        assert!((x - fixed).norm() < 1e-9);
    }

    proptest! {
        #[test]
        fn output_lies_in_affine_hull_of_images(seed in 0u64..1000, m in 1usize..7, steps in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = AaWindow::new(m);
            for _ in 0..steps {
                let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                let g = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                let out = w.push_and_accelerate(x, g).unwrap();
                prop_assert!(out.iter().all(|v| v.is_finite()));
                prop_assert!(w.history_len() <= m + 1);
            }
        }

        #[test]
        fn reset_replays_like_fresh(seed in 0u64..1000, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..8)
                .map(|_| (DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)), DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))))
                .collect();
            let mut used = AaWindow::new(m);
            for (x, g) in &pairs {
                used.push_and_accelerate(x.clone(), g.clone()).unwrap();
            }
            used.reset();
            let mut fresh = AaWindow::new(m);
            for (x, g) in &pairs {
                let a = used.push_and_accelerate(x.clone(), g.clone()).unwrap();
                let b = fresh.push_and_accelerate(x.clone(), g.clone()).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
