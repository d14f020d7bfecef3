//! Dense convex QP with box bounds and optional linear inequality rows.
//!
//! `min 1/2 x^T H x + g^T x  s.t.  lo <= x <= hi,  C x <= d`
//!
//! Bounds are enforced exactly by projection. Rows of `C` go through an
//! augmented Lagrangian whose inner problem (piecewise quadratic, bounded)
//! is solved by projected Newton with an Armijo search.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct QpSettings {
    pub tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub rho0: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_inner: 200,
            max_outer: 40,
            rho0: 1e3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Largest `C x - d` at the returned point (0 with no rows).
    pub max_violation: f64,
    pub iterations: usize,
}

pub struct BoxQp<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
    pub c: Option<(&'a DMatrix<f64>, &'a DVector<f64>)>,
}

fn project(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

impl BoxQp<'_> {
    pub fn solve(&self, x0: &DVector<f64>, settings: &QpSettings) -> QpSolution {
        let n = self.g.len();
        assert!(self.lo.iter().zip(self.hi.iter()).all(|(l, h)| l <= h), "empty box");
        let mut x = x0.clone();
        project(&mut x, self.lo, self.hi);
        let Some((c, d)) = self.c else {
            let mut iters = 0;
            let empty_c = DMatrix::zeros(0, n);
            let empty_d = DVector::zeros(0);
            let x = self.inner(x, &empty_c, &empty_d, &DVector::zeros(0), 0.0, settings, &mut iters);
            return QpSolution {
                x,
                max_violation: 0.0,
                iterations: iters,
            };
        };

        let m = d.len();
        let mut lambda = DVector::zeros(m);
        let mut rho = settings.rho0;
        let mut iters = 0;
        let mut last_violation = f64::INFINITY;
        let mut violation = f64::INFINITY;
        for _ in 0..settings.max_outer {
            x = self.inner(x, c, d, &lambda, rho, settings, &mut iters);
            let r = c * &x - d;
            violation = r.iter().fold(0.0f64, |a, &v| a.max(v));
            for i in 0..m {
                lambda[i] = (lambda[i] + rho * r[i]).max(0.0);
            }
            let complementary = (0..m).all(|i| lambda[i] == 0.0 || r[i].abs() <= settings.tol.sqrt());
            if violation <= settings.tol.sqrt() * 1e-2 && complementary {
                break;
            }
            if violation > 0.25 * last_violation {
                rho *= 10.0;
            }
            last_violation = violation;
        }
        QpSolution {
            x,
            max_violation: violation.max(0.0),
            iterations: iters,
        }
    }

    fn objective(
        &self,
        x: &DVector<f64>,
        c: &DMatrix<f64>,
        d: &DVector<f64>,
        lambda: &DVector<f64>,
        rho: f64,
    ) -> f64 {
        let mut f = 0.5 * x.dot(&(self.h * x)) + self.g.dot(x);
        if rho > 0.0 {
            let r = c * x - d;
            for i in 0..r.len() {
                let s = r[i] + lambda[i] / rho;
                if s > 0.0 {
                    f += 0.5 * rho * s * s;
                }
            }
        }
        f
    }

    #[allow(clippy::too_many_arguments)]
    fn inner(
        &self,
        mut x: DVector<f64>,
        c: &DMatrix<f64>,
        d: &DVector<f64>,
        lambda: &DVector<f64>,
        rho: f64,
        settings: &QpSettings,
        iters: &mut usize,
    ) -> DVector<f64> {
        let n = x.len();
        for _ in 0..settings.max_inner {
            *iters += 1;
            let mut grad = self.h * &x + self.g;
            let mut hess = self.h.clone();
            if rho > 0.0 {
                let r = c * &x - d;
                for i in 0..r.len() {
                    let s = r[i] + lambda[i] / rho;
                    if s > 0.0 {
                        let row = c.row(i);
                        grad += row.transpose() * (rho * s);
                        hess += row.transpose() * row * rho;
                    }
                }
            }
            // Variables held at a bound by the gradient.
            let eps_bind = 1e-12;
            let free: Vec<usize> = (0..n)
                .filter(|&i| {
                    !((x[i] <= self.lo[i] + eps_bind && grad[i] > 0.0)
                        || (x[i] >= self.hi[i] - eps_bind && grad[i] < 0.0))
                })
                .collect();
            let pg = free.iter().fold(0.0f64, |a, &i| a.max(grad[i].abs()));
            if pg <= settings.tol {
                break;
            }
            let k = free.len();
            let h_ff = DMatrix::from_fn(k, k, |a, b| hess[(free[a], free[b])]);
            let g_f = DVector::from_fn(k, |a, _| -grad[free[a]]);
            let step_f = match h_ff.clone().cholesky() {
                Some(ch) => ch.solve(&g_f),
                None => g_f.clone(),
            };
            let mut dir = DVector::zeros(n);
            for (a, &i) in free.iter().enumerate() {
                dir[i] = step_f[a];
            }
            let f0 = self.objective(&x, c, d, lambda, rho);
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let mut trial = &x + &dir * t;
                project(&mut trial, self.lo, self.hi);
                let decrease = grad.dot(&(&x - &trial));
                let f1 = self.objective(&trial, c, d, lambda, rho);
                if f1 <= f0 - 1e-4 * decrease {
                    moved = (&trial - &x).amax() > 0.0;
                    x = trial;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        x
    }
}
