//! Primal active-set solver for `min ½xᵀHx − cᵀx` subject to `l ≤ x ≤ u`.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, Matrix};
use crate::real::{clamp, Real};

#[derive(Debug, Clone)]
pub struct BoxQp<T: Real> {
    pub hessian: Matrix<T>,
    pub linear: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub kkt_residual: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl<T: Real> BoxQp<T> {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// `Hx − c`.
    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        self.hessian
            .mul_vec(x)
            .into_iter()
            .zip(&self.linear)
            .map(|(hx, &c)| hx - c)
            .collect()
    }

    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.mul_vec(x);
        x.iter()
            .zip(&hx)
            .zip(&self.linear)
            .map(|((&xi, &hxi), &ci)| T::lit(0.5) * xi * hxi - ci * xi)
            .sum()
    }

    /// Projected-gradient residual `‖x − P(x − ∇f(x))‖∞`; zero exactly at the
    /// KKT point.
    pub fn kkt_residual(&self, x: &[T]) -> T {
        self.gradient(x)
            .iter()
            .enumerate()
            .map(|(i, &g)| (x[i] - clamp(x[i] - g, self.lower[i], self.upper[i])).abs())
            .fold(T::zero(), T::max)
    }

    pub fn solve(&self, max_iters: usize) -> Result<QpSolution<T>> {
        let n = self.dim();
        assert_eq!(self.hessian.rows(), n);
        assert_eq!(self.lower.len(), n);
        assert_eq!(self.upper.len(), n);
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::input("QP lower bound above upper bound"));
        }

        let mut x: Vec<T> = (0..n)
            .map(|i| clamp(T::zero(), self.lower[i], self.upper[i]))
            .collect();
        let mut state: Vec<Bound> = (0..n)
            .map(|i| {
                if self.lower[i] == self.upper[i] {
                    Bound::Lower
                } else {
                    Bound::Free
                }
            })
            .collect();

        for iter in 1..=max_iters {
            let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
            let target = self.subproblem(&x, &free)?;

            // Largest feasible step toward the subproblem minimizer.
            let mut alpha = T::one();
            let mut blocking = None;
            for (k, &i) in free.iter().enumerate() {
                let d = target[k] - x[i];
                if d > T::zero() && target[k] > self.upper[i] {
                    let a = (self.upper[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, Bound::Upper));
                    }
                } else if d < T::zero() && target[k] < self.lower[i] {
                    let a = (self.lower[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, Bound::Lower));
                    }
                }
            }
            let alpha = alpha.max(T::zero());
            for (k, &i) in free.iter().enumerate() {
                x[i] = clamp(x[i] + alpha * (target[k] - x[i]), self.lower[i], self.upper[i]);
            }
            if let Some((i, b)) = blocking {
                state[i] = b;
                x[i] = if b == Bound::Upper { self.upper[i] } else { self.lower[i] };
                continue;
            }

            // Subproblem optimum is feasible: check the multipliers.
            let g = self.gradient(&x);
            let mut worst = T::zero();
            let mut release = None;
            for i in 0..n {
                let violation = match state[i] {
                    Bound::Lower if self.lower[i] < self.upper[i] => -g[i],
                    Bound::Upper => g[i],
                    _ => T::zero(),
                };
                if violation > worst {
                    worst = violation;
                    release = Some(i);
                }
            }
            match release {
                Some(i) => state[i] = Bound::Free,
                None => {
                    return Ok(QpSolution {
                        kkt_residual: self.kkt_residual(&x),
                        x,
                        iterations: iter,
                    })
                }
            }
        }
        Err(Error::Convergence {
            iterations: max_iters,
            residual: self.kkt_residual(&x).as_f64(),
        })
    }

    /// Minimizer over the free coordinates with the others held fixed.
    fn subproblem(&self, x: &[T], free: &[usize]) -> Result<Vec<T>> {
        let m = free.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut hff = Matrix::zeros(m, m);
        let mut rhs = vec![T::zero(); m];
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                hff[(a, b)] = self.hessian[(i, j)];
            }
            let mut r = self.linear[i];
            for j in 0..self.dim() {
                if !free.contains(&j) {
                    r -= self.hessian[(i, j)] * x[j];
                }
            }
            rhs[a] = r;
        }
        let l = cholesky(&hff).ok_or_else(|| Error::input("QP Hessian is not positive definite"))?;
        let mut sol = cholesky_solve(&l, &rhs);
        // One step of iterative refinement.
        let res: Vec<T> = hff
            .mul_vec(&sol)
            .iter()
            .zip(&rhs)
            .map(|(&a, &b)| b - a)
            .collect();
        for (s, d) in sol.iter_mut().zip(cholesky_solve(&l, &res)) {
            *s += d;
        }
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = Matrix::<f64>::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let qp = BoxQp { hessian: h, linear: vec![1.0, 1.0], lower: vec![-10.0; 2], upper: vec![10.0; 2] };
        let s = qp.solve(50).unwrap();
        // [2 .5; .5 1] x = [1 1]  =>  x = (1/7)(2, 6)
        assert!((s.x[0] - 2.0 / 7.0).abs() < 1e-14);
        assert!((s.x[1] - 6.0 / 7.0).abs() < 1e-14);
        assert!(s.kkt_residual < 1e-14);
    }

    #[test]
    fn active_bound() {
        let qp = BoxQp {
            hessian: Matrix::identity(2),
            linear: vec![3.0, -0.5],
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
        };
        let s = qp.solve(50).unwrap();
        assert_eq!(s.x, vec![1.0, -0.5]);
    }

    #[test]
    fn iteration_cap_reports_convergence_error() {
        let qp = BoxQp {
            hessian: Matrix::identity(3),
            linear: vec![3.0, 3.0, 3.0],
            lower: vec![-1.0; 3],
            upper: vec![1.0; 3],
        };
        assert!(matches!(qp.solve(1), Err(Error::Convergence { .. })));
    }
}
