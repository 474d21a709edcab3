//! Limited-memory BFGS with a deterministic backtracking Armijo line search.

use std::collections::VecDeque;

use crate::linalg::dot;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when `‖∇f‖_∞ ≤ gtol`.
    pub gtol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            memory: 10,
            gtol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`; `fg` returns `(f(x), ∇f(x))` and may return a non-finite
/// value for points outside the domain, which the line search backs away from.
pub(crate) fn lbfgs(x0: Vec<f64>, opts: &LbfgsOptions, mut fg: impl FnMut(&[f64]) -> (f64, Vec<f64>)) -> LbfgsOutcome {
    const C1: f64 = 1e-4;
    const MAX_BACKTRACK: usize = 60;

    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = false;
    let n = x.len();

    while iterations < opts.max_iter {
        let gn = inf_norm(&g);
        if !f.is_finite() {
            break;
        }
        if gn <= opts.gtol {
            converged = true;
            break;
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = if hist.is_empty() {
            (1.0 / inf_norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= f + C1 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew, gnew)) = accepted else {
            // no decrease available at working precision
            converged = gn <= opts.gtol.sqrt();
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let stalled = f - fnew <= 4.0 * f64::EPSILON * f.abs().max(1e-300);
        x = xn;
        f = fnew;
        g = gnew;
        if stalled && inf_norm(&g) <= opts.gtol.sqrt() {
            converged = true;
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    LbfgsOutcome {
        x,
        f,
        grad_norm,
        iterations,
        converged: converged || grad_norm <= opts.gtol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let out = lbfgs(vec![-1.2, 1.0], &LbfgsOptions::default(), |x| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (f, g)
        });
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backs_off_infinite_values() {
        // f = x - ln x on x > 0, min at 1
        let out = lbfgs(vec![5.0], &LbfgsOptions::default(), |x| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![0.0])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        });
        assert!((out.x[0] - 1.0).abs() < 1e-8);
    }
}
