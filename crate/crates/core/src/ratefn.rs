//! Rate function by constrained minimization of the entropy cost.
//!
//! The control is parametrized as `g = e^u` on `J` uniform time cells per
//! atom. Constraints on the fluid path are enforced by an augmented
//! Lagrangian; gradients come from the adjoint of the implicit trapezoid
//! recursion that the fluid solver's Picard blocks converge to.
//!
//! In the state-independent case the infimum is a Cramér transform, which
//! [`legendre_oracle`] computes directly from the dual.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fluid::{ell_unchecked, solve_on, uniform_grid, Control, Discretization, FluidOptions, FluidSolution};
use crate::linalg::{dot, norm, solve_dense};
use crate::model::ShotNoiseModel;
use crate::optim::{lbfgs, LbfgsOptions};

/// Constraint on the fluid path `ξ^g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RateConstraint {
    /// `ξ^g(T) = a`.
    Terminal(Vec<f64>),
    /// `ξ^g(t_j) = φ_j` at the control-grid nodes `t_1, …, t_J`.
    Path(Vec<Vec<f64>>),
}

impl RateConstraint {
    fn validate(&self, dim: usize, cells: usize) -> Result<()> {
        let rows: Vec<&Vec<f64>> = match self {
            RateConstraint::Terminal(a) => vec![a],
            RateConstraint::Path(p) => {
                if p.len() != cells {
                    return invalid(format!(
                        "path constraint has {} points, expected one per cell ({cells})",
                        p.len()
                    ));
                }
                p.iter().collect()
            }
        };
        for r in rows {
            if r.len() != dim {
                return invalid(format!("constraint point has length {}, expected {dim}", r.len()));
            }
            if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return invalid("constraint targets must be finite and nonnegative");
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match self {
            RateConstraint::Terminal(a) => norm(a),
            RateConstraint::Path(p) => p.iter().map(|x| norm(x)).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateOptions {
    /// Number of uniform control cells `J`.
    pub cells: usize,
    pub fluid: FluidOptions,
    /// Accept when `‖c(u)‖ ≤ constraint_tol · max(1, ‖target‖)`.
    pub constraint_tol: f64,
    pub max_outer: usize,
    pub initial_penalty: f64,
    pub inner_max_iter: usize,
    pub inner_gtol: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            cells: 16,
            fluid: FluidOptions {
                tol: 1e-14,
                min_total_nodes: 0,
                ..FluidOptions::default()
            },
            constraint_tol: 1e-8,
            max_outer: 50,
            initial_penalty: 10.0,
            inner_max_iter: 2000,
            inner_gtol: 1e-9,
        }
    }
}

/// One augmented-Lagrangian round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub round: usize,
    pub penalty: f64,
    pub residual: f64,
    pub cost: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateResult {
    pub control: Control,
    /// `L_T(g*)`, an upper bound on the rate-function value.
    pub cost: f64,
    pub residual: f64,
    pub fluid: FluidSolution,
    pub trace: Vec<OuterRecord>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
}

/// JSON form of a [`RateResult`] (the fluid path is exported as CSV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateReport {
    pub cost: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub control: Control,
    pub trace: Vec<OuterRecord>,
}

impl RateResult {
    pub fn report(&self) -> RateReport {
        RateReport {
            cost: self.cost,
            residual: self.residual,
            converged: self.converged,
            iterations: self.iterations,
            final_grad_norm: self.final_grad_norm,
            control: self.control.clone(),
            trace: self.trace.clone(),
        }
    }
}

/// The control `g*` of a converged result, for use as an importance-sampling tilt.
pub fn export_tilt(result: &RateResult) -> Result<Control> {
    if !result.converged {
        return Err(Error::InvalidState(
            "rate optimization did not converge; no tilt to export".into(),
        ));
    }
    Ok(result.control.clone())
}

/// Augmented-Lagrangian objective
/// `Φ(u) = L_T(e^u) + λ·c(u) + (μ/2)‖c(u)‖²` with its adjoint gradient.
#[derive(Clone, Debug)]
pub struct PenalizedObjective<'a> {
    model: &'a ShotNoiseModel,
    constraint: &'a RateConstraint,
    grid: Vec<f64>,
    fluid: FluidOptions,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
}

/// Everything computed at one `u`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub cost: f64,
    pub constraint: Vec<f64>,
    pub control: Control,
    pub fluid: FluidSolution,
}

impl<'a> PenalizedObjective<'a> {
    pub fn new(
        model: &'a ShotNoiseModel,
        constraint: &'a RateConstraint,
        cells: usize,
        fluid: FluidOptions,
    ) -> Result<Self> {
        if cells == 0 {
            return invalid("need at least one control cell");
        }
        constraint.validate(model.dim(), cells)?;
        let m = match constraint {
            RateConstraint::Terminal(_) => model.dim(),
            RateConstraint::Path(_) => model.dim() * cells,
        };
        Ok(Self {
            model,
            constraint,
            grid: uniform_grid(model.horizon(), cells),
            fluid,
            multipliers: vec![0.0; m],
            penalty: 1.0,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid.len() - 1
    }

    /// Number of entries in `u`: cells × atoms, cell-major.
    pub fn len(&self) -> usize {
        self.cells() * self.model.marks().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn control_for(&self, u: &[f64]) -> Result<Control> {
        let kk = self.model.marks().len();
        if u.len() != self.len() {
            return invalid(format!(
                "parameter vector has length {}, expected {}",
                u.len(),
                self.len()
            ));
        }
        let values = u.chunks(kk).map(|row| row.iter().map(|v| v.exp()).collect()).collect();
        Control::new(self.grid.clone(), values)
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.evaluate(u, false)?.value)
    }

    pub fn value_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(u, true)?;
        Ok((e.value, e.gradient))
    }

    pub fn evaluate(&self, u: &[f64], with_gradient: bool) -> Result<Evaluation> {
        let model = self.model;
        let d = model.dim();
        let kk = model.marks().len();
        let control = self.control_for(u)?;
        let disc = Discretization::build(model, &control, &self.fluid)?;
        let sol = solve_on(model, &control, &disc, &self.fluid)?;

        let mut cost = 0.0;
        for j in 0..self.cells() {
            let dt = control.cell_width(j);
            for k in 0..kk {
                cost += dt * model.marks().weight(k) * ell_unchecked(control.value(j, k));
            }
        }

        // node index at the end of each control cell
        let mut cell_end = vec![0; self.cells()];
        for (l, &c) in sol.step_cell.iter().enumerate() {
            cell_end[c] = l + 1;
        }
        let (constraint, node_of): (Vec<f64>, Vec<usize>) = match self.constraint {
            RateConstraint::Terminal(a) => {
                let n = sol.len() - 1;
                (sol.value(n).iter().zip(a).map(|(x, y)| x - y).collect(), vec![n])
            }
            RateConstraint::Path(p) => {
                let mut c = Vec::with_capacity(p.len() * d);
                for (j, target) in p.iter().enumerate() {
                    c.extend(sol.value(cell_end[j]).iter().zip(target).map(|(x, y)| x - y));
                }
                (c, cell_end.clone())
            }
        };
        let mu = self.penalty;
        let value = cost + dot(&self.multipliers, &constraint) + 0.5 * mu * dot(&constraint, &constraint);

        let gradient = if with_gradient {
            let mut weights = vec![0.0; sol.len() * d];
            for (b, &node) in node_of.iter().enumerate() {
                for i in 0..d {
                    weights[node * d + i] += self.multipliers[b * d + i] + mu * constraint[b * d + i];
                }
            }
            let grad_g = adjoint_control_gradient(model, &control, &sol, &weights)?;
            let mut grad = vec![0.0; self.len()];
            for j in 0..self.cells() {
                let dt = control.cell_width(j);
                for k in 0..kk {
                    let idx = j * kk + k;
                    let g = control.value(j, k);
                    // d/du ℓ(e^u) = u e^u
                    grad[idx] = g * grad_g[idx] + dt * model.marks().weight(k) * g * u[idx];
                }
            }
            grad
        } else {
            Vec::new()
        };

        Ok(Evaluation {
            value,
            gradient,
            cost,
            constraint,
            control,
            fluid: sol,
        })
    }
}

/// Gradient of `Σ_m w_m · ξ_m` with respect to the control levels `g_jk`
/// (cell-major), through the implicit trapezoid recursion
/// `ξ_{l+1} = ξ_l + ½Δ_l (F_l(ξ_l) + F_l(ξ_{l+1}))`.
fn adjoint_control_gradient(
    model: &ShotNoiseModel,
    control: &Control,
    sol: &FluidSolution,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let d = model.dim();
    let kk = model.marks().len();
    let steps = sol.len() - 1;
    let nu: Vec<f64> = model.marks().weights().collect();

    let mut jac = vec![0.0; d * d];
    let mut a_mat = vec![0.0; d * d];
    // A_l(x) = Σ_k g_{c(l),k} ν_k ∂h/∂x(z_k, x)
    let mut drift_jacobian = |cell: usize, x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for k in 0..kk {
            let w = control.value(cell, k) * nu[k];
            if w == 0.0 {
                continue;
            }
            model.shot_jacobian_into(k, x, &mut jac);
            for (o, j) in out.iter_mut().zip(&jac) {
                *o += w * j;
            }
        }
    };

    let mut lam = vec![0.0; steps * d];
    let mut lhs = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for m in (1..=steps).rev() {
        for i in 0..d {
            rhs[i] = -weights[m * d + i];
        }
        if m < steps {
            let half = 0.5 * (sol.times[m + 1] - sol.times[m]);
            drift_jacobian(sol.step_cell[m], sol.value(m), &mut a_mat);
            // (I + ½Δ_m A_m)^T λ_m
            for i in 0..d {
                let mut acc = lam[m * d + i];
                for r in 0..d {
                    acc += half * a_mat[r * d + i] * lam[m * d + r];
                }
                rhs[i] += acc;
            }
        }
        let half = 0.5 * (sol.times[m] - sol.times[m - 1]);
        drift_jacobian(sol.step_cell[m - 1], sol.value(m), &mut a_mat);
        // (I − ½Δ_{m−1} A_{m−1})^T, row-major
        for i in 0..d {
            for r in 0..d {
                lhs[i * d + r] = f64::from(u8::from(i == r)) - half * a_mat[r * d + i];
            }
        }
        let sol_lam = solve_dense(&lhs, &rhs).ok_or(Error::NonConvergence {
            iterations: 0,
            kappa: f64::NAN,
            residual: f64::NAN,
        })?;
        lam[(m - 1) * d..m * d].copy_from_slice(&sol_lam);
    }

    let mut grad = vec![0.0; control.cells() * kk];
    let mut ha = vec![0.0; d];
    let mut hb = vec![0.0; d];
    for l in 0..steps {
        let j = sol.step_cell[l];
        let half = 0.5 * (sol.times[l + 1] - sol.times[l]);
        let lam_l = &lam[l * d..(l + 1) * d];
        for k in 0..kk {
            model.shot_value_into(k, sol.value(l), &mut ha);
            model.shot_value_into(k, sol.value(l + 1), &mut hb);
            let s: f64 = (0..d).map(|i| lam_l[i] * (ha[i] + hb[i])).sum();
            grad[j * kk + k] -= half * nu[k] * s;
        }
    }
    Ok(grad)
}

/// Minimizes `L_T(g)` over controls on `opts.cells` uniform cells subject to
/// the fluid-path constraint, starting from `g ≡ 1`.
pub fn minimize_rate(model: &ShotNoiseModel, constraint: &RateConstraint, opts: &RateOptions) -> Result<RateResult> {
    if opts.max_outer == 0 {
        return invalid("max_outer must be positive");
    }
    if !(opts.initial_penalty > 0.0 && opts.constraint_tol > 0.0) {
        return invalid("penalty and constraint tolerance must be positive");
    }
    let mut obj = PenalizedObjective::new(model, constraint, opts.cells, opts.fluid)?;
    obj.penalty = opts.initial_penalty;
    let ctol = opts.constraint_tol * constraint.scale().max(1.0);
    let inner_opts = LbfgsOptions {
        max_iter: opts.inner_max_iter,
        gtol: opts.inner_gtol,
        ..LbfgsOptions::default()
    };

    let mut u = vec![0.0; obj.len()];
    let mut trace = Vec::new();
    let mut prev_residual = f64::INFINITY;
    let mut total_iter = 0;
    for round in 1..=opts.max_outer {
        let inner = lbfgs(u, &inner_opts, |x| match obj.value_and_gradient(x) {
            Ok(vg) => vg,
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        });
        total_iter += inner.iterations;
        u = inner.x;
        let eval = obj.evaluate(&u, false)?;
        let residual = norm(&eval.constraint);
        trace.push(OuterRecord {
            round,
            penalty: obj.penalty,
            residual,
            cost: eval.cost,
            inner_iterations: inner.iterations,
            inner_converged: inner.converged,
            grad_norm: inner.grad_norm,
        });
        if residual <= ctol {
            return Ok(RateResult {
                control: eval.control,
                cost: eval.cost,
                residual,
                fluid: eval.fluid,
                trace,
                iterations: total_iter,
                final_grad_norm: inner.grad_norm,
                converged: true,
            });
        }
        for (l, c) in obj.multipliers.iter_mut().zip(&eval.constraint) {
            *l += obj.penalty * c;
        }
        if residual > 0.25 * prev_residual {
            obj.penalty *= 2.0;
        }
        prev_residual = residual;
    }
    let last = trace.last().expect("at least one round");
    Err(Error::Infeasible(format!(
        "constraint residual {:.3e} above tolerance {ctol:.3e} after {} rounds (penalty {:.3e}, cost {:.6})",
        last.residual,
        trace.len(),
        last.penalty,
        last.cost
    )))
}

/// `T Λ*(a / T)` with `Λ(θ) = Σ_k (e^{θ·h_k} − 1) ν_k`, the rate of the
/// terminal value for state-independent shot values.
pub fn legendre_oracle(model: &ShotNoiseModel, target: &[f64], horizon: f64) -> Result<f64> {
    if !model.is_state_independent() {
        return Err(Error::Unsupported(
            "legendre_oracle needs state-independent shot values".into(),
        ));
    }
    let d = model.dim();
    if target.len() != d || target.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return invalid("target must be a finite nonnegative vector of model dimension");
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return invalid(format!("horizon must be positive, got {horizon}"));
    }
    let zero = vec![0.0; d];
    let atoms: Vec<(Vec<f64>, f64)> = (0..model.marks().len())
        .map(|k| (model.shot_value(k, &zero), model.marks().weight(k)))
        .filter(|(h, _)| h.iter().any(|v| *v != 0.0))
        .collect();

    if target.iter().all(|v| *v == 0.0) {
        // θ → −∞: only the no-jump cost remains
        return Ok(horizon * atoms.iter().map(|(_, w)| w).sum::<f64>());
    }
    if !in_cone(&atoms, target) {
        return Err(Error::Infeasible(format!(
            "target {target:?} is outside the reachable cone"
        )));
    }

    // minimize f(θ) = T Λ(θ) − θ·a; the rate is −min f
    let f_and_grad = |theta: &[f64]| -> (f64, Vec<f64>) {
        let mut f = -dot(theta, target);
        let mut g: Vec<f64> = target.iter().map(|a| -a).collect();
        for (h, w) in &atoms {
            let e = dot(theta, h).exp();
            f += horizon * w * (e - 1.0);
            for i in 0..d {
                g[i] += horizon * w * h[i] * e;
            }
        }
        (f, g)
    };

    if d == 1 {
        let a = target[0];
        let mut theta = 0.0;
        let (mut f, mut g) = f_and_grad(&[theta]);
        for _ in 0..500 {
            if g[0].abs() <= 1e-15 * a.max(1.0) {
                break;
            }
            let curv: f64 = atoms
                .iter()
                .map(|(h, w)| horizon * w * h[0] * h[0] * (theta * h[0]).exp())
                .sum();
            let mut step = -g[0] / curv;
            let mut accepted = false;
            for _ in 0..100 {
                let (fnew, gnew) = f_and_grad(&[theta + step]);
                if fnew.is_finite() && fnew <= f + 1e-4 * step * g[0] {
                    theta += step;
                    f = fnew;
                    g = gnew;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        return Ok(-f);
    }

    let out = lbfgs(
        vec![0.0; d],
        &LbfgsOptions {
            max_iter: 5000,
            gtol: 1e-13,
            ..LbfgsOptions::default()
        },
        f_and_grad,
    );
    Ok(-out.f)
}

/// Whether `a` lies in the closed cone generated by the shot values, by
/// projected coordinate descent on `min_{c ≥ 0} ‖Σ c_k h_k − a‖²`.
fn in_cone(atoms: &[(Vec<f64>, f64)], a: &[f64]) -> bool {
    let d = a.len();
    let mut c = vec![0.0; atoms.len()];
    let mut r: Vec<f64> = a.iter().map(|v| -v).collect();
    let tol = 1e-9 * norm(a).max(1.0);
    for _ in 0..20_000 {
        for (k, (h, _)) in atoms.iter().enumerate() {
            let hh = dot(h, h);
            let new = (c[k] - dot(h, &r) / hh).max(0.0);
            let delta = new - c[k];
            if delta != 0.0 {
                for i in 0..d {
                    r[i] += delta * h[i];
                }
                c[k] = new;
            }
        }
        if norm(&r) <= tol {
            return true;
        }
    }
    false
}
