//! Controls, the entropy cost `L_T`, and the controlled fluid equation
//!
//! ```text
//! ξ(t) = ∫_0^t Σ_k h(z_k, ξ(s)) g(s, k) ν_k ds
//! ```
//!
//! solved by Picard iteration on consecutive subintervals short enough for
//! the integral map to contract by a factor of at least two.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{dist, norm};
use crate::model::{MarkSpace, ShotNoiseModel};

/// `ℓ(r) = r log r − r + 1` with `0 log 0 = 0`.
pub fn ell(r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return invalid(format!("ell is defined on [0, inf), got {r}"));
    }
    Ok(ell_unchecked(r))
}

#[inline]
pub(crate) fn ell_unchecked(r: f64) -> f64 {
    if r == 0.0 {
        1.0
    } else {
        r * r.ln() - r + 1.0
    }
}

/// Nonnegative intensity multiplier, piecewise constant on
/// `time_grid × atoms`. `values[j][k]` is the level on cell `j` for atom `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawControl")]
pub struct Control {
    time_grid: Vec<f64>,
    values: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    time_grid: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<RawControl> for Control {
    type Error = Error;

    fn try_from(raw: RawControl) -> Result<Self> {
        Control::new(raw.time_grid, raw.values)
    }
}

impl Control {
    pub fn new(time_grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if time_grid.len() < 2 {
            return invalid("control time grid needs at least two points");
        }
        if time_grid[0] != 0.0 {
            return invalid("control time grid must start at 0");
        }
        if time_grid.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return invalid("control time grid must be finite and strictly increasing");
        }
        let cells = time_grid.len() - 1;
        if values.len() != cells {
            return invalid(format!("control has {} value rows for {cells} cells", values.len()));
        }
        let k = values[0].len();
        if k == 0 {
            return invalid("control needs at least one atom column");
        }
        for row in &values {
            if row.len() != k {
                return invalid("control value rows must all have the same length");
            }
            if row.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return invalid("control values must be finite and nonnegative");
            }
        }
        Ok(Self { time_grid, values })
    }

    /// `g ≡ level` on `cells` uniform cells over `[0, horizon]`.
    pub fn constant(horizon: f64, cells: usize, atoms: usize, level: f64) -> Result<Self> {
        Self::from_fn(horizon, cells, atoms, |_, _| level)
    }

    /// `g ≡ 1` on the single cell `[0, horizon]`: the uncontrolled intensity.
    pub fn unit(horizon: f64, atoms: usize) -> Result<Self> {
        Self::constant(horizon, 1, atoms, 1.0)
    }

    /// Uniform cells with `values[j][k] = f(j, k)`.
    pub fn from_fn(horizon: f64, cells: usize, atoms: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if cells == 0 {
            return invalid("control needs at least one cell");
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        let grid = uniform_grid(horizon, cells);
        let values = (0..cells).map(|j| (0..atoms).map(|k| f(j, k)).collect()).collect();
        Self::new(grid, values)
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn atoms(&self) -> usize {
        self.values[0].len()
    }

    pub fn horizon(&self) -> f64 {
        *self.time_grid.last().unwrap()
    }

    pub fn value(&self, cell: usize, atom: usize) -> f64 {
        self.values[cell][atom]
    }

    pub fn cell_width(&self, cell: usize) -> f64 {
        self.time_grid[cell + 1] - self.time_grid[cell]
    }

    /// Cell containing `t`; cells are `[t_j, t_{j+1})` and the last one is
    /// closed at the horizon.
    pub fn cell_of(&self, t: f64) -> usize {
        let j = self.time_grid.partition_point(|&s| s <= t);
        j.saturating_sub(1).min(self.cells() - 1)
    }

    /// `g(t, k)`.
    pub fn at(&self, t: f64, atom: usize) -> f64 {
        self.values[self.cell_of(t)][atom]
    }

    pub fn is_identically(&self, level: f64) -> bool {
        self.values.iter().flatten().all(|g| *g == level)
    }

    /// Checks that the control matches a mark space with `atoms` atoms and
    /// the horizon `horizon`.
    pub fn check_compatible(&self, atoms: usize, horizon: f64) -> Result<()> {
        if self.atoms() != atoms {
            return invalid(format!(
                "control has {} atom columns, mark space has {atoms}",
                self.atoms()
            ));
        }
        let t = self.horizon();
        if (t - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return invalid(format!("control horizon {t} differs from model horizon {horizon}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn uniform_grid(horizon: f64, cells: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=cells).map(|j| horizon * j as f64 / cells as f64).collect();
    g[cells] = horizon;
    g
}

/// `L_T(g) = Σ_j Δt_j Σ_k ν_k ℓ(g_jk)`.
pub fn cost_lt(control: &Control, marks: &MarkSpace) -> Result<f64> {
    control.check_compatible(marks.len(), control.horizon())?;
    let mut total = 0.0;
    for j in 0..control.cells() {
        let dt = control.cell_width(j);
        let row: f64 = marks
            .weights()
            .zip(&control.values[j])
            .map(|(w, &g)| w * ell_unchecked(g))
            .sum();
        total += dt * row;
    }
    Ok(total)
}

/// Solver settings for [`solve_controlled_ode`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidOptions {
    /// Sup-norm change between Picard iterates at which a block is accepted.
    pub tol: f64,
    /// Minimum trapezoid steps per control cell.
    pub nodes_per_cell: usize,
    /// Minimum total trapezoid steps over `[0, T]`.
    pub min_total_nodes: usize,
    pub max_iterations: usize,
    /// Upper bound on the contraction estimate of each Picard block.
    pub contraction: f64,
}

impl Default for FluidOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            nodes_per_cell: 32,
            min_total_nodes: 4096,
            max_iterations: 200,
            contraction: 0.5,
        }
    }
}

const MAX_NODES: usize = 20_000_000;

/// Quadrature nodes, the control cell of each step, and the Picard blocks.
#[derive(Clone, Debug)]
pub(crate) struct Discretization {
    pub nodes: Vec<f64>,
    pub step_cell: Vec<usize>,
    /// Inclusive node ranges `[start, end]`; consecutive blocks share an endpoint.
    pub blocks: Vec<(usize, usize)>,
    pub block_kappa: Vec<f64>,
}

impl Discretization {
    pub fn build(model: &ShotNoiseModel, control: &Control, opts: &FluidOptions) -> Result<Self> {
        if !(opts.contraction > 0.0 && opts.contraction < 1.0) {
            return invalid("contraction target must lie in (0, 1)");
        }
        let lip = &model.envelopes().lipschitz;
        let cells = control.cells();
        let per_cell_min = opts.nodes_per_cell.max(1).max(opts.min_total_nodes.div_ceil(cells));
        let mut nodes = Vec::with_capacity(per_cell_min * cells + 1);
        let mut step_cell = Vec::with_capacity(per_cell_min * cells);
        let mut step_kappa = Vec::with_capacity(per_cell_min * cells);
        nodes.push(0.0);
        for j in 0..cells {
            let (a, b) = (control.time_grid[j], control.time_grid[j + 1]);
            let rate: f64 = (0..control.atoms())
                .map(|k| lip[k] * control.values[j][k] * model.marks().weight(k))
                .sum();
            let kappa_cell = rate * (b - a);
            let needed = (kappa_cell / (0.5 * opts.contraction)).ceil();
            if !needed.is_finite() || needed > MAX_NODES as f64 {
                return invalid(format!(
                    "control too large to discretize (cell {j}, kappa {kappa_cell:.3e})"
                ));
            }
            let n = per_cell_min.max(needed as usize);
            if nodes.len() + n > MAX_NODES {
                return invalid("fluid discretization exceeds the node budget");
            }
            for i in 1..=n {
                let t = if i == n { b } else { a + (b - a) * i as f64 / n as f64 };
                let prev = *nodes.last().unwrap();
                nodes.push(t);
                step_cell.push(j);
                step_kappa.push(rate * (t - prev));
            }
        }

        let mut blocks = Vec::new();
        let mut block_kappa = Vec::new();
        let mut start = 0;
        let mut acc = 0.0;
        for (l, &kap) in step_kappa.iter().enumerate() {
            if l > start && acc + kap > opts.contraction {
                blocks.push((start, l));
                block_kappa.push(acc);
                start = l;
                acc = 0.0;
            }
            acc += kap;
        }
        blocks.push((start, step_kappa.len()));
        block_kappa.push(acc);
        Ok(Self {
            nodes,
            step_cell,
            blocks,
            block_kappa,
        })
    }
}

/// Piecewise-linear fluid path on the quadrature nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidSolution {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `times.len() × dim`.
    pub values: Vec<f64>,
    pub picard_iterations: Vec<usize>,
    /// Largest final Picard change over all blocks.
    pub achieved_tolerance: f64,
    #[serde(skip)]
    pub(crate) step_cell: Vec<usize>,
}

impl FluidSolution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.len() - 1)
    }

    /// Linear interpolation; clamps outside `[0, T]`.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.len();
        if t <= self.times[0] {
            return self.value(0).to_vec();
        }
        if t >= self.times[n - 1] {
            return self.value(n - 1).to_vec();
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.value(i)
            .iter()
            .zip(self.value(i + 1))
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for i in 1..=self.dim {
            write!(w, ",xi{i}")?;
        }
        writeln!(w)?;
        for (i, t) in self.times.iter().enumerate() {
            write!(w, "{}", fmt_f64(*t))?;
            for v in self.value(i) {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `Σ_k g_ck ν_k h(z_k, x)` summed against the per-atom shot values at one node.
fn drift(hk: &[f64], weights: &[f64], out: &mut [f64]) {
    let d = out.len();
    out.fill(0.0);
    for (k, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for i in 0..d {
            out[i] += w * hk[k * d + i];
        }
    }
}

/// Solves the controlled fluid equation for `g = control`.
pub fn solve_controlled_ode(model: &ShotNoiseModel, control: &Control, opts: &FluidOptions) -> Result<FluidSolution> {
    control.check_compatible(model.marks().len(), model.horizon())?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {}", opts.tol));
    }
    let disc = Discretization::build(model, control, opts)?;
    solve_on(model, control, &disc, opts)
}

pub(crate) fn solve_on(
    model: &ShotNoiseModel,
    control: &Control,
    disc: &Discretization,
    opts: &FluidOptions,
) -> Result<FluidSolution> {
    let d = model.dim();
    let kk = model.marks().len();
    let n_nodes = disc.nodes.len();
    let mut xi = vec![0.0; n_nodes * d];
    // cell weights g_jk ν_k
    let cell_w: Vec<Vec<f64>> = (0..control.cells())
        .map(|j| (0..kk).map(|k| control.value(j, k) * model.marks().weight(k)).collect())
        .collect();

    let mut iterations = Vec::with_capacity(disc.blocks.len());
    let mut achieved = 0.0_f64;
    let mut hk = vec![0.0; (n_nodes) * kk * d];
    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    let mut new_state = vec![0.0; d];

    for (b, &(s, e)) in disc.blocks.iter().enumerate() {
        let start: Vec<f64> = xi[s * d..(s + 1) * d].to_vec();
        for l in s + 1..=e {
            xi[l * d..(l + 1) * d].copy_from_slice(&start);
        }
        let mut it = 0;
        loop {
            it += 1;
            for l in s..=e {
                for k in 0..kk {
                    let (x, h) = (&xi[l * d..(l + 1) * d], &mut hk[(l * kk + k) * d..(l * kk + k + 1) * d]);
                    model.shot_value_into(k, x, h);
                }
            }
            let mut change = 0.0_f64;
            let mut scale = norm(&start);
            let mut acc = start.clone();
            for l in s..e {
                let w = &cell_w[disc.step_cell[l]];
                drift(&hk[l * kk * d..(l + 1) * kk * d], w, &mut fa);
                drift(&hk[(l + 1) * kk * d..(l + 2) * kk * d], w, &mut fb);
                let half = 0.5 * (disc.nodes[l + 1] - disc.nodes[l]);
                for i in 0..d {
                    acc[i] += half * (fa[i] + fb[i]);
                }
                new_state.copy_from_slice(&acc);
                let slot = &mut xi[(l + 1) * d..(l + 2) * d];
                change = change.max(dist(slot, &new_state));
                slot.copy_from_slice(&new_state);
                scale = scale.max(norm(&new_state));
            }
            let floor = 16.0 * f64::EPSILON * scale.max(1.0);
            if change <= opts.tol || change <= floor {
                achieved = achieved.max(change);
                break;
            }
            if it >= opts.max_iterations {
                return Err(Error::NonConvergence {
                    iterations: it,
                    kappa: disc.block_kappa[b],
                    residual: change,
                });
            }
        }
        iterations.push(it);
    }

    Ok(FluidSolution {
        dim: d,
        times: disc.nodes.clone(),
        values: xi,
        picard_iterations: iterations,
        achieved_tolerance: achieved,
        step_cell: disc.step_cell.clone(),
    })
}

/// `max_i ‖ξ(t_i) − ∫_0^{t_i} Σ_k h(z_k, ξ(s)) g(s, k) ν_k ds‖` with the
/// integral re-evaluated by the trapezoid rule on each step split `refine`
/// times and `ξ` interpolated linearly.
pub fn fluid_residual(model: &ShotNoiseModel, control: &Control, sol: &FluidSolution, refine: usize) -> Result<f64> {
    if refine == 0 {
        return invalid("refinement factor must be positive");
    }
    control.check_compatible(model.marks().len(), model.horizon())?;
    let d = model.dim();
    let kk = model.marks().len();
    let mut acc = vec![0.0; d];
    let mut worst = norm(sol.value(0));
    let mut h = vec![0.0; d];
    let eval = |x: &[f64], cell: usize, out: &mut [f64], h: &mut [f64]| {
        out.fill(0.0);
        for k in 0..kk {
            let w = control.value(cell, k) * model.marks().weight(k);
            model.shot_value_into(k, x, h);
            for i in 0..d {
                out[i] += w * h[i];
            }
        }
    };
    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    for l in 0..sol.len() - 1 {
        let (t0, t1) = (sol.times[l], sol.times[l + 1]);
        let cell = control.cell_of(0.5 * (t0 + t1));
        let (x0, x1) = (sol.value(l), sol.value(l + 1));
        let interp = |w: f64| -> Vec<f64> { x0.iter().zip(x1).map(|(a, b)| a + w * (b - a)).collect() };
        for r in 0..refine {
            let (wa, wb) = (r as f64 / refine as f64, (r + 1) as f64 / refine as f64);
            eval(&interp(wa), cell, &mut fa, &mut h);
            eval(&interp(wb), cell, &mut fb, &mut h);
            let half = 0.5 * (t1 - t0) * (wb - wa);
            for i in 0..d {
                acc[i] += half * (fa[i] + fb[i]);
            }
        }
        worst = worst.max(dist(x1, &acc));
    }
    Ok(worst)
}
