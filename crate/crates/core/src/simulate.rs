//! Poisson random measure realizations, the scaled state-dependent path
//!
//! ```text
//! X^ε(t) = ε Σ_{s_i ≤ t} H_ε(ε⁻¹(t − s_i), z_i, ε⁻¹ X^ε(s_i−))
//! ```
//!
//! and the likelihood ratio attached to a controlled realization.
//!
//! Every replication draws from its own ChaCha8 stream `(seed, stream)`, so
//! results do not depend on how replications are scheduled across threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fluid::{Control, FluidSolution};
use crate::io::fmt_f64;
use crate::linalg::dist;
use crate::model::{MarkSpace, ShotNoiseModel};

/// Number of uniform intervals in the default output grid.
pub const DEFAULT_GRID_INTERVALS: usize = 512;
/// Above this many events the default grid no longer includes event times.
pub const MAX_GRID_EVENTS: usize = 100_000;

pub fn replication_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub atom: usize,
}

/// Realized points of the (possibly controlled) Poisson random measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSet {
    pub epsilon: f64,
    pub horizon: f64,
    /// Sorted by time; ties keep generation order.
    pub events: Vec<Event>,
    pub seed: u64,
    pub stream: u64,
    /// Control the points were drawn under; `None` for the uncontrolled measure.
    pub control: Option<Control>,
}

impl EventSet {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_csv<W: Write>(&self, marks: &MarkSpace, mut w: W) -> Result<()> {
        writeln!(w, "s,atom_id")?;
        for e in &self.events {
            writeln!(w, "{},{}", fmt_f64(e.time), marks.atoms()[e.atom].id)?;
        }
        Ok(())
    }
}

/// Draws the points of a Poisson random measure on `[0, T] × marks` with
/// intensity `ε⁻¹ g(s, k) ν_k ds`.
///
/// Each control cell `j` and atom `k` receives a Poisson number of points
/// with mean `ε⁻¹ g_jk ν_k Δt_j`, placed uniformly in the cell. `None` uses
/// the unit control on the single cell `[0, T]`.
pub fn simulate_prm(
    marks: &MarkSpace,
    horizon: f64,
    eps: f64,
    control: Option<&Control>,
    seed: u64,
    stream: u64,
) -> Result<EventSet> {
    if !(eps.is_finite() && eps > 0.0) {
        return invalid(format!("epsilon must be positive, got {eps}"));
    }
    let unit;
    let g = match control {
        Some(c) => c,
        None => {
            unit = Control::unit(horizon, marks.len())?;
            &unit
        }
    };
    g.check_compatible(marks.len(), horizon)?;

    let mut rng = replication_rng(seed, stream);
    let mut events = Vec::new();
    for j in 0..g.cells() {
        let (a, b) = (g.time_grid()[j], g.time_grid()[j + 1]);
        for k in 0..marks.len() {
            let mean = g.value(j, k) * marks.weight(k) * (b - a) / eps;
            if !mean.is_finite() {
                return invalid(format!("cell intensity overflow (cell {j}, atom {k})"));
            }
            if mean <= 0.0 {
                continue;
            }
            let count = Poisson::new(mean)
                .map_err(|e| Error::InvalidArgument(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng) as u64;
            for _ in 0..count {
                let u: f64 = rng.random();
                let t = (a + (b - a) * u).min(b);
                events.push(Event { time: t, atom: k });
            }
        }
    }
    events.sort_by(|x, y| x.time.total_cmp(&y.time));
    Ok(EventSet {
        epsilon: eps,
        horizon,
        events,
        seed,
        stream,
        control: control.cloned(),
    })
}

/// Controlled points by thinning: a dominating measure with intensity
/// `ε⁻¹ ḡ ν_k` is drawn, and a point at `(s, k)` with auxiliary level
/// `r ~ U[0, ε⁻¹ ḡ]` is kept when `r ≤ ε⁻¹ g(s, k)`.
///
/// Exact for any measurable `g ≤ ḡ`; the returned set carries no control.
pub fn simulate_prm_thinned(
    marks: &MarkSpace,
    horizon: f64,
    eps: f64,
    intensity: impl Fn(f64, usize) -> f64,
    bound: f64,
    seed: u64,
    stream: u64,
) -> Result<EventSet> {
    if !(bound.is_finite() && bound > 0.0) {
        return invalid(format!("thinning bound must be positive, got {bound}"));
    }
    let dominating = Control::constant(horizon, 1, marks.len(), bound)?;
    let mut base = simulate_prm(marks, horizon, eps, Some(&dominating), seed, stream)?;
    let mut rng = replication_rng(seed, stream.wrapping_add(1 << 63));
    let mut kept = Vec::with_capacity(base.events.len());
    for e in base.events {
        let g = intensity(e.time, e.atom);
        if !(g.is_finite() && g >= 0.0) || g > bound * (1.0 + 1e-12) {
            return invalid(format!("intensity {g} at t = {} outside [0, {bound}]", e.time));
        }
        let r: f64 = rng.random::<f64>() * bound / eps;
        if r <= g / eps {
            kept.push(e);
        }
    }
    base.events = kept;
    base.control = None;
    Ok(base)
}

/// Scaled path sampled on an output grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub epsilon: f64,
    pub dim: usize,
    pub grid: Vec<f64>,
    /// Row-major `grid.len() × dim`.
    pub values: Vec<f64>,
    pub events: EventSet,
}

impl Path {
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.len() - 1)
    }

    /// `max_t ‖X^ε(t) − ξ(t)‖` over the path grid.
    ///
    /// The default grid contains every event time and the next representable
    /// time after it, so for step shots this is the exact sup distance to a
    /// monotone fluid path.
    pub fn sup_distance(&self, fluid: &FluidSolution) -> f64 {
        self.grid
            .iter()
            .enumerate()
            .map(|(i, &t)| dist(self.value(i), &fluid.at(t)))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for i in 1..=self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for (i, t) in self.grid.iter().enumerate() {
            write!(w, "{}", fmt_f64(*t))?;
            for v in self.value(i) {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `intervals` uniform steps over `[0, T]` plus, when there are at most
/// [`MAX_GRID_EVENTS`] events, every event time `s` and the next float above it.
pub fn default_grid(events: &EventSet, intervals: usize) -> Vec<f64> {
    let t_end = events.horizon;
    let intervals = intervals.max(1);
    let mut grid: Vec<f64> = (0..=intervals).map(|i| t_end * i as f64 / intervals as f64).collect();
    grid[intervals] = t_end;
    if events.len() <= MAX_GRID_EVENTS {
        for e in &events.events {
            grid.push(e.time);
            let up = e.time.next_up();
            if up <= t_end {
                grid.push(up);
            }
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
    }
    grid
}

fn check_events(model: &ShotNoiseModel, events: &EventSet) -> Result<()> {
    let t_end = model.horizon();
    let mut prev = f64::NEG_INFINITY;
    for e in &events.events {
        if !(e.time >= 0.0 && e.time <= t_end) {
            return invalid(format!("event at t = {} outside [0, {t_end}]", e.time));
        }
        if e.atom >= model.marks().len() {
            return invalid(format!("event atom index {} out of range", e.atom));
        }
        if e.time < prev {
            return invalid("events must be sorted by time");
        }
        prev = e.time;
    }
    if !(events.epsilon.is_finite() && events.epsilon > 0.0) {
        return invalid("event set epsilon must be positive");
    }
    Ok(())
}

/// Evolves the scaled process driven by `events` and samples it on `grid`.
///
/// Pre-jump states `X^ε(s_i−)` are computed once in event order; grid values
/// are then direct evaluations of the shot sum. Step shots (instantaneous
/// shape, time-constant remainder) use a running sum.
pub fn evolve_scaled_path(model: &ShotNoiseModel, events: &EventSet, grid: &[f64]) -> Result<Path> {
    check_events(model, events)?;
    if grid.is_empty() {
        return invalid("output grid is empty");
    }
    let t_end = model.horizon();
    if grid.iter().any(|t| !(*t >= 0.0 && *t <= t_end)) {
        return invalid(format!("output grid must lie in [0, {t_end}]"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("output grid must be strictly increasing");
    }
    let values = if model.has_step_shots() {
        evolve_step(model, events, grid)
    } else {
        evolve_general(model, events, grid)
    };
    Ok(Path {
        epsilon: events.epsilon,
        dim: model.dim(),
        grid: grid.to_vec(),
        values,
        events: events.clone(),
    })
}

/// Path on the default grid.
pub fn evolve_default(model: &ShotNoiseModel, events: &EventSet) -> Result<Path> {
    let grid = default_grid(events, DEFAULT_GRID_INTERVALS);
    evolve_scaled_path(model, events, &grid)
}

/// `X^ε(T)`.
pub fn terminal_state(model: &ShotNoiseModel, events: &EventSet) -> Result<Vec<f64>> {
    let p = evolve_scaled_path(model, events, &[model.horizon()])?;
    Ok(p.values)
}

fn evolve_step(model: &ShotNoiseModel, events: &EventSet, grid: &[f64]) -> Vec<f64> {
    let d = model.dim();
    let eps = events.epsilon;
    let mut total = vec![0.0; d];
    let mut before = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut shot = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut last_time = f64::NEG_INFINITY;
    let mut next = 0;
    let mut out = Vec::with_capacity(grid.len() * d);
    for &t in grid {
        while next < events.len() && events.events[next].time < t {
            let e = events.events[next];
            if e.time > last_time {
                before.copy_from_slice(&total);
                last_time = e.time;
            }
            for (yi, b) in y.iter_mut().zip(&before) {
                *yi = eps * b;
            }
            model.shot_at_scaled_state(eps, 1.0, e.atom, &y, &mut shot, &mut scratch);
            for (s, v) in total.iter_mut().zip(&shot) {
                *s += v;
            }
            next += 1;
        }
        out.extend(total.iter().map(|s| eps * s));
    }
    out
}

fn evolve_general(model: &ShotNoiseModel, events: &EventSet, grid: &[f64]) -> Vec<f64> {
    let d = model.dim();
    let eps = events.epsilon;
    let ev = &events.events;
    let n = ev.len();
    let mut frozen = vec![0.0; n * d];
    let mut sum = vec![0.0; d];
    let mut shot = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for i in 0..n {
        sum.fill(0.0);
        for m in 0..i {
            if ev[m].time >= ev[i].time {
                break;
            }
            let tau = (ev[i].time - ev[m].time) / eps;
            model.shot_at_scaled_state(
                eps,
                tau,
                ev[m].atom,
                &frozen[m * d..(m + 1) * d],
                &mut shot,
                &mut scratch,
            );
            for (s, v) in sum.iter_mut().zip(&shot) {
                *s += v;
            }
        }
        for (f, s) in frozen[i * d..(i + 1) * d].iter_mut().zip(&sum) {
            *f = eps * s;
        }
    }
    let mut out = Vec::with_capacity(grid.len() * d);
    for &t in grid {
        sum.fill(0.0);
        for (m, e) in ev.iter().enumerate() {
            if e.time > t {
                break;
            }
            let tau = (t - e.time) / eps;
            model.shot_at_scaled_state(eps, tau, e.atom, &frozen[m * d..(m + 1) * d], &mut shot, &mut scratch);
            for (s, v) in sum.iter_mut().zip(&shot) {
                *s += v;
            }
        }
        out.extend(sum.iter().map(|s| eps * s));
    }
    out
}

/// Log of [`likelihood_weight`].
pub fn log_likelihood_weight(events: &EventSet, control: &Control, marks: &MarkSpace, horizon: f64) -> Result<f64> {
    control.check_compatible(marks.len(), horizon)?;
    let eps = events.epsilon;
    let mut point_terms = 0.0;
    for e in &events.events {
        if e.atom >= marks.len() || !(e.time >= 0.0 && e.time <= horizon) {
            return invalid(format!("event ({}, {}) outside the control domain", e.time, e.atom));
        }
        let g = control.at(e.time, e.atom);
        if g <= 0.0 {
            return Err(Error::DegenerateWeight {
                time: e.time,
                atom: e.atom,
            });
        }
        point_terms -= g.ln();
    }
    let mut compensator = 0.0;
    for j in 0..control.cells() {
        let row: f64 = marks
            .weights()
            .zip(&control.values()[j])
            .map(|(w, g)| w * (g - 1.0))
            .sum();
        compensator += control.cell_width(j) * row;
    }
    Ok(point_terms + compensator / eps)
}

/// Likelihood ratio `dP/dQ` of a realization drawn under intensity
/// `ε⁻¹ g ν_T` with respect to the uncontrolled measure:
/// `exp{ −Σ_i log g(s_i, z_i) + ε⁻¹ ∫ (g − 1) dν_T }`.
pub fn likelihood_weight(events: &EventSet, control: &Control, marks: &MarkSpace, horizon: f64) -> Result<f64> {
    log_likelihood_weight(events, control, marks, horizon).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::{solve_controlled_ode, FluidOptions};
    use crate::model::{Atom, RemainderFamily, ShapeFamily, ValueFamily};
    use std::sync::Arc;

    fn unit_marks() -> MarkSpace {
        MarkSpace::new(vec![Atom::new("z0", vec![1.0], 1.0)]).unwrap()
    }

    fn events_at(eps: f64, times: &[f64]) -> EventSet {
        EventSet {
            epsilon: eps,
            horizon: 1.0,
            events: times.iter().map(|&t| Event { time: t, atom: 0 }).collect(),
            seed: 0,
            stream: 0,
            control: None,
        }
    }

    #[test]
    fn zero_control_gives_no_events() {
        let g = Control::constant(1.0, 4, 1, 0.0).unwrap();
        let ev = simulate_prm(&unit_marks(), 1.0, 0.001, Some(&g), 5, 0).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn same_seed_same_events() {
        let m = unit_marks();
        let a = simulate_prm(&m, 1.0, 0.01, None, 42, 3).unwrap();
        let b = simulate_prm(&m, 1.0, 0.01, None, 42, 3).unwrap();
        let c = simulate_prm(&m, 1.0, 0.01, None, 42, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.events, c.events);
        let unit = Control::unit(1.0, 1).unwrap();
        let d = simulate_prm(&m, 1.0, 0.01, Some(&unit), 42, 3).unwrap();
        assert_eq!(a.events, d.events);
    }

    #[test]
    fn events_sorted_and_in_range() {
        let marks = MarkSpace::new(vec![Atom::new("a", vec![1.0], 1.0), Atom::new("b", vec![2.0], 3.0)]).unwrap();
        let g = Control::from_fn(2.0, 5, 2, |j, k| (j + k) as f64 * 0.5).unwrap();
        let ev = simulate_prm(&marks, 2.0, 0.05, Some(&g), 1, 0).unwrap();
        assert!(ev.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(ev.events.iter().all(|e| (0.0..=2.0).contains(&e.time)));
        // cell 0 has g = 0 for atom 0
        assert!(ev.events.iter().all(|e| !(e.atom == 0 && e.time < 0.4)));
    }

    #[test]
    fn mismatched_control_rejected() {
        let g = Control::constant(2.0, 1, 1, 1.0).unwrap();
        assert!(simulate_prm(&unit_marks(), 1.0, 0.1, Some(&g), 0, 0).is_err());
        assert!(simulate_prm(&unit_marks(), 1.0, 0.0, None, 0, 0).is_err());
    }

    #[test]
    fn instantaneous_unit_shots_count_events() {
        let model = ShotNoiseModel::unit_poisson();
        let ev = simulate_prm(model.marks(), 1.0, 0.01, None, 9, 0).unwrap();
        let x = terminal_state(&model, &ev).unwrap();
        assert_eq!(x[0], 0.01 * ev.len() as f64);
        let path = evolve_default(&model, &ev).unwrap();
        assert_eq!(path.value(0), &[0.0]);
        assert!(path.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn no_events_gives_zero_path() {
        let model = ShotNoiseModel::unit_poisson();
        let path = evolve_scaled_path(&model, &events_at(0.1, &[]), &[0.0, 0.5, 1.0]).unwrap();
        assert!(path.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn event_outside_horizon_rejected() {
        let model = ShotNoiseModel::unit_poisson();
        assert!(evolve_scaled_path(&model, &events_at(0.1, &[0.5, 1.5]), &[1.0]).is_err());
        assert!(evolve_scaled_path(&model, &events_at(0.1, &[0.5, 0.2]), &[1.0]).is_err());
        assert!(evolve_scaled_path(&model, &events_at(0.1, &[0.5]), &[0.5, 0.5]).is_err());
    }

    #[test]
    fn step_fast_path_matches_general_recursion() {
        // affine h makes the pre-jump state matter
        let marks = MarkSpace::new(vec![
            Atom::new("a", vec![0.5, 1.0], 1.0),
            Atom::new("b", vec![2.0, 0.1], 0.5),
        ])
        .unwrap();
        let value = Arc::new(ValueFamily::Affine {
            matrix: Some(vec![vec![0.3, 0.1], vec![0.0, 0.2]]),
        });
        let rem = Arc::new(RemainderFamily::ScaledNorm { c: 0.2 });
        let step = ShotNoiseModel::new(
            2,
            1.0,
            marks.clone(),
            Arc::new(ShapeFamily::Instantaneous),
            value.clone(),
            rem.clone(),
        )
        .unwrap();

        #[derive(Debug)]
        struct SlowInstant;
        impl crate::model::ShotShape for SlowInstant {
            fn eval(&self, t: f64, atom: &Atom, x: &[f64], v: &dyn crate::model::ShotValue, out: &mut [f64]) {
                ShapeFamily::Instantaneous.eval(t, atom, x, v, out)
            }
        }
        let general = ShotNoiseModel::new(2, 1.0, marks, Arc::new(SlowInstant), value, rem).unwrap();
        assert!(step.has_step_shots() && !general.has_step_shots());

        let ev = simulate_prm(step.marks(), 1.0, 0.05, None, 11, 2).unwrap();
        let grid = default_grid(&ev, 64);
        let a = evolve_scaled_path(&step, &ev, &grid).unwrap();
        let b = evolve_scaled_path(&general, &ev, &grid).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn exponential_shots_ramp_between_events() {
        let marks = MarkSpace::new(vec![Atom::new("a", vec![1.0], 1.0)]).unwrap();
        let model = ShotNoiseModel::new(
            1,
            1.0,
            marks,
            Arc::new(ShapeFamily::Exponential { beta: 1.0 }),
            Arc::new(ValueFamily::Payload),
            Arc::new(RemainderFamily::Zero),
        )
        .unwrap();
        let eps = 0.1;
        let path = evolve_scaled_path(&model, &events_at(eps, &[0.2]), &[0.2, 0.3, 1.0]).unwrap();
        assert_eq!(path.values[0], 0.0);
        let expected = eps * (1.0 - (-(0.1) / eps).exp());
        assert!((path.values[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn likelihood_weight_examples() {
        let marks = unit_marks();
        let ev = simulate_prm(&marks, 1.0, 0.1, None, 3, 0).unwrap();
        let one = Control::constant(1.0, 3, 1, 1.0).unwrap();
        assert_eq!(likelihood_weight(&ev, &one, &marks, 1.0).unwrap(), 1.0);

        let two = Control::constant(1.0, 1, 1, 2.0).unwrap();
        let w = likelihood_weight(&events_at(0.5, &[]), &two, &marks, 1.0).unwrap();
        assert!((w - 2f64.exp()).abs() < 1e-14);

        let zero = Control::new(vec![0.0, 0.5, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            likelihood_weight(&events_at(0.1, &[0.25]), &zero, &marks, 1.0),
            Err(Error::DegenerateWeight { .. })
        ));
        assert!(likelihood_weight(&events_at(0.1, &[0.75]), &zero, &marks, 1.0).is_ok());
    }

    #[test]
    fn thinning_matches_piecewise_intensity_mean() {
        let marks = unit_marks();
        let eps = 0.01;
        let g = |t: f64, _k: usize| if t < 0.5 { 0.5 } else { 2.0 };
        let reps = 400;
        let total: usize = (0..reps)
            .map(|r| simulate_prm_thinned(&marks, 1.0, eps, g, 2.0, 17, r).unwrap().len())
            .sum();
        let mean = total as f64 / reps as f64;
        let expected = (0.5 * 0.5 + 2.0 * 0.5) / eps;
        let se = (expected / reps as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected}");
        assert!(simulate_prm_thinned(&marks, 1.0, eps, |_, _| 3.0, 2.0, 0, 0).is_err());
    }

    #[test]
    fn sup_distance_to_fluid() {
        let model = ShotNoiseModel::unit_poisson();
        let fluid = solve_controlled_ode(&model, &Control::unit(1.0, 1).unwrap(), &FluidOptions::default()).unwrap();
        let path = evolve_scaled_path(
            &model,
            &events_at(0.5, &[0.5]),
            &default_grid(&events_at(0.5, &[0.5]), 4),
        )
        .unwrap();
        // X = 0 on [0, 0.5], 0.5 after; ξ(t) = t; worst at t = 0.5 (left) and t = 1
        assert!((path.sup_distance(&fluid) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_formats() {
        let model = ShotNoiseModel::unit_poisson();
        let ev = events_at(0.5, &[0.25]);
        let mut buf = Vec::new();
        ev.write_csv(model.marks(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s,atom_id\n2.5000000000000000e-1,z0\n");
        let path = evolve_scaled_path(&model, &ev, &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,x1\n0.0000000000000000e0,0.0000000000000000e0\n1.0000000000000000e0,5.0000000000000000e-1\n"
        );
    }
}
