//! End-to-end oracle checks on the unit Poisson benchmark and randomized
//! instances. Each check returns a [`Criterion`] with the measured value and
//! the threshold it was held to.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::fluid::{ell_unchecked, solve_controlled_ode, Control, FluidOptions};
use crate::mc::{estimate_is, exact_terminal_tail, ldp_decay_table, DecayMethod, McOptions, ThresholdSet};
use crate::model::{Atom, MarkSpace, RemainderFamily, ShapeFamily, ShotNoiseModel, ValueFamily};
use crate::ratefn::{legendre_oracle, minimize_rate, PenalizedObjective, RateConstraint, RateOptions};
use crate::simulate::{evolve_default, likelihood_weight, simulate_prm};

/// `2 ln 2 − 1`: the rate of `{X(1) ≥ 2}` for the unit Poisson process.
pub const UNIT_POISSON_RATE_AT_2: f64 = 0.386_294_361_119_890_6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Terminal level `a` of the benchmark event `{X(T) ≥ a}`.
    pub target: f64,
    /// Multiplies every tolerance and threshold.
    pub tolerance_scale: f64,
    pub is_replications: u64,
    pub weight_replications: u64,
    pub lln_seeds: u64,
    pub adjoint_instances: usize,
    pub entropy_samples: usize,
    pub threads: Option<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            target: 2.0,
            tolerance_scale: 1.0,
            is_replications: 100_000,
            weight_replications: 100_000,
            lln_seeds: 100,
            adjoint_instances: 20,
            entropy_samples: 10_000,
            threads: None,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target.is_finite() && self.target > 0.0) {
            return invalid("target must be positive");
        }
        if !(self.tolerance_scale.is_finite() && self.tolerance_scale > 0.0) {
            return invalid("tolerance_scale must be positive");
        }
        if self.is_replications < 100 || self.weight_replications < 100 {
            return invalid("replication counts must be at least 100");
        }
        if self.lln_seeds == 0 || self.adjoint_instances == 0 || self.entropy_samples == 0 {
            return invalid("sample counts must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl Criterion {
    pub fn line(&self) -> String {
        format!(
            "{} {} {:<44} measured={:.6e} threshold={:.6e} ({:.2}s) {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.seconds,
            self.detail
        )
    }
}

pub const CRITERIA: [&str; 7] = ["A1", "A2", "A3", "A4", "A5", "A6", "A7"];

/// Runs one criterion on the unit Poisson benchmark.
pub fn run(id: &str, cfg: &VerifyConfig) -> Result<Criterion> {
    run_on(id, cfg, &ShotNoiseModel::unit_poisson())
}

/// Runs one criterion; A1 and A3–A5 use `benchmark`, which must be a
/// one-dimensional single-atom compound Poisson model.
pub fn run_on(id: &str, cfg: &VerifyConfig, benchmark: &ShotNoiseModel) -> Result<Criterion> {
    cfg.validate()?;
    check_benchmark(benchmark)?;
    let start = Instant::now();
    let mut c = match id {
        "A1" => rate_oracle(cfg, benchmark)?,
        "A2" => fluid_closed_form(cfg)?,
        "A3" => lln_convergence(cfg, benchmark)?,
        "A4" => exact_tail_decay(cfg, benchmark)?,
        "A5" => importance_sampling(cfg, benchmark)?,
        "A6" => adjoint_gradient(cfg)?,
        "A7" => entropy_inequalities(cfg)?,
        other => return invalid(format!("unknown criterion '{other}'")),
    };
    c.seconds = start.elapsed().as_secs_f64();
    Ok(c)
}

pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<Criterion>> {
    CRITERIA.iter().map(|id| run(id, cfg)).collect()
}

pub fn check_benchmark(m: &ShotNoiseModel) -> Result<()> {
    let ok = m.dim() == 1
        && m.marks().len() == 1
        && m.is_state_independent()
        && m.has_step_shots()
        && m.remainder_fn().is_zero()
        && m.shot_value(0, &[0.0])[0] > 0.0;
    if !ok {
        return invalid("benchmark must be a one-dimensional single-atom compound Poisson model with positive jumps");
    }
    Ok(())
}

fn tilt_level(cfg: &VerifyConfig, m: &ShotNoiseModel) -> f64 {
    // the optimal constant tilt for the terminal event
    let h = m.shot_value(0, &[0.0])[0];
    cfg.target / (h * m.marks().weight(0) * m.horizon())
}

fn criterion(id: &str, name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> Criterion {
    Criterion {
        id: id.into(),
        name: name.into(),
        passed,
        measured,
        threshold,
        detail,
        seconds: 0.0,
    }
}

/// A1: minimize_rate with a terminal constraint and `J = 16` against the
/// Legendre value.
pub fn rate_oracle(cfg: &VerifyConfig, m: &ShotNoiseModel) -> Result<Criterion> {
    let start = Instant::now();
    let oracle = legendre_oracle(m, &[cfg.target], m.horizon())?;
    let res = minimize_rate(m, &RateConstraint::Terminal(vec![cfg.target]), &RateOptions::default())?;
    let err = (res.cost - oracle).abs();
    let tol = 1e-3 * cfg.tolerance_scale;
    let secs = start.elapsed().as_secs_f64();
    Ok(criterion(
        "A1",
        "rate optimizer vs Legendre value",
        err <= tol && secs < 60.0,
        err,
        tol,
        format!("cost={:.10} oracle={oracle:.10} rounds={}", res.cost, res.trace.len()),
    ))
}

/// A2: `h = 0.7 (1 + x)`, `g ≡ 1` against `ξ(t) = e^{0.7t} − 1`.
pub fn fluid_closed_form(cfg: &VerifyConfig) -> Result<Criterion> {
    let start = Instant::now();
    let marks = MarkSpace::new(vec![Atom::new("c", vec![0.7], 1.0)])?;
    let m = ShotNoiseModel::new(
        1,
        1.0,
        marks,
        Arc::new(ShapeFamily::Instantaneous),
        Arc::new(ValueFamily::Affine { matrix: None }),
        Arc::new(RemainderFamily::Zero),
    )?;
    let opts = FluidOptions {
        tol: 1e-9,
        ..FluidOptions::default()
    };
    let sol = solve_controlled_ode(&m, &Control::unit(1.0, 1)?, &opts)?;
    let err = sol
        .times
        .iter()
        .enumerate()
        .map(|(i, t)| (sol.value(i)[0] - (0.7 * t).exp_m1()).abs())
        .fold(0.0, f64::max);
    let tol = 1e-7 * cfg.tolerance_scale;
    let secs = start.elapsed().as_secs_f64();
    Ok(criterion(
        "A2",
        "fluid solver vs e^{0.7t}-1",
        err <= tol && secs < 5.0,
        err,
        tol,
        format!("nodes={} blocks={}", sol.len(), sol.picard_iterations.len()),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median sup distance between controlled paths and the fluid path, per ε.
pub fn lln_medians(cfg: &VerifyConfig, m: &ShotNoiseModel, epsilons: &[f64]) -> Result<Vec<f64>> {
    let t = m.horizon();
    let g = Control::constant(t, 1, 1, tilt_level(cfg, m))?;
    let fluid = solve_controlled_ode(m, &g, &FluidOptions::default())?;
    epsilons
        .iter()
        .map(|&eps| {
            let d: Result<Vec<f64>> = (0..cfg.lln_seeds)
                .map(|r| {
                    let ev = simulate_prm(m.marks(), t, eps, Some(&g), cfg.seed, r)?;
                    Ok(evolve_default(m, &ev)?.sup_distance(&fluid))
                })
                .collect();
            Ok(median(d?))
        })
        .collect()
}

/// A3: medians strictly decreasing over ε ∈ {1e-1, 1e-2, 1e-3} and below
/// 0.05 at 1e-3.
pub fn lln_convergence(cfg: &VerifyConfig, m: &ShotNoiseModel) -> Result<Criterion> {
    let start = Instant::now();
    let med = lln_medians(cfg, m, &[1e-1, 1e-2, 1e-3])?;
    let decreasing = med.windows(2).all(|w| w[1] < w[0]);
    let tol = 0.05 * cfg.tolerance_scale;
    let secs = start.elapsed().as_secs_f64();
    Ok(criterion(
        "A3",
        "controlled paths converge to fluid path",
        decreasing && med[2] < tol && secs < 120.0,
        med[2],
        tol,
        format!("medians={med:.5?} decreasing={decreasing}"),
    ))
}

/// A4: extrapolated `−ε log p_ε` from exact tails within 15% of the
/// Legendre value.
pub fn exact_tail_decay(cfg: &VerifyConfig, m: &ShotNoiseModel) -> Result<Criterion> {
    let oracle = legendre_oracle(m, &[cfg.target], m.horizon())?;
    let table = ldp_decay_table(
        m,
        &ThresholdSet::single(0, cfg.target),
        &[1.0 / 10.0, 1.0 / 20.0, 1.0 / 40.0],
        &DecayMethod::Exact,
        100,
        cfg.seed,
        &McOptions::default(),
    )?;
    let intercept = table.intercept.unwrap_or(f64::NAN);
    let rel = (intercept - oracle).abs() / oracle;
    let tol = 0.15 * cfg.tolerance_scale;
    Ok(criterion(
        "A4",
        "exact-tail decay extrapolation",
        rel <= tol,
        rel,
        tol,
        format!("intercept={intercept:.6} oracle={oracle:.6}"),
    ))
}

/// Sample mean and standard error of likelihood weights under `g ≡ level`.
pub fn mean_weight(m: &ShotNoiseModel, eps: f64, level: f64, reps: u64, seed: u64) -> Result<(f64, f64)> {
    let t = m.horizon();
    let g = Control::constant(t, 1, m.marks().len(), level)?;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for r in 0..reps {
        let ev = simulate_prm(m.marks(), t, eps, Some(&g), seed, r)?;
        let w = likelihood_weight(&ev, &g, m.marks(), t)?;
        sum += w;
        sumsq += w * w;
    }
    let n = reps as f64;
    let mean = sum / n;
    let se = ((sumsq / n - mean * mean).max(0.0) / n).sqrt();
    Ok((mean, se))
}

/// A5: IS estimate with the optimal constant tilt at ε = 1/40 against the
/// exact tail, and the unit-mean property of the likelihood weight at ε = 0.1.
pub fn importance_sampling(cfg: &VerifyConfig, m: &ShotNoiseModel) -> Result<Criterion> {
    let level = tilt_level(cfg, m);
    let tilt = Control::constant(m.horizon(), 1, 1, level)?;
    let event = ThresholdSet::single(0, cfg.target);
    let exact = exact_terminal_tail(m, 1.0 / 40.0, &event)?;
    let rep = estimate_is(
        m,
        1.0 / 40.0,
        &event,
        &tilt,
        cfg.is_replications,
        cfg.seed,
        &McOptions { threads: cfg.threads },
    )?;
    let z_is = (rep.estimate - exact).abs() / rep.std_error;
    let (w_mean, w_se) = mean_weight(m, 0.1, level, cfg.weight_replications, cfg.seed)?;
    let z_w = (w_mean - 1.0).abs() / w_se;
    let tol = 3.0 * cfg.tolerance_scale;
    let worst = z_is.max(z_w);
    Ok(criterion(
        "A5",
        "importance sampling and weight martingale",
        worst <= tol,
        worst,
        tol,
        format!(
            "p_is={:.6e} se={:.3e} exact={exact:.6e} z={z_is:.2}; mean_w={w_mean:.5} se={w_se:.4} z={z_w:.2}",
            rep.estimate, rep.std_error
        ),
    ))
}

/// A randomized state-dependent model with control parameters `u` and
/// augmented-Lagrangian state.
pub struct AdjointInstance {
    pub model: ShotNoiseModel,
    pub constraint: RateConstraint,
    pub cells: usize,
    pub u: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
}

pub fn random_adjoint_instance(rng: &mut ChaCha8Rng) -> Result<AdjointInstance> {
    let d = rng.random_range(1..=3usize);
    let kk = rng.random_range(1..=3usize);
    let cells = rng.random_range(2..=5usize);
    let atoms = (0..kk)
        .map(|k| {
            let p = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
            Atom::new(format!("z{k}"), p, rng.random_range(0.2..1.5))
        })
        .collect();
    let value = if rng.random_bool(0.7) {
        ValueFamily::Affine {
            matrix: Some(
                (0..d)
                    .map(|_| (0..d).map(|_| rng.random_range(0.0..0.5)).collect())
                    .collect(),
            ),
        }
    } else {
        ValueFamily::NormScaled
    };
    let model = ShotNoiseModel::new(
        d,
        rng.random_range(0.5..1.5),
        MarkSpace::new(atoms)?,
        Arc::new(ShapeFamily::Instantaneous),
        Arc::new(value),
        Arc::new(RemainderFamily::Zero),
    )?;
    let constraint = if rng.random_bool(0.5) {
        RateConstraint::Terminal((0..d).map(|_| rng.random_range(0.2..2.0)).collect())
    } else {
        RateConstraint::Path(
            (1..=cells)
                .map(|j| {
                    (0..d)
                        .map(|_| rng.random_range(0.1..1.0) * j as f64 / cells as f64)
                        .collect()
                })
                .collect(),
        )
    };
    let m = match &constraint {
        RateConstraint::Terminal(_) => d,
        RateConstraint::Path(_) => d * cells,
    };
    let u = (0..cells * kk).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lambda = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(AdjointInstance {
        model,
        constraint,
        cells,
        u,
        multipliers: lambda,
        penalty: rng.random_range(0.5..10.0),
    })
}

/// Relative error `‖∇_adj − ∇_fd‖ / ‖∇_fd‖` with central differences of step `h`.
pub fn adjoint_relative_error(obj: &PenalizedObjective<'_>, u: &[f64], h: f64) -> Result<f64> {
    let (_, grad) = obj.value_and_gradient(u)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..u.len() {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[i] += h;
        dn[i] -= h;
        let fd = (obj.value(&up)? - obj.value(&dn)?) / (2.0 * h);
        num += (fd - grad[i]).powi(2);
        den += fd * fd;
    }
    Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
}

/// A6: adjoint vs central differences on randomized instances.
pub fn adjoint_gradient(cfg: &VerifyConfig) -> Result<Criterion> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA6);
    let mut worst = 0.0_f64;
    let fluid = RateOptions::default().fluid;
    for _ in 0..cfg.adjoint_instances {
        let inst = random_adjoint_instance(&mut rng)?;
        let mut obj = PenalizedObjective::new(&inst.model, &inst.constraint, inst.cells, fluid)?;
        obj.multipliers = inst.multipliers.clone();
        obj.penalty = inst.penalty;
        worst = worst.max(adjoint_relative_error(&obj, &inst.u, 1e-6)?);
    }
    let tol = 1e-5 * cfg.tolerance_scale;
    Ok(criterion(
        "A6",
        "adjoint gradient vs central differences",
        worst <= tol,
        worst,
        tol,
        format!("instances={}", cfg.adjoint_instances),
    ))
}

/// A7: `ab ≤ e^{σa} + ℓ(b)/σ` on random triples, and the basic properties of ℓ.
pub fn entropy_inequalities(cfg: &VerifyConfig) -> Result<Criterion> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA7);
    let tol = 1e-12 * cfg.tolerance_scale;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.entropy_samples {
        let a: f64 = 10.0 - rng.random_range(0.0..10.0); // (0, 10]
        let b = 10.0 - rng.random_range(0.0..10.0);
        let sigma: f64 = rng.random_range(1.0..=10.0);
        let gap = a * b - ((sigma * a).exp() + ell_unchecked(b) / sigma);
        worst = worst.max(gap);
    }
    let young_ok = worst <= 0.0;

    let grid: Vec<f64> = (0..=20_000).map(|i| i as f64 * 1e-3).collect();
    let values: Vec<f64> = grid.iter().map(|&x| ell_unchecked(x)).collect();
    let nonneg = values.iter().all(|v| *v >= -tol);
    let convex = values.windows(3).all(|w| w[0] + w[2] - 2.0 * w[1] >= -tol);
    let zero_at_one = ell_unchecked(1.0) == 0.0;

    // x ≤ ϱ₂(2) ℓ(x) for x ≥ 2, with ϱ₂(2) the grid max of x / ℓ(x)
    let rho2 = (0..=10_000)
        .map(|i| 2.0 + i as f64 * 1e-2)
        .map(|x| x / ell_unchecked(x))
        .fold(0.0, f64::max);
    let mut rho_ok = true;
    for _ in 0..cfg.entropy_samples {
        let x = 2.0 + rng.random_range(0.0..1000.0);
        rho_ok &= x <= rho2 * ell_unchecked(x) * (1.0 + tol);
    }

    Ok(criterion(
        "A7",
        "entropy inequalities and properties of l",
        young_ok && nonneg && convex && zero_at_one && rho_ok,
        worst,
        0.0,
        format!("max(ab - rhs)={worst:.3e} nonneg={nonneg} convex={convex} l(1)=0:{zero_at_one} rho2(2)={rho2:.4} bounded={rho_ok}"),
    ))
}
