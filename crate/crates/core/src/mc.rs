//! Rare-event probabilities for terminal threshold sets
//! `A = {x : x_i ≥ a_i for the listed coordinates}`.
//!
//! Replications are grouped into fixed-size chunks, reduced sequentially
//! inside each chunk and then across chunks in index order, so estimates are
//! bit-identical for any thread count.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::fluid::Control;
use crate::io::fmt_f64;
use crate::model::ShotNoiseModel;
use crate::simulate::{likelihood_weight, simulate_prm, terminal_state};

const CHUNK: u64 = 1024;
pub const MIN_REPLICATIONS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub coord: usize,
    pub value: f64,
}

/// Intersection of terminal coordinate thresholds; empty means the whole space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdSet {
    pub thresholds: Vec<Threshold>,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<Threshold>) -> Self {
        Self { thresholds }
    }

    /// `{x : x_coord ≥ value}`.
    pub fn single(coord: usize, value: f64) -> Self {
        Self::new(vec![Threshold { coord, value }])
    }

    pub fn whole_space() -> Self {
        Self::default()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.thresholds.iter().all(|t| x[t.coord] >= t.value)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for t in &self.thresholds {
            if t.coord >= dim {
                return invalid(format!("threshold coordinate {} out of range for d = {dim}", t.coord));
            }
            if !t.value.is_finite() {
                return invalid("threshold values must be finite");
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        if self.thresholds.is_empty() {
            return "all".into();
        }
        self.thresholds
            .iter()
            .map(|t| format!("x{}(T)>={}", t.coord + 1, t.value))
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Is,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOptions {
    /// Worker cap; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub epsilon: f64,
    pub event: ThresholdSet,
    pub replications: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub relative_error: Option<f64>,
    pub method: Method,
    pub seed: u64,
    pub hits: u64,
    /// One-sided 95% Clopper–Pearson upper bound, reported for zero-hit naive runs.
    pub upper_95: Option<f64>,
    pub threads: usize,
    pub wall_time_secs: f64,
}

impl McReport {
    /// CSV with header `epsilon,event,method,replications,seed,hits,p_hat,se,rel_err,upper_95`.
    /// Wall time and worker count are left out so the file is reproducible.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epsilon,event,method,replications,seed,hits,p_hat,se,rel_err,upper_95"
        )?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(self.epsilon),
            self.event.describe(),
            match self.method {
                Method::Naive => "naive",
                Method::Is => "is",
            },
            self.replications,
            self.seed,
            self.hits,
            fmt_f64(self.estimate),
            fmt_f64(self.std_error),
            opt(self.relative_error),
            opt(self.upper_95),
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Default)]
struct Partial {
    sum: f64,
    sumsq: f64,
    hits: u64,
}

fn with_pool<T: Send>(opts: &McOptions, f: impl FnOnce() -> T + Send) -> Result<T> {
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs `sample(r)` for `r = 0..reps`; each sample returns the estimator
/// value (0 when the event is missed).
fn run<F>(reps: u64, opts: &McOptions, sample: F) -> Result<(Partial, usize)>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    with_pool(opts, || {
        let threads = rayon::current_num_threads();
        let chunks = reps.div_ceil(CHUNK);
        let partials: Result<Vec<Partial>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut p = Partial::default();
                for r in c * CHUNK..((c + 1) * CHUNK).min(reps) {
                    let v = sample(r)?;
                    if v != 0.0 {
                        p.hits += 1;
                        p.sum += v;
                        p.sumsq += v * v;
                    }
                }
                Ok(p)
            })
            .collect();
        let total = partials?.into_iter().fold(Partial::default(), |a, b| Partial {
            sum: a.sum + b.sum,
            sumsq: a.sumsq + b.sumsq,
            hits: a.hits + b.hits,
        });
        Ok((total, threads))
    })?
}

fn check_common(model: &ShotNoiseModel, eps: f64, event: &ThresholdSet, reps: u64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return invalid(format!("epsilon must be positive, got {eps}"));
    }
    if reps < MIN_REPLICATIONS {
        return invalid(format!("need at least {MIN_REPLICATIONS} replications, got {reps}"));
    }
    event.validate(model.dim())
}

/// Crude Monte Carlo estimate of `P(X^ε(T) ∈ A)`.
pub fn estimate_naive(
    model: &ShotNoiseModel,
    eps: f64,
    event: &ThresholdSet,
    reps: u64,
    seed: u64,
    opts: &McOptions,
) -> Result<McReport> {
    check_common(model, eps, event, reps)?;
    let start = Instant::now();
    let (total, threads) = run(reps, opts, |r| {
        let ev = simulate_prm(model.marks(), model.horizon(), eps, None, seed, r)?;
        let x = terminal_state(model, &ev)?;
        Ok(if event.contains(&x) { 1.0 } else { 0.0 })
    })?;
    let n = reps as f64;
    let p = total.hits as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    Ok(McReport {
        epsilon: eps,
        event: event.clone(),
        replications: reps,
        estimate: p,
        std_error: se,
        relative_error: (p > 0.0).then(|| se / p),
        method: Method::Naive,
        seed,
        hits: total.hits,
        upper_95: (total.hits == 0).then(|| 1.0 - 0.05f64.powf(1.0 / n)),
        threads,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Importance-sampling estimate: paths are drawn under intensity `ε⁻¹ tilt`
/// and hits are weighted by the likelihood ratio back to the original measure.
pub fn estimate_is(
    model: &ShotNoiseModel,
    eps: f64,
    event: &ThresholdSet,
    tilt: &Control,
    reps: u64,
    seed: u64,
    opts: &McOptions,
) -> Result<McReport> {
    check_common(model, eps, event, reps)?;
    tilt.check_compatible(model.marks().len(), model.horizon())?;
    if tilt.values().iter().flatten().any(|g| *g <= 0.0) {
        return invalid("importance-sampling tilt must be positive on every cell");
    }
    let start = Instant::now();
    let (total, threads) = run(reps, opts, |r| {
        let ev = simulate_prm(model.marks(), model.horizon(), eps, Some(tilt), seed, r)?;
        let x = terminal_state(model, &ev)?;
        if event.contains(&x) {
            likelihood_weight(&ev, tilt, model.marks(), model.horizon())
        } else {
            Ok(0.0)
        }
    })?;
    let n = reps as f64;
    let p = total.sum / n;
    let se = ((total.sumsq / n - p * p).max(0.0) / n).sqrt();
    Ok(McReport {
        epsilon: eps,
        event: event.clone(),
        replications: reps,
        estimate: p,
        std_error: se,
        relative_error: (p > 0.0).then(|| se / p),
        method: Method::Is,
        seed,
        hits: total.hits,
        upper_95: None,
        threads,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Poisson pmf at `n`, accurate to a few ulps times `n` for `mean < 700`.
fn poisson_pmf(mean: f64, n: u64) -> f64 {
    if mean < 700.0 && n < 100_000 {
        let mut p = (-mean).exp();
        for i in 1..=n {
            p *= mean / i as f64;
        }
        p
    } else {
        (n as f64 * mean.ln() - mean - ln_gamma(n as f64 + 1.0)).exp()
    }
}

/// `P(N ≥ k)` for `N ~ Poisson(mean)`.
///
/// For `k > mean` the upper tail is summed directly from the pmf at `k`;
/// otherwise the complement of the (at most half-mass) lower tail is used.
pub fn poisson_tail_exact(mean: f64, k: u64) -> Result<f64> {
    if !(mean.is_finite() && mean > 0.0) {
        return invalid(format!("Poisson mean must be positive, got {mean}"));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if k as f64 > mean {
        let mut term = poisson_pmf(mean, k);
        let mut sum = 0.0;
        let mut n = k;
        while term > 0.0 {
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            n += 1;
            term *= mean / n as f64;
        }
        Ok(sum)
    } else {
        let mut n = k - 1;
        let mut term = poisson_pmf(mean, n);
        let mut lower = 0.0;
        loop {
            lower += term;
            if n == 0 || term < lower * 1e-17 {
                break;
            }
            term *= n as f64 / mean;
            n -= 1;
        }
        Ok((1.0 - lower).max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMethod {
    Naive,
    Is(Control),
    /// Exact Poisson tail; needs a single-atom, one-dimensional compound
    /// Poisson model with step shots.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub epsilon: f64,
    pub p_hat: f64,
    pub se: f64,
    /// `−ε log p̂`, absent for zero-hit rows.
    pub neg_eps_log_p: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    /// Least-squares line of `−ε log p̂` against `ε`, evaluated at `ε = 0`.
    pub intercept: Option<f64>,
    pub slope: Option<f64>,
}

impl DecayRow {
    pub fn new(epsilon: f64, p_hat: f64, se: f64) -> Self {
        let flagged = !(p_hat > 0.0);
        let neg_eps_log_p = (!flagged).then(|| {
            let v = -epsilon * p_hat.ln();
            if v == 0.0 {
                0.0
            } else {
                v
            }
        });
        Self {
            epsilon,
            p_hat,
            se,
            neg_eps_log_p,
            flagged,
        }
    }
}

impl DecayTable {
    /// Fits the extrapolation line over the rows with hits.
    pub fn from_rows(rows: Vec<DecayRow>) -> Self {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.neg_eps_log_p.map(|y| (r.epsilon, y)))
            .collect();
        let (intercept, slope) = if pts.len() >= 2 {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            let slope = sxy / sxx;
            (Some(my - slope * mx), Some(slope))
        } else {
            (None, None)
        };
        Self { rows, intercept, slope }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epsilon,p_hat,se,neg_eps_log_p")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(r.epsilon),
                fmt_f64(r.p_hat),
                fmt_f64(r.se),
                r.neg_eps_log_p.map(fmt_f64).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

/// Exact `P(X^ε(T) ≥ a)` for a single-atom compound Poisson model.
pub fn exact_terminal_tail(model: &ShotNoiseModel, eps: f64, event: &ThresholdSet) -> Result<f64> {
    let exact_ok = model.dim() == 1
        && model.marks().len() == 1
        && model.is_state_independent()
        && model.has_step_shots()
        && model.remainder_fn().is_zero();
    if !exact_ok {
        return Err(Error::Unsupported(
            "exact tails need a one-dimensional single-atom compound Poisson model".into(),
        ));
    }
    event.validate(1)?;
    let h = model.shot_value(0, &[0.0])[0];
    let mean = model.marks().weight(0) * model.horizon() / eps;
    let a = event
        .thresholds
        .iter()
        .map(|t| t.value)
        .fold(f64::NEG_INFINITY, f64::max);
    if a <= 0.0 {
        return Ok(1.0);
    }
    if h <= 0.0 {
        return Ok(0.0);
    }
    // smallest count whose scaled sum reaches a, evaluated as the simulator does
    let reaches = |n: u64| eps * (n as f64 * h) >= a;
    let mut k = (a / (eps * h)).ceil().max(0.0) as u64;
    while k > 0 && reaches(k - 1) {
        k -= 1;
    }
    while !reaches(k) {
        k += 1;
    }
    poisson_tail_exact(mean, k)
}

/// Rows `(ε, p̂, SE, −ε log p̂)` for decreasing `ε`, plus a linear
/// extrapolation of `−ε log p̂` to `ε = 0` over the rows with hits.
pub fn ldp_decay_table(
    model: &ShotNoiseModel,
    event: &ThresholdSet,
    epsilons: &[f64],
    method: &DecayMethod,
    reps: u64,
    seed: u64,
    opts: &McOptions,
) -> Result<DecayTable> {
    if epsilons.is_empty() {
        return invalid("need at least one epsilon");
    }
    if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
        return invalid("epsilons must be strictly decreasing");
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let (p, se) = match method {
            DecayMethod::Naive => {
                let r = estimate_naive(model, eps, event, reps, seed, opts)?;
                (r.estimate, r.std_error)
            }
            DecayMethod::Is(tilt) => {
                let r = estimate_is(model, eps, event, tilt, reps, seed, opts)?;
                (r.estimate, r.std_error)
            }
            DecayMethod::Exact => (exact_terminal_tail(model, eps, event)?, 0.0),
        };
        rows.push(DecayRow::new(eps, p, se));
    }
    Ok(DecayTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force tail: pmf by forward recursion from `e^{−mean}`, summed
    /// over `k..1000`.
    fn brute_tail(mean: f64, k: u64) -> f64 {
        let mut p = (-mean).exp();
        let mut sum = 0.0;
        for n in 0..1000u64 {
            if n >= k {
                sum += p;
            }
            p *= mean / (n + 1) as f64;
        }
        sum
    }

    #[test]
    fn tail_examples() {
        assert_eq!(poisson_tail_exact(1.0, 0).unwrap(), 1.0);
        let v = poisson_tail_exact(1.0, 2).unwrap();
        let expected = 1.0 - 2.0 * (-1f64).exp();
        assert!((v - expected).abs() <= 1e-15, "{v} vs {expected}");
        for (mean, k) in [(10.0, 20), (40.0, 80), (10.0, 5), (3.5, 1), (0.2, 7)] {
            let a = poisson_tail_exact(mean, k).unwrap();
            let b = brute_tail(mean, k);
            assert!((a - b).abs() <= 1e-12 * b, "mean {mean} k {k}: {a} vs {b}");
        }
        assert!(poisson_tail_exact(0.0, 1).is_err());
    }

    #[test]
    fn tail_large_mean_is_finite() {
        let p = poisson_tail_exact(2000.0, 2100).unwrap();
        assert!(p > 0.0 && p < 0.02);
        let q = poisson_tail_exact(2000.0, 1900).unwrap();
        assert!(q > 0.98 && q < 1.0);
    }

    #[test]
    fn whole_space_is_certain() {
        let m = ShotNoiseModel::unit_poisson();
        let r = estimate_naive(&m, 0.1, &ThresholdSet::single(0, 0.0), 200, 1, &McOptions::default()).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.std_error, 0.0);
        let all = estimate_naive(&m, 0.1, &ThresholdSet::whole_space(), 200, 1, &McOptions::default()).unwrap();
        assert_eq!(all.estimate, 1.0);
    }

    #[test]
    fn zero_hits_report_upper_bound() {
        let m = ShotNoiseModel::unit_poisson();
        let r = estimate_naive(&m, 0.01, &ThresholdSet::single(0, 5.0), 100, 1, &McOptions::default()).unwrap();
        assert_eq!(r.estimate, 0.0);
        let ub = r.upper_95.unwrap();
        assert!((ub - (1.0 - 0.05f64.powf(0.01))).abs() < 1e-15);
        assert!(r.relative_error.is_none());
    }

    #[test]
    fn validation_errors() {
        let m = ShotNoiseModel::unit_poisson();
        let opts = McOptions::default();
        assert!(estimate_naive(&m, 0.1, &ThresholdSet::single(0, 1.0), 99, 1, &opts).is_err());
        assert!(estimate_naive(&m, 0.1, &ThresholdSet::single(1, 1.0), 100, 1, &opts).is_err());
        let zero_tilt = Control::new(vec![0.0, 0.5, 1.0], vec![vec![1.0], vec![0.0]]).unwrap();
        assert!(estimate_is(&m, 0.1, &ThresholdSet::single(0, 1.0), &zero_tilt, 100, 1, &opts).is_err());
    }

    #[test]
    fn identity_tilt_reproduces_naive() {
        let m = ShotNoiseModel::unit_poisson();
        let a = ThresholdSet::single(0, 1.3);
        let opts = McOptions::default();
        let naive = estimate_naive(&m, 0.1, &a, 3000, 5, &opts).unwrap();
        let is = estimate_is(&m, 0.1, &a, &Control::unit(1.0, 1).unwrap(), 3000, 5, &opts).unwrap();
        assert_eq!(naive.estimate, is.estimate);
        assert_eq!(naive.std_error, is.std_error);
    }

    #[test]
    fn thread_count_does_not_change_estimate() {
        let m = ShotNoiseModel::unit_poisson();
        let a = ThresholdSet::single(0, 1.5);
        let tilt = Control::constant(1.0, 2, 1, 1.5).unwrap();
        let one = estimate_is(&m, 0.1, &a, &tilt, 5000, 9, &McOptions { threads: Some(1) }).unwrap();
        let four = estimate_is(&m, 0.1, &a, &tilt, 5000, 9, &McOptions { threads: Some(4) }).unwrap();
        assert_eq!(one.estimate.to_bits(), four.estimate.to_bits());
        assert_eq!(one.std_error.to_bits(), four.std_error.to_bits());
    }

    #[test]
    fn exact_decay_rows() {
        let m = ShotNoiseModel::unit_poisson();
        let a = ThresholdSet::single(0, 2.0);
        let t = ldp_decay_table(&m, &a, &[0.1, 0.05], &DecayMethod::Exact, 100, 0, &McOptions::default()).unwrap();
        assert!((t.rows[0].p_hat - brute_tail(10.0, 20)).abs() < 1e-12 * t.rows[0].p_hat);
        assert!((t.rows[1].p_hat - brute_tail(20.0, 40)).abs() < 1e-12 * t.rows[1].p_hat);
        assert!(t.intercept.is_some());
        assert!(ldp_decay_table(&m, &a, &[0.05, 0.1], &DecayMethod::Exact, 100, 0, &McOptions::default()).is_err());
    }

    #[test]
    fn whole_space_decay_rows_are_zero() {
        let m = ShotNoiseModel::unit_poisson();
        let t = ldp_decay_table(
            &m,
            &ThresholdSet::whole_space(),
            &[0.1, 0.05, 0.025],
            &DecayMethod::Naive,
            100,
            0,
            &McOptions::default(),
        )
        .unwrap();
        for r in &t.rows {
            assert_eq!(r.p_hat, 1.0);
            assert_eq!(r.neg_eps_log_p, Some(0.0));
        }
    }

    #[test]
    fn exact_requires_simple_model() {
        let m = ShotNoiseModel::compound_poisson(1.0, &[(1.0, 1.0), (2.0, 1.0)]).unwrap();
        assert!(matches!(
            exact_terminal_tail(&m, 0.1, &ThresholdSet::single(0, 1.0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn report_csv_is_stable() {
        let m = ShotNoiseModel::unit_poisson();
        let r = estimate_naive(&m, 0.1, &ThresholdSet::single(0, 2.0), 1000, 3, &McOptions::default()).unwrap();
        let mut a = Vec::new();
        r.write_csv(&mut a).unwrap();
        let r2 = estimate_naive(
            &m,
            0.1,
            &ThresholdSet::single(0, 2.0),
            1000,
            3,
            &McOptions { threads: Some(2) },
        )
        .unwrap();
        let mut b = Vec::new();
        r2.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
