//! Shot-noise model definitions and sampled checks of the structural
//! conditions on the shot shape.
//!
//! A model is built from three pieces, each chosen from a small catalogue
//! (or supplied as a custom trait object from Rust code):
//!
//! * the shot value `h(z, x)`, the long-time limit of a single shot;
//! * the shot shape `H̄(t, z, x)`, which ramps from `0` at `t = 0` up to `h`;
//! * the remainder `R_ε(t, z, x)`, a perturbation that vanishes as `ε → 0`.
//!
//! The scaled shot is `H_ε(t, z, x) = H̄(t, z, εx) + R_ε(t, z, εx)`.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::norm;

/// One atom of the mark space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub id: String,
    pub payload: Vec<f64>,
    pub weight: f64,
}

impl Atom {
    pub fn new(id: impl Into<String>, payload: Vec<f64>, weight: f64) -> Self {
        Self {
            id: id.into(),
            payload,
            weight,
        }
    }
}

/// Finite atomic mark space carrying the intensity measure `ν`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarkSpace {
    atoms: Vec<Atom>,
}

impl MarkSpace {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return invalid("mark space needs at least one atom");
        }
        let mut seen = HashSet::new();
        for a in &atoms {
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return invalid(format!("atom '{}' has non-positive weight {}", a.id, a.weight));
            }
            if a.payload.iter().any(|v| !v.is_finite()) {
                return invalid(format!("atom '{}' has a non-finite payload", a.id));
            }
            if !seen.insert(a.id.clone()) {
                return invalid(format!("duplicate atom id '{}'", a.id));
            }
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.atoms[k].weight
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.weight)
    }

    /// `ν(X)`.
    pub fn total_mass(&self) -> f64 {
        self.weights().sum()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.id == id)
    }
}

impl<'de> Deserialize<'de> for MarkSpace {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let atoms = Vec::<Atom>::deserialize(de)?;
        MarkSpace::new(atoms).map_err(serde::de::Error::custom)
    }
}

/// Shot value `h(z, x)`: the saturation level of a single shot.
pub trait ShotValue: fmt::Debug + Send + Sync {
    fn eval(&self, atom: &Atom, x: &[f64], out: &mut [f64]);

    /// Row-major `d × d` Jacobian `∂h/∂x`.
    fn jacobian(&self, atom: &Atom, x: &[f64], out: &mut [f64]);

    /// Default Lipschitz envelope `L_h(z)`.
    fn lipschitz(&self, atom: &Atom) -> f64;

    /// Default linear-growth envelope `M_h(z)`.
    fn growth(&self, atom: &Atom) -> f64;

    fn is_state_independent(&self) -> bool {
        false
    }
}

/// Shot shape `H̄(t, z, x)`.
pub trait ShotShape: fmt::Debug + Send + Sync {
    fn eval(&self, t: f64, atom: &Atom, x: &[f64], value: &dyn ShotValue, out: &mut [f64]);

    /// True when `H̄(t, z, x) = h(z, x)` for every `t > 0`.
    fn is_step(&self) -> bool {
        false
    }
}

/// Remainder `R_ε(t, z, x)`.
pub trait Remainder: fmt::Debug + Send + Sync {
    fn eval(&self, eps: f64, t: f64, atom: &Atom, x: &[f64], out: &mut [f64]);

    /// Default envelope `ς(z)` bounding `‖R_ε‖ / (‖x‖ + 1)` for `ε ≤ 1`.
    fn varsigma(&self, atom: &Atom, dim: usize) -> f64;

    /// True when the remainder is constant in `t` on `(0, ∞)` and zero at `t = 0`.
    fn is_step(&self) -> bool {
        true
    }

    fn is_zero(&self) -> bool {
        false
    }
}

/// Catalogue of shot-value families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueFamily {
    /// `h(z, x) = p(z)`, the atom payload.
    Payload,
    /// `h(z, x) = p(z) ⊙ (𝟙 + B x)` with a nonnegative `d × d` matrix `B`
    /// (identity when omitted).
    Affine {
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
    },
    /// `h(z, x) = p(z) (1 + ‖x‖)`.
    NormScaled,
}

impl ValueFamily {
    fn matrix_entry(&self, i: usize, j: usize) -> f64 {
        match self {
            ValueFamily::Affine { matrix: Some(m) } => m[i][j],
            _ => f64::from(u8::from(i == j)),
        }
    }

    fn scaled_matrix_norm(&self, p: &[f64]) -> f64 {
        let d = p.len();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let v = p[i] * self.matrix_entry(i, j);
                s += v * v;
            }
        }
        s.sqrt()
    }
}

impl ShotValue for ValueFamily {
    fn eval(&self, atom: &Atom, x: &[f64], out: &mut [f64]) {
        let p = &atom.payload;
        match self {
            ValueFamily::Payload => out.copy_from_slice(p),
            ValueFamily::Affine { .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let bx: f64 = x.iter().enumerate().map(|(j, xj)| self.matrix_entry(i, j) * xj).sum();
                    *o = p[i] * (1.0 + bx);
                }
            }
            ValueFamily::NormScaled => {
                let s = 1.0 + norm(x);
                for (o, pi) in out.iter_mut().zip(p) {
                    *o = pi * s;
                }
            }
        }
    }

    fn jacobian(&self, atom: &Atom, x: &[f64], out: &mut [f64]) {
        let p = &atom.payload;
        let d = p.len();
        match self {
            ValueFamily::Payload => out.fill(0.0),
            ValueFamily::Affine { .. } => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = p[i] * self.matrix_entry(i, j);
                    }
                }
            }
            ValueFamily::NormScaled => {
                let n = norm(x);
                for i in 0..d {
                    for j in 0..d {
                        // subgradient 0 at the origin
                        out[i * d + j] = if n > 0.0 { p[i] * x[j] / n } else { 0.0 };
                    }
                }
            }
        }
    }

    fn lipschitz(&self, atom: &Atom) -> f64 {
        match self {
            ValueFamily::Payload => 0.0,
            ValueFamily::Affine { .. } => self.scaled_matrix_norm(&atom.payload),
            ValueFamily::NormScaled => norm(&atom.payload),
        }
    }

    fn growth(&self, atom: &Atom) -> f64 {
        match self {
            ValueFamily::Payload | ValueFamily::NormScaled => norm(&atom.payload),
            ValueFamily::Affine { .. } => norm(&atom.payload).max(self.scaled_matrix_norm(&atom.payload)),
        }
    }

    fn is_state_independent(&self) -> bool {
        matches!(self, ValueFamily::Payload)
    }
}

/// Catalogue of shot shapes; each is `h(z, x)` times a time profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeFamily {
    /// `h(z, x) 𝟙{t > 0}`
    Instantaneous,
    /// `h(z, x) (1 − e^{−βt})`
    Exponential { beta: f64 },
    /// `h(z, x) min(t / τ, 1)`
    PiecewiseLinear { tau: f64 },
}

impl ShapeFamily {
    pub fn profile(&self, t: f64) -> f64 {
        match *self {
            ShapeFamily::Instantaneous => f64::from(u8::from(t > 0.0)),
            ShapeFamily::Exponential { beta } => -(-beta * t).exp_m1(),
            ShapeFamily::PiecewiseLinear { tau } => (t / tau).min(1.0),
        }
    }
}

impl ShotShape for ShapeFamily {
    fn eval(&self, t: f64, atom: &Atom, x: &[f64], value: &dyn ShotValue, out: &mut [f64]) {
        let w = self.profile(t);
        if w == 0.0 {
            out.fill(0.0);
            return;
        }
        value.eval(atom, x, out);
        if w != 1.0 {
            out.iter_mut().for_each(|o| *o *= w);
        }
    }

    fn is_step(&self) -> bool {
        matches!(self, ShapeFamily::Instantaneous)
    }
}

/// Catalogue of remainders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum RemainderFamily {
    Zero,
    /// `R_ε(t, z, x) = c ε (‖x‖ + 1) 𝟙` for `t > 0`, zero at `t = 0`.
    ScaledNorm {
        c: f64,
    },
}

impl Remainder for RemainderFamily {
    fn eval(&self, eps: f64, t: f64, _atom: &Atom, x: &[f64], out: &mut [f64]) {
        match *self {
            RemainderFamily::Zero => out.fill(0.0),
            RemainderFamily::ScaledNorm { c } => {
                let v = if t > 0.0 { c * eps * (norm(x) + 1.0) } else { 0.0 };
                out.fill(v);
            }
        }
    }

    fn varsigma(&self, _atom: &Atom, dim: usize) -> f64 {
        match *self {
            RemainderFamily::Zero => 0.0,
            RemainderFamily::ScaledNorm { c } => c.abs() * (dim as f64).sqrt(),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, RemainderFamily::Zero)
    }
}

/// Per-atom envelope functions `L_h`, `M_h` and `ς`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelopes {
    pub lipschitz: Vec<f64>,
    pub growth: Vec<f64>,
    pub varsigma: Vec<f64>,
}

/// A state-dependent shot-noise model on a finite atomic mark space.
///
/// Immutable after construction; clones share the shape functions.
#[derive(Clone, Debug)]
pub struct ShotNoiseModel {
    dim: usize,
    horizon: f64,
    marks: MarkSpace,
    shape: Arc<dyn ShotShape>,
    value: Arc<dyn ShotValue>,
    remainder: Arc<dyn Remainder>,
    envelopes: Envelopes,
}

impl ShotNoiseModel {
    /// Builds a model and derives default envelopes from the value and
    /// remainder families.
    pub fn new(
        dim: usize,
        horizon: f64,
        marks: MarkSpace,
        shape: Arc<dyn ShotShape>,
        value: Arc<dyn ShotValue>,
        remainder: Arc<dyn Remainder>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        for a in marks.atoms() {
            if a.payload.len() != dim {
                return invalid(format!(
                    "atom '{}' payload has length {}, expected {dim}",
                    a.id,
                    a.payload.len()
                ));
            }
        }
        let envelopes = Envelopes {
            lipschitz: marks.atoms().iter().map(|a| value.lipschitz(a)).collect(),
            growth: marks.atoms().iter().map(|a| value.growth(a)).collect(),
            varsigma: marks.atoms().iter().map(|a| remainder.varsigma(a, dim)).collect(),
        };
        Ok(Self {
            dim,
            horizon,
            marks,
            shape,
            value,
            remainder,
            envelopes,
        })
    }

    /// Compound Poisson model in `d = 1`: one atom per `(h, ν)` pair,
    /// instantaneous shots, state-independent values, no remainder.
    pub fn compound_poisson(horizon: f64, atoms: &[(f64, f64)]) -> Result<Self> {
        let atoms = atoms
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| Atom::new(format!("z{i}"), vec![h], w))
            .collect();
        Self::new(
            1,
            horizon,
            MarkSpace::new(atoms)?,
            Arc::new(ShapeFamily::Instantaneous),
            Arc::new(ValueFamily::Payload),
            Arc::new(RemainderFamily::Zero),
        )
    }

    /// One atom, unit jumps, unit intensity, horizon 1.
    pub fn unit_poisson() -> Self {
        Self::compound_poisson(1.0, &[(1.0, 1.0)]).expect("unit Poisson model is valid")
    }

    pub fn with_envelopes(mut self, envelopes: Envelopes) -> Result<Self> {
        let k = self.marks.len();
        for (name, v) in [
            ("lipschitz", &envelopes.lipschitz),
            ("growth", &envelopes.growth),
            ("varsigma", &envelopes.varsigma),
        ] {
            if v.len() != k {
                return invalid(format!("envelope '{name}' has {} entries, expected {k}", v.len()));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return invalid(format!("envelope '{name}' must be finite and nonnegative"));
            }
        }
        self.envelopes = envelopes;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn envelopes(&self) -> &Envelopes {
        &self.envelopes
    }

    pub fn value_fn(&self) -> &dyn ShotValue {
        self.value.as_ref()
    }

    pub fn shape_fn(&self) -> &dyn ShotShape {
        self.shape.as_ref()
    }

    pub fn remainder_fn(&self) -> &dyn Remainder {
        self.remainder.as_ref()
    }

    pub fn is_state_independent(&self) -> bool {
        self.value.is_state_independent()
    }

    /// Shots that jump to their final value immediately, with a remainder that
    /// is also constant after the jump.
    pub fn has_step_shots(&self) -> bool {
        self.shape.is_step() && self.remainder.is_step()
    }

    /// `h(z_k, x)`.
    pub fn shot_value(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.value.eval(&self.marks.atoms[k], x, &mut out);
        out
    }

    pub(crate) fn shot_value_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        self.value.eval(&self.marks.atoms[k], x, out);
    }

    pub(crate) fn shot_jacobian_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        self.value.jacobian(&self.marks.atoms[k], x, out);
    }

    /// `H̄(t, z_k, x)`.
    pub fn hbar(&self, t: f64, k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.shape
            .eval(t, &self.marks.atoms[k], x, self.value.as_ref(), &mut out);
        out
    }

    /// `R_ε(t, z_k, x)`.
    pub fn remainder(&self, eps: f64, t: f64, k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.remainder.eval(eps, t, &self.marks.atoms[k], x, &mut out);
        out
    }

    /// `H̄(t, z, y) + R_ε(t, z, y)` clamped at zero, where `y = εx` is the
    /// already-scaled state.
    pub(crate) fn shot_at_scaled_state(
        &self,
        eps: f64,
        t: f64,
        k: usize,
        y: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        let atom = &self.marks.atoms[k];
        self.shape.eval(t, atom, y, self.value.as_ref(), out);
        if !self.remainder.is_zero() {
            self.remainder.eval(eps, t, atom, y, scratch);
            for (o, r) in out.iter_mut().zip(scratch.iter()) {
                *o += r;
            }
        }
        for o in out.iter_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
    }

    /// Scaled shot `H_ε(t, z_k, x) = H̄(t, z_k, εx) + R_ε(t, z_k, εx)`,
    /// clamped coordinate-wise at zero.
    pub fn evaluate_shot(&self, eps: f64, t: f64, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        if !(eps.is_finite() && eps > 0.0) {
            return invalid(format!("epsilon must be positive, got {eps}"));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return invalid(format!("shot time must be nonnegative, got {t}"));
        }
        if k >= self.marks.len() {
            return invalid(format!("atom index {k} out of range"));
        }
        if x.len() != self.dim {
            return invalid(format!("state has length {}, expected {}", x.len(), self.dim));
        }
        if x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("state must be finite and nonnegative");
        }
        let y: Vec<f64> = x.iter().map(|v| eps * v).collect();
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.shot_at_scaled_state(eps, t, k, &y, &mut out, &mut scratch);
        Ok(out)
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let marks = MarkSpace::new(cfg.atoms.clone())?;
        if let ValueFamily::Affine { matrix: Some(m) } = &cfg.value {
            if m.len() != cfg.d || m.iter().any(|row| row.len() != cfg.d) {
                return invalid(format!("affine matrix must be {0} x {0}", cfg.d));
            }
            if m.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return invalid("affine matrix entries must be finite and nonnegative");
            }
        }
        if matches!(
            cfg.value,
            ValueFamily::Payload | ValueFamily::Affine { .. } | ValueFamily::NormScaled
        ) && marks.atoms().iter().flat_map(|a| a.payload.iter()).any(|p| *p < 0.0)
        {
            return invalid("payloads must be nonnegative so that h maps into R_+^d");
        }
        match cfg.shape {
            ShapeFamily::Exponential { beta } if !(beta.is_finite() && beta > 0.0) => {
                return invalid(format!("exponential shape needs beta > 0, got {beta}"));
            }
            ShapeFamily::PiecewiseLinear { tau } if !(tau.is_finite() && tau > 0.0) => {
                return invalid(format!("piecewise-linear shape needs tau > 0, got {tau}"));
            }
            _ => {}
        }
        if let RemainderFamily::ScaledNorm { c } = cfg.remainder {
            if !c.is_finite() {
                return invalid("remainder coefficient must be finite");
            }
        }
        let model = Self::new(
            cfg.d,
            cfg.horizon,
            marks,
            Arc::new(cfg.shape.clone()),
            Arc::new(cfg.value.clone()),
            Arc::new(cfg.remainder.clone()),
        )?;
        match &cfg.envelopes {
            Some(env) => model.with_envelopes(env.clone()),
            None => Ok(model),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s)?;
        Self::from_config(&cfg)
    }
}

/// JSON form of a model.
///
/// ```json
/// {"d": 1, "T": 1.0,
///  "atoms": [{"id": "z0", "payload": [1.0], "weight": 1.0}],
///  "shape": {"family": "exponential", "params": {"beta": 2.0}},
///  "value": {"family": "affine", "params": {"matrix": [[1.0]]}},
///  "remainder": {"family": "zero"},
///  "envelopes": {"lipschitz": [1.0], "growth": [1.0], "varsigma": [0.0]}}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub atoms: Vec<Atom>,
    #[serde(default = "default_shape")]
    pub shape: ShapeFamily,
    #[serde(default = "default_value")]
    pub value: ValueFamily,
    #[serde(default = "default_remainder")]
    pub remainder: RemainderFamily,
    #[serde(default)]
    pub envelopes: Option<Envelopes>,
}

fn default_shape() -> ShapeFamily {
    ShapeFamily::Instantaneous
}

fn default_value() -> ValueFamily {
    ValueFamily::Payload
}

fn default_remainder() -> RemainderFamily {
    RemainderFamily::Zero
}

/// Finite sample sets used by [`validate_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckGrid {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub epsilons: Vec<f64>,
}

impl CheckGrid {
    pub const DEFAULT_TIMES: usize = 64;
    pub const DEFAULT_STATES: usize = 32;
    pub const DEFAULT_STATE_BOUND: f64 = 10.0;

    /// 64 log-spaced times in `(0, 4T/ε_min]`, 32 uniform random states in
    /// `[0, 10]^d`, cyclic consecutive state pairs, and five log-spaced
    /// epsilons in `[ε_min, 1]`.
    pub fn default_for(model: &ShotNoiseModel, eps_min: f64, seed: u64) -> Result<Self> {
        if !(eps_min > 0.0 && eps_min <= 1.0) {
            return invalid(format!("eps_min must lie in (0, 1], got {eps_min}"));
        }
        let t_max = 4.0 * model.horizon() / eps_min;
        let t_min = 1e-3_f64.min(t_max / 2.0);
        let n = Self::DEFAULT_TIMES;
        let ratio = (t_max / t_min).ln() / (n - 1) as f64;
        let times = (0..n).map(|i| t_min * (ratio * i as f64).exp()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<Vec<f64>> = (0..Self::DEFAULT_STATES)
            .map(|_| {
                (0..model.dim())
                    .map(|_| rng.random::<f64>() * Self::DEFAULT_STATE_BOUND)
                    .collect()
            })
            .collect();
        let pairs = (0..states.len())
            .map(|i| (states[i].clone(), states[(i + 1) % states.len()].clone()))
            .collect();
        let epsilons = (0..5).map(|i| eps_min.powf(1.0 - i as f64 / 4.0)).collect();
        Ok(Self {
            times,
            states,
            pairs,
            epsilons,
        })
    }
}

/// Sub-conditions checked by [`validate_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// `H̄` is finite and maps into `R_+^d`.
    A,
    /// `‖R_ε(t, z, x)‖ ≤ ς(z)(‖x‖ + 1)`.
    B,
    /// `H̄(0, z, x) = 0` and `t ↦ H̄(t, z, x)` non-decreasing.
    D,
    /// `‖h(z, x) − h(z, x')‖ ≤ L_h(z)‖x − x'‖`.
    F,
    /// `‖h(z, x)‖ ≤ M_h(z)(1 + ‖x‖)`.
    G,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::A => "(a) shape maps into R_+^d",
            Condition::B => "(b) remainder envelope",
            Condition::D => "(d) H(0)=0 and monotone in t",
            Condition::F => "(f) Lipschitz envelope L_h",
            Condition::G => "(g) growth envelope M_h",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Amount by which the inequality fails.
    pub excess: f64,
    pub atom: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: Condition,
    pub passed: bool,
    pub samples: usize,
    pub worst: Option<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, cond: Condition) -> &ConditionCheck {
        self.checks
            .iter()
            .find(|c| c.condition == cond)
            .expect("every condition is checked")
    }
}

const CHECK_RTOL: f64 = 1e-12;

fn slack(rhs: f64) -> f64 {
    CHECK_RTOL * (1.0 + rhs.abs())
}

struct Tally {
    condition: Condition,
    samples: usize,
    worst: Option<Violation>,
}

impl Tally {
    fn new(condition: Condition) -> Self {
        Self {
            condition,
            samples: 0,
            worst: None,
        }
    }

    /// Records `lhs ≤ rhs`.
    fn le(&mut self, lhs: f64, rhs: f64, atom: usize, detail: impl FnOnce() -> String) {
        self.samples += 1;
        let excess = if lhs.is_nan() || rhs.is_nan() {
            f64::INFINITY
        } else {
            lhs - rhs
        };
        if excess > slack(rhs) && self.worst.as_ref().is_none_or(|w| excess > w.excess) {
            self.worst = Some(Violation {
                excess,
                atom,
                detail: detail(),
            });
        }
    }

    fn finish(self) -> ConditionCheck {
        ConditionCheck {
            condition: self.condition,
            passed: self.worst.is_none(),
            samples: self.samples,
            worst: self.worst,
        }
    }
}

/// Samples the structural conditions on `H̄`, `R_ε` and `h` over `grid`.
pub fn validate_model(model: &ShotNoiseModel, grid: &CheckGrid) -> Result<ValidationReport> {
    if grid.times.is_empty() || grid.states.is_empty() || grid.pairs.is_empty() || grid.epsilons.is_empty() {
        return invalid("check grid must have nonempty times, states, pairs and epsilons");
    }
    let d = model.dim();
    let all_states = grid.states.iter().chain(grid.pairs.iter().flat_map(|(a, b)| [a, b]));
    for x in all_states {
        if x.len() != d || x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("grid states must be finite, nonnegative and of model dimension");
        }
    }
    if grid.times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return invalid("grid times must be finite and positive");
    }
    if grid.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return invalid("grid epsilons must be positive");
    }
    let mut times = grid.times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let env = model.envelopes();
    let mut a = Tally::new(Condition::A);
    let mut b = Tally::new(Condition::B);
    let mut dm = Tally::new(Condition::D);
    let mut f = Tally::new(Condition::F);
    let mut g = Tally::new(Condition::G);

    for k in 0..model.marks().len() {
        for x in &grid.states {
            let at_zero = model.hbar(0.0, k, x);
            dm.le(norm(&at_zero), 0.0, k, || {
                format!("H(0, z, x) = {at_zero:?} at x = {x:?}")
            });

            let mut prev: Option<(f64, Vec<f64>)> = None;
            for &t in &times {
                let cur = model.hbar(t, k, x);
                for &v in &cur {
                    let neg = if v.is_finite() { -v } else { f64::INFINITY };
                    a.le(neg, 0.0, k, || format!("H({t}, z, {x:?}) = {cur:?}"));
                }
                if let Some((t0, p)) = &prev {
                    for i in 0..d {
                        dm.le(p[i], cur[i], k, || {
                            format!(
                                "coordinate {i} decreases between t1 = {t0} and t2 = {t}: {} > {} at x = {x:?}",
                                p[i], cur[i]
                            )
                        });
                    }
                }
                prev = Some((t, cur));
            }

            let hx = model.shot_value(k, x);
            let nx = norm(x);
            g.le(norm(&hx), env.growth[k] * (1.0 + nx), k, || {
                format!(
                    "|h(z, {x:?})| = {} exceeds M_h (1 + |x|) = {}",
                    norm(&hx),
                    env.growth[k] * (1.0 + nx)
                )
            });

            for &eps in &grid.epsilons {
                for &t in times.iter().chain(std::iter::once(&0.0)) {
                    let r = model.remainder(eps, t, k, x);
                    let bound = env.varsigma[k] * (nx + 1.0);
                    b.le(norm(&r), bound, k, || {
                        format!("|R_eps({t}, z, {x:?})| = {} exceeds {bound} at eps = {eps}", norm(&r))
                    });
                }
            }
        }
        for (x, y) in &grid.pairs {
            let hx = model.shot_value(k, x);
            let hy = model.shot_value(k, y);
            let diff: Vec<f64> = hx.iter().zip(&hy).map(|(p, q)| p - q).collect();
            let dxy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            let lhs = norm(&diff);
            let rhs = env.lipschitz[k] * norm(&dxy);
            f.le(lhs, rhs, k, || {
                format!("|h(z,x) - h(z,x')| = {lhs} exceeds {rhs} at x = {x:?}, x' = {y:?}")
            });
        }
    }

    Ok(ValidationReport {
        checks: vec![a.finish(), b.finish(), dm.finish(), f.finish(), g.finish()],
    })
}

/// `max ‖H̄(t, z_k, x) − h(z_k, x)‖` over `t ∈ [t_max, 2 t_max]` and a fixed
/// set of states with `‖x‖ ≤ m`.
pub fn check_shot_value_limit(model: &ShotNoiseModel, k: usize, m: f64, t_max: f64) -> Result<f64> {
    if !(m.is_finite() && m > 0.0) {
        return invalid(format!("state bound must be positive, got {m}"));
    }
    if !(t_max.is_finite() && t_max > 0.0) {
        return invalid(format!("t_max must be positive, got {t_max}"));
    }
    if k >= model.marks().len() {
        return invalid(format!("atom index {k} out of range"));
    }
    let d = model.dim();
    let mut directions: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    if d > 1 {
        directions.push(vec![1.0 / (d as f64).sqrt(); d]);
    }
    let mut states = vec![vec![0.0; d]];
    for r in [0.25, 0.5, 0.75, 1.0] {
        for dir in &directions {
            states.push(dir.iter().map(|v| v * r * m).collect());
        }
    }
    let mut worst = 0.0_f64;
    for i in 0..=8 {
        let t = t_max * (1.0 + i as f64 / 8.0);
        for x in &states {
            let hb = model.hbar(t, k, x);
            let h = model.shot_value(k, x);
            let diff: Vec<f64> = hb.iter().zip(&h).map(|(p, q)| p - q).collect();
            worst = worst.max(norm(&diff));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct SineShape;

    impl ShotShape for SineShape {
        fn eval(&self, t: f64, _atom: &Atom, _x: &[f64], _value: &dyn ShotValue, out: &mut [f64]) {
            out.fill(t.sin());
        }
    }

    fn single_atom(
        dim: usize,
        payload: f64,
        shape: Arc<dyn ShotShape>,
        value: ValueFamily,
        rem: RemainderFamily,
    ) -> ShotNoiseModel {
        let marks = MarkSpace::new(vec![Atom::new("a", vec![payload; dim], 1.0)]).unwrap();
        ShotNoiseModel::new(dim, 1.0, marks, shape, Arc::new(value), Arc::new(rem)).unwrap()
    }

    #[test]
    fn mark_space_rejects_bad_atoms() {
        assert!(MarkSpace::new(vec![]).is_err());
        assert!(MarkSpace::new(vec![Atom::new("a", vec![1.0], 0.0)]).is_err());
        assert!(MarkSpace::new(vec![Atom::new("a", vec![1.0], 1.0), Atom::new("a", vec![2.0], 1.0)]).is_err());
        let ms = MarkSpace::new(vec![Atom::new("a", vec![1.0], 1.0), Atom::new("b", vec![2.0], 0.5)]).unwrap();
        assert_eq!(ms.total_mass(), 1.5);
        assert_eq!(ms.index_of("b"), Some(1));
    }

    #[test]
    fn exponential_ramp_with_zero_remainder_passes() {
        let m = single_atom(
            2,
            1.0,
            Arc::new(ShapeFamily::Exponential { beta: 1.0 }),
            ValueFamily::Payload,
            RemainderFamily::Zero,
        );
        let grid = CheckGrid::default_for(&m, 0.01, 7).unwrap();
        let rep = validate_model(&m, &grid).unwrap();
        assert!(rep.accepted(), "{rep:?}");
    }

    #[test]
    fn norm_scaled_envelopes_pass() {
        // h(z, x) = z (1 + |x|) 𝟙: |h(x) - h(x')| = z √d ||x| - |x'|| ≤ z √d |x - x'|
        // and |h(x)| = z √d (1 + |x|), so L_h = M_h = z √d exactly.
        for d in 1..=4 {
            let z = 0.7;
            let m = single_atom(
                d,
                z,
                Arc::new(ShapeFamily::Instantaneous),
                ValueFamily::NormScaled,
                RemainderFamily::Zero,
            );
            let expected = z * (d as f64).sqrt();
            assert!((m.envelopes().lipschitz[0] - expected).abs() < 1e-15);
            assert!((m.envelopes().growth[0] - expected).abs() < 1e-15);
            for seed in 0..5 {
                let grid = CheckGrid::default_for(&m, 0.05, seed).unwrap();
                let rep = validate_model(&m, &grid).unwrap();
                assert!(rep.check(Condition::F).passed);
                assert!(rep.check(Condition::G).passed);
            }
        }
    }

    #[test]
    fn sine_shape_fails_monotonicity_with_witness() {
        let m = single_atom(1, 1.0, Arc::new(SineShape), ValueFamily::Payload, RemainderFamily::Zero);
        let grid = CheckGrid::default_for(&m, 0.01, 1).unwrap();
        let rep = validate_model(&m, &grid).unwrap();
        assert!(!rep.accepted());
        let d = rep.check(Condition::D);
        assert!(!d.passed);
        let w = d.worst.as_ref().unwrap();
        assert!(w.excess > 0.0);
        assert!(w.detail.contains("t1 ="), "{}", w.detail);
        // (a) fails too: sin goes negative.
        assert!(!rep.check(Condition::A).passed);
    }

    #[test]
    fn tight_envelope_override_is_caught() {
        let m = single_atom(
            1,
            1.0,
            Arc::new(ShapeFamily::Instantaneous),
            ValueFamily::Affine { matrix: None },
            RemainderFamily::Zero,
        )
        .with_envelopes(Envelopes {
            lipschitz: vec![0.5],
            growth: vec![1.0],
            varsigma: vec![0.0],
        })
        .unwrap();
        let grid = CheckGrid::default_for(&m, 0.1, 3).unwrap();
        let rep = validate_model(&m, &grid).unwrap();
        assert!(!rep.check(Condition::F).passed);
        assert!(rep.check(Condition::G).passed);
    }

    #[test]
    fn remainder_envelope_checked() {
        let m = single_atom(
            3,
            1.0,
            Arc::new(ShapeFamily::Instantaneous),
            ValueFamily::Payload,
            RemainderFamily::ScaledNorm { c: 0.5 },
        );
        let grid = CheckGrid::default_for(&m, 0.01, 3).unwrap();
        assert!(validate_model(&m, &grid).unwrap().check(Condition::B).passed);
        let tight = m
            .clone()
            .with_envelopes(Envelopes {
                lipschitz: vec![0.0],
                growth: vec![3f64.sqrt()],
                varsigma: vec![0.1],
            })
            .unwrap();
        assert!(!validate_model(&tight, &grid).unwrap().check(Condition::B).passed);
    }

    #[test]
    fn empty_grid_rejected() {
        let m = ShotNoiseModel::unit_poisson();
        let mut grid = CheckGrid::default_for(&m, 0.1, 0).unwrap();
        grid.times.clear();
        assert!(validate_model(&m, &grid).is_err());
    }

    #[test]
    fn evaluate_shot_examples() {
        let m = single_atom(
            2,
            1.0,
            Arc::new(ShapeFamily::Exponential { beta: 1.0 }),
            ValueFamily::Payload,
            RemainderFamily::Zero,
        );
        assert_eq!(m.evaluate_shot(1.0, 0.0, 0, &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        let v = m.evaluate_shot(1.0, 2f64.ln(), 0, &[1.0, 1.0]).unwrap();
        for x in v {
            assert!((x - 0.5).abs() < 1e-15);
        }

        let zero_h = single_atom(
            2,
            0.0,
            Arc::new(ShapeFamily::Instantaneous),
            ValueFamily::Payload,
            RemainderFamily::ScaledNorm { c: 1.0 },
        );
        let v = zero_h.evaluate_shot(0.1, 1.0, 0, &[0.0, 0.0]).unwrap();
        for x in v {
            assert!((x - 0.1).abs() < 1e-15);
        }

        assert!(m.evaluate_shot(1.0, -1.0, 0, &[0.0, 0.0]).is_err());
        assert!(m.evaluate_shot(1.0, 1.0, 0, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn evaluate_shot_clamps_negative_remainder() {
        let m = single_atom(
            1,
            0.1,
            Arc::new(ShapeFamily::Instantaneous),
            ValueFamily::Payload,
            RemainderFamily::ScaledNorm { c: -5.0 },
        );
        assert_eq!(m.evaluate_shot(0.5, 1.0, 0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn shot_value_limit_decays() {
        let m = single_atom(
            1,
            2.0,
            Arc::new(ShapeFamily::Exponential { beta: 1.0 }),
            ValueFamily::Payload,
            RemainderFamily::Zero,
        );
        let d10 = check_shot_value_limit(&m, 0, 10.0, 10.0).unwrap();
        assert!(d10 <= (-10f64).exp() * 2.0 * (1.0 + 1e-12));
        let d20 = check_shot_value_limit(&m, 0, 10.0, 20.0).unwrap();
        assert!(d20 <= d10);

        let inst = single_atom(
            2,
            1.0,
            Arc::new(ShapeFamily::Instantaneous),
            ValueFamily::NormScaled,
            RemainderFamily::Zero,
        );
        assert_eq!(check_shot_value_limit(&inst, 0, 5.0, 0.1).unwrap(), 0.0);
        assert!(check_shot_value_limit(&inst, 0, -1.0, 0.1).is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let json = r#"{"d": 1, "T": 2.0,
            "atoms": [{"id": "a", "payload": [1.0], "weight": 0.5}],
            "shape": {"family": "exponential", "params": {"beta": 3.0}},
            "value": {"family": "affine", "params": {"matrix": [[0.5]]}},
            "remainder": {"family": "zero"}}"#;
        let m = ShotNoiseModel::from_json_str(json).unwrap();
        assert_eq!(m.horizon(), 2.0);
        assert_eq!(m.shot_value(0, &[2.0]), vec![2.0]);

        let minimal = r#"{"d": 1, "T": 1.0, "atoms": [{"id": "a", "payload": [1.0], "weight": 1.0}],
            "shape": {"family": "instantaneous"}}"#;
        assert!(ShotNoiseModel::from_json_str(minimal).unwrap().has_step_shots());

        let unknown = r#"{"d": 1, "T": 1.0, "atoms": [{"id": "a", "payload": [1.0], "weight": 1.0}], "colour": 3}"#;
        assert!(ShotNoiseModel::from_json_str(unknown).is_err());
        let bad_family = r#"{"d": 1, "T": 1.0, "atoms": [{"id": "a", "payload": [1.0], "weight": 1.0}],
            "shape": {"family": "gaussian"}}"#;
        assert!(ShotNoiseModel::from_json_str(bad_family).is_err());
        let wrong_dim = r#"{"d": 2, "T": 1.0, "atoms": [{"id": "a", "payload": [1.0], "weight": 1.0}]}"#;
        assert!(ShotNoiseModel::from_json_str(wrong_dim).is_err());
    }
}
