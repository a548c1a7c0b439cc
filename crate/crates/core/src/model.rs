//! Problem data for a controlled finite pure-jump signal observed through a
//! noise-free map `h`, plus the [`Belief`] type living on the faces of the
//! effective simplex.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of a belief.
pub const MASS_TOL: f64 = 1e-10;
/// Tolerance on mass found outside the face of a belief.
pub const LEAK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("lambda[{state}][{control}][{state}] = {rate}; self-jump rates must be zero")]
    DiagonalRate {
        state: String,
        control: String,
        rate: f64,
    },
    #[error("observation `{0}` is not the image of any state")]
    NonSurjectiveH(String),
    #[error("observation map is {0}; it must be neither injective nor constant")]
    DegenerateH(&'static str),
    #[error("negative rate lambda[{x}][{u}][{z}] = {rate}")]
    NegativeRate {
        x: String,
        u: String,
        z: String,
        rate: f64,
    },
    #[error("discount rate beta = {0} must be positive and finite")]
    NonPositiveBeta(f64),
    #[error("malformed model: {0}")]
    Shape(String),
    #[error("unknown observation label `{0}` in h")]
    UnknownLabel(String),
    #[error("duplicate identifier `{0}`")]
    Duplicate(String),
    #[error("non-finite entry in `{0}`")]
    NonFinite(&'static str),
    #[error("state index {index} out of range for {len} states")]
    StateIndex { index: usize, len: usize },
    #[error("observation index {index} out of range for {len} labels")]
    ObsIndex { index: usize, len: usize },
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// The on-disk model document. Field names are fixed by the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawModel {
    pub states: Vec<String>,
    pub obs: Vec<String>,
    /// Observation label of each state, in state order.
    pub h: Vec<String>,
    pub controls: Vec<String>,
    /// Rates indexed `[x][u][z]`.
    pub lambda: Vec<Vec<Vec<f64>>>,
    /// Running cost indexed `[x][u]`.
    pub f: Vec<Vec<f64>>,
    pub beta: f64,
}

impl RawModel {
    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Accept an injective or constant observation map. Off by default: such
    /// maps make the observation either complete or useless.
    pub allow_degenerate_h: bool,
}

/// Validated, immutable problem data with dense indices in file order.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    states: Vec<String>,
    obs: Vec<String>,
    controls: Vec<String>,
    h: Vec<usize>,
    faces: Vec<Vec<usize>>,
    lambda: Vec<f64>,
    f: Vec<f64>,
    beta: f64,
    total_rate: Vec<f64>,
    exit_rate: Vec<f64>,
    face_rate: Vec<f64>,
    c_lambda: f64,
    c_f: f64,
}

pub fn validate_model(raw: &RawModel) -> Result<ModelSpec, ModelError> {
    ModelSpec::from_raw(raw, ValidateOptions::default())
}

fn index_labels(kind: &str, labels: &[String]) -> Result<(), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::Shape(format!("`{kind}` is empty")));
    }
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(ModelError::Duplicate(l.clone()));
        }
    }
    Ok(())
}

impl ModelSpec {
    pub fn from_raw(raw: &RawModel, opts: ValidateOptions) -> Result<Self, ModelError> {
        index_labels("states", &raw.states)?;
        index_labels("obs", &raw.obs)?;
        index_labels("controls", &raw.controls)?;
        let n = raw.states.len();
        let m = raw.controls.len();
        let n_obs = raw.obs.len();

        if raw.h.len() != n {
            return Err(ModelError::Shape(format!(
                "`h` has {} entries for {n} states",
                raw.h.len()
            )));
        }
        let h = raw
            .h
            .iter()
            .map(|l| {
                raw.obs
                    .iter()
                    .position(|o| o == l)
                    .ok_or_else(|| ModelError::UnknownLabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        if !raw.beta.is_finite() || raw.beta <= 0.0 {
            return Err(ModelError::NonPositiveBeta(raw.beta));
        }

        if raw.lambda.len() != n || raw.lambda.iter().any(|r| r.len() != m) {
            return Err(ModelError::Shape(format!("`lambda` must be {n} x {m} x {n}")));
        }
        if raw.f.len() != n || raw.f.iter().any(|r| r.len() != m) {
            return Err(ModelError::Shape(format!("`f` must be {n} x {m}")));
        }

        let mut lambda = Vec::with_capacity(n * m * n);
        for (x, per_u) in raw.lambda.iter().enumerate() {
            for (u, row) in per_u.iter().enumerate() {
                if row.len() != n {
                    return Err(ModelError::Shape(format!("`lambda` must be {n} x {m} x {n}")));
                }
                for (z, &rate) in row.iter().enumerate() {
                    if !rate.is_finite() {
                        return Err(ModelError::NonFinite("lambda"));
                    }
                    if rate < 0.0 {
                        return Err(ModelError::NegativeRate {
                            x: raw.states[x].clone(),
                            u: raw.controls[u].clone(),
                            z: raw.states[z].clone(),
                            rate,
                        });
                    }
                    if z == x && rate != 0.0 {
                        return Err(ModelError::DiagonalRate {
                            state: raw.states[x].clone(),
                            control: raw.controls[u].clone(),
                            rate,
                        });
                    }
                    lambda.push(rate);
                }
            }
        }
        let mut f = Vec::with_capacity(n * m);
        for row in &raw.f {
            for &c in row {
                if !c.is_finite() {
                    return Err(ModelError::NonFinite("f"));
                }
                f.push(c);
            }
        }

        if !opts.allow_degenerate_h {
            let distinct: HashSet<usize> = h.iter().copied().collect();
            if distinct.len() == 1 {
                return Err(ModelError::DegenerateH("constant"));
            }
            if distinct.len() == n {
                return Err(ModelError::DegenerateH("injective"));
            }
        }
        let mut faces = vec![Vec::new(); n_obs];
        for (x, &y) in h.iter().enumerate() {
            faces[y].push(x);
        }
        if let Some(y) = faces.iter().position(Vec::is_empty) {
            return Err(ModelError::NonSurjectiveH(raw.obs[y].clone()));
        }

        let mut total_rate = vec![0.0; n * m];
        let mut exit_rate = vec![0.0; n * m];
        let mut face_rate = vec![0.0; n * m * n_obs];
        for x in 0..n {
            for u in 0..m {
                for z in 0..n {
                    let rate = lambda[(x * m + u) * n + z];
                    total_rate[x * m + u] += rate;
                    if h[z] != h[x] {
                        exit_rate[x * m + u] += rate;
                    }
                    face_rate[(x * m + u) * n_obs + h[z]] += rate;
                }
            }
        }
        let c_lambda = total_rate.iter().copied().fold(0.0, f64::max);
        let c_f = f.iter().map(|c| c.abs()).fold(0.0, f64::max);

        Ok(Self {
            states: raw.states.clone(),
            obs: raw.obs.clone(),
            controls: raw.controls.clone(),
            h,
            faces,
            lambda,
            f,
            beta: raw.beta,
            total_rate,
            exit_rate,
            face_rate,
            c_lambda,
            c_f,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        validate_model(&RawModel::from_json_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>, opts: ValidateOptions) -> Result<Self, ModelError> {
        Self::from_raw(&RawModel::load(path)?, opts)
    }

    /// Rebuilds the file document, e.g. to derive a model variant.
    pub fn to_raw(&self) -> RawModel {
        let (n, m) = (self.n_states(), self.n_controls());
        RawModel {
            states: self.states.clone(),
            obs: self.obs.clone(),
            h: self.h.iter().map(|&y| self.obs[y].clone()).collect(),
            controls: self.controls.clone(),
            lambda: (0..n)
                .map(|x| (0..m).map(|u| (0..n).map(|z| self.rate(x, u, z)).collect()).collect())
                .collect(),
            f: (0..n).map(|x| (0..m).map(|u| self.cost(x, u)).collect()).collect(),
            beta: self.beta,
        }
    }

    /// Same dynamics with the running cost replaced by `cost(x, u, f(x, u))`.
    pub fn with_cost(&self, cost: impl Fn(usize, usize, f64) -> f64) -> Result<Self, ModelError> {
        let mut raw = self.to_raw();
        for (x, row) in raw.f.iter_mut().enumerate() {
            for (u, c) in row.iter_mut().enumerate() {
                *c = cost(x, u, *c);
            }
        }
        Self::from_raw(&raw, ValidateOptions { allow_degenerate_h: true })
    }

    /// Same model restricted to the listed controls.
    pub fn restrict_controls(&self, keep: &[usize]) -> Result<Self, ModelError> {
        let mut raw = self.to_raw();
        raw.controls = keep.iter().map(|&u| self.controls[u].clone()).collect();
        raw.lambda = raw
            .lambda
            .iter()
            .map(|per_u| keep.iter().map(|&u| per_u[u].clone()).collect())
            .collect();
        raw.f = raw.f.iter().map(|row| keep.iter().map(|&u| row[u]).collect()).collect();
        Self::from_raw(&raw, ValidateOptions { allow_degenerate_h: true })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn obs_labels(&self) -> &[String] {
        &self.obs
    }

    pub fn controls(&self) -> &[String] {
        &self.controls
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.states.iter().position(|s| s == label)
    }

    pub fn obs_index(&self, label: &str) -> Option<usize> {
        self.obs.iter().position(|s| s == label)
    }

    pub fn control_index(&self, label: &str) -> Option<usize> {
        self.controls.iter().position(|s| s == label)
    }

    /// Observation index of state `x`.
    #[inline]
    pub fn h(&self, x: usize) -> usize {
        self.h[x]
    }

    /// The level set `h^{-1}(y)`, ascending.
    #[inline]
    pub fn face_states(&self, y: usize) -> &[usize] {
        &self.faces[y]
    }

    #[inline]
    pub fn rate(&self, x: usize, u: usize, z: usize) -> f64 {
        self.lambda[(x * self.n_controls() + u) * self.n_states() + z]
    }

    /// Rate row `lambda(x, u, .)`.
    #[inline]
    pub fn rates_from(&self, x: usize, u: usize) -> &[f64] {
        let n = self.n_states();
        let start = (x * self.n_controls() + u) * n;
        &self.lambda[start..start + n]
    }

    /// Total jump rate `lambda(x, u)`.
    #[inline]
    pub fn total_rate(&self, x: usize, u: usize) -> f64 {
        self.total_rate[x * self.n_controls() + u]
    }

    /// Rate of leaving the level set of `h(x)`.
    #[inline]
    pub fn exit_rate(&self, x: usize, u: usize) -> f64 {
        self.exit_rate[x * self.n_controls() + u]
    }

    /// Rate of jumping into `h^{-1}(y)`.
    #[inline]
    pub fn rate_into_face(&self, x: usize, u: usize, y: usize) -> f64 {
        self.face_rate[(x * self.n_controls() + u) * self.n_obs() + y]
    }

    #[inline]
    pub fn cost(&self, x: usize, u: usize) -> f64 {
        self.f[x * self.n_controls() + u]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `max_(x,u) lambda(x, u)`.
    pub fn c_lambda(&self) -> f64 {
        self.c_lambda
    }

    /// `max_(x,u) |f(x, u)|`.
    pub fn c_f(&self) -> f64 {
        self.c_f
    }

    /// Default RK4 step, `1e-3 / C_lambda` (or `1e-3` for a rate-free model).
    pub fn default_step(&self) -> f64 {
        if self.c_lambda > 0.0 {
            1e-3 / self.c_lambda
        } else {
            1e-3
        }
    }

    /// True when no state of face `y` can leave it under control `u`.
    pub fn face_is_closed(&self, y: usize, u: usize) -> bool {
        self.faces[y].iter().all(|&x| self.exit_rate(x, u) == 0.0)
    }

    pub fn check_state(&self, x: usize) -> Result<(), ModelError> {
        if x < self.n_states() {
            Ok(())
        } else {
            Err(ModelError::StateIndex {
                index: x,
                len: self.n_states(),
            })
        }
    }

    pub fn check_obs(&self, y: usize) -> Result<(), ModelError> {
        if y < self.n_obs() {
            Ok(())
        } else {
            Err(ModelError::ObsIndex {
                index: y,
                len: self.n_obs(),
            })
        }
    }
}

/// A probability vector over all states, confined to the face `h^{-1}(face)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    face: usize,
    weights: Vec<f64>,
}

/// Returns a description of the first violated belief invariant, if any.
pub fn belief_violation(model: &ModelSpec, face: usize, weights: &[f64]) -> Option<String> {
    if face >= model.n_obs() {
        return Some(format!("face {face} out of range"));
    }
    if weights.len() != model.n_states() {
        return Some(format!(
            "{} weights for {} states",
            weights.len(),
            model.n_states()
        ));
    }
    let mut mass = 0.0;
    for (z, &w) in weights.iter().enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Some(format!("weight {z} is {w}"));
        }
        if model.h(z) != face && w > LEAK_TOL {
            return Some(format!("weight {z} = {w} lies off face {face}"));
        }
        mass += w;
    }
    if (mass - 1.0).abs() > MASS_TOL {
        return Some(format!("total mass {mass}"));
    }
    None
}

impl Belief {
    pub fn new(model: &ModelSpec, face: usize, weights: Vec<f64>) -> Result<Self, ModelError> {
        match belief_violation(model, face, &weights) {
            Some(msg) => Err(ModelError::InvalidBelief(msg)),
            None => Ok(Self { face, weights }),
        }
    }

    /// Internal constructor; invariants are asserted in debug builds.
    pub(crate) fn from_parts(model: &ModelSpec, face: usize, weights: Vec<f64>) -> Self {
        debug_assert!(
            belief_violation(model, face, &weights).is_none(),
            "belief invariant violated: {:?}",
            belief_violation(model, face, &weights)
        );
        Self { face, weights }
    }

    #[inline]
    pub fn face(&self) -> usize {
        self.face
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    /// `sum_z weights[z] * values[z]`.
    pub fn dot(&self, values: impl Fn(usize) -> f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(z, &w)| w * values(z))
            .sum()
    }
}

/// Point mass at state `x`.
pub fn dirac(model: &ModelSpec, x: usize) -> Result<Belief, ModelError> {
    model.check_state(x)?;
    let mut weights = vec![0.0; model.n_states()];
    weights[x] = 1.0;
    Ok(Belief::from_parts(model, model.h(x), weights))
}

/// The level set `h^{-1}(y)`; never empty for a validated model.
pub fn face_states(model: &ModelSpec, y: usize) -> Result<&[usize], ModelError> {
    model.check_obs(y)?;
    Ok(model.face_states(y))
}

/// Total-variation distance as the plain sum of absolute differences.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
