//! Exact filter for noise-free observations of a controlled jump process.
//!
//! Between observation jumps on face `y` the belief solves
//!
//! ```text
//! d nu / dt = F(nu, u) = B_y^u nu - nu * (B_y^u nu)(I)
//! (B_y^u nu)[z] = 1{h(z) = y} sum_x lambda(x, u, z) nu[x] - lambda(z, u) nu[z]
//! ```
//!
//! and at a jump to label `y'` it is reset to `H_{y'}[Lambda(nu-, u-)]`, where
//! `Lambda` collects the mass sent off the current face and `H` conditions a
//! measure on a level set.

mod flow;
mod replay;

pub use flow::{flow, flow_with_step, FlowCache, FlowPoint, FlowTable, NodeStats, Sojourn};
pub use replay::{run_filter, BeliefPath, FilterControl, FilterJump, YPath};
pub(crate) use replay::check_law;

use thiserror::Error;

use crate::control::ControlError;
use crate::model::{Belief, ModelError, ModelSpec};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("integration step {step} is not usable for duration {duration}")]
    StepUnderflow { step: f64, duration: f64 },
    #[error("belief entry {value} fell below the clipping tolerance during integration")]
    NegativeMass { value: f64 },
    #[error("belief mass {value} leaked off its face during integration")]
    Leakage { value: f64 },
    #[error("jump update to label {0} which is already the current face")]
    SameFace(usize),
    #[error("observation jump {index} is not strictly after the previous one")]
    NonincreasingTimes { index: usize },
    #[error("observation jump {index} repeats the current label")]
    RepeatedLabel { index: usize },
    #[error("initial law is not a probability vector over the states")]
    BadInitialLaw,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Nonnegative (not necessarily normalized) measure over the states.
#[derive(Debug, Clone, PartialEq)]
pub struct NonnegMeasure(pub Vec<f64>);

/// Signed measure over the states, e.g. a value of the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentMeasure(pub Vec<f64>);

impl NonnegMeasure {
    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TangentMeasure {
    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<&Belief> for NonnegMeasure {
    fn from(b: &Belief) -> Self {
        NonnegMeasure(b.weights().to_vec())
    }
}

/// Conditions `mu` on `h^{-1}(y)`. A measure without mass there maps to the
/// uniform law on the level set; the returned flag marks that case.
pub fn h_update_flagged(model: &ModelSpec, mu: &NonnegMeasure, y: usize) -> (Belief, bool) {
    let face = model.face_states(y);
    let mass: f64 = face.iter().map(|&z| mu.0[z]).sum();
    let mut weights = vec![0.0; model.n_states()];
    if mass > 0.0 {
        for &z in face {
            weights[z] = mu.0[z] / mass;
        }
        (Belief::from_parts(model, y, weights), false)
    } else {
        let p = 1.0 / face.len() as f64;
        for &z in face {
            weights[z] = p;
        }
        (Belief::from_parts(model, y, weights), true)
    }
}

pub fn h_update(model: &ModelSpec, mu: &NonnegMeasure, y: usize) -> Belief {
    h_update_flagged(model, mu, y).0
}

/// Mass sent off the current face: `1{h(z) != y} sum_x lambda(x, u, z) nu[x]`.
pub fn big_lambda(model: &ModelSpec, nu: &Belief, u: usize) -> NonnegMeasure {
    let y = nu.face();
    let mut out = vec![0.0; model.n_states()];
    for &x in model.face_states(y) {
        let w = nu.weights()[x];
        if w == 0.0 {
            continue;
        }
        for (z, &rate) in model.rates_from(x, u).iter().enumerate() {
            if model.h(z) != y {
                out[z] += rate * w;
            }
        }
    }
    NonnegMeasure(out)
}

/// `B_y^u nu` for an arbitrary measure `nu`.
pub fn b_op(model: &ModelSpec, nu: &[f64], y: usize, u: usize) -> TangentMeasure {
    let n = model.n_states();
    let mut out = vec![0.0; n];
    for (x, &w) in nu.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (z, &rate) in model.rates_from(x, u).iter().enumerate() {
            if model.h(z) == y {
                out[z] += rate * w;
            }
        }
    }
    for (z, o) in out.iter_mut().enumerate() {
        *o -= model.total_rate(z, u) * nu[z];
    }
    TangentMeasure(out)
}

/// Writes `F(nu, u)` on the entries of face `y` (others untouched) and
/// returns `(B_y^u nu)(I)`. `nu` must vanish off the face.
#[inline]
pub(crate) fn field_on_face(model: &ModelSpec, y: usize, u: usize, nu: &[f64], out: &mut [f64]) -> f64 {
    let face = model.face_states(y);
    let mut total = 0.0;
    for &z in face {
        let mut inflow = 0.0;
        for &x in face {
            inflow += model.rate(x, u, z) * nu[x];
        }
        let b = inflow - model.total_rate(z, u) * nu[z];
        out[z] = b;
        total += b;
    }
    for &z in face {
        out[z] -= nu[z] * total;
    }
    total
}

/// The filter vector field `F(nu, u)`; zero total mass, supported on the face.
pub fn vector_field(model: &ModelSpec, nu: &Belief, u: usize) -> TangentMeasure {
    let mut out = vec![0.0; model.n_states()];
    field_on_face(model, nu.face(), u, nu.weights(), &mut out);
    TangentMeasure(out)
}

/// Filter reset at an observation jump to `y_new`, flagging the zero-mass
/// fallback of the conditioning step.
pub fn jump_update_flagged(
    model: &ModelSpec,
    nu_minus: &Belief,
    u_minus: usize,
    y_new: usize,
) -> Result<(Belief, bool), FilterError> {
    model.check_obs(y_new)?;
    if y_new == nu_minus.face() {
        return Err(FilterError::SameFace(y_new));
    }
    Ok(h_update_flagged(model, &big_lambda(model, nu_minus, u_minus), y_new))
}

pub fn jump_update(
    model: &ModelSpec,
    nu_minus: &Belief,
    u_minus: usize,
    y_new: usize,
) -> Result<Belief, FilterError> {
    jump_update_flagged(model, nu_minus, u_minus, y_new).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dirac;
    use crate::testutil::m1;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn h_update_cases() {
        let m = m1();
        let b = h_update(&m, &NonnegMeasure(vec![0.2, 0.2, 0.6]), 0);
        assert_eq!(b.face(), 0);
        assert!(close(b.weights(), &[0.5, 0.5, 0.0], 1e-15));

        let nu = Belief::new(&m, 0, vec![0.3, 0.7, 0.0]).unwrap();
        let same = h_update(&m, &NonnegMeasure::from(&nu), 0);
        assert_eq!(same, nu);

        let (fallback, degenerate) = h_update_flagged(&m, &NonnegMeasure(vec![0.0, 0.0, 1.0]), 0);
        assert!(degenerate);
        assert_eq!(fallback.weights(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn big_lambda_cases() {
        let m = m1();
        assert_eq!(big_lambda(&m, &dirac(&m, 0).unwrap(), 0).0, vec![0.0, 0.0, 1.0]);
        let half = Belief::new(&m, 0, vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(big_lambda(&m, &half, 0).0, vec![0.0, 0.0, 0.75]);
    }

    #[test]
    fn big_lambda_vanishes_without_exit_rates() {
        let mut raw = m1().to_raw();
        for x in 0..2 {
            for u in 0..2 {
                raw.lambda[x][u][2] = 0.0;
            }
        }
        let m = crate::model::validate_model(&raw).unwrap();
        let nu = Belief::new(&m, 0, vec![0.25, 0.75, 0.0]).unwrap();
        assert_eq!(big_lambda(&m, &nu, 1).0, vec![0.0; 3]);
    }

    #[test]
    fn b_op_cases() {
        let m = m1();
        assert_eq!(b_op(&m, &[1.0, 0.0, 0.0], 0, 0).0, vec![-2.0, 1.0, 0.0]);
        assert_eq!(b_op(&m, &[0.0, 0.0, 1.0], 1, 0).0, vec![0.0, 0.0, -2.0]);
        // total mass equals minus the rate of leaving the face
        let nu = [0.3, 0.7, 0.0];
        for u in 0..2 {
            let exit: f64 = (0..3).map(|x| m.exit_rate(x, u) * nu[x]).sum();
            assert!((b_op(&m, &nu, 0, u).mass() + exit).abs() < 1e-15);
        }
    }

    #[test]
    fn vector_field_cases() {
        let m = m1();
        assert_eq!(vector_field(&m, &dirac(&m, 0).unwrap(), 0).0, vec![-1.0, 1.0, 0.0]);
        assert_eq!(vector_field(&m, &dirac(&m, 2).unwrap(), 1).0, vec![0.0, 0.0, 0.0]);
        let nu = Belief::new(&m, 0, vec![0.3, 0.7, 0.0]).unwrap();
        assert!(vector_field(&m, &nu, 1).mass().abs() <= 1e-14);
    }

    #[test]
    fn jump_update_cases() {
        let m = m1();
        let d0 = dirac(&m, 0).unwrap();
        assert_eq!(jump_update(&m, &d0, 0, 1).unwrap().weights(), &[0.0, 0.0, 1.0]);
        let half = Belief::new(&m, 0, vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(jump_update(&m, &half, 0, 1).unwrap().weights(), &[0.0, 0.0, 1.0]);
        let d2 = dirac(&m, 2).unwrap();
        let b = jump_update(&m, &d2, 0, 0).unwrap();
        assert_eq!(b.face(), 0);
        assert_eq!(b.weights(), &[0.5, 0.5, 0.0]);
        assert!(matches!(jump_update(&m, &d2, 0, 1), Err(FilterError::SameFace(1))));
    }
}
