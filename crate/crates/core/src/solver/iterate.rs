//! Value iteration, policy extraction and the lift to the original problem.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bellman::{sup_diff, BellmanOperator, Mode, SolverConfig};
use super::grid::BeliefGrid;
use super::SolverError;
use crate::control::{ControlPath, FeedbackRule, Policy, SojournLaw};
use crate::filter::{check_law, h_update, NonnegMeasure};
use crate::model::{Belief, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub k: u32,
    pub mode: Mode,
    pub values: Vec<f64>,
    /// `sup |G v - v|` at the returned field.
    pub residual: f64,
    pub iterations: usize,
}

/// One control per grid vertex. Off the grid the control of the vertex with
/// the largest barycentric weight is used.
#[derive(Debug, Clone)]
pub struct StationaryPolicy {
    grid: Arc<BeliefGrid>,
    controls: Vec<usize>,
    mode: Mode,
    hold: f64,
    fingerprint: u64,
}

impl StationaryPolicy {
    /// `hold` is the re-decision interval of mode B and ignored in mode A.
    pub fn new(grid: Arc<BeliefGrid>, controls: Vec<usize>, mode: Mode, hold: f64) -> Self {
        assert_eq!(grid.len(), controls.len(), "one control per vertex");
        // the grid is determined by the face structure and k
        let mut h = DefaultHasher::new();
        (grid.k(), grid.len(), &controls).hash(&mut h);
        (0..grid.len()).map(|v| grid.face_of(v)).collect::<Vec<_>>().hash(&mut h);
        Self {
            grid,
            controls,
            mode,
            hold,
            fingerprint: h.finish(),
        }
    }

    pub fn controls(&self) -> &[usize] {
        &self.controls
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn control_for_belief(&self, belief: &Belief) -> usize {
        self.control_for(belief.face(), belief.weights())
    }
}

impl FeedbackRule for StationaryPolicy {
    fn control_for(&self, face: usize, weights: &[f64]) -> usize {
        self.controls[self.grid.nearest_vertex(face, weights)]
    }

    fn fingerprint(&self) -> Option<u64> {
        Some(self.fingerprint)
    }
}

impl Policy for StationaryPolicy {
    fn sojourn_law(&self, post_jump: &Belief) -> SojournLaw<'_> {
        match self.mode {
            Mode::A => SojournLaw::Open(ControlPath::constant(self.control_for_belief(post_jump))),
            Mode::B => SojournLaw::Feedback {
                rule: self,
                hold: self.hold,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub kappa_hat: f64,
    /// Largest change of the value between resolutions `k` and `k / 2` at
    /// the coarse vertices; absent for `k = 1`.
    pub grid_bias_estimate: Option<f64>,
    pub truncation_budget: f64,
}

pub fn kappa_hat(model: &ModelSpec) -> f64 {
    let c = model.c_lambda();
    c / (model.beta() + c)
}

/// Iterates `w <- G w` from `w = 0` until successive fields differ by at most
/// `tol (1 - kappa) / kappa`, then applies `G` once more for the residual and
/// the policy.
pub fn value_iteration_with(
    model: &ModelSpec,
    op: &BellmanOperator,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueField, StationaryPolicy), SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::BadParameter("tol", tol));
    }
    let kappa = kappa_hat(model);
    let stop = if kappa > 0.0 {
        tol * (1.0 - kappa) / kappa
    } else {
        f64::INFINITY
    };
    let grid = op.grid().clone();
    let mut w = vec![0.0; grid.len()];
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        let next = op.apply(&w)?.values;
        diff = sup_diff(&next, &w);
        w = next;
        if diff <= stop {
            let applied = op.apply(&w)?;
            let residual = sup_diff(&applied.values, &w);
            let hold = match op.mode() {
                Mode::A => f64::INFINITY,
                Mode::B => op.horizon_param(),
            };
            let policy = StationaryPolicy::new(grid.clone(), applied.controls, op.mode(), hold);
            let field = ValueField {
                k: grid.k(),
                mode: op.mode(),
                values: w,
                residual,
                iterations: it,
            };
            return Ok((field, policy));
        }
    }
    Err(SolverError::NoConvergence {
        iterations: max_iter,
        diff,
    })
}

pub fn value_iteration(
    model: &ModelSpec,
    grid: Arc<BeliefGrid>,
    cfg: &SolverConfig,
) -> Result<(ValueField, StationaryPolicy), SolverError> {
    let op = BellmanOperator::compile(model, grid, cfg)?;
    value_iteration_with(model, &op, cfg.tol, cfg.max_iter)
}

/// Everything produced by a solve at one resolution.
#[derive(Debug, Clone)]
pub struct Solution {
    pub grid: Arc<BeliefGrid>,
    pub field: ValueField,
    pub policy: StationaryPolicy,
    pub report: SolveReport,
}

impl Solution {
    pub fn value_at(&self, belief: &Belief) -> f64 {
        self.grid.interpolate(&self.field.values, belief)
    }

    pub fn lift(&self, model: &ModelSpec, mu: &[f64]) -> Result<f64, SolverError> {
        lift_value(model, &self.grid, &self.field, mu)
    }
}

/// Builds the grid at resolution `k`, iterates to convergence, and compares
/// with a coarse solve at `k / 2` for the grid-bias estimate.
pub fn solve(model: &ModelSpec, k: u32, cfg: &SolverConfig) -> Result<Solution, SolverError> {
    let grid = Arc::new(BeliefGrid::new(model, k)?);
    let op = BellmanOperator::compile(model, grid.clone(), cfg)?;
    let (field, policy) = value_iteration_with(model, &op, cfg.tol, cfg.max_iter)?;
    let grid_bias_estimate = if k >= 2 {
        let coarse = Arc::new(BeliefGrid::new(model, k / 2)?);
        let (cf, _) = value_iteration(model, coarse.clone(), cfg)?;
        Some(
            (0..coarse.len())
                .map(|v| (grid.interpolate(&field.values, coarse.belief(v)) - cf.values[v]).abs())
                .fold(0.0, f64::max),
        )
    } else {
        None
    };
    let report = SolveReport {
        iterations: field.iterations,
        residual: field.residual,
        kappa_hat: kappa_hat(model),
        grid_bias_estimate,
        truncation_budget: op.truncation_budget(),
    };
    Ok(Solution {
        grid,
        field,
        policy,
        report,
    })
}

/// `V(mu) = sum_y mu(h^{-1}(y)) v(H_y[mu])`, skipping labels without mass.
pub fn lift_value(model: &ModelSpec, grid: &BeliefGrid, v: &ValueField, mu: &[f64]) -> Result<f64, SolverError> {
    check_law(model, mu)?;
    if v.values.len() != grid.len() {
        return Err(SolverError::FieldShape {
            expected: grid.len(),
            got: v.values.len(),
        });
    }
    let measure = NonnegMeasure(mu.to_vec());
    let mut total = 0.0;
    for y in 0..model.n_obs() {
        let mass: f64 = model.face_states(y).iter().map(|&x| mu[x]).sum();
        if mass > 0.0 {
            total += mass * grid.interpolate(&v.values, &h_update(model, &measure, y));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::m1;

    #[test]
    fn constant_cost_converges_to_c_over_beta() {
        let c = 1.7;
        let m = m1().with_cost(|_, _, _| c).unwrap();
        let grid = Arc::new(BeliefGrid::new(&m, 4).unwrap());
        for mode in [Mode::A, Mode::B] {
            let mut cfg = SolverConfig::new(mode, 1e-8);
            cfg.dt = Some(1e-2);
            let (v, _) = value_iteration(&m, grid.clone(), &cfg).unwrap();
            for x in &v.values {
                assert!((x - c).abs() < 1e-6, "{mode}: {x}");
            }
            assert!(v.residual <= 1e-8);
        }
    }

    #[test]
    fn iterates_increase_from_zero_for_nonnegative_cost() {
        let m = m1();
        let grid = Arc::new(BeliefGrid::new(&m, 4).unwrap());
        let op = BellmanOperator::compile(&m, grid.clone(), &SolverConfig::new(Mode::A, 1e-4)).unwrap();
        let mut w = vec![0.0; grid.len()];
        for _ in 0..30 {
            let next = op.apply(&w).unwrap().values;
            assert!(next.iter().zip(&w).all(|(a, b)| *a >= *b - 1e-12));
            w = next;
        }
        let bound = m.c_f() / m.beta();
        assert!(w.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn lift_examples() {
        let m = m1();
        let grid = Arc::new(BeliefGrid::new(&m, 4).unwrap());
        let (v, _) = value_iteration(&m, grid.clone(), &SolverConfig::new(Mode::A, 1e-4)).unwrap();
        let d2 = grid.vertices_on_face(1).start;
        assert_eq!(lift_value(&m, &grid, &v, &[0.0, 0.0, 1.0]).unwrap(), v.values[d2]);
        let half = grid.vertex_of(0, &[0.5, 0.5, 0.0]).unwrap();
        let uniform = lift_value(&m, &grid, &v, &[1.0 / 3.0; 3]).unwrap();
        let expected = (2.0 / 3.0) * v.values[half] + (1.0 / 3.0) * v.values[d2];
        assert!((uniform - expected).abs() < 1e-15);
    }
}
