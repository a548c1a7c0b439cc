//! The jump-to-jump Bellman operator on grid fields.
//!
//! For a fixed belief and control the operator is affine in the field, so
//! each (vertex, control) pair is compiled once into a running cost and
//! sparse coefficients on the vertices reached by jumps (and, in mode B, by
//! the flow).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::BeliefGrid;
use super::SolverError;
use crate::control::{ControlError, ControlPath};
use crate::filter::{flow_with_step, FlowTable};
use crate::model::{Belief, ModelSpec};
use crate::pdmp::rate_on_face;

/// Approximation of the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Controls held constant between observation jumps; the sojourn
    /// integral is evaluated by quadrature up to a truncation time.
    A,
    /// Controls re-decided every `dt` along the flow; the between-jump
    /// problem is solved by a semi-Lagrangian scheme.
    B,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::A => "A",
            Mode::B => "B",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Mode::A),
            "B" | "b" => Ok(Mode::B),
            other => Err(format!("unknown mode {other:?}, expected A or B")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub mode: Mode,
    pub tol: f64,
    /// Mode A truncation time; derived from `tol` when `None`.
    pub t_max: Option<f64>,
    /// Mode A quadrature step; the flow step when `None`.
    pub quad_step: Option<f64>,
    /// Mode B time step; `min(1e-2, 0.5 / C_lambda)` when `None`.
    pub dt: Option<f64>,
    pub max_iter: usize,
}

impl SolverConfig {
    pub fn new(mode: Mode, tol: f64) -> Self {
        Self {
            mode,
            tol,
            t_max: None,
            quad_step: None,
            dt: None,
            max_iter: 1000,
        }
    }
}

/// Truncation time with `C_f e^{-beta T} / beta <= 0.01 tol`.
pub fn default_t_max(model: &ModelSpec, tol: f64) -> f64 {
    let beta = model.beta();
    (model.c_f().max(tol) / (0.01 * tol * beta)).ln().max(1.0) / beta
}

pub fn default_dt(model: &ModelSpec) -> f64 {
    let c = model.c_lambda();
    if c > 0.0 {
        (0.5 / c).min(1e-2)
    } else {
        1e-2
    }
}

/// Affine functional `cost + jump . w + cont . W` of one (belief, control).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Row {
    pub cost: f64,
    pub jump: Vec<(u32, f64)>,
    pub cont: Vec<(u32, f64)>,
}

impl Row {
    #[inline]
    fn eval(&self, w: &[f64], inner: &[f64]) -> f64 {
        let mut acc = self.cost;
        for &(v, c) in &self.jump {
            acc += c * w[v as usize];
        }
        for &(v, c) in &self.cont {
            acc += c * inner[v as usize];
        }
        acc
    }

    /// Total weight on jump targets.
    pub fn jump_mass(&self) -> f64 {
        self.jump.iter().map(|p| p.1).sum()
    }
}

/// Dense scratch accumulator that emits sparse coefficients in vertex order.
struct Accumulator {
    dense: Vec<f64>,
    touched: Vec<u32>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            dense: vec![0.0; n],
            touched: Vec::new(),
        }
    }

    #[inline]
    fn add(&mut self, v: usize, c: f64) {
        if self.dense[v] == 0.0 {
            self.touched.push(v as u32);
        }
        self.dense[v] += c;
    }

    fn take(&mut self) -> Vec<(u32, f64)> {
        self.touched.sort_unstable();
        self.touched.dedup();
        let out = self
            .touched
            .iter()
            .map(|&v| (v, std::mem::take(&mut self.dense[v as usize])))
            .filter(|p| p.1 != 0.0)
            .collect();
        self.touched.clear();
        out
    }
}

/// Adds `scale * sum_{y'} Lambda(nu, u)(y') * interp(H_{y'}[Lambda(nu, u)])`.
fn add_jump_targets(
    model: &ModelSpec,
    grid: &BeliefGrid,
    face: usize,
    u: usize,
    weights: &[f64],
    scale: f64,
    acc: &mut Accumulator,
    target: &mut Vec<f64>,
    interp: &mut Vec<(usize, f64)>,
) {
    if scale == 0.0 {
        return;
    }
    for y in 0..model.n_obs() {
        if y == face {
            continue;
        }
        let mut mass = 0.0;
        for &z in model.face_states(y) {
            let mut m = 0.0;
            for &x in model.face_states(face) {
                m += model.rate(x, u, z) * weights[x];
            }
            target[z] = m;
            mass += m;
        }
        if !(mass > 0.0) {
            continue;
        }
        for &z in model.face_states(y) {
            target[z] /= mass;
        }
        grid.interpolation_into(y, target, interp);
        for &(v, w) in interp.iter() {
            acc.add(v, scale * mass * w);
        }
        for &z in model.face_states(y) {
            target[z] = 0.0;
        }
    }
}

/// Composite Simpson nodes on `[0, t_max]` with step at most `h0`.
fn simpson_grid(t_max: f64, h0: f64) -> (usize, f64) {
    let n = 2 * ((t_max / (2.0 * h0)).ceil() as usize).max(1);
    (n, t_max / n as f64)
}

#[inline]
fn simpson_weight(i: usize, n: usize, h: f64) -> f64 {
    let m = if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    };
    m * h / 3.0
}

/// Mode A row: `int_0^T e^{-beta t} chi(t) [phi_t . f(., u) + sum_{y'} Lambda(phi_t, u)(y') w(H_{y'}[Lambda(phi_t, u)])] dt`.
pub fn const_row(
    model: &ModelSpec,
    grid: &BeliefGrid,
    nu: &Belief,
    u: usize,
    t_max: f64,
    quad_step: f64,
) -> Result<Row, SolverError> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(SolverError::BadParameter("t_max", t_max));
    }
    let (n, h) = simpson_grid(t_max, quad_step);
    let face = nu.face();
    let beta = model.beta();
    let mut table = FlowTable::new(model, nu, u, h)?;
    let mut acc = Accumulator::new(grid.len());
    let mut target = vec![0.0; model.n_states()];
    let mut interp = Vec::new();
    let mut cost = 0.0;
    for i in 0..=n {
        let p = table.node(model, i)?;
        let disc = simpson_weight(i, n, h) * (-beta * i as f64 * h - p.rate_integral).exp();
        let mut running = 0.0;
        for &x in model.face_states(face) {
            running += model.cost(x, u) * p.weights[x];
        }
        cost += disc * running;
        add_jump_targets(model, grid, face, u, &p.weights, disc, &mut acc, &mut target, &mut interp);
    }
    Ok(Row {
        cost,
        jump: acc.take(),
        cont: Vec::new(),
    })
}

/// Mode B row for one step `dt`:
/// `(1 - e^{-beta dt}) / beta * nu . f + e^{-beta dt} [p sum_{y'} rho(y') w(H_{y'}) + (1 - p) W(phi_dt)]`
/// with `p = 1 - e^{-r dt}`.
pub fn sl_row(model: &ModelSpec, grid: &BeliefGrid, nu: &Belief, u: usize, dt: f64) -> Result<Row, SolverError> {
    check_dt(model, dt)?;
    let face = nu.face();
    let beta = model.beta();
    let disc = (-beta * dt).exp();
    let r = rate_on_face(model, face, u, nu.weights());
    let p = -(-r * dt).exp_m1();
    let mut running = 0.0;
    for &x in model.face_states(face) {
        running += model.cost(x, u) * nu.weights()[x];
    }
    let mut acc = Accumulator::new(grid.len());
    let mut target = vec![0.0; model.n_states()];
    let mut interp = Vec::new();
    if r > 0.0 {
        add_jump_targets(model, grid, face, u, nu.weights(), disc * p / r, &mut acc, &mut target, &mut interp);
    }
    let jump = acc.take();
    let moved = flow_with_step(model, nu, &ControlPath::constant(u), dt, model.default_step())?;
    grid.interpolation_into(face, moved.weights(), &mut interp);
    for &(v, w) in &interp {
        acc.add(v, disc * (1.0 - p) * w);
    }
    Ok(Row {
        cost: -(-beta * dt).exp_m1() / beta * running,
        jump,
        cont: acc.take(),
    })
}

fn check_dt(model: &ModelSpec, dt: f64) -> Result<(), SolverError> {
    if !(dt > 0.0) || !(dt * model.c_lambda() < 1.0) {
        return Err(SolverError::StepTooLarge {
            dt,
            c_lambda: model.c_lambda(),
        });
    }
    Ok(())
}

fn check_field(grid: &BeliefGrid, w: &[f64]) -> Result<(), SolverError> {
    if w.len() != grid.len() {
        return Err(SolverError::FieldShape {
            expected: grid.len(),
            got: w.len(),
        });
    }
    Ok(())
}

/// Argmin over controls with ties going to the lowest index.
fn argmin(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (u, q) in values.enumerate() {
        if q < best.0 {
            best = (q, u);
        }
    }
    best
}

/// One-stage cost `g(nu, u)`: expected discounted cost until the next
/// observation jump under the constant control `u`.
pub fn one_stage_cost(model: &ModelSpec, nu: &Belief, u: usize, t_max: f64, quad_step: f64) -> Result<f64, SolverError> {
    if u >= model.n_controls() {
        return Err(ControlError::ControlIndex {
            index: u,
            len: model.n_controls(),
        }
        .into());
    }
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(SolverError::BadParameter("t_max", t_max));
    }
    let (n, h) = simpson_grid(t_max, quad_step);
    let mut table = FlowTable::new(model, nu, u, h)?;
    let mut cost = 0.0;
    for i in 0..=n {
        let p = table.node(model, i)?;
        let disc = simpson_weight(i, n, h) * (-model.beta() * i as f64 * h - p.rate_integral).exp();
        let running: f64 = model
            .face_states(nu.face())
            .iter()
            .map(|&x| model.cost(x, u) * p.weights[x])
            .sum();
        cost += disc * running;
    }
    Ok(cost)
}

/// Mode A operator at an arbitrary belief.
pub fn bellman_const(
    model: &ModelSpec,
    grid: &BeliefGrid,
    w: &[f64],
    nu: &Belief,
    t_max: f64,
    quad_step: f64,
) -> Result<(f64, usize), SolverError> {
    check_field(grid, w)?;
    let rows = (0..model.n_controls())
        .map(|u| const_row(model, grid, nu, u, t_max, quad_step))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(argmin(rows.iter().map(|r| r.eval(w, &[]))))
}

/// One semi-Lagrangian step at an arbitrary belief, with the same field
/// used at jump targets and along the flow.
pub fn bellman_sl(
    model: &ModelSpec,
    grid: &BeliefGrid,
    w: &[f64],
    nu: &Belief,
    dt: f64,
) -> Result<(f64, usize), SolverError> {
    check_field(grid, w)?;
    let rows = (0..model.n_controls())
        .map(|u| sl_row(model, grid, nu, u, dt))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(argmin(rows.iter().map(|r| r.eval(w, w))))
}

/// Result of applying the operator to a field.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub values: Vec<f64>,
    pub controls: Vec<usize>,
    /// Per-vertex values of every control, row-major by vertex.
    pub q: Vec<f64>,
}

/// The operator compiled on a grid.
#[derive(Debug, Clone)]
pub struct BellmanOperator {
    grid: Arc<BeliefGrid>,
    mode: Mode,
    n_controls: usize,
    rows: Vec<Row>,
    /// Mode A truncation time or mode B step.
    horizon_param: f64,
    truncation_budget: f64,
    inner_kappa: f64,
}

const INNER_TOL: f64 = 1e-11;
/// Below this many rows a sweep runs on the calling thread.
const PAR_MIN_ROWS: usize = 4096;
const INNER_MAX_ITER: usize = 1_000_000;

impl BellmanOperator {
    pub fn compile(model: &ModelSpec, grid: Arc<BeliefGrid>, cfg: &SolverConfig) -> Result<Self, SolverError> {
        if !(cfg.tol > 0.0) {
            return Err(SolverError::BadParameter("tol", cfg.tol));
        }
        let n_controls = model.n_controls();
        let pairs: Vec<(usize, usize)> = (0..grid.len())
            .flat_map(|v| (0..n_controls).map(move |u| (v, u)))
            .collect();
        let (horizon_param, truncation_budget, inner_kappa) = match cfg.mode {
            Mode::A => {
                let t = cfg.t_max.unwrap_or_else(|| default_t_max(model, cfg.tol));
                (t, model.c_f() * (-model.beta() * t).exp() / model.beta(), 0.0)
            }
            Mode::B => {
                let dt = cfg.dt.unwrap_or_else(|| default_dt(model));
                check_dt(model, dt)?;
                (dt, 0.0, (-model.beta() * dt).exp())
            }
        };
        let quad = cfg.quad_step.unwrap_or_else(|| model.default_step());
        let rows = pairs
            .par_iter()
            .map(|&(v, u)| match cfg.mode {
                Mode::A => const_row(model, &grid, grid.belief(v), u, horizon_param, quad),
                Mode::B => sl_row(model, &grid, grid.belief(v), u, horizon_param),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            grid,
            mode: cfg.mode,
            n_controls,
            rows,
            horizon_param,
            truncation_budget,
            inner_kappa,
        })
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    pub fn row(&self, v: usize, u: usize) -> &Row {
        &self.rows[v * self.n_controls + u]
    }

    /// Mode A truncation time, or mode B step.
    pub fn horizon_param(&self) -> f64 {
        self.horizon_param
    }

    pub fn truncation_budget(&self) -> f64 {
        self.truncation_budget
    }

    fn sweep(&self, w: &[f64], inner: &[f64]) -> Applied {
        let nu = self.n_controls;
        let vertex = |v: usize| {
            let q: Vec<f64> = (0..nu).map(|u| self.rows[v * nu + u].eval(w, inner)).collect();
            let (val, u) = argmin(q.iter().copied());
            (val, u, q)
        };
        let per_vertex: Vec<(f64, usize, Vec<f64>)> = if self.rows.len() < PAR_MIN_ROWS {
            (0..self.grid.len()).map(vertex).collect()
        } else {
            (0..self.grid.len()).into_par_iter().map(vertex).collect()
        };
        let mut out = Applied {
            values: Vec::with_capacity(per_vertex.len()),
            controls: Vec::with_capacity(per_vertex.len()),
            q: Vec::with_capacity(per_vertex.len() * nu),
        };
        for (val, u, q) in per_vertex {
            out.values.push(val);
            out.controls.push(u);
            out.q.extend(q);
        }
        out
    }

    /// `G w` with the minimizing control at every vertex. In mode B the
    /// between-jump problem is solved to a fixed point with `w` held on the
    /// jump targets.
    pub fn apply(&self, w: &[f64]) -> Result<Applied, SolverError> {
        check_field(&self.grid, w)?;
        match self.mode {
            Mode::A => Ok(self.sweep(w, &[])),
            Mode::B => {
                let k = self.inner_kappa;
                let mut inner = w.to_vec();
                for _ in 0..INNER_MAX_ITER {
                    let next = self.sweep(w, &inner);
                    let diff = sup_diff(&next.values, &inner);
                    // a few ulps of the largest value is as close as rounding allows
                    let scale = next.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    let stop = (INNER_TOL * (1.0 - k) / k).max(8.0 * f64::EPSILON * scale);
                    if diff <= stop {
                        return Ok(next);
                    }
                    inner = next.values;
                }
                Err(SolverError::NoConvergence {
                    iterations: INNER_MAX_ITER,
                    diff: f64::NAN,
                })
            }
        }
    }
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dirac;
    use crate::testutil::m1;

    #[test]
    fn one_stage_cost_on_singleton_face() {
        let m = m1();
        let d2 = dirac(&m, 2).unwrap();
        let g = one_stage_cost(&m, &d2, 0, 30.0, m.default_step()).unwrap();
        assert!((g - 2.0 / 3.0).abs() < 1e-6, "{g}");
        let g1 = one_stage_cost(&m, &d2, 1, 30.0, m.default_step()).unwrap();
        assert!((g1 - 0.44).abs() < 1e-6, "{g1}");
    }

    #[test]
    fn constant_cost_without_jumps() {
        let mut raw = m1().to_raw();
        for row in raw.lambda.iter_mut() {
            for rates in row.iter_mut() {
                rates.iter_mut().for_each(|r| *r = 0.0);
            }
        }
        let m = crate::model::validate_model(&raw).unwrap().with_cost(|_, _, _| 1.3).unwrap();
        let nu = Belief::new(&m, 0, vec![0.4, 0.6, 0.0]).unwrap();
        let g = one_stage_cost(&m, &nu, 1, 30.0, 1e-3).unwrap();
        assert!((g - 1.3).abs() < 1e-6);
    }

    #[test]
    fn bellman_const_with_zero_field() {
        let m = m1();
        let grid = BeliefGrid::new(&m, 8).unwrap();
        let w = vec![0.0; grid.len()];
        let (v, u) = bellman_const(&m, &grid, &w, &dirac(&m, 2).unwrap(), 30.0, m.default_step()).unwrap();
        assert!((v - 0.44).abs() < 1e-6);
        assert_eq!(u, 1);
    }

    #[test]
    fn constant_field_is_fixed_by_both_schemes() {
        let c = 0.9;
        let m = m1().with_cost(|_, _, _| c).unwrap();
        let grid = BeliefGrid::new(&m, 8).unwrap();
        let w = vec![c / m.beta(); grid.len()];
        let nu = Belief::new(&m, 0, vec![0.3, 0.7, 0.0]).unwrap();
        let (va, _) = bellman_const(&m, &grid, &w, &nu, 30.0, m.default_step()).unwrap();
        assert!((va - c).abs() < 1e-9, "{va}");
        let (vb, _) = bellman_sl(&m, &grid, &w, &nu, 1e-3).unwrap();
        assert!((vb - c).abs() < 1e-12, "{vb}");
    }

    #[test]
    fn sl_step_without_jumps_is_transport() {
        let mut raw = m1().to_raw();
        for x in 0..2 {
            for u in 0..2 {
                raw.lambda[x][u][2] = 0.0;
            }
        }
        let m = crate::model::validate_model(&raw).unwrap();
        let grid = BeliefGrid::new(&m, 4).unwrap();
        let nu = Belief::new(&m, 0, vec![0.5, 0.5, 0.0]).unwrap();
        let row = sl_row(&m, &grid, &nu, 0, 1e-2).unwrap();
        assert!(row.jump.is_empty());
        let cont: f64 = row.cont.iter().map(|p| p.1).sum();
        assert!((cont - (-1e-2f64).exp()).abs() < 1e-15);
        assert!(matches!(sl_row(&m, &grid, &nu, 0, 0.3), Err(SolverError::StepTooLarge { .. })));
    }

    #[test]
    fn jump_mass_respects_the_modulus() {
        let m = m1();
        let grid = Arc::new(BeliefGrid::new(&m, 8).unwrap());
        let kappa = m.c_lambda() / (m.beta() + m.c_lambda());
        let op = BellmanOperator::compile(&m, grid.clone(), &SolverConfig::new(Mode::A, 1e-4)).unwrap();
        for v in 0..grid.len() {
            for u in 0..2 {
                assert!(op.row(v, u).jump_mass() <= kappa + 1e-12);
            }
        }
    }
}
