//! Ground-truth simulation of the hidden signal `X` and its noise-free
//! observation `Y = h(X)`, and Monte-Carlo estimates of the original cost.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, ControlPath, Policy};
use crate::filter::{check_law, h_update, jump_update, FilterError, FlowCache, NonnegMeasure, Sojourn, YPath};
use crate::model::ModelSpec;
use crate::pdmp::draw_index;
use crate::rng::{stream, PathRng};
use crate::stats::mean_stderr;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("initial law is not a probability vector over the states")]
    BadInitialLaw,
    #[error("horizon must be nonnegative, got {0}")]
    BadHorizon(f64),
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(usize),
    #[error("control at time {t} reported a hold ending at {until}, which does not extend past t")]
    NonPredictableControl { t: f64, until: f64 },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Hidden-state trajectory: initial state and `(time, new state)` jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPath {
    pub x0: usize,
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

/// A control that only sees the observation record.
///
/// The simulator reports each label change through `observe` after it has
/// happened, so a control can never depend on the future of `Y`.
pub trait ObservationControl {
    /// Resets the control for a new path observed to start in `y0`.
    fn start(&mut self, y0: usize) -> Result<(), SignalError>;
    /// Control in force on `[t, until)` given the labels observed up to `t`,
    /// with `until` the earliest time it may change absent a new label.
    fn control_at(&mut self, t: f64) -> Result<(usize, f64), SignalError>;
    /// Label change to `y` at time `t`.
    fn observe(&mut self, t: f64, y: usize) -> Result<(), SignalError>;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantControl(pub usize);

impl ObservationControl for ConstantControl {
    fn start(&mut self, _: usize) -> Result<(), SignalError> {
        Ok(())
    }

    fn control_at(&mut self, _: f64) -> Result<(usize, f64), SignalError> {
        Ok((self.0, f64::INFINITY))
    }

    fn observe(&mut self, _: f64, _: usize) -> Result<(), SignalError> {
        Ok(())
    }
}

/// Open-loop control path in absolute time.
#[derive(Debug, Clone)]
pub struct RecordedControl(pub ControlPath);

impl ObservationControl for RecordedControl {
    fn start(&mut self, _: usize) -> Result<(), SignalError> {
        Ok(())
    }

    fn control_at(&mut self, t: f64) -> Result<(usize, f64), SignalError> {
        Ok(self.0.hold(t))
    }

    fn observe(&mut self, _: f64, _: usize) -> Result<(), SignalError> {
        Ok(())
    }
}

/// Runs a stationary policy of the separated problem on the original
/// problem: the filter is rebuilt online from the observed labels and the
/// policy is consulted at every post-jump belief.
pub struct PolicyControl<'a> {
    model: &'a ModelSpec,
    policy: &'a dyn Policy,
    mu0: Vec<f64>,
    step: f64,
    cache: FlowCache,
    sojourn: Option<Sojourn<'a>>,
    start_t: f64,
}

impl<'a> PolicyControl<'a> {
    pub fn new(model: &'a ModelSpec, policy: &'a dyn Policy, mu0: &[f64]) -> Result<Self, SignalError> {
        check_law(model, mu0).map_err(|_| SignalError::BadInitialLaw)?;
        Ok(Self {
            model,
            policy,
            mu0: mu0.to_vec(),
            step: model.default_step(),
            cache: FlowCache::new(),
            sojourn: None,
            start_t: 0.0,
        })
    }

    fn sojourn(&mut self) -> &mut Sojourn<'a> {
        self.sojourn.as_mut().expect("PolicyControl used before start")
    }
}

impl ObservationControl for PolicyControl<'_> {
    fn start(&mut self, y0: usize) -> Result<(), SignalError> {
        let belief = h_update(self.model, &NonnegMeasure(self.mu0.clone()), y0);
        let law = self.policy.sojourn_law(&belief);
        self.sojourn = Some(Sojourn::new(self.model, &belief, law, self.step, Some(&mut self.cache))?);
        self.start_t = 0.0;
        Ok(())
    }

    fn control_at(&mut self, t: f64) -> Result<(usize, f64), SignalError> {
        let start_t = self.start_t;
        let mut s = t - start_t;
        loop {
            let (u, until) = self.sojourn().hold_at(s)?;
            // in absolute time a hold may end at `t` after rounding; move on
            if start_t + until > t {
                return Ok((u, start_t + until));
            }
            s = until;
        }
    }

    fn observe(&mut self, t: f64, y: usize) -> Result<(), SignalError> {
        let start_t = self.start_t;
        let (p, u_left) = self.sojourn().at(t - start_t)?;
        let face = self.sojourn().face();
        let left = p.belief(self.model, face);
        let belief = jump_update(self.model, &left, u_left, y)?;
        let law = self.policy.sojourn_law(&belief);
        self.sojourn = Some(Sojourn::new(self.model, &belief, law, self.step, Some(&mut self.cache))?);
        self.start_t = t;
        Ok(())
    }
}

/// `int_a^b e^{-beta t} f(x, u_t) dt` with the control queried at its switch
/// points.
fn cost_between(
    model: &ModelSpec,
    x: usize,
    control: &mut dyn ObservationControl,
    a: f64,
    b: f64,
) -> Result<f64, SignalError> {
    let beta = model.beta();
    let mut s = a;
    let mut acc = 0.0;
    while s < b {
        let (u, until) = control.control_at(s)?;
        if !(until > s) {
            return Err(SignalError::NonPredictableControl { t: s, until });
        }
        let e = until.min(b);
        acc += model.cost(x, u) * ((-beta * s).exp() - (-beta * e).exp()) / beta;
        s = e;
    }
    Ok(acc)
}

fn run_signal(
    model: &ModelSpec,
    mu0: &[f64],
    control: &mut dyn ObservationControl,
    horizon: f64,
    rng: &mut PathRng,
    stop_at_first_y: bool,
) -> Result<(SignalPath, f64), SignalError> {
    check_law(model, mu0).map_err(|_| SignalError::BadInitialLaw)?;
    if !(horizon >= 0.0) {
        return Err(SignalError::BadHorizon(horizon));
    }
    let x0 = draw_index(mu0, rng);
    let mut y = model.h(x0);
    control.start(y)?;
    let c = model.c_lambda();
    let mut path = SignalPath {
        x0,
        jumps: Vec::new(),
        horizon,
    };
    let (mut t, mut x, mut cost) = (0.0, x0, 0.0);
    loop {
        let next = if c > 0.0 {
            t + rng.sample::<f64, _>(Exp1) / c
        } else {
            f64::INFINITY
        };
        cost += cost_between(model, x, control, t, next.min(horizon))?;
        if next > horizon {
            return Ok((path, cost));
        }
        t = next;
        let (u, _) = control.control_at(t)?;
        if rng.random::<f64>() * c < model.total_rate(x, u) {
            x = draw_index(model.rates_from(x, u), rng);
            path.jumps.push((t, x));
            if model.h(x) != y {
                y = model.h(x);
                control.observe(t, y)?;
                if stop_at_first_y {
                    path.horizon = t;
                    return Ok((path, cost));
                }
            }
        }
    }
}

/// Samples `x0 ~ mu0` and the signal up to `horizon` by thinning against
/// `C_lambda`, with controls drawn from the observation record so far.
pub fn simulate_signal(
    model: &ModelSpec,
    mu0: &[f64],
    control: &mut dyn ObservationControl,
    horizon: f64,
    rng: &mut PathRng,
) -> Result<SignalPath, SignalError> {
    run_signal(model, mu0, control, horizon, rng, false).map(|(p, _)| p)
}

/// As [`simulate_signal`], also returning the discounted cost
/// `int_0^horizon e^{-beta t} f(X_t, u_t) dt`.
pub fn simulate_signal_with_cost(
    model: &ModelSpec,
    mu0: &[f64],
    control: &mut dyn ObservationControl,
    horizon: f64,
    rng: &mut PathRng,
) -> Result<(SignalPath, f64), SignalError> {
    run_signal(model, mu0, control, horizon, rng, false)
}

/// Simulates until the first observation jump (or `limit`) and returns the
/// signal path up to then; its last jump is the first label change, if any.
pub fn simulate_to_first_y(
    model: &ModelSpec,
    mu0: &[f64],
    control: &mut dyn ObservationControl,
    limit: f64,
    rng: &mut PathRng,
) -> Result<SignalPath, SignalError> {
    run_signal(model, mu0, control, limit, rng, true).map(|(p, _)| p)
}

/// The observation path seen along a signal path.
pub fn derive_y(model: &ModelSpec, x_path: &SignalPath) -> YPath {
    let y0 = model.h(x_path.x0);
    let mut current = y0;
    let mut jumps = Vec::new();
    for &(t, z) in &x_path.jumps {
        let y = model.h(z);
        if y != current {
            jumps.push((t, y));
            current = y;
        }
    }
    YPath {
        y0,
        jumps,
        horizon: x_path.horizon,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Bound on the cost omitted past the horizon, `C_f e^{-beta T} / beta`.
    pub truncation_bias: f64,
}

const CHUNK: usize = 256;

/// Per-path discounted costs truncated at `horizon`. Path `i` uses stream
/// `(seed, i)`; the result does not depend on the number of worker threads.
pub fn mc_cost_samples<C, F>(
    model: &ModelSpec,
    mu0: &[f64],
    make_control: F,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>, SignalError>
where
    C: ObservationControl,
    F: Fn() -> Result<C, SignalError> + Sync,
{
    let chunks: Vec<Result<Vec<f64>, SignalError>> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut control = make_control()?;
            (c * CHUNK..((c + 1) * CHUNK).min(n_paths))
                .map(|i| {
                    let mut rng = stream(seed, i as u64);
                    run_signal(model, mu0, &mut control, horizon, &mut rng, false).map(|(_, cost)| cost)
                })
                .collect()
        })
        .collect();
    let mut costs = Vec::with_capacity(n_paths);
    for c in chunks {
        costs.extend(c?);
    }
    Ok(costs)
}

/// Monte-Carlo estimate of the discounted cost truncated at `horizon`.
pub fn mc_cost<C, F>(
    model: &ModelSpec,
    mu0: &[f64],
    make_control: F,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate, SignalError>
where
    C: ObservationControl,
    F: Fn() -> Result<C, SignalError> + Sync,
{
    if n_paths < 2 {
        return Err(SignalError::TooFewPaths(n_paths));
    }
    let costs = mc_cost_samples(model, mu0, make_control, horizon, n_paths, seed)?;
    Ok(McEstimate::from_samples(model, &costs, horizon))
}

impl McEstimate {
    pub fn from_samples(model: &ModelSpec, costs: &[f64], horizon: f64) -> Self {
        let (mean, stderr) = mean_stderr(costs);
        McEstimate {
            mean,
            stderr,
            n_paths: costs.len(),
            truncation_bias: model.c_f() * (-model.beta() * horizon).exp() / model.beta(),
        }
    }
}
