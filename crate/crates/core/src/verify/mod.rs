//! Independent oracles and property checks for the filter, the filter
//! process and the separated control problem.

mod checks;
mod oracle;
mod random;

pub use checks::{
    argmin_invariance_check, constant_cost_check, contraction_check, dominance_check, equivalence_check,
    feller_smoke_check, filter_consistency_check, filter_invariants_report, flow_agreement, flow_agreement_many,
    flow_oracle_report, forward_invariance_check, law_equality_check, lipschitz_check, negative_control,
    residual_report, sojourn_law_check, CheckReport, FlowAgreement, ALPHA, FLOW_TIMES,
};
pub use oracle::{expm_flow_oracle, expm_nonneg, face_generator};
pub use random::{random_belief, random_model, random_models};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlPath;
use crate::filter::FilterError;
use crate::model::{ModelError, ModelSpec};
use crate::pdmp::{survival, PdmpError};
use crate::signal::SignalError;
use crate::solver::{solve, BellmanOperator, BeliefGrid, Mode, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("initial law must charge exactly one face")]
    NotOnOneFace,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Pdmp(#[from] PdmpError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Sizes of the checks run by [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Monte-Carlo paths per statistical check.
    pub n_paths: usize,
    /// Paths for the conditional-frequency check of the filter.
    pub consistency_paths: usize,
    /// Random pairs for the vector-field properties.
    pub n_pairs: usize,
    pub k: u32,
    pub tol: f64,
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_paths: 10_000,
            consistency_paths: 1_000_000,
            n_pairs: 10_000,
            k: 16,
            tol: 1e-4,
            dt: None,
            horizon: 20.0,
        }
    }
}

fn uniform_on(model: &ModelSpec, y: usize) -> Vec<f64> {
    let states = model.face_states(y);
    let mut mu = vec![0.0; model.n_states()];
    states.iter().for_each(|&x| mu[x] = 1.0 / states.len() as f64);
    mu
}

/// Sojourn limit long enough that censoring is negligible whenever the face
/// can be left at a rate of at least `1e-2`.
const SOJOURN_LIMIT: f64 = 2_000.0;

/// Runs every check on one model. Statistical checks use streams derived
/// from `opts.seed`; the order and content of the reports depend only on the
/// model and the options.
pub fn run_suite(model: &ModelSpec, opts: &SuiteOptions) -> Result<Vec<CheckReport>, VerifyError> {
    let seed = opts.seed;
    let mut out = Vec::new();

    let agreement = flow_agreement(model, seed, &FLOW_TIMES)?;
    out.push(flow_oracle_report(&agreement, seed));
    out.push(filter_invariants_report(&agreement, seed));
    out.push(lipschitz_check(model, opts.n_pairs, seed));
    out.push(forward_invariance_check(model, opts.n_pairs, seed));

    let n_u = model.n_controls();
    for y in 0..model.n_obs() {
        let mu = uniform_on(model, y);
        for u in 0..n_u {
            out.push(sojourn_law_check(model, &mu, u, u, opts.n_paths, seed, SOJOURN_LIMIT)?);
        }
        if n_u >= 2 && distinguishable(model, &mu, y, 0, 1, opts.n_paths)? {
            let inner = sojourn_law_check(model, &mu, 0, 1, opts.n_paths, seed, SOJOURN_LIMIT)?;
            out.push(negative_control(inner));
        }
    }
    let uniform = vec![1.0 / model.n_states() as f64; model.n_states()];
    for u in 0..n_u {
        out.push(law_equality_check(model, &uniform, u, opts.n_paths, seed, 10.0)?);
    }

    for mode in [Mode::A, Mode::B] {
        let mut cfg = SolverConfig::new(mode, opts.tol);
        cfg.dt = opts.dt;
        let fine = solve(model, opts.k, &cfg)?;
        out.push(residual_report(&fine, opts.tol));
        let coarse_k = (opts.k / 2).max(1);
        let coarse_grid = Arc::new(BeliefGrid::new(model, coarse_k)?);
        let op = BellmanOperator::compile(model, coarse_grid, &cfg)?;
        out.push(contraction_check(&op, model, 100, seed)?);

        let mut tight = SolverConfig::new(mode, 1e-8);
        tight.dt = opts.dt;
        out.push(constant_cost_check(model, opts.k, &tight, 1.0)?);
        let mut exact = SolverConfig::new(mode, 1e-10);
        exact.dt = opts.dt;
        exact.max_iter = 100_000;
        out.push(argmin_invariance_check(model, coarse_k, &exact, 2.0, 0.3)?);

        let coarse = solve(model, coarse_k, &cfg)?;
        let mut laws = vec![uniform.clone()];
        for y in 0..model.n_obs() {
            let mut d = vec![0.0; model.n_states()];
            d[model.face_states(y)[0]] = 1.0;
            laws.push(d);
        }
        for mu in &laws {
            out.push(equivalence_check(model, &fine, &coarse, mu, opts.horizon, opts.n_paths, seed)?);
            out.push(dominance_check(model, &fine, mu, opts.horizon, opts.n_paths, seed)?);
        }
    }

    out.push(feller_smoke_check(model, seed)?);
    for u in 0..n_u {
        out.push(filter_consistency_check(
            model,
            &uniform,
            u,
            1.0,
            0.05,
            opts.consistency_paths,
            seed,
            0.02,
        )?);
    }
    Ok(out)
}

/// Whether the survival functions under two controls differ by more than
/// three KS critical values somewhere, so that a mismatch is detectable.
fn distinguishable(model: &ModelSpec, mu: &[f64], y: usize, u: usize, v: usize, n: usize) -> Result<bool, VerifyError> {
    let nu = crate::filter::h_update(model, &crate::filter::NonnegMeasure(mu.to_vec()), y);
    let crit = crate::stats::ks_critical_one_sample(n, ALPHA);
    for t in [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0] {
        let a = survival(model, &nu, crate::control::SojournLaw::Open(ControlPath::constant(u)), t)?;
        let b = survival(model, &nu, crate::control::SojournLaw::Open(ControlPath::constant(v)), t)?;
        if (a - b).abs() > 3.0 * crit {
            return Ok(true);
        }
    }
    Ok(false)
}
