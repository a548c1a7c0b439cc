//! Property, oracle and statistical checks. Each returns a [`CheckReport`]
//! that is reproducible from its seed and parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::expm_flow_oracle;
use super::random::random_belief;
use super::VerifyError;
use crate::control::{ConstantPolicy, ControlPath, SojournLaw};
use crate::filter::{
    flow, h_update, run_filter, vector_field, FilterControl, FlowCache, NodeStats, NonnegMeasure, Sojourn, YPath,
};
use crate::model::{tv, Belief, ModelSpec};
use crate::pdmp::{jump_rate, obs_kernel, simulate_pdmp};
use crate::rng::stream;
use crate::signal::{derive_y, mc_cost_samples, simulate_signal, simulate_to_first_y, ConstantControl, McEstimate,
    PolicyControl};
use crate::solver::{value_iteration_with, BellmanOperator, BeliefGrid, Solution, SolverConfig};
use crate::stats::{ks_critical_one_sample, ks_critical_two_sample, ks_two_sample, mean_stderr, proportion_band,
    sorted};

/// Significance level of every statistical check.
pub const ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// Nothing could be tested (e.g. a face that is never left); counts as a
    /// pass.
    pub vacuous: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub seed: u64,
    pub sample_size: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl CheckReport {
    fn le(name: impl Into<String>, statistic: f64, threshold: f64, seed: u64, sample_size: usize) -> Self {
        Self {
            name: name.into(),
            passed: statistic <= threshold,
            vacuous: false,
            statistic,
            threshold,
            seed,
            sample_size,
            note: String::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let verdict = match (self.passed, self.vacuous) {
            (true, true) => "PASS (vacuous)",
            (true, false) => "PASS",
            (false, _) => "FAIL",
        };
        let mut s = format!(
            "{verdict} {}: statistic={:.6e} threshold={:.6e} n={} seed={}",
            self.name, self.statistic, self.threshold, self.sample_size, self.seed
        );
        if !self.note.is_empty() {
            s.push_str(" [");
            s.push_str(&self.note);
            s.push(']');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Flow and vector field

/// Largest TV distance between the integrated flow and the matrix
/// exponential, plus the node statistics of the integrations involved.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowAgreement {
    pub max_tv: f64,
    pub cases: usize,
    pub stats: NodeStats,
}

impl FlowAgreement {
    fn merge(&mut self, other: &FlowAgreement) {
        self.max_tv = self.max_tv.max(other.max_tv);
        self.cases += other.cases;
        self.stats.merge(&other.stats);
    }
}

/// Compares the flow under every constant control with the oracle at the
/// given times, from the barycenter and two random beliefs of each face.
pub fn flow_agreement(model: &ModelSpec, seed: u64, times: &[f64]) -> Result<FlowAgreement, VerifyError> {
    let times = sorted(times.to_vec());
    let mut out = FlowAgreement::default();
    let mut rng = stream(seed, 0);
    for y in 0..model.n_obs() {
        let states = model.face_states(y);
        let mut w = vec![0.0; model.n_states()];
        states.iter().for_each(|&x| w[x] = 1.0 / states.len() as f64);
        let starts = [
            Belief::new(model, y, w)?,
            random_belief(model, y, &mut rng),
            random_belief(model, y, &mut rng),
        ];
        for start in &starts {
            for u in 0..model.n_controls() {
                let law = SojournLaw::Open(ControlPath::constant(u));
                let mut sojourn = Sojourn::new(model, start, law, model.default_step(), None)?;
                for &t in &times {
                    let got = sojourn.at(t)?.0;
                    let want = expm_flow_oracle(model, start, u, t)?;
                    out.max_tv = out.max_tv.max(tv(&got.weights, want.weights()));
                    out.cases += 1;
                }
                out.stats.merge(&sojourn.stats());
            }
        }
    }
    Ok(out)
}

/// [`flow_agreement`] over several models in parallel; model `i` uses seed
/// `seed + i`.
pub fn flow_agreement_many(models: &[ModelSpec], seed: u64, times: &[f64]) -> Result<FlowAgreement, VerifyError> {
    let parts: Vec<Result<FlowAgreement, VerifyError>> = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| flow_agreement(m, seed.wrapping_add(i as u64), times))
        .collect();
    let mut out = FlowAgreement::default();
    for p in parts {
        out.merge(&p?);
    }
    Ok(out)
}

pub const FLOW_TIMES: [f64; 3] = [0.1, 1.0, 5.0];

pub fn flow_oracle_report(agreement: &FlowAgreement, seed: u64) -> CheckReport {
    CheckReport::le("flow_oracle", agreement.max_tv, 1e-8, seed, agreement.cases)
}

/// Mass error, off-face leakage and negative entries at every integration
/// node; the statistic is the worst of the three ratios to their thresholds.
pub fn filter_invariants_report(agreement: &FlowAgreement, seed: u64) -> CheckReport {
    let s = &agreement.stats;
    let ratio = (s.max_mass_error / 1e-10)
        .max(s.max_leak / 1e-12)
        .max(-s.min_entry.min(0.0) / 1e-12);
    CheckReport::le("filter_invariants", ratio, 1.0, seed, s.nodes).note(format!(
        "mass_error={:.3e} leak={:.3e} min_entry={:.3e}",
        s.max_mass_error, s.max_leak, s.min_entry
    ))
}

fn pair_on_random_face(model: &ModelSpec, rng: &mut crate::rng::PathRng) -> (Belief, Belief) {
    let y = rng.random_range(0..model.n_obs());
    (random_belief(model, y, rng), random_belief(model, y, rng))
}

/// `TV(F(nu) - F(mu)) <= 9 C_lambda TV(nu - mu)` on random same-face pairs
/// for every control. The statistic is the number of violations; the
/// largest observed ratio to `C_lambda` is recorded in the note.
pub fn lipschitz_check(model: &ModelSpec, n_pairs: usize, seed: u64) -> CheckReport {
    let c = model.c_lambda();
    let mut violations = 0usize;
    let mut max_ratio: f64 = 0.0;
    for i in 0..n_pairs {
        let mut rng = stream(seed, i as u64);
        let (nu, mu) = pair_on_random_face(model, &mut rng);
        let d = tv(nu.weights(), mu.weights());
        for u in 0..model.n_controls() {
            let lhs = tv(&vector_field(model, &nu, u).0, &vector_field(model, &mu, u).0);
            let rhs = 9.0 * c * d;
            if lhs > rhs * (1.0 + 1e-12) + 1e-15 {
                violations += 1;
            }
            if d > 0.0 && c > 0.0 {
                max_ratio = max_ratio.max(lhs / (c * d));
            }
        }
    }
    CheckReport::le("lipschitz", violations as f64, 0.0, seed, n_pairs * model.n_controls())
        .note(format!("max TV(F(nu)-F(mu)) / (C_lambda TV(nu-mu)) = {max_ratio:.4}"))
}

/// `nu + eps F(nu, u)` stays a belief on the face of `nu` for
/// `eps = 0.9 / C_lambda`. The statistic is the worst violation among a
/// negative entry, an entry off the face and a mass error.
pub fn forward_invariance_check(model: &ModelSpec, n_pairs: usize, seed: u64) -> CheckReport {
    let c = model.c_lambda();
    if c == 0.0 {
        let mut r = CheckReport::le("forward_invariance", 0.0, 1e-14, seed, 0);
        r.vacuous = true;
        return r.note("no rates: F vanishes");
    }
    let eps = 0.9 / c;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for i in 0..n_pairs {
        let mut rng = stream(seed, i as u64);
        let (a, b) = pair_on_random_face(model, &mut rng);
        for nu in [a, b] {
            for u in 0..model.n_controls() {
                let f = vector_field(model, &nu, u).0;
                let next: Vec<f64> = nu.weights().iter().zip(&f).map(|(w, d)| w + eps * d).collect();
                let mut mass = 0.0;
                for (x, &w) in next.iter().enumerate() {
                    if model.h(x) == nu.face() {
                        worst = worst.max(-w);
                        mass += w;
                    } else {
                        worst = worst.max(w.abs());
                    }
                }
                worst = worst.max((mass - 1.0).abs());
                n += 1;
            }
        }
    }
    CheckReport::le("forward_invariance", worst, 1e-14, seed, n).note(format!("eps = 0.9 / C_lambda = {eps:.6}"))
}

// ---------------------------------------------------------------------------
// Sojourn laws

fn single_face(model: &ModelSpec, mu0: &[f64]) -> Result<usize, VerifyError> {
    let faces: Vec<usize> = (0..model.n_obs())
        .filter(|&y| model.face_states(y).iter().any(|&x| mu0[x] > 0.0))
        .collect();
    match faces.as_slice() {
        [y] => Ok(*y),
        _ => Err(VerifyError::NotOnOneFace),
    }
}

/// First observation-jump times of signal paths started from `mu0` under
/// the constant control `u`; censored paths give `+inf`.
fn first_y_times(model: &ModelSpec, mu0: &[f64], u: usize, n: usize, seed: u64, limit: f64) -> Result<Vec<f64>, VerifyError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let path = simulate_to_first_y(model, mu0, &mut ConstantControl(u), limit, &mut rng)?;
            Ok(derive_y(model, &path).jumps.first().map_or(f64::INFINITY, |j| j.0))
        })
        .collect()
}

/// One-sample KS distance on `[0, limit]` between sorted, possibly censored
/// samples and `F = 1 - chi`, with `chi` the survival function of the filter
/// sojourn from `nu` under `law`.
fn ks_against_survival(
    model: &ModelSpec,
    nu: &Belief,
    law: SojournLaw<'_>,
    samples: &[f64],
    limit: f64,
) -> Result<f64, VerifyError> {
    let n = samples.len() as f64;
    let mut sojourn = Sojourn::new(model, nu, law, model.default_step(), None)?;
    let mut d: f64 = 0.0;
    let mut observed = 0usize;
    for (i, &s) in samples.iter().enumerate() {
        if !s.is_finite() || s > limit {
            break;
        }
        let f = 1.0 - sojourn.at(s)?.0.survival();
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
        observed = i + 1;
    }
    if limit.is_finite() {
        let f = 1.0 - sojourn.at(limit)?.0.survival();
        d = d.max((observed as f64 / n - f).abs());
    }
    Ok(d)
}

/// Compares first observation-jump times of the signal started from `mu0`
/// (all mass on one face) under the constant control `sample_u` with the
/// survival function of the filter started from `H_{y0}[mu0]` under
/// `chi_u`. With `sample_u != chi_u` this is a negative control.
pub fn sojourn_law_check(
    model: &ModelSpec,
    mu0: &[f64],
    sample_u: usize,
    chi_u: usize,
    n: usize,
    seed: u64,
    limit: f64,
) -> Result<CheckReport, VerifyError> {
    let y0 = single_face(model, mu0)?;
    let nu = h_update(model, &NonnegMeasure(mu0.to_vec()), y0);
    let name = format!(
        "sojourn_law[face={} sample={} chi={}]",
        model.obs_labels()[y0],
        model.controls()[sample_u],
        model.controls()[chi_u]
    );
    let threshold = ks_critical_one_sample(n, ALPHA);
    if model.face_is_closed(y0, sample_u) && model.face_is_closed(y0, chi_u) {
        let mut r = CheckReport::le(name, 0.0, threshold, seed, n);
        r.vacuous = true;
        return Ok(r.note("face is never left"));
    }
    let samples = sorted(first_y_times(model, mu0, sample_u, n, seed, limit)?);
    let censored = samples.iter().filter(|s| !s.is_finite()).count();
    let d = ks_against_survival(model, &nu, SojournLaw::Open(ControlPath::constant(chi_u)), &samples, limit)?;
    Ok(CheckReport::le(name, d, threshold, seed, n).note(format!("censored at {limit}: {censored}")))
}

/// The negative control passes when the mismatched comparison is rejected.
pub fn negative_control(inner: CheckReport) -> CheckReport {
    CheckReport {
        name: format!("negative_control:{}", inner.name),
        passed: !inner.passed && !inner.vacuous,
        vacuous: false,
        note: format!("mismatch must be rejected; {}", inner.note),
        ..inner
    }
}

// ---------------------------------------------------------------------------
// Two representations of the filter process

/// Statistics of one path up to a horizon: the first `depth` sojourn
/// durations (`+inf` when absent), the labels entered at those jumps, and the
/// weight of the first state of the face in the first post-jump belief.
struct JumpRecord {
    sojourns: Vec<f64>,
    labels: Vec<Option<usize>>,
    first_weight: f64,
}

fn first_state_weight(model: &ModelSpec, b: &Belief) -> f64 {
    b.weights()[model.face_states(b.face())[0]]
}

fn record(model: &ModelSpec, times: &[f64], labels: &[usize], first: Option<&Belief>, depth: usize) -> JumpRecord {
    let mut prev = 0.0;
    let mut sojourns = Vec::with_capacity(depth);
    let mut labs = Vec::with_capacity(depth);
    for j in 0..depth {
        match times.get(j) {
            Some(&t) => {
                sojourns.push(t - prev);
                labs.push(Some(labels[j]));
                prev = t;
            }
            None => {
                sojourns.push(f64::INFINITY);
                labs.push(None);
            }
        }
    }
    JumpRecord {
        sojourns,
        labels: labs,
        first_weight: first.map_or(f64::INFINITY, |b| first_state_weight(model, b)),
    }
}

const LAW_DEPTH: usize = 3;

/// Signal paths with the filter replayed on their observations, against
/// direct simulation of the filter process, both under the constant control
/// `u` up to `horizon`. Two-sample KS on each of the first sojourns and on
/// the first post-jump belief, and 3-sigma bands on the labels entered.
pub fn law_equality_check(
    model: &ModelSpec,
    mu0: &[f64],
    u: usize,
    n: usize,
    seed: u64,
    horizon: f64,
) -> Result<CheckReport, VerifyError> {
    const CHUNK: usize = 256;
    let record_path = ControlPath::constant(u);
    let signal: Vec<Result<Vec<JumpRecord>, VerifyError>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut cache = FlowCache::new();
            (c * CHUNK..((c + 1) * CHUNK).min(n))
                .map(|i| {
                    let mut rng = stream(seed, i as u64);
                    let path = simulate_signal(model, mu0, &mut ConstantControl(u), horizon, &mut rng)?;
                    let y: YPath = derive_y(model, &path);
                    let beliefs = run_filter(
                        model,
                        mu0,
                        &y,
                        FilterControl::Record(&record_path),
                        None,
                        model.default_step(),
                        Some(&mut cache),
                    )?;
                    let times: Vec<f64> = beliefs.jumps.iter().map(|j| j.t).collect();
                    let labels: Vec<usize> = beliefs.jumps.iter().map(|j| j.belief.face()).collect();
                    Ok(record(model, &times, &labels, beliefs.jumps.first().map(|j| &j.belief), LAW_DEPTH))
                })
                .collect()
        })
        .collect();
    let pdmp_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let pdmp: Vec<Result<Vec<JumpRecord>, VerifyError>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut cache = FlowCache::new();
            (c * CHUNK..((c + 1) * CHUNK).min(n))
                .map(|i| {
                    let mut rng = stream(pdmp_seed, i as u64);
                    let masses: Vec<f64> = (0..model.n_obs())
                        .map(|y| model.face_states(y).iter().map(|&x| mu0[x]).sum())
                        .collect();
                    let y0 = crate::pdmp::draw_index(&masses, &mut rng);
                    let nu0 = h_update(model, &NonnegMeasure(mu0.to_vec()), y0);
                    let (path, _) = simulate_pdmp(model, &nu0, &ConstantPolicy(u), horizon, &mut rng, Some(&mut cache))?;
                    let times: Vec<f64> = path.jumps.iter().map(|j| j.t).collect();
                    let labels: Vec<usize> = path.jumps.iter().map(|j| j.y).collect();
                    Ok(record(model, &times, &labels, path.jumps.first().map(|j| &j.belief), LAW_DEPTH))
                })
                .collect()
        })
        .collect();
    let flatten = |parts: Vec<Result<Vec<JumpRecord>, VerifyError>>| -> Result<Vec<JumpRecord>, VerifyError> {
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    };
    let (a, b) = (flatten(signal)?, flatten(pdmp)?);
    let crit = ks_critical_two_sample(n, n, ALPHA);
    let mut worst_ks: f64 = 0.0;
    let mut notes = Vec::new();
    for j in 0..LAW_DEPTH {
        let sa = sorted(a.iter().map(|r| r.sojourns[j]).collect());
        let sb = sorted(b.iter().map(|r| r.sojourns[j]).collect());
        let d = ks_two_sample(&sa, &sb);
        notes.push(format!("ks_sojourn{}={d:.4}", j + 1));
        worst_ks = worst_ks.max(d);
    }
    let wa = sorted(a.iter().map(|r| r.first_weight).collect());
    let wb = sorted(b.iter().map(|r| r.first_weight).collect());
    let dw = ks_two_sample(&wa, &wb);
    notes.push(format!("ks_first_belief={dw:.4}"));
    worst_ks = worst_ks.max(dw);
    let mut bands_ok = true;
    for j in 0..LAW_DEPTH {
        for y in 0..model.n_obs() {
            let ha = a.iter().filter(|r| r.labels[j] == Some(y)).count();
            let hb = b.iter().filter(|r| r.labels[j] == Some(y)).count();
            let band = proportion_band(ha, n, hb, n, 3.0);
            if (ha as f64 / n as f64 - hb as f64 / n as f64).abs() > band {
                bands_ok = false;
                notes.push(format!("label band miss at jump {} label {}: {ha} vs {hb}", j + 1, model.obs_labels()[y]));
            }
        }
    }
    let mut r = CheckReport::le(
        format!("law_equality[control={}]", model.controls()[u]),
        worst_ks,
        crit,
        seed,
        2 * n,
    );
    r.passed &= bands_ok;
    Ok(r.note(notes.join(" ")))
}

// ---------------------------------------------------------------------------
// Separated problem

/// Empirical modulus `sup|G w1 - G w2| / sup|w1 - w2|` over random fields
/// with entries uniform in `[-B, B]`, `B = max(1, C_f / beta)`.
pub fn contraction_check(op: &BellmanOperator, model: &ModelSpec, n_pairs: usize, seed: u64) -> Result<CheckReport, VerifyError> {
    let c = model.c_lambda();
    let kappa = c / (model.beta() + c);
    let bound = (model.c_f() / model.beta()).max(1.0);
    let len = op.grid().len();
    let ratios: Vec<Result<f64, VerifyError>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut field = || -> Vec<f64> { (0..len).map(|_| rng.random_range(-bound..=bound)).collect() };
            let (w1, w2) = (field(), field());
            let d = sup_norm_diff(&w1, &w2);
            let g = sup_norm_diff(&op.apply(&w1)?.values, &op.apply(&w2)?.values);
            Ok(if d > 0.0 { g / d } else { 0.0 })
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in ratios {
        worst = worst.max(r?);
    }
    Ok(CheckReport::le(
        format!("contraction[mode={} k={}]", op.mode(), op.grid().k()),
        worst,
        kappa + 1e-9,
        seed,
        n_pairs,
    )
    .note(format!("kappa={kappa:.12}")))
}

fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn residual_report(solution: &Solution, tol: f64) -> CheckReport {
    CheckReport::le(
        format!("bellman_residual[mode={} k={}]", solution.field.mode, solution.field.k),
        solution.field.residual,
        tol,
        0,
        solution.grid.len(),
    )
    .note(format!("iterations={}", solution.field.iterations))
}

/// `f = c` gives `v = c / beta` at every vertex.
pub fn constant_cost_check(
    model: &ModelSpec,
    k: u32,
    cfg: &SolverConfig,
    c: f64,
) -> Result<CheckReport, VerifyError> {
    let variant = model.with_cost(|_, _, _| c)?;
    let grid = std::sync::Arc::new(BeliefGrid::new(&variant, k)?);
    let op = BellmanOperator::compile(&variant, grid, cfg)?;
    let (field, _) = value_iteration_with(&variant, &op, cfg.tol, cfg.max_iter)?;
    let target = c / variant.beta();
    let err = field.values.iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
    let mut r = CheckReport::le(format!("constant_cost[mode={} k={k}]", cfg.mode), err, 1e-6, 0, field.values.len())
        .note(format!("iterations={}", field.iterations));
    r.passed &= field.iterations <= 200;
    Ok(r)
}

/// Per-vertex sets of minimizing controls for `f` and `a f + b`. Controls
/// within `1e-9 max(1, |min|)` of the minimum count as minimizers; the
/// statistic is the number of vertices where the sets differ.
pub fn argmin_invariance_check(
    model: &ModelSpec,
    k: u32,
    cfg: &SolverConfig,
    a: f64,
    b: f64,
) -> Result<CheckReport, VerifyError> {
    let scaled = model.with_cost(|x, u, _| a * model.cost(x, u) + b)?;
    let grid = std::sync::Arc::new(BeliefGrid::new(model, k)?);
    let sets = |m: &ModelSpec| -> Result<(Vec<Vec<usize>>, Vec<f64>), VerifyError> {
        let op = BellmanOperator::compile(m, grid.clone(), cfg)?;
        let (field, _) = value_iteration_with(m, &op, cfg.tol, cfg.max_iter)?;
        let q = op.apply(&field.values)?.q;
        let n_u = op.n_controls();
        let sets = q
            .chunks(n_u)
            .map(|row| {
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                let eta = 1e-9 * min.abs().max(1.0);
                (0..n_u).filter(|&u| row[u] <= min + eta).collect()
            })
            .collect();
        Ok((sets, field.values))
    };
    let (s1, v1) = sets(model)?;
    let (s2, v2) = sets(&scaled)?;
    let mismatches = s1.iter().zip(&s2).filter(|(x, y)| x != y).count();
    let affine_err = v1
        .iter()
        .zip(&v2)
        .map(|(x, y)| (a * x + b / model.beta() - y).abs())
        .fold(0.0, f64::max);
    Ok(CheckReport::le(
        format!("argmin_invariance[mode={} k={k} a={a} b={b}]", cfg.mode),
        mismatches as f64,
        0.0,
        0,
        grid.len(),
    )
    .note(format!("max |a v + b/beta - v'| = {affine_err:.3e}")))
}

/// `|mc_cost(mu, policy) - lift(mu)| <= 2 stderr + delta_grid + C_f e^{-beta H} / beta`
/// with `delta_grid` the change of the lifted value between the two
/// resolutions.
pub fn equivalence_check(
    model: &ModelSpec,
    fine: &Solution,
    coarse: &Solution,
    mu: &[f64],
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport, VerifyError> {
    let costs = mc_cost_samples(model, mu, || PolicyControl::new(model, &fine.policy, mu), horizon, n, seed)?;
    let mc = McEstimate::from_samples(model, &costs, horizon);
    let lift = fine.lift(model, mu)?;
    let delta = (lift - coarse.lift(model, mu)?).abs();
    let threshold = 2.0 * mc.stderr + delta + mc.truncation_bias;
    Ok(CheckReport::le(
        format!("equivalence[mode={} mu={}]", fine.field.mode, fmt_law(mu)),
        (mc.mean - lift).abs(),
        threshold,
        seed,
        n,
    )
    .note(format!(
        "mc={:.6} stderr={:.2e} lift={lift:.6} delta_grid={delta:.2e} truncation={:.2e}",
        mc.mean, mc.stderr, mc.truncation_bias
    )))
}

pub(crate) fn fmt_law(mu: &[f64]) -> String {
    let parts: Vec<String> = mu.iter().map(|w| format!("{w:.3}")).collect();
    format!("({})", parts.join(","))
}

/// The extracted policy against every constant policy on common random
/// numbers: `mean(policy - constant) <= 2 stderr` of the paired difference.
pub fn dominance_check(
    model: &ModelSpec,
    solution: &Solution,
    mu: &[f64],
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport, VerifyError> {
    let policy = mc_cost_samples(model, mu, || PolicyControl::new(model, &solution.policy, mu), horizon, n, seed)?;
    let (p_mean, _) = mean_stderr(&policy);
    let mut worst = f64::NEG_INFINITY;
    let mut notes = vec![format!("policy={p_mean:.6}")];
    for u in 0..model.n_controls() {
        let constant = mc_cost_samples(model, mu, || Ok(ConstantControl(u)), horizon, n, seed)?;
        let diff: Vec<f64> = policy.iter().zip(&constant).map(|(p, c)| p - c).collect();
        let (d, se) = mean_stderr(&diff);
        notes.push(format!("{}: diff={d:.3e} se={se:.2e}", model.controls()[u]));
        worst = worst.max(d - 2.0 * se);
    }
    Ok(CheckReport::le(
        format!("dominance[mode={} mu={}]", solution.field.mode, fmt_law(mu)),
        worst,
        0.0,
        seed,
        n,
    )
    .note(notes.join(" ")))
}

// ---------------------------------------------------------------------------
// Smoke tests

/// `nu -> r(nu, u) sum_y R(nu, u)(y) w(H_y[Lambda(nu, u)])` for a smooth test
/// function `w`, evaluated at the nearest vertices of a fixed belief on grids
/// refined from `k = 2` to `k = 64`. Passes when the error at the finest grid
/// is at most a tenth of the error at the coarsest (or negligible).
pub fn feller_smoke_check(model: &ModelSpec, seed: u64) -> Result<CheckReport, VerifyError> {
    let w = |b: &Belief| -> f64 {
        b.weights().iter().enumerate().map(|(x, p)| p * p * (1.0 + x as f64)).sum::<f64>().sqrt()
    };
    let g = |nu: &Belief, u: usize| -> f64 {
        let r = jump_rate(model, nu, u);
        if r == 0.0 {
            return 0.0;
        }
        let lambda = crate::filter::big_lambda(model, nu, u);
        obs_kernel(model, nu, u)
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(y, p)| p * w(&h_update(model, &lambda, y)))
            .sum::<f64>()
            * r
    };
    let mut rng = stream(seed, 0);
    let mut worst_ratio: f64 = 0.0;
    let mut cases = 0;
    for y in 0..model.n_obs() {
        let nu = random_belief(model, y, &mut rng);
        for u in 0..model.n_controls() {
            let target = g(&nu, u);
            let mut errs = Vec::new();
            for k in [2u32, 4, 8, 16, 32, 64] {
                let grid = BeliefGrid::new(model, k)?;
                let v = grid.nearest_vertex(y, nu.weights());
                errs.push((g(grid.belief(v), u) - target).abs());
            }
            let (first, last) = (errs[0], *errs.last().expect("nonempty"));
            if last > 1e-12 {
                worst_ratio = worst_ratio.max(last / first.max(1e-300));
            }
            cases += 1;
        }
    }
    Ok(CheckReport::le("feller_smoke", worst_ratio, 0.1, seed, cases))
}

/// Conditional state frequencies at time `t` given the observation pattern
/// (number of label changes and their times in bins of `bin` width) against
/// the filter replayed on the bin-centre pattern. Groups with fewer than
/// `min_group` paths are skipped. The statistic is the largest excess of
/// `sum_z |freq_z - pi_z|` over the 3-sigma bands; the threshold is the
/// binning budget.
#[allow(clippy::too_many_arguments)]
pub fn filter_consistency_check(
    model: &ModelSpec,
    mu0: &[f64],
    u: usize,
    t: f64,
    bin: f64,
    n: usize,
    seed: u64,
    budget: f64,
) -> Result<CheckReport, VerifyError> {
    const MIN_GROUP: usize = 1000;
    type Key = (usize, Vec<(u64, usize)>);
    let chunks: Vec<Result<BTreeMap<Key, Vec<usize>>, VerifyError>> = (0..n.div_ceil(4096))
        .into_par_iter()
        .map(|c| {
            let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
            for i in c * 4096..((c + 1) * 4096).min(n) {
                let mut rng = stream(seed, i as u64);
                let path = simulate_signal(model, mu0, &mut ConstantControl(u), t, &mut rng)?;
                let y = derive_y(model, &path);
                let x_t = path.jumps.last().map_or(path.x0, |j| j.1);
                let key = (y.y0, y.jumps.iter().map(|&(s, l)| ((s / bin) as u64, l)).collect());
                groups.entry(key).or_insert_with(|| vec![0; model.n_states()])[x_t] += 1;
            }
            Ok(groups)
        })
        .collect();
    let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for c in chunks {
        for (k, counts) in c? {
            let e = groups.entry(k).or_insert_with(|| vec![0; model.n_states()]);
            e.iter_mut().zip(&counts).for_each(|(a, b)| *a += b);
        }
    }
    let record_path = ControlPath::constant(u);
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    let mut covered = 0;
    for ((y0, pattern), counts) in &groups {
        let total: usize = counts.iter().sum();
        if total < MIN_GROUP {
            continue;
        }
        let ypath = YPath {
            y0: *y0,
            jumps: pattern.iter().map(|&(b, l)| (((b as f64) + 0.5) * bin, l)).collect(),
            horizon: t,
        };
        if ypath.jumps.last().is_some_and(|j| j.0 > t) {
            // the last bin straddles t: its centre lies beyond the horizon
            continue;
        }
        let beliefs = run_filter(
            model,
            mu0,
            &ypath,
            FilterControl::Record(&record_path),
            None,
            model.default_step(),
            None,
        )?;
        let (t_last, last) = beliefs.jumps.last().map_or((0.0, &beliefs.initial), |j| (j.t, &j.belief));
        let pi = flow(model, last, &record_path, t - t_last)?;
        let nt = total as f64;
        let excess: f64 = counts
            .iter()
            .zip(pi.weights())
            .map(|(&c, &p)| {
                let freq = c as f64 / nt;
                let sigma = (p * (1.0 - p) / nt).sqrt();
                ((freq - p).abs() - 3.0 * sigma).max(0.0)
            })
            .sum();
        worst = worst.max(excess);
        tested += 1;
        covered += total;
    }
    let mut r = CheckReport::le(format!("filter_consistency[control={}]", model.controls()[u]), worst, budget, seed, n)
        .note(format!("groups tested={tested} paths covered={covered}"));
    if tested == 0 {
        r.vacuous = true;
    }
    Ok(r)
}
