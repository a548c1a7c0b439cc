//! The filter as a controlled piecewise-deterministic process with
//! characteristics `(F, r, R)`: flow, jump rate and post-jump kernel.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Policy, SojournLaw};
use crate::filter::{big_lambda, h_update, FilterError, FlowCache, FlowPoint, Sojourn};
use crate::model::{Belief, ModelSpec};
use crate::rng::{stream, PathRng};
use crate::stats::mean_stderr;

#[derive(Debug, Error)]
pub enum PdmpError {
    #[error("no observation jump is possible from this belief under control {0}")]
    ZeroRate(usize),
    #[error("horizon must be finite and nonnegative, got {0}")]
    BadHorizon(f64),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Rate of the next observation jump: `r(nu, u) = sum_x lambda(x, u, off-face) nu[x]`.
pub fn jump_rate(model: &ModelSpec, nu: &Belief, u: usize) -> f64 {
    rate_on_face(model, nu.face(), u, nu.weights())
}

#[inline]
pub(crate) fn rate_on_face(model: &ModelSpec, face: usize, u: usize, weights: &[f64]) -> f64 {
    let r: f64 = model
        .face_states(face)
        .iter()
        .map(|&x| model.exit_rate(x, u) * weights[x])
        .sum();
    r.max(0.0)
}

/// Mass of `Lambda(nu, u)` on each observation label.
fn label_masses(model: &ModelSpec, nu: &Belief, u: usize) -> Vec<f64> {
    let y = nu.face();
    let mut out = vec![0.0; model.n_obs()];
    for &x in model.face_states(y) {
        let w = nu.weights()[x];
        if w == 0.0 {
            continue;
        }
        for (yy, o) in out.iter_mut().enumerate() {
            if yy != y {
                *o += model.rate_into_face(x, u, yy) * w;
            }
        }
    }
    out
}

/// Distribution of the next observed label. With zero jump rate the kernel
/// is a point mass on the current label; it is never sampled in that case.
pub fn obs_kernel(model: &ModelSpec, nu: &Belief, u: usize) -> Vec<f64> {
    let masses = label_masses(model, nu, u);
    let r: f64 = masses.iter().sum();
    if r > 0.0 {
        masses.into_iter().map(|m| m / r).collect()
    } else {
        let mut out = vec![0.0; model.n_obs()];
        out[nu.face()] = 1.0;
        out
    }
}

/// `chi(t) = exp(-int_0^t r(phi(s), u_s) ds)` along the flow from `nu`.
pub fn survival(model: &ModelSpec, nu: &Belief, law: SojournLaw<'_>, t: f64) -> Result<f64, PdmpError> {
    if !(t >= 0.0) {
        return Err(FilterError::NegativeDuration(t).into());
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let mut sojourn = Sojourn::new(model, nu, law, model.default_step(), None)?;
    Ok(sojourn.at(t)?.0.survival())
}

/// Outcome of one sojourn of the filter.
#[derive(Debug, Clone, PartialEq)]
pub enum SojournSample {
    Jump {
        duration: f64,
        left_limit: Belief,
        control: usize,
        /// Discounted cost accumulated during the sojourn, discounted from
        /// its start.
        cost_integral: f64,
    },
    /// No jump before the limit; `duration()` is `+inf`.
    NoJump { cost_integral: f64 },
}

impl SojournSample {
    pub fn duration(&self) -> f64 {
        match self {
            SojournSample::Jump { duration, .. } => *duration,
            SojournSample::NoJump { .. } => f64::INFINITY,
        }
    }
}

/// Thinning against the dominating rate `C_lambda`: exponential proposals,
/// each accepted with probability `r(phi(s), u_s) / C_lambda`.
pub(crate) fn thin_sojourn(
    model: &ModelSpec,
    sojourn: &mut Sojourn<'_>,
    rng: &mut PathRng,
    limit: f64,
) -> Result<SojournSample, PdmpError> {
    let face = sojourn.face();
    let c = model.c_lambda();
    let structural_zero = c == 0.0 || sojourn.law().never_jumps(model, face);
    let censored = |sojourn: &mut Sojourn<'_>| -> Result<SojournSample, PdmpError> {
        let cost_integral = if limit.is_finite() {
            sojourn.at(limit)?.0.cost_integral
        } else {
            0.0
        };
        Ok(SojournSample::NoJump { cost_integral })
    };
    if structural_zero {
        return censored(sojourn);
    }
    let mut s = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        s += e / c;
        if s > limit {
            return censored(sojourn);
        }
        let (FlowPoint { weights, cost_integral, .. }, u) = sojourn.at(s)?;
        let r = rate_on_face(model, face, u, &weights);
        if rng.random::<f64>() * c < r {
            return Ok(SojournSample::Jump {
                duration: s,
                left_limit: Belief::from_parts(model, face, weights),
                control: u,
                cost_integral,
            });
        }
    }
}

/// Samples the time to the next observation jump from `nu` (censored at
/// `limit`, which may be infinite).
pub fn sample_sojourn(
    model: &ModelSpec,
    nu: &Belief,
    law: SojournLaw<'_>,
    rng: &mut PathRng,
    limit: f64,
    cache: Option<&mut FlowCache>,
) -> Result<SojournSample, PdmpError> {
    let mut sojourn = Sojourn::new(model, nu, law, model.default_step(), cache)?;
    thin_sojourn(model, &mut sojourn, rng, limit)
}

/// Index drawn with probability proportional to `weights`.
pub fn draw_index(weights: &[f64], rng: &mut PathRng) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Draws the post-jump label from the observation kernel and returns it with
/// the reset belief `H_{y'}[Lambda(nu-, u)]`.
pub fn sample_transition(
    model: &ModelSpec,
    nu_minus: &Belief,
    u: usize,
    rng: &mut PathRng,
) -> Result<(usize, Belief), PdmpError> {
    let masses = label_masses(model, nu_minus, u);
    if !(masses.iter().sum::<f64>() > 0.0) {
        return Err(PdmpError::ZeroRate(u));
    }
    let y = draw_index(&masses, rng);
    Ok((y, h_update(model, &big_lambda(model, nu_minus, u), y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmpJump {
    pub t: f64,
    pub y: usize,
    pub belief: Belief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmpPath {
    pub start: Belief,
    pub jumps: Vec<PdmpJump>,
    pub horizon: f64,
}

/// Simulates the filter process under a stationary policy up to `horizon`
/// and returns the path with its discounted cost
/// `int_0^horizon e^{-beta t} pi_t . f(., u_t) dt`.
pub fn simulate_pdmp(
    model: &ModelSpec,
    nu0: &Belief,
    policy: &dyn Policy,
    horizon: f64,
    rng: &mut PathRng,
    mut cache: Option<&mut FlowCache>,
) -> Result<(PdmpPath, f64), PdmpError> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(PdmpError::BadHorizon(horizon));
    }
    let mut path = PdmpPath {
        start: nu0.clone(),
        jumps: Vec::new(),
        horizon,
    };
    if horizon == 0.0 {
        return Ok((path, 0.0));
    }
    let beta = model.beta();
    let mut t = 0.0;
    let mut cost = 0.0;
    let mut current = nu0.clone();
    loop {
        let mut sojourn = Sojourn::new(
            model,
            &current,
            policy.sojourn_law(&current),
            model.default_step(),
            cache.as_deref_mut(),
        )?;
        match thin_sojourn(model, &mut sojourn, rng, horizon - t)? {
            SojournSample::Jump {
                duration,
                left_limit,
                control,
                cost_integral,
            } => {
                cost += (-beta * t).exp() * cost_integral;
                t += duration;
                let (y, belief) = sample_transition(model, &left_limit, control, rng)?;
                path.jumps.push(PdmpJump {
                    t,
                    y,
                    belief: belief.clone(),
                });
                current = belief;
            }
            SojournSample::NoJump { cost_integral } => {
                cost += (-beta * t).exp() * cost_integral;
                return Ok((path, cost));
            }
        }
    }
}

/// Monte-Carlo mean of the PDMP cost sample over `n_paths` independent
/// streams `(seed, i)`.
pub fn pdmp_cost_estimate(
    model: &ModelSpec,
    nu0: &Belief,
    policy: &dyn Policy,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64), PdmpError> {
    const CHUNK: usize = 512;
    let chunks: Vec<Result<Vec<f64>, PdmpError>> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut cache = FlowCache::new();
            (c * CHUNK..((c + 1) * CHUNK).min(n_paths))
                .map(|i| {
                    let mut rng = stream(seed, i as u64);
                    simulate_pdmp(model, nu0, policy, horizon, &mut rng, Some(&mut cache)).map(|(_, c)| c)
                })
                .collect()
        })
        .collect();
    let mut costs = Vec::with_capacity(n_paths);
    for c in chunks {
        costs.extend(c?);
    }
    Ok(mean_stderr(&costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ConstantPolicy, ControlPath};
    use crate::model::dirac;
    use crate::stats::{ks_critical_one_sample, ks_one_sample, sorted};
    use crate::testutil::m1;

    fn constant(u: usize) -> SojournLaw<'static> {
        SojournLaw::Open(ControlPath::constant(u))
    }

    #[test]
    fn jump_rate_cases() {
        let m = m1();
        assert_eq!(jump_rate(&m, &dirac(&m, 0).unwrap(), 0), 1.0);
        let half = Belief::new(&m, 0, vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(jump_rate(&m, &half, 0), 0.75);
        assert_eq!(jump_rate(&m, &dirac(&m, 2).unwrap(), 1), 4.0);
    }

    #[test]
    fn kernel_cases() {
        let m = m1();
        assert_eq!(obs_kernel(&m, &dirac(&m, 0).unwrap(), 0), vec![0.0, 1.0]);
        assert_eq!(obs_kernel(&m, &dirac(&m, 2).unwrap(), 1), vec![1.0, 0.0]);
    }

    #[test]
    fn survival_on_singleton_face_is_exponential() {
        let m = m1();
        let d2 = dirac(&m, 2).unwrap();
        assert_eq!(survival(&m, &d2, constant(0), 0.0).unwrap(), 1.0);
        for t in [0.1, 0.5, 2.0] {
            let chi = survival(&m, &d2, constant(0), t).unwrap();
            assert!((chi - (-2.0 * t).exp()).abs() < 1e-12, "{chi}");
        }
    }

    #[test]
    fn transitions_from_m1_corners() {
        let m = m1();
        let mut rng = stream(1, 0);
        for _ in 0..20 {
            let (y, b) = sample_transition(&m, &dirac(&m, 0).unwrap(), 0, &mut rng).unwrap();
            assert_eq!((y, b.weights()), (1, &[0.0, 0.0, 1.0][..]));
            let (y, b) = sample_transition(&m, &dirac(&m, 2).unwrap(), 0, &mut rng).unwrap();
            assert_eq!((y, b.weights()), (0, &[0.5, 0.5, 0.0][..]));
        }
    }

    #[test]
    fn zero_exit_rates_never_jump() {
        let mut raw = m1().to_raw();
        for x in 0..2 {
            for u in 0..2 {
                raw.lambda[x][u][2] = 0.0;
            }
        }
        let m = crate::model::validate_model(&raw).unwrap();
        let nu = dirac(&m, 0).unwrap();
        let mut rng = stream(3, 0);
        let s = sample_sojourn(&m, &nu, constant(0), &mut rng, f64::INFINITY, None).unwrap();
        assert_eq!(s.duration(), f64::INFINITY);
        assert!(matches!(sample_transition(&m, &nu, 0, &mut rng), Err(PdmpError::ZeroRate(0))));
    }

    #[test]
    fn thinning_is_deterministic_per_seed() {
        let m = m1();
        let nu = dirac(&m, 0).unwrap();
        let a = sample_sojourn(&m, &nu, constant(1), &mut stream(9, 2), f64::INFINITY, None).unwrap();
        let b = sample_sojourn(&m, &nu, constant(1), &mut stream(9, 2), f64::INFINITY, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thinning_sojourns_match_closed_form() {
        let m = m1();
        let d2 = dirac(&m, 2).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                sample_sojourn(&m, &d2, constant(0), &mut stream(11, i), f64::INFINITY, None)
                    .unwrap()
                    .duration()
            })
            .collect();
        let cdf: Vec<f64> = sorted(xs).iter().map(|t| 1.0 - (-2.0 * t).exp()).collect();
        assert!(ks_one_sample(&cdf) <= ks_critical_one_sample(n as usize, 0.01));
    }

    #[test]
    fn pdmp_paths() {
        let m = m1();
        let nu = dirac(&m, 0).unwrap();
        let (p, c) = simulate_pdmp(&m, &nu, &ConstantPolicy(0), 0.0, &mut stream(1, 1), None).unwrap();
        assert!(p.jumps.is_empty() && c == 0.0);

        let (p, _) = simulate_pdmp(&m, &nu, &ConstantPolicy(0), 10.0, &mut stream(1, 1), None).unwrap();
        let mut prev = (0.0, nu.face());
        for j in &p.jumps {
            assert!(j.t > prev.0 && j.y != prev.1 && j.belief.face() == j.y);
            prev = (j.t, j.y);
        }

        let flat = m.with_cost(|_, _, _| 0.7).unwrap();
        let (_, c) = simulate_pdmp(&flat, &nu, &ConstantPolicy(1), 3.0, &mut stream(5, 0), None).unwrap();
        assert!((c - 0.7 * (1.0 - (-3.0f64).exp())).abs() < 1e-10, "{c}");
    }
}
