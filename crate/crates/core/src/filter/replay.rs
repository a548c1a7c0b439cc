//! Replaying the filter along an observed label trajectory.

use serde::{Deserialize, Serialize};

use super::{h_update_flagged, jump_update_flagged, FilterError, FlowCache, NodeStats, NonnegMeasure, Sojourn};
use crate::control::{ControlPath, Policy, SojournLaw};
use crate::model::{Belief, ModelSpec, MASS_TOL};

/// Observed label trajectory: initial label and `(time, new label)` jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YPath {
    pub y0: usize,
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl YPath {
    pub fn validate(&self, model: &ModelSpec) -> Result<(), FilterError> {
        model.check_obs(self.y0)?;
        let mut prev_t = 0.0;
        let mut prev_y = self.y0;
        for (index, &(t, y)) in self.jumps.iter().enumerate() {
            model.check_obs(y)?;
            if !(t > prev_t) || !t.is_finite() {
                return Err(FilterError::NonincreasingTimes { index });
            }
            if y == prev_y {
                return Err(FilterError::RepeatedLabel { index });
            }
            prev_t = t;
            prev_y = y;
        }
        if !(self.horizon >= prev_t) {
            return Err(FilterError::NonincreasingTimes {
                index: self.jumps.len(),
            });
        }
        Ok(())
    }

    /// Label in force at time `t` (right-continuous).
    pub fn label_at(&self, t: f64) -> usize {
        let i = self.jumps.partition_point(|&(s, _)| s <= t);
        if i == 0 {
            self.y0
        } else {
            self.jumps[i - 1].1
        }
    }
}

/// Where the filter gets its controls from.
#[derive(Clone, Copy)]
pub enum FilterControl<'a> {
    /// A stationary policy of the separated problem, consulted at every
    /// post-jump belief.
    Policy(&'a dyn Policy),
    /// An externally recorded control path in absolute time.
    Record(&'a ControlPath),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterJump {
    pub t: f64,
    pub left_limit: Belief,
    pub control: usize,
    pub belief: Belief,
    /// The conditioning step found no mass on the new face.
    pub degenerate_update: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPath {
    pub initial: Belief,
    pub initial_degenerate: bool,
    pub samples: Vec<(f64, Belief)>,
    pub jumps: Vec<FilterJump>,
    pub horizon: f64,
    pub stats: NodeStats,
}

impl BeliefPath {
    /// Grid samples and post-jump beliefs merged in time order; a post-jump
    /// belief replaces a grid sample at the same time.
    pub fn rows(&self) -> Vec<(f64, &Belief)> {
        let mut rows: Vec<(f64, &Belief)> = Vec::with_capacity(self.samples.len() + self.jumps.len());
        let mut j = 0;
        for (t, b) in &self.samples {
            while j < self.jumps.len() && self.jumps[j].t <= *t {
                if self.jumps[j].t < *t {
                    rows.push((self.jumps[j].t, &self.jumps[j].belief));
                }
                j += 1;
            }
            rows.push((*t, b));
        }
        rows.extend(self.jumps[j..].iter().map(|jmp| (jmp.t, &jmp.belief)));
        rows
    }
}

pub(crate) fn check_law(model: &ModelSpec, mu0: &[f64]) -> Result<(), FilterError> {
    if mu0.len() != model.n_states() || mu0.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(FilterError::BadInitialLaw);
    }
    if (mu0.iter().sum::<f64>() - 1.0).abs() > MASS_TOL {
        return Err(FilterError::BadInitialLaw);
    }
    Ok(())
}

fn law_for<'a>(control: FilterControl<'a>, post_jump: &Belief, t: f64) -> SojournLaw<'a> {
    match control {
        FilterControl::Policy(p) => p.sojourn_law(post_jump),
        FilterControl::Record(path) => SojournLaw::Open(path.shifted(t)),
    }
}

/// Runs the filter from `H_{y0}[mu0]` along `y_path`, sampling every
/// `sample_dt` (if given) and recording every post-jump belief exactly.
pub fn run_filter(
    model: &ModelSpec,
    mu0: &[f64],
    y_path: &YPath,
    control: FilterControl<'_>,
    sample_dt: Option<f64>,
    step: f64,
    mut cache: Option<&mut FlowCache>,
) -> Result<BeliefPath, FilterError> {
    check_law(model, mu0)?;
    y_path.validate(model)?;
    if let FilterControl::Record(path) = control {
        path.check(model)?;
    }
    let sample_times: Vec<f64> = match sample_dt {
        Some(dt) if dt > 0.0 && dt.is_finite() => {
            let count = (y_path.horizon / dt + 1e-9).floor() as usize;
            (0..=count).map(|k| k as f64 * dt).collect()
        }
        Some(dt) => return Err(FilterError::StepUnderflow { step: dt, duration: y_path.horizon }),
        None => Vec::new(),
    };

    let (initial, initial_degenerate) = h_update_flagged(model, &NonnegMeasure(mu0.to_vec()), y_path.y0);
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut jumps = Vec::with_capacity(y_path.jumps.len());
    let mut stats = NodeStats::default();
    let mut next_sample = 0;
    let mut start_t = 0.0;
    let mut sojourn = Sojourn::new(
        model,
        &initial,
        law_for(control, &initial, 0.0),
        step,
        cache.as_deref_mut(),
    )?;

    for &(tau, y) in &y_path.jumps {
        while next_sample < sample_times.len() && sample_times[next_sample] < tau {
            let t = sample_times[next_sample];
            let (p, _) = sojourn.at(t - start_t)?;
            samples.push((t, p.belief(model, sojourn.face())));
            next_sample += 1;
        }
        let (p, u_left) = sojourn.at(tau - start_t)?;
        let left_limit = p.belief(model, sojourn.face());
        let (belief, degenerate_update) = jump_update_flagged(model, &left_limit, u_left, y)?;
        stats.merge(&sojourn.stats());
        sojourn = Sojourn::new(model, &belief, law_for(control, &belief, tau), step, cache.as_deref_mut())?;
        start_t = tau;
        jumps.push(FilterJump {
            t: tau,
            left_limit,
            control: u_left,
            belief,
            degenerate_update,
        });
    }
    for &t in &sample_times[next_sample..] {
        let (p, _) = sojourn.at(t - start_t)?;
        samples.push((t, p.belief(model, sojourn.face())));
    }
    stats.merge(&sojourn.stats());

    Ok(BeliefPath {
        initial,
        initial_degenerate,
        samples,
        jumps,
        horizon: y_path.horizon,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ConstantPolicy;
    use crate::filter::flow;
    use crate::model::tv;
    use crate::testutil::m1;

    const THIRD: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

    #[test]
    fn initial_belief_conditions_the_law() {
        let m = m1();
        let y = YPath { y0: 0, jumps: vec![], horizon: 0.0 };
        let out = run_filter(&m, &THIRD, &y, FilterControl::Policy(&ConstantPolicy(0)), Some(0.1), m.default_step(), None)
            .unwrap();
        assert!(tv(out.initial.weights(), &[0.5, 0.5, 0.0]) < 1e-15);
        assert_eq!(out.samples.len(), 1);
    }

    #[test]
    fn jump_to_singleton_face_gives_point_mass() {
        let m = m1();
        let y = YPath { y0: 0, jumps: vec![(0.37, 1)], horizon: 1.0 };
        let out = run_filter(&m, &THIRD, &y, FilterControl::Policy(&ConstantPolicy(1)), Some(0.25), m.default_step(), None)
            .unwrap();
        assert_eq!(out.jumps[0].belief.weights(), &[0.0, 0.0, 1.0]);
        assert_eq!(out.jumps[0].control, 1);
        assert!(!out.jumps[0].degenerate_update);
        assert_eq!(out.samples.len(), 5);
        assert_eq!(out.rows().len(), 6);
    }

    #[test]
    fn no_jumps_matches_flow() {
        let m = m1();
        let y = YPath { y0: 0, jumps: vec![], horizon: 2.0 };
        let out = run_filter(&m, &THIRD, &y, FilterControl::Policy(&ConstantPolicy(0)), Some(0.5), m.default_step(), None)
            .unwrap();
        let direct = flow(&m, &out.initial, &ControlPath::constant(0), 2.0).unwrap();
        assert_eq!(out.samples.last().unwrap().1, direct);
    }

    #[test]
    fn recorded_controls_are_shifted_per_sojourn() {
        let m = m1();
        let rec = ControlPath::new(vec![(0.0, 0), (0.5, 1)]).unwrap();
        let y = YPath { y0: 1, jumps: vec![(0.3, 0), (0.9, 1)], horizon: 1.0 };
        let out = run_filter(&m, &[0.0, 0.0, 1.0], &y, FilterControl::Record(&rec), None, m.default_step(), None).unwrap();
        assert_eq!(out.jumps[0].control, 0);
        assert_eq!(out.jumps[1].control, 1);
        // the post-jump belief on face a is the same under either control
        assert_eq!(out.jumps[0].belief.weights(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn malformed_paths_are_rejected() {
        let m = m1();
        let pol = ConstantPolicy(0);
        let run = |y: YPath| run_filter(&m, &THIRD, &y, FilterControl::Policy(&pol), None, m.default_step(), None);
        assert!(matches!(
            run(YPath { y0: 0, jumps: vec![(0.5, 1), (0.5, 0)], horizon: 1.0 }),
            Err(FilterError::NonincreasingTimes { index: 1 })
        ));
        assert!(matches!(
            run(YPath { y0: 0, jumps: vec![(0.5, 0)], horizon: 1.0 }),
            Err(FilterError::RepeatedLabel { index: 0 })
        ));
        assert!(matches!(
            run_filter(&m, &[0.5, 0.5, 0.5], &YPath { y0: 0, jumps: vec![], horizon: 1.0 }, FilterControl::Policy(&pol), None, 1e-3, None),
            Err(FilterError::BadInitialLaw)
        ));
    }

    #[test]
    fn impossible_jump_is_flagged() {
        let mut raw = m1().to_raw();
        // face a can never reach state 2
        for x in 0..2 {
            for u in 0..2 {
                raw.lambda[x][u][2] = 0.0;
            }
        }
        let m = crate::model::validate_model(&raw).unwrap();
        let y = YPath { y0: 0, jumps: vec![(0.2, 1)], horizon: 0.2 };
        let out = run_filter(&m, &THIRD, &y, FilterControl::Policy(&ConstantPolicy(0)), None, m.default_step(), None)
            .unwrap();
        assert!(out.jumps[0].degenerate_update);
        assert_eq!(out.jumps[0].belief.weights(), &[0.0, 0.0, 1.0]);
    }
}
