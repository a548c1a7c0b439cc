//! Controls applied between observation jumps: open-loop paths measured from
//! the start of a sojourn, belief-feedback rules, and policies that choose a
//! law at every post-jump belief.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Belief, ModelSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("control path is empty")]
    Empty,
    #[error("control path must start at time 0, got {0}")]
    BadStart(f64),
    #[error("control switch times must be strictly increasing and finite (segment {0})")]
    NonincreasingSwitch(usize),
    #[error("control index {index} out of range for {len} controls")]
    ControlIndex { index: usize, len: usize },
}

/// Piecewise-constant control `s -> u` on `[0, inf)`, right-continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    segments: Vec<(f64, usize)>,
}

impl ControlPath {
    pub fn constant(u: usize) -> Self {
        Self {
            segments: vec![(0.0, u)],
        }
    }

    /// `segments` lists `(switch time, control)` pairs starting at time 0.
    pub fn new(segments: Vec<(f64, usize)>) -> Result<Self, ControlError> {
        let first = segments.first().ok_or(ControlError::Empty)?;
        if first.0 != 0.0 {
            return Err(ControlError::BadStart(first.0));
        }
        for (i, w) in segments.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) || !w[1].0.is_finite() {
                return Err(ControlError::NonincreasingSwitch(i + 1));
            }
        }
        Ok(Self { segments })
    }

    pub fn check(&self, model: &ModelSpec) -> Result<(), ControlError> {
        for &(_, u) in &self.segments {
            if u >= model.n_controls() {
                return Err(ControlError::ControlIndex {
                    index: u,
                    len: model.n_controls(),
                });
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[(f64, usize)] {
        &self.segments
    }

    fn segment_index(&self, s: f64) -> usize {
        self.segments.partition_point(|&(start, _)| start <= s).saturating_sub(1)
    }

    pub fn control_at(&self, s: f64) -> usize {
        self.segments[self.segment_index(s)].1
    }

    /// Control in force at `s` and the time of the next switch.
    pub fn hold(&self, s: f64) -> (usize, f64) {
        let i = self.segment_index(s);
        let until = self.segments.get(i + 1).map_or(f64::INFINITY, |seg| seg.0);
        (self.segments[i].1, until)
    }

    /// The path `s -> self(offset + s)`.
    pub fn shifted(&self, offset: f64) -> Self {
        let i = self.segment_index(offset);
        let mut segments = vec![(0.0, self.segments[i].1)];
        segments.extend(self.segments[i + 1..].iter().map(|&(t, u)| (t - offset, u)));
        Self { segments }
    }

    pub fn as_constant(&self) -> Option<usize> {
        match self.segments.as_slice() {
            [(_, u)] => Some(*u),
            _ => None,
        }
    }
}

/// A rule picking a control from the current belief.
pub trait FeedbackRule: Sync {
    fn control_for(&self, face: usize, weights: &[f64]) -> usize;

    /// Identifies the rule's decisions for caching: two rules with the same
    /// fingerprint must choose the same control for every belief. `None`
    /// disables caching of feedback sojourns.
    fn fingerprint(&self) -> Option<u64> {
        None
    }
}

/// How controls are chosen during one sojourn of the filter.
#[derive(Clone)]
pub enum SojournLaw<'p> {
    /// Open-loop path measured from the sojourn start.
    Open(ControlPath),
    /// Re-decide from the current belief every `hold` time units.
    Feedback { rule: &'p dyn FeedbackRule, hold: f64 },
}

impl SojournLaw<'_> {
    /// Control in force from `elapsed` and the elapsed time it is held until.
    pub fn decide(&self, elapsed: f64, face: usize, weights: &[f64]) -> (usize, f64) {
        match self {
            SojournLaw::Open(path) => path.hold(elapsed),
            SojournLaw::Feedback { rule, hold } => (rule.control_for(face, weights), elapsed + hold),
        }
    }

    pub fn as_constant(&self) -> Option<usize> {
        match self {
            SojournLaw::Open(path) => path.as_constant(),
            SojournLaw::Feedback { .. } => None,
        }
    }

    /// Every control this law can emit, when that set is known up front.
    fn possible_controls(&self) -> Option<Vec<usize>> {
        match self {
            SojournLaw::Open(path) => Some(path.segments.iter().map(|s| s.1).collect()),
            SojournLaw::Feedback { .. } => None,
        }
    }

    /// True when no control the law may use lets the belief leave `face`.
    pub fn never_jumps(&self, model: &ModelSpec, face: usize) -> bool {
        let controls = self
            .possible_controls()
            .unwrap_or_else(|| (0..model.n_controls()).collect());
        controls.into_iter().all(|u| model.face_is_closed(face, u))
    }
}

/// A stationary policy of the separated problem: one sojourn law per
/// post-jump belief, reused after every observation jump.
pub trait Policy: Sync {
    fn sojourn_law(&self, post_jump: &Belief) -> SojournLaw<'_>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn sojourn_law(&self, _: &Belief) -> SojournLaw<'_> {
        SojournLaw::Open(ControlPath::constant(self.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_lookup_and_shift() {
        let p = ControlPath::new(vec![(0.0, 1), (0.5, 0), (2.0, 1)]).unwrap();
        assert_eq!(p.control_at(0.0), 1);
        assert_eq!(p.control_at(0.49), 1);
        assert_eq!(p.control_at(0.5), 0);
        assert_eq!(p.hold(1.0), (0, 2.0));
        assert_eq!(p.hold(3.0), (1, f64::INFINITY));
        let q = p.shifted(1.0);
        assert_eq!(q.segments(), &[(0.0, 0), (1.0, 1)]);
        assert_eq!(p.shifted(5.0).as_constant(), Some(1));
    }

    #[test]
    fn bad_paths() {
        assert_eq!(ControlPath::new(vec![]), Err(ControlError::Empty));
        assert_eq!(ControlPath::new(vec![(0.1, 0)]), Err(ControlError::BadStart(0.1)));
        assert_eq!(
            ControlPath::new(vec![(0.0, 0), (1.0, 1), (1.0, 0)]),
            Err(ControlError::NonincreasingSwitch(2))
        );
    }
}
