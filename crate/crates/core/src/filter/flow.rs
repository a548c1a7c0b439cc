//! Fixed-step RK4 integration of the filter between observation jumps.
//!
//! The integrated state is the belief augmented with two running integrals:
//! the jump rate `int r ds` (giving the survival function) and the discounted
//! expected cost `int e^{-beta s} nu_s . f(., u_s) ds`. After each step the
//! belief is clipped, face-projected and renormalized; anything beyond the
//! tolerances is reported as an error instead of being repaired.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{field_on_face, FilterError};
use crate::control::{ControlPath, SojournLaw};
use crate::model::{Belief, ModelSpec, LEAK_TOL};

const MIN_STEP: f64 = 1e-12;
const MAX_NODES: f64 = 5e7;
const CACHE_TABLES: usize = 16_384;
/// Stored node values above which the cache starts over (128 MB of f64).
const CACHE_FLOATS: usize = 16 << 20;

/// Belief and running integrals at one elapsed time of a sojourn.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub weights: Vec<f64>,
    pub rate_integral: f64,
    pub cost_integral: f64,
}

impl FlowPoint {
    /// Probability of no observation jump so far.
    pub fn survival(&self) -> f64 {
        (-self.rate_integral).exp()
    }

    pub fn belief(&self, model: &ModelSpec, face: usize) -> Belief {
        Belief::from_parts(model, face, self.weights.clone())
    }
}

/// Extremes observed at integration nodes, before (`min_entry`, `max_leak`)
/// and after (`max_mass_error`) projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStats {
    pub nodes: usize,
    pub min_entry: f64,
    pub max_leak: f64,
    pub max_mass_error: f64,
}

impl Default for NodeStats {
    fn default() -> Self {
        Self {
            nodes: 0,
            min_entry: f64::INFINITY,
            max_leak: 0.0,
            max_mass_error: 0.0,
        }
    }
}

impl NodeStats {
    pub fn merge(&mut self, other: &NodeStats) {
        self.nodes += other.nodes;
        self.min_entry = self.min_entry.min(other.min_entry);
        self.max_leak = self.max_leak.max(other.max_leak);
        self.max_mass_error = self.max_mass_error.max(other.max_mass_error);
    }
}

#[derive(Debug, Clone)]
struct Stepper {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Stepper {
    fn new(width: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; width]),
            tmp: vec![0.0; width],
        }
    }
}

#[inline]
fn derivative(model: &ModelSpec, face: usize, u: usize, s: f64, y: &[f64], dy: &mut [f64]) {
    let n = model.n_states();
    field_on_face(model, face, u, &y[..n], &mut dy[..n]);
    let mut rate = 0.0;
    let mut cost = 0.0;
    for &x in model.face_states(face) {
        rate += model.exit_rate(x, u) * y[x];
        cost += model.cost(x, u) * y[x];
    }
    dy[n] = rate;
    dy[n + 1] = (-model.beta() * s).exp() * cost;
}

/// One classical RK4 step of size `h` from `(s, y)` into `out`, followed by
/// projection of the belief part.
fn rk4_step(
    model: &ModelSpec,
    face: usize,
    u: usize,
    s: f64,
    h: f64,
    y: &[f64],
    out: &mut [f64],
    st: &mut Stepper,
    stats: &mut NodeStats,
) -> Result<(), FilterError> {
    let width = y.len();
    let [k1, k2, k3, k4] = &mut st.k;
    let tmp = &mut st.tmp;
    derivative(model, face, u, s, y, k1);
    for i in 0..width {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    derivative(model, face, u, s + 0.5 * h, tmp, k2);
    for i in 0..width {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    derivative(model, face, u, s + 0.5 * h, tmp, k3);
    for i in 0..width {
        tmp[i] = y[i] + h * k3[i];
    }
    derivative(model, face, u, s + h, tmp, k4);
    for i in 0..width {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    project(model, face, &mut out[..model.n_states()], stats)
}

fn project(model: &ModelSpec, face: usize, nu: &mut [f64], stats: &mut NodeStats) -> Result<(), FilterError> {
    let mut min_entry = f64::INFINITY;
    let mut leak: f64 = 0.0;
    for (z, w) in nu.iter_mut().enumerate() {
        if model.h(z) == face {
            min_entry = min_entry.min(*w);
        } else {
            leak = leak.max(w.abs());
            *w = 0.0;
        }
    }
    if !(min_entry >= -LEAK_TOL) {
        return Err(FilterError::NegativeMass { value: min_entry });
    }
    if leak > LEAK_TOL {
        return Err(FilterError::Leakage { value: leak });
    }
    let mut mass = 0.0;
    for &z in model.face_states(face) {
        if nu[z] < 0.0 {
            nu[z] = 0.0;
        }
        mass += nu[z];
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(FilterError::NegativeMass { value: mass });
    }
    let mut renormed = 0.0;
    for &z in model.face_states(face) {
        nu[z] /= mass;
        renormed += nu[z];
    }
    stats.nodes += 1;
    stats.min_entry = stats.min_entry.min(min_entry);
    stats.max_leak = stats.max_leak.max(leak);
    stats.max_mass_error = stats.max_mass_error.max((renormed - 1.0).abs());
    Ok(())
}

/// Flow under one constant control, tabulated at multiples of the step.
///
/// The value at an arbitrary elapsed time is one partial RK4 step from the
/// last node below it, so off-node queries land exactly on that time.
#[derive(Debug, Clone)]
pub struct FlowTable {
    face: usize,
    control: usize,
    step: f64,
    width: usize,
    nodes: Vec<f64>,
    stats: NodeStats,
    stepper: Stepper,
}

impl FlowTable {
    pub fn new(model: &ModelSpec, start: &Belief, control: usize, step: f64) -> Result<Self, FilterError> {
        if !(step.is_finite() && step >= MIN_STEP) {
            return Err(FilterError::StepUnderflow { step, duration: 0.0 });
        }
        let n = model.n_states();
        let width = n + 2;
        let mut nodes = Vec::with_capacity(width * 64);
        nodes.extend_from_slice(start.weights());
        nodes.extend_from_slice(&[0.0, 0.0]);
        Ok(Self {
            face: start.face(),
            control,
            step,
            width,
            nodes,
            stats: NodeStats::default(),
            stepper: Stepper::new(width),
        })
    }

    pub fn face(&self) -> usize {
        self.face
    }

    pub fn control(&self) -> usize {
        self.control
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    fn node_count(&self) -> usize {
        self.nodes.len() / self.width
    }

    fn ensure(&mut self, model: &ModelSpec, i: usize) -> Result<(), FilterError> {
        let w = self.width;
        let mut next = vec![0.0; w];
        while self.node_count() <= i {
            let last = self.node_count() - 1;
            let s = last as f64 * self.step;
            rk4_step(
                model,
                self.face,
                self.control,
                s,
                self.step,
                &self.nodes[last * w..(last + 1) * w],
                &mut next,
                &mut self.stepper,
                &mut self.stats,
            )?;
            self.nodes.extend_from_slice(&next);
        }
        Ok(())
    }

    fn point(&self, i: usize) -> FlowPoint {
        let n = self.width - 2;
        let row = &self.nodes[i * self.width..(i + 1) * self.width];
        FlowPoint {
            weights: row[..n].to_vec(),
            rate_integral: row[n],
            cost_integral: row[n + 1],
        }
    }

    /// State after exactly `i` full steps.
    pub fn node(&mut self, model: &ModelSpec, i: usize) -> Result<FlowPoint, FilterError> {
        if !((i as f64) < MAX_NODES) {
            return Err(FilterError::StepUnderflow {
                step: self.step,
                duration: i as f64 * self.step,
            });
        }
        self.ensure(model, i)?;
        Ok(self.point(i))
    }

    /// State at elapsed time `s` from the start of the table.
    pub fn at(&mut self, model: &ModelSpec, s: f64) -> Result<FlowPoint, FilterError> {
        if !(s >= 0.0) {
            return Err(FilterError::NegativeDuration(s));
        }
        let ratio = s / self.step;
        if !(ratio < MAX_NODES) {
            return Err(FilterError::StepUnderflow {
                step: self.step,
                duration: s,
            });
        }
        let mut i = ratio.floor() as usize;
        let mut rem = s - i as f64 * self.step;
        if rem < 0.0 && i > 0 {
            i -= 1;
            rem = s - i as f64 * self.step;
        }
        if rem >= self.step {
            i += 1;
            rem = (s - i as f64 * self.step).max(0.0);
        }
        self.ensure(model, i)?;
        if rem <= self.step * 1e-12 {
            return Ok(self.point(i));
        }
        let w = self.width;
        let mut out = vec![0.0; w];
        let start = self.nodes[i * w..(i + 1) * w].to_vec();
        rk4_step(
            model,
            self.face,
            self.control,
            i as f64 * self.step,
            rem,
            &start,
            &mut out,
            &mut self.stepper,
            &mut self.stats,
        )?;
        let n = w - 2;
        Ok(FlowPoint {
            rate_integral: out[n],
            cost_integral: out[n + 1],
            weights: {
                out.truncate(n);
                out
            },
        })
    }
}

type CacheKey = (usize, usize, u64, Vec<u64>);
/// Face, step, hold, rule fingerprint and start weights of a feedback sojourn.
type ChainKey = (usize, u64, u64, u64, Vec<u64>);

/// One constant-control piece of a sojourn, with the integrals accumulated
/// before it.
#[derive(Debug, Clone)]
struct Segment {
    table: Rc<RefCell<FlowTable>>,
    start: f64,
    end: f64,
    base_rate: f64,
    base_cost: f64,
}

/// The hold segments of a feedback sojourn, computed lazily and shared by all
/// sojourns from the same start under the same rule.
#[derive(Debug, Default)]
struct Chain {
    segs: Vec<Segment>,
}

/// Shares constant-control flow tables between sojourns (or feedback hold
/// segments) that start from the same belief. Results are bit-identical with
/// and without the cache. Clones are handles to the same tables.
#[derive(Debug, Default, Clone)]
pub struct FlowCache {
    tables: Rc<RefCell<HashMap<CacheKey, Rc<RefCell<FlowTable>>>>>,
    chains: Rc<RefCell<HashMap<ChainKey, Rc<RefCell<Chain>>>>>,
}

impl FlowCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn table(
        &self,
        model: &ModelSpec,
        start: &Belief,
        control: usize,
        step: f64,
    ) -> Result<Rc<RefCell<FlowTable>>, FilterError> {
        let key = (
            start.face(),
            control,
            step.to_bits(),
            start.weights().iter().map(|w| w.to_bits()).collect(),
        );
        let mut tables = self.tables.borrow_mut();
        if let Some(t) = tables.get(&key) {
            return Ok(Rc::clone(t));
        }
        if tables.len() >= CACHE_TABLES
            || tables.values().map(|t| t.borrow().nodes.len()).sum::<usize>() >= CACHE_FLOATS
        {
            tables.clear();
            self.chains.borrow_mut().clear();
        }
        let t = Rc::new(RefCell::new(FlowTable::new(model, start, control, step)?));
        tables.insert(key, Rc::clone(&t));
        Ok(t)
    }
}

fn segment_table(
    model: &ModelSpec,
    cache: Option<&FlowCache>,
    start: &Belief,
    u: usize,
    step: f64,
) -> Result<Rc<RefCell<FlowTable>>, FilterError> {
    match cache {
        Some(c) => c.table(model, start, u, step),
        None => Ok(Rc::new(RefCell::new(FlowTable::new(model, start, u, step)?))),
    }
}

impl FlowCache {
    /// Shared segment chain for a feedback law whose rule has a fingerprint.
    fn chain(&self, start: &Belief, law: &SojournLaw<'_>, step: f64) -> Option<Rc<RefCell<Chain>>> {
        let SojournLaw::Feedback { rule, hold } = law else {
            return None;
        };
        let key = (
            start.face(),
            step.to_bits(),
            hold.to_bits(),
            rule.fingerprint()?,
            start.weights().iter().map(|w| w.to_bits()).collect(),
        );
        let mut chains = self.chains.borrow_mut();
        if chains.len() >= CACHE_TABLES {
            chains.clear();
        }
        Some(Rc::clone(chains.entry(key).or_default()))
    }
}

/// The filter between two observation jumps under a [`SojournLaw`].
///
/// Queries must be made at nondecreasing elapsed times for efficiency; an
/// earlier time restarts the integration from the sojourn start.
pub struct Sojourn<'a> {
    model: &'a ModelSpec,
    law: SojournLaw<'a>,
    start: Belief,
    step: f64,
    seg: Segment,
    seg_idx: usize,
    finished: NodeStats,
    cache: Option<FlowCache>,
    chain: Option<Rc<RefCell<Chain>>>,
}

impl<'a> Sojourn<'a> {
    pub fn new(
        model: &'a ModelSpec,
        start: &Belief,
        law: SojournLaw<'a>,
        step: f64,
        cache: Option<&mut FlowCache>,
    ) -> Result<Self, FilterError> {
        let cache = cache.map(|c| c.clone());
        let chain = cache.as_ref().and_then(|c| c.chain(start, &law, step));
        let cached = chain.as_ref().and_then(|c| c.borrow().segs.first().cloned());
        let seg = match cached {
            Some(seg) => seg,
            None => {
                let (u, until) = law.decide(0.0, start.face(), start.weights());
                let seg = Segment {
                    table: segment_table(model, cache.as_ref(), start, u, step)?,
                    start: 0.0,
                    end: until,
                    base_rate: 0.0,
                    base_cost: 0.0,
                };
                if let Some(c) = &chain {
                    c.borrow_mut().segs.push(seg.clone());
                }
                seg
            }
        };
        Ok(Self {
            model,
            law,
            start: start.clone(),
            step,
            seg,
            seg_idx: 0,
            finished: NodeStats::default(),
            cache,
            chain,
        })
    }

    pub fn face(&self) -> usize {
        self.start.face()
    }

    pub fn start(&self) -> &Belief {
        &self.start
    }

    pub fn law(&self) -> &SojournLaw<'a> {
        &self.law
    }

    pub fn stats(&self) -> NodeStats {
        let mut s = self.finished;
        s.merge(&self.seg.table.borrow().stats());
        s
    }

    fn rewind(&mut self) -> Result<(), FilterError> {
        let mut cache = self.cache.clone();
        let fresh = Sojourn::new(self.model, &self.start, self.law.clone(), self.step, cache.as_mut())?;
        let finished = self.stats();
        *self = fresh;
        self.finished = finished;
        Ok(())
    }

    fn next_segment(&mut self) -> Result<(), FilterError> {
        self.finished.merge(&self.seg.table.borrow().stats());
        let next = self.seg_idx + 1;
        if let Some(seg) = self.chain.as_ref().and_then(|c| c.borrow().segs.get(next).cloned()) {
            self.seg = seg;
            self.seg_idx = next;
            return Ok(());
        }
        let cur = &self.seg;
        let end = cur.table.borrow_mut().at(self.model, cur.end - cur.start)?;
        let base_rate = cur.base_rate + end.rate_integral;
        let base_cost = cur.base_cost + (-self.model.beta() * cur.start).exp() * end.cost_integral;
        let face = self.face();
        let (u, mut until) = self.law.decide(cur.end, face, &end.weights);
        if !(until > cur.end) {
            until = cur.end + self.step;
        }
        let belief = Belief::from_parts(self.model, face, end.weights);
        let seg = Segment {
            table: segment_table(self.model, self.cache.as_ref(), &belief, u, self.step)?,
            start: cur.end,
            end: until,
            base_rate,
            base_cost,
        };
        if let Some(c) = &self.chain {
            let mut c = c.borrow_mut();
            if c.segs.len() == next {
                c.segs.push(seg.clone());
            }
        }
        self.seg = seg;
        self.seg_idx = next;
        Ok(())
    }

    /// Control in force on `[s, until)` and `until` (right-continuous
    /// counterpart of the control reported by [`Sojourn::at`]).
    pub fn hold_at(&mut self, s: f64) -> Result<(usize, f64), FilterError> {
        if !(s >= 0.0) {
            return Err(FilterError::NegativeDuration(s));
        }
        if s < self.seg.start {
            self.rewind()?;
        }
        while s >= self.seg.end {
            self.next_segment()?;
        }
        Ok((self.seg.table.borrow().control(), self.seg.end))
    }

    /// Flow state at elapsed time `s`, together with the control in force
    /// just before `s` (the left limit used by a jump at `s`).
    pub fn at(&mut self, s: f64) -> Result<(FlowPoint, usize), FilterError> {
        if !(s >= 0.0) {
            return Err(FilterError::NegativeDuration(s));
        }
        if s < self.seg.start {
            self.rewind()?;
        }
        while s > self.seg.end {
            self.next_segment()?;
        }
        let seg = &self.seg;
        let mut p = seg.table.borrow_mut().at(self.model, s - seg.start)?;
        p.rate_integral += seg.base_rate;
        p.cost_integral = seg.base_cost + (-self.model.beta() * seg.start).exp() * p.cost_integral;
        let u = seg.table.borrow().control();
        Ok((p, u))
    }
}

/// Filter belief after `t` time units on the start face under `path`, using
/// the default step `1e-3 / C_lambda`.
pub fn flow(model: &ModelSpec, nu0: &Belief, path: &ControlPath, t: f64) -> Result<Belief, FilterError> {
    flow_with_step(model, nu0, path, t, model.default_step())
}

pub fn flow_with_step(
    model: &ModelSpec,
    nu0: &Belief,
    path: &ControlPath,
    t: f64,
    step: f64,
) -> Result<Belief, FilterError> {
    path.check(model)?;
    if !(t >= 0.0) {
        return Err(FilterError::NegativeDuration(t));
    }
    if t == 0.0 {
        return Ok(nu0.clone());
    }
    let mut sojourn = Sojourn::new(model, nu0, SojournLaw::Open(path.clone()), step, None)?;
    let (p, _) = sojourn.at(t)?;
    Ok(p.belief(model, nu0.face()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dirac, tv};
    use crate::testutil::m1;

    #[test]
    fn zero_duration_is_identity() {
        let m = m1();
        let nu = Belief::new(&m, 0, vec![0.3, 0.7, 0.0]).unwrap();
        assert_eq!(flow(&m, &nu, &ControlPath::constant(1), 0.0).unwrap(), nu);
    }

    #[test]
    fn negative_duration_and_tiny_step() {
        let m = m1();
        let nu = dirac(&m, 0).unwrap();
        let p = ControlPath::constant(0);
        assert!(matches!(flow(&m, &nu, &p, -1.0), Err(FilterError::NegativeDuration(_))));
        assert!(matches!(
            flow_with_step(&m, &nu, &p, 1.0, 1e-15),
            Err(FilterError::StepUnderflow { .. })
        ));
    }

    #[test]
    fn singleton_face_is_stationary() {
        let m = m1();
        let d2 = dirac(&m, 2).unwrap();
        let out = flow(&m, &d2, &ControlPath::constant(0), 3.7).unwrap();
        assert_eq!(out.weights(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn flow_property() {
        let m = m1();
        let nu = dirac(&m, 0).unwrap();
        let path = ControlPath::new(vec![(0.0, 0), (0.4, 1), (1.1, 0)]).unwrap();
        let direct = flow(&m, &nu, &path, 1.7).unwrap();
        let mid = flow(&m, &nu, &path, 0.6).unwrap();
        let rest = flow(&m, &mid, &path.shifted(0.6), 1.1).unwrap();
        assert!(tv(direct.weights(), rest.weights()) < 1e-10);
    }

    #[test]
    fn cached_tables_are_bit_identical() {
        let m = m1();
        let nu = Belief::new(&m, 0, vec![0.25, 0.75, 0.0]).unwrap();
        let law = || SojournLaw::Open(ControlPath::constant(1));
        let mut cache = FlowCache::new();
        let mut plain = Sojourn::new(&m, &nu, law(), m.default_step(), None).unwrap();
        let mut first = Sojourn::new(&m, &nu, law(), m.default_step(), Some(&mut cache)).unwrap();
        first.at(2.0).unwrap();
        let mut cached = Sojourn::new(&m, &nu, law(), m.default_step(), Some(&mut cache)).unwrap();
        for s in [0.0, 0.123, 0.5, 1.999] {
            assert_eq!(plain.at(s).unwrap(), cached.at(s).unwrap());
        }
    }

    #[test]
    fn sojourn_rewinds_and_reports_left_control() {
        let m = m1();
        let nu = dirac(&m, 0).unwrap();
        let path = ControlPath::new(vec![(0.0, 0), (0.5, 1)]).unwrap();
        let mut s = Sojourn::new(&m, &nu, SojournLaw::Open(path), m.default_step(), None).unwrap();
        let (_, u_at_switch) = s.at(0.5).unwrap();
        assert_eq!(u_at_switch, 0);
        let (late, u_late) = s.at(0.8).unwrap();
        assert_eq!(u_late, 1);
        let (early, _) = s.at(0.2).unwrap();
        let (again, _) = s.at(0.8).unwrap();
        assert_eq!(late, again);
        assert!(early.rate_integral < late.rate_integral);
    }

    #[test]
    fn invariants_hold_along_the_flow() {
        let m = m1();
        let nu = Belief::new(&m, 0, vec![0.9, 0.1, 0.0]).unwrap();
        let mut s = Sojourn::new(&m, &nu, SojournLaw::Open(ControlPath::constant(0)), m.default_step(), None)
            .unwrap();
        let mut last_survival = 1.0;
        for i in 1..=50 {
            let (p, _) = s.at(i as f64 * 0.1).unwrap();
            let mass: f64 = p.weights.iter().sum();
            assert!((mass - 1.0).abs() <= 1e-10);
            assert_eq!(p.weights[2], 0.0);
            assert!(p.survival() <= last_survival);
            last_survival = p.survival();
        }
        let st = s.stats();
        assert!(st.min_entry >= -1e-12 && st.max_leak <= 1e-12 && st.max_mass_error <= 1e-10);
    }
}
