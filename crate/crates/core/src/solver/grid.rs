//! Regular grids on the faces of the effective simplex with barycentric
//! interpolation over the Freudenthal triangulation.

use std::collections::HashMap;
use std::ops::Range;

use super::SolverError;
use crate::model::{Belief, ModelSpec};

/// Default cap on the total number of vertices.
pub const DEFAULT_GRID_CAP: usize = 2_000_000;

#[derive(Debug, Clone)]
struct FaceGrid {
    states: Vec<usize>,
    offset: usize,
    count: usize,
    index: HashMap<Vec<u32>, usize>,
}

/// All beliefs `n / k` with `n` a composition of `k` over the states of a
/// face, for every face.
#[derive(Debug, Clone)]
pub struct BeliefGrid {
    k: u32,
    n_states: usize,
    faces: Vec<FaceGrid>,
    vertex_face: Vec<usize>,
    counts: Vec<Vec<u32>>,
    beliefs: Vec<Belief>,
}

fn binomial(n: u64, r: u64) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn compositions(k: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        prefix.push(k);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=k).rev() {
        prefix.push(first);
        compositions(k - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl BeliefGrid {
    pub fn new(model: &ModelSpec, k: u32) -> Result<Self, SolverError> {
        Self::with_cap(model, k, DEFAULT_GRID_CAP)
    }

    pub fn with_cap(model: &ModelSpec, k: u32, cap: usize) -> Result<Self, SolverError> {
        if k == 0 {
            return Err(SolverError::BadResolution(k));
        }
        let total: f64 = (0..model.n_obs())
            .map(|y| {
                let d = model.face_states(y).len() as u64;
                binomial(k as u64 + d - 1, d - 1)
            })
            .sum();
        if total > cap as f64 {
            return Err(SolverError::GridTooLarge {
                vertices: total,
                cap,
            });
        }
        let mut grid = BeliefGrid {
            k,
            n_states: model.n_states(),
            faces: Vec::with_capacity(model.n_obs()),
            vertex_face: Vec::new(),
            counts: Vec::new(),
            beliefs: Vec::new(),
        };
        for y in 0..model.n_obs() {
            let states = model.face_states(y).to_vec();
            let mut comps = Vec::new();
            compositions(k, states.len(), &mut Vec::new(), &mut comps);
            let offset = grid.counts.len();
            let mut index = HashMap::with_capacity(comps.len());
            for (i, c) in comps.into_iter().enumerate() {
                let mut weights = vec![0.0; model.n_states()];
                for (&x, &n) in states.iter().zip(&c) {
                    weights[x] = n as f64 / k as f64;
                }
                grid.beliefs.push(Belief::new(model, y, weights)?);
                grid.vertex_face.push(y);
                index.insert(c.clone(), offset + i);
                grid.counts.push(c);
            }
            grid.faces.push(FaceGrid {
                states,
                offset,
                count: grid.counts.len() - offset,
                index,
            });
        }
        Ok(grid)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn face_of(&self, v: usize) -> usize {
        self.vertex_face[v]
    }

    pub fn vertices_on_face(&self, y: usize) -> Range<usize> {
        let f = &self.faces[y];
        f.offset..f.offset + f.count
    }

    pub fn belief(&self, v: usize) -> &Belief {
        &self.beliefs[v]
    }

    /// Composition of vertex `v` as counts per state (zero off the face).
    pub fn full_counts(&self, v: usize) -> Vec<u32> {
        let mut out = vec![0; self.n_states];
        let f = &self.faces[self.vertex_face[v]];
        for (&x, &n) in f.states.iter().zip(&self.counts[v]) {
            out[x] = n;
        }
        out
    }

    /// Vertex of a belief lying exactly on the grid.
    pub fn vertex_of(&self, face: usize, weights: &[f64]) -> Option<usize> {
        let f = &self.faces[face];
        let k = self.k as f64;
        let mut comp = Vec::with_capacity(f.states.len());
        for &x in &f.states {
            let n = weights[x] * k;
            let r = n.round();
            if (n - r).abs() > 1e-9 {
                return None;
            }
            comp.push(r as u32);
        }
        f.index.get(&comp).copied()
    }

    /// Barycentric weights of `weights` (a belief on `face`) with respect to
    /// the vertices of its Freudenthal simplex; zero weights are dropped.
    pub fn interpolation(&self, face: usize, weights: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.faces[face].states.len());
        self.interpolation_into(face, weights, &mut out);
        out
    }

    pub(crate) fn interpolation_into(&self, face: usize, weights: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let f = &self.faces[face];
        let d = f.states.len();
        if d == 1 {
            out.push((f.offset, 1.0));
            return;
        }
        let k = self.k as f64;
        // cumulative coordinates x_i = k * sum_{j >= i} b_j, with x_0 = k
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for i in (1..d).rev() {
            acc += weights[f.states[i]];
            x[i] = acc * k;
        }
        x[0] = k;
        for i in 1..d {
            let r = x[i].round();
            if (x[i] - r).abs() <= 1e-10 * k.max(1.0) {
                x[i] = r;
            }
            x[i] = x[i].clamp(0.0, x[i - 1]);
        }
        let base: Vec<u32> = x.iter().map(|v| v.floor() as u32).collect();
        let frac: Vec<f64> = x.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (1..d).collect();
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));

        let mut vertex = base.clone();
        let mut comp = vec![0u32; d];
        let mut push = |vertex: &[u32], w: f64, out: &mut Vec<(usize, f64)>| {
            if w <= 0.0 {
                return;
            }
            for i in 0..d {
                let next = if i + 1 < d { vertex[i + 1] } else { 0 };
                comp[i] = vertex[i] - next;
            }
            let id = *f.index.get(&comp[..]).expect("Freudenthal vertex lies on the grid");
            out.push((id, w));
        };
        push(&vertex, 1.0 - frac[order[0]], out);
        for m in 1..d {
            vertex[order[m - 1]] += 1;
            let next = if m < d - 1 { frac[order[m]] } else { 0.0 };
            push(&vertex, frac[order[m - 1]] - next, out);
        }
    }

    pub fn interpolate(&self, values: &[f64], belief: &Belief) -> f64 {
        self.interpolation(belief.face(), belief.weights())
            .into_iter()
            .map(|(v, w)| w * values[v])
            .sum()
    }

    /// Vertex with the largest barycentric weight (first one on ties).
    pub fn nearest_vertex(&self, face: usize, weights: &[f64]) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (v, w) in self.interpolation(face, weights) {
            if w > best.1 {
                best = (v, w);
            }
        }
        best.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::m1;

    #[test]
    fn m1_vertex_counts() {
        let m = m1();
        let g = BeliefGrid::new(&m, 4).unwrap();
        assert_eq!(g.vertices_on_face(0).len(), 5);
        assert_eq!(g.vertices_on_face(1).len(), 1);
        let g1 = BeliefGrid::new(&m, 1).unwrap();
        assert_eq!(g1.len(), 3);
        assert!(matches!(BeliefGrid::new(&m, 0), Err(SolverError::BadResolution(0))));
        assert!(matches!(
            BeliefGrid::with_cap(&m, 100, 50),
            Err(SolverError::GridTooLarge { .. })
        ));
    }

    #[test]
    fn vertices_interpolate_exactly() {
        let m = m1();
        let g = BeliefGrid::new(&m, 16).unwrap();
        for v in 0..g.len() {
            let b = g.belief(v);
            assert_eq!(g.interpolation(b.face(), b.weights()), vec![(v, 1.0)]);
            assert_eq!(g.vertex_of(b.face(), b.weights()), Some(v));
            assert_eq!(g.nearest_vertex(b.face(), b.weights()), v);
        }
    }

    #[test]
    fn interpolation_on_a_segment() {
        let m = m1();
        let g = BeliefGrid::new(&m, 4).unwrap();
        let b = Belief::new(&m, 0, vec![0.6, 0.4, 0.0]).unwrap();
        let iw = g.interpolation(0, b.weights());
        assert_eq!(iw.len(), 2);
        let sum: f64 = iw.iter().map(|p| p.1).sum();
        assert!((sum - 1.0).abs() < 1e-15);
        let mut mean = [0.0; 3];
        for &(v, w) in &iw {
            for (i, x) in g.belief(v).weights().iter().enumerate() {
                mean[i] += w * x;
            }
        }
        assert!((mean[0] - 0.6).abs() < 1e-14 && (mean[1] - 0.4).abs() < 1e-14);
    }
}
