//! Random valid models and beliefs for property checks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;

use crate::model::{validate_model, Belief, ModelSpec, RawModel};
use crate::rng::{stream, PathRng};

/// A model with 3 to 6 states, 2 or 3 labels, 1 to 3 controls, rates drawn
/// from `[0, 5]` (a fifth of them zero) and a valid observation map.
pub fn random_model(rng: &mut PathRng) -> ModelSpec {
    let n = rng.random_range(3..=6usize);
    let n_obs = rng.random_range(2..=3.min(n - 1));
    let n_u = rng.random_range(1..=3usize);
    let mut h: Vec<usize> = (0..n)
        .map(|i| if i < n_obs { i } else { rng.random_range(0..n_obs) })
        .collect();
    h.shuffle(rng);
    let lambda = (0..n)
        .map(|x| {
            (0..n_u)
                .map(|_| {
                    (0..n)
                        .map(|z| {
                            if z == x || rng.random::<f64>() < 0.2 {
                                0.0
                            } else {
                                rng.random_range(0.0..=5.0)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let f = (0..n)
        .map(|_| (0..n_u).map(|_| rng.random_range(0.0..3.0)).collect())
        .collect();
    let raw = RawModel {
        states: (0..n).map(|i| format!("s{i}")).collect(),
        obs: (0..n_obs).map(|i| format!("o{i}")).collect(),
        h: h.iter().map(|y| format!("o{y}")).collect(),
        controls: (0..n_u).map(|i| format!("u{i}")).collect(),
        lambda,
        f,
        beta: rng.random_range(0.5..2.0),
    };
    validate_model(&raw).expect("generated model is valid")
}

/// `count` models from streams `(seed, 0..count)`.
pub fn random_models(seed: u64, count: usize) -> Vec<ModelSpec> {
    (0..count).map(|i| random_model(&mut stream(seed, i as u64))).collect()
}

/// Uniform draw from a face, with a quarter of the draws pushed onto a
/// random sub-face to exercise boundary beliefs.
pub fn random_belief(model: &ModelSpec, face: usize, rng: &mut PathRng) -> Belief {
    let states = model.face_states(face);
    let mut raw: Vec<f64> = states.iter().map(|_| rng.sample(Exp1)).collect();
    if states.len() > 1 && rng.random::<f64>() < 0.25 {
        let keep = rng.random_range(0..states.len());
        for (i, r) in raw.iter_mut().enumerate() {
            if i != keep && rng.random::<f64>() < 0.5 {
                *r = 0.0;
            }
        }
    }
    let total: f64 = raw.iter().sum();
    let mut weights = vec![0.0; model.n_states()];
    for (&x, r) in states.iter().zip(&raw) {
        weights[x] = r / total;
    }
    Belief::new(model, face, weights).expect("normalized draw is a belief")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_models_are_in_range() {
        for m in random_models(5, 50) {
            assert!((3..=6).contains(&m.n_states()));
            assert!((2..=3).contains(&m.n_obs()));
            assert!((1..=3).contains(&m.n_controls()));
            for x in 0..m.n_states() {
                for u in 0..m.n_controls() {
                    assert!(m.rates_from(x, u).iter().all(|r| (0.0..=5.0).contains(r)));
                }
            }
        }
    }
}
