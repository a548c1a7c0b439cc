use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use jumpfilter::control::ControlPath;
use jumpfilter::filter::{flow, vector_field};
use jumpfilter::model::belief_violation;
use jumpfilter::rng::stream;
use jumpfilter::verify::{random_belief, random_model};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The vector field is tangent to the face simplex.
    #[test]
    fn vector_field_is_tangent(seed in any::<u64>()) {
        let mut rng = stream(seed, 0);
        let m = random_model(&mut rng);
        for y in 0..m.n_obs() {
            let nu = random_belief(&m, y, &mut rng);
            for u in 0..m.n_controls() {
                let f = vector_field(&m, &nu, u).0;
                assert_abs_diff_eq!(f.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
                for x in 0..m.n_states() {
                    if !m.face_states(y).contains(&x) {
                        prop_assert_eq!(f[x], 0.0);
                    }
                }
            }
        }
    }

    /// Flowed beliefs stay valid beliefs on the start face.
    #[test]
    fn flow_stays_on_face(seed in any::<u64>(), t in 0.0f64..3.0) {
        let mut rng = stream(seed, 1);
        let m = random_model(&mut rng);
        let y = (seed % m.n_obs() as u64) as usize;
        let nu = random_belief(&m, y, &mut rng);
        let u = (seed % m.n_controls() as u64) as usize;
        let out = flow(&m, &nu, &ControlPath::constant(u), t).unwrap();
        prop_assert_eq!(out.face(), y);
        prop_assert!(belief_violation(&m, y, out.weights()).is_none());
    }

    /// Flowing for s then t equals flowing for s + t under a constant control.
    #[test]
    fn flow_is_a_semigroup(seed in any::<u64>(), s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let mut rng = stream(seed, 2);
        let m = random_model(&mut rng);
        let nu = random_belief(&m, 0, &mut rng);
        let path = ControlPath::constant(0);
        let two = flow(&m, &flow(&m, &nu, &path, s).unwrap(), &path, t).unwrap();
        let one = flow(&m, &nu, &path, s + t).unwrap();
        let tv: f64 = two.weights().iter().zip(one.weights()).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(tv <= 1e-9, "tv {}", tv);
    }
}
