//! Order-independent reductions and Kolmogorov–Smirnov statistics.

/// Pairwise (cascade) summation; the grouping depends only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Asymptotic Kolmogorov critical coefficient `c(alpha) = sqrt(-ln(alpha/2)/2)`;
/// 1.628 at `alpha = 0.01`.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

pub fn ks_critical_one_sample(n: usize, alpha: f64) -> f64 {
    ks_coefficient(alpha) / (n as f64).sqrt()
}

pub fn ks_critical_two_sample(n: usize, m: usize, alpha: f64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    ks_coefficient(alpha) * ((n + m) / (n * m)).sqrt()
}

/// One-sample statistic `sup |F_n - F|` given sorted samples and the model
/// CDF evaluated at each of them.
pub fn ks_one_sample(cdf_at_sorted: &[f64]) -> f64 {
    let n = cdf_at_sorted.len() as f64;
    cdf_at_sorted
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let hi = (i + 1) as f64 / n - f;
            let lo = f - i as f64 / n;
            hi.max(lo)
        })
        .fold(0.0, f64::max)
}

/// Two-sample statistic `sup |F_n - G_m|`; inputs must be sorted.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail probability `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Half-width of a `z`-sigma band for the difference of two binomial
/// proportions under the pooled estimate.
pub fn proportion_band(hits_a: usize, n_a: usize, hits_b: usize, n_b: usize, z: f64) -> f64 {
    let p = (hits_a + hits_b) as f64 / (n_a + n_b) as f64;
    z * (p * (1.0 - p) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt()
}

pub fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), 249750.0);
        let (m, se) = mean_stderr(&[1.0, 1.0, 1.0]);
        assert_eq!((m, se), (1.0, 0.0));
    }

    #[test]
    fn ks_coefficients() {
        assert!((ks_coefficient(0.01) - 1.6276).abs() < 1e-4);
        assert!((kolmogorov_tail(ks_coefficient(0.01)) - 0.01).abs() < 1e-6);
        assert!((kolmogorov_tail(ks_coefficient(0.05)) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn one_sample_statistic_by_hand() {
        // uniform CDF at 0.1, 0.4, 0.9
        let d = ks_one_sample(&[0.1, 0.4, 0.9]);
        assert!((d - (2.0f64 / 3.0 - 0.4).max(0.4 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn two_sample_statistic_by_hand() {
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert_eq!(ks_two_sample(&[1.0, 3.0], &[1.0, 3.0]), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[2.5]), 0.5);
    }
}
