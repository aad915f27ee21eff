//! Small numeric helpers shared by the estimators.

/// Pairwise summation; the result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and its standard error (sample sd / sqrt(n)).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Trapezoidal weights for a uniform grid with `points` nodes and spacing `dt`.
pub fn trapezoid_weights(points: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; points];
    if points >= 1 {
        w[0] = 0.5 * dt;
        w[points - 1] = 0.5 * dt;
    }
    if points == 1 {
        w[0] = 0.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        let (m, se) = mean_and_se(&[2.0; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let w = trapezoid_weights(11, 0.1);
        let s: f64 = w.iter().enumerate().map(|(i, w)| w * (i as f64 * 0.1)).sum();
        assert!((s - 0.5).abs() < 1e-14);
    }
}
