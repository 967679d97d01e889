//! Small order statistics shared by the gate and the evaluation reports.

/// Quantile by linear interpolation of the empirical CDF (Hyndman-Fan type 4):
/// the k-th smallest of n values sits at level k/n. Levels below 1/n return
/// the minimum. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = level.clamp(0.0, 1.0) * n as f64;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let k = h.floor() as usize; // 1-based rank
    let frac = h - k as f64;
    sorted[k - 1] + frac * (sorted[k] - sorted[k - 1])
}

pub fn quantile(values: &[f64], level: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, level)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
