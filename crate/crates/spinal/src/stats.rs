//! Monte-Carlo statistics and the replica worker pool.
//!
//! Replicas are embarrassingly parallel: each one derives its own RNG stream
//! from `(seed, experiment, replica)`, results are collected in replica order
//! and reduced with compensated summation, so reports do not depend on how
//! work was scheduled. The `SPINAL_THREADS` environment variable caps the
//! pool size.

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    let var = ss / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Standard error recomputed from `b` batch means; agrees with [`mean_se`]
/// for iid replicas up to sampling noise, and is used as a consistency check
/// on reported errors.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let b = batches.max(2).min(values.len());
    let per = values.len() / b;
    if per == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|i| {
            let chunk = &values[i * per..(i + 1) * per];
            compensated_sum(chunk.iter().copied()) / per as f64
        })
        .collect();
    let (_, se_of_batch_mean) = mean_se(&means);
    se_of_batch_mean
}

/// Least-squares slope of `y` against `x`.
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (xi, yi) in x.iter().zip(y.iter()) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("SPINAL_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool")
    })
}

/// Run `f` for replicas `0..n`, returning results in replica order.
#[cfg(feature = "parallel")]
pub fn par_map_replicas<T: Send>(n: u64, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_replicas<T: Send>(n: u64, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_of_constant_sample_is_exact() {
        let vals = vec![2.5; 100];
        let (m, se) = mean_se(&vals);
        assert_eq!(m, 2.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn batch_means_agree_on_iid_noise() {
        use rand::Rng;
        let mut rng = crate::rng::replica_rng(1, 99, 0);
        let vals: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let (_, se) = mean_se(&vals);
        let bse = batch_means_se(&vals, 100);
        assert!((se - bse).abs() / se < 0.25, "se {se} vs batch {bse}");
    }

    #[test]
    fn slope_recovers_linear_data() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert!((regression_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
