//! Small numerical helpers shared by the estimators.

/// Pairwise summation; error grows like log n instead of n.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 128;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&dev) / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares y = slope * x + intercept.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    LinearFit {
        slope,
        intercept,
        r2,
        slope_stderr,
    }
}

/// Batch means of a series split into `batches` equal contiguous blocks.
/// A trailing remainder shorter than a block is dropped.
pub fn batch_means(xs: &[f64], batches: usize) -> Vec<f64> {
    let size = xs.len() / batches;
    if size == 0 {
        return Vec::new();
    }
    xs.chunks_exact(size).take(batches).map(mean).collect()
}

/// Mean and standard error from independent batch means.
pub fn mean_and_stderr(batch: &[f64]) -> (f64, f64) {
    let m = mean(batch);
    if batch.len() < 2 {
        return (m, f64::NAN);
    }
    (m, (sample_variance(batch) / batch.len() as f64).sqrt())
}

/// Linear-interpolated quantile of sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - i as f64;
    sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
}

/// Integrated autocorrelation time with Sokal's automatic window (c = 6).
pub fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 0.5;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for lag in 1..n / 2 {
        let c: f64 = (0..n - lag)
            .map(|i| (xs[i] - m) * (xs[i + lag] - m))
            .sum::<f64>()
            / n as f64;
        tau += c / c0;
        if lag as f64 >= 6.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}
