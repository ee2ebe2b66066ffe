//! Closed-form answers for V(x) = x²/2 from the spectrum of the torus Laplacian.

use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

/// Eigenvalues `λ_k = Σ_j 2(1 - cos(2π k_j / (2L+1)))`, `k ∈ {0..2L}^d`.
#[derive(Debug, Clone)]
pub struct SpectrumTable {
    pub d: usize,
    pub l: usize,
    /// One-dimensional eigenvalues, indexed by k in 0..2L+1.
    pub one_dim: Vec<f64>,
    /// The d-dimensional spectrum as (value, multiplicity) pairs, grouped by
    /// the symmetry k ↔ 2L+1-k in each coordinate and sorted ascending; the
    /// zero mode comes first. Equal values may appear in several groups.
    pub levels: Vec<(f64, usize)>,
}

impl SpectrumTable {
    pub fn new(d: usize, l: usize) -> Result<Self> {
        if d == 0 || l == 0 {
            return Err(Error::invalid("torus", "d and L must be at least 1"));
        }
        let n = 2 * l + 1;
        let one_dim: Vec<f64> = (0..n)
            .map(|k| {
                let s = (std::f64::consts::PI * k as f64 / n as f64).sin();
                // 2(1 - cos 2θ) = 4 sin²θ, exact zero at k = 0
                4.0 * s * s
            })
            .collect();
        // multiplicities of 1-d values: k and n-k coincide
        let mut base: Vec<(usize, usize)> = vec![(0, 1)];
        for k in 1..=l {
            base.push((k, 2));
        }
        // every tuple of classes, one per axis
        let mut levels: Vec<(f64, usize)> = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let mut value = 0.0;
            let mut mult = 1usize;
            for &i in &idx {
                value += one_dim[base[i].0];
                mult *= base[i].1;
            }
            levels.push((value, mult));
            let mut j = 0;
            loop {
                if j == d {
                    levels.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    return Ok(SpectrumTable {
                        d,
                        l,
                        one_dim,
                        levels,
                    });
                }
                idx[j] += 1;
                if idx[j] < base.len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }

    pub fn vertex_count(&self) -> usize {
        (2 * self.l + 1).pow(self.d as u32)
    }

    /// `Σ_k λ_k`, which equals `2d·|T_L|`.
    pub fn trace(&self) -> f64 {
        let terms: Vec<f64> = self.levels.iter().map(|&(v, m)| v * m as f64).collect();
        pairwise_sum(&terms)
    }

    fn nonzero_sum(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .levels
            .iter()
            .skip(1)
            .map(|&(v, m)| f(v) * m as f64)
            .collect();
        pairwise_sum(&terms) / self.vertex_count() as f64
    }

    pub fn variance(&self) -> f64 {
        self.nonzero_sum(|v| 1.0 / v)
    }

    pub fn heat_kernel(&self, t: f64) -> f64 {
        self.nonzero_sum(|v| (-v * t).exp())
    }

    /// `∫_t^∞ P(s,0) ds`.
    pub fn heat_kernel_tail_integral(&self, t: f64) -> f64 {
        self.nonzero_sum(|v| (-v * t).exp() / v)
    }
}

/// `Var[φ(0)] = |T_L|^{-1} Σ_{k≠0} 1/λ_k` for the mean-zero Gaussian field.
pub fn gaussian_variance(d: usize, l: usize) -> Result<f64> {
    Ok(SpectrumTable::new(d, l)?.variance())
}

/// `P(t,0) = |T_L|^{-1} Σ_{k≠0} exp(-λ_k t)` for the constant environment.
pub fn gaussian_heat_kernel(d: usize, l: usize, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid("t", "time must be nonnegative"));
    }
    Ok(SpectrumTable::new(d, l)?.heat_kernel(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_tori() {
        assert!((gaussian_variance(1, 1).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert!((gaussian_variance(2, 1).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        let s = SpectrumTable::new(2, 1).unwrap();
        assert_eq!(s.levels[0], (0.0, 1));
        assert_eq!(s.levels.iter().map(|l| l.1).sum::<usize>(), 9);
    }

    #[test]
    fn trace_identity() {
        for (d, l) in [(1, 5), (2, 7), (3, 4)] {
            let s = SpectrumTable::new(d, l).unwrap();
            let expected = 2.0 * d as f64 * s.vertex_count() as f64;
            assert!((s.trace() - expected).abs() <= 1e-9 * expected);
        }
    }

    #[test]
    fn heat_kernel_values() {
        assert!((gaussian_heat_kernel(1, 1, 0.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let expected = 2.0 / 3.0 * (-3.0f64).exp();
        assert!((gaussian_heat_kernel(1, 1, 1.0).unwrap() - expected).abs() < 1e-15);
        let s = SpectrumTable::new(2, 3).unwrap();
        assert!((s.heat_kernel_tail_integral(0.0) - s.variance()).abs() < 1e-14);
    }
}
