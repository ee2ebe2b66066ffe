//! Weight kernels `k`, `K`, the moderated environment `w` and the maximal
//! quantities built from it.
//!
//! All temporal integrals against `k` or `K` use product integration: the
//! other factor is interpolated linearly between grid nodes and the kernel
//! moments on each interval are taken in closed form. For a constant factor
//! this is exact.

use crate::dynamics::EnvironmentTrajectory;
use crate::error::{Error, Result};
use crate::inequalities::ExponentTable;
use crate::lattice::{norm_over, Exponent, Torus};
use crate::quad;
use crate::stats::linear_fit;

/// `∫_a^b (1+u)^{-m} du` for `m > 1`, accurate when `b - a` is small.
fn power_integral(m: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if b.is_infinite() {
        return (1.0 + a).powf(1.0 - m) / (m - 1.0);
    }
    let ratio = ((b - a) / (1.0 + a)).ln_1p();
    (1.0 + a).powf(1.0 - m) * -((1.0 - m) * ratio).exp_m1() / (m - 1.0)
}

/// `∫_a^b u (1+u)^{-m} du` for `m > 2`.
fn power_moment(m: f64, a: f64, b: f64) -> f64 {
    power_integral(m - 1.0, a, b) - power_integral(m, a, b)
}

/// Kernels `k_t = δ(1+t)^{-(p+3)}` and `K_t = k_t + ∫_t^∞ s k_s ds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModerationWeights {
    pub p: f64,
    pub delta: f64,
}

/// `(coefficient, exponent)` pairs with `K_t / δ = Σ c (1+t)^{-m}`.
fn big_k_terms(p: f64) -> [(f64, f64); 3] {
    [
        (1.0, p + 3.0),
        (1.0 / (p + 1.0), p + 1.0),
        (-1.0 / (p + 2.0), p + 2.0),
    ]
}

impl ModerationWeights {
    pub fn new(p: f64, delta: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::invalid(
                "moderation.p",
                format!("must exceed 1, got {p}"),
            ));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(
                "moderation.delta",
                format!("must be positive, got {delta}"),
            ));
        }
        Ok(ModerationWeights { p, delta })
    }

    /// Calibrated weights for dimension `d` and exponent `p`.
    pub fn calibrated(d: usize, p: f64) -> Result<Self> {
        Ok(ModerationWeights {
            p,
            delta: calibrate_delta(d, p)?,
        })
    }

    pub fn k(&self, t: f64) -> f64 {
        self.delta * (1.0 + t).powf(-(self.p + 3.0))
    }

    pub fn big_k(&self, t: f64) -> f64 {
        self.delta * unit_big_k(self.p, t)
    }

    /// `(∫_a^b k, ∫_a^b u k(u) du)`.
    pub fn k_moments(&self, a: f64, b: f64) -> (f64, f64) {
        let m = self.p + 3.0;
        (
            self.delta * power_integral(m, a, b),
            self.delta * power_moment(m, a, b),
        )
    }

    /// `(∫_a^b K, ∫_a^b u K(u) du)`.
    pub fn big_k_moments(&self, a: f64, b: f64) -> (f64, f64) {
        let (mut m0, mut m1) = (0.0, 0.0);
        for (c, m) in big_k_terms(self.p) {
            m0 += c * power_integral(m, a, b);
            m1 += c * power_moment(m, a, b);
        }
        (self.delta * m0, self.delta * m1)
    }

    pub fn k_tail(&self, a: f64) -> f64 {
        self.delta * power_integral(self.p + 3.0, a, f64::INFINITY)
    }

    pub fn big_k_tail(&self, a: f64) -> f64 {
        let s: f64 = big_k_terms(self.p)
            .iter()
            .map(|&(c, m)| c * power_integral(m, a, f64::INFINITY))
            .sum();
        self.delta * s
    }

    /// `∫_0^∞ k = δ/(p+2)`.
    pub fn total_k(&self) -> f64 {
        self.delta / (self.p + 2.0)
    }

    pub fn total_big_k(&self) -> f64 {
        self.big_k_tail(0.0)
    }
}

fn unit_big_k(p: f64, t: f64) -> f64 {
    let x = 1.0 + t;
    x.powf(-(p + 3.0)) + x.powf(-(p + 1.0)) / (p + 1.0) - x.powf(-(p + 2.0)) / (p + 2.0)
}

/// Product-integration weights for `∫_{u0}^{u1} w(u) f(u) du` with `f`
/// linear between `f(u0)` and `f(u1)`, given the kernel moments.
#[inline]
fn linear_weights(u0: f64, u1: f64, (m0, m1): (f64, f64)) -> (f64, f64) {
    let slope_part = (m1 - u0 * m0) / (u1 - u0);
    (m0 - slope_part, slope_part)
}

/// `(K*K)(u) = ∫_0^u K_v K_{u-v} dv` at `δ = 1`, by adaptive quadrature.
fn unit_convolution(p: f64, u: f64, rel_tol: f64) -> Result<f64> {
    let half = quad::integrate(
        |v| unit_big_k(p, v) * unit_big_k(p, u - v),
        0.0,
        0.5 * u,
        rel_tol,
        0.0,
    )?;
    Ok(2.0 * half)
}

/// `(K*K)(u)` at `δ = 1` by fixed Gauss rules on geometrically graded panels.
fn unit_convolution_graded(p: f64, u: f64) -> f64 {
    let b = 0.5 * u;
    let mut edges = vec![0.0];
    let mut x = (b * 1e-9).max(1e-12);
    while x < b {
        edges.push(x);
        x *= 1.2;
    }
    edges.push(b);
    let f = |v: f64| unit_big_k(p, v) * unit_big_k(p, u - v);
    2.0 * edges
        .windows(2)
        .map(|w| quad::gauss7(&f, w[0], w[1]))
        .sum::<f64>()
}

fn log_grid(lo: f64, hi: f64, per_decade: usize, offset: f64) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round() as usize;
    (0..=n)
        .map(|i| lo * 10f64.powf((i as f64 + offset) / per_decade as f64))
        .filter(|&u| u <= hi)
        .collect()
}

/// Safety margin applied to the calibrated bound.
pub const CALIBRATION_MARGIN: f64 = 1.1;

/// Largest `δ = 2^{-k}` such that `∫K ≤ 1` and `K*K ≤ K` hold with a 10%
/// margin on a log grid of lags in `[1e-3, 1e4]`.
pub fn calibrate_delta(d: usize, p: f64) -> Result<f64> {
    if !(p > d as f64) {
        return Err(Error::invalid(
            "moderation.p",
            format!("must exceed d = {d}, got {p}"),
        ));
    }
    let integral_bound = 1.0 / unit_big_k_integral(p)?;
    let mut conv_bound = f64::INFINITY;
    for u in log_grid(1e-3, 1e4, 20, 0.0) {
        let c = unit_convolution(p, u, 1e-8)?;
        conv_bound = conv_bound.min(unit_big_k(p, u) / c);
    }
    let bound = integral_bound.min(conv_bound) / CALIBRATION_MARGIN;
    let k = (-bound.log2()).ceil();
    let delta = 2f64.powf(-k);
    if !(delta >= 2f64.powi(-60)) {
        return Err(Error::Calibration);
    }
    Ok(delta)
}

fn unit_big_k_integral(p: f64) -> Result<f64> {
    quad::integrate_to_infinity(|t| unit_big_k(p, t), 0.0, 1e-12, 0.0)
}

/// Outcome of re-checking the kernel properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KVerdict {
    pub pass: bool,
    /// `1 - ∫K`.
    pub integral_margin: f64,
    /// `min_u (K_u - (K*K)_u) / K_u` over the check grid.
    pub convolution_margin: f64,
    /// Lag `s' - t` where the convolution margin is smallest; reported as `(t, s') = (0, lag)`.
    pub worst_lag: f64,
}

/// Re-verify both kernel properties on a grid that interleaves the
/// calibration grid, with a different quadrature.
pub fn check_k_properties(weights: &ModerationWeights) -> Result<KVerdict> {
    let p = weights.p;
    let integral = weights.delta * unit_big_k_integral(p)?;
    let mut worst = (f64::INFINITY, f64::NAN);
    for u in log_grid(1e-3, 1e4, 100, 0.37) {
        let k = unit_big_k(p, u);
        let margin = (k - weights.delta * unit_convolution_graded(p, u)) / k;
        if margin < worst.0 {
            worst = (margin, u);
        }
    }
    let integral_margin = 1.0 - integral;
    Ok(KVerdict {
        pass: integral_margin >= 0.0 && worst.0 >= 0.0,
        integral_margin,
        convolution_margin: worst.0,
        worst_lag: worst.1,
    })
}

/// Which definition of the moderated environment to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// `w² = ∫ k_{s-t} (a∧1) / ((s-t)^{-1} Σ_{e'} ∫_t^s a∨1) ds`.
    #[default]
    Body,
    /// `w = ∫ a(s,e) (1+s-t)^{-4} ds`, kept for comparison.
    Sketch,
}

/// Moderated environment at one `(t, e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeratedValue {
    pub w: f64,
    /// Upper bound on the part of `w²` (body) or `w` (sketch) beyond the horizon.
    pub truncation_bound: f64,
}

/// Precomputed sums for evaluating `w` at many `(t, e)` on one trajectory.
pub struct ModerationContext<'a> {
    torus: &'a Torus,
    traj: &'a EnvironmentTrajectory,
    weights: ModerationWeights,
    /// Node-major `Σ_{e' ∩ e ≠ ∅} a(t_j, e') ∨ 1`.
    closure_sum: Vec<f64>,
    /// Node-major trapezoid primitive of `closure_sum`.
    primitive: Vec<f64>,
}

impl<'a> ModerationContext<'a> {
    pub fn new(
        torus: &'a Torus,
        traj: &'a EnvironmentTrajectory,
        weights: ModerationWeights,
    ) -> Result<Self> {
        if traj.edge_count != torus.edge_count() {
            return Err(Error::invalid(
                "trajectory",
                "edge count does not match the torus",
            ));
        }
        let m = torus.edge_count();
        let nodes = traj.node_count();
        let mut closure_sum = vec![0.0; nodes * m];
        for k in 0..nodes {
            let a = traj.node(k);
            for e in 0..m {
                closure_sum[k * m + e] = torus.closure(e).iter().map(|&f| a[f].max(1.0)).sum();
            }
        }
        let mut primitive = vec![0.0; nodes * m];
        for k in 1..nodes {
            for e in 0..m {
                primitive[k * m + e] = primitive[(k - 1) * m + e]
                    + 0.5 * traj.dt * (closure_sum[(k - 1) * m + e] + closure_sum[k * m + e]);
            }
        }
        Ok(ModerationContext {
            torus,
            traj,
            weights,
            closure_sum,
            primitive,
        })
    }

    pub fn weights(&self) -> &ModerationWeights {
        &self.weights
    }

    /// Analytic bound on the body `w²` beyond a horizon `h`: the integrand
    /// factor never exceeds `1/(4d-1)`.
    pub fn truncation_bound(&self, h: f64) -> f64 {
        self.weights.k_tail(h) / (4 * self.torus.d() - 1) as f64
    }

    /// Kernel weights for `n` grid intervals starting at lag 0.
    fn kernel_weights(&self, n: usize, variant: Variant) -> Vec<(f64, f64)> {
        let h = self.traj.dt;
        (0..n)
            .map(|j| {
                let (u0, u1) = (j as f64 * h, (j + 1) as f64 * h);
                let moments = match variant {
                    Variant::Body => self.weights.k_moments(u0, u1),
                    Variant::Sketch => (power_integral(4.0, u0, u1), power_moment(4.0, u0, u1)),
                };
                linear_weights(u0, u1, moments)
            })
            .collect()
    }

    fn check_window(&self, k0: usize, n: usize) -> Result<()> {
        if n == 0 || k0 + n >= self.traj.node_count() {
            return Err(Error::OutsideHorizon {
                t: (k0 + n) as f64 * self.traj.dt,
                horizon: self.traj.horizon(),
            });
        }
        Ok(())
    }

    /// Body `w²` at node `k0` and edge `e` with `n` grid intervals of horizon.
    fn w2_with(&self, k0: usize, e: usize, kw: &[(f64, f64)]) -> f64 {
        let m = self.torus.edge_count();
        let h = self.traj.dt;
        let factor = |j: usize| {
            let k = k0 + j;
            let cap = self.traj.at(k, e).min(1.0);
            if j == 0 {
                cap / self.closure_sum[k0 * m + e]
            } else {
                cap * (j as f64 * h) / (self.primitive[k * m + e] - self.primitive[k0 * m + e])
            }
        };
        let mut total = 0.0;
        let mut left = factor(0);
        for (j, &(wl, wr)) in kw.iter().enumerate() {
            let right = factor(j + 1);
            total += wl * left + wr * right;
            left = right;
        }
        total
    }

    fn sketch_with(&self, k0: usize, e: usize, kw: &[(f64, f64)]) -> f64 {
        kw.iter()
            .enumerate()
            .map(|(j, &(wl, wr))| wl * self.traj.at(k0 + j, e) + wr * self.traj.at(k0 + j + 1, e))
            .sum()
    }

    /// `w(t_{k0}, e)` with a horizon of `n` grid intervals.
    pub fn value(&self, k0: usize, e: usize, n: usize, variant: Variant) -> Result<ModeratedValue> {
        self.check_window(k0, n)?;
        let kw = self.kernel_weights(n, variant);
        Ok(self.evaluate(k0, e, n, variant, &kw))
    }

    fn evaluate(
        &self,
        k0: usize,
        e: usize,
        n: usize,
        variant: Variant,
        kw: &[(f64, f64)],
    ) -> ModeratedValue {
        let horizon = n as f64 * self.traj.dt;
        match variant {
            Variant::Body => {
                let w2 = self.w2_with(k0, e, kw);
                ModeratedValue {
                    w: w2.max(0.0).sqrt(),
                    truncation_bound: self.truncation_bound(horizon),
                }
            }
            Variant::Sketch => {
                let sup = (k0..=k0 + n)
                    .map(|k| self.traj.at(k, e))
                    .fold(0.0, f64::max);
                ModeratedValue {
                    w: self.sketch_with(k0, e, kw),
                    truncation_bound: sup * power_integral(4.0, horizon, f64::INFINITY),
                }
            }
        }
    }

    /// `w(t_{k0}, ·)` on every edge.
    pub fn field(&self, k0: usize, n: usize, variant: Variant) -> Result<Vec<f64>> {
        self.check_window(k0, n)?;
        let kw = self.kernel_weights(n, variant);
        Ok((0..self.torus.edge_count())
            .map(|e| self.evaluate(k0, e, n, variant, &kw).w)
            .collect())
    }

    /// `w` fields at nodes `start, start + stride, ...` while the horizon fits.
    pub fn fields(
        &self,
        start: usize,
        stride: usize,
        n: usize,
        variant: Variant,
    ) -> Result<WField> {
        let stride = stride.max(1);
        let kw = self.kernel_weights(n, variant);
        let mut values = Vec::new();
        let mut k = start;
        while k + n < self.traj.node_count() {
            values.push(
                (0..self.torus.edge_count())
                    .map(|e| self.evaluate(k, e, n, variant, &kw).w)
                    .collect(),
            );
            k += stride;
        }
        if values.is_empty() {
            self.check_window(start, n)?;
        }
        Ok(WField {
            start,
            stride,
            values,
        })
    }
}

/// `w(t, e)` for one `(t, e)`, with the horizon checked against `tol`.
///
/// The call fails when the analytic tail bound exceeds `tol` times the
/// computed value; an exactly vanishing value is returned with its bound.
pub fn moderated_environment(
    torus: &Torus,
    traj: &EnvironmentTrajectory,
    t: f64,
    e: usize,
    horizon: f64,
    weights: &ModerationWeights,
    tol: f64,
) -> Result<ModeratedValue> {
    let k0 = traj.node_index(t)?;
    let n = (horizon / traj.dt).round() as usize;
    let ctx = ModerationContext::new(torus, traj, *weights)?;
    let v = ctx.value(k0, e, n, Variant::Body)?;
    let w2 = v.w * v.w;
    if w2 > 0.0 && v.truncation_bound > tol * w2 {
        return Err(Error::HorizonTooShort {
            bound: v.truncation_bound,
            tolerance: tol * w2,
        });
    }
    Ok(v)
}

/// Moderated environment sampled every `stride` nodes from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct WField {
    pub start: usize,
    pub stride: usize,
    pub values: Vec<Vec<f64>>,
}

impl WField {
    pub fn node(&self, i: usize) -> usize {
        self.start + i * self.stride
    }
}

/// Maximal quantities on the evaluation nodes of a [`WField`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaximalDiagnostics {
    /// Times relative to the first evaluation node.
    pub times: Vec<f64>,
    pub m_pprime: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub m4: Vec<f64>,
    pub script_m1: f64,
    pub script_m2: f64,
    pub script_m3: f64,
    pub script_m4: f64,
    pub script_m: f64,
    pub script_m_prime: f64,
    pub exponents: ExponentTable,
}

/// Box edge lists and vertex counts for `r = 0..=L`.
pub struct Boxes {
    pub edges: Vec<Vec<usize>>,
    pub vertices: Vec<f64>,
}

impl Boxes {
    pub fn new(torus: &Torus) -> Self {
        let l = torus.l();
        Boxes {
            edges: (0..=l).map(|r| torus.box_edges(r)).collect(),
            vertices: (0..=l)
                .map(|r| ((2 * r + 1) as f64).powi(torus.d() as i32))
                .collect(),
        }
    }
}

/// `M_{p'}` at one time from `w(t, ·)`.
pub fn m_pprime(torus: &Torus, boxes: &Boxes, w: &[f64], table: &ExponentTable) -> f64 {
    let n = torus.vertex_count() as f64;
    let all: Vec<usize> = (0..w.len()).collect();
    let inv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
    let w_sigma = norm_over(w, &all, Exponent::Finite(table.sigma), n);
    let inv_tau = norm_over(&inv, &all, Exponent::Finite(table.tau), n);
    let sup = (1..=torus.l())
        .map(|r| {
            norm_over(
                &inv,
                &boxes.edges[r],
                Exponent::Finite(table.p_prime),
                boxes.vertices[r],
            )
            .powi(2)
        })
        .fold(0.0, f64::max);
    1.0 + (1.0 + w_sigma * inv_tau).powi(2) * sup
}

fn m0_at(torus: &Torus, boxes: &Boxes, a: &[f64], w: &[f64], table: &ExponentTable) -> f64 {
    let sqrt_a: Vec<f64> = a.iter().map(|v| v.max(0.0).sqrt()).collect();
    let inv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
    let sup = (0..=torus.l())
        .map(|r| {
            let s = norm_over(
                &sqrt_a,
                &boxes.edges[r],
                Exponent::Finite(table.sigma),
                boxes.vertices[r],
            )
            .powi(2);
            let t = norm_over(
                &inv,
                &boxes.edges[r],
                Exponent::Finite(table.tau_prime),
                boxes.vertices[r],
            )
            .powi(2);
            s * (1.0 + t)
        })
        .fold(0.0, f64::max);
    1.0 + sup
}

/// `M_2(t) = 1 + sup_x Σ_{e∋x} a(t,e) / |x|_*^{(p-2)/(p-1)}`.
pub fn m2_at(torus: &Torus, a: &[f64], p: f64) -> f64 {
    let q = (p - 2.0) / (p - 1.0);
    let sup = (0..torus.vertex_count())
        .map(|x| {
            let s: f64 = torus
                .outgoing(x)
                .chain(torus.incoming(x))
                .map(|e| a[e])
                .sum();
            s / torus.norm_star(x).powf(q)
        })
        .fold(0.0, f64::max);
    1.0 + sup
}

/// `1 + ∫_{t_i}^∞ K_{s-t_i} g(s) ds` on a uniform grid, with `g` held at its
/// last value beyond the window.
fn k_smoothed_uniform(weights: &ModerationWeights, h: f64, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let kw: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let (u0, u1) = (j as f64 * h, (j + 1) as f64 * h);
            linear_weights(u0, u1, weights.big_k_moments(u0, u1))
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n - 1 - i {
                s += kw[j].0 * g[i + j] + kw[j].1 * g[i + j + 1];
            }
            s + g[n - 1] * weights.big_k_tail((n - 1 - i) as f64 * h)
        })
        .collect()
}

/// Running averages `(1/t) ∫_0^t g` at every node with `t ≥ 1`.
fn running_averages(h: f64, g: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for i in 1..g.len() {
        acc += 0.5 * h * (g[i - 1] + g[i]);
        let t = i as f64 * h;
        if t >= 1.0 - 1e-12 {
            out.push(acc / t);
        }
    }
    out
}

/// Evaluate `M_{p'}, M_0, …, M_4` and the maximal functions over the
/// evaluation nodes of `w`.
pub fn maximal_quantities(
    torus: &Torus,
    traj: &EnvironmentTrajectory,
    w: &WField,
    table: &ExponentTable,
    weights: &ModerationWeights,
) -> Result<MaximalDiagnostics> {
    if w.values.is_empty() {
        return Err(Error::invalid("w", "missing w grid"));
    }
    if w.values.iter().any(|f| f.len() != torus.edge_count()) {
        return Err(Error::invalid("w", "field size does not match the torus"));
    }
    if w.node(w.values.len() - 1) >= traj.node_count() {
        return Err(Error::OutsideHorizon {
            t: w.node(w.values.len() - 1) as f64 * traj.dt,
            horizon: traj.horizon(),
        });
    }
    if w.values.iter().flatten().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("w", "must be positive"));
    }
    let h = traj.dt * w.stride as f64;
    let n = w.values.len();
    if (n - 1) as f64 * h < 1.0 {
        return Err(Error::OutsideHorizon {
            t: 1.0,
            horizon: (n - 1) as f64 * h,
        });
    }
    let boxes = Boxes::new(torus);
    let p = table.p;
    let all: Vec<usize> = (0..torus.edge_count()).collect();
    let nv = torus.vertex_count() as f64;

    let mut m_pp = Vec::with_capacity(n);
    let mut m0 = Vec::with_capacity(n);
    let mut m2 = Vec::with_capacity(n);
    let mut inv_d = Vec::with_capacity(n);
    for (i, wf) in w.values.iter().enumerate() {
        let a = traj.node(w.node(i));
        m_pp.push(m_pprime(torus, &boxes, wf, table));
        m0.push(m0_at(torus, &boxes, a, wf, table));
        m2.push(m2_at(torus, a, p));
        let inv: Vec<f64> = wf.iter().map(|v| 1.0 / v).collect();
        inv_d.push(norm_over(&inv, &all, Exponent::Finite(table.d as f64), nv).powi(2));
    }
    let q1 = p / (2.0 * (1.0 - table.theta_d));
    let g1: Vec<f64> = m0.iter().map(|v| v.powf(q1)).collect();
    let m1: Vec<f64> = k_smoothed_uniform(weights, h, &g1)
        .iter()
        .map(|v| 1.0 + v)
        .collect();
    let g3: Vec<f64> = m_pp
        .iter()
        .map(|v| v.powf(table.alpha / table.beta))
        .collect();
    let m3: Vec<f64> = k_smoothed_uniform(weights, h, &g3)
        .iter()
        .map(|v| 1.0 + v.powf(table.beta))
        .collect();
    let span = (1.0 / h).round() as usize;
    let m4: Vec<f64> = (0..n)
        .map(|i| {
            1.0 + inv_d[i..(i + span + 1).min(n)]
                .iter()
                .fold(0.0f64, |m, &v| m.max(v))
        })
        .collect();

    let sup = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let inf = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
    let script_m1 = sup(running_averages(
        h,
        &m1.iter().map(|v| v.powf(2.0 / p)).collect::<Vec<_>>(),
    ))
    .powf(p / 2.0);
    let script_m2 = sup(running_averages(h, &m2)).powf(p - 1.0);
    let script_m3 = inf(running_averages(
        h,
        &m3.iter()
            .map(|v| v.powf(-1.0 / table.alpha))
            .collect::<Vec<_>>(),
    ))
    .powf(-table.alpha / table.gamma);
    let script_m4 = 1.0
        / inf(running_averages(
            h,
            &m4.iter().map(|v| 1.0 / v).collect::<Vec<_>>(),
        ));
    let (al, be, ga) = (table.alpha, table.beta, table.gamma);
    let script_m = ((script_m1 + script_m2) * script_m3).powf(ga / (1.0 - al - ga));
    let script_m_prime =
        script_m3.powf(2.0 * ga / (table.d as f64 * be + p * ga) + ga / al) * script_m4;
    Ok(MaximalDiagnostics {
        times: (0..n).map(|i| i as f64 * h).collect(),
        m_pprime: m_pp,
        m0,
        m1,
        m2,
        m3,
        m4,
        script_m1,
        script_m2,
        script_m3,
        script_m4,
        script_m,
        script_m_prime,
        exponents: *table,
    })
}

/// `f̄_t = ∫_t^∞ K_{s-t} f_s ds` on an arbitrary increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    /// `f(T) ∫_{T-t}^∞ K`, which dominates the tail for nonincreasing `f`.
    pub truncation_bound: Vec<f64>,
    /// Exponential decay rate fitted to the last decile of the series.
    pub tail_rate: f64,
}

pub fn smoothed_functionals(t: &[f64], f: &[f64], weights: &ModerationWeights) -> Result<Smoothed> {
    let n = t.len();
    if n < 2 || f.len() != n {
        return Err(Error::invalid(
            "series",
            "need at least two points with matching lengths",
        ));
    }
    let t_end = t[n - 1];
    let f_end = f[n - 1];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let cut = t[0] + 0.9 * (t_end - t[0]);
    for i in 0..n {
        if t[i] >= cut && f[i] > 0.0 {
            xs.push(t[i]);
            ys.push(f[i].ln());
        }
    }
    let rate = if xs.len() >= 2 {
        (-linear_fit(&xs, &ys).slope).max(0.0)
    } else {
        0.0
    };
    let mut values = Vec::with_capacity(n);
    let mut bounds = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in i..n - 1 {
            let (u0, u1) = (t[j] - t[i], t[j + 1] - t[i]);
            let (wl, wr) = linear_weights(u0, u1, weights.big_k_moments(u0, u1));
            s += wl * f[j] + wr * f[j + 1];
        }
        let lag = t_end - t[i];
        let tail = if f_end == 0.0 {
            0.0
        } else if rate == 0.0 {
            f_end * weights.big_k_tail(lag)
        } else {
            f_end
                * quad::integrate_to_infinity(
                    |v| weights.big_k(lag + v) * (-rate * v).exp(),
                    0.0,
                    1e-10,
                    0.0,
                )?
        };
        values.push(s + tail);
        bounds.push(f_end.abs() * weights.big_k_tail(lag));
    }
    Ok(Smoothed {
        t: t.to_vec(),
        values,
        truncation_bound: bounds,
        tail_rate: rate,
    })
}
