//! Exponent tables and empirical-constant checkers for the functional
//! inequalities (GNS, anchored Nash, moderation, Efron monotonicity).
//!
//! Every checker returns a ratio `LHS / RHS` with the constant dropped.
//! Boundedness is judged by the caller across a corpus.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::EnvironmentTrajectory;
use crate::error::{Error, Result};
use crate::lattice::{gradient_field, lp_norm, Exponent, Region, Support, Torus};
use crate::moderation::{m_pprime, Boxes, ModerationContext, ModerationWeights};
use crate::stats::quantile_sorted;

/// Exponents used by the GNS, Hölder and anchored Nash steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ExponentTable {
    pub d: usize,
    pub p: f64,
    pub p_prime: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub tau: f64,
    pub lambda_prime: f64,
    pub tau_prime: f64,
    pub theta_d: f64,
    pub theta_c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `1 < λ < 2 < κ < ∞`; false in `d = 1`, where `κ` is negative.
    pub admissible: bool,
}

impl ExponentTable {
    pub fn new(d: usize, p: f64, p_prime: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("torus.d", "must be at least 1"));
        }
        let df = d as f64;
        if !(p > df) || !p.is_finite() {
            return Err(Error::invalid(
                "moderation.p",
                format!("must exceed d = {d}, got {p}"),
            ));
        }
        if !(p_prime > df) || !p_prime.is_finite() {
            return Err(Error::invalid(
                "moderation.p_prime",
                format!("must exceed d = {d}, got {p_prime}"),
            ));
        }
        let lambda = (2.0 * df + 2.0) / (df + 2.0);
        let kappa = df * lambda / (df - lambda);
        let sigma = 2.0 * kappa / (kappa - 2.0);
        let tau = 2.0 * lambda / (2.0 - lambda);
        let lambda_prime = (2.0 * df + 3.0) / (df + 2.0);
        let tau_prime = 2.0 * lambda_prime / (2.0 - lambda_prime);
        let theta_d = 2.0 / 3.0 * (2.0 * df + 3.0) / (2.0 * df + 2.0);
        let theta_c = 1.0 / (1.0 + (df * p + 2.0 * p) / (df * p + 2.0 * df) * (p_prime / df - 1.0));
        let th = theta_c;
        let alpha = (1.0 - th) * df / (df + 2.0) + th * p / (p + 2.0);
        let beta = (1.0 - th) * 2.0 / (df + 2.0);
        let gamma = th * 2.0 / (p + 2.0);
        let table = ExponentTable {
            d,
            p,
            p_prime,
            lambda,
            kappa,
            sigma,
            tau,
            lambda_prime,
            tau_prime,
            theta_d,
            theta_c,
            alpha,
            beta,
            gamma,
            admissible: 1.0 < lambda && lambda < 2.0 && kappa > 2.0,
        };
        let worst = table
            .identity_residuals()
            .iter()
            .fold(0.0f64, |m, r| m.max(r.abs()));
        if !(worst <= 1e-12) {
            return Err(Error::Degenerate(format!(
                "exponent identities violated by {worst:e}"
            )));
        }
        Ok(table)
    }

    /// Default `p = p' = d + 1`.
    pub fn default_for(d: usize) -> Result<Self> {
        Self::new(d, d as f64 + 1.0, d as f64 + 1.0)
    }

    /// Residuals of the defining identities; all vanish for a valid table.
    pub fn identity_residuals(&self) -> [f64; 6] {
        let df = self.d as f64;
        [
            1.0 / self.tau + 0.5 - 1.0 / self.lambda,
            1.0 / self.kappa + 1.0 / self.sigma - 0.5,
            1.0 / self.sigma + 1.0 / self.tau - 1.0 / df,
            1.0 / self.tau_prime + 0.5 - 1.0 / self.lambda_prime,
            self.alpha + self.beta + self.gamma - 1.0,
            self.alpha - (self.p - df) * self.gamma / 2.0 - df / 2.0 * (1.0 - self.alpha),
        ]
    }
}

pub fn exponent_table(d: usize, p: f64, p_prime: f64) -> Result<ExponentTable> {
    ExponentTable::new(d, p, p_prime)
}

fn require_nonzero(f: &[f64]) -> Result<()> {
    if f.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("zero field".into()));
    }
    Ok(())
}

/// `‖f‖_κ / (L^θ ‖∇f‖_λ^θ ‖f‖_μ^{1-θ})` with normalized norms on the torus.
pub fn check_gns(
    torus: &Torus,
    f: &[f64],
    kappa: f64,
    lambda: f64,
    mu: f64,
    theta: f64,
) -> Result<f64> {
    let df = torus.d() as f64;
    let rel = theta * (1.0 / lambda - 1.0 / df) + (1.0 - theta) / mu;
    if (1.0 / kappa - rel).abs() > 1e-10 {
        return Err(Error::invalid(
            "gns",
            format!(
                "1/κ = {} but the exponent relation gives {rel}",
                1.0 / kappa
            ),
        ));
    }
    if f.len() != torus.vertex_count() {
        return Err(Error::invalid("gns", "field size does not match the torus"));
    }
    require_nonzero(f)?;
    let mut grad = vec![0.0; torus.edge_count()];
    gradient_field(torus, f, &mut grad);
    let fk = lp_norm(
        torus,
        f,
        Support::Vertices,
        Exponent::Finite(kappa),
        Region::Torus,
        true,
    )?;
    let gl = lp_norm(
        torus,
        &grad,
        Support::Edges,
        Exponent::Finite(lambda),
        Region::Torus,
        true,
    )?;
    let fm = lp_norm(
        torus,
        f,
        Support::Vertices,
        Exponent::Finite(mu),
        Region::Torus,
        true,
    )?;
    let den = (torus.l() as f64).powf(theta) * gl.powf(theta) * fm.powf(1.0 - theta);
    Ok(fk / den)
}

/// Mean-zero Gaussian field built from the Fourier modes with
/// `max_i |k_i| ≤ modes`, so its shape does not depend on `L`.
pub fn smooth_gaussian_field<R: Rng + ?Sized>(
    torus: &Torus,
    modes: usize,
    rng: &mut R,
) -> Vec<f64> {
    let d = torus.d();
    let n = torus.side() as f64;
    let m = modes as i64;
    let mut wave = vec![-m; d];
    let mut f = vec![0.0; torus.vertex_count()];
    loop {
        // one representative of each ±k pair, skipping k = 0
        let first = wave.iter().find(|&&c| c != 0).copied();
        if first.is_some_and(|c| c > 0) {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            for (x, v) in f.iter_mut().enumerate() {
                let phase: f64 = torus
                    .coords(x)
                    .iter()
                    .zip(&wave)
                    .map(|(&c, &k)| (c * k) as f64)
                    .sum::<f64>()
                    * std::f64::consts::TAU
                    / n;
                *v += a * phase.cos() + b * phase.sin();
            }
        }
        let mut i = 0;
        loop {
            if i == d {
                let mean = f.iter().sum::<f64>() / f.len() as f64;
                f.iter_mut().for_each(|v| *v -= mean);
                return f;
            }
            wave[i] += 1;
            if wave[i] <= m {
                break;
            }
            wave[i] = -m;
            i += 1;
        }
    }
}

/// Anchored Nash ratio together with the `M_{p'}` factor it used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashRatio {
    pub ratio: f64,
    pub m_pprime: f64,
}

/// `‖f‖₂ / ((M_{p'}^{1/2} ‖w∇f‖₂)^α ‖f‖₁^β ‖|x|_*^{p/2} f‖₂^γ)` with plain
/// (unnormalized) norms and `M_{p'}` computed from `w`.
pub fn check_anchored_nash(
    torus: &Torus,
    f: &[f64],
    w: &[f64],
    table: &ExponentTable,
) -> Result<NashRatio> {
    if f.len() != torus.vertex_count() || w.len() != torus.edge_count() {
        return Err(Error::invalid("nash", "field sizes do not match the torus"));
    }
    if w.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("nash.w", "must be positive on every edge"));
    }
    require_nonzero(f)?;
    let mut grad = vec![0.0; torus.edge_count()];
    gradient_field(torus, f, &mut grad);
    let wg: Vec<f64> = grad.iter().zip(w).map(|(g, w)| g * w).collect();
    let anchored: Vec<f64> = (0..f.len())
        .map(|x| torus.norm_star(x).powf(table.p / 2.0) * f[x])
        .collect();
    let l2 = |v: &[f64], s| lp_norm(torus, v, s, Exponent::Finite(2.0), Region::Torus, false);
    let lhs = l2(f, Support::Vertices)?;
    let m = m_pprime(torus, &Boxes::new(torus), w, table);
    let dirichlet = l2(&wg, Support::Edges)?;
    let l1 = lp_norm(
        torus,
        f,
        Support::Vertices,
        Exponent::Finite(1.0),
        Region::Torus,
        false,
    )?;
    let moment = l2(&anchored, Support::Vertices)?;
    let rhs =
        (m.sqrt() * dirichlet).powf(table.alpha) * l1.powf(table.beta) * moment.powf(table.gamma);
    Ok(NashRatio {
        ratio: lhs / rhs,
        m_pprime: m,
    })
}

/// One `(t, e)` evaluation of the moderation inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModerationSample {
    pub node: usize,
    pub edge: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Distribution of moderation ratios over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModerationStats {
    pub samples: Vec<ModerationSample>,
    pub max: f64,
    pub median: f64,
    pub p99: f64,
}

impl ModerationStats {
    fn from_samples(samples: Vec<ModerationSample>) -> Self {
        let mut r: Vec<f64> = samples.iter().map(|s| s.ratio).collect();
        r.sort_by(f64::total_cmp);
        let (max, median, p99) = if r.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                r[r.len() - 1],
                quantile_sorted(&r, 0.5),
                quantile_sorted(&r, 0.99),
            )
        };
        ModerationStats {
            samples,
            max,
            median,
            p99,
        }
    }
}

/// Ratios `w(t,e)² (∇u(t,e))² / Σ_{e'∩e≠∅} ∫_t^T K_{s-t} a(s,e') (∇u(s,e'))² ds`.
///
/// `u` holds the solution at every trajectory node from 0; `w` at node `k`
/// uses `horizon` grid intervals. The kernel is `K_{s-t}`.
pub fn check_moderation(
    torus: &Torus,
    traj: &EnvironmentTrajectory,
    u: &[Vec<f64>],
    ctx: &ModerationContext,
    horizon: usize,
    samples: &[(usize, usize)],
) -> Result<ModerationStats> {
    let nodes = u.len().min(traj.node_count());
    let h = traj.dt;
    let weights: ModerationWeights = *ctx.weights();
    let kw: Vec<(f64, f64)> = (0..nodes)
        .map(|j| {
            let (u0, u1) = (j as f64 * h, (j + 1) as f64 * h);
            let (m0, m1) = weights.big_k_moments(u0, u1);
            let slope = (m1 - u0 * m0) / h;
            (m0 - slope, slope)
        })
        .collect();
    let mut grads = Vec::with_capacity(nodes);
    for field in &u[..nodes] {
        let mut g = vec![0.0; torus.edge_count()];
        gradient_field(torus, field, &mut g);
        grads.push(g);
    }
    let mut out = Vec::with_capacity(samples.len());
    for &(k0, e) in samples {
        if k0 + 1 >= nodes {
            return Err(Error::OutsideHorizon {
                t: k0 as f64 * h,
                horizon: (nodes - 1) as f64 * h,
            });
        }
        let w = ctx.value(k0, e, horizon, Default::default())?.w;
        let lhs = w * w * grads[k0][e] * grads[k0][e];
        let mut rhs = 0.0;
        for &f in torus.closure(e) {
            let g = |k: usize| traj.at(k, f) * grads[k][f] * grads[k][f];
            let mut left = g(k0);
            for j in 0..nodes - 1 - k0 {
                let right = g(k0 + j + 1);
                rhs += kw[j].0 * left + kw[j].1 * right;
                left = right;
            }
        }
        let ratio = if lhs == 0.0 {
            0.0
        } else if rhs <= 1e-300 {
            return Err(Error::Quadrature(format!(
                "moderation RHS vanishes with LHS {lhs:e} at node {k0}, edge {e}"
            )));
        } else {
            lhs / rhs
        };
        out.push(ModerationSample {
            node: k0,
            edge: e,
            lhs,
            rhs,
            ratio,
        });
    }
    Ok(ModerationStats::from_samples(out))
}

/// Settings of a moderation-ratio experiment on one sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModerationExperiment {
    pub node_spacing: f64,
    pub dt: f64,
    /// Length of the window defining `w`.
    pub horizon: f64,
    /// Sampled times lie in `[0, span]`.
    pub span: f64,
    pub samples: usize,
}

impl Default for ModerationExperiment {
    fn default() -> Self {
        ModerationExperiment {
            node_spacing: 0.05,
            dt: 0.002,
            horizon: 20.0,
            span: 20.0,
            samples: 1000,
        }
    }
}

/// Samples a stationary start, evolves it over `span + horizon`, solves the
/// heat kernel from the origin and evaluates `samples` random `(t, e)` pairs.
pub fn moderation_experiment(
    torus: &Torus,
    v: &crate::potential::PotentialSpec,
    cfg: &crate::dynamics::LangevinConfig,
    exp: &ModerationExperiment,
    weights: ModerationWeights,
    prefix: &str,
) -> Result<ModerationStats> {
    if !(exp.node_spacing > 0.0 && exp.horizon >= exp.node_spacing && exp.span >= 0.0) {
        return Err(Error::invalid(
            "moderation",
            "need node_spacing > 0, horizon >= node_spacing, span >= 0",
        ));
    }
    let start = crate::estimators::stationary_starts(torus, v, cfg, &format!("{prefix}/start"), 1)?;
    let params = crate::dynamics::EvolveParams::new(exp.node_spacing, exp.dt);
    let (traj, _) = crate::dynamics::evolve_trajectory(
        torus,
        v,
        &start[0],
        &params,
        exp.span + exp.horizon,
        cfg.seed,
        &format!("{prefix}/trajectory"),
        &[],
    )?;
    let nodes = traj.node_count() - 1;
    let u = crate::heat_kernel::node_fields(torus, &traj, torus.origin(), nodes, 1)?;
    let ctx = ModerationContext::new(torus, &traj, weights)?;
    let horizon = (exp.horizon / exp.node_spacing).round() as usize;
    let last =
        ((exp.span / exp.node_spacing).round() as usize).min(nodes.saturating_sub(horizon.max(1)));
    let mut rng = crate::rng::stream(cfg.seed, &format!("{prefix}/pairs"));
    let pairs: Vec<(usize, usize)> = (0..exp.samples)
        .map(|_| {
            (
                rng.random_range(0..=last),
                rng.random_range(0..torus.edge_count()),
            )
        })
        .collect();
    check_moderation(torus, &traj, &u, &ctx, horizon, &pairs)
}

/// Density sampled on `x0 + i h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedDensity {
    pub x0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl GriddedDensity {
    pub fn from_fn(x0: f64, h: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        GriddedDensity {
            x0,
            h,
            values: (0..n).map(|i| f(x0 + i as f64 * h)).collect(),
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    /// Contiguous positive support with concave logarithm.
    pub fn check_log_concave(&self) -> Result<()> {
        let v = &self.values;
        if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid(
                "density",
                "values must be finite and nonnegative",
            ));
        }
        let lo = v
            .iter()
            .position(|&x| x > 0.0)
            .ok_or_else(|| Error::Degenerate("zero density".into()))?;
        let hi = v.iter().rposition(|&x| x > 0.0).unwrap();
        if let Some(i) = (lo..=hi).find(|&i| v[i] == 0.0) {
            return Err(Error::NotLogConcave { index: i });
        }
        for i in lo + 1..hi {
            let (a, b, c) = (v[i - 1].ln(), v[i].ln(), v[i + 1].ln());
            if a + c > 2.0 * b + 1e-9 * b.abs().max(1.0) {
                return Err(Error::NotLogConcave { index: i });
            }
        }
        Ok(())
    }
}

/// `g(s) = E[Ψ(X,Y) | X+Y = s]` on the anti-diagonals and its monotonicity.
#[derive(Debug, Clone, PartialEq)]
pub struct EfronVerdict {
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    pub nondecreasing: bool,
    /// Largest decrease `g(s_i) - g(s_{i+1})` observed (≤ 0 when increasing).
    pub worst_drop: f64,
    pub tolerance: f64,
}

pub fn check_efron(
    fx: &GriddedDensity,
    fy: &GriddedDensity,
    psi: impl Fn(f64, f64) -> f64,
) -> Result<EfronVerdict> {
    if (fx.h - fy.h).abs() > 1e-12 * fx.h {
        return Err(Error::invalid(
            "efron",
            "densities must share the grid spacing",
        ));
    }
    fx.check_log_concave()?;
    fy.check_log_concave()?;
    let (nx, ny) = (fx.values.len(), fy.values.len());
    for i in 0..nx {
        for j in 0..ny {
            let v = psi(fx.x(i), fy.x(j));
            if i + 1 < nx && psi(fx.x(i + 1), fy.x(j)) < v - 1e-12 * v.abs().max(1.0) {
                return Err(Error::invalid(
                    "efron.psi",
                    "must be nondecreasing in its first argument",
                ));
            }
            if j + 1 < ny && psi(fx.x(i), fy.x(j + 1)) < v - 1e-12 * v.abs().max(1.0) {
                return Err(Error::invalid(
                    "efron.psi",
                    "must be nondecreasing in its second argument",
                ));
            }
        }
    }
    let (mut s, mut g) = (Vec::new(), Vec::new());
    for m in 0..nx + ny - 1 {
        let lo = m.saturating_sub(ny - 1);
        let hi = m.min(nx - 1);
        let (mut num, mut den) = (0.0, 0.0);
        for i in lo..=hi {
            let wgt = fx.values[i]
                * fy.values[m - i]
                * if (i == lo || i == hi) && lo != hi {
                    0.5
                } else {
                    1.0
                };
            if wgt > 0.0 {
                num += wgt * psi(fx.x(i), fy.x(m - i));
                den += wgt;
            }
        }
        if den > 0.0 && den.is_normal() {
            s.push(fx.x0 + fy.x0 + m as f64 * fx.h);
            g.push(num / den);
        }
    }
    let range = g.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - g.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let tolerance = 1e-6 * range.max(f64::MIN_POSITIVE);
    let worst_drop = g
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EfronVerdict {
        nondecreasing: worst_drop <= tolerance,
        s,
        g,
        worst_drop,
        tolerance,
    })
}
