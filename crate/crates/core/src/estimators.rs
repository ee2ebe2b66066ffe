//! Variance estimators (direct Monte Carlo and Helffer–Sjöstrand), gradient
//! tail fits, confinement (exit-time) curves and supremum tails.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    evolve, evolve_with_steps, sample_gibbs, EvolveParams, LangevinConfig, ProbeTraces,
};
use crate::error::{Error, Result};
use crate::heat_kernel::{
    default_t_max, geometric_grid, solve_on_environment, tail_closure, ConstantEnvironment,
    EnergyFunctionals, HeatKernelSolver, SolverOptions, TailClosure,
};
use crate::lattice::Torus;
use crate::potential::PotentialSpec;
use crate::quad::gauss7;
use crate::rng::stream;
use crate::stats::{
    integrated_autocorrelation, linear_fit, mean, mean_and_stderr, pairwise_sum, quantile_sorted,
};

/// One point of an auxiliary curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub stderr: f64,
}

/// Point estimate with its error, sample count and auxiliary output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: String,
    pub curve: Vec<CurvePoint>,
    pub truncation_bound: Option<f64>,
    pub extra: BTreeMap<String, f64>,
}

impl EstimateReport {
    fn new(method: &str, estimate: f64, stderr: f64, n: usize) -> Self {
        EstimateReport {
            estimate,
            stderr,
            n,
            method: method.to_string(),
            curve: Vec::new(),
            truncation_bound: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn write_curve_csv<W: Write>(
        &self,
        w: &mut W,
        x_name: &str,
        y_name: &str,
    ) -> std::io::Result<()> {
        writeln!(w, "{x_name},{y_name},stderr")?;
        for p in &self.curve {
            writeln!(w, "{},{},{}", p.x, p.y, p.stderr)?;
        }
        Ok(())
    }
}

/// `σ_A ⊕ σ_B`, the error of a difference of independent estimates.
pub fn combined_sigma(a: &EstimateReport, b: &EstimateReport) -> f64 {
    a.stderr.hypot(b.stderr)
}

/// Observable used by the direct variance estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceObservable {
    /// `φ(0)²`.
    Origin,
    /// `|T_L|^{-1} Σ_x φ(x)²`, equal in law-average to `φ(0)²` by translation invariance.
    #[default]
    TranslationAveraged,
}

/// Minimum number of batches behind a batched-means error.
pub const MIN_BATCHES: usize = 10;

/// Batched-means variance of `φ(0)` under the Gibbs measure.
///
/// Batches are `⌈5 τ_int⌉` consecutive samples of one chain, with `τ_int`
/// estimated from the chains themselves.
pub fn mc_variance(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    samples_per_chain: usize,
    observable: VarianceObservable,
    prefix: &str,
) -> Result<EstimateReport> {
    cfg.validate("sampler")?;
    let (obs, diags) = sample_gibbs(torus, v, cfg, prefix, samples_per_chain, |phi| {
        variance_observation(phi, observable)
    })?;
    let acc = mean(&diags.iter().map(|d| d.acceptance_rate).collect::<Vec<_>>());
    variance_from_observations(&obs, acc)
}

/// `(observable, φ(0))` for one retained field.
pub fn variance_observation(phi: &[f64], observable: VarianceObservable) -> (f64, f64) {
    let sq = match observable {
        VarianceObservable::Origin => phi[0] * phi[0],
        VarianceObservable::TranslationAveraged => {
            phi.iter().map(|x| x * x).sum::<f64>() / phi.len() as f64
        }
    };
    (sq, phi[0])
}

/// Batched-means report from per-chain `(observable, φ(0))` series.
pub fn variance_from_observations(
    obs: &[Vec<(f64, f64)>],
    acceptance_rate: f64,
) -> Result<EstimateReport> {
    let squares: Vec<Vec<f64>> = obs
        .iter()
        .map(|c| c.iter().map(|o| o.0).collect())
        .collect();
    let samples: usize = obs.iter().map(Vec::len).sum();
    let tau = mean(
        &squares
            .iter()
            .map(|c| integrated_autocorrelation(c))
            .collect::<Vec<_>>(),
    );
    let size = (5.0 * tau).ceil().max(1.0) as usize;
    let batches: Vec<f64> = squares
        .iter()
        .flat_map(|c| c.chunks_exact(size).map(mean).collect::<Vec<_>>())
        .collect();
    if batches.len() < MIN_BATCHES {
        return Err(Error::TooFewBatches {
            batches: batches.len(),
        });
    }
    let (est, se) = mean_and_stderr(&batches);
    let mut report = EstimateReport::new("mc_batched_means", est, se, samples);
    let (m0, s0) = {
        let b: Vec<f64> = obs
            .iter()
            .flat_map(|c| {
                c.chunks_exact(size)
                    .map(|ch| mean(&ch.iter().map(|o| o.1).collect::<Vec<_>>()))
                    .collect::<Vec<_>>()
            })
            .collect();
        mean_and_stderr(&b)
    };
    report.extra.insert("tau_int".into(), tau);
    report.extra.insert("batch_size".into(), size as f64);
    report.extra.insert("batches".into(), batches.len() as f64);
    report.extra.insert("mean_phi0".into(), m0);
    report.extra.insert("mean_phi0_stderr".into(), s0);
    report
        .extra
        .insert("acceptance_rate".into(), acceptance_rate);
    Ok(report)
}

/// Independent stationary fields: the first `count` retained samples taken
/// chain by chain.
pub fn stationary_starts(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    prefix: &str,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let per_chain = count.div_ceil(cfg.chain_count);
    let (fields, _) = sample_gibbs(torus, v, cfg, prefix, per_chain, |phi| phi.to_vec())?;
    let mut out = Vec::with_capacity(count);
    for j in 0..per_chain {
        for chain in &fields {
            if out.len() < count {
                out.push(chain[j].clone());
            }
        }
    }
    Ok(out)
}

/// Settings of the heat-kernel side of the Helffer–Sjöstrand estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsConfig {
    pub trajectories: usize,
    /// Spacing of the environment grid fed to the solver.
    pub node_spacing: f64,
    /// Upper bound on the Euler–Maruyama step of the dynamics.
    pub dt: f64,
    pub substeps_per_node: usize,
    /// Defaults to `max(20, 5L²/2)`.
    #[serde(default)]
    pub t_max: Option<f64>,
}

impl HsConfig {
    pub fn new(trajectories: usize) -> Self {
        HsConfig {
            trajectories,
            node_spacing: 0.002,
            dt: 0.002,
            substeps_per_node: 1,
            t_max: None,
        }
    }
}

impl Default for HsConfig {
    fn default() -> Self {
        HsConfig::new(4 * MIN_TRAJECTORIES)
    }
}

/// Minimum trajectory count for a random environment.
pub const MIN_TRAJECTORIES: usize = 8;

/// `∫_0^T P_a(t, 0) dt` along one Langevin trajectory started at `phi0`,
/// with the solver fed node by node while the dynamics runs.
pub fn hs_integral(
    torus: &Torus,
    v: &PotentialSpec,
    phi0: &[f64],
    pde: &HsConfig,
    seed: u64,
    stream_path: &str,
) -> Result<(f64, TailClosure)> {
    let t_max = pde.t_max.unwrap_or_else(|| default_t_max(torus.l()));
    let t_end = (t_max / pde.node_spacing).round() * pde.node_spacing;
    let (trace, integral) = streaming_solve(
        torus,
        v,
        phi0,
        pde,
        t_max,
        geometric_grid(1e-2, t_end, 20),
        seed,
        stream_path,
    )?;
    Ok((integral, tail_closure(&trace)))
}

#[allow(clippy::too_many_arguments)]
fn streaming_solve(
    torus: &Torus,
    v: &PotentialSpec,
    phi0: &[f64],
    pde: &HsConfig,
    t_max: f64,
    grid: Vec<f64>,
    seed: u64,
    stream_path: &str,
) -> Result<(EnergyFunctionals, f64)> {
    let h = pde.node_spacing;
    let nodes = (t_max / h).round() as usize;
    let opts = SolverOptions {
        substeps_per_node: pde.substeps_per_node,
        ..SolverOptions::default()
    };
    let mut solver = HeatKernelSolver::new(torus, torus.origin(), opts, grid);
    let mut phi = phi0.to_vec();
    let mut rng = stream(seed, stream_path);
    let params = EvolveParams {
        dt: pde.dt,
        ..EvolveParams::new(h, pde.dt)
    };
    // the solver sees the exact time average of a over each interval
    let mut grads0 = vec![0.0; torus.edge_count()];
    crate::lattice::gradient_field(torus, &phi, &mut grads0);
    let prev: Vec<f64> = grads0.iter().map(|&g| v.second(g)).collect();
    let state = RefCell::new((prev, vec![0.0; torus.edge_count()]));
    evolve_with_steps(
        torus,
        v,
        &mut phi,
        &params,
        nodes,
        &mut rng,
        |dt, grads| {
            let (prev, acc) = &mut *state.borrow_mut();
            for ((s, p), &g) in acc.iter_mut().zip(prev.iter_mut()).zip(grads) {
                let a = v.second(g);
                *s += 0.5 * dt * (*p + a);
                *p = a;
            }
        },
        |k, _| {
            if k == 0 {
                return Ok(());
            }
            let acc = &mut state.borrow_mut().1;
            acc.iter_mut().for_each(|s| *s /= h);
            solver.advance_mean(acc, h).map_err(|e| match e {
                Error::Cfl {
                    product, row_sum, ..
                } => Error::Cfl {
                    product,
                    row_sum,
                    node: Some(k - 1),
                },
                other => other,
            })?;
            acc.iter_mut().for_each(|s| *s = 0.0);
            Ok(())
        },
    )?;
    solver.flush();
    let (_, trace, integral, _) = solver.into_parts();
    Ok((trace, integral))
}

/// Helffer–Sjöstrand estimate `E ∫_0^∞ P_a(t, 0) dt` over independent
/// stationary trajectories. The Monte Carlo error and the PDE tail bound are
/// reported separately.
pub fn hs_variance(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    pde: &HsConfig,
    prefix: &str,
) -> Result<EstimateReport> {
    if let Some(c) = v.constant_curvature() {
        let t_max = pde.t_max.unwrap_or_else(|| default_t_max(torus.l()));
        let env = ConstantEnvironment {
            a: vec![c; torus.edge_count()],
            spacing: pde.node_spacing,
            nodes: (t_max / pde.node_spacing).round() as usize,
        };
        let opts = SolverOptions {
            substeps_per_node: pde.substeps_per_node,
            ..SolverOptions::default()
        };
        let t_end = env.nodes as f64 * env.spacing;
        let solve = solve_on_environment(
            torus,
            &env,
            torus.origin(),
            t_end,
            opts,
            geometric_grid(1e-2, t_end, 20),
        )?;
        let mut report = EstimateReport::new("hs_deterministic", solve.total(), 0.0, 1);
        report.truncation_bound = Some(solve.tail.bound);
        report.extra.insert("integral".into(), solve.integral);
        report
            .extra
            .insert("tail_estimate".into(), solve.tail.estimate);
        return Ok(report);
    }
    if pde.trajectories < MIN_TRAJECTORIES {
        return Err(Error::TooFewTrajectories {
            got: pde.trajectories,
            need: MIN_TRAJECTORIES,
        });
    }
    let starts = stationary_starts(torus, v, cfg, &format!("{prefix}/starts"), pde.trajectories)?;
    let results: Result<Vec<(f64, TailClosure)>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, phi0)| {
            hs_integral(
                torus,
                v,
                phi0,
                pde,
                cfg.seed,
                &format!("{prefix}/trajectory/{i}"),
            )
        })
        .collect();
    let results = results?;
    let totals: Vec<f64> = results.iter().map(|(i, t)| i + t.estimate).collect();
    let (est, se) = mean_and_stderr(&totals);
    let mut report = EstimateReport::new("hs_trajectory_average", est, se, totals.len());
    report.truncation_bound = Some(mean(&results.iter().map(|r| r.1.bound).collect::<Vec<_>>()));
    report.extra.insert(
        "tail_estimate".into(),
        mean(&results.iter().map(|r| r.1.estimate).collect::<Vec<_>>()),
    );
    report.curve = totals
        .iter()
        .enumerate()
        .map(|(i, &y)| CurvePoint {
            x: i as f64,
            y,
            stderr: 0.0,
        })
        .collect();
    Ok(report)
}

/// Trajectory-averaged on-diagonal decay `E P_a(t, 0)` on `t_grid`, with the
/// log-log slope fitted over `window`. The slope error is a delete-one
/// jackknife over trajectories.
pub fn heat_kernel_decay(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    pde: &HsConfig,
    t_grid: &[f64],
    window: (f64, f64),
    prefix: &str,
) -> Result<EstimateReport> {
    if pde.trajectories < MIN_TRAJECTORIES {
        return Err(Error::TooFewTrajectories {
            got: pde.trajectories,
            need: MIN_TRAJECTORIES,
        });
    }
    if !(0.0 < window.0 && window.0 < window.1) {
        return Err(Error::invalid(
            "decay.window",
            "must satisfy 0 < start < end",
        ));
    }
    let mut grid: Vec<f64> = t_grid
        .iter()
        .copied()
        .filter(|t| t.is_finite() && *t >= 0.0)
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let t_end = grid
        .last()
        .copied()
        .ok_or_else(|| Error::invalid("decay.t_grid", "is empty"))?;
    let starts = stationary_starts(torus, v, cfg, &format!("{prefix}/starts"), pde.trajectories)?;
    let traces: Result<Vec<Vec<f64>>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, phi0)| {
            let path = format!("{prefix}/trajectory/{i}");
            streaming_solve(torus, v, phi0, pde, t_end, grid.clone(), cfg.seed, &path)
                .map(|(tr, _)| tr.diagonal)
        })
        .collect();
    let traces = traces?;
    let n = traces.len();
    let k = grid
        .len()
        .min(traces.iter().map(Vec::len).min().unwrap_or(0));
    let column = |j: usize| -> Vec<f64> { traces.iter().map(|tr| tr[j]).collect() };
    let fitted: Vec<usize> = (0..k)
        .filter(|&j| grid[j] >= window.0 && grid[j] <= window.1)
        .collect();
    if fitted.len() < 3 {
        return Err(Error::invalid(
            "decay.window",
            "contains fewer than three grid times",
        ));
    }
    let slope_of = |means: &[f64]| -> f64 {
        let pts: Vec<(f64, f64)> = fitted
            .iter()
            .filter(|&&j| means[j] > 0.0)
            .map(|&j| (grid[j].ln(), means[j].ln()))
            .collect();
        if pts.len() < 3 {
            return f64::NAN;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&x, &y).slope
    };
    let totals: Vec<f64> = (0..k).map(|j| pairwise_sum(&column(j))).collect();
    let means: Vec<f64> = totals.iter().map(|s| s / n as f64).collect();
    let slope = slope_of(&means);
    let jack: Vec<f64> = (0..n)
        .map(|i| {
            let m: Vec<f64> = (0..k)
                .map(|j| (totals[j] - traces[i][j]) / (n - 1) as f64)
                .collect();
            slope_of(&m)
        })
        .collect();
    let jm = mean(&jack);
    let se =
        ((n - 1) as f64 / n as f64 * jack.iter().map(|s| (s - jm).powi(2)).sum::<f64>()).sqrt();
    let mut report = EstimateReport::new("heat_kernel_decay_slope", slope, se, n);
    report.curve = (0..k)
        .map(|j| {
            let (m, e) = mean_and_stderr(&column(j));
            CurvePoint {
                x: grid[j],
                y: m,
                stderr: e,
            }
        })
        .collect();
    report.extra.insert("window_start".into(), window.0);
    report.extra.insert("window_end".into(), window.1);
    report
        .extra
        .insert("target_slope".into(), -(torus.d() as f64) / 2.0);
    Ok(report)
}

/// Rank-based survival function `S(k) = #{x > k} / n` of sorted data,
/// thinned to at most `points` entries.
pub fn survival_curve(sorted: &[f64], points: usize) -> Vec<CurvePoint> {
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let step = (n / points.max(1)).max(1);
    (0..n)
        .step_by(step)
        .map(|i| {
            let s = (n - 1 - i) as f64 / n as f64;
            CurvePoint {
                x: sorted[i],
                y: s,
                stderr: (s * (1.0 - s) / n as f64).sqrt(),
            }
        })
        .collect()
}

/// Quantile band used by the tail fit.
pub const TAIL_BAND: (f64, f64) = (0.90, 0.999);
/// Minimum number of samples beyond the 99% quantile.
pub const MIN_TAIL_POINTS: usize = 30;
pub const MIN_TAIL_SAMPLES: usize = 10_000;

/// Fitted `(s, c)` for the density `∝ exp(-c x^s)` restricted to `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub exponent: f64,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// `(log Z, E[u^s])` for the density `exp(-c u^s)` on `[lo, 1]`.
fn truncated_moments(lo: f64, s: f64, c: f64) -> (f64, f64) {
    // shift the exponent by its value at the maximum of the density
    let shift = if c >= 0.0 { c * lo.powf(s) } else { c };
    let panels = 32;
    let h = (1.0 - lo) / panels as f64;
    let (mut z, mut m) = (0.0, 0.0);
    for i in 0..panels {
        let (a, b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        z += gauss7(&|u: f64| (shift - c * u.powf(s)).exp(), a, b);
        m += gauss7(&|u: f64| u.powf(s) * (shift - c * u.powf(s)).exp(), a, b);
    }
    (z.ln() - shift, m / z)
}

/// Profile log-likelihood in `s` (maximized over `c`) of band data `u ∈ [lo, 1]`.
fn profile(u: &[f64], lo: f64, s: f64) -> (f64, f64) {
    let n = u.len() as f64;
    let target = pairwise_sum(&u.iter().map(|x| x.powf(s)).collect::<Vec<_>>()) / n;
    // E_c[u^s] decreases in c; bisect for the score root
    let (mut a, mut b) = (-1e3, 1e5);
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if truncated_moments(lo, s, c).1 > target {
            a = c;
        } else {
            b = c;
        }
        if b - a < 1e-10 * (1.0 + c.abs()) {
            break;
        }
    }
    let c = 0.5 * (a + b);
    (-c * target * n - n * truncated_moments(lo, s, c).0, c)
}

/// Maximum-likelihood fit of `exp(-c x^s)` to the data inside the
/// `[90%, 99.9%]` quantile band of `|x|`.
pub fn fit_tail_exponent(abs_sorted: &[f64]) -> Result<TailFit> {
    let lo = quantile_sorted(abs_sorted, TAIL_BAND.0);
    let hi = quantile_sorted(abs_sorted, TAIL_BAND.1);
    if !(hi > lo) || !(lo >= 0.0) {
        return Err(Error::Degenerate("empty tail band".into()));
    }
    let u: Vec<f64> = abs_sorted
        .iter()
        .filter(|&&x| x >= lo && x <= hi)
        .map(|x| x / hi)
        .collect();
    if u.len() < MIN_TAIL_POINTS {
        return Err(Error::TooFewTailPoints { got: u.len() });
    }
    let rlo = lo / hi;
    let f = |s: f64| -profile(&u, rlo, s).0;
    // golden-section search on the negative profile likelihood
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.3f64, 12.0f64);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-5 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    let s = 0.5 * (a + b);
    let c = profile(&u, rlo, s).1 / hi.powf(s);
    Ok(TailFit {
        exponent: s,
        scale: c,
        lo,
        hi,
        count: u.len(),
    })
}

/// Slope of `log(-log S(K))` against `log K` over the fit band.
pub fn literal_tail_slope(abs_sorted: &[f64]) -> f64 {
    let n = abs_sorted.len();
    let lo = quantile_sorted(abs_sorted, TAIL_BAND.0);
    let hi = quantile_sorted(abs_sorted, TAIL_BAND.1);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, &k) in abs_sorted.iter().enumerate() {
        let s = (n - 1 - i) as f64 / n as f64;
        if k >= lo && k <= hi && k > 0.0 && s > 0.0 && s < 1.0 {
            xs.push(k.ln());
            ys.push((-s.ln()).ln());
        }
    }
    if xs.len() < 3 {
        return f64::NAN;
    }
    linear_fit(&xs, &ys).slope
}

/// Number of bootstrap replicates for the tail exponent.
pub const BOOTSTRAP_REPLICATES: usize = 64;
const BOOTSTRAP_BLOCKS: usize = 64;

/// Tail exponent of `|∇φ(e)|` from pooled samples in their recorded order.
///
/// The point estimate is the truncated maximum-likelihood exponent; the
/// interval comes from a bootstrap over contiguous blocks of the input, so
/// serial correlation within a chain is respected.
pub fn gradient_tail(samples: &[f64], seed: u64) -> Result<EstimateReport> {
    let abs: Vec<f64> = samples.iter().map(|x| x.abs()).collect();
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let q99 = quantile_sorted(&sorted, 0.99);
    let beyond = sorted.iter().filter(|&&x| x > q99).count();
    if sorted.is_empty() || beyond < MIN_TAIL_POINTS {
        return Err(Error::TooFewTailPoints { got: beyond });
    }
    if sorted.len() < MIN_TAIL_SAMPLES {
        return Err(Error::invalid(
            "samples",
            format!("need at least {MIN_TAIL_SAMPLES}, got {}", sorted.len()),
        ));
    }
    let fit = fit_tail_exponent(&sorted)?;
    let block = abs.len() / BOOTSTRAP_BLOCKS;
    let replicates: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &format!("gradient_tail/bootstrap/{r}"));
            let mut res = Vec::with_capacity(block * BOOTSTRAP_BLOCKS);
            for _ in 0..BOOTSTRAP_BLOCKS {
                let b = rng.random_range(0..BOOTSTRAP_BLOCKS);
                res.extend_from_slice(&abs[b * block..(b + 1) * block]);
            }
            res.sort_by(f64::total_cmp);
            fit_tail_exponent(&res)
                .map(|f| f.exponent)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let mut ok: Vec<f64> = replicates.into_iter().filter(|x| x.is_finite()).collect();
    ok.sort_by(f64::total_cmp);
    let sd = if ok.len() >= 2 {
        crate::stats::sample_variance(&ok).sqrt()
    } else {
        f64::NAN
    };
    let mut report = EstimateReport::new("truncated_mle_exp_power", fit.exponent, sd, sorted.len());
    report.curve = survival_curve(&sorted, 400);
    if !ok.is_empty() {
        report
            .extra
            .insert("ci_low".into(), quantile_sorted(&ok, 0.025));
        report
            .extra
            .insert("ci_high".into(), quantile_sorted(&ok, 0.975));
    }
    report.extra.insert("scale".into(), fit.scale);
    report.extra.insert("band_low".into(), fit.lo);
    report.extra.insert("band_high".into(), fit.hi);
    report.extra.insert("band_count".into(), fit.count as f64);
    report.extra.insert("tail_points".into(), beyond as f64);
    report
        .extra
        .insert("literal_slope".into(), literal_tail_slope(&sorted));
    Ok(report)
}

/// First time each edge leaves `[-r, r]`, checked at every grid node;
/// `∞` for edges that stay inside up to `nodes · node_spacing`.
#[allow(clippy::too_many_arguments)]
pub fn exit_times(
    torus: &Torus,
    v: &PotentialSpec,
    phi0: &[f64],
    params: &EvolveParams,
    r: f64,
    nodes: usize,
    seed: u64,
    stream_path: &str,
) -> Result<Vec<f64>> {
    let mut phi = phi0.to_vec();
    let mut rng = stream(seed, stream_path);
    let mut exit = vec![f64::INFINITY; torus.edge_count()];
    let h = params.node_spacing;
    evolve(torus, v, &mut phi, params, nodes, &mut rng, |k, grads| {
        for (t, g) in exit.iter_mut().zip(grads) {
            if t.is_infinite() && g.abs() > r {
                *t = k as f64 * h;
            }
        }
        Ok(())
    })?;
    Ok(exit)
}

/// Confinement probabilities `P[|∇φ(t,e)| ≤ R on [0,T]]` on a grid of `T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfinementCurve {
    pub radius: f64,
    pub t: Vec<f64>,
    pub probability: Vec<f64>,
    /// Error from the spread of per-trajectory fractions (edges of one
    /// trajectory are correlated).
    pub stderr: Vec<f64>,
    /// Naive binomial error treating every (trajectory, edge) pair as independent.
    pub binomial_stderr: Vec<f64>,
    /// `P(T_i) - P(T_{i+1})` and its error from paired per-trajectory differences.
    pub decreases: Vec<(f64, f64)>,
    pub trajectories: usize,
    pub pairs: usize,
}

impl ConfinementCurve {
    /// Build from first-exit times, one vector of per-edge times per trajectory.
    pub fn from_exit_times(radius: f64, t_grid: &[f64], exits: &[Vec<f64>]) -> Self {
        let m = exits.len();
        let fraction = |traj: &Vec<f64>, t: f64| {
            traj.iter().filter(|&&x| x > t).count() as f64 / traj.len() as f64
        };
        let pairs: usize = exits.iter().map(|e| e.len()).sum();
        let (mut probability, mut stderr, mut binomial) = (Vec::new(), Vec::new(), Vec::new());
        for &t in t_grid {
            let f: Vec<f64> = exits.iter().map(|e| fraction(e, t)).collect();
            let (p, se) = mean_and_stderr(&f);
            probability.push(p);
            stderr.push(if m >= 2 { se } else { f64::NAN });
            binomial.push((p * (1.0 - p) / pairs as f64).sqrt());
        }
        let decreases = t_grid
            .windows(2)
            .map(|w| {
                let d: Vec<f64> = exits
                    .iter()
                    .map(|e| fraction(e, w[0]) - fraction(e, w[1]))
                    .collect();
                let (dm, ds) = mean_and_stderr(&d);
                (dm, if m >= 2 { ds } else { f64::NAN })
            })
            .collect();
        ConfinementCurve {
            radius,
            t: t_grid.to_vec(),
            probability,
            stderr,
            binomial_stderr: binomial,
            decreases,
            trajectories: m,
            pairs,
        }
    }

    pub fn report(&self) -> EstimateReport {
        let last = self.probability.len() - 1;
        let mut r = EstimateReport::new(
            "confinement_exit_times",
            self.probability[last],
            self.stderr[last],
            self.pairs,
        );
        r.curve = (0..self.t.len())
            .map(|i| CurvePoint {
                x: self.t[i],
                y: self.probability[i],
                stderr: self.stderr[i],
            })
            .collect();
        r.extra.insert("radius".into(), self.radius);
        r.extra
            .insert("trajectories".into(), self.trajectories as f64);
        r
    }
}

/// Exit-time confinement curve from `trajectories` stationary starts.
#[allow(clippy::too_many_arguments)]
pub fn confinement_probability(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    params: &EvolveParams,
    r: f64,
    t_grid: &[f64],
    trajectories: usize,
    prefix: &str,
) -> Result<ConfinementCurve> {
    if !(r > 0.0) {
        return Err(Error::invalid("confinement.radius", "must be positive"));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] < 0.0 {
        return Err(Error::invalid(
            "confinement.t_grid",
            "must be nonempty, nonnegative and increasing",
        ));
    }
    let t_max = t_grid[t_grid.len() - 1];
    let nodes = (t_max / params.node_spacing).ceil() as usize;
    let starts = stationary_starts(torus, v, cfg, &format!("{prefix}/starts"), trajectories)?;
    let exits: Result<Vec<Vec<f64>>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, phi0)| {
            exit_times(
                torus,
                v,
                phi0,
                params,
                r,
                nodes,
                cfg.seed,
                &format!("{prefix}/trajectory/{i}"),
            )
        })
        .collect();
    Ok(ConfinementCurve::from_exit_times(r, t_grid, &exits?))
}

/// `P[sup_{[0,T]} |∇φ(t,e)| ≥ K]` for each `K`, pooled over probe edges and
/// trajectories; traces are sampled every `node_spacing`.
pub fn supremum_tail(
    traces: &[ProbeTraces],
    node_spacing: f64,
    t: f64,
    k_grid: &[f64],
) -> Result<EstimateReport> {
    let nodes = (t / node_spacing).round() as usize;
    let mut sups = Vec::new();
    for tr in traces {
        let m = tr.edges.len();
        if m == 0 {
            continue;
        }
        let available = tr.values.len() / m;
        if nodes + 1 > available {
            return Err(Error::OutsideHorizon {
                t,
                horizon: (available - 1) as f64 * node_spacing,
            });
        }
        for j in 0..m {
            sups.push(
                (0..=nodes)
                    .map(|k| tr.values[k * m + j])
                    .fold(0.0, f64::max),
            );
        }
    }
    let n = sups.len();
    if n == 0 {
        return Err(Error::Degenerate("no probe traces".into()));
    }
    let curve: Vec<CurvePoint> = k_grid
        .iter()
        .map(|&k| {
            let p = sups.iter().filter(|&&s| s >= k).count() as f64 / n as f64;
            CurvePoint {
                x: k,
                y: p,
                stderr: (p * (1.0 - p) / n as f64).sqrt(),
            }
        })
        .collect();
    let mut r = EstimateReport::new(
        "supremum_tail",
        curve.first().map_or(f64::NAN, |c| c.y),
        curve.first().map_or(f64::NAN, |c| c.stderr),
        n,
    );
    r.curve = curve;
    r.extra.insert("horizon".into(), t);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mle_recovers_exact_exponents() {
        let mut rng = stream(5, "test/tail");
        let g: Vec<f64> = (0..200_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut abs: Vec<f64> = g.iter().map(|x: &f64| x.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let fit = fit_tail_exponent(&abs).unwrap();
        assert!((fit.exponent - 2.0).abs() < 0.25, "{fit:?}");
        let lit = literal_tail_slope(&abs);
        assert!(lit < 1.8, "literal slope {lit}");
    }

    #[test]
    fn degenerate_samples_are_refused() {
        let zeros = vec![0.0; 20_000];
        assert!(matches!(
            gradient_tail(&zeros, 1),
            Err(Error::TooFewTailPoints { .. })
        ));
    }
}
