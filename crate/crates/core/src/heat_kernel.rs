//! Heat kernel of `∂_t P - ∇·a∇P = 0` in a time-dependent environment.
//!
//! The scheme is forward Euler. Between two grid nodes the coefficient is the
//! average of the node values, which makes a time-reversed solve the exact
//! transpose of the forward one. Each interval is sub-stepped so that
//! `τ · max_x Σ_{e∋x} a(e) ≤ 1`; under that bound the update is a convex
//! combination, so mass is conserved and the maximum principle holds.

use std::io::Write;

use crate::dynamics::EnvironmentTrajectory;
use crate::error::{Error, Result};
use crate::lattice::Torus;
use crate::stats::{linear_fit, pairwise_sum};

/// Current value of `P_a(t, ·)` started from `δ_source - 1/|T_L|`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatKernelState {
    pub p: Vec<f64>,
    pub t: f64,
    pub source: usize,
}

pub fn init_heat_kernel(torus: &Torus, source: usize, start: f64) -> HeatKernelState {
    let n = torus.vertex_count() as f64;
    let mut p = vec![-1.0 / n; torus.vertex_count()];
    p[source] = 1.0 - 1.0 / n;
    HeatKernelState {
        p,
        t: start,
        source,
    }
}

/// Largest vertex row sum `Σ_{e∋x} a(e)`.
pub fn max_row_sum(torus: &Torus, a: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for x in 0..torus.vertex_count() {
        let s: f64 = torus
            .outgoing(x)
            .chain(torus.incoming(x))
            .map(|e| a[e])
            .sum();
        best = best.max(s);
    }
    best
}

/// One forward-Euler step with frozen coefficients `a`.
pub fn step_heat_kernel(
    torus: &Torus,
    state: &mut HeatKernelState,
    a: &[f64],
    dt: f64,
) -> Result<()> {
    let row = max_row_sum(torus, a);
    if dt * row > 1.0 + 1e-12 {
        return Err(Error::Cfl {
            product: dt * row,
            row_sum: row,
            node: None,
        });
    }
    let mut flux = vec![0.0; torus.edge_count()];
    euler_update(torus, &mut state.p, a, dt, &mut flux);
    state.t += dt;
    Ok(())
}

#[inline]
fn euler_update(torus: &Torus, p: &mut [f64], a: &[f64], dt: f64, flux: &mut [f64]) {
    for e in 0..flux.len() {
        flux[e] = dt * a[e] * (p[torus.head(e)] - p[torus.tail(e)]);
    }
    for (e, &q) in flux.iter().enumerate() {
        p[torus.tail(e)] += q;
        p[torus.head(e)] -= q;
    }
}

/// Time series recorded by a solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyFunctionals {
    pub t: Vec<f64>,
    /// `P_a(t, source)`.
    pub diagonal: Vec<f64>,
    /// `Σ_x P²`.
    pub energy: Vec<f64>,
    /// `Σ_e a (∇P)²`.
    pub dirichlet: Vec<f64>,
    /// `Σ_x |x|_*^p P²`, distances measured from the source.
    pub weighted: Vec<f64>,
}

impl EnergyFunctionals {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,P_diag,energy,dirichlet,weighted_energy")?;
        for i in 0..self.t.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.t[i], self.diagonal[i], self.energy[i], self.dirichlet[i], self.weighted[i]
            )?;
        }
        Ok(())
    }
}

/// Geometric output grid: `0` then `per_decade` points per decade from
/// `t_min` up to and including `t_max`.
pub fn geometric_grid(t_min: f64, t_max: f64, per_decade: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let decades = (t_max / t_min).log10();
    let n = (decades * per_decade as f64).ceil() as usize;
    for i in 0..=n {
        let t = t_min * 10f64.powf(i as f64 / per_decade as f64);
        if t < t_max * (1.0 - 1e-12) {
            out.push(t);
        }
    }
    out.push(t_max);
    out
}

/// Running checks of the invariants at every sub-step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Monitor {
    pub substeps: u64,
    pub max_mass_drift: f64,
    pub bound_violations: u64,
    pub max_l1: f64,
    /// Largest increase of `Σ P²` over one sub-step (should be ≤ 0 up to rounding).
    pub max_energy_increase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Minimum number of sub-steps per grid interval.
    pub substeps_per_node: usize,
    /// Exponent p in the weighted energy.
    pub weight_exponent: f64,
    /// Check invariants after every sub-step (costs one pass over the field).
    pub monitor: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            substeps_per_node: 1,
            weight_exponent: 3.0,
            monitor: false,
        }
    }
}

/// Incremental solver: feed it consecutive environment slices.
pub struct HeatKernelSolver<'a> {
    torus: &'a Torus,
    state: HeatKernelState,
    opts: SolverOptions,
    coef: Vec<f64>,
    flux: Vec<f64>,
    weights: Vec<f64>,
    output: Vec<f64>,
    next_output: usize,
    trace: EnergyFunctionals,
    /// `∫_0^t P_a(s, source) ds` by the left Riemann sum of the sub-steps.
    pub integral: f64,
    pub monitor: Monitor,
    nodes_done: usize,
}

impl<'a> HeatKernelSolver<'a> {
    /// `output` lists the times at which functionals are recorded; sub-steps
    /// are shortened to land on them exactly. Pass an empty list to keep the
    /// sub-step pattern independent of the output grid.
    pub fn new(torus: &'a Torus, source: usize, opts: SolverOptions, output: Vec<f64>) -> Self {
        let p = opts.weight_exponent;
        let weights = (0..torus.vertex_count())
            .map(|x| (torus.distance(x, source) + 1.0).powf(p))
            .collect();
        HeatKernelSolver {
            torus,
            state: init_heat_kernel(torus, source, 0.0),
            opts,
            coef: vec![0.0; torus.edge_count()],
            flux: vec![0.0; torus.edge_count()],
            weights,
            output,
            next_output: 0,
            trace: EnergyFunctionals::default(),
            integral: 0.0,
            monitor: Monitor::default(),
            nodes_done: 0,
        }
    }

    pub fn state(&self) -> &HeatKernelState {
        &self.state
    }

    pub fn trace(&self) -> &EnergyFunctionals {
        &self.trace
    }

    pub fn into_parts(self) -> (HeatKernelState, EnergyFunctionals, f64, Monitor) {
        (self.state, self.trace, self.integral, self.monitor)
    }

    fn record(&mut self) {
        let p = &self.state.p;
        let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
        let weighted: Vec<f64> = sq.iter().zip(&self.weights).map(|(a, b)| a * b).collect();
        let dir: Vec<f64> = (0..self.torus.edge_count())
            .map(|e| {
                let g = p[self.torus.head(e)] - p[self.torus.tail(e)];
                self.coef[e] * g * g
            })
            .collect();
        self.trace.t.push(self.state.t);
        self.trace.diagonal.push(p[self.state.source]);
        self.trace.energy.push(pairwise_sum(&sq));
        self.trace.dirichlet.push(pairwise_sum(&dir));
        self.trace.weighted.push(pairwise_sum(&weighted));
    }

    /// Advance over one grid interval of length `h` whose end-point
    /// environments are `a_left` and `a_right`.
    pub fn advance(&mut self, a_left: &[f64], a_right: &[f64], h: f64) -> Result<()> {
        for ((c, l), r) in self.coef.iter_mut().zip(a_left).zip(a_right) {
            *c = 0.5 * (l + r);
        }
        self.advance_frozen(h)
    }

    /// Advance over an interval of length `h` with the coefficient frozen at
    /// `a_mean`, typically the time average of the environment over it.
    pub fn advance_mean(&mut self, a_mean: &[f64], h: f64) -> Result<()> {
        self.coef.copy_from_slice(a_mean);
        self.advance_frozen(h)
    }

    fn advance_frozen(&mut self, h: f64) -> Result<()> {
        let row = max_row_sum(self.torus, &self.coef);
        let needed = (h * row).ceil() as usize;
        let n = needed.max(self.opts.substeps_per_node).max(1);
        let tau = h / n as f64;
        if tau * row > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                product: tau * row,
                row_sum: row,
                node: Some(self.nodes_done),
            });
        }
        let start = self.state.t;
        let t_end = start + h;
        let eps = 1e-12 * t_end.max(1.0);
        for i in 0..n {
            let target = if i + 1 == n {
                t_end
            } else {
                start + (i + 1) as f64 * tau
            };
            // micro-steps stop at any output time inside this sub-step
            loop {
                self.flush_within(eps);
                let stop = match self.output.get(self.next_output) {
                    Some(&o) if o < target - eps => o,
                    _ => target,
                };
                self.substep(stop - self.state.t);
                self.state.t = stop;
                if stop >= target {
                    break;
                }
            }
        }
        self.state.t = t_end;
        self.nodes_done += 1;
        Ok(())
    }

    fn substep(&mut self, dt: f64) {
        let before = if self.opts.monitor {
            self.state.p.iter().map(|v| v * v).sum::<f64>()
        } else {
            0.0
        };
        self.integral += dt * self.state.p[self.state.source];
        euler_update(
            self.torus,
            &mut self.state.p,
            &self.coef,
            dt,
            &mut self.flux,
        );
        if self.opts.monitor {
            let n = self.torus.vertex_count() as f64;
            let m = &mut self.monitor;
            m.substeps += 1;
            m.max_mass_drift = m.max_mass_drift.max(pairwise_sum(&self.state.p).abs());
            let (lo, hi) = (-1.0 / n - 1e-10, 1.0 - 1.0 / n + 1e-10);
            m.bound_violations += self.state.p.iter().filter(|&&v| v < lo || v > hi).count() as u64;
            m.max_l1 = m.max_l1.max(self.state.p.iter().map(|v| v.abs()).sum());
            let after: f64 = self.state.p.iter().map(|v| v * v).sum();
            m.max_energy_increase = m.max_energy_increase.max(after - before);
        }
    }

    fn flush_within(&mut self, eps: f64) {
        while self.next_output < self.output.len()
            && self.output[self.next_output] <= self.state.t + eps
        {
            self.record();
            self.next_output += 1;
        }
    }

    /// Record any output times reached at the current time.
    pub fn flush(&mut self) {
        self.flush_within(1e-12 * self.state.t.max(1.0));
    }
}

/// A source of environment slices on a uniform grid.
pub trait Environment {
    fn spacing(&self) -> f64;
    fn node_count(&self) -> usize;
    fn slice(&self, k: usize) -> &[f64];
}

impl Environment for EnvironmentTrajectory {
    fn spacing(&self) -> f64 {
        self.dt
    }
    fn node_count(&self) -> usize {
        EnvironmentTrajectory::node_count(self)
    }
    fn slice(&self, k: usize) -> &[f64] {
        self.node(k)
    }
}

/// The same edge field at every node, without storing copies.
pub struct ConstantEnvironment {
    pub a: Vec<f64>,
    pub spacing: f64,
    pub nodes: usize,
}

impl Environment for ConstantEnvironment {
    fn spacing(&self) -> f64 {
        self.spacing
    }
    fn node_count(&self) -> usize {
        self.nodes + 1
    }
    fn slice(&self, _k: usize) -> &[f64] {
        &self.a
    }
}

/// Exponential closure of `∫_T^∞ P(t, source) dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailClosure {
    /// Decay rate of `Σ P²` fitted on the last decade of the trace.
    pub energy_rate: f64,
    /// `P(T) / (rate/2)`.
    pub estimate: f64,
    /// `sqrt(𝓔_T) / (rate/2)`, which dominates `∫_T^∞ |P|` under the fit.
    pub bound: f64,
}

pub fn tail_closure(trace: &EnergyFunctionals) -> TailClosure {
    let n = trace.t.len();
    let t_end = trace.t[n - 1];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..n {
        if trace.t[i] >= 0.1 * t_end && trace.energy[i] > 1e-290 {
            xs.push(trace.t[i]);
            ys.push(trace.energy[i].ln());
        }
    }
    let e_end = trace.energy[n - 1];
    let p_end = trace.diagonal[n - 1];
    if e_end == 0.0 {
        return TailClosure {
            energy_rate: f64::INFINITY,
            estimate: 0.0,
            bound: 0.0,
        };
    }
    let rate = if xs.len() >= 3 {
        -linear_fit(&xs, &ys).slope
    } else {
        f64::NAN
    };
    if !(rate > 0.0) {
        return TailClosure {
            energy_rate: rate,
            estimate: 0.0,
            bound: f64::INFINITY,
        };
    }
    TailClosure {
        energy_rate: rate,
        estimate: p_end / (0.5 * rate),
        bound: e_end.sqrt() / (0.5 * rate),
    }
}

/// Result of a full solve along an environment.
#[derive(Debug, Clone)]
pub struct Solve {
    pub state: HeatKernelState,
    pub trace: EnergyFunctionals,
    /// `∫_0^{t_max} P_a(t, source) dt`.
    pub integral: f64,
    pub tail: TailClosure,
    pub monitor: Monitor,
}

impl Solve {
    /// Integral including the fitted tail.
    pub fn total(&self) -> f64 {
        self.integral + self.tail.estimate
    }
}

/// Solve on `[0, t_max]` along `env`, recording functionals on `output`.
pub fn solve_on_environment<E: Environment + ?Sized>(
    torus: &Torus,
    env: &E,
    source: usize,
    t_max: f64,
    opts: SolverOptions,
    output: Vec<f64>,
) -> Result<Solve> {
    let h = env.spacing();
    let nodes = (t_max / h).round() as usize;
    if nodes + 1 > env.node_count() || (nodes as f64 * h - t_max).abs() > 1e-9 * t_max.max(h) {
        return Err(Error::OutsideHorizon {
            t: t_max,
            horizon: (env.node_count() - 1) as f64 * h,
        });
    }
    let mut solver = HeatKernelSolver::new(torus, source, opts, output);
    for k in 0..nodes {
        solver
            .advance(env.slice(k), env.slice(k + 1), h)
            .map_err(|e| match e {
                Error::Cfl {
                    product, row_sum, ..
                } => Error::Cfl {
                    product,
                    row_sum,
                    node: Some(k),
                },
                other => other,
            })?;
    }
    solver.flush();
    let (state, trace, integral, monitor) = solver.into_parts();
    let tail = if trace.t.len() >= 2 {
        tail_closure(&trace)
    } else {
        TailClosure {
            energy_rate: f64::NAN,
            estimate: 0.0,
            bound: f64::INFINITY,
        }
    };
    Ok(Solve {
        state,
        trace,
        integral,
        tail,
        monitor,
    })
}

/// Solve on a stored trajectory over `[0, t_max]` with the default geometric output grid.
pub fn solve_on_trajectory(
    torus: &Torus,
    traj: &EnvironmentTrajectory,
    source: usize,
    t_max: f64,
    substeps_per_node: usize,
) -> Result<Solve> {
    let opts = SolverOptions {
        substeps_per_node,
        ..SolverOptions::default()
    };
    solve_on_environment(
        torus,
        traj,
        source,
        t_max,
        opts,
        geometric_grid(1e-2, t_max, 20),
    )
}

/// `T_max = max(20, 5L²/2)`.
pub fn default_t_max(l: usize) -> f64 {
    20f64.max(2.5 * (l * l) as f64)
}

/// `P_a(t_k, ·)` at grid nodes `0..=nodes`.
pub fn node_fields<E: Environment + ?Sized>(
    torus: &Torus,
    env: &E,
    source: usize,
    nodes: usize,
    substeps_per_node: usize,
) -> Result<Vec<Vec<f64>>> {
    if nodes + 1 > env.node_count() {
        return Err(Error::OutsideHorizon {
            t: nodes as f64 * env.spacing(),
            horizon: (env.node_count() - 1) as f64 * env.spacing(),
        });
    }
    let opts = SolverOptions {
        substeps_per_node,
        monitor: false,
        ..SolverOptions::default()
    };
    let mut solver = HeatKernelSolver::new(torus, source, opts, Vec::new());
    let mut out = Vec::with_capacity(nodes + 1);
    out.push(solver.state().p.clone());
    for k in 0..nodes {
        solver.advance(env.slice(k), env.slice(k + 1), env.spacing())?;
        out.push(solver.state().p.clone());
    }
    Ok(out)
}

/// Final field of a solve without output recording; used for the
/// semigroup split, where the sub-step pattern must match the transpose.
pub fn propagate<E: Environment + ?Sized>(
    torus: &Torus,
    env: &E,
    source: usize,
    t: f64,
) -> Result<Vec<f64>> {
    Ok(
        solve_on_environment(torus, env, source, t, SolverOptions::default(), Vec::new())?
            .state
            .p,
    )
}

/// `P_a(t,0)` computed as `Σ_x P_{a^{(t)}}(t/2, x)·P_a(t/2, x)`, together
/// with the direct value and the Cauchy–Schwarz bound
/// `‖P_{a^{(t)}}(t/2)‖₂ ‖P_a(t/2)‖₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCheck {
    pub direct: f64,
    pub split: f64,
    pub cauchy_schwarz: f64,
}

pub fn semigroup_split(
    torus: &Torus,
    traj: &EnvironmentTrajectory,
    source: usize,
    t: f64,
) -> Result<SplitCheck> {
    let half = 0.5 * t;
    traj.node_index(half)?;
    let direct = propagate(torus, traj, source, t)?[source];
    let forward = propagate(torus, traj, source, half)?;
    let reversed = traj.reversed(t)?;
    let backward = propagate(torus, &reversed, source, half)?;
    let prod: Vec<f64> = forward.iter().zip(&backward).map(|(a, b)| a * b).collect();
    let n2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(SplitCheck {
        direct,
        split: pairwise_sum(&prod),
        cauchy_schwarz: n2(&forward) * n2(&backward),
    })
}
