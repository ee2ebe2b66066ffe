//! Langevin dynamics on the torus: exact-invariant sampling of the Gibbs
//! measure, unadjusted trajectory evolution, and the Brownian
//! increment/bridge decomposition.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{gradient_field, Torus};
use crate::potential::PotentialSpec;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// Euler–Maruyama without rejection; carries an O(dt) bias.
    Plain,
    /// Metropolis-adjusted Langevin: leapfrog proposals with an
    /// accept/reject step, so the invariant law is exactly the Gibbs measure.
    MetropolisAdjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtPolicy {
    Fixed,
    Adaptive,
}

/// Curvature-scaled step bound: `dt ≤ STABILITY / (2d · max V'')`.
pub const STABILITY: f64 = 0.25;
pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    /// Euler–Maruyama step, or the initial leapfrog step when adjusted.
    pub dt: f64,
    /// Burn-in duration in time units.
    pub burn_in: f64,
    /// Time between retained samples.
    pub thinning: f64,
    pub chain_count: usize,
    pub seed: u64,
    pub correction: Correction,
    pub dt_policy: DtPolicy,
    /// Hamiltonian time of one adjusted proposal. A single leapfrog step
    /// (`trajectory_time == dt`) is the classical MALA proposal.
    #[serde(default = "default_trajectory_time")]
    pub trajectory_time: f64,
    #[serde(default = "default_guard")]
    pub blowup_guard: f64,
}

fn default_trajectory_time() -> f64 {
    1.0
}

fn default_guard() -> f64 {
    DEFAULT_BLOWUP_GUARD
}

impl LangevinConfig {
    /// Defaults for a torus of half-side `l`: burn-in 10·L², adjusted sampling.
    pub fn for_torus(l: usize, seed: u64) -> Self {
        let traj = (0.5 * l as f64).max(1.0);
        LangevinConfig {
            dt: 0.05,
            burn_in: 10.0 * (l * l) as f64,
            thinning: traj,
            chain_count: 4,
            seed,
            correction: Correction::MetropolisAdjusted,
            dt_policy: DtPolicy::Adaptive,
            trajectory_time: traj,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let f = |name: &str| format!("{prefix}.{name}");
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(f("dt"), "must be positive"));
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::invalid(f("burn_in"), "must be nonnegative"));
        }
        if !(self.thinning > 0.0) {
            return Err(Error::invalid(f("thinning"), "must be positive"));
        }
        if self.chain_count == 0 {
            return Err(Error::invalid(f("chain_count"), "must be at least 1"));
        }
        if !(self.trajectory_time >= self.dt) {
            return Err(Error::invalid(f("trajectory_time"), "must be at least dt"));
        }
        if !(self.blowup_guard > 0.0) {
            return Err(Error::invalid(f("blowup_guard"), "must be positive"));
        }
        Ok(())
    }
}

/// Scratch buffers for force evaluation.
#[derive(Debug, Clone)]
pub struct Workspace {
    grads: Vec<f64>,
    flux: Vec<f64>,
    drift: Vec<f64>,
}

impl Workspace {
    pub fn new(torus: &Torus) -> Self {
        Workspace {
            grads: vec![0.0; torus.edge_count()],
            flux: vec![0.0; torus.edge_count()],
            drift: vec![0.0; torus.vertex_count()],
        }
    }

    pub fn gradients(&self) -> &[f64] {
        &self.grads
    }
}

/// Fill `ws.drift` with `∇·V'(∇φ)`; returns (max |∇φ|, max V''(∇φ)).
fn drift(torus: &Torus, v: &PotentialSpec, phi: &[f64], ws: &mut Workspace) -> (f64, f64) {
    gradient_field(torus, phi, &mut ws.grads);
    let mut max_grad = 0.0f64;
    let mut max_curv = 0.0f64;
    for (q, &g) in ws.flux.iter_mut().zip(&ws.grads) {
        *q = v.first(g);
        max_grad = max_grad.max(g.abs());
        max_curv = max_curv.max(v.second(g));
    }
    ws.drift.iter_mut().for_each(|x| *x = 0.0);
    crate::lattice::accumulate_divergence(torus, &ws.flux, 1.0, &mut ws.drift);
    (max_grad, max_curv)
}

fn energy(v: &PotentialSpec, grads: &[f64]) -> f64 {
    let terms: Vec<f64> = grads.iter().map(|&g| v.value(g)).collect();
    crate::stats::pairwise_sum(&terms)
}

fn project(values: &mut [f64]) {
    let m = crate::stats::mean(values);
    values.iter_mut().for_each(|x| *x -= m);
}

/// Largest stable Euler–Maruyama step for the current maximal curvature.
pub fn stable_dt(d: usize, max_curvature: f64) -> f64 {
    if max_curvature <= 0.0 {
        f64::INFINITY
    } else {
        STABILITY / (2.0 * d as f64 * max_curvature)
    }
}

/// One explicit Euler–Maruyama step `φ + dt·∇·V'(∇φ) + √(2dt)·ξ`, followed
/// by projection onto mean-zero fields.
pub fn langevin_step(
    torus: &Torus,
    phi: &[f64],
    v: &PotentialSpec,
    dt: f64,
    noise: &[f64],
    guard: f64,
) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(torus);
    let (max_grad, _) = drift(torus, v, phi, &mut ws);
    if !(max_grad <= guard) {
        return Err(Error::UnstableStep {
            time: 0.0,
            max_gradient: max_grad,
        });
    }
    let s = (2.0 * dt).sqrt();
    let mut out: Vec<f64> = (0..phi.len())
        .map(|x| phi[x] + dt * ws.drift[x] + s * noise[x])
        .collect();
    project(&mut out);
    Ok(out)
}

/// Per-chain diagnostics reported alongside samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ChainDiagnostics {
    pub proposals: u64,
    pub accepted: u64,
    pub acceptance_rate: f64,
    pub step_size: f64,
}

/// One Markov chain targeting the Gibbs measure on mean-zero fields.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub index: usize,
    path: String,
    seed: u64,
    field: Vec<f64>,
    rng: Stream,
    step: f64,
    proposals: u64,
    accepted: u64,
    burned_in: bool,
    ws: Workspace,
    momentum: Vec<f64>,
    scratch: Vec<f64>,
}

impl GibbsChain {
    /// A chain started from φ ≡ 0 on the stream `"{prefix}/chain/{index}"`.
    pub fn new(torus: &Torus, cfg: &LangevinConfig, prefix: &str, index: usize) -> Self {
        let path = format!("{prefix}/chain/{index}");
        GibbsChain {
            index,
            rng: stream(cfg.seed, &path),
            path,
            seed: cfg.seed,
            field: vec![0.0; torus.vertex_count()],
            step: cfg.dt,
            proposals: 0,
            accepted: 0,
            burned_in: false,
            ws: Workspace::new(torus),
            momentum: vec![0.0; torus.vertex_count()],
            scratch: vec![0.0; torus.vertex_count()],
        }
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn stream_path(&self) -> &str {
        &self.path
    }

    pub fn is_burned_in(&self) -> bool {
        self.burned_in
    }

    pub fn diagnostics(&self) -> ChainDiagnostics {
        ChainDiagnostics {
            proposals: self.proposals,
            accepted: self.accepted,
            acceptance_rate: if self.proposals > 0 {
                self.accepted as f64 / self.proposals as f64
            } else {
                0.0
            },
            step_size: self.step,
        }
    }

    /// Run the burn-in period. Adaptive chains tune their step towards the
    /// target acceptance here and keep it frozen afterwards.
    pub fn burn_in(
        &mut self,
        torus: &Torus,
        v: &PotentialSpec,
        cfg: &LangevinConfig,
    ) -> Result<()> {
        if self.burned_in {
            return Ok(());
        }
        let adapt = cfg.dt_policy == DtPolicy::Adaptive;
        let mut elapsed = 0.0;
        let mut n = 0u64;
        while elapsed < cfg.burn_in {
            elapsed += self.advance(torus, v, cfg, adapt.then_some(n))?;
            n += 1;
        }
        self.proposals = 0;
        self.accepted = 0;
        self.burned_in = true;
        Ok(())
    }

    /// Advance by the thinning interval and return the new state.
    pub fn next_sample(
        &mut self,
        torus: &Torus,
        v: &PotentialSpec,
        cfg: &LangevinConfig,
    ) -> Result<&[f64]> {
        if !self.burned_in {
            self.burn_in(torus, v, cfg)?;
        }
        let mut elapsed = 0.0;
        // tolerance keeps `thinning == trajectory_time` at one proposal
        while elapsed < cfg.thinning * (1.0 - 1e-9) {
            elapsed += self.advance(torus, v, cfg, None)?;
        }
        Ok(&self.field)
    }

    /// One update; returns the elapsed time. `adapt` carries the burn-in
    /// iteration index when the step is being tuned.
    fn advance(
        &mut self,
        torus: &Torus,
        v: &PotentialSpec,
        cfg: &LangevinConfig,
        adapt: Option<u64>,
    ) -> Result<f64> {
        match cfg.correction {
            Correction::Plain => self.euler(torus, v, cfg),
            Correction::MetropolisAdjusted => self.hamiltonian(torus, v, cfg, adapt),
        }
    }

    fn euler(&mut self, torus: &Torus, v: &PotentialSpec, cfg: &LangevinConfig) -> Result<f64> {
        let (max_grad, max_curv) = drift(torus, v, &self.field, &mut self.ws);
        if !(max_grad <= cfg.blowup_guard) {
            return Err(Error::UnstableStep {
                time: f64::NAN,
                max_gradient: max_grad,
            });
        }
        let bound = stable_dt(torus.d(), max_curv);
        let dt = match cfg.dt_policy {
            DtPolicy::Adaptive => cfg.dt.min(bound),
            DtPolicy::Fixed if cfg.dt <= bound => cfg.dt,
            DtPolicy::Fixed => return Err(Error::StepTooLarge { dt: cfg.dt, bound }),
        };
        let s = (2.0 * dt).sqrt();
        for x in 0..self.field.len() {
            let xi: f64 = self.rng.sample(StandardNormal);
            self.field[x] += dt * self.ws.drift[x] + s * xi;
        }
        project(&mut self.field);
        self.proposals += 1;
        self.accepted += 1;
        Ok(dt)
    }

    fn hamiltonian(
        &mut self,
        torus: &Torus,
        v: &PotentialSpec,
        cfg: &LangevinConfig,
        adapt: Option<u64>,
    ) -> Result<f64> {
        let eps = self.step;
        let base = (cfg.trajectory_time / eps).round().max(1.0) as usize;
        // jitter the path length to avoid resonances with periodic modes
        let steps = if base > 1 {
            self.rng.random_range(base.div_ceil(2)..=base)
        } else {
            1
        };

        for p in self.momentum.iter_mut() {
            *p = self.rng.sample(StandardNormal);
        }
        project(&mut self.momentum);
        self.scratch.copy_from_slice(&self.field);

        let (max_grad, _) = drift(torus, v, &self.field, &mut self.ws);
        if !(max_grad <= cfg.blowup_guard) {
            return Err(Error::UnstableStep {
                time: f64::NAN,
                max_gradient: max_grad,
            });
        }
        let kinetic = |p: &[f64]| 0.5 * p.iter().map(|x| x * x).sum::<f64>();
        let h0 = energy(v, &self.ws.grads) + kinetic(&self.momentum);

        // force is the divergence, so p += eps/2 * drift
        for (p, f) in self.momentum.iter_mut().zip(&self.ws.drift) {
            *p += 0.5 * eps * f;
        }
        let mut ok = true;
        for i in 0..steps {
            for (x, p) in self.field.iter_mut().zip(&self.momentum) {
                *x += eps * p;
            }
            let (g, _) = drift(torus, v, &self.field, &mut self.ws);
            if !(g <= cfg.blowup_guard) {
                ok = false;
                break;
            }
            let w = if i + 1 == steps { 0.5 * eps } else { eps };
            for (p, f) in self.momentum.iter_mut().zip(&self.ws.drift) {
                *p += w * f;
            }
        }
        let log_ratio = if ok {
            let h1 = energy(v, &self.ws.grads) + kinetic(&self.momentum);
            h0 - h1
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = self.rng.random();
        let accept_prob = if log_ratio.is_nan() {
            0.0
        } else {
            log_ratio.min(0.0).exp()
        };
        self.proposals += 1;
        if u < accept_prob {
            self.accepted += 1;
            project(&mut self.field);
        } else {
            self.field.copy_from_slice(&self.scratch);
        }
        if let Some(n) = adapt {
            const TARGET: f64 = 0.75;
            let gain = 1.0 / (n as f64 + 10.0).powf(0.6);
            self.step = (self.step.ln() + gain * (accept_prob - TARGET))
                .exp()
                .min(cfg.trajectory_time);
        }
        Ok(eps * steps as f64)
    }

    pub fn state(&self) -> ChainState {
        ChainState {
            index: self.index as u64,
            seed: self.seed,
            path: self.path.clone(),
            word_pos: self.rng.get_word_pos(),
            step: self.step,
            proposals: self.proposals,
            accepted: self.accepted,
            burned_in: self.burned_in,
            field: self.field.clone(),
        }
    }

    pub fn restore(torus: &Torus, state: &ChainState) -> Result<Self> {
        if state.field.len() != torus.vertex_count() {
            return Err(Error::Checkpoint(
                "chain field does not match the torus".into(),
            ));
        }
        Ok(GibbsChain {
            index: state.index as usize,
            path: state.path.clone(),
            seed: state.seed,
            field: state.field.clone(),
            rng: crate::rng::stream_at(state.seed, &state.path, state.word_pos),
            step: state.step,
            proposals: state.proposals,
            accepted: state.accepted,
            burned_in: state.burned_in,
            ws: Workspace::new(torus),
            momentum: vec![0.0; torus.vertex_count()],
            scratch: vec![0.0; torus.vertex_count()],
        })
    }
}

/// Everything needed to resume a chain bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub index: u64,
    pub seed: u64,
    pub path: String,
    pub word_pos: u128,
    pub step: f64,
    pub proposals: u64,
    pub accepted: u64,
    pub burned_in: bool,
    pub field: Vec<f64>,
}

const CHAIN_MAGIC: &[u8; 8] = b"GPCHAIN1";

impl ChainState {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHAIN_MAGIC)?;
        w.write_u64::<LittleEndian>(self.index)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        write_str(w, &self.path)?;
        w.write_u128::<LittleEndian>(self.word_pos)?;
        w.write_f64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.proposals)?;
        w.write_u64::<LittleEndian>(self.accepted)?;
        w.write_u8(self.burned_in as u8)?;
        w.write_u64::<LittleEndian>(self.field.len() as u64)?;
        for &x in &self.field {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHAIN_MAGIC {
            return Err(Error::Format("not a chain record".into()));
        }
        let index = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let path = read_str(r)?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let step = r.read_f64::<LittleEndian>()?;
        let proposals = r.read_u64::<LittleEndian>()?;
        let accepted = r.read_u64::<LittleEndian>()?;
        let burned_in = r.read_u8()? != 0;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut field = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut field)?;
        Ok(ChainState {
            index,
            seed,
            path,
            word_pos,
            step,
            proposals,
            accepted,
            burned_in,
            field,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 20 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string field is not UTF-8".into()))
}

/// Run `cfg.chain_count` chains in parallel and map every retained sample
/// through `observe`. The result is indexed by chain, then by sample, and
/// does not depend on the number of worker threads.
pub fn sample_gibbs<T, F>(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    prefix: &str,
    samples_per_chain: usize,
    observe: F,
) -> Result<(Vec<Vec<T>>, Vec<ChainDiagnostics>)>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    let out: Result<Vec<(Vec<T>, ChainDiagnostics)>> = (0..cfg.chain_count)
        .into_par_iter()
        .map(|c| {
            let mut chain = GibbsChain::new(torus, cfg, prefix, c);
            chain.burn_in(torus, v, cfg)?;
            let mut obs = Vec::with_capacity(samples_per_chain);
            for _ in 0..samples_per_chain {
                obs.push(observe(chain.next_sample(torus, v, cfg)?));
            }
            Ok((obs, chain.diagnostics()))
        })
        .collect();
    Ok(out?.into_iter().unzip())
}

/// Parameters of an unadjusted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveParams {
    /// Spacing of the recorded time grid.
    pub node_spacing: f64,
    /// Upper bound on the Euler–Maruyama step.
    pub dt: f64,
    pub dt_policy: DtPolicy,
    /// Multiplier of the noise; 0 gives the deterministic gradient flow.
    pub noise_scale: f64,
    pub blowup_guard: f64,
}

impl EvolveParams {
    pub fn new(node_spacing: f64, dt: f64) -> Self {
        EvolveParams {
            node_spacing,
            dt,
            dt_policy: DtPolicy::Adaptive,
            noise_scale: 1.0,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }
}

/// Evolve `phi` under unadjusted Langevin dynamics for `nodes` grid
/// intervals. `visit(k, grads)` sees the gradient field at every node
/// `k = 0..=nodes`. Returns the number of Euler–Maruyama steps taken.
pub fn evolve<F>(
    torus: &Torus,
    v: &PotentialSpec,
    phi: &mut [f64],
    params: &EvolveParams,
    nodes: usize,
    rng: &mut Stream,
    visit: F,
) -> Result<u64>
where
    F: FnMut(usize, &[f64]) -> Result<()>,
{
    evolve_with_steps(torus, v, phi, params, nodes, rng, |_, _| {}, visit)
}

/// As [`evolve`], with `step(dt, grads)` called after every
/// Euler–Maruyama step with the gradients of the new state.
#[allow(clippy::too_many_arguments)]
pub fn evolve_with_steps<S, F>(
    torus: &Torus,
    v: &PotentialSpec,
    phi: &mut [f64],
    params: &EvolveParams,
    nodes: usize,
    rng: &mut Stream,
    mut step: S,
    mut visit: F,
) -> Result<u64>
where
    S: FnMut(f64, &[f64]),
    F: FnMut(usize, &[f64]) -> Result<()>,
{
    let mut ws = Workspace::new(torus);
    let h = params.node_spacing;
    let mut steps = 0u64;
    let (mut max_grad, mut max_curv) = drift(torus, v, phi, &mut ws);
    visit(0, &ws.grads)?;
    for k in 1..=nodes {
        let mut remaining = h;
        let t0 = (k - 1) as f64 * h;
        // fixed policy: uniform substeps no longer than dt
        let fixed = (h / params.dt).ceil().max(1.0);
        while remaining > 1e-12 * h {
            if !(max_grad <= params.blowup_guard) {
                return Err(Error::UnstableStep {
                    time: t0 + h - remaining,
                    max_gradient: max_grad,
                });
            }
            let bound = stable_dt(torus.d(), max_curv);
            let dt = match params.dt_policy {
                DtPolicy::Adaptive => params.dt.min(bound).min(remaining),
                DtPolicy::Fixed => {
                    let dt = (h / fixed).min(remaining);
                    if dt > bound {
                        return Err(Error::StepTooLarge { dt, bound });
                    }
                    dt
                }
            };
            let s = params.noise_scale * (2.0 * dt).sqrt();
            for x in 0..phi.len() {
                let xi: f64 = if s != 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                phi[x] += dt * ws.drift[x] + s * xi;
            }
            project(phi);
            // the last step of an interval absorbs the rounding remainder
            remaining = if remaining - dt <= 1e-12 * h {
                0.0
            } else {
                remaining - dt
            };
            steps += 1;
            (max_grad, max_curv) = drift(torus, v, phi, &mut ws);
            step(dt, &ws.grads);
        }
        visit(k, &ws.grads)?;
    }
    Ok(steps)
}

/// Edge environment `a(t,e) = V''(∇φ(t,e))` on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentTrajectory {
    pub d: usize,
    pub l: usize,
    /// Grid spacing.
    pub dt: f64,
    pub edge_count: usize,
    pub potential_tag: String,
    pub seed: u64,
    /// Node-major: entries `k * edge_count .. (k+1) * edge_count` are node k.
    pub data: Vec<f64>,
}

impl EnvironmentTrajectory {
    pub fn node_count(&self) -> usize {
        self.data.len() / self.edge_count
    }

    pub fn horizon(&self) -> f64 {
        (self.node_count() - 1) as f64 * self.dt
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.edge_count..(k + 1) * self.edge_count]
    }

    pub fn at(&self, k: usize, e: usize) -> f64 {
        self.data[k * self.edge_count + e]
    }

    /// A trajectory that repeats the same slice at `nodes + 1` grid points.
    pub fn constant(torus: &Torus, slice: &[f64], dt: f64, nodes: usize, tag: &str) -> Self {
        let mut data = Vec::with_capacity(slice.len() * (nodes + 1));
        for _ in 0..=nodes {
            data.extend_from_slice(slice);
        }
        EnvironmentTrajectory {
            d: torus.d(),
            l: torus.l(),
            dt,
            edge_count: torus.edge_count(),
            potential_tag: tag.to_string(),
            seed: 0,
            data,
        }
    }

    /// Grid index of time `t`, which must lie on the grid.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if !(t >= 0.0)
            || k as usize >= self.node_count()
            || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t)
        {
            return Err(Error::OutsideHorizon {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(k as usize)
    }

    /// Restriction to `[0, t]`.
    pub fn restrict(&self, t: f64) -> Result<Self> {
        let k = self.node_index(t)?;
        let mut out = self.clone();
        out.data.truncate((k + 1) * self.edge_count);
        Ok(out)
    }

    /// `a^{(t)}(t', e) = a(t - t', e)` on `[0, t]`.
    pub fn reversed(&self, t: f64) -> Result<Self> {
        let k = self.node_index(t)?;
        let mut out = self.clone();
        out.data.clear();
        for j in (0..=k).rev() {
            out.data.extend_from_slice(self.node(j));
        }
        Ok(out)
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TRAJ_MAGIC)?;
        w.write_u32::<LittleEndian>(self.d as u32)?;
        w.write_u32::<LittleEndian>(self.l as u32)?;
        w.write_f64::<LittleEndian>(self.dt)?;
        w.write_u64::<LittleEndian>(self.node_count() as u64)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        write_str(w, &self.potential_tag)?;
        for &x in &self.data {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::Format("not a trajectory record".into()));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let l = r.read_u32::<LittleEndian>()? as usize;
        let dt = r.read_f64::<LittleEndian>()?;
        let nodes = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let potential_tag = read_str(r)?;
        let edge_count = d * (2 * l + 1).pow(d as u32);
        let mut data = vec![0.0; nodes * edge_count];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        Ok(EnvironmentTrajectory {
            d,
            l,
            dt,
            edge_count,
            potential_tag,
            seed,
            data,
        })
    }

    /// Plain-text companion describing the binary layout.
    pub fn manifest(&self) -> String {
        format!(
            "format = gradphi-trajectory/1\nd = {}\nL = {}\ndt = {}\nnode_count = {}\nedge_count = {}\nseed = {}\npotential = {}\nlayout = header then node-major edge arrays, f64 little-endian\n",
            self.d,
            self.l,
            self.dt,
            self.node_count(),
            self.edge_count,
            self.seed,
            self.potential_tag
        )
    }
}

const TRAJ_MAGIC: &[u8; 8] = b"GPTRAJ01";

/// `|∇φ(t,e)|` recorded at every grid node for a set of probe edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTraces {
    pub edges: Vec<usize>,
    /// Node-major, one entry per probe edge.
    pub values: Vec<f64>,
}

/// Evolve from a stationary start and record the environment on the grid.
#[allow(clippy::too_many_arguments)]
pub fn evolve_trajectory(
    torus: &Torus,
    v: &PotentialSpec,
    phi0: &[f64],
    params: &EvolveParams,
    horizon: f64,
    seed: u64,
    stream_path: &str,
    probes: &[usize],
) -> Result<(EnvironmentTrajectory, ProbeTraces)> {
    let nodes = (horizon / params.node_spacing).round() as usize;
    let mut phi = phi0.to_vec();
    let mut rng = stream(seed, stream_path);
    let mut data = Vec::with_capacity((nodes + 1) * torus.edge_count());
    let mut traces = Vec::with_capacity((nodes + 1) * probes.len());
    evolve(torus, v, &mut phi, params, nodes, &mut rng, |_, grads| {
        data.extend(grads.iter().map(|&g| v.second(g)));
        traces.extend(probes.iter().map(|&e| grads[e].abs()));
        Ok(())
    })?;
    let traj = EnvironmentTrajectory {
        d: torus.d(),
        l: torus.l(),
        dt: params.node_spacing,
        edge_count: torus.edge_count(),
        potential_tag: v.tag().to_string(),
        seed,
        data,
    };
    Ok((
        traj,
        ProbeTraces {
            edges: probes.to_vec(),
            values: traces,
        },
    ))
}

/// Per-site unit-window increments and Brownian bridges of a driving path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDecomposition {
    pub sites: usize,
    pub windows: usize,
    /// Sub-grid points per unit window.
    pub substeps: usize,
    /// Path value at t = 0, per site.
    pub origin: Vec<f64>,
    /// `X_n(x) = B_{n+1}(x) - B_n(x)`, index `x * windows + n`.
    pub increments: Vec<f64>,
    /// `W_n(s, x)` for s on the sub-grid of [0, 1], index
    /// `(x * windows + n) * (substeps + 1) + j`.
    pub bridges: Vec<f64>,
}

/// `path[x]` holds `B(x)` at times `j / substeps`, `j = 0..=windows·substeps`.
pub fn decompose_noise(
    path: &[Vec<f64>],
    windows: usize,
    substeps: usize,
) -> Result<NoiseDecomposition> {
    if windows == 0 || substeps == 0 {
        return Err(Error::invalid(
            "noise",
            "need at least one window and one substep",
        ));
    }
    let len = windows * substeps + 1;
    if path.iter().any(|p| p.len() != len) {
        return Err(Error::invalid(
            "noise",
            format!("path length must be windows*substeps+1 = {len}"),
        ));
    }
    let sites = path.len();
    let mut increments = Vec::with_capacity(sites * windows);
    let mut bridges = Vec::with_capacity(sites * windows * (substeps + 1));
    for p in path {
        for n in 0..windows {
            let b0 = p[n * substeps];
            let x = p[(n + 1) * substeps] - b0;
            increments.push(x);
            for j in 0..=substeps {
                let s = j as f64 / substeps as f64;
                bridges.push(p[n * substeps + j] - b0 - s * x);
            }
        }
    }
    Ok(NoiseDecomposition {
        sites,
        windows,
        substeps,
        origin: path.iter().map(|p| p[0]).collect(),
        increments,
        bridges,
    })
}

impl NoiseDecomposition {
    pub fn increment(&self, x: usize, n: usize) -> f64 {
        self.increments[x * self.windows + n]
    }

    pub fn bridge(&self, x: usize, n: usize, j: usize) -> f64 {
        self.bridges[(x * self.windows + n) * (self.substeps + 1) + j]
    }

    /// `B_t = B_0 + Σ_{k<n} X_k + (t-n)·X_n + W_n(t-n)` on the sub-grid.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        (0..self.sites)
            .map(|x| {
                let mut out = Vec::with_capacity(self.windows * self.substeps + 1);
                let mut acc = self.origin[x];
                for n in 0..self.windows {
                    let xn = self.increment(x, n);
                    let last = if n + 1 == self.windows {
                        self.substeps
                    } else {
                        self.substeps - 1
                    };
                    for j in 0..=last {
                        let s = j as f64 / self.substeps as f64;
                        out.push(acc + s * xn + self.bridge(x, n, j));
                    }
                    acc += xn;
                }
                out
            })
            .collect()
    }
}

/// Standard Brownian paths for `sites` sites on the sub-grid.
pub fn brownian_paths(
    rng: &mut Stream,
    sites: usize,
    windows: usize,
    substeps: usize,
) -> Vec<Vec<f64>> {
    let h = (1.0 / substeps as f64).sqrt();
    (0..sites)
        .map(|_| {
            let mut b = 0.0;
            let mut p = vec![0.0];
            for _ in 0..windows * substeps {
                let z: f64 = rng.sample(StandardNormal);
                b += h * z;
                p.push(b);
            }
            p
        })
        .collect()
}
