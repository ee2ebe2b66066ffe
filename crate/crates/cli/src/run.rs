//! Experiment orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{bail, Context};
use gradphi::dynamics::{sample_gibbs, ChainState, GibbsChain};
use gradphi::estimators::{
    combined_sigma, confinement_probability, gradient_tail, heat_kernel_decay, hs_variance,
    mc_variance, variance_from_observations, variance_observation,
};
use gradphi::heat_kernel::geometric_grid;
use gradphi::inequalities::{exponent_table, moderation_experiment};
use gradphi::lattice::gradient_field;
use gradphi::moderation::check_k_properties;
use gradphi::spectral_oracle::{gaussian_variance, SpectrumTable};
use gradphi::stats::{linear_fit, mean};
use gradphi::{EvolveParams, LangevinConfig, ModerationWeights, PotentialSpec, Torus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::output::{plot_script, Artifacts, Check, Estimate, Status, Summary, SCHEMA_VERSION};

/// Bookkeeping stored next to the outputs so a run can be resumed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub schema_version: u32,
    pub chain_hash: String,
    /// Directory the original config was read from; relative potential
    /// table paths resolve against it.
    pub config_dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop every chain after this many retained samples (0: right after
    /// burn-in), leaving checkpoints for `resume`.
    pub stop_after: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

pub const CONFIG_COPY: &str = "config.toml";
pub const MANIFEST: &str = "run.json";
pub const SUMMARY: &str = "summary.json";

/// Validate and run the experiment described by the config file at `path`.
pub fn run(path: &Path, opts: &RunOptions) -> anyhow::Result<Summary> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    let v = cfg.validate(&base)?;
    let out = match &opts.output_dir {
        Some(d) => d.clone(),
        None if cfg.output_dir.is_absolute() => cfg.output_dir.clone(),
        None => base.join(&cfg.output_dir),
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        chain_hash: cfg.chain_hash(),
        config_dir: fs::canonicalize(&base).unwrap_or(base.clone()),
    };
    if let Ok(old) = read_manifest(&out) {
        if old.chain_hash != manifest.chain_hash {
            bail!(
                "{} holds a different run (config hash {}); choose another output directory",
                out.display(),
                old.chain_hash
            );
        }
    }
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join(CONFIG_COPY), cfg.to_toml())?;
    execute(&cfg, &v, &out, opts)
}

fn read_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Continue the run stored in `dir`, optionally with a new per-chain budget.
pub fn resume(dir: &Path, samples_per_chain: Option<usize>) -> anyhow::Result<Summary> {
    let manifest = read_manifest(dir)
        .with_context(|| format!("{} does not contain a resumable run", dir.display()))?;
    let mut cfg = ExperimentConfig::load(&dir.join(CONFIG_COPY))?;
    if cfg.chain_hash() != manifest.chain_hash {
        return Err(gradphi::Error::Checkpoint(format!(
            "config hash {} does not match the checkpointed run {}",
            cfg.chain_hash(),
            manifest.chain_hash
        ))
        .into());
    }
    if let Some(n) = samples_per_chain {
        cfg.variance.samples_per_chain = n;
    }
    let v = cfg.validate(&manifest.config_dir)?;
    fs::write(dir.join(CONFIG_COPY), cfg.to_toml())?;
    execute(&cfg, &v, dir, &RunOptions::default())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    v: &'a PotentialSpec,
    art: Artifacts,
    estimates: Vec<Estimate>,
    checks: Vec<Check>,
    streams: Vec<String>,
    errors: Vec<String>,
    partial: bool,
}

impl Ctx<'_> {
    fn check(&mut self, name: String, value: f64, tolerance: f64, pass: bool) {
        self.checks.push(Check {
            name,
            value,
            tolerance,
            pass,
        });
    }

    fn fail(&mut self, what: String, e: impl std::fmt::Display) {
        self.errors.push(format!("{what}: {e}"));
        self.partial = true;
    }

    fn langevin(&self, l: usize) -> LangevinConfig {
        self.cfg.sampler.langevin(l, self.cfg.seed)
    }
}

fn range(prefix: &str, n: usize) -> String {
    format!("{prefix}/{{0..{}}}", n.saturating_sub(1))
}

/// Run an already validated config, writing everything into `out`.
pub fn execute(
    cfg: &ExperimentConfig,
    v: &PotentialSpec,
    out: &Path,
    opts: &RunOptions,
) -> anyhow::Result<Summary> {
    let mut ctx = Ctx {
        cfg,
        v,
        art: Artifacts::new(out)?,
        estimates: Vec::new(),
        checks: Vec::new(),
        streams: Vec::new(),
        errors: Vec::new(),
        partial: false,
    };
    match cfg.experiment {
        ExperimentKind::Oracle => oracle(&mut ctx)?,
        ExperimentKind::VarianceSweep => variance_sweep(&mut ctx, opts.stop_after)?,
        ExperimentKind::HsCheck => hs_check(&mut ctx)?,
        ExperimentKind::HeatkernelDecay => decay(&mut ctx)?,
        ExperimentKind::Tails => tails(&mut ctx)?,
        ExperimentKind::ExitTime => exit_time(&mut ctx)?,
        ExperimentKind::Inequalities => inequalities(&mut ctx)?,
    }
    ctx.art
        .write_text("plot.py", &plot_script(cfg.experiment.name()))?;
    let mut files = ctx.art.files.clone();
    files.push(SUMMARY.into());
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment.name().into(),
        status: if ctx.partial {
            Status::Partial
        } else {
            Status::Complete
        },
        config_hash: cfg.hash(),
        seed: cfg.seed,
        workers: rayon::current_num_threads(),
        stream_tree: ctx.streams,
        estimates: ctx.estimates,
        checks: ctx.checks,
        files,
        errors: ctx.errors,
    };
    fs::write(out.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Serialize)]
struct OracleRow {
    #[serde(rename = "L")]
    l: usize,
    ln_l: f64,
    variance: f64,
    trace_residual: f64,
}

fn oracle(ctx: &mut Ctx) -> anyhow::Result<()> {
    let d = ctx.cfg.torus.d;
    let mut rows = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let s = SpectrumTable::new(d, l)?;
        let n = s.vertex_count() as f64;
        let row = OracleRow {
            l,
            ln_l: (l as f64).ln(),
            variance: s.variance(),
            trace_residual: (s.trace() - 2.0 * d as f64 * n).abs() / n,
        };
        ctx.estimates.push(Estimate::exact(
            "variance",
            Some(l),
            "spectral_sum",
            row.variance,
        ));
        rows.push(row);
    }
    if rows.len() >= 2 {
        let fit = linear_fit(
            &rows.iter().map(|r| r.ln_l).collect::<Vec<_>>(),
            &rows.iter().map(|r| r.variance).collect::<Vec<_>>(),
        );
        ctx.estimates.push(Estimate::exact(
            "log_fit_slope",
            None,
            "least_squares",
            fit.slope,
        ));
        ctx.estimates.push(Estimate::exact(
            "log_fit_intercept",
            None,
            "least_squares",
            fit.intercept,
        ));
        ctx.estimates
            .push(Estimate::exact("log_fit_r2", None, "least_squares", fit.r2));
    }
    let worst = rows.iter().map(|r| r.trace_residual).fold(0.0, f64::max);
    ctx.check("trace_identity".into(), worst, 1e-9, worst <= 1e-9);
    ctx.art.write_csv("oracle.csv", &rows)
}

#[derive(Serialize)]
struct VarianceRow {
    #[serde(rename = "L")]
    l: usize,
    estimate: f64,
    stderr: f64,
    n: usize,
    tau_int: f64,
    batches: f64,
    acceptance_rate: f64,
}

#[derive(Serialize)]
struct SampleRow {
    #[serde(rename = "L")]
    l: usize,
    chain: usize,
    index: usize,
    observable: f64,
    phi0: f64,
}

/// Per-chain checkpoint: the chain state followed by its retained observations.
fn encode_checkpoint(state: &ChainState, obs: &[(f64, f64)]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    state.write(&mut buf)?;
    buf.write_all(&(obs.len() as u64).to_le_bytes())?;
    for &(a, b) in obs {
        buf.write_all(&a.to_le_bytes())?;
        buf.write_all(&b.to_le_bytes())?;
    }
    Ok(buf)
}

fn decode_checkpoint(bytes: &[u8]) -> anyhow::Result<(ChainState, Vec<(f64, f64)>)> {
    let mut r = Cursor::new(bytes);
    let state = ChainState::read(&mut r)?;
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut word)?;
        let a = f64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        obs.push((a, f64::from_le_bytes(word)));
    }
    Ok((state, obs))
}

/// Write-then-rename so an interrupted write never leaves a torn checkpoint.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

type ChainOutput = (Vec<(f64, f64)>, f64);

#[allow(clippy::too_many_arguments)]
fn run_chain(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    prefix: &str,
    index: usize,
    dir: &Path,
    target: usize,
    every: usize,
    observable: gradphi::estimators::VarianceObservable,
    writer: &mpsc::Sender<(PathBuf, Vec<u8>)>,
) -> anyhow::Result<ChainOutput> {
    let path = dir.join(format!("chain{index}.ckpt"));
    let (mut chain, mut obs) = match fs::read(&path) {
        Ok(bytes) => {
            let (state, obs) = decode_checkpoint(&bytes)
                .with_context(|| format!("corrupt checkpoint {}", path.display()))?;
            if state.seed != cfg.seed || state.path != format!("{prefix}/chain/{index}") {
                return Err(gradphi::Error::Checkpoint(format!(
                    "{} belongs to another stream",
                    path.display()
                ))
                .into());
            }
            (GibbsChain::restore(torus, &state)?, obs)
        }
        Err(_) => (GibbsChain::new(torus, cfg, prefix, index), Vec::new()),
    };
    let save = |chain: &GibbsChain, obs: &[(f64, f64)]| -> anyhow::Result<()> {
        writer
            .send((path.clone(), encode_checkpoint(&chain.state(), obs)?))
            .map_err(|_| anyhow::anyhow!("checkpoint writer stopped"))
    };
    if !chain.is_burned_in() {
        chain.burn_in(torus, v, cfg)?;
        save(&chain, &obs)?;
    }
    while obs.len() < target {
        let stop = (obs.len() + every).min(target);
        while obs.len() < stop {
            let phi = chain.next_sample(torus, v, cfg)?;
            obs.push(variance_observation(phi, observable));
        }
        save(&chain, &obs)?;
    }
    obs.truncate(target);
    Ok((obs, chain.diagnostics().acceptance_rate))
}

fn variance_sweep(ctx: &mut Ctx, stop_after: Option<usize>) -> anyhow::Result<()> {
    let sec = ctx.cfg.variance.clone();
    let target = stop_after.map_or(sec.samples_per_chain, |s| s.min(sec.samples_per_chain));
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(ctx.cfg.torus.d, l)?;
        let lcfg = ctx.langevin(l);
        let prefix = format!("variance/L{l}");
        ctx.streams
            .push(range(&format!("{prefix}/chain"), lcfg.chain_count));
        let dir = ctx.art.dir.join("checkpoints").join(format!("L{l}"));
        fs::create_dir_all(&dir)?;
        let (tx, rx) = mpsc::channel::<(PathBuf, Vec<u8>)>();
        let v = ctx.v;
        let result: anyhow::Result<Vec<ChainOutput>> = std::thread::scope(|s| {
            let writer = s.spawn(move || -> std::io::Result<()> {
                for (path, bytes) in rx {
                    write_atomic(&path, &bytes)?;
                }
                Ok(())
            });
            let out = (0..lcfg.chain_count)
                .into_par_iter()
                .map(|c| {
                    run_chain(
                        &torus,
                        v,
                        &lcfg,
                        &prefix,
                        c,
                        &dir,
                        target,
                        sec.checkpoint_every,
                        sec.observable,
                        &tx,
                    )
                })
                .collect();
            drop(tx);
            writer.join().expect("writer thread")?;
            out
        });
        let chains = match result {
            Ok(c) => c,
            Err(e) => {
                ctx.fail(format!("L={l}"), e);
                continue;
            }
        };
        for (c, (obs, _)) in chains.iter().enumerate() {
            for (i, &(o, p)) in obs.iter().enumerate() {
                samples.push(SampleRow {
                    l,
                    chain: c,
                    index: i,
                    observable: o,
                    phi0: p,
                });
            }
        }
        if target < sec.samples_per_chain {
            ctx.partial = true;
        }
        let obs: Vec<Vec<(f64, f64)>> = chains.iter().map(|c| c.0.clone()).collect();
        let acc = mean(&chains.iter().map(|c| c.1).collect::<Vec<_>>());
        match variance_from_observations(&obs, acc) {
            Ok(r) => {
                rows.push(VarianceRow {
                    l,
                    estimate: r.estimate,
                    stderr: r.stderr,
                    n: r.n,
                    tau_int: r.extra["tau_int"],
                    batches: r.extra["batches"],
                    acceptance_rate: acc,
                });
                ctx.estimates
                    .push(Estimate::from_report("variance", Some(l), &r));
            }
            Err(e) => ctx.fail(format!("L={l}"), e),
        }
    }
    ctx.art.write_csv("variance.csv", &rows)?;
    ctx.art.write_csv("variance_samples.csv", &samples)
}

#[derive(Serialize)]
struct HsRow {
    #[serde(rename = "L")]
    l: usize,
    hs: f64,
    hs_stderr: f64,
    truncation_bound: f64,
    reference: f64,
    reference_stderr: f64,
    reference_method: String,
    z: f64,
}

#[derive(Serialize)]
struct TrajectoryRow {
    #[serde(rename = "L")]
    l: usize,
    trajectory: usize,
    integral: f64,
}

fn hs_check(ctx: &mut Ctx) -> anyhow::Result<()> {
    let d = ctx.cfg.torus.d;
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(d, l)?;
        let lcfg = ctx.langevin(l);
        let prefix = format!("hs/L{l}");
        let hs = match hs_variance(&torus, ctx.v, &lcfg, &ctx.cfg.pde, &prefix) {
            Ok(r) => r,
            Err(e) => {
                ctx.fail(format!("L={l} heat kernel"), e);
                continue;
            }
        };
        ctx.estimates
            .push(Estimate::from_report("hs_variance", Some(l), &hs));
        for p in &hs.curve {
            trajectories.push(TrajectoryRow {
                l,
                trajectory: p.x as usize,
                integral: p.y,
            });
        }
        let row = if let Some(c) = ctx.v.constant_curvature() {
            let exact = gaussian_variance(d, l)? / c;
            let diff = (hs.estimate - exact).abs();
            ctx.check(format!("L={l} |hs - oracle|"), diff, 1e-6, diff <= 1e-6);
            ctx.estimates.push(Estimate::exact(
                "oracle_variance",
                Some(l),
                "spectral_sum",
                exact,
            ));
            HsRow {
                l,
                hs: hs.estimate,
                hs_stderr: hs.stderr,
                truncation_bound: hs.truncation_bound.unwrap_or(0.0),
                reference: exact,
                reference_stderr: 0.0,
                reference_method: "spectral_sum".into(),
                z: f64::NAN,
            }
        } else {
            ctx.streams
                .push(range(&format!("{prefix}/starts/chain"), lcfg.chain_count));
            ctx.streams.push(range(
                &format!("{prefix}/trajectory"),
                ctx.cfg.pde.trajectories,
            ));
            ctx.streams
                .push(range(&format!("{prefix}/mc/chain"), lcfg.chain_count));
            let per_chain = ctx.cfg.variance.samples_per_chain;
            let mc = match mc_variance(
                &torus,
                ctx.v,
                &lcfg,
                per_chain,
                ctx.cfg.variance.observable,
                &format!("{prefix}/mc"),
            ) {
                Ok(r) => r,
                Err(e) => {
                    ctx.fail(format!("L={l} direct sampling"), e);
                    continue;
                }
            };
            let z = (hs.estimate - mc.estimate) / combined_sigma(&hs, &mc);
            ctx.check(format!("L={l} |z|"), z.abs(), 3.0, z.abs() < 3.0);
            ctx.estimates
                .push(Estimate::from_report("mc_variance", Some(l), &mc));
            HsRow {
                l,
                hs: hs.estimate,
                hs_stderr: hs.stderr,
                truncation_bound: hs.truncation_bound.unwrap_or(0.0),
                reference: mc.estimate,
                reference_stderr: mc.stderr,
                reference_method: mc.method.clone(),
                z,
            }
        };
        rows.push(row);
    }
    ctx.art.write_csv("hs_check.csv", &rows)?;
    ctx.art.write_csv("hs_trajectories.csv", &trajectories)
}

#[derive(Serialize)]
struct DecayRow {
    #[serde(rename = "L")]
    l: usize,
    t: f64,
    mean: f64,
    stderr: f64,
}

fn decay(ctx: &mut Ctx) -> anyhow::Result<()> {
    let d = ctx.cfg.torus.d;
    let sec = ctx.cfg.decay.clone();
    let mut rows = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(d, l)?;
        let lcfg = ctx.langevin(l);
        let prefix = format!("decay/L{l}");
        ctx.streams
            .push(range(&format!("{prefix}/starts/chain"), lcfg.chain_count));
        ctx.streams.push(range(
            &format!("{prefix}/trajectory"),
            ctx.cfg.pde.trajectories,
        ));
        let grid = geometric_grid(sec.t_min, sec.horizon(l), sec.per_decade);
        match heat_kernel_decay(
            &torus,
            ctx.v,
            &lcfg,
            &ctx.cfg.pde,
            &grid,
            sec.fit_window(l),
            &prefix,
        ) {
            Ok(r) => {
                rows.extend(r.curve.iter().map(|p| DecayRow {
                    l,
                    t: p.x,
                    mean: p.y,
                    stderr: p.stderr,
                }));
                let target = -(d as f64) / 2.0;
                let off = (r.estimate - target).abs();
                ctx.check(format!("L={l} |slope + d/2|"), off, 0.3, off <= 0.3);
                ctx.estimates
                    .push(Estimate::from_report("decay_slope", Some(l), &r));
            }
            Err(e) => ctx.fail(format!("L={l}"), e),
        }
    }
    ctx.art.write_csv("decay.csv", &rows)
}

#[derive(Serialize)]
struct TailRow {
    #[serde(rename = "L")]
    l: usize,
    threshold: f64,
    survival: f64,
}

fn tails(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(ctx.cfg.torus.d, l)?;
        let lcfg = ctx.langevin(l);
        let prefix = format!("tails/L{l}");
        ctx.streams
            .push(range(&format!("{prefix}/chain"), lcfg.chain_count));
        ctx.streams.push(format!(
            "gradient_tail/bootstrap/{{0..63}} (seed {})",
            ctx.cfg.seed
        ));
        let sampled = sample_gibbs(
            &torus,
            ctx.v,
            &lcfg,
            &prefix,
            ctx.cfg.tails.samples_per_chain,
            |phi| {
                let mut g = vec![0.0; torus.edge_count()];
                gradient_field(&torus, phi, &mut g);
                g
            },
        );
        let samples: Vec<f64> = match sampled {
            Ok((obs, _)) => obs.into_iter().flatten().flatten().collect(),
            Err(e) => {
                ctx.fail(format!("L={l}"), e);
                continue;
            }
        };
        match gradient_tail(&samples, ctx.cfg.seed) {
            Ok(r) => {
                rows.extend(r.curve.iter().map(|p| TailRow {
                    l,
                    threshold: p.x,
                    survival: p.y,
                }));
                ctx.estimates
                    .push(Estimate::from_report("tail_exponent", Some(l), &r));
            }
            Err(e) => ctx.fail(format!("L={l}"), e),
        }
    }
    ctx.art.write_csv("tails.csv", &rows)
}

#[derive(Serialize)]
struct ConfinementRow {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "T")]
    t: f64,
    probability: f64,
    stderr: f64,
    binomial_stderr: f64,
}

fn exit_time(ctx: &mut Ctx) -> anyhow::Result<()> {
    let sec = ctx.cfg.exit_time.clone();
    let radius = sec
        .radius
        .or(ctx.v.r_v())
        .context("exit_time.radius is required")?;
    let params = EvolveParams::new(sec.node_spacing, sec.dt);
    let mut rows = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(ctx.cfg.torus.d, l)?;
        let lcfg = ctx.langevin(l);
        let prefix = format!("exit/L{l}");
        ctx.streams
            .push(range(&format!("{prefix}/starts/chain"), lcfg.chain_count));
        ctx.streams
            .push(range(&format!("{prefix}/trajectory"), sec.trajectories));
        let curve = match confinement_probability(
            &torus,
            ctx.v,
            &lcfg,
            &params,
            radius,
            &sec.t_grid,
            sec.trajectories,
            &prefix,
        ) {
            Ok(c) => c,
            Err(e) => {
                ctx.fail(format!("L={l}"), e);
                continue;
            }
        };
        for i in 0..curve.t.len() {
            rows.push(ConfinementRow {
                l,
                t: curve.t[i],
                probability: curve.probability[i],
                stderr: curve.stderr[i],
                binomial_stderr: curve.binomial_stderr[i],
            });
            let mut e = Estimate::exact(
                &format!("confinement_T{}", curve.t[i]),
                Some(l),
                "confinement_exit_times",
                curve.probability[i],
            );
            e.stderr = curve.stderr[i];
            e.n = curve.pairs;
            e.extra.insert("radius".into(), radius);
            ctx.estimates.push(e);
        }
        for (i, &(dm, ds)) in curve.decreases.iter().enumerate() {
            let z = dm / ds;
            ctx.check(
                format!("L={l} decrease T={}→{} in σ", curve.t[i], curve.t[i + 1]),
                z,
                3.0,
                z > 3.0,
            );
        }
    }
    ctx.art.write_csv("confinement.csv", &rows)
}

#[derive(Serialize)]
struct ModerationRow {
    #[serde(rename = "L")]
    l: usize,
    repeat: usize,
    node: usize,
    edge: usize,
    lhs: f64,
    rhs: f64,
    ratio: f64,
}

fn inequalities(ctx: &mut Ctx) -> anyhow::Result<()> {
    let d = ctx.cfg.torus.d;
    let df = d as f64;
    let mut tables = Vec::new();
    for p in [df + 1.0, df + 2.0] {
        for pp in [df + 1.0, df + 2.0] {
            let t = exponent_table(d, p, pp)?;
            let worst = t
                .identity_residuals()
                .iter()
                .fold(0.0f64, |m, r| m.max(r.abs()));
            ctx.check(
                format!("exponents p={p} p'={pp}"),
                worst,
                1e-12,
                worst <= 1e-12,
            );
            tables.push(t);
        }
    }
    ctx.art.write_csv("exponents.csv", &tables)?;

    let (p, _) = ctx.cfg.moderation.exponents(d);
    let weights = ModerationWeights::calibrated(d, p)?;
    let verdict = check_k_properties(&weights)?;
    ctx.estimates
        .push(Estimate::exact("delta", None, "calibration", weights.delta));
    ctx.check(
        "kernel integral margin".into(),
        verdict.integral_margin,
        0.0,
        verdict.integral_margin > 0.0,
    );
    ctx.check(
        "kernel convolution margin".into(),
        verdict.convolution_margin,
        0.0,
        verdict.convolution_margin > 0.0,
    );
    let quad = gradphi::quad::integrate_to_infinity(|t| weights.k(t), 0.0, 1e-12, 0.0)?;
    let err = (quad - weights.total_k()).abs();
    ctx.check("∫k = δ/(p+2)".into(), err, 1e-8, err <= 1e-8);

    let exp = ctx.cfg.moderation.experiment();
    let mut rows = Vec::new();
    for l in ctx.cfg.side_lengths() {
        let torus = Torus::new(d, l)?;
        let mut p99s = Vec::new();
        for r in 0..ctx.cfg.moderation.repeats {
            let seed = ctx.cfg.seed + r as u64;
            let lcfg = ctx.cfg.sampler.langevin(l, seed);
            let prefix = format!("moderation/L{l}");
            ctx.streams
                .push(format!("{prefix}/start/chain/0 (seed {seed})"));
            ctx.streams
                .push(format!("{prefix}/trajectory (seed {seed})"));
            ctx.streams.push(format!("{prefix}/pairs (seed {seed})"));
            let stats = match moderation_experiment(&torus, ctx.v, &lcfg, &exp, weights, &prefix) {
                Ok(s) => s,
                Err(e) => {
                    ctx.fail(format!("L={l} repeat {r}"), e);
                    continue;
                }
            };
            rows.extend(stats.samples.iter().map(|s| ModerationRow {
                l,
                repeat: r,
                node: s.node,
                edge: s.edge,
                lhs: s.lhs,
                rhs: s.rhs,
                ratio: s.ratio,
            }));
            let mut extra = BTreeMap::new();
            extra.insert("median".to_string(), stats.median);
            extra.insert("max".to_string(), stats.max);
            extra.insert("p99_over_median".to_string(), stats.p99 / stats.median);
            ctx.estimates.push(Estimate {
                name: format!("moderation_p99_repeat{r}"),
                l: Some(l),
                estimate: stats.p99,
                stderr: f64::NAN,
                n: stats.samples.len(),
                method: "empirical_quantile".into(),
                truncation_bound: 0.0,
                extra,
            });
            let spread = stats.p99 / stats.median;
            ctx.check(
                format!("L={l} repeat {r} p99/median"),
                spread,
                10.0,
                spread < 10.0,
            );
            p99s.push(stats.p99);
        }
        if p99s.len() >= 2 {
            let hi = p99s.iter().cloned().fold(f64::MIN, f64::max);
            let lo = p99s.iter().cloned().fold(f64::MAX, f64::min);
            ctx.check(
                format!("L={l} p99 spread across repeats"),
                hi / lo,
                2.0,
                hi / lo <= 2.0,
            );
        }
    }
    ctx.art.write_csv("moderation.csv", &rows)
}
